//! Round-based simulation loop, progress accounting and metrics.

use std::collections::{BTreeSet, VecDeque};
use std::ops::Range;

use serde::Serialize;
use thiserror::Error;

use crate::admission::{AdmissionConfig, AdmissionPolicy, ConfiguredAdmission};
use crate::placement::{ConfiguredPlacement, PlacementConfig, PlacementPolicy};
use crate::scheduling::{ConfiguredScheduler, SchedulerConfig, SchedulingPolicy};
use crate::state::{
    apply_decision, prune_finished, ClusterState, FinishedJob, JobId, JobRecord, JobState, NodeSpec, Phase,
    PlacementKind, Seconds, StateError,
};
use crate::workload::{to_micros, WorkloadError};

/// Rounds without progress after which a run is declared stuck.
pub const STALL_ROUNDS: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("job {job} demands {demand} GPUs but the cluster has {total}")]
    DemandExceedsCluster { job: JobId, demand: u32, total: u32 },
    #[error("no progress for {0} rounds")]
    Stalled(u64),
    #[error("{0} measured jobs unfinished at the horizon")]
    IncompleteWindow(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub round_len: Seconds,
    pub nodes: Vec<NodeSpec>,
    /// Job ids whose metrics are reported; `None`, or a range matching no
    /// job, measures every job.
    pub metrics_window: Option<Range<u32>>,
    pub seed: u64,
    pub horizon: Option<Seconds>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            round_len: 300.0,
            nodes: (0..32).map(NodeSpec::p3_8xlarge).collect(),
            metrics_window: Some(3000..4000),
            seed: 0,
            horizon: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.round_len > 0.0) || !self.round_len.is_finite() {
            return Err(EngineError::InvalidConfig("round_len must be positive".into()));
        }
        if self.nodes.is_empty() {
            return Err(EngineError::InvalidConfig("cluster has no nodes".into()));
        }
        if self.horizon.is_some_and(|h| !(h >= 0.0)) {
            return Err(EngineError::InvalidConfig("horizon must be non-negative".into()));
        }
        Ok(())
    }
}

/// Admission, scheduling and placement settings for one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicySpec {
    pub admission: AdmissionConfig,
    pub scheduler: SchedulerConfig,
    pub placement: PlacementConfig,
}

impl PolicySpec {
    pub fn validate(&self) -> Result<(), EngineError> {
        if !self.admission.is_valid() {
            return Err(EngineError::InvalidConfig("admission factor must be positive".into()));
        }
        self.scheduler.validate().map_err(EngineError::InvalidConfig)?;
        self.placement.validate().map_err(EngineError::InvalidConfig)
    }

    pub fn build(&self, seed: u64) -> Policies {
        Policies {
            admission: Box::new(ConfiguredAdmission::new(self.admission)),
            scheduler: Box::new(ConfiguredScheduler::new(self.scheduler.clone())),
            placement: Box::new(ConfiguredPlacement::new(self.placement.clone(), seed)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Policies {
    pub admission: Box<dyn AdmissionPolicy>,
    pub scheduler: Box<dyn SchedulingPolicy>,
    pub placement: Box<dyn PlacementPolicy>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobMetrics {
    pub job_id: JobId,
    pub arrival: Seconds,
    pub first_sched: Seconds,
    pub finish: Seconds,
    pub jct: Seconds,
    pub responsiveness: Seconds,
    pub preemptions: u32,
    pub gpu_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MetricsReport {
    pub per_job: Vec<JobMetrics>,
    pub avg_jct: Seconds,
    pub avg_responsiveness: Seconds,
    pub jct_cdf: Vec<Seconds>,
    pub avg_observed_bandwidth: f64,
    pub rounds_executed: u64,
}

/// Builds a report from finished jobs. `measured` selects jobs; `None`
/// keeps all of them.
pub fn compute_metrics(finished: &[FinishedJob], measured: Option<&BTreeSet<JobId>>) -> MetricsReport {
    let mut per_job: Vec<JobMetrics> = finished
        .iter()
        .filter(|f| measured.is_none_or(|m| m.contains(&f.job_id)))
        .map(|f| {
            let first = f.first_scheduled_time.unwrap_or(f.finish_time);
            JobMetrics {
                job_id: f.job_id,
                arrival: f.arrival_time,
                first_sched: first,
                finish: f.finish_time,
                jct: f.finish_time - f.arrival_time,
                responsiveness: first - f.arrival_time,
                preemptions: f.preemptions,
                gpu_seconds: f.gpu_seconds,
            }
        })
        .collect();
    per_job.sort_by_key(|m| m.job_id);
    let n = per_job.len().max(1) as f64;
    let mut jct_cdf: Vec<f64> = per_job.iter().map(|m| m.jct).collect();
    jct_cdf.sort_by(f64::total_cmp);
    MetricsReport {
        avg_jct: per_job.iter().map(|m| m.jct).sum::<f64>() / n,
        avg_responsiveness: per_job.iter().map(|m| m.responsiveness).sum::<f64>() / n,
        jct_cdf,
        per_job,
        avg_observed_bandwidth: 0.0,
        rounds_executed: 0,
    }
}

/// Credits one round of execution to a running job.
///
/// The first round after a launch or migration loses `restart_overhead`
/// seconds. Progress is counted in whole microseconds with the sub-iteration
/// remainder carried to the next round.
pub fn credit_progress(
    job: &mut JobRecord,
    seconds_run: Seconds,
    kind: PlacementKind,
    gpus: u32,
) -> Result<(), WorkloadError> {
    let mut effective = to_micros(seconds_run);
    if job.pending_restart {
        effective = effective.saturating_sub(to_micros(job.restart_overhead));
        job.pending_restart = false;
    }
    let iter_time = job.profile.iter_time(gpus, kind)?;
    let iter_us = to_micros(iter_time).max(1);
    let acc = job.progress_carry_us + effective;
    job.completed_iterations = (job.completed_iterations + acc / iter_us).min(job.total_iterations);
    job.progress_carry_us = acc % iter_us;
    job.attained_service += gpus as f64 * seconds_run;
    if job.latest_metric("per_iter_time") != Some(iter_time) {
        job.push_metric("per_iter_time", iter_time);
    }
    if let Some(loss) = job.profile.loss_at(job.completed_iterations) {
        job.push_metric("loss", loss);
    }
    Ok(())
}

/// A live simulation. Clone it to fork an independent copy.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub config: SimConfig,
    now: Seconds,
    started: bool,
    rounds: u64,
    idle_rounds: u64,
    cluster: ClusterState,
    jobs: JobState,
    /// Not yet arrived, ascending by arrival then id.
    future: VecDeque<JobRecord>,
    /// Arrived this round, awaiting admission.
    incoming: Vec<JobRecord>,
    measured: Option<BTreeSet<JobId>>,
    measured_finished: usize,
    bandwidth_sum: f64,
    bandwidth_events: u64,
    policies: Policies,
}

impl Simulation {
    pub fn new(config: SimConfig, mut trace: Vec<JobRecord>, policies: Policies) -> Result<Self, EngineError> {
        config.validate()?;
        let cluster = ClusterState::new(config.nodes.clone())?;
        let total = cluster.total_gpus();
        if let Some(j) = trace.iter().find(|j| j.gpu_demand > total || j.gpu_demand == 0) {
            return Err(EngineError::DemandExceedsCluster { job: j.job_id, demand: j.gpu_demand, total });
        }
        let mut ids = BTreeSet::new();
        if let Some(j) = trace.iter().find(|j| !ids.insert(j.job_id)) {
            return Err(EngineError::InvalidConfig(format!("duplicate job id {}", j.job_id)));
        }
        trace.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time).then(a.job_id.cmp(&b.job_id)));
        let measured = config.metrics_window.as_ref().and_then(|w| {
            let set: BTreeSet<JobId> = ids.iter().filter(|id| w.contains(&id.0)).copied().collect();
            (!set.is_empty()).then_some(set)
        });
        Ok(Self {
            config,
            now: 0.0,
            started: false,
            rounds: 0,
            idle_rounds: 0,
            cluster,
            jobs: JobState::new(),
            future: trace.into(),
            incoming: Vec::new(),
            measured,
            measured_finished: 0,
            bandwidth_sum: 0.0,
            bandwidth_events: 0,
            policies,
        })
    }

    pub fn now(&self) -> Seconds {
        self.now
    }

    pub fn rounds_executed(&self) -> u64 {
        self.rounds
    }

    pub fn cluster(&self) -> &ClusterState {
        &self.cluster
    }

    pub fn jobs(&self) -> &JobState {
        &self.jobs
    }

    pub fn policies(&self) -> &Policies {
        &self.policies
    }

    /// Ids of jobs arrived but not finished: active, held or awaiting admission.
    pub fn unfinished_ids(&self) -> BTreeSet<JobId> {
        let mut ids: BTreeSet<JobId> = self.jobs.active.keys().copied().collect();
        ids.extend(self.policies.admission.held_ids());
        ids.extend(self.incoming.iter().map(|j| j.job_id));
        ids
    }

    /// Restricts reporting to `ids`.
    pub fn set_measured(&mut self, ids: BTreeSet<JobId>) {
        self.measured_finished = self.jobs.finished_log().iter().filter(|f| ids.contains(&f.job_id)).count();
        self.measured = Some(ids);
    }

    /// Discards every job that has not arrived yet.
    pub fn drop_future_arrivals(&mut self) {
        self.future.clear();
    }

    /// Replaces admission and scheduling; held jobs move to the new
    /// admission policy in their original order.
    pub fn swap_policies(&mut self, mut admission: Box<dyn AdmissionPolicy>, scheduler: Box<dyn SchedulingPolicy>) {
        admission.requeue(self.policies.admission.take_held());
        self.policies.admission = admission;
        self.policies.scheduler = scheduler;
    }

    /// True once every measured job (or every job) has finished.
    pub fn is_done(&self) -> bool {
        match &self.measured {
            Some(m) => self.measured_finished == m.len(),
            None => self.future.is_empty() && self.unfinished_ids().is_empty(),
        }
    }

    fn past_horizon(&self) -> bool {
        self.config.horizon.is_some_and(|h| self.now >= h)
    }

    /// First half of a round: move the clock to the next boundary, credit
    /// the round just run, apply terminations, prune and collect arrivals.
    pub fn advance(&mut self) -> Result<(), EngineError> {
        let len = self.config.round_len;
        let mut progressed = false;
        if self.started {
            let idle = self.jobs.active.is_empty()
                && self.incoming.is_empty()
                && self.policies.admission.held_ids().is_empty();
            match self.future.front() {
                Some(next) if idle && next.arrival_time > self.now + len => {
                    self.now = (next.arrival_time / len).ceil() * len;
                }
                _ => self.now += len,
            }
            for job in self.jobs.active.values_mut().filter(|j| j.phase == Phase::Running) {
                let kind = job.placement_kind.unwrap_or(PlacementKind::Consolidated);
                let gpus = job.allocation.len() as u32;
                credit_progress(job, len, kind, gpus)?;
                progressed = true;
            }
            for id in self.policies.scheduler.terminations(&self.jobs) {
                if let Some(j) = self.jobs.active.get_mut(&id) {
                    j.phase = Phase::Terminated;
                }
            }
        }
        self.started = true;
        let done = prune_finished(&mut self.cluster, &mut self.jobs, self.now);
        if let Some(m) = &self.measured {
            self.measured_finished += done.iter().filter(|id| m.contains(id)).count();
        }
        progressed |= !done.is_empty();
        while self.future.front().is_some_and(|j| j.arrival_time <= self.now) {
            let j = self.future.pop_front().expect("front checked");
            self.incoming.push(j);
            progressed = true;
        }
        self.idle_rounds = if progressed { 0 } else { self.idle_rounds + 1 };
        if self.idle_rounds >= STALL_ROUNDS {
            return Err(EngineError::Stalled(self.idle_rounds));
        }
        Ok(())
    }

    /// Second half of a round: admit, rank, place and apply.
    pub fn decide(&mut self) -> Result<(), EngineError> {
        let arrived = std::mem::take(&mut self.incoming);
        for mut j in self.policies.admission.admit(arrived, &self.jobs, &self.cluster) {
            j.phase = Phase::Admitted;
            self.jobs.insert(j);
        }
        let ranked = self.policies.scheduler.rank(&self.jobs, &self.cluster);
        let decision = self.policies.placement.place(&ranked, &self.cluster, &self.jobs);
        apply_decision(&mut self.cluster, &mut self.jobs, &decision, self.now)?;
        for c in &decision.local_choices {
            self.bandwidth_sum += c.bandwidth;
            self.bandwidth_events += 1;
        }
        self.rounds += 1;
        Ok(())
    }

    pub fn step(&mut self) -> Result<(), EngineError> {
        self.advance()?;
        self.decide()
    }

    /// Runs until the measured jobs finish or the horizon passes.
    pub fn run_to_end(&mut self) -> Result<(), EngineError> {
        while !self.is_done() && !self.past_horizon() {
            self.step()?;
        }
        Ok(())
    }

    /// Report over measured jobs; errors if any is unfinished.
    pub fn report(&self) -> Result<MetricsReport, EngineError> {
        if !self.is_done() {
            let missing = match &self.measured {
                Some(m) => m.len() - self.measured_finished,
                None => self.unfinished_ids().len() + self.future.len(),
            };
            return Err(EngineError::IncompleteWindow(missing));
        }
        Ok(self.report_partial())
    }

    /// Report in which unfinished measured jobs count as finishing now.
    pub fn report_partial(&self) -> MetricsReport {
        let mut log = self.jobs.finished_log().to_vec();
        let mut pending: Vec<&JobRecord> = self.jobs.active.values().collect();
        let held = self.policies.admission.clone().take_held();
        pending.extend(held.iter());
        pending.extend(self.incoming.iter());
        for j in pending {
            log.push(FinishedJob {
                job_id: j.job_id,
                arrival_time: j.arrival_time,
                first_scheduled_time: j.first_scheduled_time,
                finish_time: self.now,
                gpu_demand: j.gpu_demand,
                preemptions: j.preemption_count,
                gpu_seconds: j.attained_service,
                terminated_early: false,
            });
        }
        let mut r = compute_metrics(&log, self.measured.as_ref());
        r.avg_observed_bandwidth =
            if self.bandwidth_events == 0 { 0.0 } else { self.bandwidth_sum / self.bandwidth_events as f64 };
        r.rounds_executed = self.rounds;
        r
    }
}

/// Runs `trace` to completion under `spec`.
pub fn run(config: SimConfig, trace: Vec<JobRecord>, spec: &PolicySpec) -> Result<MetricsReport, EngineError> {
    spec.validate()?;
    let policies = spec.build(config.seed);
    let mut sim = Simulation::new(config, trace, policies)?;
    sim.run_to_end()?;
    sim.report()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::placement::PlacementStrategy;
    use crate::scheduling::SchedulerKind;
    use crate::workload::ModelProfile;
    use std::sync::Arc;

    fn profile(t: f64, overhead: f64) -> Arc<ModelProfile> {
        Arc::new(ModelProfile::constant("m", t, overhead))
    }

    fn running(t: f64, overhead: f64) -> JobRecord {
        let mut j = JobRecord::new(JobId(0), 0.0, 1, 10_000, profile(t, overhead));
        j.phase = Phase::Running;
        j
    }

    #[test]
    fn credit_plain_round() {
        let mut j = running(1.0, 0.0);
        credit_progress(&mut j, 300.0, PlacementKind::Consolidated, 1).unwrap();
        assert_eq!(j.completed_iterations, 300);
        assert_eq!(j.attained_service, 300.0);
    }

    #[test]
    fn credit_pays_overhead_once() {
        let mut j = running(1.0, 30.0);
        j.pending_restart = true;
        credit_progress(&mut j, 300.0, PlacementKind::Consolidated, 1).unwrap();
        assert_eq!(j.completed_iterations, 270);
        credit_progress(&mut j, 300.0, PlacementKind::Consolidated, 1).unwrap();
        assert_eq!(j.completed_iterations, 570);
    }

    #[test]
    fn credit_carries_remainder() {
        let mut j = running(0.7, 0.0);
        credit_progress(&mut j, 300.0, PlacementKind::Consolidated, 1).unwrap();
        credit_progress(&mut j, 300.0, PlacementKind::Consolidated, 1).unwrap();
        assert_eq!(j.completed_iterations, 857);
    }

    #[test]
    fn metrics_examples() {
        let f = |id, arr: f64, fin: f64| FinishedJob {
            job_id: JobId(id),
            arrival_time: arr,
            first_scheduled_time: Some(arr),
            finish_time: fin,
            gpu_demand: 1,
            preemptions: 0,
            gpu_seconds: 0.0,
            terminated_early: false,
        };
        let r = compute_metrics(&[f(0, 0.0, 100.0)], None);
        assert_eq!((r.avg_jct, r.jct_cdf.clone()), (100.0, vec![100.0]));
        let r = compute_metrics(&[f(1, 0.0, 150.0), f(0, 0.0, 50.0)], None);
        assert_eq!((r.avg_jct, r.jct_cdf), (100.0, vec![50.0, 150.0]));
        let r = compute_metrics(&[], None);
        assert_eq!((r.avg_jct, r.avg_responsiveness), (0.0, 0.0));
    }

    fn spec() -> PolicySpec {
        PolicySpec {
            admission: AdmissionConfig::accept_all(),
            scheduler: SchedulerConfig::new(SchedulerKind::Fifo),
            placement: PlacementConfig::new(PlacementStrategy::FirstFree),
        }
    }

    #[test]
    fn single_job_walk() {
        // Arrives at 10, first boundary 300, 1000 iterations of 1 s plus 30 s
        // overhead: credited 270 then 300 per round, done after four rounds.
        let mut j = JobRecord::new(JobId(0), 10.0, 2, 1000, profile(1.0, 30.0));
        j.converge_at_fraction = None;
        let cfg = SimConfig { nodes: vec![NodeSpec::p3_8xlarge(0)], metrics_window: None, ..Default::default() };
        let r = run(cfg, vec![j], &spec()).unwrap();
        assert_eq!(r.per_job[0].responsiveness, 290.0);
        assert_eq!(r.per_job[0].finish, 300.0 + 4.0 * 300.0);
    }

    #[test]
    fn empty_trace_reports_zero() {
        let cfg = SimConfig { nodes: vec![NodeSpec::p3_8xlarge(0)], ..Default::default() };
        let r = run(cfg, vec![], &spec()).unwrap();
        assert!(r.per_job.is_empty());
        assert_eq!(r.avg_jct, 0.0);
    }

    #[test]
    fn oversized_job_rejected() {
        let cfg = SimConfig { nodes: vec![NodeSpec::p3_8xlarge(0)], ..Default::default() };
        let j = JobRecord::new(JobId(0), 0.0, 8, 10, profile(1.0, 0.0));
        assert!(matches!(run(cfg, vec![j], &spec()), Err(EngineError::DemandExceedsCluster { .. })));
    }

    #[test]
    fn horizon_leaves_window_incomplete() {
        let cfg = SimConfig {
            nodes: vec![NodeSpec::p3_8xlarge(0)],
            metrics_window: None,
            horizon: Some(600.0),
            ..Default::default()
        };
        let j = JobRecord::new(JobId(0), 0.0, 1, 100_000, profile(1.0, 0.0));
        assert!(matches!(run(cfg, vec![j], &spec()), Err(EngineError::IncompleteWindow(1))));
    }
}
