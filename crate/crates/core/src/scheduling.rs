//! Per-round job prioritisation and loss-based termination.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::state::{ClusterState, JobId, JobRecord, JobState, PlacementKind};

/// Jobs in priority order with the GPU count granted to each.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrioritizedJobs {
    pub ordered: Vec<(JobId, u32)>,
}

impl PrioritizedJobs {
    /// Every job granted its full demand, in the given order.
    pub fn at_demand<'a>(jobs: impl IntoIterator<Item = &'a JobRecord>) -> Self {
        Self { ordered: jobs.into_iter().map(|j| (j.job_id, j.gpu_demand)).collect() }
    }

    pub fn ids(&self) -> Vec<JobId> {
        self.ordered.iter().map(|(id, _)| *id).collect()
    }

    pub fn len(&self) -> usize {
        self.ordered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordered.is_empty()
    }
}

/// Orders the schedulable jobs for one round.
pub trait SchedulingPolicy: Send + Sync + fmt::Debug {
    fn rank(&self, jobs: &JobState, cluster: &ClusterState) -> PrioritizedJobs;

    /// Jobs to stop before their full iteration count; called once per round
    /// after progress is credited.
    fn terminations(&self, _jobs: &JobState) -> Vec<JobId> {
        Vec::new()
    }

    fn kind_label(&self) -> String;

    fn box_clone(&self) -> Box<dyn SchedulingPolicy>;
}

impl Clone for Box<dyn SchedulingPolicy> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    Fifo,
    Srtf,
    Las,
    DiscreteLas,
    OptimusLike,
}

impl SchedulerKind {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Fifo => "fifo",
            Self::Srtf => "srtf",
            Self::Las => "las",
            Self::DiscreteLas => "dlas",
            Self::OptimusLike => "optimus",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub kind: SchedulerKind,
    /// Ascending attained-service queue boundaries, GPU-seconds.
    pub dlas_thresholds: Vec<f64>,
    pub loss_termination: bool,
    /// Relative slack on `target_loss`: a job stops once its latest loss is
    /// at most `target_loss * (1 + loss_threshold)`.
    pub loss_threshold: f64,
}

impl SchedulerConfig {
    pub fn new(kind: SchedulerKind) -> Self {
        Self { kind, dlas_thresholds: vec![3600.0, 36000.0], loss_termination: false, loss_threshold: 0.002 }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.dlas_thresholds.iter().any(|t| !(*t > 0.0)) || self.dlas_thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err("dlas_thresholds must be positive and strictly ascending".into());
        }
        if !(self.loss_threshold >= 0.0) {
            return Err("loss_threshold must be non-negative".into());
        }
        Ok(())
    }
}

fn by_arrival(a: &JobRecord, b: &JobRecord) -> Ordering {
    a.arrival_time.total_cmp(&b.arrival_time).then(a.job_id.cmp(&b.job_id))
}

fn sorted_by_key<'a>(jobs: &[&'a JobRecord], key: impl Fn(&JobRecord) -> f64) -> Vec<&'a JobRecord> {
    let mut keyed: Vec<(f64, &JobRecord)> = jobs.iter().map(|j| (key(j), *j)).collect();
    keyed.sort_by(|(ka, a), (kb, b)| ka.total_cmp(kb).then_with(|| by_arrival(a, b)));
    keyed.into_iter().map(|(_, j)| j).collect()
}

/// Earliest arrival first; ties by job id.
pub fn rank_fifo(jobs: &[&JobRecord]) -> PrioritizedJobs {
    let mut v = jobs.to_vec();
    v.sort_by(|a, b| by_arrival(a, b));
    PrioritizedJobs::at_demand(v)
}

/// Estimated seconds of work left at the job's full demand, consolidated.
pub fn remaining_time(job: &JobRecord) -> f64 {
    match job.profile.iter_time(job.gpu_demand, PlacementKind::Consolidated) {
        Ok(t) => job.remaining_iterations() as f64 * t,
        Err(_) => f64::INFINITY,
    }
}

/// Shortest remaining time first; ties by arrival then id.
pub fn rank_srtf(jobs: &[&JobRecord]) -> PrioritizedJobs {
    PrioritizedJobs::at_demand(sorted_by_key(jobs, remaining_time))
}

/// Least attained GPU-service first; ties by arrival then id.
pub fn rank_las(jobs: &[&JobRecord]) -> PrioritizedJobs {
    PrioritizedJobs::at_demand(sorted_by_key(jobs, |j| j.attained_service))
}

/// Queue index for discretised LAS: first threshold strictly above the
/// job's service, else the last queue.
pub fn dlas_queue(service: f64, thresholds: &[f64]) -> usize {
    thresholds.iter().position(|t| service < *t).unwrap_or(thresholds.len())
}

/// Multi-queue LAS: lower queues first, arrival order within a queue.
pub fn rank_discrete_las(jobs: &[&JobRecord], thresholds: &[f64]) -> PrioritizedJobs {
    PrioritizedJobs::at_demand(sorted_by_key(jobs, |j| dlas_queue(j.attained_service, thresholds) as f64))
}

fn consolidated_time(job: &JobRecord, gpus: u32) -> Option<f64> {
    job.profile.iter_time(gpus, PlacementKind::Consolidated).ok()
}

/// Convergence-ordered allocation with marginal-gain top-up.
///
/// Jobs are ordered by estimated time to convergence on one GPU and granted
/// one GPU each while `gpu_budget` lasts. Remaining GPUs go one at a time to
/// the job whose remaining run time shrinks the most from one more GPU,
/// never beyond its demand. Jobs left without a GPU trail the output with a
/// nominal grant of one.
pub fn rank_optimus_like(jobs: &[&JobRecord], gpu_budget: u32) -> PrioritizedJobs {
    let order =
        sorted_by_key(jobs, |j| consolidated_time(j, 1).map_or(f64::INFINITY, |t| j.remaining_iterations() as f64 * t));
    let granted_count = order.len().min(gpu_budget as usize);
    let mut grants: Vec<u32> = vec![1; order.len()];
    let mut left = gpu_budget.saturating_sub(granted_count as u32);

    let gain = |j: &JobRecord, g: u32| -> f64 {
        if g >= j.gpu_demand {
            return f64::NEG_INFINITY;
        }
        match (consolidated_time(j, g), consolidated_time(j, g + 1)) {
            (Some(a), Some(b)) => j.remaining_iterations() as f64 * (a - b),
            _ => f64::NEG_INFINITY,
        }
    };
    while left > 0 {
        let best = (0..granted_count)
            .map(|i| (i, gain(order[i], grants[i])))
            .filter(|(_, g)| *g > 0.0)
            .max_by(|(ia, ga), (ib, gb)| ga.total_cmp(gb).then(order[*ib].job_id.cmp(&order[*ia].job_id)));
        let Some((i, _)) = best else { break };
        grants[i] += 1;
        left -= 1;
    }
    PrioritizedJobs { ordered: order.iter().zip(grants).map(|(j, g)| (j.job_id, g)).collect() }
}

/// Jobs that have converged and should stop now.
///
/// A job with `converge_at_fraction = f` stops once it has completed
/// `ceil(f * total_iterations)` iterations; a job with `target_loss` stops
/// once its latest reported loss is within `loss_threshold` of the target.
pub fn check_loss_termination(jobs: &JobState, cfg: &SchedulerConfig) -> Vec<JobId> {
    if !cfg.loss_termination {
        return Vec::new();
    }
    jobs.active
        .values()
        .filter(|j| {
            let by_fraction = j.converge_at_fraction.is_some_and(|f| {
                let need = (f * j.total_iterations as f64).ceil() as u64;
                j.completed_iterations >= need
            });
            let by_loss = match (j.target_loss, j.latest_metric("loss")) {
                (Some(target), Some(loss)) => loss <= target * (1.0 + cfg.loss_threshold),
                _ => false,
            };
            by_fraction || by_loss
        })
        .map(|j| j.job_id)
        .collect()
}

/// Scheduling policy selected by [`SchedulerConfig`].
#[derive(Debug, Clone)]
pub struct ConfiguredScheduler {
    pub config: SchedulerConfig,
}

impl ConfiguredScheduler {
    pub fn new(config: SchedulerConfig) -> Self {
        Self { config }
    }
}

impl SchedulingPolicy for ConfiguredScheduler {
    fn rank(&self, jobs: &JobState, cluster: &ClusterState) -> PrioritizedJobs {
        let list: Vec<&JobRecord> = jobs.active.values().collect();
        match self.config.kind {
            SchedulerKind::Fifo => rank_fifo(&list),
            SchedulerKind::Srtf => rank_srtf(&list),
            SchedulerKind::Las => rank_las(&list),
            SchedulerKind::DiscreteLas => rank_discrete_las(&list, &self.config.dlas_thresholds),
            SchedulerKind::OptimusLike => rank_optimus_like(&list, cluster.total_gpus()),
        }
    }

    fn terminations(&self, jobs: &JobState) -> Vec<JobId> {
        check_loss_termination(jobs, &self.config)
    }

    fn kind_label(&self) -> String {
        self.config.kind.label().to_string()
    }

    fn box_clone(&self) -> Box<dyn SchedulingPolicy> {
        Box::new(self.clone())
    }
}
