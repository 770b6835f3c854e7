//! Shared job and cluster state.
//!
//! Every policy reads [`JobState`] and [`ClusterState`]; only the engine
//! mutates them, through [`apply_decision`] and [`prune_finished`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::workload::ModelProfile;

/// Simulated time in seconds.
pub type Seconds = f64;
pub type GpuId = u32;
pub type NodeId = u32;

/// Dense job identifier assigned at trace load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(pub u32);

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementKind {
    /// The allocation spans the fewest nodes possible for its size.
    Consolidated,
    Spread,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Waiting,
    Admitted,
    Running,
    Suspended,
    Finished,
    Terminated,
}

#[derive(Debug, Error, PartialEq)]
pub enum StateError {
    #[error("GPU {gpu} is still occupied by job {holder} when launching job {job}")]
    Conflict { gpu: GpuId, holder: JobId, job: JobId },
    #[error("job {0} is not active")]
    UnknownJob(JobId),
    #[error("GPU {0} does not exist")]
    UnknownGpu(GpuId),
    #[error("job {job} cannot move from {from:?} to {to:?}")]
    InvalidTransition { job: JobId, from: Phase, to: Phase },
    #[error("invalid decision: {0}")]
    InvalidDecision(String),
    #[error("invalid node spec for node {node}: {reason}")]
    InvalidNode { node: NodeId, reason: String },
}

/// One job's demand, progress and lifecycle.
#[derive(Debug, Clone)]
pub struct JobRecord {
    pub job_id: JobId,
    pub arrival_time: Seconds,
    pub gpu_demand: u32,
    pub total_iterations: u64,
    /// Iteration-time table for the model this job trains.
    pub profile: Arc<ModelProfile>,
    pub completed_iterations: u64,
    /// GPU-seconds held so far.
    pub attained_service: f64,
    pub phase: Phase,
    pub first_scheduled_time: Option<Seconds>,
    pub finish_time: Option<Seconds>,
    pub restart_overhead: Seconds,
    pub placement_sensitive: bool,
    /// Generic per-job metric store (e.g. "loss", "per_iter_time").
    pub metrics: BTreeMap<String, Vec<f64>>,
    pub converge_at_fraction: Option<f64>,
    pub target_loss: Option<f64>,
    /// GPUs currently held; empty unless Running.
    pub allocation: Vec<GpuId>,
    pub placement_kind: Option<PlacementKind>,
    /// Set on every launch or migration; the next credited round pays
    /// `restart_overhead`.
    pub pending_restart: bool,
    /// Sub-iteration progress in microseconds.
    pub progress_carry_us: u64,
    pub preemption_count: u32,
}

impl JobRecord {
    pub fn new(
        job_id: JobId,
        arrival_time: Seconds,
        gpu_demand: u32,
        total_iterations: u64,
        profile: Arc<ModelProfile>,
    ) -> Self {
        let restart_overhead = profile.restart_overhead;
        let placement_sensitive = profile.placement_sensitive;
        Self {
            job_id,
            arrival_time,
            gpu_demand,
            total_iterations,
            profile,
            completed_iterations: 0,
            attained_service: 0.0,
            phase: Phase::Waiting,
            first_scheduled_time: None,
            finish_time: None,
            restart_overhead,
            placement_sensitive,
            metrics: BTreeMap::new(),
            converge_at_fraction: None,
            target_loss: None,
            allocation: Vec::new(),
            placement_kind: None,
            pending_restart: false,
            progress_carry_us: 0,
            preemption_count: 0,
        }
    }

    pub fn model_name(&self) -> &str {
        &self.profile.model_name
    }

    pub fn remaining_iterations(&self) -> u64 {
        self.total_iterations.saturating_sub(self.completed_iterations)
    }

    pub fn is_complete(&self) -> bool {
        self.completed_iterations >= self.total_iterations
    }

    pub fn push_metric(&mut self, key: &str, value: f64) {
        self.metrics.entry(key.to_string()).or_default().push(value);
    }

    pub fn latest_metric(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).and_then(|v| v.last().copied())
    }
}

/// Symmetric intra-node bandwidth table, Gbps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub node_id: NodeId,
    pub gpu_count: u32,
    pub gpu_type: String,
    pub intra_node_bw: Vec<Vec<f64>>,
    pub inter_node_bw: f64,
}

impl NodeSpec {
    /// Base GPU-to-GPU bandwidth of the default 4-GPU node, Gbps.
    pub const DEFAULT_BASE_BW: f64 = 50.0;
    pub const DEFAULT_INTER_NODE_BW: f64 = 10.0;

    /// Four-V100 node where GPU pairs (0,3) and (1,2) see twice the
    /// bandwidth of every other pair.
    pub fn p3_8xlarge(node_id: NodeId) -> Self {
        let b = Self::DEFAULT_BASE_BW;
        let mut bw = vec![vec![b; 4]; 4];
        for (i, row) in bw.iter_mut().enumerate() {
            row[i] = 0.0;
        }
        for (x, y) in [(0, 3), (1, 2)] {
            bw[x][y] = 2.0 * b;
            bw[y][x] = 2.0 * b;
        }
        Self {
            node_id,
            gpu_count: 4,
            gpu_type: "V100".to_string(),
            intra_node_bw: bw,
            inter_node_bw: Self::DEFAULT_INTER_NODE_BW,
        }
    }

    /// Node with the same bandwidth between every GPU pair.
    pub fn uniform(node_id: NodeId, gpu_count: u32, bw: f64) -> Self {
        let n = gpu_count as usize;
        let intra_node_bw = (0..n).map(|i| (0..n).map(|j| if i == j { 0.0 } else { bw }).collect()).collect();
        Self {
            node_id,
            gpu_count,
            gpu_type: "V100".to_string(),
            intra_node_bw,
            inter_node_bw: Self::DEFAULT_INTER_NODE_BW,
        }
    }

    pub fn validate(&self) -> Result<(), StateError> {
        let n = self.gpu_count as usize;
        let bad = |reason: String| StateError::InvalidNode { node: self.node_id, reason };
        if n == 0 {
            return Err(bad("gpu_count must be positive".into()));
        }
        if self.intra_node_bw.len() != n || self.intra_node_bw.iter().any(|r| r.len() != n) {
            return Err(bad(format!("bandwidth matrix must be {n}x{n}")));
        }
        for i in 0..n {
            if self.intra_node_bw[i][i] != 0.0 {
                return Err(bad(format!("diagonal entry {i} must be zero")));
            }
            for j in 0..n {
                let v = self.intra_node_bw[i][j];
                if v != self.intra_node_bw[j][i] {
                    return Err(bad(format!("matrix not symmetric at ({i},{j})")));
                }
                if i != j && !(v > 0.0) {
                    return Err(bad(format!("bandwidth ({i},{j}) must be positive")));
                }
            }
        }
        if !(self.inter_node_bw > 0.0) {
            return Err(bad("inter-node bandwidth must be positive".into()));
        }
        Ok(())
    }

    pub fn bandwidth(&self, a: u32, b: u32) -> f64 {
        self.intra_node_bw[a as usize][b as usize]
    }

    /// Mean pairwise bandwidth over a set of local GPUs; `None` for fewer
    /// than two GPUs.
    pub fn mean_pair_bandwidth(&self, locals: &[u32]) -> Option<f64> {
        if locals.len() < 2 {
            return None;
        }
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for (i, &a) in locals.iter().enumerate() {
            for &b in &locals[i + 1..] {
                sum += self.bandwidth(a, b);
                pairs += 1;
            }
        }
        Some(sum / pairs as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpuRow {
    pub node_id: NodeId,
    pub global_gpu_id: GpuId,
    pub local_gpu_id: u32,
    pub gpu_type: String,
    pub occupancy: Option<JobId>,
    /// Carried for schema completeness; unused by the built-in policies.
    pub free_memory_mb: Option<f64>,
}

/// Per-GPU table plus per-node specs.
#[derive(Debug, Clone)]
pub struct ClusterState {
    rows: Vec<GpuRow>,
    nodes: BTreeMap<NodeId, NodeSpec>,
    /// Node gpu counts sorted descending, for minimal-span queries.
    sizes_desc: Vec<u32>,
}

impl ClusterState {
    pub fn new(nodes: Vec<NodeSpec>) -> Result<Self, StateError> {
        let mut rows = Vec::new();
        let mut map = BTreeMap::new();
        for spec in nodes {
            spec.validate()?;
            if map.contains_key(&spec.node_id) {
                return Err(StateError::InvalidNode { node: spec.node_id, reason: "duplicate node id".into() });
            }
            for local in 0..spec.gpu_count {
                rows.push(GpuRow {
                    node_id: spec.node_id,
                    global_gpu_id: rows.len() as GpuId,
                    local_gpu_id: local,
                    gpu_type: spec.gpu_type.clone(),
                    occupancy: None,
                    free_memory_mb: None,
                });
            }
            map.insert(spec.node_id, spec);
        }
        let mut sizes_desc: Vec<u32> = map.values().map(|n| n.gpu_count).collect();
        sizes_desc.sort_unstable_by(|a, b| b.cmp(a));
        Ok(Self { rows, nodes: map, sizes_desc })
    }

    /// `nodes` identical p3.8xlarge-style nodes.
    pub fn homogeneous(nodes: u32) -> Self {
        Self::new((0..nodes).map(NodeSpec::p3_8xlarge).collect()).expect("default node spec is valid")
    }

    pub fn rows(&self) -> &[GpuRow] {
        &self.rows
    }

    pub fn nodes(&self) -> &BTreeMap<NodeId, NodeSpec> {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeSpec> {
        self.nodes.get(&id)
    }

    pub fn total_gpus(&self) -> u32 {
        self.rows.len() as u32
    }

    pub fn row(&self, gpu: GpuId) -> Option<&GpuRow> {
        self.rows.get(gpu as usize)
    }

    /// Free GPUs, ascending by global id.
    pub fn free_gpus(&self) -> Vec<GpuId> {
        self.rows.iter().filter(|r| r.occupancy.is_none()).map(|r| r.global_gpu_id).collect()
    }

    pub fn occupied_count(&self) -> usize {
        self.rows.iter().filter(|r| r.occupancy.is_some()).count()
    }

    pub fn gpus_of(&self, job: JobId) -> Vec<GpuId> {
        self.rows.iter().filter(|r| r.occupancy == Some(job)).map(|r| r.global_gpu_id).collect()
    }

    /// Frees every GPU held by `job`.
    pub fn release(&mut self, job: JobId) {
        for r in &mut self.rows {
            if r.occupancy == Some(job) {
                r.occupancy = None;
            }
        }
    }

    /// Fewest nodes any allocation of `gpus` GPUs could span.
    pub fn min_span(&self, gpus: u32) -> usize {
        let mut acc = 0;
        for (i, s) in self.sizes_desc.iter().enumerate() {
            acc += s;
            if acc >= gpus {
                return i + 1;
            }
        }
        self.sizes_desc.len()
    }

    pub fn nodes_spanned(&self, gpus: &[GpuId]) -> usize {
        gpus.iter().filter_map(|g| self.row(*g).map(|r| r.node_id)).collect::<BTreeSet<_>>().len()
    }

    pub fn placement_kind(&self, gpus: &[GpuId]) -> PlacementKind {
        if self.nodes_spanned(gpus) <= self.min_span(gpus.len() as u32) {
            PlacementKind::Consolidated
        } else {
            PlacementKind::Spread
        }
    }
}

/// Immutable summary of a job that left the active set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinishedJob {
    pub job_id: JobId,
    pub arrival_time: Seconds,
    pub first_scheduled_time: Option<Seconds>,
    pub finish_time: Seconds,
    pub gpu_demand: u32,
    pub preemptions: u32,
    pub gpu_seconds: f64,
    /// True when the job stopped before its full iteration count.
    pub terminated_early: bool,
}

#[derive(Debug, Clone, Default)]
pub struct JobState {
    pub active: BTreeMap<JobId, JobRecord>,
    finished_log: Vec<FinishedJob>,
}

impl JobState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn finished_log(&self) -> &[FinishedJob] {
        &self.finished_log
    }

    pub fn insert(&mut self, job: JobRecord) {
        self.active.insert(job.job_id, job);
    }

    pub fn get(&self, id: JobId) -> Option<&JobRecord> {
        self.active.get(&id)
    }

    pub fn running(&self) -> impl Iterator<Item = &JobRecord> {
        self.active.values().filter(|j| j.phase == Phase::Running)
    }

    pub fn admitted_demand(&self) -> u64 {
        self.active.values().map(|j| j.gpu_demand as u64).sum()
    }

    /// Moves every complete or terminated job to the finished log with
    /// `finish_time = now`. Returns the moved ids in ascending order.
    pub fn prune_finished(&mut self, now: Seconds) -> Vec<JobId> {
        let done: Vec<JobId> = self
            .active
            .values()
            .filter(|j| j.is_complete() || j.phase == Phase::Terminated)
            .map(|j| j.job_id)
            .collect();
        for id in &done {
            let mut job = self.active.remove(id).expect("id collected from active");
            let terminated_early = !job.is_complete();
            if job.phase != Phase::Terminated {
                job.phase = Phase::Finished;
            }
            job.finish_time = Some(now);
            self.finished_log.push(FinishedJob {
                job_id: job.job_id,
                arrival_time: job.arrival_time,
                first_scheduled_time: job.first_scheduled_time,
                finish_time: now,
                gpu_demand: job.gpu_demand,
                preemptions: job.preemption_count,
                gpu_seconds: job.attained_service,
                terminated_early,
            });
        }
        done
    }
}

/// Removes finished jobs and frees their GPUs.
pub fn prune_finished(cluster: &mut ClusterState, jobs: &mut JobState, now: Seconds) -> Vec<JobId> {
    let done = jobs.prune_finished(now);
    for id in &done {
        cluster.release(*id);
    }
    done
}

/// Bandwidth-relevant record of one single-node multi-GPU local choice.
#[derive(Debug, Clone, PartialEq)]
pub struct IntraNodeChoice {
    pub job_id: JobId,
    pub node_id: NodeId,
    /// Free local GPUs on the node at the moment of choice.
    pub free_local: Vec<u32>,
    pub chosen_local: Vec<u32>,
    /// Mean pairwise bandwidth of `chosen_local`, Gbps.
    pub bandwidth: f64,
}

/// Output of one scheduling round.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundDecision {
    pub to_launch: BTreeMap<JobId, Vec<GpuId>>,
    pub to_suspend: Vec<JobId>,
    pub renewals: Vec<JobId>,
    /// Local-GPU choices made while building `to_launch`.
    pub local_choices: Vec<IntraNodeChoice>,
}

impl RoundDecision {
    pub fn is_empty(&self) -> bool {
        self.to_launch.is_empty() && self.to_suspend.is_empty()
    }

    /// Checks the structural invariants against the current job state.
    ///
    /// A launch list may be shorter than the job's demand when a scheduler
    /// grants fewer GPUs; it may never be longer.
    pub fn validate(&self, jobs: &JobState, cluster: &ClusterState) -> Result<(), StateError> {
        let mut seen = BTreeSet::new();
        for (id, gpus) in &self.to_launch {
            let job = jobs.get(*id).ok_or(StateError::UnknownJob(*id))?;
            if self.to_suspend.contains(id) {
                return Err(StateError::InvalidDecision(format!("job {id} both launched and suspended")));
            }
            if gpus.is_empty() || gpus.len() > job.gpu_demand as usize {
                return Err(StateError::InvalidDecision(format!(
                    "job {id} launch list has {} GPUs for demand {}",
                    gpus.len(),
                    job.gpu_demand
                )));
            }
            for g in gpus {
                if cluster.row(*g).is_none() {
                    return Err(StateError::UnknownGpu(*g));
                }
                if !seen.insert(*g) {
                    return Err(StateError::InvalidDecision(format!("GPU {g} launched twice")));
                }
            }
        }
        for id in self.to_suspend.iter().chain(&self.renewals) {
            let job = jobs.get(*id).ok_or(StateError::UnknownJob(*id))?;
            if job.phase != Phase::Running {
                return Err(StateError::InvalidTransition { job: *id, from: job.phase, to: Phase::Suspended });
            }
        }
        Ok(())
    }
}

/// Applies a round decision: suspensions first, then launches.
///
/// A launched job whose GPU set differs from the one it held is charged its
/// restart overhead on the next credited round. Nothing is mutated when an
/// error is returned.
pub fn apply_decision(
    cluster: &mut ClusterState,
    jobs: &mut JobState,
    d: &RoundDecision,
    now: Seconds,
) -> Result<(), StateError> {
    d.validate(jobs, cluster)?;

    // Occupancy as it will be once suspensions and migrations have vacated.
    let mut vacating: BTreeSet<JobId> = d.to_suspend.iter().copied().collect();
    for id in d.to_launch.keys() {
        let job = &jobs.active[id];
        match job.phase {
            Phase::Running => {
                vacating.insert(*id);
            }
            Phase::Admitted | Phase::Suspended => {}
            from => return Err(StateError::InvalidTransition { job: *id, from, to: Phase::Running }),
        }
    }
    for (id, gpus) in &d.to_launch {
        for g in gpus {
            if let Some(holder) = cluster.rows[*g as usize].occupancy {
                if !vacating.contains(&holder) {
                    return Err(StateError::Conflict { gpu: *g, holder, job: *id });
                }
            }
        }
    }

    for id in &d.to_suspend {
        cluster.release(*id);
        let job = jobs.active.get_mut(id).expect("validated");
        job.phase = Phase::Suspended;
        job.allocation.clear();
        job.placement_kind = None;
        job.preemption_count += 1;
    }
    for (id, gpus) in &d.to_launch {
        let mut sorted = gpus.clone();
        sorted.sort_unstable();
        let job = jobs.active.get_mut(id).expect("validated");
        if job.phase == Phase::Running {
            if job.allocation == sorted {
                continue;
            }
            cluster.release(*id);
            job.preemption_count += 1;
        }
        job.phase = Phase::Running;
        job.pending_restart = true;
        job.first_scheduled_time.get_or_insert(now);
        job.placement_kind = Some(cluster.placement_kind(&sorted));
        for g in &sorted {
            cluster.rows[*g as usize].occupancy = Some(*id);
        }
        job.allocation = sorted;
    }
    Ok(())
}
