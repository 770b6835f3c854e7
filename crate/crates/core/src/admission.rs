//! Admission control: decides which newly arrived jobs become schedulable.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::state::{ClusterState, JobId, JobRecord, JobState};

/// Gate between job arrival and the schedulable set.
///
/// Implementations may hold jobs back across rounds; held jobs must be
/// surrendered by [`AdmissionPolicy::take_held`] so that a replacement
/// policy can adopt them.
pub trait AdmissionPolicy: Send + Sync + fmt::Debug {
    fn admit(&mut self, new_jobs: Vec<JobRecord>, jobs: &JobState, cluster: &ClusterState) -> Vec<JobRecord>;

    fn held_ids(&self) -> Vec<JobId>;

    /// Removes and returns held jobs in arrival order.
    fn take_held(&mut self) -> Vec<JobRecord>;

    /// Puts jobs at the front of the hold queue, keeping their order.
    fn requeue(&mut self, jobs: Vec<JobRecord>);

    fn box_clone(&self) -> Box<dyn AdmissionPolicy>;
}

impl Clone for Box<dyn AdmissionPolicy> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmissionKind {
    AcceptAll,
    /// Release jobs in arrival order while admitted demand stays within
    /// `factor` times the cluster's GPU count.
    ThresholdFifo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmissionConfig {
    pub kind: AdmissionKind,
    pub factor: f64,
}

impl AdmissionConfig {
    pub const fn accept_all() -> Self {
        Self { kind: AdmissionKind::AcceptAll, factor: 1.0 }
    }

    pub const fn threshold(factor: f64) -> Self {
        Self { kind: AdmissionKind::ThresholdFifo, factor }
    }

    pub fn is_valid(&self) -> bool {
        self.kind == AdmissionKind::AcceptAll || self.factor > 0.0
    }

    /// Short label, e.g. `accept_all` or `accept_1.2x`.
    pub fn label(&self) -> String {
        match self.kind {
            AdmissionKind::AcceptAll => "accept_all".to_string(),
            AdmissionKind::ThresholdFifo => format!("accept_{}x", self.factor),
        }
    }
}

/// Applies `cfg` to the hold queue followed by `new_jobs`.
///
/// Admission under [`AdmissionKind::ThresholdFifo`] is strict head-of-line:
/// once a job does not fit, every later job waits behind it.
pub fn admit(
    new_jobs: Vec<JobRecord>,
    jobs: &JobState,
    cluster: &ClusterState,
    cfg: &AdmissionConfig,
    hold_queue: &mut VecDeque<JobRecord>,
) -> Vec<JobRecord> {
    hold_queue.extend(new_jobs);
    match cfg.kind {
        AdmissionKind::AcceptAll => hold_queue.drain(..).collect(),
        AdmissionKind::ThresholdFifo => {
            let cap = cfg.factor * cluster.total_gpus() as f64;
            let mut demand = jobs.admitted_demand() as f64;
            let mut out = Vec::new();
            while let Some(next) = hold_queue.front() {
                if demand + next.gpu_demand as f64 > cap {
                    break;
                }
                demand += next.gpu_demand as f64;
                out.extend(hold_queue.pop_front());
            }
            out
        }
    }
}

/// Admission policy driven by an [`AdmissionConfig`].
#[derive(Debug, Clone)]
pub struct ConfiguredAdmission {
    pub config: AdmissionConfig,
    hold_queue: VecDeque<JobRecord>,
}

impl ConfiguredAdmission {
    pub fn new(config: AdmissionConfig) -> Self {
        Self { config, hold_queue: VecDeque::new() }
    }
}

impl AdmissionPolicy for ConfiguredAdmission {
    fn admit(&mut self, new_jobs: Vec<JobRecord>, jobs: &JobState, cluster: &ClusterState) -> Vec<JobRecord> {
        admit(new_jobs, jobs, cluster, &self.config, &mut self.hold_queue)
    }

    fn held_ids(&self) -> Vec<JobId> {
        self.hold_queue.iter().map(|j| j.job_id).collect()
    }

    fn take_held(&mut self) -> Vec<JobRecord> {
        self.hold_queue.drain(..).collect()
    }

    fn requeue(&mut self, jobs: Vec<JobRecord>) {
        for j in jobs.into_iter().rev() {
            self.hold_queue.push_front(j);
        }
    }

    fn box_clone(&self) -> Box<dyn AdmissionPolicy> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::Phase;
    use crate::workload::ModelProfile;
    use std::sync::Arc;

    fn job(id: u32, demand: u32) -> JobRecord {
        let p = Arc::new(ModelProfile::constant("m", 1.0, 0.0));
        JobRecord::new(JobId(id), id as f64, demand, 10, p)
    }

    fn admitted(jobs: &[(u32, u32)]) -> JobState {
        let mut s = JobState::new();
        for &(id, d) in jobs {
            let mut j = job(id, d);
            j.phase = Phase::Admitted;
            s.insert(j);
        }
        s
    }

    fn ids(v: &[JobRecord]) -> Vec<u32> {
        v.iter().map(|j| j.job_id.0).collect()
    }

    #[test]
    fn accept_all_takes_everything() {
        let cluster = ClusterState::homogeneous(1);
        let mut q = VecDeque::new();
        let out = admit(
            vec![job(1, 1), job(2, 8), job(3, 64)],
            &JobState::new(),
            &cluster,
            &AdmissionConfig::accept_all(),
            &mut q,
        );
        assert_eq!(ids(&out), vec![1, 2, 3]);
        assert!(q.is_empty());
    }

    #[test]
    fn head_of_line_blocks_smaller_followers() {
        // 8 GPUs, factor 1.5 -> cap 12; already admitted 10.
        let cluster = ClusterState::homogeneous(2);
        let jobs = admitted(&[(0, 6), (1, 4)]);
        let mut q = VecDeque::new();
        let out = admit(vec![job(5, 4), job(6, 2)], &jobs, &cluster, &AdmissionConfig::threshold(1.5), &mut q);
        assert!(out.is_empty());
        assert_eq!(q.iter().map(|j| j.job_id.0).collect::<Vec<_>>(), vec![5, 6]);
    }

    #[test]
    fn at_cap_everything_queues_then_releases_in_order() {
        let cluster = ClusterState::homogeneous(2);
        let jobs = admitted(&[(0, 12)]);
        let mut q = VecDeque::new();
        let cfg = AdmissionConfig::threshold(1.5);
        assert!(admit(vec![job(1, 1)], &jobs, &cluster, &cfg, &mut q).is_empty());
        let out = admit(vec![job(2, 1)], &JobState::new(), &cluster, &cfg, &mut q);
        assert_eq!(ids(&out), vec![1, 2]);
    }

    #[test]
    fn swap_carries_hold_queue() {
        let cluster = ClusterState::homogeneous(1);
        let mut a = ConfiguredAdmission::new(AdmissionConfig::threshold(1.0));
        let jobs = admitted(&[(0, 4)]);
        assert!(a.admit(vec![job(1, 1), job(2, 1)], &jobs, &cluster).is_empty());
        let mut b = ConfiguredAdmission::new(AdmissionConfig::accept_all());
        b.requeue(a.take_held());
        assert!(a.held_ids().is_empty());
        let out = b.admit(vec![job(3, 1)], &jobs, &cluster);
        assert_eq!(ids(&out), vec![1, 2, 3]);
    }

    #[test]
    fn labels() {
        assert_eq!(AdmissionConfig::threshold(1.2).label(), "accept_1.2x");
        assert!(!AdmissionConfig::threshold(0.0).is_valid());
    }
}
