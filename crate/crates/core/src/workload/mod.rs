//! Trace ingestion, synthetic arrival processes and model profiles.

mod arrivals;
mod profile;
mod trace;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::state::{JobId, JobRecord, PlacementKind};

pub use arrivals::{
    fill_arrivals, generate_arrivals, inject_bursty, inject_spike, periodic_windows, renumber_by_arrival,
    spike_arrivals, synthesize_trace, ArrivalConfig, BurstyConfig, JobMix, SpikeConfig,
};
pub use profile::{
    attach_loss_curves, default_profiles, default_skew_models, parse_profiles, parse_profiles_str, ModelProfile,
    DEFAULT_RESTART_OVERHEAD,
};
pub use trace::{parse_trace, parse_trace_str, write_trace, TraceEntry, TRACE_HEADER};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("model {model} has no profile row usable for {gpus} GPUs")]
    MissingProfile { model: String, gpus: u32 },
    #[error("invalid profile for {model}: {msg}")]
    InvalidProfile { model: String, msg: String },
    #[error("unknown model {0}")]
    UnknownModel(String),
    #[error("no model profiles supplied")]
    NoProfiles,
    #[error("job {0} has no submit time")]
    MissingSubmitTime(u32),
    #[error("invalid workload config: {0}")]
    InvalidConfig(String),
}

impl WorkloadError {
    pub(crate) fn parse(line: u64, msg: impl ToString) -> Self {
        Self::Parse { line, msg: msg.to_string() }
    }
}

/// Independent random streams derived from one seed.
pub(crate) mod stream {
    pub const ARRIVALS: u64 = 1;
    pub const SPIKE: u64 = 2;
    pub const MIX: u64 = 3;
    pub const SPIKE_MIX: u64 = 4;
    pub const BURSTY: u64 = 5;
    pub const MODELS: u64 = 6;
    pub const CONVERGENCE: u64 = 7;
    pub const PLACEMENT: u64 = 8;
    pub const LEASE: u64 = 9;
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seconds to whole microseconds, the unit of exact progress accounting.
pub fn to_micros(seconds: f64) -> u64 {
    (seconds * 1e6).round().max(0.0) as u64
}

/// Iterations needed to fill `duration` at `iter_time` seconds each.
pub fn iterations_for(duration: f64, iter_time: f64) -> u64 {
    let iter_us = to_micros(iter_time).max(1);
    to_micros(duration).div_ceil(iter_us).max(1)
}

/// Turns trace entries into job records.
///
/// Entries naming a model use that profile; the rest draw a profile
/// uniformly at random (seeded). Total iterations are the isolated duration
/// divided by the consolidated iteration time at the job's demand, rounded up.
pub fn assign_models(
    entries: &[TraceEntry],
    profiles: &[Arc<ModelProfile>],
    seed: u64,
) -> Result<Vec<JobRecord>, WorkloadError> {
    if profiles.is_empty() {
        return Err(WorkloadError::NoProfiles);
    }
    let mut rng = rng_for(seed, stream::MODELS);
    entries
        .iter()
        .map(|e| {
            let profile = match &e.model_name {
                Some(name) => profiles
                    .iter()
                    .find(|p| &p.model_name == name)
                    .ok_or_else(|| WorkloadError::UnknownModel(name.clone()))?,
                None => &profiles[rng.random_range(0..profiles.len())],
            };
            let arrival = e.submit_time.ok_or(WorkloadError::MissingSubmitTime(e.job_id))?;
            let t = profile.iter_time(e.gpu_demand, PlacementKind::Consolidated)?;
            let iterations = iterations_for(e.duration_isolated, t);
            Ok(JobRecord::new(JobId(e.job_id), arrival, e.gpu_demand, iterations, Arc::clone(profile)))
        })
        .collect()
}

/// Marks each job, independently with probability `share`, as converging
/// after `fraction` of its iterations.
pub fn assign_convergence(jobs: &mut [JobRecord], share: f64, fraction: f64, seed: u64) {
    let mut rng = rng_for(seed, stream::CONVERGENCE);
    for j in jobs {
        if rng.random_bool(share.clamp(0.0, 1.0)) {
            j.converge_at_fraction = Some(fraction);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: u32, demand: u32, dur: f64) -> TraceEntry {
        TraceEntry {
            job_id: id,
            submit_time: Some(id as f64),
            gpu_demand: demand,
            duration_isolated: dur,
            model_name: None,
        }
    }

    #[test]
    fn iterations_round_up() {
        let p = vec![Arc::new(ModelProfile::constant("m", 0.5, 0.0))];
        let jobs = assign_models(&[entry(0, 2, 3600.0)], &p, 1).unwrap();
        assert_eq!(jobs[0].total_iterations, 7200);
        assert_eq!(iterations_for(1.0, 0.3), 4);
    }

    #[test]
    fn single_profile_for_all_and_order_preserved() {
        let p = vec![Arc::new(ModelProfile::constant("only", 1.0, 5.0))];
        let entries: Vec<_> = (0..20).map(|i| entry(i, 1, 60.0)).collect();
        let jobs = assign_models(&entries, &p, 3).unwrap();
        assert_eq!(jobs.len(), 20);
        assert!(jobs.iter().all(|j| j.model_name() == "only" && j.restart_overhead == 5.0));
        assert!(jobs.iter().enumerate().all(|(i, j)| j.job_id == JobId(i as u32)));
    }

    #[test]
    fn seeded_assignment_is_stable() {
        let p = default_profiles();
        let entries: Vec<_> = (0..50).map(|i| entry(i, 1, 600.0)).collect();
        let a: Vec<String> =
            assign_models(&entries, &p, 8).unwrap().iter().map(|j| j.model_name().to_string()).collect();
        let b: Vec<String> =
            assign_models(&entries, &p, 8).unwrap().iter().map(|j| j.model_name().to_string()).collect();
        assert_eq!(a, b);
        assert!(a.iter().collect::<std::collections::BTreeSet<_>>().len() > 1);
    }

    #[test]
    fn missing_profile_row_is_an_error() {
        let mut p = ModelProfile::constant("m", 1.0, 0.0);
        p.entries.retain(|(g, _), _| *g == 1);
        let err = assign_models(&[entry(0, 4, 60.0)], &[Arc::new(p)], 1).unwrap_err();
        assert!(matches!(err, WorkloadError::MissingProfile { gpus: 4, .. }));
        assert!(matches!(assign_models(&[], &[], 1), Err(WorkloadError::NoProfiles)));
    }

    #[test]
    fn convergence_share_is_roughly_respected() {
        let p = vec![Arc::new(ModelProfile::constant("m", 1.0, 0.0))];
        let entries: Vec<_> = (0..4000).map(|i| entry(i, 1, 60.0)).collect();
        let mut jobs = assign_models(&entries, &p, 1).unwrap();
        assign_convergence(&mut jobs, 0.75, 0.4, 2);
        let n = jobs.iter().filter(|j| j.converge_at_fraction == Some(0.4)).count();
        assert!((2850..=3150).contains(&n), "{n}");
    }
}
