//! Runtime policy selection by forked what-if simulation.
//!
//! Every few rounds the live simulation is cloned once per candidate
//! (admission, scheduling) pair, each clone is run forward under its
//! candidate, and the live run switches to the pair that scored best.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admission::{AdmissionConfig, AdmissionKind, ConfiguredAdmission};
use crate::engine::{EngineError, MetricsReport, PolicySpec, SimConfig, Simulation};
use crate::placement::PlacementConfig;
use crate::scheduling::{ConfiguredScheduler, SchedulerConfig, SchedulerKind};
use crate::state::{JobRecord, Seconds};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyCombo {
    pub admission: AdmissionConfig,
    pub scheduling: SchedulerConfig,
}

impl PolicyCombo {
    pub fn new(admission: AdmissionConfig, kind: SchedulerKind) -> Self {
        Self { admission, scheduling: SchedulerConfig::new(kind) }
    }

    pub fn label(&self) -> String {
        format!("{}+{}", self.scheduling.kind.label(), self.admission.label())
    }

    fn validate(&self) -> Result<(), EngineError> {
        if !self.admission.is_valid() {
            return Err(EngineError::InvalidConfig(format!(
                "candidate {}: admission factor must be positive",
                self.label()
            )));
        }
        self.scheduling.validate().map_err(EngineError::InvalidConfig)
    }
}

/// FIFO, SRTF and LAS, each with accept-all, 1.2x and 1.4x admission.
pub fn default_candidates() -> Vec<PolicyCombo> {
    let admissions = [AdmissionConfig::accept_all(), AdmissionConfig::threshold(1.2), AdmissionConfig::threshold(1.4)];
    [SchedulerKind::Fifo, SchedulerKind::Srtf, SchedulerKind::Las]
        .into_iter()
        .flat_map(|k| admissions.iter().map(move |a| PolicyCombo::new(*a, k)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    AvgJct,
    AvgResponsiveness,
    /// Pareto filter, then the smallest sum of metrics each divided by its
    /// best value.
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerHorizon {
    /// Run until every job known at the fork has finished; later arrivals
    /// are dropped.
    RunToDrain,
    /// Run this many rounds with later arrivals left in place; unfinished
    /// jobs count as finishing at the horizon.
    FixedRounds(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthConfig {
    pub period_rounds: u64,
    pub objective: Objective,
    pub inner_horizon: InnerHorizon,
    pub candidates: Vec<PolicyCombo>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            period_rounds: 10,
            objective: Objective::AvgJct,
            inner_horizon: InnerHorizon::RunToDrain,
            candidates: default_candidates(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.period_rounds == 0 {
            return Err(EngineError::InvalidConfig("period_rounds must be at least 1".into()));
        }
        if self.candidates.is_empty() {
            return Err(EngineError::InvalidConfig("candidate list is empty".into()));
        }
        if self.inner_horizon == InnerHorizon::FixedRounds(0) {
            return Err(EngineError::InvalidConfig("inner horizon must be at least one round".into()));
        }
        self.candidates.iter().try_for_each(PolicyCombo::validate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ComboMetrics {
    pub avg_jct: Seconds,
    pub avg_responsiveness: Seconds,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwitchRecord {
    pub round: u64,
    pub combo: PolicyCombo,
}

/// One `switch_log.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwitchRow {
    pub round: u64,
    pub admission_kind: String,
    pub admission_factor: f64,
    pub sched_kind: String,
}

impl From<&SwitchRecord> for SwitchRow {
    fn from(r: &SwitchRecord) -> Self {
        let a = &r.combo.admission;
        Self {
            round: r.round,
            admission_kind: match a.kind {
                AdmissionKind::AcceptAll => "accept_all",
                AdmissionKind::ThresholdFifo => "threshold_fifo",
            }
            .to_string(),
            admission_factor: if a.kind == AdmissionKind::AcceptAll { 0.0 } else { a.factor },
            sched_kind: r.combo.scheduling.kind.label().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthOutcome {
    pub report: MetricsReport,
    pub switch_log: Vec<SwitchRecord>,
}

fn install(sim: &mut Simulation, combo: &PolicyCombo) {
    sim.swap_policies(
        Box::new(ConfiguredAdmission::new(combo.admission)),
        Box::new(ConfiguredScheduler::new(combo.scheduling.clone())),
    );
}

/// Scores `combo` on a copy of `snapshot`, which must sit between
/// [`Simulation::advance`] and [`Simulation::decide`].
///
/// Only jobs unfinished at the fork are measured.
pub fn evaluate_combo(
    snapshot: &Simulation,
    combo: &PolicyCombo,
    horizon: InnerHorizon,
) -> Result<ComboMetrics, EngineError> {
    let ids = snapshot.unfinished_ids();
    if ids.is_empty() {
        return Ok(ComboMetrics::default());
    }
    let mut sim = snapshot.clone();
    sim.config.horizon = None;
    sim.set_measured(ids);
    install(&mut sim, combo);
    let report = match horizon {
        InnerHorizon::RunToDrain => {
            sim.drop_future_arrivals();
            sim.decide()?;
            sim.run_to_end()?;
            sim.report()?
        }
        InnerHorizon::FixedRounds(n) => {
            sim.decide()?;
            for _ in 1..n {
                if sim.is_done() {
                    break;
                }
                sim.step()?;
            }
            // Count the last round's work before scoring.
            if !sim.is_done() {
                sim.advance()?;
            }
            sim.report_partial()
        }
    };
    Ok(ComboMetrics { avg_jct: report.avg_jct, avg_responsiveness: report.avg_responsiveness })
}

/// Index of the winning result; ties go to the earliest entry.
///
/// Panics if `results` is empty.
pub fn select(results: &[ComboMetrics], objective: Objective) -> usize {
    assert!(!results.is_empty(), "select needs at least one result");
    let argmin = |score: &dyn Fn(&ComboMetrics) -> f64, allowed: &dyn Fn(usize) -> bool| {
        let mut best: Option<(usize, f64)> = None;
        for (i, m) in results.iter().enumerate().filter(|(i, _)| allowed(*i)) {
            let s = score(m);
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((i, s));
            }
        }
        best.expect("at least one candidate allowed").0
    };
    match objective {
        Objective::AvgJct => argmin(&|m| m.avg_jct, &|_| true),
        Objective::AvgResponsiveness => argmin(&|m| m.avg_responsiveness, &|_| true),
        Objective::Both => {
            let dominated = |i: usize| {
                let a = &results[i];
                results.iter().any(|b| {
                    b.avg_jct <= a.avg_jct
                        && b.avg_responsiveness <= a.avg_responsiveness
                        && (b.avg_jct < a.avg_jct || b.avg_responsiveness < a.avg_responsiveness)
                })
            };
            let scale = |f: fn(&ComboMetrics) -> f64| {
                let min = results.iter().map(f).fold(f64::INFINITY, f64::min);
                let max = results.iter().map(f).fold(0.0, f64::max);
                // A zero minimum cannot be divided by; fall back to the maximum.
                if min > 0.0 {
                    min
                } else if max > 0.0 {
                    max
                } else {
                    1.0
                }
            };
            let (sj, sr) = (scale(|m| m.avg_jct), scale(|m| m.avg_responsiveness));
            argmin(&|m| m.avg_jct / sj + m.avg_responsiveness / sr, &|i| !dominated(i))
        }
    }
}

/// Runs `trace` while re-selecting admission and scheduling every
/// `period_rounds` rounds. Placement stays fixed.
pub fn run_synthesized(
    config: SimConfig,
    trace: Vec<JobRecord>,
    placement: PlacementConfig,
    synth: &SynthConfig,
) -> Result<SynthOutcome, EngineError> {
    synth.validate()?;
    let first = &synth.candidates[0];
    let spec = PolicySpec { admission: first.admission, scheduler: first.scheduling.clone(), placement };
    spec.validate()?;
    let horizon = config.horizon;
    let mut sim = Simulation::new(config.clone(), trace, spec.build(config.seed))?;
    let mut current = 0;
    let mut switch_log = Vec::new();
    let mut round = 0u64;
    while !sim.is_done() && !horizon.is_some_and(|h| sim.now() >= h) {
        sim.advance()?;
        if round.is_multiple_of(synth.period_rounds) {
            let snapshot = &sim;
            let results = synth
                .candidates
                .par_iter()
                .map(|c| evaluate_combo(snapshot, c, synth.inner_horizon))
                .collect::<Result<Vec<_>, _>>()?;
            let pick = select(&results, synth.objective);
            if pick != current || switch_log.is_empty() {
                if pick != current {
                    install(&mut sim, &synth.candidates[pick]);
                    current = pick;
                }
                switch_log.push(SwitchRecord { round, combo: synth.candidates[pick].clone() });
            }
        }
        sim.decide()?;
        round += 1;
    }
    Ok(SynthOutcome { report: sim.report()?, switch_log })
}
