//! Flat `key=value` run configuration.
//!
//! Every key has a default; a config file and `--set` flags override them
//! in that order. The fully resolved map is the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use dlsched_core::admission::{AdmissionConfig, AdmissionKind};
use dlsched_core::engine::{PolicySpec, SimConfig};
use dlsched_core::lease::LeaseMode;
use dlsched_core::placement::{PlacementConfig, PlacementStrategy};
use dlsched_core::scheduling::{SchedulerConfig, SchedulerKind};
use dlsched_core::state::{JobRecord, NodeSpec};
use dlsched_core::synth::{default_candidates, InnerHorizon, Objective, PolicyCombo, SynthConfig};
use dlsched_core::workload::{
    assign_convergence, assign_models, attach_loss_curves, default_profiles, fill_arrivals, parse_profiles,
    parse_trace, renumber_by_arrival, synthesize_trace, ArrivalConfig, BurstyConfig, JobMix, ModelProfile, SpikeConfig,
    WorkloadError, DEFAULT_RESTART_OVERHEAD,
};
use thiserror::Error;

/// (key, default, description).
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "seed for every random stream"),
    ("sim.round_len", "300", "round length, seconds"),
    ("sim.nodes", "32", "node count when no topology file is given"),
    ("sim.node_type", "p3_8xlarge", "p3_8xlarge or uniform"),
    ("sim.gpus_per_node", "4", "GPUs per node for sim.node_type=uniform"),
    ("sim.node_bw", "50", "pairwise bandwidth for sim.node_type=uniform, Gbps"),
    ("sim.topology", "", "topology file; overrides sim.nodes and sim.node_type"),
    ("sim.metrics_window", "3000..4000", "job id range to report, or `all`"),
    ("sim.horizon", "none", "stop after this many seconds, or `none`"),
    ("workload.trace", "", "trace CSV; empty synthesizes one"),
    ("workload.lambda", "8", "arrival rate, jobs per hour"),
    ("workload.count", "6000", "number of base arrivals"),
    ("workload.mix", "default", "default or bimodal duration mix"),
    ("workload.demand_weights", "", "GPU demand weights, e.g. 1:0.7,2:0.3; empty keeps the mix's"),
    ("workload.spike", "false", "add a daily spike of extra jobs"),
    ("workload.spike_extra_jobs", "16", "jobs per spike"),
    ("workload.bursty", "false", "add periodic bursts of short jobs"),
    ("workload.bursty_multiplier", "2", "burst arrival rate as a multiple of lambda"),
    ("workload.profiles", "", "profile CSV; empty uses built-in profiles"),
    ("workload.loss_curves", "", "model,iteration,loss CSV"),
    ("workload.restart_overhead", "", "restart overhead for every model, seconds; empty keeps profile values"),
    ("workload.convergence_share", "0", "share of jobs that converge early"),
    ("workload.convergence_fraction", "0.4", "fraction of iterations after which those jobs converge"),
    ("admission.kind", "accept_all", "accept_all or threshold_fifo"),
    ("admission.factor", "1.2", "admitted demand cap as a multiple of cluster GPUs"),
    ("sched.kind", "fifo", "fifo, srtf, las, dlas or optimus"),
    ("sched.dlas_thresholds", "3600,36000", "discrete LAS queue boundaries, GPU-seconds"),
    ("sched.loss_termination", "false", "stop jobs once they converge"),
    ("sched.loss_threshold", "0.002", "relative slack on target loss"),
    ("placement.kind", "consolidated", "first_free, consolidated, tiresias or profile_guided"),
    ("placement.intra_node_bandwidth_aware", "false", "pick the best-connected GPUs inside a node"),
    ("synth.period_rounds", "10", "rounds between re-selections"),
    ("synth.objective", "avg_jct", "avg_jct, avg_responsiveness or both"),
    ("synth.inner_horizon", "drain", "drain, or a round count"),
    ("synth.candidates", "default", "default, or sched/admission pairs such as fifo/accept_all,las/1.2"),
    ("sweep.param", "workload.lambda", "key varied by `sweep`"),
    ("sweep.values", "1,2,3,4,5,6,7,8,9", "comma-separated values for `sweep`"),
    ("lease.workers", "8,16,32", "worker counts for `lease-bench`"),
    ("lease.rounds", "100", "rounds per lease run"),
    ("lease.revocations", "2", "revocations per lease run"),
    ("lease.seeds", "10", "delay seeds per lease row"),
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{key}: {msg}")]
    Key { key: String, msg: String },
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
}

impl ConfigError {
    pub fn key(key: &str, msg: impl ToString) -> Self {
        Self::Key { key: key.to_string(), msg: msg.to_string() }
    }
}

/// Raw key/value map, always holding every known key.
#[derive(Debug, Clone, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl Default for RawConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RawConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(ConfigError::key(key, "unknown key")),
        }
    }

    /// Applies one `key=value` assignment.
    pub fn apply(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) =
            assignment.split_once('=').ok_or_else(|| ConfigError::key(assignment.trim(), "expected key=value"))?;
        self.set(k.trim(), v.trim())
    }

    /// Applies a config file: one assignment per line, `#` comments.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                self.apply(line)?;
            }
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError::File { path: path.display().to_string(), msg: e.to_string() })?;
        self.apply_text(&text)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("every known key has a value")
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// The manifest in config-file syntax.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        let s = self.get(key);
        s.parse().map_err(|_| ConfigError::key(key, format!("cannot parse `{s}`")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError> {
        let s = self.get(key);
        s.split(',')
            .map(str::trim)
            .filter(|x| !x.is_empty())
            .map(|x| x.parse().map_err(|_| ConfigError::key(key, format!("cannot parse `{x}`"))))
            .collect()
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let s = self.get(key);
        (!s.is_empty()).then(|| PathBuf::from(s))
    }

    fn non_negative(&self, key: &str) -> Result<f64, ConfigError> {
        let v: f64 = self.parse(key)?;
        if !(v >= 0.0 && v.is_finite()) {
            return Err(ConfigError::key(key, "must be a non-negative number"));
        }
        Ok(v)
    }

    fn positive(&self, key: &str) -> Result<f64, ConfigError> {
        let v: f64 = self.parse(key)?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(ConfigError::key(key, "must be a positive number"));
        }
        Ok(v)
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        self.parse("seed")
    }

    pub fn sim_config(&self) -> Result<SimConfig, ConfigError> {
        let nodes = match self.path("sim.topology") {
            Some(p) => {
                let text = fs::read_to_string(&p).map_err(|e| ConfigError::key("sim.topology", e))?;
                parse_topology(&text).map_err(|m| ConfigError::key("sim.topology", m))?
            }
            None => {
                let n: u32 = self.parse("sim.nodes")?;
                if n == 0 {
                    return Err(ConfigError::key("sim.nodes", "must be at least 1"));
                }
                match self.get("sim.node_type") {
                    "p3_8xlarge" => (0..n).map(NodeSpec::p3_8xlarge).collect(),
                    "uniform" => {
                        let g: u32 = self.parse("sim.gpus_per_node")?;
                        if g == 0 {
                            return Err(ConfigError::key("sim.gpus_per_node", "must be at least 1"));
                        }
                        let bw = self.positive("sim.node_bw")?;
                        (0..n).map(|i| NodeSpec::uniform(i, g, bw)).collect()
                    }
                    other => return Err(ConfigError::key("sim.node_type", format!("unknown node type `{other}`"))),
                }
            }
        };
        let metrics_window = match self.get("sim.metrics_window") {
            "all" => None,
            s => {
                let (a, b) = s
                    .split_once("..")
                    .ok_or_else(|| ConfigError::key("sim.metrics_window", "expected START..END or `all`"))?;
                let a: u32 = a.trim().parse().map_err(|_| ConfigError::key("sim.metrics_window", "bad start"))?;
                let b: u32 = b.trim().parse().map_err(|_| ConfigError::key("sim.metrics_window", "bad end"))?;
                if b <= a {
                    return Err(ConfigError::key("sim.metrics_window", "end must exceed start"));
                }
                Some(a..b)
            }
        };
        let horizon = match self.get("sim.horizon") {
            "none" => None,
            _ => Some(self.non_negative("sim.horizon")?),
        };
        Ok(SimConfig { round_len: self.positive("sim.round_len")?, nodes, metrics_window, seed: self.seed()?, horizon })
    }

    pub fn admission(&self) -> Result<AdmissionConfig, ConfigError> {
        let kind = match self.get("admission.kind") {
            "accept_all" => AdmissionKind::AcceptAll,
            "threshold_fifo" => AdmissionKind::ThresholdFifo,
            other => return Err(ConfigError::key("admission.kind", format!("unknown admission kind `{other}`"))),
        };
        Ok(AdmissionConfig { kind, factor: self.positive("admission.factor")? })
    }

    pub fn scheduler(&self) -> Result<SchedulerConfig, ConfigError> {
        let kind = parse_sched_kind(self.get("sched.kind")).ok_or_else(|| {
            ConfigError::key("sched.kind", format!("unknown scheduler kind `{}`", self.get("sched.kind")))
        })?;
        let cfg = SchedulerConfig {
            kind,
            dlas_thresholds: self.list("sched.dlas_thresholds")?,
            loss_termination: self.parse("sched.loss_termination")?,
            loss_threshold: self.non_negative("sched.loss_threshold")?,
        };
        cfg.validate().map_err(|m| ConfigError::key("sched.dlas_thresholds", m))?;
        Ok(cfg)
    }

    pub fn placement(&self) -> Result<PlacementConfig, ConfigError> {
        let kind = match self.get("placement.kind") {
            "first_free" => PlacementStrategy::FirstFree,
            "consolidated" => PlacementStrategy::Consolidated,
            "tiresias" => PlacementStrategy::TiresiasSkew,
            "profile_guided" => PlacementStrategy::ProfileGuided,
            other => return Err(ConfigError::key("placement.kind", format!("unknown placement kind `{other}`"))),
        };
        let mut cfg = PlacementConfig::new(kind);
        cfg.intra_node_bandwidth_aware = self.parse("placement.intra_node_bandwidth_aware")?;
        Ok(cfg)
    }

    pub fn policy_spec(&self) -> Result<PolicySpec, ConfigError> {
        Ok(PolicySpec { admission: self.admission()?, scheduler: self.scheduler()?, placement: self.placement()? })
    }

    pub fn synth(&self) -> Result<SynthConfig, ConfigError> {
        let period_rounds: u64 = self.parse("synth.period_rounds")?;
        if period_rounds == 0 {
            return Err(ConfigError::key("synth.period_rounds", "must be at least 1"));
        }
        let objective = match self.get("synth.objective") {
            "avg_jct" => Objective::AvgJct,
            "avg_responsiveness" => Objective::AvgResponsiveness,
            "both" => Objective::Both,
            other => return Err(ConfigError::key("synth.objective", format!("unknown objective `{other}`"))),
        };
        let inner_horizon = match self.get("synth.inner_horizon") {
            "drain" => InnerHorizon::RunToDrain,
            _ => match self.parse::<u64>("synth.inner_horizon")? {
                0 => return Err(ConfigError::key("synth.inner_horizon", "must be at least 1")),
                n => InnerHorizon::FixedRounds(n),
            },
        };
        let candidates = match self.get("synth.candidates") {
            "default" => default_candidates(),
            s => s
                .split(',')
                .map(str::trim)
                .filter(|x| !x.is_empty())
                .map(|c| {
                    parse_combo(c).ok_or_else(|| ConfigError::key("synth.candidates", format!("bad candidate `{c}`")))
                })
                .collect::<Result<Vec<_>, _>>()?,
        };
        if candidates.is_empty() {
            return Err(ConfigError::key("synth.candidates", "no candidates"));
        }
        Ok(SynthConfig { period_rounds, objective, inner_horizon, candidates })
    }

    pub fn lease_grid(&self) -> Result<LeaseGrid, ConfigError> {
        let workers: Vec<u32> = self.list("lease.workers")?;
        if workers.is_empty() {
            return Err(ConfigError::key("lease.workers", "empty worker grid"));
        }
        if workers.contains(&0) {
            return Err(ConfigError::key("lease.workers", "worker counts must be positive"));
        }
        let rounds: u64 = self.parse("lease.rounds")?;
        if rounds == 0 {
            return Err(ConfigError::key("lease.rounds", "must be at least 1"));
        }
        let seeds: u64 = self.parse("lease.seeds")?;
        if seeds == 0 {
            return Err(ConfigError::key("lease.seeds", "must be at least 1"));
        }
        let base = self.seed()?;
        Ok(LeaseGrid {
            workers,
            rounds,
            revocations: self.parse("lease.revocations")?,
            seeds: (base..base + seeds).collect(),
            modes: vec![LeaseMode::Optimistic, LeaseMode::Central],
        })
    }

    fn mix(&self) -> Result<JobMix, ConfigError> {
        let mut mix = match self.get("workload.mix") {
            "default" => JobMix::default(),
            "bimodal" => JobMix::bimodal(),
            other => return Err(ConfigError::key("workload.mix", format!("unknown mix `{other}`"))),
        };
        let w = self.get("workload.demand_weights");
        if !w.is_empty() {
            mix.demand_weights = w
                .split(',')
                .map(|p| {
                    let (g, x) = p.split_once(':')?;
                    Some((g.trim().parse().ok()?, x.trim().parse().ok()?))
                })
                .collect::<Option<Vec<(u32, f64)>>>()
                .ok_or_else(|| ConfigError::key("workload.demand_weights", "expected gpus:weight pairs"))?;
        }
        mix.validate().map_err(|e| ConfigError::key("workload.demand_weights", e))?;
        Ok(mix)
    }

    fn arrivals(&self) -> Result<ArrivalConfig, ConfigError> {
        let mut cfg =
            ArrivalConfig::poisson(self.positive("workload.lambda")?, self.parse("workload.count")?, self.seed()?);
        if self.parse("workload.spike")? {
            cfg.spike =
                Some(SpikeConfig { extra_jobs: self.parse("workload.spike_extra_jobs")?, ..SpikeConfig::default() });
        }
        if self.parse("workload.bursty")? {
            cfg.bursty = Some(BurstyConfig {
                multiplier: self.non_negative("workload.bursty_multiplier")?,
                ..BurstyConfig::default()
            });
        }
        cfg.validate().map_err(|e| ConfigError::key("workload.lambda", e))?;
        Ok(cfg)
    }

    fn profiles(&self) -> Result<Vec<Arc<ModelProfile>>, ConfigError> {
        let overhead = match self.get("workload.restart_overhead") {
            "" => None,
            _ => Some(self.non_negative("workload.restart_overhead")?),
        };
        let mut profiles = match self.path("workload.profiles") {
            Some(p) => parse_profiles(&p, overhead.unwrap_or(DEFAULT_RESTART_OVERHEAD))
                .map_err(|e| ConfigError::key("workload.profiles", e))?,
            None => default_profiles(),
        };
        if let Some(o) = overhead {
            for p in &mut profiles {
                Arc::make_mut(p).restart_overhead = o;
            }
        }
        if let Some(p) = self.path("workload.loss_curves") {
            let text = fs::read_to_string(&p).map_err(|e| ConfigError::key("workload.loss_curves", e))?;
            attach_loss_curves(&mut profiles, &text).map_err(|e| ConfigError::key("workload.loss_curves", e))?;
        }
        Ok(profiles)
    }

    /// Loads or synthesizes the trace and turns it into job records.
    pub fn jobs(&self) -> Result<Vec<JobRecord>, ConfigError> {
        let seed = self.seed()?;
        let entries = match self.path("workload.trace") {
            Some(p) => {
                let mut e = parse_trace(&p).map_err(|e| ConfigError::key("workload.trace", e))?;
                if e.iter().any(|x| x.submit_time.is_none()) {
                    fill_arrivals(&mut e, &self.arrivals()?);
                    e = renumber_by_arrival(e);
                }
                e
            }
            None => {
                synthesize_trace(&self.arrivals()?, &self.mix()?).map_err(|e| ConfigError::key("workload.lambda", e))?
            }
        };
        let mut jobs = assign_models(&entries, &self.profiles()?, seed).map_err(|e| match e {
            WorkloadError::UnknownModel(_) | WorkloadError::MissingProfile { .. } => {
                ConfigError::key("workload.profiles", e)
            }
            other => ConfigError::key("workload.trace", other),
        })?;
        let share = self.non_negative("workload.convergence_share")?;
        if share > 1.0 {
            return Err(ConfigError::key("workload.convergence_share", "must be at most 1"));
        }
        let fraction = self.positive("workload.convergence_fraction")?;
        if fraction > 1.0 {
            return Err(ConfigError::key("workload.convergence_fraction", "must be at most 1"));
        }
        if share > 0.0 {
            assign_convergence(&mut jobs, share, fraction, seed);
        }
        Ok(jobs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeaseGrid {
    pub workers: Vec<u32>,
    pub rounds: u64,
    pub revocations: u64,
    pub seeds: Vec<u64>,
    pub modes: Vec<LeaseMode>,
}

fn parse_sched_kind(s: &str) -> Option<SchedulerKind> {
    Some(match s {
        "fifo" => SchedulerKind::Fifo,
        "srtf" => SchedulerKind::Srtf,
        "las" => SchedulerKind::Las,
        "dlas" => SchedulerKind::DiscreteLas,
        "optimus" => SchedulerKind::OptimusLike,
        _ => return None,
    })
}

/// `sched/admission`, where admission is `accept_all` or a factor.
fn parse_combo(s: &str) -> Option<PolicyCombo> {
    let (k, a) = s.split_once('/')?;
    let admission = match a.trim() {
        "accept_all" => AdmissionConfig::accept_all(),
        f => {
            let f: f64 = f.parse().ok()?;
            (f > 0.0).then_some(AdmissionConfig::threshold(f))?
        }
    };
    Some(PolicyCombo::new(admission, parse_sched_kind(k.trim())?))
}

/// One node per line: `gpu_count,inter_node_bw,row;row;...` where each row
/// is a space-separated list of Gbps values. `#` starts a comment.
pub fn parse_topology(text: &str) -> Result<Vec<NodeSpec>, String> {
    let mut nodes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |m: &str| format!("line {}: {m}", i + 1);
        let parts: Vec<&str> = line.splitn(3, ',').collect();
        if parts.len() != 3 {
            return Err(err("expected gpu_count,inter_node_bw,matrix"));
        }
        let gpu_count: u32 = parts[0].trim().parse().map_err(|_| err("bad gpu_count"))?;
        let inter: f64 = parts[1].trim().parse().map_err(|_| err("bad inter_node_bw"))?;
        let matrix = parts[2]
            .split(';')
            .map(|r| r.split_whitespace().map(|x| x.parse::<f64>()).collect::<Result<Vec<_>, _>>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| err("bad bandwidth value"))?;
        let node = NodeSpec {
            node_id: nodes.len() as u32,
            gpu_count,
            gpu_type: "V100".to_string(),
            intra_node_bw: matrix,
            inter_node_bw: inter,
        };
        node.validate().map_err(|e| err(&e.to_string()))?;
        nodes.push(node);
    }
    if nodes.is_empty() {
        return Err("no nodes".into());
    }
    Ok(nodes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let c = RawConfig::default();
        let sim = c.sim_config().unwrap();
        assert_eq!(sim.nodes.len(), 32);
        assert_eq!(sim.metrics_window, Some(3000..4000));
        c.policy_spec().unwrap();
        assert_eq!(c.synth().unwrap().candidates.len(), 9);
        assert_eq!(c.lease_grid().unwrap().seeds.len(), 10);
    }

    #[test]
    fn overrides_and_errors_name_the_key() {
        let mut c = RawConfig::default();
        c.apply_text("# comment\nsched.kind = las\n\nadmission.kind=threshold_fifo # trailing\n").unwrap();
        assert_eq!(c.scheduler().unwrap().kind, SchedulerKind::Las);
        assert_eq!(c.admission().unwrap().kind, AdmissionKind::ThresholdFifo);
        let e = c.apply("nope.key=1").unwrap_err();
        assert!(e.to_string().starts_with("nope.key"));
        c.set("sched.kind", "bogus").unwrap();
        assert!(c.scheduler().unwrap_err().to_string().starts_with("sched.kind"));
        c.set("sim.metrics_window", "5..2").unwrap();
        assert!(c.sim_config().unwrap_err().to_string().starts_with("sim.metrics_window"));
    }

    #[test]
    fn manifest_round_trips() {
        let mut c = RawConfig::default();
        c.set("workload.lambda", "3.5").unwrap();
        let mut d = RawConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn candidates_and_topology() {
        let mut c = RawConfig::default();
        c.set("synth.candidates", "fifo/accept_all, las/1.2").unwrap();
        let s = c.synth().unwrap();
        assert_eq!(s.candidates.len(), 2);
        assert_eq!(s.candidates[1].label(), "las+accept_1.2x");
        c.set("synth.candidates", "las/zero").unwrap();
        assert!(c.synth().is_err());
        let nodes = parse_topology("2,10,0 80;80 0\n# c\n3,10,0 1 1;1 0 1;1 1 0\n").unwrap();
        assert_eq!(nodes.len(), 2);
        assert_eq!(nodes[1].node_id, 1);
        assert!(parse_topology("2,10,0 80;70 0").is_err());
    }
}
