use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use crate::state::PlacementKind;

use super::WorkloadError;

/// Restart overhead applied when a profile does not state one.
pub const DEFAULT_RESTART_OVERHEAD: f64 = 30.0;

/// Per-model performance profile.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelProfile {
    pub model_name: String,
    /// (gpu_count, placement) -> seconds per iteration.
    pub entries: BTreeMap<(u32, PlacementKind), f64>,
    pub restart_overhead: f64,
    pub placement_sensitive: bool,
    /// (iteration, loss) samples, ascending by iteration.
    pub loss_curve: Option<Vec<(u64, f64)>>,
}

impl ModelProfile {
    /// A profile whose iteration time does not depend on GPU count or placement.
    pub fn constant(name: &str, iter_time: f64, restart_overhead: f64) -> Self {
        let mut entries = BTreeMap::new();
        for g in [1, 1 << 16] {
            entries.insert((g, PlacementKind::Consolidated), iter_time);
            entries.insert((g, PlacementKind::Spread), iter_time);
        }
        Self { model_name: name.to_string(), entries, restart_overhead, placement_sensitive: false, loss_curve: None }
    }

    /// Seconds per iteration on `gpus` GPUs.
    ///
    /// Unlisted GPU counts are interpolated linearly in `1/gpus` between the
    /// nearest listed neighbours; counts outside the listed range are an
    /// error. A profile without any spread rows answers spread queries from
    /// its consolidated rows.
    pub fn iter_time(&self, gpus: u32, kind: PlacementKind) -> Result<f64, WorkloadError> {
        let kind = if kind == PlacementKind::Spread && !self.entries.keys().any(|(_, k)| *k == PlacementKind::Spread) {
            PlacementKind::Consolidated
        } else {
            kind
        };
        if let Some(t) = self.entries.get(&(gpus, kind)) {
            return Ok(*t);
        }
        let missing = || WorkloadError::MissingProfile { model: self.model_name.clone(), gpus };
        let lo = self
            .entries
            .range((0, kind)..(gpus, kind))
            .rev()
            .find(|((_, k), _)| *k == kind)
            .map(|((g, _), t)| (*g, *t));
        let hi = self.entries.range((gpus, kind)..).find(|((_, k), _)| *k == kind).map(|((g, _), t)| (*g, *t));
        let ((g0, t0), (g1, t1)) = lo.zip(hi).ok_or_else(missing)?;
        let (x0, x1, x) = (1.0 / g0 as f64, 1.0 / g1 as f64, 1.0 / gpus as f64);
        Ok(t0 + (t1 - t0) * (x - x0) / (x1 - x0))
    }

    /// Loss at `iteration`, linearly interpolated on the loss curve and
    /// clamped at its ends.
    pub fn loss_at(&self, iteration: u64) -> Option<f64> {
        let curve = self.loss_curve.as_ref()?;
        let first = curve.first()?;
        if iteration <= first.0 {
            return Some(first.1);
        }
        for w in curve.windows(2) {
            let ((i0, l0), (i1, l1)) = (w[0], w[1]);
            if iteration <= i1 {
                let f = (iteration - i0) as f64 / (i1 - i0).max(1) as f64;
                return Some(l0 + (l1 - l0) * f);
            }
        }
        curve.last().map(|p| p.1)
    }

    /// Checks consolidated <= spread and non-increasing time in GPU count.
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |msg: String| WorkloadError::InvalidProfile { model: self.model_name.clone(), msg };
        for ((g, kind), t) in &self.entries {
            if !(*t > 0.0) {
                return Err(bad(format!("iteration time for {g} GPUs must be positive")));
            }
            if *kind == PlacementKind::Consolidated {
                if let Some(s) = self.entries.get(&(*g, PlacementKind::Spread)) {
                    if s < t {
                        return Err(bad(format!("spread faster than consolidated at {g} GPUs")));
                    }
                }
            }
        }
        for kind in [PlacementKind::Consolidated, PlacementKind::Spread] {
            let times: Vec<f64> = self.entries.iter().filter(|((_, k), _)| *k == kind).map(|(_, t)| *t).collect();
            if times.windows(2).any(|w| w[1] > w[0]) {
                return Err(bad(format!("{kind:?} iteration time increases with GPU count")));
            }
        }
        if !(self.restart_overhead >= 0.0) {
            return Err(bad("restart overhead must be non-negative".into()));
        }
        Ok(())
    }
}

/// Builds a profile from a single-GPU iteration time and a parallel
/// efficiency curve. `spread_penalty` multiplies the consolidated time.
fn scaled(name: &str, t1: f64, efficiency: f64, spread_penalty: f64, sensitive: bool) -> ModelProfile {
    let mut entries = BTreeMap::new();
    for g in [1u32, 2, 4, 8, 16, 32, 64] {
        // Amdahl-style strong scaling.
        let t = t1 * ((1.0 - efficiency) + efficiency / g as f64);
        entries.insert((g, PlacementKind::Consolidated), t);
        let penalty = if g == 1 { 1.0 } else { spread_penalty };
        entries.insert((g, PlacementKind::Spread), t * penalty);
    }
    ModelProfile {
        model_name: name.to_string(),
        entries,
        restart_overhead: DEFAULT_RESTART_OVERHEAD,
        placement_sensitive: sensitive,
        loss_curve: None,
    }
}

/// Built-in profiles for the seven reference models.
pub fn default_profiles() -> Vec<Arc<ModelProfile>> {
    vec![
        scaled("resnet18", 0.060, 0.95, 1.02, false),
        scaled("cyclegan", 0.450, 0.93, 1.10, true),
        scaled("resnet50", 0.210, 0.94, 1.12, true),
        scaled("lstm", 0.120, 0.90, 1.18, true),
        scaled("recoder", 0.080, 0.85, 1.21, true),
        scaled("transformer", 0.250, 0.92, 1.16, true),
        scaled("a3c", 0.900, 0.97, 1.01, false),
    ]
    .into_iter()
    .map(Arc::new)
    .collect()
}

/// Models whose tensor-size skew the skew heuristic flags for consolidation.
pub fn default_skew_models() -> Vec<String> {
    ["lstm", "recoder", "transformer"].iter().map(|s| s.to_string()).collect()
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

/// Reads the profile CSV:
/// `model,gpu_count,placement,iter_time_s,restart_overhead_s,placement_sensitive`.
pub fn parse_profiles(path: &Path, default_overhead: f64) -> Result<Vec<Arc<ModelProfile>>, WorkloadError> {
    let text = std::fs::read_to_string(path).map_err(|e| WorkloadError::Io(path.display().to_string(), e))?;
    parse_profiles_str(&text, default_overhead)
}

pub fn parse_profiles_str(text: &str, default_overhead: f64) -> Result<Vec<Arc<ModelProfile>>, WorkloadError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| WorkloadError::parse(1, e))?.clone();
    let expected = ["model", "gpu_count", "placement", "iter_time_s", "restart_overhead_s", "placement_sensitive"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(WorkloadError::parse(1, format!("expected header {}", expected.join(","))));
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_name: BTreeMap<String, ModelProfile> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| WorkloadError::parse(e.position().map_or(0, |p| p.line()), e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let err = |msg: &str| WorkloadError::parse(line, msg);
        let name = rec[0].to_string();
        if name.is_empty() {
            return Err(err("empty model name"));
        }
        let gpus: u32 = rec[1].parse().map_err(|_| err("gpu_count must be a positive integer"))?;
        if gpus == 0 {
            return Err(err("gpu_count must be a positive integer"));
        }
        let kind = match rec[2].to_ascii_lowercase().as_str() {
            "consolidated" => PlacementKind::Consolidated,
            "spread" => PlacementKind::Spread,
            _ => return Err(err("placement must be consolidated or spread")),
        };
        let t: f64 = rec[3].parse().map_err(|_| err("iter_time_s must be a number"))?;
        if !(t > 0.0) {
            return Err(err("iter_time_s must be positive"));
        }
        let overhead = if rec[4].is_empty() {
            None
        } else {
            let o: f64 = rec[4].parse().map_err(|_| err("restart_overhead_s must be a number"))?;
            if !(o >= 0.0) {
                return Err(err("restart_overhead_s must be non-negative"));
            }
            Some(o)
        };
        let sensitive = if rec[5].is_empty() {
            None
        } else {
            Some(parse_bool(&rec[5]).ok_or_else(|| err("placement_sensitive must be true or false"))?)
        };
        let p = by_name.entry(name.clone()).or_insert_with(|| {
            order.push(name.clone());
            ModelProfile {
                model_name: name.clone(),
                entries: BTreeMap::new(),
                restart_overhead: default_overhead,
                placement_sensitive: false,
                loss_curve: None,
            }
        });
        if p.entries.insert((gpus, kind), t).is_some() {
            return Err(err("duplicate (model, gpu_count, placement) row"));
        }
        if let Some(o) = overhead {
            p.restart_overhead = o;
        }
        if let Some(s) = sensitive {
            p.placement_sensitive = s;
        }
    }
    let mut out = Vec::new();
    for name in order {
        let p = by_name.remove(&name).expect("inserted above");
        p.validate()?;
        out.push(Arc::new(p));
    }
    Ok(out)
}

/// Reads `model,iteration,loss` rows and attaches them to matching profiles.
pub fn attach_loss_curves(profiles: &mut [Arc<ModelProfile>], text: &str) -> Result<(), WorkloadError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut curves: BTreeMap<String, Vec<(u64, f64)>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| WorkloadError::parse(e.position().map_or(0, |p| p.line()), e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 {
            return Err(WorkloadError::parse(line, "expected model,iteration,loss"));
        }
        let it: u64 = rec[1].parse().map_err(|_| WorkloadError::parse(line, "bad iteration"))?;
        let loss: f64 = rec[2].parse().map_err(|_| WorkloadError::parse(line, "bad loss"))?;
        curves.entry(rec[0].to_string()).or_default().push((it, loss));
    }
    for (name, mut curve) in curves {
        curve.sort_by_key(|p| p.0);
        let p = profiles
            .iter_mut()
            .find(|p| p.model_name == name)
            .ok_or_else(|| WorkloadError::UnknownModel(name.clone()))?;
        Arc::make_mut(p).loss_curve = Some(curve);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use PlacementKind::*;

    #[test]
    fn interpolates_on_inverse_gpu_count() {
        let mut p = ModelProfile::constant("m", 1.0, 0.0);
        p.entries.clear();
        p.entries.insert((1, Consolidated), 1.0);
        p.entries.insert((4, Consolidated), 0.25);
        // 1/g = 0.5 sits 2/3 of the way from 1.0 to 0.25 in 1/g.
        let t = p.iter_time(2, Consolidated).unwrap();
        assert!((t - 0.5).abs() < 1e-12);
        assert!(p.iter_time(8, Consolidated).is_err());
        // No spread rows: falls back to consolidated.
        assert_eq!(p.iter_time(4, Spread).unwrap(), 0.25);
    }

    #[test]
    fn defaults_are_valid() {
        for p in default_profiles() {
            p.validate().unwrap();
            assert!(p.iter_time(3, Spread).unwrap() >= p.iter_time(3, Consolidated).unwrap());
        }
    }

    #[test]
    fn profile_csv_roundtrip_and_defaults() {
        let text = "model,gpu_count,placement,iter_time_s,restart_overhead_s,placement_sensitive\n\
                    a,1,consolidated,1.0,,true\n\
                    a,2,consolidated,0.6,,\n\
                    a,2,spread,0.8,,\n\
                    b,1,consolidated,2.0,12,false\n";
        let ps = parse_profiles_str(text, 30.0).unwrap();
        assert_eq!(ps.len(), 2);
        assert_eq!(ps[0].restart_overhead, 30.0);
        assert!(ps[0].placement_sensitive);
        assert_eq!(ps[1].restart_overhead, 12.0);
        assert_eq!(ps[0].iter_time(2, Spread).unwrap(), 0.8);
    }

    #[test]
    fn profile_csv_rejects_inverted_placement() {
        let text = "model,gpu_count,placement,iter_time_s,restart_overhead_s,placement_sensitive\n\
                    a,2,consolidated,1.0,,\n\
                    a,2,spread,0.5,,\n";
        assert!(matches!(parse_profiles_str(text, 30.0), Err(WorkloadError::InvalidProfile { .. })));
    }

    #[test]
    fn loss_curve_interpolation() {
        let mut ps = vec![Arc::new(ModelProfile::constant("m", 1.0, 0.0))];
        attach_loss_curves(&mut ps, "model,iteration,loss\nm,0,2.0\nm,100,1.0\n").unwrap();
        assert_eq!(ps[0].loss_at(50), Some(1.5));
        assert_eq!(ps[0].loss_at(500), Some(1.0));
    }
}
