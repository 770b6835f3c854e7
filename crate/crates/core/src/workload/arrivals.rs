use rand::Rng;
use rand_distr::{Distribution, Exp};

use super::{rng_for, stream, TraceEntry, WorkloadError};

const HOUR: f64 = 3600.0;

/// Extra jobs injected into a fixed window of every period.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeConfig {
    pub extra_jobs: u32,
    /// [start, end) hour offsets inside each period.
    pub window_hours: (f64, f64),
    pub period_hours: f64,
}

impl Default for SpikeConfig {
    fn default() -> Self {
        Self { extra_jobs: 16, window_hours: (9.0, 10.0), period_hours: 24.0 }
    }
}

/// Periodic bursts of short jobs at a multiple of the base rate.
#[derive(Debug, Clone, PartialEq)]
pub struct BurstyConfig {
    pub multiplier: f64,
    /// [start, end) hour offsets inside each period.
    pub on_hours: (f64, f64),
    pub period_hours: f64,
    pub short_job_min: f64,
    pub short_job_max: f64,
}

impl Default for BurstyConfig {
    /// Two burst hours after every four normal hours; bursts carry 10-60
    /// minute jobs at twice the base rate.
    fn default() -> Self {
        Self { multiplier: 2.0, on_hours: (4.0, 6.0), period_hours: 6.0, short_job_min: 600.0, short_job_max: 3600.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalConfig {
    pub lambda_jobs_per_hour: f64,
    pub seed: u64,
    pub count: usize,
    pub spike: Option<SpikeConfig>,
    pub bursty: Option<BurstyConfig>,
}

impl ArrivalConfig {
    pub fn poisson(lambda_jobs_per_hour: f64, count: usize, seed: u64) -> Self {
        Self { lambda_jobs_per_hour, seed, count, spike: None, bursty: None }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::InvalidConfig(m.to_string()));
        if !(self.lambda_jobs_per_hour > 0.0) {
            return bad("arrival rate must be positive");
        }
        let window_ok = |(a, b): (f64, f64), p: f64| a >= 0.0 && b > a && b <= p && (b - a) < p;
        if let Some(s) = &self.spike {
            if !window_ok(s.window_hours, s.period_hours) {
                return bad("spike window must lie inside and be shorter than its period");
            }
        }
        if let Some(b) = &self.bursty {
            if !window_ok(b.on_hours, b.period_hours) {
                return bad("burst window must lie inside and be shorter than its period");
            }
            if !(b.multiplier >= 0.0) || !(b.short_job_min > 0.0) || b.short_job_max < b.short_job_min {
                return bad("burst multiplier and short-job range must be valid");
            }
        }
        Ok(())
    }
}

/// Poisson arrivals: `count` timestamps with exponential gaps of mean
/// `3600 / lambda` seconds, starting from time zero.
pub fn generate_arrivals(cfg: &ArrivalConfig) -> Vec<f64> {
    let mut rng = rng_for(cfg.seed, stream::ARRIVALS);
    let exp = Exp::new(cfg.lambda_jobs_per_hour / HOUR).expect("positive rate");
    let mut t = 0.0;
    (0..cfg.count)
        .map(|_| {
            t += exp.sample(&mut rng);
            t
        })
        .collect()
}

/// Absolute [start, end) windows, in seconds, that open before `horizon`.
pub fn periodic_windows(horizon: f64, window_hours: (f64, f64), period_hours: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut p = 0.0;
    loop {
        let start = (p * period_hours + window_hours.0) * HOUR;
        if start >= horizon {
            break;
        }
        out.push((start, (p * period_hours + window_hours.1) * HOUR));
        p += 1.0;
    }
    out
}

/// Spike timestamps alone, uniform inside every window before `horizon`.
pub fn spike_arrivals(horizon: f64, spike: &SpikeConfig, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, stream::SPIKE);
    let mut out = Vec::new();
    for (a, b) in periodic_windows(horizon, spike.window_hours, spike.period_hours) {
        for _ in 0..spike.extra_jobs {
            out.push(rng.random_range(a..b));
        }
    }
    out.sort_by(f64::total_cmp);
    out
}

/// Adds `extra_jobs` arrivals inside each spike window up to the last base
/// arrival and returns the merged, sorted list.
pub fn inject_spike(arrivals: &[f64], spike: &SpikeConfig, seed: u64) -> Vec<f64> {
    let horizon = arrivals.last().copied().unwrap_or(0.0);
    let mut out = arrivals.to_vec();
    out.extend(spike_arrivals(horizon, spike, seed));
    out.sort_by(f64::total_cmp);
    out
}

/// GPU-demand and duration mix of the synthetic Philly-style workload.
///
/// Durations are log-uniform in minutes: with probability `short_fraction`
/// from `10^short_log10_minutes`, otherwise from `10^long_log10_minutes`.
/// The default is a single band of roughly 2 to 19 hours;
/// [`JobMix::bimodal`] gives a heavier-tailed short/long mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct JobMix {
    pub demand_weights: Vec<(u32, f64)>,
    pub short_fraction: f64,
    pub short_log10_minutes: (f64, f64),
    pub long_log10_minutes: (f64, f64),
}

impl Default for JobMix {
    fn default() -> Self {
        Self {
            demand_weights: vec![(1, 0.70), (2, 0.10), (4, 0.15), (8, 0.05)],
            short_fraction: 0.0,
            short_log10_minutes: (1.5, 3.0),
            long_log10_minutes: (2.05, 3.05),
        }
    }
}

impl JobMix {
    /// 80% of jobs at 30 minutes to 17 hours, the rest at 17 hours to a week.
    pub fn bimodal() -> Self {
        Self { short_fraction: 0.8, long_log10_minutes: (3.0, 4.0), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::InvalidConfig(m.to_string()));
        if self.demand_weights.is_empty()
            || self.demand_weights.iter().any(|(g, w)| *g == 0 || !(*w >= 0.0))
            || !(self.demand_weights.iter().map(|(_, w)| w).sum::<f64>() > 0.0)
        {
            return bad("demand weights must be non-empty, positive GPU counts with non-negative weights");
        }
        if !(0.0..=1.0).contains(&self.short_fraction) {
            return bad("short fraction must be in [0, 1]");
        }
        for (a, b) in [self.short_log10_minutes, self.long_log10_minutes] {
            if !(b >= a) {
                return bad("duration ranges must be ordered");
            }
        }
        Ok(())
    }

    pub fn sample_demand<R: Rng>(&self, rng: &mut R) -> u32 {
        let total: f64 = self.demand_weights.iter().map(|(_, w)| w).sum();
        let mut x = rng.random_range(0.0..total);
        for (g, w) in &self.demand_weights {
            if x < *w {
                return *g;
            }
            x -= w;
        }
        self.demand_weights.last().expect("validated non-empty").0
    }

    pub fn sample_duration<R: Rng>(&self, rng: &mut R) -> f64 {
        let (a, b) =
            if rng.random_bool(self.short_fraction) { self.short_log10_minutes } else { self.long_log10_minutes };
        let exp10 = if b > a { rng.random_range(a..b) } else { a };
        60.0 * 10f64.powf(exp10)
    }

    /// Mean GPU-seconds per job, for load estimates.
    pub fn mean_gpu_seconds(&self) -> f64 {
        let total: f64 = self.demand_weights.iter().map(|(_, w)| w).sum();
        let demand: f64 = self.demand_weights.iter().map(|(g, w)| *g as f64 * w).sum::<f64>() / total;
        let mean_pow = |(a, b): (f64, f64)| {
            if b > a {
                (10f64.powf(b) - 10f64.powf(a)) / ((b - a) * std::f64::consts::LN_10)
            } else {
                10f64.powf(a)
            }
        };
        let minutes = self.short_fraction * mean_pow(self.short_log10_minutes)
            + (1.0 - self.short_fraction) * mean_pow(self.long_log10_minutes);
        demand * minutes * 60.0
    }
}

/// Adds short jobs arriving at `multiplier * lambda` inside every burst
/// window before the last existing arrival. Output is sorted by submit time
/// with dense job ids.
pub fn inject_bursty(entries: Vec<TraceEntry>, cfg: &ArrivalConfig, mix: &JobMix) -> Vec<TraceEntry> {
    let Some(b) = &cfg.bursty else { return entries };
    let horizon = entries.iter().filter_map(|e| e.submit_time).fold(0.0, f64::max);
    let mut out = entries;
    let rate = b.multiplier * cfg.lambda_jobs_per_hour / HOUR;
    if rate > 0.0 {
        let mut rng = rng_for(cfg.seed, stream::BURSTY);
        let exp = Exp::new(rate).expect("positive rate");
        for (start, end) in periodic_windows(horizon, b.on_hours, b.period_hours) {
            let mut t = start + exp.sample(&mut rng);
            while t < end {
                let duration = rng.random_range(b.short_job_min..=b.short_job_max);
                out.push(TraceEntry {
                    job_id: 0,
                    submit_time: Some(t),
                    gpu_demand: mix.sample_demand(&mut rng),
                    duration_isolated: duration,
                    model_name: None,
                });
                t += exp.sample(&mut rng);
            }
        }
    }
    renumber_by_arrival(out)
}

/// Stable sort by submit time, then dense ids from zero.
pub fn renumber_by_arrival(mut entries: Vec<TraceEntry>) -> Vec<TraceEntry> {
    entries.sort_by(|a, b| a.submit_time.unwrap_or(0.0).total_cmp(&b.submit_time.unwrap_or(0.0)));
    for (i, e) in entries.iter_mut().enumerate() {
        e.job_id = i as u32;
    }
    entries
}

/// Full synthetic trace: Poisson base arrivals, optional daily spike and
/// optional bursts, with demands and durations drawn from `mix`.
pub fn synthesize_trace(cfg: &ArrivalConfig, mix: &JobMix) -> Result<Vec<TraceEntry>, WorkloadError> {
    cfg.validate()?;
    mix.validate()?;
    let base = generate_arrivals(cfg);
    let mut rng = rng_for(cfg.seed, stream::MIX);
    let mut entries: Vec<TraceEntry> = base
        .iter()
        .map(|&t| TraceEntry {
            job_id: 0,
            submit_time: Some(t),
            gpu_demand: mix.sample_demand(&mut rng),
            duration_isolated: mix.sample_duration(&mut rng),
            model_name: None,
        })
        .collect();
    if let Some(spike) = &cfg.spike {
        let horizon = base.last().copied().unwrap_or(0.0);
        let mut srng = rng_for(cfg.seed, stream::SPIKE_MIX);
        for t in spike_arrivals(horizon, spike, cfg.seed) {
            entries.push(TraceEntry {
                job_id: 0,
                submit_time: Some(t),
                gpu_demand: mix.sample_demand(&mut srng),
                duration_isolated: mix.sample_duration(&mut srng),
                model_name: None,
            });
        }
    }
    let entries = renumber_by_arrival(entries);
    Ok(inject_bursty(entries, cfg, mix))
}

/// Fills missing submit times from the Poisson generator, in row order.
pub fn fill_arrivals(entries: &mut [TraceEntry], cfg: &ArrivalConfig) {
    let missing = entries.iter().filter(|e| e.submit_time.is_none()).count();
    let times = generate_arrivals(&ArrivalConfig { count: missing, ..cfg.clone() });
    let mut it = times.into_iter();
    for e in entries.iter_mut().filter(|e| e.submit_time.is_none()) {
        e.submit_time = it.next();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_count_is_empty() {
        assert!(generate_arrivals(&ArrivalConfig::poisson(4.0, 0, 1)).is_empty());
    }

    #[test]
    fn deterministic_and_sorted() {
        let cfg = ArrivalConfig::poisson(4.0, 500, 11);
        let a = generate_arrivals(&cfg);
        assert_eq!(a, generate_arrivals(&cfg));
        assert!(a.windows(2).all(|w| w[0] <= w[1]));
        assert_ne!(a, generate_arrivals(&ArrivalConfig::poisson(4.0, 500, 12)));
    }

    #[test]
    fn spike_zero_extra_is_identity() {
        let base = generate_arrivals(&ArrivalConfig::poisson(8.0, 100, 3));
        let s = SpikeConfig { extra_jobs: 0, ..Default::default() };
        assert_eq!(inject_spike(&base, &s, 3), base);
    }

    #[test]
    fn spike_lands_in_window() {
        // A 24 h base trace ending just before midnight.
        let base = vec![0.0, 3.0 * HOUR, 23.5 * HOUR];
        let out = inject_spike(&base, &SpikeConfig::default(), 9);
        assert_eq!(out.len(), 3 + 16);
        let extra = out.iter().filter(|t| **t >= 9.0 * HOUR && **t < 10.0 * HOUR).count();
        assert_eq!(extra, 16);
    }

    #[test]
    fn periodic_windows_count_days() {
        assert_eq!(periodic_windows(47.9 * HOUR, (9.0, 10.0), 24.0).len(), 2);
        assert_eq!(periodic_windows(8.0 * HOUR, (9.0, 10.0), 24.0).len(), 0);
    }

    #[test]
    fn bursty_zero_multiplier_adds_nothing() {
        let mut cfg = ArrivalConfig::poisson(8.0, 50, 5);
        cfg.bursty = Some(BurstyConfig { multiplier: 0.0, ..Default::default() });
        let plain = synthesize_trace(&ArrivalConfig { bursty: None, ..cfg.clone() }, &JobMix::default()).unwrap();
        let bursty = synthesize_trace(&cfg, &JobMix::default()).unwrap();
        assert_eq!(plain, bursty);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ArrivalConfig::poisson(0.0, 1, 1);
        assert!(cfg.validate().is_err());
        cfg.lambda_jobs_per_hour = 1.0;
        cfg.spike = Some(SpikeConfig { window_hours: (0.0, 24.0), ..Default::default() });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mix_mean_matches_sampling() {
        let mix = JobMix::default();
        let mut rng = rng_for(1, 99);
        let n = 200_000;
        let mean: f64 =
            (0..n).map(|_| mix.sample_demand(&mut rng) as f64 * mix.sample_duration(&mut rng)).sum::<f64>() / n as f64;
        let rel = (mean - mix.mean_gpu_seconds()).abs() / mix.mean_gpu_seconds();
        assert!(rel < 0.03, "relative error {rel}");
    }
}
