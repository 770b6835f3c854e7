//! Maps ranked jobs to concrete GPUs and picks preemption victims.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use itertools::Itertools;
use rand::seq::IndexedRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scheduling::PrioritizedJobs;
use crate::state::{
    ClusterState, GpuId, IntraNodeChoice, JobId, JobRecord, JobState, NodeId, NodeSpec, Phase, RoundDecision,
};
use crate::workload::{default_skew_models, rng_for, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementStrategy {
    /// Lowest free global GPU ids, no topology awareness.
    FirstFree,
    Consolidated,
    /// Consolidate models flagged as skewed, fill fragments for the rest.
    TiresiasSkew,
    /// Like `TiresiasSkew` but keyed on measured consolidation benefit.
    ProfileGuided,
}

impl PlacementStrategy {
    pub fn label(&self) -> &'static str {
        match self {
            Self::FirstFree => "first_free",
            Self::Consolidated => "consolidated",
            Self::TiresiasSkew => "tiresias",
            Self::ProfileGuided => "profile_guided",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementConfig {
    pub kind: PlacementStrategy,
    pub intra_node_bandwidth_aware: bool,
    pub skew_flags: BTreeMap<String, bool>,
    /// Models missing here fall back to their profile's `placement_sensitive`.
    pub consolidation_benefit: BTreeMap<String, bool>,
}

impl PlacementConfig {
    pub fn new(kind: PlacementStrategy) -> Self {
        Self {
            kind,
            intra_node_bandwidth_aware: false,
            skew_flags: default_skew_models().into_iter().map(|m| (m, true)).collect(),
            consolidation_benefit: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.kind == PlacementStrategy::TiresiasSkew && self.skew_flags.is_empty() {
            return Err("tiresias placement needs skew flags".into());
        }
        Ok(())
    }
}

/// Free GPUs grouped by node, each list ascending.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FreePool {
    pub by_node: BTreeMap<NodeId, Vec<GpuId>>,
}

impl FreePool {
    pub fn from_cluster(cluster: &ClusterState) -> Self {
        Self::from_gpus(cluster, cluster.free_gpus())
    }

    pub fn from_gpus(cluster: &ClusterState, gpus: impl IntoIterator<Item = GpuId>) -> Self {
        let mut by_node: BTreeMap<NodeId, Vec<GpuId>> = BTreeMap::new();
        for g in gpus {
            if let Some(row) = cluster.row(g) {
                by_node.entry(row.node_id).or_default().push(g);
            }
        }
        for v in by_node.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        by_node.retain(|_, v| !v.is_empty());
        Self { by_node }
    }

    pub fn total(&self) -> usize {
        self.by_node.values().map(Vec::len).sum()
    }

    fn take(&mut self, gpus: &[GpuId]) {
        let drop: BTreeSet<GpuId> = gpus.iter().copied().collect();
        for v in self.by_node.values_mut() {
            v.retain(|g| !drop.contains(g));
        }
        self.by_node.retain(|_, v| !v.is_empty());
    }
}

/// Node set for a consolidated allocation: fewest nodes, then fewest
/// leftover free GPUs on the touched nodes, then lowest node ids.
pub fn consolidated_nodes(demand: u32, free: &[(NodeId, u32)]) -> Option<Vec<NodeId>> {
    let demand = demand as usize;
    let total: usize = free.iter().map(|(_, f)| *f as usize).sum();
    if demand == 0 || demand > total {
        return None;
    }
    let mut nodes: Vec<(NodeId, usize)> = free.iter().filter(|(_, f)| *f > 0).map(|(n, f)| (*n, *f as usize)).collect();
    nodes.sort_unstable();
    let mut sizes: Vec<usize> = nodes.iter().map(|(_, f)| *f).collect();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    let mut acc = 0;
    let k = sizes.iter().position(|s| {
        acc += s;
        acc >= demand
    })? + 1;

    if k == 1 {
        return nodes.iter().filter(|(_, f)| *f >= demand).min_by_key(|(n, f)| (*f, *n)).map(|(n, _)| vec![*n]);
    }

    // feasible[i][c][s]: some c-subset of nodes[i..] sums to exactly s.
    let n = nodes.len();
    let mut feasible = vec![vec![vec![false; total + 1]; k + 1]; n + 1];
    feasible[n][0][0] = true;
    for i in (0..n).rev() {
        let f = nodes[i].1;
        for c in 0..=k {
            for s in 0..=total {
                let skip = feasible[i + 1][c][s];
                let take = c > 0 && s >= f && feasible[i + 1][c - 1][s - f];
                feasible[i][c][s] = skip || take;
            }
        }
    }
    let target = (demand..=total).find(|s| feasible[0][k][*s])?;
    // Including the lowest available node id always yields the
    // lexicographically smaller set, so a greedy walk reconstructs it.
    let (mut c, mut s) = (k, target);
    let mut out = Vec::with_capacity(k);
    for (i, (id, f)) in nodes.iter().enumerate() {
        if c > 0 && s >= *f && feasible[i + 1][c - 1][s - f] {
            out.push(*id);
            c -= 1;
            s -= f;
        }
    }
    Some(out)
}

fn free_counts(pool: &FreePool) -> Vec<(NodeId, u32)> {
    pool.by_node.iter().map(|(n, v)| (*n, v.len() as u32)).collect()
}

/// Fills `nodes` from the one with most free GPUs down; the final node may
/// be used partially, taking its lowest ids.
fn fill_nodes(demand: u32, nodes: &[NodeId], pool: &FreePool) -> Vec<GpuId> {
    let mut order: Vec<&NodeId> = nodes.iter().collect();
    order.sort_by_key(|n| (std::cmp::Reverse(pool.by_node[n].len()), **n));
    let mut out = Vec::new();
    for n in order {
        let need = demand as usize - out.len();
        out.extend(pool.by_node[n].iter().take(need));
        if out.len() == demand as usize {
            break;
        }
    }
    out.sort_unstable();
    out
}

/// GPUs for a consolidated allocation out of `pool`.
pub fn choose_gpus_consolidated(demand: u32, pool: &FreePool) -> Option<Vec<GpuId>> {
    let nodes = consolidated_nodes(demand, &free_counts(pool))?;
    Some(fill_nodes(demand, &nodes, pool))
}

/// Fills the smallest free fragments first so large holes survive.
pub fn choose_gpus_fragment_fill(demand: u32, pool: &FreePool) -> Option<Vec<GpuId>> {
    if demand == 0 || demand as usize > pool.total() {
        return None;
    }
    let mut order: Vec<(&NodeId, &Vec<GpuId>)> = pool.by_node.iter().collect();
    order.sort_by_key(|(n, v)| (v.len(), **n));
    let mut out = Vec::new();
    for (_, v) in order {
        let need = demand as usize - out.len();
        out.extend(v.iter().take(need));
        if out.len() == demand as usize {
            break;
        }
    }
    out.sort_unstable();
    Some(out)
}

/// Consolidates skewed models, fragment-fills the rest.
pub fn choose_gpus_tiresias(
    job: &JobRecord,
    demand: u32,
    pool: &FreePool,
    skew_flags: &BTreeMap<String, bool>,
) -> Option<Vec<GpuId>> {
    if skew_flags.get(job.model_name()).copied().unwrap_or(false) {
        choose_gpus_consolidated(demand, pool)
    } else {
        choose_gpus_fragment_fill(demand, pool)
    }
}

/// Same dispatch as [`choose_gpus_tiresias`] keyed on measured benefit.
pub fn choose_gpus_profile_guided(
    job: &JobRecord,
    demand: u32,
    pool: &FreePool,
    benefit: &BTreeMap<String, bool>,
) -> Option<Vec<GpuId>> {
    if benefit.get(job.model_name()).copied().unwrap_or(job.placement_sensitive) {
        choose_gpus_consolidated(demand, pool)
    } else {
        choose_gpus_fragment_fill(demand, pool)
    }
}

/// Lowest free global ids.
pub fn choose_gpus_first_free(demand: u32, pool: &FreePool) -> Option<Vec<GpuId>> {
    let mut all: Vec<GpuId> = pool.by_node.values().flatten().copied().collect();
    if demand == 0 || demand as usize > all.len() {
        return None;
    }
    all.sort_unstable();
    all.truncate(demand as usize);
    Some(all)
}

fn pair_sum(node: &NodeSpec, locals: &[u32]) -> f64 {
    locals.iter().tuple_combinations().map(|(a, b)| node.bandwidth(*a, *b)).sum()
}

/// Local GPUs maximising summed pairwise bandwidth among `free_local`;
/// ties go to the lexicographically smallest set.
pub fn refine_intra_node(demand: u32, free_local: &[u32], node: &NodeSpec) -> Vec<u32> {
    let mut free = free_local.to_vec();
    free.sort_unstable();
    if demand as usize >= free.len() {
        return free;
    }
    let mut best: Option<(f64, Vec<u32>)> = None;
    for combo in free.iter().copied().combinations(demand as usize) {
        let s = pair_sum(node, &combo);
        if best.as_ref().is_none_or(|(b, _)| s > *b) {
            best = Some((s, combo));
        }
    }
    best.map(|(_, c)| c).unwrap_or_default()
}

/// Uniformly random `demand`-subset of `free_local`, sorted.
pub fn random_intra_node(demand: u32, free_local: &[u32], rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut out: Vec<u32> = free_local.choose_multiple(rng, demand as usize).copied().collect();
    out.sort_unstable();
    out
}

/// Maps ranked jobs onto GPUs for one round.
pub trait PlacementPolicy: Send + Sync + fmt::Debug {
    fn place(&mut self, ranked: &PrioritizedJobs, cluster: &ClusterState, jobs: &JobState) -> RoundDecision;

    fn kind_label(&self) -> String;

    fn box_clone(&self) -> Box<dyn PlacementPolicy>;
}

impl Clone for Box<dyn PlacementPolicy> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

/// Builds the round decision for `ranked`.
///
/// Jobs are taken in rank order while their grants fit in the cluster.
/// Running jobs that keep their grant keep their GPUs; running jobs left out
/// are suspended, lowest priority first. `rng` drives local GPU choice when
/// bandwidth awareness is off.
pub fn place(
    ranked: &PrioritizedJobs,
    cluster: &ClusterState,
    jobs: &JobState,
    cfg: &PlacementConfig,
    rng: &mut ChaCha8Rng,
) -> RoundDecision {
    let mut budget = cluster.total_gpus();
    let mut selected: Vec<(JobId, u32)> = Vec::new();
    for &(id, grant) in &ranked.ordered {
        if jobs.get(id).is_none() || grant == 0 {
            continue;
        }
        if grant <= budget {
            budget -= grant;
            selected.push((id, grant));
        }
    }
    let chosen: BTreeSet<JobId> = selected.iter().map(|(id, _)| *id).collect();
    let rank_of: BTreeMap<JobId, usize> = ranked.ordered.iter().enumerate().map(|(i, (id, _))| (*id, i)).collect();

    let mut d = RoundDecision::default();
    let mut victims: Vec<&JobRecord> = jobs.running().filter(|j| !chosen.contains(&j.job_id)).collect();
    victims.sort_by_key(|j| std::cmp::Reverse(rank_of.get(&j.job_id).copied().unwrap_or(usize::MAX)));
    d.to_suspend = victims.iter().map(|j| j.job_id).collect();

    let mut vacated: Vec<GpuId> = cluster.free_gpus();
    for j in &victims {
        vacated.extend(&j.allocation);
    }
    let mut pending = Vec::new();
    for &(id, grant) in &selected {
        let job = &jobs.active[&id];
        if job.phase == Phase::Running {
            if job.allocation.len() == grant as usize {
                d.renewals.push(id);
                continue;
            }
            vacated.extend(&job.allocation);
        }
        pending.push((id, grant));
    }

    let mut pool = FreePool::from_gpus(cluster, vacated);
    for (id, grant) in pending {
        let job = &jobs.active[&id];
        let picked = match cfg.kind {
            PlacementStrategy::FirstFree => choose_gpus_first_free(grant, &pool),
            PlacementStrategy::Consolidated => choose_gpus_consolidated(grant, &pool),
            PlacementStrategy::TiresiasSkew => choose_gpus_tiresias(job, grant, &pool, &cfg.skew_flags),
            PlacementStrategy::ProfileGuided => {
                choose_gpus_profile_guided(job, grant, &pool, &cfg.consolidation_benefit)
            }
        };
        let Some(mut gpus) = picked else { continue };
        if gpus.len() >= 2 && cluster.nodes_spanned(&gpus) == 1 {
            let node_id = cluster.row(gpus[0]).expect("pool holds cluster GPUs").node_id;
            let node = cluster.node(node_id).expect("row node exists");
            let node_free = &pool.by_node[&node_id];
            let free_local: Vec<u32> = node_free.iter().map(|g| cluster.row(*g).expect("known").local_gpu_id).collect();
            let base = node_free[0] - free_local[0];
            let chosen_local = if cfg.intra_node_bandwidth_aware {
                refine_intra_node(grant, &free_local, node)
            } else if cfg.kind == PlacementStrategy::FirstFree {
                gpus.iter().map(|g| g - base).collect()
            } else {
                random_intra_node(grant, &free_local, rng)
            };
            gpus = chosen_local.iter().map(|l| base + l).collect();
            d.local_choices.push(IntraNodeChoice {
                job_id: id,
                node_id,
                bandwidth: node.mean_pair_bandwidth(&chosen_local).expect("two or more GPUs"),
                free_local,
                chosen_local,
            });
        }
        pool.take(&gpus);
        d.to_launch.insert(id, gpus);
    }
    d
}

/// Placement policy selected by [`PlacementConfig`], owning its random stream.
#[derive(Debug, Clone)]
pub struct ConfiguredPlacement {
    pub config: PlacementConfig,
    rng: ChaCha8Rng,
}

impl ConfiguredPlacement {
    pub fn new(config: PlacementConfig, seed: u64) -> Self {
        Self { config, rng: rng_for(seed, stream::PLACEMENT) }
    }
}

impl PlacementPolicy for ConfiguredPlacement {
    fn place(&mut self, ranked: &PrioritizedJobs, cluster: &ClusterState, jobs: &JobState) -> RoundDecision {
        place(ranked, cluster, jobs, &self.config, &mut self.rng)
    }

    fn kind_label(&self) -> String {
        self.config.kind.label().to_string()
    }

    fn box_clone(&self) -> Box<dyn PlacementPolicy> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{apply_decision, NodeSpec};
    use crate::workload::ModelProfile;
    use std::sync::Arc;

    fn job(id: u32, demand: u32, model: &str) -> JobRecord {
        let p = Arc::new(ModelProfile::constant(model, 1.0, 0.0));
        let mut j = JobRecord::new(JobId(id), id as f64, demand, 100, p);
        j.phase = Phase::Admitted;
        j
    }

    fn state(jobs_: Vec<JobRecord>) -> JobState {
        let mut s = JobState::new();
        for j in jobs_ {
            s.insert(j);
        }
        s
    }

    fn rng() -> ChaCha8Rng {
        rng_for(0, stream::PLACEMENT)
    }

    fn cfg(kind: PlacementStrategy) -> PlacementConfig {
        PlacementConfig::new(kind)
    }

    /// Pool with `free[i]` free GPUs (lowest locals) on node i of 4-GPU nodes.
    fn pool_of(free: &[u32]) -> (ClusterState, FreePool) {
        let c = ClusterState::homogeneous(free.len() as u32);
        let gpus = free.iter().enumerate().flat_map(|(n, f)| (0..*f).map(move |l| n as u32 * 4 + l));
        let p = FreePool::from_gpus(&c, gpus);
        (c, p)
    }

    fn nodes_of(c: &ClusterState, gpus: &[GpuId]) -> Vec<u32> {
        gpus.iter().map(|g| c.row(*g).unwrap().node_id).collect::<BTreeSet<_>>().into_iter().collect()
    }

    #[test]
    fn consolidated_examples() {
        let (c, p) = pool_of(&[4, 2]);
        assert_eq!(nodes_of(&c, &choose_gpus_consolidated(4, &p).unwrap()), vec![0]);
        let (c, p) = pool_of(&[2, 2, 4]);
        assert_eq!(nodes_of(&c, &choose_gpus_consolidated(4, &p).unwrap()), vec![2]);
        let (c, p) = pool_of(&[4, 4]);
        let g = choose_gpus_consolidated(6, &p).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(nodes_of(&c, &g), vec![0, 1]);
        assert!(choose_gpus_consolidated(9, &p).is_none());
    }

    #[test]
    fn consolidated_prefers_least_leftover_then_low_id() {
        let (c, p) = pool_of(&[4, 3, 3]);
        assert_eq!(nodes_of(&c, &choose_gpus_consolidated(3, &p).unwrap()), vec![1]);
        // Span 2 for 5: {3,3} leaves 1, {4,3} leaves 2.
        assert_eq!(nodes_of(&c, &choose_gpus_consolidated(5, &p).unwrap()), vec![1, 2]);
        assert_eq!(consolidated_nodes(2, &[(0, 3), (1, 3)]), Some(vec![0]));
    }

    #[test]
    fn fragment_fill_examples() {
        let (c, p) = pool_of(&[1, 1, 4]);
        let j = job(1, 2, "resnet18");
        let flags = BTreeMap::from([("lstm".to_string(), true)]);
        assert_eq!(nodes_of(&c, &choose_gpus_tiresias(&j, 2, &p, &flags).unwrap()), vec![0, 1]);
        let (c, p) = pool_of(&[1, 4]);
        assert_eq!(nodes_of(&c, &choose_gpus_tiresias(&j, 5, &p, &flags).unwrap()), vec![0, 1]);
        let skewed = job(2, 4, "lstm");
        let (_, p) = pool_of(&[2, 2, 4]);
        assert_eq!(choose_gpus_tiresias(&skewed, 4, &p, &flags), choose_gpus_consolidated(4, &p));
    }

    #[test]
    fn profile_guided_diverges_from_skew() {
        let (_, p) = pool_of(&[1, 1, 4]);
        let j = job(1, 2, "resnet50");
        let skew = BTreeMap::from([("resnet50".to_string(), false)]);
        let benefit = BTreeMap::from([("resnet50".to_string(), true)]);
        let a = choose_gpus_tiresias(&j, 2, &p, &skew).unwrap();
        let b = choose_gpus_profile_guided(&j, 2, &p, &benefit).unwrap();
        assert_ne!(a, b);
        assert_eq!(b, choose_gpus_consolidated(2, &p).unwrap());
    }

    #[test]
    fn refine_examples() {
        let node = NodeSpec::p3_8xlarge(0);
        assert_eq!(refine_intra_node(2, &[0, 1, 3], &node), vec![0, 3]);
        assert_eq!(refine_intra_node(3, &[1, 2, 3], &node), vec![1, 2, 3]);
        let flat = NodeSpec::uniform(0, 4, 10.0);
        assert_eq!(refine_intra_node(2, &[1, 2, 3], &flat), vec![1, 2]);
    }

    #[test]
    fn place_single_job_on_empty_node() {
        let c = ClusterState::homogeneous(2);
        let jobs = state(vec![job(1, 4, "m")]);
        let ranked = PrioritizedJobs::at_demand(jobs.active.values());
        let d = place(&ranked, &c, &jobs, &cfg(PlacementStrategy::Consolidated), &mut rng());
        assert_eq!(d.to_launch[&JobId(1)], vec![0, 1, 2, 3]);
        assert!(d.to_suspend.is_empty());
    }

    #[test]
    fn place_hand_walk_skips_third() {
        let c = ClusterState::homogeneous(2);
        let jobs = state(vec![job(1, 4, "m"), job(2, 4, "m"), job(3, 4, "m")]);
        let ranked = PrioritizedJobs::at_demand(jobs.active.values());
        let d = place(&ranked, &c, &jobs, &cfg(PlacementStrategy::Consolidated), &mut rng());
        assert_eq!(nodes_of(&c, &d.to_launch[&JobId(1)]), vec![0]);
        assert_eq!(nodes_of(&c, &d.to_launch[&JobId(2)]), vec![1]);
        assert!(!d.to_launch.contains_key(&JobId(3)));
    }

    #[test]
    fn place_fixed_point_renews_everything() {
        let mut c = ClusterState::homogeneous(2);
        let mut jobs = state(vec![job(1, 2, "m"), job(2, 3, "m")]);
        let ranked = PrioritizedJobs::at_demand(jobs.active.values());
        let mut r = rng();
        let cf = cfg(PlacementStrategy::Consolidated);
        let d = place(&ranked, &c, &jobs, &cf, &mut r);
        apply_decision(&mut c, &mut jobs, &d, 0.0).unwrap();
        let d2 = place(&ranked, &c, &jobs, &cf, &mut r);
        assert!(d2.to_launch.is_empty() && d2.to_suspend.is_empty());
        assert_eq!(d2.renewals, vec![JobId(1), JobId(2)]);
    }

    #[test]
    fn place_suspends_lowest_priority_first() {
        let mut c = ClusterState::homogeneous(1);
        let mut jobs = state(vec![job(1, 2, "m"), job(2, 2, "m")]);
        let cf = cfg(PlacementStrategy::FirstFree);
        let first = PrioritizedJobs::at_demand(jobs.active.values());
        let d = place(&first, &c, &jobs, &cf, &mut rng());
        apply_decision(&mut c, &mut jobs, &d, 0.0).unwrap();
        jobs.insert(job(3, 4, "m"));
        let ranked = PrioritizedJobs { ordered: vec![(JobId(3), 4), (JobId(1), 2), (JobId(2), 2)] };
        let d = place(&ranked, &c, &jobs, &cf, &mut rng());
        assert_eq!(d.to_suspend, vec![JobId(2), JobId(1)]);
        assert_eq!(d.to_launch[&JobId(3)], vec![0, 1, 2, 3]);
        apply_decision(&mut c, &mut jobs, &d, 300.0).unwrap();
    }

    #[test]
    fn bandwidth_aware_records_best_pair() {
        let c = ClusterState::homogeneous(1);
        let jobs = state(vec![job(1, 2, "m")]);
        let ranked = PrioritizedJobs::at_demand(jobs.active.values());
        let mut cf = cfg(PlacementStrategy::Consolidated);
        cf.intra_node_bandwidth_aware = true;
        let d = place(&ranked, &c, &jobs, &cf, &mut rng());
        assert_eq!(d.to_launch[&JobId(1)], vec![0, 3]);
        assert_eq!(d.local_choices[0].bandwidth, 100.0);
    }
}
