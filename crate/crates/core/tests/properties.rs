//! Policy and engine properties checked over generated inputs.

use std::collections::{BTreeSet, VecDeque};
use std::sync::Arc;

use dlsched_core::admission::{admit, AdmissionConfig};
use dlsched_core::engine::{PolicySpec, SimConfig, Simulation};
use dlsched_core::placement::{
    choose_gpus_consolidated, refine_intra_node, FreePool, PlacementConfig, PlacementStrategy,
};
use dlsched_core::scheduling::{
    dlas_queue, rank_discrete_las, rank_fifo, rank_las, rank_optimus_like, rank_srtf, PrioritizedJobs, SchedulerConfig,
    SchedulerKind,
};
use dlsched_core::state::{ClusterState, JobId, JobRecord, JobState, NodeSpec, Phase};
use dlsched_core::workload::{default_profiles, ModelProfile};
use itertools::Itertools;
use proptest::prelude::*;

fn profile() -> Arc<ModelProfile> {
    Arc::new(ModelProfile::constant("m", 1.0, 0.0))
}

/// (arrival, demand, total iterations, completed iterations, attained service)
type Spec = (u8, u32, u64, u64, u16);

fn build(specs: &[Spec]) -> Vec<JobRecord> {
    let profiles = default_profiles();
    specs
        .iter()
        .enumerate()
        .map(|(i, &(arr, demand, total, done, service))| {
            let p = Arc::clone(&profiles[i % profiles.len()]);
            let mut j = JobRecord::new(JobId(i as u32), arr as f64, demand, total, p);
            j.completed_iterations = done.min(total);
            j.attained_service = service as f64;
            j
        })
        .collect()
}

fn spec_strategy(max: usize) -> impl Strategy<Value = Vec<Spec>> {
    prop::collection::vec((0u8..6, prop::sample::select(vec![1u32, 2, 4, 8]), 1u64..500, 0u64..500, 0u16..8), 1..max)
}

type Ranker = fn(&[&JobRecord]) -> PrioritizedJobs;

fn rankers() -> Vec<(&'static str, Ranker)> {
    vec![
        ("fifo", rank_fifo),
        ("srtf", rank_srtf),
        ("las", rank_las),
        ("dlas", |j| rank_discrete_las(j, &[2.0, 5.0])),
        ("optimus", |j| rank_optimus_like(j, 16)),
    ]
}

proptest! {
    #[test]
    fn rankers_ignore_input_order(specs in spec_strategy(24), seed in any::<u64>()) {
        let jobs = build(&specs);
        let refs: Vec<&JobRecord> = jobs.iter().collect();
        let mut shuffled = refs.clone();
        // Deterministic permutation derived from the seed.
        let n = shuffled.len();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        for (name, r) in rankers() {
            let a = r(&refs);
            prop_assert_eq!(&a, &r(&shuffled), "{}", name);
            prop_assert_eq!(&a, &r(&refs), "{} not deterministic", name);
            prop_assert_eq!(a.ids().into_iter().collect::<BTreeSet<_>>().len(), jobs.len());
        }
    }

    #[test]
    fn equal_keys_fall_back_to_arrival_then_id(specs in spec_strategy(24)) {
        // Same size, progress and service: every key ties.
        let flat: Vec<Spec> = specs.iter().map(|&(a, _, _, _, _)| (a, 2, 100, 10, 3)).collect();
        let profile = profile();
        let jobs: Vec<JobRecord> = build(&flat)
            .into_iter()
            .map(|mut j| {
                j.profile = Arc::clone(&profile);
                j
            })
            .collect();
        let refs: Vec<&JobRecord> = jobs.iter().collect();
        let mut want: Vec<&JobRecord> = refs.clone();
        want.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time).then(a.job_id.cmp(&b.job_id)));
        let want: Vec<JobId> = want.iter().map(|j| j.job_id).collect();
        for (name, r) in rankers() {
            prop_assert_eq!(r(&refs).ids(), want.clone(), "{}", name);
        }
    }

    #[test]
    fn las_order_survives_uniform_scaling(specs in spec_strategy(24), k in -8i32..8) {
        let jobs = build(&specs);
        let c = 2f64.powi(k);
        let scaled: Vec<JobRecord> = jobs
            .iter()
            .cloned()
            .map(|mut j| {
                j.attained_service *= c;
                j
            })
            .collect();
        let a = rank_las(&jobs.iter().collect::<Vec<_>>());
        let b = rank_las(&scaled.iter().collect::<Vec<_>>());
        prop_assert_eq!(a.ids(), b.ids());
    }

    #[test]
    fn optimus_grants_stay_within_demand_and_budget(specs in spec_strategy(30), budget in 1u32..40) {
        let jobs = build(&specs);
        let refs: Vec<&JobRecord> = jobs.iter().collect();
        let out = rank_optimus_like(&refs, budget);
        prop_assert_eq!(out.len(), jobs.len());
        let head = jobs.len().min(budget as usize);
        let mut used = 0;
        for (i, (id, g)) in out.ordered.iter().enumerate() {
            let demand = jobs[id.0 as usize].gpu_demand;
            prop_assert!(*g >= 1 && *g <= demand, "grant {} for demand {}", g, demand);
            if i < head {
                used += g;
            } else {
                prop_assert_eq!(*g, 1);
            }
        }
        prop_assert!(used <= budget.max(head as u32));
    }

    #[test]
    fn admission_respects_cap_and_order(
        existing in prop::collection::vec(prop::sample::select(vec![1u32, 2, 4, 8]), 0..12),
        new in prop::collection::vec(prop::sample::select(vec![1u32, 2, 4, 8]), 0..20),
        factor in prop::sample::select(vec![0.5, 1.0, 1.2, 1.4, 2.0]),
    ) {
        let cluster = ClusterState::homogeneous(4);
        let mut jobs = JobState::new();
        for (i, &d) in existing.iter().enumerate() {
            let mut j = JobRecord::new(JobId(i as u32), 0.0, d, 10, profile());
            j.phase = Phase::Admitted;
            jobs.insert(j);
        }
        let base = existing.len() as u32;
        let incoming: Vec<JobRecord> = new
            .iter()
            .enumerate()
            .map(|(i, &d)| JobRecord::new(JobId(base + i as u32), 1.0 + i as f64, d, 10, profile()))
            .collect();
        let cfg = AdmissionConfig::threshold(factor);
        let mut q = VecDeque::new();
        let out = admit(incoming.clone(), &jobs, &cluster, &cfg, &mut q);
        let cap = factor * cluster.total_gpus() as f64;
        let before: u32 = existing.iter().sum();
        let added: u32 = out.iter().map(|j| j.gpu_demand).sum();
        prop_assert!(out.is_empty() || (before + added) as f64 <= cap);
        // Released jobs are a prefix of the arrival order; the rest wait.
        let ids: Vec<JobId> = out.iter().chain(q.iter()).map(|j| j.job_id).collect();
        prop_assert_eq!(ids, incoming.iter().map(|j| j.job_id).collect::<Vec<_>>());
        if let Some(head) = q.front() {
            prop_assert!((before + added + head.gpu_demand) as f64 > cap);
        }
    }

    #[test]
    fn intra_node_refinement_is_optimal(
        bw in prop::collection::vec(1u8..10, 28),
        free_mask in 1u16..256,
        demand in 2u32..8,
    ) {
        let n = 8usize;
        let mut m = vec![vec![0.0; n]; n];
        for ((i, j), v) in (0..n).tuple_combinations().zip(&bw) {
            m[i][j] = *v as f64 * 10.0;
            m[j][i] = *v as f64 * 10.0;
        }
        let node = NodeSpec { node_id: 0, gpu_count: 8, gpu_type: "x".into(), intra_node_bw: m, inter_node_bw: 1.0 };
        let free: Vec<u32> = (0..8).filter(|i| free_mask & (1 << i) != 0).collect();
        prop_assume!(free.len() as u32 >= demand);
        let sum = |s: &[u32]| s.iter().tuple_combinations().map(|(a, b)| node.bandwidth(*a, *b)).sum::<f64>();
        let best = free
            .iter()
            .copied()
            .combinations(demand as usize)
            .max_by(|a, b| sum(a).total_cmp(&sum(b)).then(b.cmp(a)))
            .unwrap();
        let got = refine_intra_node(demand, &free, &node);
        prop_assert_eq!(got, best);
    }

    #[test]
    fn engine_is_deterministic_and_work_conserving(
        specs in prop::collection::vec((0u16..3000, prop::sample::select(vec![1u32, 2, 3, 4, 6, 8]), 50u64..4000), 1..24),
        kind in prop::sample::select(vec![SchedulerKind::Fifo, SchedulerKind::Srtf, SchedulerKind::Las, SchedulerKind::DiscreteLas]),
        seed in any::<u64>(),
    ) {
        let p = Arc::new(ModelProfile::constant("m", 1.0, 20.0));
        let jobs: Vec<JobRecord> = specs
            .iter()
            .enumerate()
            .map(|(i, &(a, d, it))| JobRecord::new(JobId(i as u32), a as f64, d, it, Arc::clone(&p)))
            .collect();
        let cfg = SimConfig { round_len: 60.0, nodes: (0..2).map(NodeSpec::p3_8xlarge).collect(), metrics_window: None, seed, horizon: None };
        let mut sc = SchedulerConfig::new(kind);
        sc.dlas_thresholds = vec![600.0, 6000.0];
        let spec = PolicySpec { admission: AdmissionConfig::accept_all(), scheduler: sc, placement: PlacementConfig::new(PlacementStrategy::Consolidated) };
        let mut runs = Vec::new();
        for _ in 0..2 {
            let mut sim = Simulation::new(cfg.clone(), jobs.clone(), spec.build(seed)).unwrap();
            while !sim.is_done() {
                sim.step().unwrap();
                let free = sim.cluster().free_gpus().len() as u32;
                let mut held = 0;
                for j in sim.jobs().active.values() {
                    if j.phase == Phase::Running {
                        held += j.allocation.len();
                        prop_assert_eq!(j.allocation.len() as u32, j.gpu_demand);
                    } else {
                        // Nothing that fits is left waiting.
                        prop_assert!(j.gpu_demand > free, "job {} ({} GPUs) idle with {} free", j.job_id, j.gpu_demand, free);
                    }
                }
                prop_assert_eq!(held as u32 + free, sim.cluster().total_gpus());
            }
            runs.push(sim.report().unwrap());
        }
        prop_assert_eq!(&runs[0], &runs[1]);
        prop_assert_eq!(runs[0].per_job.len(), jobs.len());
    }
}

#[test]
fn discrete_las_bucketing_fixture() {
    let t = [3600.0, 36000.0];
    assert_eq!(dlas_queue(0.0, &t), 0);
    assert_eq!(dlas_queue(3599.9, &t), 0);
    assert_eq!(dlas_queue(3600.0, &t), 1);
    assert_eq!(dlas_queue(35999.0, &t), 1);
    assert_eq!(dlas_queue(36000.0, &t), 2);
    assert_eq!(dlas_queue(1e12, &t), 2);
    // Queue first, then arrival inside the queue; LAS would order by service.
    let specs: Vec<Spec> = vec![(0, 1, 10, 0, 0), (1, 1, 10, 0, 0), (2, 1, 10, 0, 0), (3, 1, 10, 0, 0)];
    let mut jobs = build(&specs);
    for (j, s) in jobs.iter_mut().zip([40000.0, 5000.0, 100.0, 3000.0]) {
        j.attained_service = s;
    }
    let refs: Vec<&JobRecord> = jobs.iter().collect();
    let ids = |p: PrioritizedJobs| p.ids().iter().map(|i| i.0).collect::<Vec<_>>();
    assert_eq!(ids(rank_discrete_las(&refs, &t)), vec![2, 3, 1, 0]);
    assert_eq!(ids(rank_las(&refs)), vec![2, 3, 1, 0]);
    jobs[3].attained_service = 10.0;
    let refs: Vec<&JobRecord> = jobs.iter().collect();
    assert_eq!(ids(rank_discrete_las(&refs, &t)), vec![2, 3, 1, 0]);
    assert_eq!(ids(rank_las(&refs)), vec![3, 2, 1, 0]);
}

/// Every free-GPU subset of every cluster of up to three nodes with up to
/// four GPUs each, and every demand.
#[test]
fn consolidated_placement_spans_fewest_nodes_exhaustively() {
    let mut checked = 0u64;
    for nodes in 1..=3usize {
        for sizes in (0..nodes).map(|_| 1..=4u32).multi_cartesian_product() {
            let specs: Vec<NodeSpec> =
                sizes.iter().enumerate().map(|(i, &g)| NodeSpec::uniform(i as u32, g, 10.0)).collect();
            let cluster = ClusterState::new(specs).unwrap();
            let total = cluster.total_gpus();
            let node_of = |g: u32| cluster.row(g).unwrap().node_id;
            for mask in 0u32..(1 << total) {
                let free: Vec<u32> = (0..total).filter(|g| mask & (1 << g) != 0).collect();
                let pool = FreePool::from_gpus(&cluster, free.iter().copied());
                let mut per_node: Vec<u32> =
                    (0..nodes as u32).map(|n| free.iter().filter(|&&g| node_of(g) == n).count() as u32).collect();
                per_node.sort_unstable_by(|a, b| b.cmp(a));
                for demand in 1..=total {
                    let got = choose_gpus_consolidated(demand, &pool);
                    if demand as usize > free.len() {
                        assert!(got.is_none());
                        continue;
                    }
                    let got = got.unwrap_or_else(|| panic!("no placement for {demand} in {free:?}"));
                    assert_eq!(got.len(), demand as usize);
                    assert_eq!(got.iter().collect::<BTreeSet<_>>().len(), got.len());
                    assert!(got.iter().all(|g| free.contains(g)));
                    let span = got.iter().map(|&g| node_of(g)).collect::<BTreeSet<_>>().len();
                    let mut acc = 0;
                    let min_span = per_node
                        .iter()
                        .take_while(|&&f| {
                            let short = acc < demand;
                            acc += f;
                            short
                        })
                        .count();
                    assert_eq!(span, min_span, "demand {demand} free {free:?}");
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 100_000, "{checked}");
}
