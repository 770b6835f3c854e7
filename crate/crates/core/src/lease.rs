//! Lease renewal for preemptible distributed jobs.
//!
//! Under [`LeaseMode::Optimistic`] every worker renews its lease locally at
//! each iteration boundary and the scheduler speaks up only to revoke. The
//! revocation goes to a single worker, which picks the exit iteration and
//! hands it to its peers before letting the job move on, so all workers stop
//! at the same iteration. [`LeaseMode::Central`] is the baseline in which
//! every worker asks the scheduler once per round.
//!
//! The protocol is exercised on a logical-clock harness ([`run_harness`])
//! with seeded message delays and per-iteration compute jitter.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state::{JobId, Seconds};
use crate::workload::{rng_for, stream};

pub type WorkerId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeaseMode {
    Optimistic,
    Central,
}

impl LeaseMode {
    pub fn label(&self) -> &'static str {
        match self {
            LeaseMode::Optimistic => "optimistic",
            LeaseMode::Central => "central",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LeaseError {
    #[error("no lease for job {0}")]
    UnknownJob(JobId),
    #[error("job {0} has no workers")]
    NoWorkers(JobId),
    #[error("lease of job {job} on worker {worker} is already revoked")]
    AlreadyRevoked { job: JobId, worker: WorkerId },
    #[error("worker {worker} learned exit iteration {exit} after completing iteration {completed}")]
    LateExit { worker: WorkerId, exit: u64, completed: u64 },
    #[error("workers exited at different iterations: {0:?}")]
    Disagreement(Vec<u64>),
    #[error("deadlock at t={time}: {exited} of {workers} workers exited and nothing left to deliver")]
    Deadlock { time: Seconds, exited: usize, workers: usize },
    #[error("invalid harness config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeaseStatus {
    Active,
    /// Revoked; the job stops after completing this iteration.
    Revoked(u64),
}

/// Leases held by one worker node.
#[derive(Debug, Clone, Default)]
pub struct LeaseTable {
    leases: BTreeMap<JobId, LeaseStatus>,
}

impl LeaseTable {
    pub fn grant(&mut self, job: JobId) {
        self.leases.insert(job, LeaseStatus::Active);
    }

    pub fn status(&self, job: JobId) -> Option<LeaseStatus> {
        self.leases.get(&job).copied()
    }

    /// Active to Revoked. A second revocation in the same cycle is an error.
    pub fn revoke(&mut self, job: JobId, worker: WorkerId, exit_iteration: u64) -> Result<(), LeaseError> {
        match self.leases.get_mut(&job) {
            None => Err(LeaseError::UnknownJob(job)),
            Some(LeaseStatus::Revoked(_)) => Err(LeaseError::AlreadyRevoked { job, worker }),
            Some(s) => {
                *s = LeaseStatus::Revoked(exit_iteration);
                Ok(())
            }
        }
    }

    /// Starts a new cycle after the job has been relaunched.
    pub fn renew(&mut self, job: JobId) {
        self.grant(job);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerState {
    Running,
    ExitScheduled(u64),
    Exited(u64),
}

#[derive(Debug, Clone)]
pub struct WorkerSim {
    pub worker_id: WorkerId,
    pub job_id: JobId,
    /// Last completed iteration.
    pub current_iteration: u64,
    pub iter_time: Seconds,
    pub peers: Vec<WorkerId>,
    pub state: WorkerState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Endpoint {
    Central,
    Worker(WorkerId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Revoke,
    PropagateExit(u64),
    /// Confirms a `PropagateExit`; never counted as protocol traffic.
    ExitAck(u64),
    CentralCheck,
    CentralReply {
        revoke: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeaseEvent {
    pub send_time: Seconds,
    pub deliver_time: Seconds,
    pub kind: EventKind,
    pub job: JobId,
    pub src: Endpoint,
    pub dst: Endpoint,
}

impl LeaseEvent {
    /// An event with zero delay; the harness stamps the delivery time.
    fn now(time: Seconds, kind: EventKind, job: JobId, src: Endpoint, dst: Endpoint) -> Self {
        Self { send_time: time, deliver_time: time, kind, job, src, dst }
    }
}

/// The single revocation message for `job`, addressed to its lowest worker.
pub fn revoke(job: JobId, workers: &BTreeMap<JobId, Vec<WorkerId>>, now: Seconds) -> Result<LeaseEvent, LeaseError> {
    let ws = workers.get(&job).ok_or(LeaseError::UnknownJob(job))?;
    let target = ws.iter().min().ok_or(LeaseError::NoWorkers(job))?;
    Ok(LeaseEvent::now(now, EventKind::Revoke, job, Endpoint::Central, Endpoint::Worker(*target)))
}

/// Handles a revocation on the worker it was sent to.
///
/// The exit iteration is one past the last completed iteration; it is sent
/// to every peer.
pub fn on_revoke(w: &mut WorkerSim, table: &mut LeaseTable, now: Seconds) -> Result<Vec<LeaseEvent>, LeaseError> {
    let exit = w.current_iteration + 1;
    table.revoke(w.job_id, w.worker_id, exit)?;
    w.state = WorkerState::ExitScheduled(exit);
    Ok(w.peers
        .iter()
        .map(|&p| {
            LeaseEvent::now(
                now,
                EventKind::PropagateExit(exit),
                w.job_id,
                Endpoint::Worker(w.worker_id),
                Endpoint::Worker(p),
            )
        })
        .collect())
}

/// Handles a propagated exit iteration on a peer and returns its ack.
pub fn on_propagate(
    w: &mut WorkerSim,
    table: &mut LeaseTable,
    exit: u64,
    from: WorkerId,
    now: Seconds,
) -> Result<LeaseEvent, LeaseError> {
    if w.current_iteration >= exit {
        return Err(LeaseError::LateExit { worker: w.worker_id, exit, completed: w.current_iteration });
    }
    table.revoke(w.job_id, w.worker_id, exit)?;
    w.state = WorkerState::ExitScheduled(exit);
    Ok(LeaseEvent::now(now, EventKind::ExitAck(exit), w.job_id, Endpoint::Worker(w.worker_id), Endpoint::Worker(from)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MessageCount {
    /// Messages sent to or from the central scheduler.
    pub central: u64,
    pub total: u64,
}

/// Closed-form message counts for one job of `workers` workers running
/// `rounds` rounds with `revocations` revocations.
///
/// Central: one check per worker per round plus a reply to each.
/// Optimistic: one revoke per revocation plus a propagation to each peer.
pub fn count_messages(mode: LeaseMode, workers: u64, rounds: u64, revocations: u64) -> MessageCount {
    match mode {
        LeaseMode::Central => MessageCount { central: workers * rounds, total: 2 * workers * rounds },
        LeaseMode::Optimistic => {
            MessageCount { central: revocations, total: revocations + revocations * workers.saturating_sub(1) }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    pub mode: LeaseMode,
    pub workers: u32,
    pub rounds: u64,
    pub iters_per_round: u64,
    pub iter_time: Seconds,
    /// Compute time of each iteration is `iter_time` scaled by a uniform
    /// draw from `[1 - jitter, 1 + jitter]`.
    pub jitter: f64,
    /// Message delays are uniform in `[delay.0, delay.1]`.
    pub delay: (Seconds, Seconds),
    /// Times at which the scheduler decides to revoke the job.
    pub revocations: Vec<Seconds>,
    pub seed: u64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            mode: LeaseMode::Optimistic,
            workers: 8,
            rounds: 10,
            iters_per_round: 10,
            iter_time: 1.0,
            jitter: 0.2,
            delay: (0.01, 0.5),
            revocations: Vec::new(),
            seed: 0,
        }
    }
}

impl HarnessConfig {
    pub fn total_iterations(&self) -> u64 {
        self.rounds * self.iters_per_round
    }

    /// `count` revocation times spread evenly over the nominal run length.
    pub fn spread_revocations(&mut self, count: u64) {
        let span = self.total_iterations() as f64 * self.iter_time;
        self.revocations = (1..=count).map(|k| span * k as f64 / (count + 1) as f64).collect();
    }

    pub fn validate(&self) -> Result<(), LeaseError> {
        let bad = |m: &str| Err(LeaseError::InvalidConfig(m.to_string()));
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if self.rounds == 0 || self.iters_per_round == 0 {
            return bad("rounds and iters_per_round must be at least 1");
        }
        if !(self.iter_time > 0.0 && self.iter_time.is_finite()) {
            return bad("iter_time must be positive");
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return bad("jitter must be in [0, 1)");
        }
        let (lo, hi) = self.delay;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return bad("delay must satisfy 0 <= min <= max");
        }
        if self.revocations.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return bad("revocation times must be finite and non-negative");
        }
        Ok(())
    }
}

/// One launch of the job, ended by a revocation or by completion.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleOutcome {
    /// Iterations the revoked worker had completed when the revocation
    /// reached it; `None` for natural completion.
    pub delivery_iteration: Option<u64>,
    /// Exit iteration of each worker, by worker id.
    pub exits: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessOutcome {
    pub cycles: Vec<CycleOutcome>,
    pub central_messages: u64,
    pub total_messages: u64,
    pub end_time: Seconds,
}

impl HarnessOutcome {
    /// Largest spread between worker exit iterations in any cycle.
    pub fn max_exit_skew(&self) -> u64 {
        self.cycles
            .iter()
            .map(|c| c.exits.iter().max().unwrap_or(&0) - c.exits.iter().min().unwrap_or(&0))
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Activity {
    Computing(u64),
    AtBarrier(u64),
    AwaitingCentral,
    Done,
}

#[derive(Debug, Clone, Copy)]
enum Pending {
    ComputeDone { worker: usize, iteration: u64 },
    Deliver(LeaseEvent),
    Decision,
}

struct Scheduled {
    time: Seconds,
    seq: u64,
    what: Pending,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // Reversed so the max-heap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

const JOB: JobId = JobId(0);

struct Harness<'a> {
    cfg: &'a HarnessConfig,
    rng: ChaCha8Rng,
    now: Seconds,
    seq: u64,
    queue: BinaryHeap<Scheduled>,
    workers: Vec<WorkerSim>,
    tables: Vec<LeaseTable>,
    activity: Vec<Activity>,
    assignment: BTreeMap<JobId, Vec<WorkerId>>,
    awaiting_acks: usize,
    deferred_revokes: u32,
    delivery: Option<u64>,
    checked_round: Vec<Option<u64>>,
    decisions: BTreeMap<u64, bool>,
    pending_decisions: u32,
    cycles: Vec<CycleOutcome>,
    central_messages: u64,
    total_messages: u64,
    finished: bool,
}

impl<'a> Harness<'a> {
    fn new(cfg: &'a HarnessConfig) -> Self {
        let n = cfg.workers as usize;
        let ids: Vec<WorkerId> = (0..cfg.workers).collect();
        let workers = ids
            .iter()
            .map(|&w| WorkerSim {
                worker_id: w,
                job_id: JOB,
                current_iteration: 0,
                iter_time: cfg.iter_time,
                peers: ids.iter().copied().filter(|&p| p != w).collect(),
                state: WorkerState::Running,
            })
            .collect();
        let tables = (0..n)
            .map(|_| {
                let mut t = LeaseTable::default();
                t.grant(JOB);
                t
            })
            .collect();
        Self {
            cfg,
            rng: rng_for(cfg.seed, stream::LEASE),
            now: 0.0,
            seq: 0,
            queue: BinaryHeap::new(),
            workers,
            tables,
            activity: vec![Activity::Done; n],
            assignment: BTreeMap::from([(JOB, ids)]),
            awaiting_acks: 0,
            deferred_revokes: 0,
            delivery: None,
            checked_round: vec![None; n],
            decisions: BTreeMap::new(),
            pending_decisions: 0,
            cycles: Vec::new(),
            central_messages: 0,
            total_messages: 0,
            finished: false,
        }
    }

    fn schedule(&mut self, time: Seconds, what: Pending) {
        self.seq += 1;
        self.queue.push(Scheduled { time, seq: self.seq, what });
    }

    fn send(&mut self, mut ev: LeaseEvent) {
        let (lo, hi) = self.cfg.delay;
        let d = if hi > lo { self.rng.random_range(lo..=hi) } else { lo };
        ev.deliver_time = ev.send_time + d;
        match ev.kind {
            EventKind::Revoke | EventKind::CentralCheck => {
                self.central_messages += 1;
                self.total_messages += 1;
            }
            EventKind::PropagateExit(_) | EventKind::CentralReply { .. } => self.total_messages += 1,
            EventKind::ExitAck(_) => {}
        }
        self.schedule(ev.deliver_time, Pending::Deliver(ev));
    }

    fn total(&self) -> u64 {
        self.cfg.total_iterations()
    }

    fn worker_at(&self, e: Endpoint) -> usize {
        match e {
            Endpoint::Worker(w) => w as usize,
            Endpoint::Central => unreachable!("central endpoint is not a worker"),
        }
    }

    fn begin_compute(&mut self, w: usize) {
        let next = self.workers[w].current_iteration + 1;
        let j = self.cfg.jitter;
        let scale = if j > 0.0 { self.rng.random_range(1.0 - j..=1.0 + j) } else { 1.0 };
        self.activity[w] = Activity::Computing(next);
        self.schedule(self.now + self.cfg.iter_time * scale, Pending::ComputeDone { worker: w, iteration: next });
    }

    /// Iteration boundary: the local lease check.
    fn start_iteration(&mut self, w: usize) -> Result<(), LeaseError> {
        let done = self.workers[w].current_iteration;
        match self.workers[w].state {
            WorkerState::ExitScheduled(n) if n == done => return self.exit(w, done),
            WorkerState::ExitScheduled(n) if n < done => {
                return Err(LeaseError::LateExit { worker: w as WorkerId, exit: n, completed: done })
            }
            _ => {}
        }
        if done == self.total() {
            return self.exit(w, done);
        }
        if self.cfg.mode == LeaseMode::Central && done.is_multiple_of(self.cfg.iters_per_round) {
            let round = done / self.cfg.iters_per_round;
            if self.checked_round[w] != Some(round) {
                self.checked_round[w] = Some(round);
                self.activity[w] = Activity::AwaitingCentral;
                let ev = LeaseEvent::now(
                    self.now,
                    EventKind::CentralCheck,
                    JOB,
                    Endpoint::Worker(w as WorkerId),
                    Endpoint::Central,
                );
                self.send(ev);
                return Ok(());
            }
        }
        self.begin_compute(w);
        Ok(())
    }

    /// The end-of-iteration collective. It completes once every worker has
    /// arrived, except that a worker still waiting for acks holds it; this
    /// is the point at which the revoked worker would otherwise begin the
    /// next iteration.
    fn try_collective(&mut self, iteration: u64) -> Result<(), LeaseError> {
        if self.awaiting_acks > 0 || !self.activity.iter().all(|a| *a == Activity::AtBarrier(iteration)) {
            return Ok(());
        }
        for w in &mut self.workers {
            w.current_iteration = iteration;
        }
        for w in 0..self.workers.len() {
            self.start_iteration(w)?;
        }
        Ok(())
    }

    fn exit(&mut self, w: usize, at: u64) -> Result<(), LeaseError> {
        self.workers[w].state = WorkerState::Exited(at);
        self.activity[w] = Activity::Done;
        if self.activity.iter().all(|a| *a == Activity::Done) {
            self.end_cycle()?;
        }
        Ok(())
    }

    fn end_cycle(&mut self) -> Result<(), LeaseError> {
        let exits: Vec<u64> = self
            .workers
            .iter()
            .map(|w| match w.state {
                WorkerState::Exited(n) => n,
                _ => unreachable!("cycle ends only when all workers exited"),
            })
            .collect();
        if exits.iter().any(|&e| e != exits[0]) {
            return Err(LeaseError::Disagreement(exits));
        }
        let at = exits[0];
        self.cycles.push(CycleOutcome { delivery_iteration: self.delivery.take(), exits });
        if at >= self.total() {
            self.finished = true;
            return Ok(());
        }
        // Relaunch in place for the next cycle.
        for (w, t) in self.workers.iter_mut().zip(&mut self.tables) {
            w.state = WorkerState::Running;
            t.renew(JOB);
        }
        self.awaiting_acks = 0;
        if self.deferred_revokes > 0 {
            self.deferred_revokes -= 1;
            self.handle_revoke(0)?;
        }
        for w in 0..self.workers.len() {
            self.start_iteration(w)?;
        }
        Ok(())
    }

    fn handle_revoke(&mut self, w: usize) -> Result<(), LeaseError> {
        if matches!(self.workers[w].state, WorkerState::Exited(_)) {
            return Ok(());
        }
        if let Some(LeaseStatus::Revoked(_)) = self.tables[w].status(JOB) {
            self.deferred_revokes += 1;
            return Ok(());
        }
        self.delivery = Some(self.workers[w].current_iteration);
        let out = on_revoke(&mut self.workers[w], &mut self.tables[w], self.now)?;
        self.awaiting_acks = out.len();
        for ev in out {
            self.send(ev);
        }
        Ok(())
    }

    fn deliver(&mut self, ev: LeaseEvent) -> Result<(), LeaseError> {
        match ev.kind {
            EventKind::Revoke => {
                let w = self.worker_at(ev.dst);
                self.handle_revoke(w)
            }
            EventKind::PropagateExit(n) => {
                let w = self.worker_at(ev.dst);
                let from = match ev.src {
                    Endpoint::Worker(f) => f,
                    Endpoint::Central => unreachable!("exits propagate between workers"),
                };
                let ack = on_propagate(&mut self.workers[w], &mut self.tables[w], n, from, self.now)?;
                self.send(ack);
                Ok(())
            }
            EventKind::ExitAck(_) => {
                self.awaiting_acks -= 1;
                let w = self.worker_at(ev.dst);
                match self.activity[w] {
                    Activity::AtBarrier(k) if self.awaiting_acks == 0 => self.try_collective(k),
                    _ => Ok(()),
                }
            }
            EventKind::CentralCheck => {
                let w = self.worker_at(ev.src);
                let round = self.checked_round[w].expect("a check follows a round boundary");
                let pending = &mut self.pending_decisions;
                // Every worker gets the same answer for a given round.
                let revoke = *self.decisions.entry(round).or_insert_with(|| {
                    let r = *pending > 0;
                    if r {
                        *pending -= 1;
                    }
                    r
                });
                let reply =
                    LeaseEvent::now(self.now, EventKind::CentralReply { revoke }, JOB, Endpoint::Central, ev.src);
                self.send(reply);
                Ok(())
            }
            EventKind::CentralReply { revoke } => {
                let w = self.worker_at(ev.dst);
                if revoke {
                    let done = self.workers[w].current_iteration;
                    self.tables[w].revoke(JOB, w as WorkerId, done)?;
                    self.delivery = Some(done);
                    self.exit(w, done)
                } else {
                    self.begin_compute(w);
                    Ok(())
                }
            }
        }
    }

    fn run(mut self) -> Result<HarnessOutcome, LeaseError> {
        for &t in &self.cfg.revocations {
            self.schedule(t, Pending::Decision);
        }
        for w in 0..self.workers.len() {
            self.start_iteration(w)?;
        }
        while !self.finished {
            let Some(next) = self.queue.pop() else {
                let exited = self.workers.iter().filter(|w| matches!(w.state, WorkerState::Exited(_))).count();
                return Err(LeaseError::Deadlock { time: self.now, exited, workers: self.workers.len() });
            };
            self.now = next.time;
            match next.what {
                Pending::ComputeDone { worker, iteration } => {
                    self.activity[worker] = Activity::AtBarrier(iteration);
                    self.try_collective(iteration)?;
                }
                Pending::Deliver(ev) => self.deliver(ev)?,
                Pending::Decision => match self.cfg.mode {
                    LeaseMode::Optimistic => {
                        let ev = revoke(JOB, &self.assignment, self.now)?;
                        self.send(ev);
                    }
                    LeaseMode::Central => self.pending_decisions += 1,
                },
            }
        }
        Ok(HarnessOutcome {
            cycles: self.cycles,
            central_messages: self.central_messages,
            total_messages: self.total_messages,
            end_time: self.now,
        })
    }
}

/// Runs one job to completion on the logical-clock harness.
pub fn run_harness(cfg: &HarnessConfig) -> Result<HarnessOutcome, LeaseError> {
    cfg.validate()?;
    Harness::new(cfg).run()
}

/// One `lease.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeaseBenchRow {
    pub mode: String,
    pub workers: u32,
    pub rounds: u64,
    pub revocations: u64,
    pub central_messages: u64,
    pub total_messages: u64,
    pub max_exit_skew_iterations: u64,
}

/// Runs the harness once per seed with evenly spaced revocations.
///
/// Message counts are taken from the largest seen across seeds; they only
/// differ when a revocation lands after the job has already finished.
pub fn bench(
    mode: LeaseMode,
    workers: u32,
    rounds: u64,
    revocations: u64,
    seeds: &[u64],
) -> Result<LeaseBenchRow, LeaseError> {
    if seeds.is_empty() {
        return Err(LeaseError::InvalidConfig("at least one seed is required".into()));
    }
    let mut row = LeaseBenchRow {
        mode: mode.label().to_string(),
        workers,
        rounds,
        revocations,
        central_messages: 0,
        total_messages: 0,
        max_exit_skew_iterations: 0,
    };
    for &seed in seeds {
        let mut cfg = HarnessConfig { mode, workers, rounds, seed, ..HarnessConfig::default() };
        cfg.spread_revocations(revocations);
        let out = run_harness(&cfg)?;
        row.central_messages = row.central_messages.max(out.central_messages);
        row.total_messages = row.total_messages.max(out.total_messages);
        row.max_exit_skew_iterations = row.max_exit_skew_iterations.max(out.max_exit_skew());
    }
    Ok(row)
}
