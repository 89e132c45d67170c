//! In-process message fabric for N simulated workers.
//!
//! Each worker is an `async` program driven by one of two schedulers:
//!
//! * [`Scheduler::Deterministic`] polls every live worker in rank order on the
//!   calling thread. Runs are bit-reproducible.
//! * [`Scheduler::Concurrent`] gives every worker its own OS thread.
//!
//! Point-to-point sends are eager and buffered: `send` never blocks, and each
//! directed link delivers in FIFO order. Collectives complete once every
//! member of the group has arrived. Every operation is recorded in a
//! [`TrafficLog`]; self-addressed all-to-all slots are free and unlogged.
//!
//! A run in which no worker can make progress fails with [`Error::Deadlock`]
//! naming each stalled operation. Independently, the total number of worker
//! polls is capped by [`FabricConfig::step_budget`].

use std::collections::{BTreeMap, HashMap};
use std::future::{poll_fn, Future};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::pin::pin;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, PoisonError};
use std::task::{Context, Poll, Waker};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Rank = usize;

/// Ordered set of ranks that take part in one collective scope.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProcessGroup {
    members: Vec<Rank>,
}

impl ProcessGroup {
    pub fn new(members: Vec<Rank>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Protocol {
                rank: 0,
                message: "process group must not be empty".into(),
            });
        }
        let mut sorted = members.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Protocol {
                rank: members[0],
                message: format!("duplicate member in group {members:?}"),
            });
        }
        Ok(Self { members })
    }

    pub fn world(n: usize) -> Self {
        Self {
            members: (0..n).collect(),
        }
    }

    pub fn members(&self) -> &[Rank] {
        &self.members
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn position(&self, rank: Rank) -> Option<usize> {
        self.members.iter().position(|&r| r == rank)
    }

    pub fn member(&self, position: usize) -> Rank {
        self.members[position]
    }
}

impl std::fmt::Display for ProcessGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.members)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    AllToAll,
    Send,
    Barrier,
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OpKind::AllToAll => "all_to_all",
            OpKind::Send => "send",
            OpKind::Barrier => "barrier",
        })
    }
}

/// One rank's share of one logged operation.
///
/// For collectives `round` is the collective's ordinal within its group; for
/// sends `group` is `[from, to]` and `round` is the message ordinal on that link.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrafficRecord {
    pub op: OpKind,
    pub group: Vec<Rank>,
    pub round: u64,
    pub rank: Rank,
    pub bytes: u64,
    pub msgs: u64,
}

type OpKey = (OpKind, Vec<Rank>, u64);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrafficLog {
    records: Vec<TrafficRecord>,
    received: BTreeMap<OpKey, u64>,
}

impl Serialize for TrafficLog {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.records.serialize(s)
    }
}

impl TrafficLog {
    pub fn records(&self) -> &[TrafficRecord] {
        &self.records
    }

    pub fn iter_op(&self, op: OpKind) -> impl Iterator<Item = &TrafficRecord> {
        self.records.iter().filter(move |r| r.op == op)
    }

    pub fn bytes_sent_by(&self, rank: Rank) -> u64 {
        self.records.iter().filter(|r| r.rank == rank).map(|r| r.bytes).sum()
    }

    pub fn bytes_sent_by_op(&self, rank: Rank, op: OpKind) -> u64 {
        self.iter_op(op).filter(|r| r.rank == rank).map(|r| r.bytes).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.records.iter().map(|r| r.bytes).sum()
    }

    /// Distinct collective instances of `op` that `rank` took part in.
    pub fn collective_count(&self, rank: Rank, op: OpKind) -> usize {
        self.iter_op(op).filter(|r| r.rank == rank).count()
    }

    /// Messages sent from `from` to `to`.
    pub fn link_messages(&self, from: Rank, to: Rank) -> u64 {
        self.iter_op(OpKind::Send)
            .filter(|r| r.group == [from, to])
            .map(|r| r.msgs)
            .sum()
    }

    /// Sent bytes equal received bytes for every logged operation.
    pub fn is_conserved(&self) -> bool {
        let mut sent: BTreeMap<OpKey, u64> = BTreeMap::new();
        for r in &self.records {
            *sent.entry((r.op, r.group.clone(), r.round)).or_default() += r.bytes;
        }
        sent.iter()
            .all(|(k, &v)| self.received.get(k).copied().unwrap_or(0) == v)
            && self.received.keys().all(|k| sent.contains_key(k))
    }

    fn push(&mut self, record: TrafficRecord) {
        self.records.push(record);
    }

    fn add_received(&mut self, key: OpKey, bytes: u64) {
        *self.received.entry(key).or_default() += bytes;
    }

    fn finish(&mut self) {
        self.records.sort();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheduler {
    #[default]
    Deterministic,
    Concurrent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FabricConfig {
    pub scheduler: Scheduler,
    /// Upper bound on worker polls across the whole run.
    pub step_budget: u64,
}

impl Default for FabricConfig {
    fn default() -> Self {
        Self {
            scheduler: Scheduler::Deterministic,
            step_budget: 1_000_000,
        }
    }
}

impl FabricConfig {
    pub fn concurrent() -> Self {
        Self {
            scheduler: Scheduler::Concurrent,
            ..Self::default()
        }
    }
}

#[derive(Debug)]
pub struct RunOutput<T> {
    pub results: Vec<T>,
    pub traffic: TrafficLog,
}

struct Slot {
    kind: OpKind,
    group: ProcessGroup,
    inputs: Vec<Option<Vec<Vec<u8>>>>,
    outputs: Vec<Option<Vec<Vec<u8>>>>,
    arrived: usize,
    taken: usize,
}

#[derive(Default)]
struct Link {
    queue: BTreeMap<u64, Vec<u8>>,
    sent: u64,
    tickets: u64,
}

#[derive(Clone)]
enum Waiting {
    Collective(OpKey),
    Recv { from: Rank, ticket: u64 },
}

struct State {
    links: HashMap<(Rank, Rank), Link>,
    slots: HashMap<OpKey, Slot>,
    waiting: Vec<Option<Waiting>>,
    log: TrafficLog,
    epoch: u64,
    /// Epoch each sleeping concurrent worker last observed.
    sleeping: Vec<Option<u64>>,
    finished: Vec<bool>,
    aborted: bool,
    deadlock: Option<Vec<String>>,
}

struct Shared {
    n: usize,
    state: Mutex<State>,
    changed: Condvar,
    steps: AtomicU64,
}

impl Shared {
    fn new(n: usize) -> Self {
        Self {
            n,
            state: Mutex::new(State {
                links: HashMap::new(),
                slots: HashMap::new(),
                waiting: vec![None; n],
                log: TrafficLog::default(),
                epoch: 0,
                sleeping: vec![None; n],
                finished: vec![false; n],
                aborted: false,
                deadlock: None,
            }),
            changed: Condvar::new(),
            steps: AtomicU64::new(0),
        }
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(PoisonError::into_inner)
    }

    fn epoch(&self) -> u64 {
        self.lock().epoch
    }

    fn bump(&self, state: &mut State) {
        state.epoch += 1;
        self.changed.notify_all();
    }

    fn finish(&self, rank: Rank, aborted: bool) {
        let mut st = self.lock();
        st.finished[rank] = true;
        st.aborted |= aborted;
        self.bump(&mut st);
    }

    fn stalled(state: &State) -> Vec<String> {
        state
            .waiting
            .iter()
            .enumerate()
            .filter_map(|(rank, w)| {
                w.as_ref().map(|w| match w {
                    Waiting::Collective(key) => {
                        let arrived = state.slots.get(key).map_or(0, |s| s.arrived);
                        format!(
                            "rank {rank} in {} #{} on group {:?} ({arrived}/{} arrived)",
                            key.0,
                            key.2,
                            key.1,
                            key.1.len()
                        )
                    }
                    Waiting::Recv { from, ticket } => {
                        format!("rank {rank} in recv #{ticket} from rank {from}")
                    }
                })
            })
            .collect()
    }

    /// Blocks a concurrent worker until the fabric changes after `seen`.
    ///
    /// The run is deadlocked once every unfinished worker sleeps on the
    /// current epoch: none of them can be woken by anything.
    fn wait_for_change(&self, rank: Rank, seen: u64) -> Result<()> {
        let mut st = self.lock();
        loop {
            if let Some(stalled) = &st.deadlock {
                return Err(Error::Deadlock {
                    stalled: stalled.clone(),
                });
            }
            if st.aborted {
                return Err(Error::Aborted);
            }
            if st.epoch != seen {
                return Ok(());
            }
            st.sleeping[rank] = Some(seen);
            let epoch = st.epoch;
            if (0..self.n).all(|r| st.finished[r] || st.sleeping[r] == Some(epoch)) {
                let stalled = Self::stalled(&st);
                st.deadlock = Some(stalled.clone());
                st.sleeping[rank] = None;
                self.changed.notify_all();
                return Err(Error::Deadlock { stalled });
            }
            st = self.changed.wait(st).unwrap_or_else(PoisonError::into_inner);
            st.sleeping[rank] = None;
        }
    }
}

/// A pending receive claimed by [`Worker::irecv`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[must_use = "a receive must be waited on"]
pub struct RecvRequest {
    from: Rank,
    ticket: u64,
}

impl RecvRequest {
    pub fn from(&self) -> Rank {
        self.from
    }
}

/// Handle through which a worker program talks to the fabric.
pub struct Worker {
    rank: Rank,
    shared: Arc<Shared>,
    rounds: Mutex<HashMap<(OpKind, Vec<Rank>), u64>>,
}

impl Worker {
    fn new(rank: Rank, shared: Arc<Shared>) -> Self {
        Self {
            rank,
            shared,
            rounds: Mutex::new(HashMap::new()),
        }
    }

    pub fn rank(&self) -> Rank {
        self.rank
    }

    pub fn world_size(&self) -> usize {
        self.shared.n
    }

    fn violation(&self, message: impl Into<String>) -> Error {
        Error::Protocol {
            rank: self.rank,
            message: message.into(),
        }
    }

    fn next_round(&self, op: OpKind, group: &ProcessGroup) -> u64 {
        let mut rounds = self.rounds.lock().unwrap_or_else(PoisonError::into_inner);
        let n = rounds.entry((op, group.members.clone())).or_insert(0);
        *n += 1;
        *n - 1
    }

    /// Slot `j` of `payloads` goes to `group.member(j)`; slot `j` of the
    /// result came from `group.member(j)`.
    pub async fn all_to_all(&self, group: &ProcessGroup, payloads: Vec<Vec<u8>>) -> Result<Vec<Vec<u8>>> {
        if payloads.len() != group.size() {
            return Err(self.violation(format!(
                "all_to_all on {group} needs {} buffers, got {}",
                group.size(),
                payloads.len()
            )));
        }
        self.collective(OpKind::AllToAll, group, payloads).await
    }

    pub async fn barrier(&self, group: &ProcessGroup) -> Result<()> {
        let empty = vec![Vec::new(); group.size()];
        self.collective(OpKind::Barrier, group, empty).await.map(|_| ())
    }

    async fn collective(&self, kind: OpKind, group: &ProcessGroup, payloads: Vec<Vec<u8>>) -> Result<Vec<Vec<u8>>> {
        let pos = group
            .position(self.rank)
            .ok_or_else(|| self.violation(format!("rank is not a member of {group}")))?;
        if let Some(&bad) = group.members.iter().find(|&&r| r >= self.shared.n) {
            return Err(self.violation(format!("group {group} names rank {bad} outside the fabric")));
        }
        if group.size() == 1 {
            return Ok(payloads);
        }
        let key: OpKey = (kind, group.members.clone(), self.next_round(kind, group));
        let mut pending = Some(payloads);
        poll_fn(|_| {
            let mut st = self.shared.lock();
            if st.aborted {
                return Poll::Ready(Err(Error::Aborted));
            }
            if let Some(payloads) = pending.take() {
                let slot = st.slots.entry(key.clone()).or_insert_with(|| Slot {
                    kind,
                    group: group.clone(),
                    inputs: vec![None; group.size()],
                    outputs: vec![None; group.size()],
                    arrived: 0,
                    taken: 0,
                });
                if slot.kind != kind {
                    return Poll::Ready(Err(
                        self.violation(format!("{kind} #{} on {group} collides with {}", key.2, slot.kind))
                    ));
                }
                slot.inputs[pos] = Some(payloads);
                slot.arrived += 1;
                if slot.arrived == group.size() {
                    Self::complete_collective(&mut st, &key);
                }
                self.shared.bump(&mut st);
            }
            let slot = st
                .slots
                .get_mut(&key)
                .expect("slot lives until all members take output");
            match slot.outputs[pos].take() {
                Some(out) => {
                    slot.taken += 1;
                    if slot.taken == slot.group.size() {
                        st.slots.remove(&key);
                    }
                    st.waiting[self.rank] = None;
                    self.shared.bump(&mut st);
                    Poll::Ready(Ok(out))
                }
                None => {
                    st.waiting[self.rank] = Some(Waiting::Collective(key.clone()));
                    Poll::Pending
                }
            }
        })
        .await
    }

    fn complete_collective(st: &mut State, key: &OpKey) {
        let slot = st.slots.get_mut(key).expect("slot exists");
        let w = slot.group.size();
        let mut inputs: Vec<Vec<Vec<u8>>> = slot.inputs.iter_mut().map(|i| i.take().expect("all arrived")).collect();
        let mut records = Vec::with_capacity(w);
        let mut received = 0u64;
        for (i, row) in inputs.iter().enumerate() {
            let bytes: u64 = row
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| b.len() as u64)
                .sum();
            received += bytes;
            records.push(TrafficRecord {
                op: slot.kind,
                group: key.1.clone(),
                round: key.2,
                rank: slot.group.member(i),
                bytes,
                msgs: if slot.kind == OpKind::Barrier {
                    0
                } else {
                    (w - 1) as u64
                },
            });
        }
        for i in 0..w {
            let column = inputs.iter_mut().map(|row| std::mem::take(&mut row[i])).collect();
            slot.outputs[i] = Some(column);
        }
        for r in records {
            st.log.push(r);
        }
        st.log.add_received(key.clone(), received);
    }

    /// Eager buffered send on the `self → to` link.
    pub fn send(&self, to: Rank, buf: Vec<u8>) -> Result<()> {
        if to >= self.shared.n {
            return Err(self.violation(format!("send to unknown rank {to}")));
        }
        let mut st = self.shared.lock();
        let link = st.links.entry((self.rank, to)).or_default();
        let round = link.sent;
        link.sent += 1;
        let bytes = buf.len() as u64;
        link.queue.insert(round, buf);
        st.log.push(TrafficRecord {
            op: OpKind::Send,
            group: vec![self.rank, to],
            round,
            rank: self.rank,
            bytes,
            msgs: 1,
        });
        self.shared.bump(&mut st);
        Ok(())
    }

    /// Claims the next message slot on the `from → self` link without waiting.
    pub fn irecv(&self, from: Rank) -> Result<RecvRequest> {
        if from >= self.shared.n {
            return Err(self.violation(format!("recv from unknown rank {from}")));
        }
        let mut st = self.shared.lock();
        let link = st.links.entry((from, self.rank)).or_default();
        let ticket = link.tickets;
        link.tickets += 1;
        Ok(RecvRequest { from, ticket })
    }

    /// Completes a receive issued with [`Worker::irecv`].
    pub async fn wait(&self, req: RecvRequest) -> Result<Vec<u8>> {
        poll_fn(|_| {
            let mut st = self.shared.lock();
            if st.aborted {
                return Poll::Ready(Err(Error::Aborted));
            }
            let link = st.links.entry((req.from, self.rank)).or_default();
            match link.queue.remove(&req.ticket) {
                Some(buf) => {
                    let key = (OpKind::Send, vec![req.from, self.rank], req.ticket);
                    st.log.add_received(key, buf.len() as u64);
                    st.waiting[self.rank] = None;
                    self.shared.bump(&mut st);
                    Poll::Ready(Ok(buf))
                }
                None => {
                    st.waiting[self.rank] = Some(Waiting::Recv {
                        from: req.from,
                        ticket: req.ticket,
                    });
                    Poll::Pending
                }
            }
        })
        .await
    }

    pub async fn recv(&self, from: Rank) -> Result<Vec<u8>> {
        let req = self.irecv(from)?;
        self.wait(req).await
    }
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic".into()
    }
}

fn worker_failed(rank: Rank, source: Error) -> Error {
    Error::WorkerFailed {
        rank,
        source: Box::new(source),
    }
}

/// Runs `program` once per rank in `0..n` and collects the results.
pub fn run_protocol<T, F, Fut>(n: usize, config: &FabricConfig, program: F) -> Result<RunOutput<T>>
where
    F: Fn(Worker) -> Fut + Sync,
    Fut: Future<Output = Result<T>> + Send,
    T: Send,
{
    assert!(n >= 1, "a fabric needs at least one worker");
    let shared = Arc::new(Shared::new(n));
    let results = match config.scheduler {
        Scheduler::Deterministic => run_deterministic(&shared, config.step_budget, &program)?,
        Scheduler::Concurrent => run_concurrent(&shared, config.step_budget, &program)?,
    };
    let mut traffic = std::mem::take(&mut shared.lock().log);
    traffic.finish();
    Ok(RunOutput { results, traffic })
}

fn run_deterministic<T, F, Fut>(shared: &Arc<Shared>, budget: u64, program: &F) -> Result<Vec<T>>
where
    F: Fn(Worker) -> Fut,
    Fut: Future<Output = Result<T>>,
{
    let n = shared.n;
    let mut futures: Vec<Option<std::pin::Pin<Box<Fut>>>> = (0..n)
        .map(|rank| Some(Box::pin(program(Worker::new(rank, shared.clone())))))
        .collect();
    let mut results: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let mut cx = Context::from_waker(Waker::noop());
    let mut steps = 0u64;
    loop {
        let before = shared.epoch();
        let mut live = 0;
        let mut completed = false;
        for (rank, slot) in futures.iter_mut().enumerate() {
            let Some(fut) = slot.as_mut() else { continue };
            steps += 1;
            if steps > budget {
                return Err(Error::StepBudget {
                    budget,
                    stalled: Shared::stalled(&shared.lock()),
                });
            }
            match catch_unwind(AssertUnwindSafe(|| fut.as_mut().poll(&mut cx))) {
                Ok(Poll::Ready(Ok(value))) => {
                    results[rank] = Some(value);
                    *slot = None;
                    completed = true;
                }
                Ok(Poll::Ready(Err(e))) => return Err(worker_failed(rank, e)),
                Err(panic) => return Err(worker_failed(rank, Error::Panic(panic_message(panic)))),
                Ok(Poll::Pending) => live += 1,
            }
        }
        if live == 0 {
            return Ok(results.into_iter().map(|r| r.expect("every worker finished")).collect());
        }
        if !completed && shared.epoch() == before {
            return Err(Error::Deadlock {
                stalled: Shared::stalled(&shared.lock()),
            });
        }
    }
}

fn run_concurrent<T, F, Fut>(shared: &Arc<Shared>, budget: u64, program: &F) -> Result<Vec<T>>
where
    F: Fn(Worker) -> Fut + Sync,
    Fut: Future<Output = Result<T>> + Send,
    T: Send,
{
    let n = shared.n;
    let outcomes: Vec<Result<T>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n)
            .map(|rank| {
                let shared = shared.clone();
                scope.spawn(move || {
                    let worker = Worker::new(rank, shared.clone());
                    let outcome = catch_unwind(AssertUnwindSafe(|| {
                        let mut fut = pin!(program(worker));
                        let mut cx = Context::from_waker(Waker::noop());
                        loop {
                            let seen = shared.epoch();
                            if shared.steps.fetch_add(1, Ordering::Relaxed) >= budget {
                                return Err(Error::StepBudget {
                                    budget,
                                    stalled: Shared::stalled(&shared.lock()),
                                });
                            }
                            match fut.as_mut().poll(&mut cx) {
                                Poll::Ready(r) => return r,
                                Poll::Pending => shared.wait_for_change(rank, seen)?,
                            }
                        }
                    }))
                    .unwrap_or_else(|p| Err(Error::Panic(panic_message(p))));
                    shared.finish(rank, outcome.is_err());
                    outcome
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| Err(Error::Panic(panic_message(p)))))
            .collect()
    });

    let mut fallback = None;
    let mut results = Vec::with_capacity(n);
    for (rank, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(v) => results.push(v),
            Err(e @ (Error::Deadlock { .. } | Error::StepBudget { .. })) => {
                fallback.get_or_insert(e);
            }
            Err(Error::Aborted) => {}
            Err(e) => return Err(worker_failed(rank, e)),
        }
    }
    match fallback {
        Some(e) => Err(e),
        None if results.len() == n => Ok(results),
        None => Err(Error::Aborted),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn both() -> [FabricConfig; 2] {
        [FabricConfig::default(), FabricConfig::concurrent()]
    }

    #[test]
    fn single_worker_all_to_all_is_identity() {
        let out = run_protocol(1, &FabricConfig::default(), |w| async move {
            w.all_to_all(&ProcessGroup::world(1), vec![vec![1, 2, 3]]).await
        })
        .unwrap();
        assert_eq!(out.results, vec![vec![vec![1, 2, 3]]]);
        assert_eq!(out.traffic.total_bytes(), 0);
    }

    #[test]
    fn two_way_exchange() {
        for cfg in both() {
            let out = run_protocol(2, &cfg, |w| async move {
                let r = w.rank() as u8;
                w.all_to_all(&ProcessGroup::world(2), vec![vec![r * 10], vec![r * 10 + 1]])
                    .await
            })
            .unwrap();
            assert_eq!(out.results[0], vec![vec![0], vec![10]]);
            assert_eq!(out.results[1], vec![vec![1], vec![11]]);
        }
    }

    #[test]
    fn all_to_all_bytes_follow_closed_form() {
        let out = run_protocol(4, &FabricConfig::default(), |w| async move {
            w.all_to_all(&ProcessGroup::world(4), vec![vec![0u8; 100]; 4]).await
        })
        .unwrap();
        for rank in 0..4 {
            assert_eq!(out.traffic.bytes_sent_by(rank), 300);
        }
        assert_eq!(out.traffic.total_bytes(), 1200);
        assert!(out.traffic.is_conserved());
    }

    #[test]
    fn send_recv_is_fifo() {
        for cfg in both() {
            let out = run_protocol(2, &cfg, |w| async move {
                if w.rank() == 0 {
                    w.send(1, vec![7; 64])?;
                    w.send(1, vec![8; 3])?;
                    Ok(vec![])
                } else {
                    let a = w.recv(0).await?;
                    let b = w.recv(0).await?;
                    Ok([a, b].concat())
                }
            })
            .unwrap();
            assert_eq!(out.results[1].len(), 67);
            assert!(out.results[1][..64].iter().all(|&b| b == 7));
            assert_eq!(&out.results[1][64..], &[8, 8, 8]);
            assert_eq!(out.traffic.bytes_sent_by(0), 67);
            assert_eq!(out.traffic.link_messages(0, 1), 2);
            assert!(out.traffic.is_conserved());
        }
    }

    #[test]
    fn ring_forward_uses_each_link_once() {
        let out = run_protocol(4, &FabricConfig::default(), |w| async move {
            let n = w.world_size();
            w.send((w.rank() + 1) % n, vec![w.rank() as u8])?;
            w.recv((w.rank() + n - 1) % n).await
        })
        .unwrap();
        for r in 0..4 {
            assert_eq!(out.results[r], vec![((r + 3) % 4) as u8]);
            assert_eq!(out.traffic.link_messages(r, (r + 1) % 4), 1);
        }
        assert_eq!(out.traffic.records().len(), 4);
    }

    #[test]
    fn barrier_releases_everyone_and_logs_nothing() {
        for cfg in both() {
            let out = run_protocol(3, &cfg, |w| async move { w.barrier(&ProcessGroup::world(3)).await }).unwrap();
            assert_eq!(out.results.len(), 3);
            assert_eq!(out.traffic.total_bytes(), 0);
        }
    }

    #[test]
    fn missing_member_is_reported_as_deadlock() {
        for cfg in both() {
            let err = run_protocol(2, &cfg, |w| async move {
                if w.rank() == 0 {
                    w.barrier(&ProcessGroup::world(2)).await
                } else {
                    Ok(())
                }
            })
            .unwrap_err();
            match err {
                Error::Deadlock { stalled } => {
                    assert_eq!(stalled.len(), 1);
                    assert!(stalled[0].contains("barrier"), "{stalled:?}");
                }
                other => panic!("expected deadlock, got {other:?}"),
            }
        }
    }

    #[test]
    fn unmatched_recv_is_reported() {
        let err = run_protocol(2, &FabricConfig::default(), |w| async move {
            if w.rank() == 1 {
                w.recv(0).await.map(|_| ())
            } else {
                Ok(())
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::Deadlock { ref stalled } if stalled[0].contains("recv")));
    }

    #[test]
    fn step_budget_bounds_the_run() {
        let cfg = FabricConfig {
            step_budget: 3,
            ..FabricConfig::default()
        };
        let err = run_protocol(2, &cfg, |w| async move {
            for _ in 0..10 {
                w.barrier(&ProcessGroup::world(2)).await?;
            }
            Ok(())
        })
        .unwrap_err();
        assert!(matches!(err, Error::StepBudget { budget: 3, .. }));
    }

    #[test]
    fn failures_name_the_rank() {
        for cfg in both() {
            let err = run_protocol(3, &cfg, |w| async move {
                if w.rank() == 2 {
                    panic!("boom");
                }
                w.barrier(&ProcessGroup::world(3)).await
            })
            .unwrap_err();
            match err {
                Error::WorkerFailed { rank: 2, source } => assert!(source.to_string().contains("boom")),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn wrong_buffer_count_is_a_violation() {
        let err = run_protocol(2, &FabricConfig::default(), |w| async move {
            w.all_to_all(&ProcessGroup::world(2), vec![vec![]]).await
        })
        .unwrap_err();
        assert!(matches!(err, Error::WorkerFailed { rank: 0, .. }));
    }

    #[test]
    fn group_validation() {
        assert!(ProcessGroup::new(vec![]).is_err());
        assert!(ProcessGroup::new(vec![1, 0, 1]).is_err());
        let g = ProcessGroup::new(vec![2, 0]).unwrap();
        assert_eq!(g.position(0), Some(1));
        assert_eq!(g.to_string(), "[2, 0]");
    }

    #[test]
    fn deterministic_runs_repeat_exactly() {
        let run = || {
            run_protocol(4, &FabricConfig::default(), |w| async move {
                let g = ProcessGroup::world(4);
                let bufs = (0..4).map(|j| vec![w.rank() as u8; j + 1]).collect();
                let got = w.all_to_all(&g, bufs).await?;
                w.send((w.rank() + 1) % 4, got.concat())?;
                w.recv((w.rank() + 3) % 4).await
            })
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.results, b.results);
        assert_eq!(a.traffic, b.traffic);
        assert_eq!(
            serde_json::to_string(&a.traffic).unwrap(),
            serde_json::to_string(&b.traffic).unwrap()
        );
    }
}
