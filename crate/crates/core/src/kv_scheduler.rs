//! Running batch, waiting queue and the KV-token ledger.
//!
//! Admission is FCFS with vLLM's loaded-adapter priority: a request whose
//! adapter cannot get a slot is skipped and later requests of loaded
//! adapters may pass it, while a request that does not fit in KV memory
//! stops admission outright. KV is reserved greedily, one token ahead;
//! when the batch outgrows memory, the most recently admitted requests are
//! preempted and later recomputed.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::ops::Bound;

use serde::{Deserialize, Serialize};

use crate::adapter_cache::{Load, SlotCache};
use crate::error::{Error, Result};
use crate::workload::{AdapterId, Request};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Not yet arrived.
    Pending,
    Waiting,
    Running,
    Preempted,
    Finished,
    /// Needs more KV than the whole capacity; never admitted.
    Rejected,
}

impl Phase {
    fn can_become(self, next: Phase) -> bool {
        use Phase::*;
        matches!(
            (self, next),
            (Pending, Waiting)
                | (Waiting, Running)
                | (Waiting, Rejected)
                | (Running, Finished)
                | (Running, Preempted)
                | (Preempted, Waiting)
        )
    }
}

#[derive(Debug, Clone)]
pub struct RequestState {
    pub request: Request,
    pub rank: u32,
    pub phase: Phase,
    pub tokens_generated: u32,
    pub kv_tokens_held: u64,
    pub first_token_time: Option<f64>,
    pub last_token_time: Option<f64>,
    /// Empty unless token times are being recorded.
    pub token_emit_times: Vec<f64>,
    pub preemption_count: u32,
    adapter_slot: usize,
}

impl RequestState {
    /// KV tokens to (re)admit: prompt plus generated tokens, plus the
    /// greedy reservation for the next token.
    pub fn admission_need(&self) -> u64 {
        self.request.input_tokens as u64 + self.tokens_generated as u64 + 1
    }

    /// Whether the coming iteration's token needs a fresh KV token. The final
    /// token is never fed back, so it needs none.
    fn wants_next_slot(&self) -> bool {
        self.tokens_generated + 1 < self.request.output_tokens
    }

    pub fn is_complete(&self) -> bool {
        self.tokens_generated >= self.request.output_tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvLedger {
    pub capacity_tokens: u64,
    pub used_tokens: u64,
}

impl KvLedger {
    pub fn new(capacity_tokens: u64) -> Self {
        KvLedger {
            capacity_tokens,
            used_tokens: 0,
        }
    }

    pub fn free_tokens(&self) -> u64 {
        self.capacity_tokens - self.used_tokens
    }

    fn reserve(&mut self, n: u64) -> Result<()> {
        if n > self.free_tokens() {
            return Err(Error::Invariant(format!(
                "KV over-reservation: {n} requested, {} free",
                self.free_tokens()
            )));
        }
        self.used_tokens += n;
        Ok(())
    }

    fn release(&mut self, n: u64) -> Result<()> {
        self.used_tokens = self.used_tokens.checked_sub(n).ok_or_else(|| {
            Error::Invariant(format!("KV release of {n} exceeds {} used", self.used_tokens))
        })?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
struct WaitingQueue {
    /// Preempted requests, kept in arrival order ahead of everything else.
    preempted: VecDeque<usize>,
    per_adapter: Vec<VecDeque<usize>>,
    /// `(head request index, adapter slot)` of every non-empty adapter queue.
    heads: BTreeSet<(usize, usize)>,
    len: usize,
}

impl WaitingQueue {
    fn new(adapters: usize) -> Self {
        WaitingQueue {
            per_adapter: vec![VecDeque::new(); adapters],
            ..Default::default()
        }
    }

    fn push_fresh(&mut self, idx: usize, slot: usize) {
        let q = &mut self.per_adapter[slot];
        if q.is_empty() {
            self.heads.insert((idx, slot));
        }
        q.push_back(idx);
        self.len += 1;
    }

    fn push_preempted(&mut self, idx: usize) {
        let at = self.preempted.partition_point(|&i| i < idx);
        self.preempted.insert(at, idx);
        self.len += 1;
    }

    fn pop_adapter_head(&mut self, slot: usize) -> Option<usize> {
        let q = &mut self.per_adapter[slot];
        let idx = q.pop_front()?;
        self.heads.remove(&(idx, slot));
        if let Some(&next) = q.front() {
            self.heads.insert((next, slot));
        }
        self.len -= 1;
        Some(idx)
    }

    fn remove_preempted(&mut self, pos: usize) -> usize {
        self.len -= 1;
        self.preempted.remove(pos).expect("index in range")
    }

    fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.preempted
            .iter()
            .copied()
            .chain(self.per_adapter.iter().flatten().copied())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdmitOutcome {
    pub admitted: Vec<usize>,
    pub rejected: Vec<usize>,
    pub loads: Vec<Load>,
}

/// Scheduler state of one simulation: every request's lifecycle, the
/// running batch in admission order, the waiting queue and the KV ledger.
#[derive(Debug, Clone)]
pub struct Scheduler {
    requests: Vec<RequestState>,
    running: Vec<usize>,
    waiting: WaitingQueue,
    pub ledger: KvLedger,
    adapters: Vec<(AdapterId, u32)>,
    running_per_adapter: Vec<u32>,
    active_adapters: usize,
    loaded_adapter_priority: bool,
    record_token_times: bool,
    finished: usize,
    rejected: usize,
}

impl Scheduler {
    /// `requests` must be sorted by arrival; `adapters` maps adapter id to
    /// rank and must cover every request.
    pub fn new(
        requests: Vec<Request>,
        adapters: &[(AdapterId, u32)],
        capacity_tokens: u64,
        loaded_adapter_priority: bool,
        record_token_times: bool,
    ) -> Result<Self> {
        let slot_of: HashMap<AdapterId, usize> = adapters
            .iter()
            .enumerate()
            .map(|(i, (id, _))| (*id, i))
            .collect();
        let requests = requests
            .into_iter()
            .map(|request| {
                let slot = *slot_of.get(&request.adapter_id).ok_or_else(|| {
                    Error::validation(
                        format!("requests[{}].adapter_id", request.request_id),
                        format!("unknown adapter {}", request.adapter_id),
                    )
                })?;
                Ok(RequestState {
                    rank: adapters[slot].1,
                    phase: Phase::Pending,
                    tokens_generated: 0,
                    kv_tokens_held: 0,
                    first_token_time: None,
                    last_token_time: None,
                    token_emit_times: Vec::new(),
                    preemption_count: 0,
                    adapter_slot: slot,
                    request,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Scheduler {
            requests,
            running: Vec::new(),
            waiting: WaitingQueue::new(adapters.len()),
            ledger: KvLedger::new(capacity_tokens),
            adapters: adapters.to_vec(),
            running_per_adapter: vec![0; adapters.len()],
            active_adapters: 0,
            loaded_adapter_priority,
            record_token_times,
            finished: 0,
            rejected: 0,
        })
    }

    pub fn requests(&self) -> &[RequestState] {
        &self.requests
    }

    pub fn into_requests(self) -> Vec<RequestState> {
        self.requests
    }

    pub fn running(&self) -> &[usize] {
        &self.running
    }

    pub fn waiting_len(&self) -> usize {
        self.waiting.len
    }

    /// Unique adapters (rank > 0) with running requests.
    pub fn active_adapters(&self) -> usize {
        self.active_adapters
    }

    pub fn finished_count(&self) -> usize {
        self.finished
    }

    pub fn rejected_count(&self) -> usize {
        self.rejected
    }

    /// `(adapter_id, rank)` of every adapter in the running batch.
    pub fn running_adapters(&self) -> Vec<(AdapterId, u32)> {
        self.running_per_adapter
            .iter()
            .zip(&self.adapters)
            .filter(|(n, a)| **n > 0 && a.1 > 0)
            .map(|(_, a)| *a)
            .collect()
    }

    fn transition(&mut self, idx: usize, next: Phase) -> Result<()> {
        let st = &mut self.requests[idx];
        if !st.phase.can_become(next) {
            return Err(Error::Invariant(format!(
                "request {}: illegal transition {:?} -> {:?}",
                st.request.request_id, st.phase, next
            )));
        }
        st.phase = next;
        Ok(())
    }

    /// Moves an arrived request into the waiting queue.
    pub fn enqueue(&mut self, idx: usize) -> Result<()> {
        self.transition(idx, Phase::Waiting)?;
        let slot = self.requests[idx].adapter_slot;
        self.waiting.push_fresh(idx, slot);
        Ok(())
    }

    fn slot_available(&self, cache: &SlotCache, idx: usize) -> bool {
        let st = &self.requests[idx];
        st.rank == 0 || cache.is_loadable(st.request.adapter_id)
    }

    fn start_running(
        &mut self,
        idx: usize,
        cache: &mut SlotCache,
        now: f64,
        out: &mut AdmitOutcome,
    ) -> Result<()> {
        let need = self.requests[idx].admission_need();
        let (adapter, rank, slot) = {
            let st = &self.requests[idx];
            (st.request.adapter_id, st.rank, st.adapter_slot)
        };
        if rank > 0 {
            out.loads.extend(cache.ensure_loaded(&[(adapter, rank)], now)?);
            cache.pin(adapter)?;
            if self.running_per_adapter[slot] == 0 {
                self.active_adapters += 1;
            }
        }
        self.running_per_adapter[slot] += 1;
        self.ledger.reserve(need)?;
        self.requests[idx].kv_tokens_held = need;
        self.transition(idx, Phase::Running)?;
        self.running.push(idx);
        out.admitted.push(idx);
        Ok(())
    }

    fn reject(&mut self, idx: usize, out: &mut AdmitOutcome) -> Result<()> {
        self.transition(idx, Phase::Rejected)?;
        self.rejected += 1;
        out.rejected.push(idx);
        Ok(())
    }

    /// One admission scan over the waiting queue; see the module docs for
    /// the ordering rules. Requests larger than the whole KV capacity are
    /// rejected instead of blocking the queue.
    pub fn admit(&mut self, cache: &mut SlotCache, now: f64) -> Result<AdmitOutcome> {
        let mut out = AdmitOutcome::default();
        let capacity = self.ledger.capacity_tokens;

        let mut i = 0;
        while i < self.waiting.preempted.len() {
            let idx = self.waiting.preempted[i];
            let need = self.requests[idx].admission_need();
            if need > capacity {
                self.waiting.remove_preempted(i);
                self.reject(idx, &mut out)?;
                continue;
            }
            if !self.slot_available(cache, idx) {
                if self.loaded_adapter_priority {
                    i += 1;
                    continue;
                }
                return Ok(out);
            }
            if need > self.ledger.free_tokens() {
                return Ok(out);
            }
            self.waiting.remove_preempted(i);
            self.start_running(idx, cache, now, &mut out)?;
        }

        let mut cursor: Option<(usize, usize)> = None;
        loop {
            let next = match cursor {
                None => self.waiting.heads.iter().next(),
                Some(c) => self
                    .waiting
                    .heads
                    .range((Bound::Excluded(c), Bound::Unbounded))
                    .next(),
            };
            let Some(&(idx, slot)) = next else { break };
            cursor = Some((idx, slot));
            let need = self.requests[idx].admission_need();
            if need > capacity {
                self.waiting.pop_adapter_head(slot);
                self.reject(idx, &mut out)?;
                continue;
            }
            if !self.slot_available(cache, idx) {
                if self.loaded_adapter_priority {
                    continue;
                }
                break;
            }
            if need > self.ledger.free_tokens() {
                break;
            }
            self.waiting.pop_adapter_head(slot);
            self.start_running(idx, cache, now, &mut out)?;
        }
        Ok(out)
    }

    fn stop_running(&mut self, idx: usize, cache: &mut SlotCache) -> Result<()> {
        let held = std::mem::take(&mut self.requests[idx].kv_tokens_held);
        self.ledger.release(held)?;
        let (adapter, rank, slot) = {
            let st = &self.requests[idx];
            (st.request.adapter_id, st.rank, st.adapter_slot)
        };
        self.running_per_adapter[slot] -= 1;
        if rank > 0 {
            cache.unpin(adapter)?;
            if self.running_per_adapter[slot] == 0 {
                self.active_adapters -= 1;
            }
        }
        Ok(())
    }

    /// Reserves the next token's KV for every running request, preempting
    /// the most recently admitted requests while demand exceeds capacity.
    /// Returns the preempted requests.
    pub fn decode_step_alloc(&mut self, cache: &mut SlotCache) -> Result<Vec<usize>> {
        let mut demand = self
            .running
            .iter()
            .filter(|&&i| self.requests[i].wants_next_slot())
            .count() as u64;
        let mut preempted = Vec::new();
        while self.ledger.used_tokens + demand > self.ledger.capacity_tokens {
            if self.running.len() == 1 {
                let st = &self.requests[self.running[0]];
                return Err(Error::Simulation(format!(
                    "single request exceeds KV capacity: request {} needs {} tokens, capacity {}",
                    st.request.request_id,
                    st.kv_tokens_held + 1,
                    self.ledger.capacity_tokens
                )));
            }
            let victim = self.running.pop().expect("non-empty batch");
            if self.requests[victim].wants_next_slot() {
                demand -= 1;
            }
            self.stop_running(victim, cache)?;
            self.requests[victim].preemption_count += 1;
            self.transition(victim, Phase::Preempted)?;
            self.transition(victim, Phase::Waiting)?;
            self.waiting.push_preempted(victim);
            preempted.push(victim);
        }
        for k in 0..self.running.len() {
            let idx = self.running[k];
            if self.requests[idx].wants_next_slot() {
                self.requests[idx].kv_tokens_held += 1;
            }
        }
        self.ledger.reserve(demand)?;
        Ok(preempted)
    }

    /// Retires running requests that have emitted all their tokens.
    pub fn complete_finished(&mut self, cache: &mut SlotCache) -> Result<Vec<usize>> {
        let done: Vec<usize> = self
            .running
            .iter()
            .copied()
            .filter(|&i| self.requests[i].is_complete())
            .collect();
        if done.is_empty() {
            return Ok(done);
        }
        self.running.retain(|&i| !self.requests[i].is_complete());
        for &idx in &done {
            self.stop_running(idx, cache)?;
            self.transition(idx, Phase::Finished)?;
            self.finished += 1;
        }
        Ok(done)
    }

    /// Emits one token for every running request at time `t`. Returns the
    /// number of tokens emitted.
    pub fn emit_tokens(&mut self, t: f64) -> usize {
        for &idx in &self.running {
            let st = &mut self.requests[idx];
            st.tokens_generated += 1;
            st.first_token_time.get_or_insert(t);
            st.last_token_time = Some(t);
            if self.record_token_times {
                st.token_emit_times.push(t);
            }
        }
        self.running.len()
    }

    /// Full structural check, valid between allocation and token emission:
    /// ledger conservation, lifecycle consistency,
    /// reservation shape and token bookkeeping. `arrived` is the number of
    /// requests moved out of pending so far.
    pub fn check_invariants(&self, cache: &SlotCache, arrived: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Invariant(m));
        let held: u64 = self.running.iter().map(|&i| self.requests[i].kv_tokens_held).sum();
        if held != self.ledger.used_tokens {
            return fail(format!(
                "ledger used {} != held {held}",
                self.ledger.used_tokens
            ));
        }
        if self.ledger.used_tokens > self.ledger.capacity_tokens {
            return fail("ledger over capacity".into());
        }
        let mut seen = BTreeSet::new();
        for &i in &self.running {
            let st = &self.requests[i];
            if !seen.insert(i) {
                return fail(format!("request {} running twice", st.request.request_id));
            }
            if st.phase != Phase::Running {
                return fail(format!("request {} in batch as {:?}", st.request.request_id, st.phase));
            }
            if st.rank > 0 && !cache.is_resident(st.request.adapter_id) {
                return fail(format!("adapter {} running but not resident", st.request.adapter_id));
            }
            let base = st.request.input_tokens as u64 + st.tokens_generated as u64;
            let ok = if st.wants_next_slot() {
                st.kv_tokens_held == base + 1
            } else {
                st.kv_tokens_held == base || st.kv_tokens_held == base + 1
            };
            if !ok || st.kv_tokens_held < st.request.input_tokens as u64 {
                return fail(format!(
                    "request {} holds {} KV tokens with {} generated",
                    st.request.request_id, st.kv_tokens_held, st.tokens_generated
                ));
            }
        }
        for i in self.waiting.iter() {
            if self.requests[i].phase != Phase::Waiting {
                return fail(format!("queued request {} is {:?}", i, self.requests[i].phase));
            }
        }
        if cache.len() > cache.capacity_slots() {
            return fail("slot residency above capacity".into());
        }
        let mut counts = [0usize; 6];
        for (i, st) in self.requests.iter().enumerate() {
            counts[st.phase as usize] += 1;
            if st.tokens_generated > st.request.output_tokens {
                return fail(format!("request {i} generated too many tokens"));
            }
            if st.phase == Phase::Finished && st.tokens_generated != st.request.output_tokens {
                return fail(format!("request {i} finished early"));
            }
            if st.phase != Phase::Running && st.kv_tokens_held != 0 {
                return fail(format!("request {i} holds KV while {:?}", st.phase));
            }
            if self.record_token_times {
                if st.token_emit_times.len() != st.tokens_generated as usize {
                    return fail(format!("request {i} token times out of sync"));
                }
                if st.token_emit_times.windows(2).any(|w| w[0] >= w[1]) {
                    return fail(format!("request {i} token times not increasing"));
                }
            }
        }
        let [pending, waiting, running, preempted, finished, rejected] = counts;
        if preempted != 0
            || running != self.running.len()
            || waiting != self.waiting.len
            || finished != self.finished
            || rejected != self.rejected
            || pending != self.requests.len() - arrived
        {
            return fail(format!(
                "phase census mismatch: {counts:?} vs running {} waiting {} arrived {arrived}",
                self.running.len(),
                self.waiting.len
            ));
        }
        Ok(())
    }
}
