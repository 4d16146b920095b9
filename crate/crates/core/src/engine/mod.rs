//! Discrete-event execution of one training iteration.
//!
//! A compute task starts once its stage is idle and its incoming message (if
//! any) has arrived; stages run their tasks in the fixed schedule order. When
//! a task finishes, its outgoing message becomes a transfer request:
//!
//! 1. the network clock advances to the request time;
//! 2. the request's slot demand comes from [`required_fs`];
//! 3. the policy selects a path and block; on success the block is held from
//!    issue until the transfer completes `T` seconds later;
//! 4. on blocking, the request is retried after a backoff with one slot less
//!    each time, and after `max_retries` it is carried by a degraded fallback
//!    service taking `fallback_penalty` times the single-slot transfer time.
//!
//! Messages between stages in the same datacenter bypass the network.
//! Events at equal times are processed in `(time, stage, task id)` order.

pub mod log;

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latency::{
    self, count_conflicts, intra_dc_transfer_time, queue_penalty, required_fs, serialization_time,
    EgressState, LatencyParams, RequestLabel,
};
use crate::rsa::{CandidateCache, Outcome, Policy};
use crate::topology::{LinkId, Network, NodeId, OwnerId, SlotBlock, SpectrumEvent};
use crate::workload::{Schedule, TaskId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineParams {
    pub base_fs: usize,
    pub fs_max: usize,
    pub max_retries: usize,
    pub retry_backoff_s: f64,
    pub fallback_penalty: f64,
}

impl Default for EngineParams {
    fn default() -> Self {
        Self {
            base_fs: 4,
            fs_max: 16,
            max_retries: 5,
            retry_backoff_s: 1.0e-3,
            fallback_penalty: 3.0,
        }
    }
}

impl EngineParams {
    pub fn validate(&self, fs_total: usize) -> Result<()> {
        if self.base_fs < 1 {
            return Err(Error::invalid("cba.base_fs", "must be at least 1"));
        }
        if self.fs_max < self.base_fs || self.fs_max > fs_total {
            return Err(Error::invalid(
                "cba.fs_max",
                format!(
                    "{} must lie in [base_fs = {}, fs_total = {}]",
                    self.fs_max, self.base_fs, fs_total
                ),
            ));
        }
        if !(self.retry_backoff_s > 0.0 && self.retry_backoff_s.is_finite()) {
            return Err(Error::invalid("engine.retry_backoff_s", "must be positive"));
        }
        if !(self.fallback_penalty >= 1.0 && self.fallback_penalty.is_finite()) {
            return Err(Error::invalid("engine.fallback_penalty", "must be at least 1"));
        }
        Ok(())
    }
}

/// FS demand inputs for every transfer of one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestPlan {
    /// Indexed by the consuming task's id.
    pub labels: Vec<RequestLabel>,
    pub boost_factor: f64,
}

impl RequestPlan {
    /// Every request at the base demand.
    pub fn uniform(task_count: usize) -> Self {
        Self {
            labels: vec![RequestLabel::NORMAL; task_count],
            boost_factor: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: TaskId,
    pub ready_time: f64,
    pub start_time: f64,
    pub finish_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferRoute {
    /// Same-datacenter transfer, no spectrum used.
    IntraDc,
    Optical {
        nodes: Vec<NodeId>,
        links: Vec<LinkId>,
        block: SlotBlock,
    },
    /// Every attempt blocked; carried by the fallback service.
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub request_id: u64,
    pub producer: TaskId,
    pub consumer: TaskId,
    pub src_stage: usize,
    pub dst_stage: usize,
    pub src_dc: NodeId,
    pub dst_dc: NodeId,
    /// Slots of the committed attempt (0 for intra-DC and fallback).
    pub n_fs: usize,
    /// Slots asked for on the first attempt (0 for intra-DC).
    pub first_fs: usize,
    pub route: TransferRoute,
    pub attempts: usize,
    pub first_attempt_blocked: bool,
    pub issue_time: f64,
    pub complete_time: f64,
    pub owner: Option<OwnerId>,
}

impl TransferRecord {
    pub fn is_cross_dc(&self) -> bool {
        self.src_dc != self.dst_dc
    }

    pub fn retries(&self) -> usize {
        self.attempts.saturating_sub(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockingOutcome {
    /// A retry found a path and block.
    EventuallySent,
    /// Retries ran out; the message was not dropped but carried by the
    /// fallback service.
    DroppedNever,
}

impl BlockingOutcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            BlockingOutcome::EventuallySent => "eventually_sent",
            BlockingOutcome::DroppedNever => "dropped_never",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockingEvent {
    pub request_id: u64,
    /// Producer whose outgoing message blocked.
    pub task: TaskId,
    pub attempts: usize,
    pub final_outcome: BlockingOutcome,
}

/// Executed schedule of one iteration. Task and transfer times are relative
/// to `start_offset`; spectrum events carry absolute network time.
#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    pub iteration: usize,
    pub start_offset: f64,
    /// Indexed by task id.
    pub tasks: Vec<TaskRecord>,
    pub transfers: Vec<TransferRecord>,
    pub blocking_events: Vec<BlockingEvent>,
    pub makespan: f64,
    pub stage_busy: Vec<f64>,
    /// Spectrum events since the previous drain of the network log, which
    /// for the first iteration includes any background warm-up.
    pub spectrum_events: Vec<SpectrumEvent>,
}

impl Timeline {
    pub fn stage_count(&self) -> usize {
        self.stage_busy.len()
    }

    pub fn cross_dc_requests(&self) -> usize {
        self.transfers.iter().filter(|t| t.is_cross_dc()).count()
    }

    /// Requests whose first selection attempt blocked.
    pub fn first_attempt_blocked(&self) -> usize {
        self.transfers.iter().filter(|t| t.first_attempt_blocked).count()
    }

    /// `1 - Σ busy / (p · makespan)`.
    pub fn bubble_ratio(&self) -> Result<f64> {
        if !(self.makespan > 0.0) {
            return Err(Error::TimelineMismatch("zero makespan".into()));
        }
        let busy: f64 = self.stage_busy.iter().sum();
        Ok(1.0 - busy / (self.stage_count() as f64 * self.makespan))
    }

    /// First-attempt blocked requests over cross-DC requests; 0 when there
    /// are none.
    pub fn blocking_probability(&self) -> f64 {
        let requests = self.cross_dc_requests();
        if requests == 0 {
            0.0
        } else {
            self.first_attempt_blocked() as f64 / requests as f64
        }
    }

    /// Transfer index per consuming task.
    pub fn transfers_by_consumer(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.tasks.len()];
        for (i, t) in self.transfers.iter().enumerate() {
            out[t.consumer.0] = Some(i);
        }
        out
    }
}

pub fn bubble_ratio(timeline: &Timeline) -> Result<f64> {
    timeline.bubble_ratio()
}

pub fn blocking_probability(timeline: &Timeline) -> f64 {
    timeline.blocking_probability()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum EventKind {
    ComputeDone(TaskId),
    Attempt(usize),
    Arrive(usize),
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    stage: usize,
    task: TaskId,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Min-heap on (time, stage, task, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.stage.cmp(&self.stage))
            .then(other.task.cmp(&self.task))
            .then(other.seq.cmp(&self.seq))
    }
}

/// Everything one iteration needs besides the task graph.
pub struct IterationContext<'a> {
    pub net: &'a mut Network,
    pub cache: &'a mut CandidateCache,
    pub latency: &'a LatencyParams,
    pub egress: &'a mut EgressState,
    pub params: &'a EngineParams,
    pub policy: Policy,
    pub plan: &'a RequestPlan,
    pub iteration: usize,
}

struct Pending {
    record: TransferRecord,
    bits: f64,
    label: RequestLabel,
}

struct Sim<'a, 'b> {
    ctx: &'b mut IterationContext<'a>,
    schedule: &'b Schedule,
    offset: f64,
    heap: BinaryHeap<Event>,
    seq: u64,
    cursor: Vec<usize>,
    stage_free: Vec<bool>,
    arrived: Vec<bool>,
    records: Vec<Option<TaskRecord>>,
    transfers: Vec<Pending>,
    blocking: Vec<BlockingEvent>,
    inflight: Vec<(usize, Vec<LinkId>)>,
    next_request: u64,
    bits: f64,
}

/// Runs one iteration starting at the network's current clock.
pub fn simulate_iteration(
    ctx: &mut IterationContext<'_>,
    schedule: &Schedule,
    msg_bits: f64,
) -> Result<Timeline> {
    let p = schedule.stage_count();
    let n = schedule.tasks.len();
    if ctx.plan.labels.len() != n {
        return Err(Error::TimelineMismatch(format!(
            "plan covers {} tasks, schedule has {n}",
            ctx.plan.labels.len()
        )));
    }
    let offset = ctx.net.clock();
    let mut sim = Sim {
        ctx,
        schedule,
        offset,
        heap: BinaryHeap::new(),
        seq: 0,
        cursor: vec![0; p],
        stage_free: vec![true; p],
        arrived: vec![false; n],
        records: vec![None; n],
        transfers: Vec::new(),
        blocking: Vec::new(),
        inflight: Vec::new(),
        next_request: 0,
        bits: msg_bits,
    };
    for stage in 0..p {
        sim.try_start(stage, 0.0);
    }
    while let Some(ev) = sim.heap.pop() {
        match ev.kind {
            EventKind::ComputeDone(task) => sim.on_compute_done(task, ev.time)?,
            EventKind::Attempt(idx) => sim.attempt(idx, ev.time)?,
            EventKind::Arrive(idx) => sim.on_arrive(idx, ev.time),
        }
    }
    sim.finish()
}

impl<'a, 'b> Sim<'a, 'b> {
    fn push(&mut self, time: f64, stage: usize, task: TaskId, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Event {
            time,
            stage,
            task,
            seq: self.seq,
            kind,
        });
    }

    fn try_start(&mut self, stage: usize, now: f64) {
        if !self.stage_free[stage] {
            return;
        }
        let Some(&id) = self.schedule.order[stage].get(self.cursor[stage]) else {
            return;
        };
        let task = self.schedule.task(id);
        if task.message_pred.is_some() && !self.arrived[id.0] {
            return;
        }
        self.stage_free[stage] = false;
        self.cursor[stage] += 1;
        self.records[id.0] = Some(TaskRecord {
            task: id,
            ready_time: now,
            start_time: now,
            finish_time: now + task.compute_s,
        });
        self.push(now + task.compute_s, stage, id, EventKind::ComputeDone(id));
    }

    fn on_compute_done(&mut self, id: TaskId, now: f64) -> Result<()> {
        let task = self.schedule.task(id);
        let stage = task.stage;
        self.stage_free[stage] = true;
        if let Some(consumer) = self.schedule.message_succ[id.0] {
            let dst_stage = self.schedule.task(consumer).stage;
            let src_dc = self.schedule.stages[stage].dc;
            let dst_dc = self.schedule.stages[dst_stage].dc;
            let request_id = self.next_request;
            self.next_request += 1;
            let idx = self.transfers.len();
            self.transfers.push(Pending {
                record: TransferRecord {
                    request_id,
                    producer: id,
                    consumer,
                    src_stage: stage,
                    dst_stage,
                    src_dc,
                    dst_dc,
                    n_fs: 0,
                    first_fs: 0,
                    route: TransferRoute::IntraDc,
                    attempts: 0,
                    first_attempt_blocked: false,
                    issue_time: now,
                    complete_time: f64::NAN,
                    owner: None,
                },
                bits: self.bits,
                label: self.ctx.plan.labels[consumer.0],
            });
            if src_dc == dst_dc {
                let done = now + intra_dc_transfer_time(self.ctx.latency, self.bits);
                self.transfers[idx].record.complete_time = done;
                self.push(done, dst_stage, consumer, EventKind::Arrive(idx));
            } else {
                self.attempt(idx, now)?;
            }
        }
        self.try_start(stage, now);
        Ok(())
    }

    fn attempt(&mut self, idx: usize, now: f64) -> Result<()> {
        let abs = self.offset + now;
        self.ctx.net.advance(abs);
        let params = *self.ctx.params;
        let (src_dc, dst_dc, src_stage, dst_stage, consumer, retry, label, bits) = {
            let p = &self.transfers[idx];
            (
                p.record.src_dc,
                p.record.dst_dc,
                p.record.src_stage,
                p.record.dst_stage,
                p.record.consumer,
                p.record.attempts,
                p.label,
                p.bits,
            )
        };
        let first = required_fs(params.base_fs, label, self.ctx.plan.boost_factor, params.fs_max);
        let width = first.saturating_sub(retry).max(1);
        let selection = self
            .ctx
            .cache
            .select(self.ctx.policy, self.ctx.net, src_dc, dst_dc, width);
        {
            let rec = &mut self.transfers[idx].record;
            rec.attempts += 1;
            if retry == 0 {
                rec.first_fs = first;
                rec.first_attempt_blocked = selection.is_blocked();
            }
        }
        let latency = *self.ctx.latency;
        match selection.outcome {
            Outcome::Assigned { path, block, .. } => {
                let conflicts = if latency.queue_penalty_per_conflict_s > 0.0 {
                    count_conflicts(&path.links, self.inflight.iter().map(|(_, l)| l.as_slice()))
                } else {
                    0
                };
                let wait = queue_penalty(&LatencyParams::zero(), self.ctx.egress, src_stage, now, 0);
                let penalty = queue_penalty(&latency, self.ctx.egress, src_stage, now, conflicts);
                let total = latency::transfer_time(&latency, &path, width, bits, penalty);
                let serialize = serialization_time(&latency, width, bits);
                self.ctx.egress.occupy_until(src_stage, now + wait + serialize);
                let owner = if total > 0.0 {
                    let owner = self.ctx.net.next_owner_id();
                    self.ctx
                        .net
                        .allocate_spectrum(&path.links, block, owner, abs + total)?;
                    Some(owner)
                } else {
                    None
                };
                if latency.queue_penalty_per_conflict_s > 0.0 {
                    self.inflight.push((idx, path.links.clone()));
                }
                let done = now + total;
                let rec = &mut self.transfers[idx].record;
                rec.n_fs = width;
                rec.route = TransferRoute::Optical {
                    nodes: path.nodes,
                    links: path.links,
                    block,
                };
                rec.complete_time = done;
                rec.owner = owner;
                if retry > 0 {
                    self.blocking.push(BlockingEvent {
                        request_id: rec.request_id,
                        task: rec.producer,
                        attempts: rec.attempts,
                        final_outcome: BlockingOutcome::EventuallySent,
                    });
                }
                self.push(done, dst_stage, consumer, EventKind::Arrive(idx));
            }
            Outcome::Blocked if retry < params.max_retries => {
                let producer = self.transfers[idx].record.producer;
                self.push(
                    now + params.retry_backoff_s,
                    src_stage,
                    producer,
                    EventKind::Attempt(idx),
                );
            }
            Outcome::Blocked => {
                let shortest = self.ctx.cache.routes(self.ctx.net, src_dc, dst_dc).paths[0].clone();
                let single = latency::transfer_time(&latency, &shortest, 1, bits, 0.0);
                let wait = queue_penalty(&LatencyParams::zero(), self.ctx.egress, src_stage, now, 0);
                let serialize = serialization_time(&latency, 1, bits);
                self.ctx.egress.occupy_until(src_stage, now + wait + serialize);
                let done = now + wait + params.fallback_penalty * single;
                let rec = &mut self.transfers[idx].record;
                rec.route = TransferRoute::Fallback;
                rec.complete_time = done;
                self.blocking.push(BlockingEvent {
                    request_id: rec.request_id,
                    task: rec.producer,
                    attempts: rec.attempts,
                    final_outcome: BlockingOutcome::DroppedNever,
                });
                self.push(done, dst_stage, consumer, EventKind::Arrive(idx));
            }
        }
        Ok(())
    }

    fn on_arrive(&mut self, idx: usize, now: f64) {
        let consumer = self.transfers[idx].record.consumer;
        let stage = self.transfers[idx].record.dst_stage;
        self.arrived[consumer.0] = true;
        if !self.inflight.is_empty() {
            self.inflight.retain(|(i, _)| *i != idx);
        }
        self.try_start(stage, now);
    }

    fn finish(self) -> Result<Timeline> {
        let Sim {
            ctx,
            schedule,
            offset,
            records,
            transfers,
            mut blocking,
            ..
        } = self;
        let tasks: Vec<TaskRecord> = records
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                r.ok_or_else(|| Error::Unschedulable(format!("task {i} never became ready")))
            })
            .collect::<Result<_>>()?;
        let makespan = tasks.iter().map(|t| t.finish_time).fold(0.0, f64::max);
        let mut stage_busy = vec![0.0; schedule.stage_count()];
        for t in &schedule.tasks {
            stage_busy[t.stage] += t.compute_s;
        }
        ctx.net.advance(offset + makespan);
        debug_assert!(
            transfers
                .iter()
                .filter_map(|t| t.record.owner)
                .all(|o| !ctx.net.is_active(o)),
            "training spectrum outlived the iteration"
        );
        blocking.sort_by_key(|b| b.request_id);
        Ok(Timeline {
            iteration: ctx.iteration,
            start_offset: offset,
            tasks,
            transfers: transfers.into_iter().map(|p| p.record).collect(),
            blocking_events: blocking,
            makespan,
            stage_busy,
            spectrum_events: ctx.net.drain_events(),
        })
    }
}

#[cfg(test)]
mod tests;
