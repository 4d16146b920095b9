//! Communication-bound labeling and multi-iteration orchestration.
//!
//! After each iteration the executed timeline is scanned for tasks that sat
//! idle waiting on a cross-DC message (communication-bound, CB) and for
//! producers whose outgoing request blocked on its first attempt. The next
//! iteration boosts the slot demand of messages into CB tasks and halves the
//! demand of messages from blocked producers.

use serde::{Deserialize, Serialize};

use crate::engine::{simulate_iteration, EngineParams, IterationContext, RequestPlan, Timeline};
use crate::error::{Error, Result};
use crate::latency::{EgressState, LatencyParams, RequestLabel};
use crate::rsa::{CandidateCache, Policy};
use crate::topology::Network;
use crate::workload::{Schedule, TaskId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrchestratorConfig {
    pub n_iterations: usize,
    /// Leading iterations excluded from the summary statistics.
    pub warmup_iterations: usize,
    pub boost_factor: f64,
    /// Above this previous-iteration blocking probability the boost is halved.
    pub blocking_threshold: f64,
    /// Idle slack below which a task is not counted as waiting.
    pub epsilon_s: f64,
    /// Also boost messages sent by CB tasks.
    pub boost_outgoing: bool,
    /// Background traffic runs this long before the first iteration.
    pub background_warmup_s: f64,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            n_iterations: 11,
            warmup_iterations: 1,
            boost_factor: 2.0,
            blocking_threshold: 0.05,
            epsilon_s: 1.0e-6,
            boost_outgoing: false,
            background_warmup_s: 0.0,
        }
    }
}

impl OrchestratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iterations <= self.warmup_iterations {
            return Err(Error::invalid(
                "cba.n_iterations",
                format!(
                    "{} leaves no measured iteration after {} warm-up",
                    self.n_iterations, self.warmup_iterations
                ),
            ));
        }
        if !(self.boost_factor >= 1.0 && self.boost_factor.is_finite()) {
            return Err(Error::invalid("cba.boost_factor", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.blocking_threshold) {
            return Err(Error::invalid("cba.blocking_threshold", "must lie in [0, 1]"));
        }
        if !(self.epsilon_s >= 0.0 && self.epsilon_s.is_finite()) {
            return Err(Error::invalid("cba.epsilon_s", "must be nonnegative"));
        }
        if !(self.background_warmup_s >= 0.0 && self.background_warmup_s.is_finite()) {
            return Err(Error::invalid("background.warmup_s", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Per-task labels derived from one timeline, indexed by task id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    pub cb: Vec<bool>,
    pub blocked: Vec<bool>,
}

impl LabelSet {
    pub fn empty(task_count: usize) -> Self {
        Self {
            cb: vec![false; task_count],
            blocked: vec![false; task_count],
        }
    }

    pub fn from_timeline(timeline: &Timeline, schedule: &Schedule, epsilon_s: f64) -> Self {
        Self {
            cb: label_cb_tasks(timeline, schedule, epsilon_s),
            blocked: label_blocked_tasks(timeline),
        }
    }

    pub fn cb_tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.cb.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| TaskId(i))
    }

    pub fn blocked_tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.blocked.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| TaskId(i))
    }

    /// Copies the labels onto the schedule's tasks.
    pub fn apply(&self, schedule: &mut Schedule) {
        for t in &mut schedule.tasks {
            t.cb_label = self.cb[t.id.0];
            t.blocked_flag = self.blocked[t.id.0];
        }
    }
}

/// A task is CB when it started more than `epsilon_s` after its stage
/// predecessor finished (the iteration start for a stage's first task) and
/// the input it waited for was a cross-DC message whose transfer, not the
/// producer's compute, held it back: the start is also more than
/// `epsilon_s` after the producer finished.
pub fn label_cb_tasks(timeline: &Timeline, schedule: &Schedule, epsilon_s: f64) -> Vec<bool> {
    let by_consumer = timeline.transfers_by_consumer();
    let mut cb = vec![false; schedule.tasks.len()];
    for task in &schedule.tasks {
        let prev_finish = task
            .stage_pred
            .map_or(0.0, |p| timeline.tasks[p.0].finish_time);
        let start = timeline.tasks[task.id.0].start_time;
        if start <= prev_finish + epsilon_s {
            continue;
        }
        cb[task.id.0] = by_consumer[task.id.0]
            .map(|i| &timeline.transfers[i])
            .is_some_and(|t| {
                t.is_cross_dc() && start > timeline.tasks[t.producer.0].finish_time + epsilon_s
            });
    }
    cb
}

/// Producers whose outgoing request blocked on its first attempt.
pub fn label_blocked_tasks(timeline: &Timeline) -> Vec<bool> {
    let mut blocked = vec![false; timeline.tasks.len()];
    for t in &timeline.transfers {
        if t.first_attempt_blocked {
            blocked[t.producer.0] = true;
        }
    }
    blocked
}

/// Boost actually applied given last iteration's blocking probability.
pub fn effective_boost(cfg: &OrchestratorConfig, prev_blocking: f64) -> f64 {
    if prev_blocking > cfg.blocking_threshold {
        (cfg.boost_factor / 2.0).max(1.0)
    } else {
        cfg.boost_factor
    }
}

/// Request labels for the next iteration. A message is CB when its consumer
/// was CB (or its producer, with `boost_outgoing`), and blocked when its
/// producer's request blocked.
pub fn plan_requests(
    schedule: &Schedule,
    labels: &LabelSet,
    prev_blocking: f64,
    cfg: &OrchestratorConfig,
) -> RequestPlan {
    let mut plan = RequestPlan::uniform(schedule.tasks.len());
    plan.boost_factor = effective_boost(cfg, prev_blocking);
    for (producer, consumer) in schedule.message_edges() {
        plan.labels[consumer.0] = RequestLabel {
            cb: labels.cb[consumer.0] || (cfg.boost_outgoing && labels.cb[producer.0]),
            blocked: labels.blocked[producer.0],
        };
    }
    plan
}

/// Summary of one executed iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub measured: bool,
    pub makespan_s: f64,
    pub bubble_ratio: f64,
    pub requests: usize,
    pub blocked: usize,
    pub blocking_probability: f64,
    pub fallbacks: usize,
}

impl IterationStats {
    pub fn of(timeline: &Timeline, measured: bool) -> Result<Self> {
        Ok(Self {
            iteration: timeline.iteration,
            measured,
            makespan_s: timeline.makespan,
            bubble_ratio: timeline.bubble_ratio()?,
            requests: timeline.cross_dc_requests(),
            blocked: timeline.first_attempt_blocked(),
            blocking_probability: timeline.blocking_probability(),
            fallbacks: timeline
                .transfers
                .iter()
                .filter(|t| matches!(t.route, crate::engine::TransferRoute::Fallback))
                .count(),
        })
    }
}

/// Means over the measured iterations. The blocking probability pools
/// requests: total blocked over total requests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub iterations: Vec<IterationStats>,
    pub runtime_s: f64,
    pub bubble_ratio: f64,
    pub requests: f64,
    pub blocked: f64,
    pub blocking_probability: f64,
}

impl RunSummary {
    pub fn from_iterations(iterations: Vec<IterationStats>) -> Self {
        let measured: Vec<_> = iterations.iter().filter(|s| s.measured).collect();
        let n = measured.len().max(1) as f64;
        let sum = |f: &dyn Fn(&IterationStats) -> f64| measured.iter().map(|s| f(s)).sum::<f64>();
        let requests = sum(&|s| s.requests as f64);
        let blocked = sum(&|s| s.blocked as f64);
        Self {
            runtime_s: sum(&|s| s.makespan_s) / n,
            bubble_ratio: sum(&|s| s.bubble_ratio) / n,
            requests: requests / n,
            blocked: blocked / n,
            blocking_probability: if requests > 0.0 { blocked / requests } else { 0.0 },
            iterations,
        }
    }
}

/// What the observer sees after each iteration.
pub struct IterationReport<'a> {
    pub timeline: &'a Timeline,
    pub schedule: &'a Schedule,
    /// Labels in force while this iteration ran.
    pub labels: &'a LabelSet,
    pub plan: &'a RequestPlan,
    pub stats: IterationStats,
}

/// Everything a multi-iteration run needs.
pub struct RunSetup<'a> {
    pub net: &'a mut Network,
    pub schedule: &'a mut Schedule,
    pub cache: &'a mut CandidateCache,
    pub latency: &'a LatencyParams,
    pub engine: &'a EngineParams,
    pub policy: Policy,
    pub msg_bits: f64,
}

/// Runs `cfg.n_iterations` back to back on a shared network clock. Only the
/// CBA policy uses labels; baselines always request the base demand.
pub fn orchestrate(
    setup: RunSetup<'_>,
    cfg: &OrchestratorConfig,
    mut observer: impl FnMut(&IterationReport<'_>) -> Result<()>,
) -> Result<RunSummary> {
    cfg.validate()?;
    let RunSetup {
        net,
        schedule,
        cache,
        latency,
        engine,
        policy,
        msg_bits,
    } = setup;
    if cfg.background_warmup_s > 0.0 {
        // Warm-up spectrum events stay logged and reach iteration 0's timeline.
        net.advance(net.clock() + cfg.background_warmup_s);
    }
    let n = schedule.tasks.len();
    let mut egress = EgressState::new(schedule.stage_count());
    let mut labels = LabelSet::empty(n);
    let mut prev_blocking = 0.0;
    let mut stats = Vec::with_capacity(cfg.n_iterations);
    for iteration in 0..cfg.n_iterations {
        let plan = match policy {
            Policy::Cba => plan_requests(schedule, &labels, prev_blocking, cfg),
            Policy::KspFf | Policy::SdFf => RequestPlan::uniform(n),
        };
        labels.apply(schedule);
        egress.reset();
        let timeline = {
            let mut ctx = IterationContext {
                net: &mut *net,
                cache: &mut *cache,
                latency,
                egress: &mut egress,
                params: engine,
                policy,
                plan: &plan,
                iteration,
            };
            simulate_iteration(&mut ctx, schedule, msg_bits)?
        };
        let it_stats = IterationStats::of(&timeline, iteration >= cfg.warmup_iterations)?;
        observer(&IterationReport {
            timeline: &timeline,
            schedule,
            labels: &labels,
            plan: &plan,
            stats: it_stats,
        })?;
        stats.push(it_stats);
        labels = LabelSet::from_timeline(&timeline, schedule, cfg.epsilon_s);
        prev_blocking = timeline.blocking_probability();
    }
    Ok(RunSummary::from_iterations(stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{TaskRecord, TransferRecord, TransferRoute};
    use crate::workload::{build_schedule, partition_stages, ModelProfile, ScheduleKind};

    fn schedule(dcs: &[usize], m: usize) -> Schedule {
        let profile = ModelProfile {
            name: "toy".into(),
            n_layers: dcs.len(),
            fwd_time_per_layer_s: 1.0,
            bwd_time_per_layer_s: 2.0,
            msg_bytes_per_microbatch: 1,
        };
        build_schedule(
            ScheduleKind::Gpipe,
            partition_stages(&profile, dcs).unwrap(),
            m,
        )
        .unwrap()
    }

    /// Timeline with given start times, durations from the schedule and
    /// message arrivals equal to the consumer's start.
    fn timeline_with_starts(s: &Schedule, starts: &[f64], blocked_producers: &[usize]) -> Timeline {
        let tasks: Vec<TaskRecord> = s
            .tasks
            .iter()
            .map(|t| TaskRecord {
                task: t.id,
                ready_time: starts[t.id.0],
                start_time: starts[t.id.0],
                finish_time: starts[t.id.0] + t.compute_s,
            })
            .collect();
        let transfers = s
            .message_edges()
            .enumerate()
            .map(|(i, (from, to))| {
                let (a, b) = (s.task(from).stage, s.task(to).stage);
                TransferRecord {
                    request_id: i as u64,
                    producer: from,
                    consumer: to,
                    src_stage: a,
                    dst_stage: b,
                    src_dc: s.stages[a].dc,
                    dst_dc: s.stages[b].dc,
                    n_fs: 1,
                    first_fs: 1,
                    route: TransferRoute::IntraDc,
                    attempts: 1,
                    first_attempt_blocked: blocked_producers.contains(&from.0),
                    issue_time: tasks[from.0].finish_time,
                    complete_time: starts[to.0],
                    owner: None,
                }
            })
            .collect();
        Timeline {
            iteration: 0,
            start_offset: 0.0,
            makespan: tasks.iter().map(|t| t.finish_time).fold(0.0, f64::max),
            stage_busy: vec![3.0; s.stage_count()],
            tasks,
            transfers,
            blocking_events: Vec::new(),
            spectrum_events: Vec::new(),
        }
    }

    fn id(s: &Schedule, stage: usize, k: usize) -> usize {
        s.order[stage][k].0
    }

    #[test]
    fn waiting_on_cross_dc_message_is_cb() {
        // Two stages in different DCs, m = 1: F0@0 [0,1], F0@1 [1.5,2.5],
        // B0@1 [2.5,4.5], B0@0 [5,7].
        let s = schedule(&[0, 1], 1);
        let mut starts = vec![0.0; 4];
        starts[id(&s, 0, 0)] = 0.0;
        starts[id(&s, 1, 0)] = 1.5;
        starts[id(&s, 1, 1)] = 2.5;
        starts[id(&s, 0, 1)] = 5.0;
        let t = timeline_with_starts(&s, &starts, &[]);
        let cb = label_cb_tasks(&t, &s, 1e-6);
        assert!(!cb[id(&s, 0, 0)], "stage-0 first forward never waits on a message");
        assert!(cb[id(&s, 1, 0)]);
        assert!(!cb[id(&s, 1, 1)], "started right after its predecessor");
        assert!(cb[id(&s, 0, 1)]);
    }

    #[test]
    fn same_dc_wait_or_slack_within_epsilon_is_not_cb() {
        let s = schedule(&[3, 3], 1);
        let starts_of = |delay: f64| {
            let mut st = vec![0.0; 4];
            st[id(&s, 1, 0)] = 1.0 + delay;
            st[id(&s, 1, 1)] = 2.0 + delay;
            st[id(&s, 0, 1)] = 4.0 + 2.0 * delay;
            st
        };
        let t = timeline_with_starts(&s, &starts_of(0.5), &[]);
        assert!(label_cb_tasks(&t, &s, 1e-6).iter().all(|&b| !b));
        // Cross-DC but instantaneous: stage 1 idles only on stage 0's compute.
        let cross = schedule(&[0, 1], 1);
        let t = timeline_with_starts(&cross, &starts_of(0.0), &[]);
        assert!(label_cb_tasks(&t, &cross, 1e-6).iter().all(|&b| !b));
        let t = timeline_with_starts(&cross, &starts_of(0.5), &[]);
        let cb = label_cb_tasks(&t, &cross, 1e-6);
        assert!(cb[id(&cross, 1, 0)]);
        assert!(!cb[id(&cross, 1, 1)], "backward follows its forward directly");
        assert!(cb[id(&cross, 0, 1)]);
    }

    #[test]
    fn plan_keys_labels_per_message() {
        let s = schedule(&[0, 1, 2], 2);
        let mut labels = LabelSet::empty(s.tasks.len());
        let consumer = id(&s, 1, 0);
        let producer = id(&s, 1, 1);
        labels.cb[consumer] = true;
        labels.blocked[producer] = true;
        let cfg = OrchestratorConfig::default();
        let plan = plan_requests(&s, &labels, 0.0, &cfg);
        assert_eq!(plan.boost_factor, 2.0);
        assert!(plan.labels[consumer].cb && !plan.labels[consumer].blocked);
        // The message sent by the blocked producer goes to stage 2.
        let next = s.message_succ[producer].unwrap();
        assert!(plan.labels[next.0].blocked);
        assert_eq!(plan.labels.iter().filter(|l| l.cb).count(), 1);
        assert_eq!(plan.labels.iter().filter(|l| l.blocked).count(), 1);

        let outgoing = OrchestratorConfig {
            boost_outgoing: true,
            ..cfg
        };
        let plan = plan_requests(&s, &labels, 0.0, &outgoing);
        let sent = s.message_succ[consumer].unwrap();
        assert!(plan.labels[sent.0].cb);
    }

    #[test]
    fn boost_halves_above_threshold() {
        let cfg = OrchestratorConfig::default();
        assert_eq!(effective_boost(&cfg, 0.05), 2.0);
        assert_eq!(effective_boost(&cfg, 0.051), 1.0);
        let big = OrchestratorConfig {
            boost_factor: 3.0,
            ..cfg
        };
        assert_eq!(effective_boost(&big, 0.5), 1.5);
    }

    #[test]
    fn blocked_labels_come_from_first_attempts() {
        let s = schedule(&[0, 1], 2);
        let starts: Vec<f64> = (0..s.tasks.len()).map(|i| i as f64 * 10.0).collect();
        let p = id(&s, 0, 1);
        let t = timeline_with_starts(&s, &starts, &[p]);
        let labels = LabelSet::from_timeline(&t, &s, 1e-6);
        assert_eq!(labels.blocked_tasks().collect::<Vec<_>>(), vec![TaskId(p)]);
    }

    #[test]
    fn summary_is_mean_of_measured() {
        let mk = |iteration, measured, makespan_s, blocked| IterationStats {
            iteration,
            measured,
            makespan_s,
            bubble_ratio: 0.5,
            requests: 10,
            blocked,
            blocking_probability: blocked as f64 / 10.0,
            fallbacks: 0,
        };
        let s = RunSummary::from_iterations(vec![mk(0, false, 100.0, 9), mk(1, true, 2.0, 1), mk(2, true, 4.0, 2)]);
        assert_eq!(s.runtime_s, 3.0);
        assert_eq!(s.blocked, 1.5);
        assert!((s.blocking_probability - 0.15).abs() < 1e-12);
    }

    #[test]
    fn config_validation_names_keys() {
        let bad = OrchestratorConfig {
            n_iterations: 1,
            ..OrchestratorConfig::default()
        };
        match bad.validate() {
            Err(Error::InvalidParameter { key, .. }) => assert_eq!(key, "cba.n_iterations"),
            other => panic!("{other:?}"),
        }
    }
}
