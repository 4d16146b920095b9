//! Pipeline-parallel training workloads: model profiles, stage partitioning
//! and GPipe / 1F1B task graphs.

use std::fmt;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::NodeId;

const MIB: u64 = 1 << 20;

/// Per-layer timing and activation size of a model.
///
/// The named presets are stand-ins that only preserve orderings: the larger
/// model is slower per layer, has more layers and bigger activations, and
/// backward costs twice forward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub name: String,
    pub n_layers: usize,
    pub fwd_time_per_layer_s: f64,
    pub bwd_time_per_layer_s: f64,
    pub msg_bytes_per_microbatch: u64,
}

impl ModelProfile {
    pub const PRESETS: [&'static str; 2] = ["llama3-8b-like", "llama3-70b-like"];

    pub fn preset(name: &str) -> Result<Self> {
        let (n_layers, fwd, bwd, mib) = match name {
            "llama3-8b-like" => (32, 2.0e-3, 4.0e-3, 16),
            "llama3-70b-like" => (80, 6.0e-3, 12.0e-3, 32),
            _ => return Err(Error::UnknownProfile(name.to_string())),
        };
        Ok(Self {
            name: name.to_string(),
            n_layers,
            fwd_time_per_layer_s: fwd,
            bwd_time_per_layer_s: bwd,
            msg_bytes_per_microbatch: mib * MIB,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::invalid("model.n_layers", "must be positive"));
        }
        for (key, v) in [
            ("model.fwd_time_per_layer_s", self.fwd_time_per_layer_s),
            ("model.bwd_time_per_layer_s", self.bwd_time_per_layer_s),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(key, format!("{v} must be positive")));
            }
        }
        if self.msg_bytes_per_microbatch == 0 {
            return Err(Error::invalid("model.msg_bytes_per_microbatch", "must be positive"));
        }
        Ok(())
    }

    /// Backward at least as expensive as forward, the usual relationship.
    pub fn has_conventional_costs(&self) -> bool {
        self.bwd_time_per_layer_s >= self.fwd_time_per_layer_s
    }

    pub fn msg_bits(&self) -> f64 {
        self.msg_bytes_per_microbatch as f64 * 8.0
    }
}

/// Resolves a preset name, or validates and returns an explicit profile.
pub fn build_profile(name: &str, explicit: Option<ModelProfile>) -> Result<ModelProfile> {
    match explicit {
        Some(profile) => {
            profile.validate()?;
            Ok(profile)
        }
        None => ModelProfile::preset(name),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub id: usize,
    pub dc: NodeId,
    pub layers: Range<usize>,
    pub fwd_compute_s: f64,
    pub bwd_compute_s: f64,
}

/// Contiguous near-equal layer split; the first `n_layers % p` stages take
/// one extra layer.
pub fn partition_stages(profile: &ModelProfile, placement: &[NodeId]) -> Result<Vec<Stage>> {
    let p = placement.len();
    if p == 0 {
        return Err(Error::invalid("p", "at least one stage is required"));
    }
    if p > profile.n_layers {
        return Err(Error::TooManyStages {
            n_layers: profile.n_layers,
            stages: p,
        });
    }
    let base = profile.n_layers / p;
    let extra = profile.n_layers % p;
    let mut start = 0;
    Ok(placement
        .iter()
        .enumerate()
        .map(|(id, &dc)| {
            let count = base + usize::from(id < extra);
            let layers = start..start + count;
            start += count;
            Stage {
                id,
                dc,
                layers,
                fwd_compute_s: profile.fwd_time_per_layer_s * count as f64,
                bwd_compute_s: profile.bwd_time_per_layer_s * count as f64,
            }
        })
        .collect())
}

/// Independent uniform draws of a datacenter per stage.
pub fn random_placement<R: Rng>(dcs: &[NodeId], stages: usize, rng: &mut R) -> Vec<NodeId> {
    assert!(!dcs.is_empty(), "placement needs at least one datacenter");
    (0..stages).map(|_| dcs[rng.random_range(0..dcs.len())]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Gpipe,
    #[serde(rename = "1f1b", alias = "one_f_one_b")]
    OneFOneB,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 2] = [ScheduleKind::Gpipe, ScheduleKind::OneFOneB];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleKind::Gpipe => "gpipe",
            ScheduleKind::OneFOneB => "1f1b",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "gpipe" => Ok(ScheduleKind::Gpipe),
            "1f1b" | "one_f_one_b" => Ok(ScheduleKind::OneFOneB),
            _ => Err(format!("unknown schedule `{s}` (expected gpipe or 1f1b)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskId(pub usize);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn tag(&self) -> char {
        match self {
            Direction::Forward => 'F',
            Direction::Backward => 'B',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: TaskId,
    pub stage: usize,
    pub microbatch: usize,
    pub direction: Direction,
    pub compute_s: f64,
    /// Previous task in the stage's execution order.
    pub stage_pred: Option<TaskId>,
    /// Producer of the activation or gradient this task consumes.
    pub message_pred: Option<TaskId>,
    pub cb_label: bool,
    pub blocked_flag: bool,
}

impl Task {
    pub fn deps(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.stage_pred.into_iter().chain(self.message_pred)
    }
}

/// A task DAG together with each stage's execution order.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub stages: Vec<Stage>,
    pub microbatches: usize,
    pub tasks: Vec<Task>,
    /// Task ids per stage in execution order.
    pub order: Vec<Vec<TaskId>>,
    /// Consumer of each task's outgoing message, indexed by producer id.
    pub message_succ: Vec<Option<TaskId>>,
}

impl Schedule {
    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn task(&self, id: TaskId) -> &Task {
        &self.tasks[id.0]
    }

    pub fn message_edges(&self) -> impl Iterator<Item = (TaskId, TaskId)> + '_ {
        self.message_succ
            .iter()
            .enumerate()
            .filter_map(|(p, c)| c.map(|c| (TaskId(p), c)))
    }

    /// Kahn's algorithm over all dependency edges; `None` on a cycle.
    pub fn topological_order(&self) -> Option<Vec<TaskId>> {
        let n = self.tasks.len();
        let mut indegree = vec![0usize; n];
        let mut succ = vec![Vec::new(); n];
        for t in &self.tasks {
            for d in t.deps() {
                indegree[t.id.0] += 1;
                succ[d.0].push(t.id);
            }
        }
        let mut ready: Vec<TaskId> = (0..n).filter(|&i| indegree[i] == 0).map(TaskId).collect();
        let mut out = Vec::with_capacity(n);
        while let Some(t) = ready.pop() {
            out.push(t);
            for &s in &succ[t.0] {
                indegree[s.0] -= 1;
                if indegree[s.0] == 0 {
                    ready.push(s);
                }
            }
        }
        (out.len() == n).then_some(out)
    }
}

/// Per-stage action sequence `(direction, microbatch)`.
fn stage_sequence(kind: ScheduleKind, p: usize, stage: usize, m: usize) -> Vec<(Direction, usize)> {
    use Direction::{Backward, Forward};
    match kind {
        ScheduleKind::Gpipe => (0..m)
            .map(|i| (Forward, i))
            .chain((0..m).rev().map(|i| (Backward, i)))
            .collect(),
        ScheduleKind::OneFOneB => {
            let warmup = m.min(p - 1 - stage);
            let mut seq = Vec::with_capacity(2 * m);
            seq.extend((0..warmup).map(|i| (Forward, i)));
            let mut next_bwd = 0;
            for i in warmup..m {
                seq.push((Forward, i));
                seq.push((Backward, next_bwd));
                next_bwd += 1;
            }
            seq.extend((next_bwd..m).map(|i| (Backward, i)));
            seq
        }
    }
}

/// Builds the `2·p·m` task DAG. Task ids are assigned stage by stage in
/// execution order.
pub fn build_schedule(kind: ScheduleKind, stages: Vec<Stage>, microbatches: usize) -> Result<Schedule> {
    if microbatches == 0 {
        return Err(Error::invalid("microbatches", "must be at least 1"));
    }
    let p = stages.len();
    let m = microbatches;
    let mut tasks = Vec::with_capacity(2 * p * m);
    let mut order = Vec::with_capacity(p);
    // index[stage][dir][mb]
    let mut index = vec![[vec![TaskId(0); m], vec![TaskId(0); m]]; p];
    for stage in &stages {
        let mut ids = Vec::with_capacity(2 * m);
        let mut prev = None;
        for (direction, mb) in stage_sequence(kind, p, stage.id, m) {
            let id = TaskId(tasks.len());
            let compute_s = match direction {
                Direction::Forward => stage.fwd_compute_s,
                Direction::Backward => stage.bwd_compute_s,
            };
            tasks.push(Task {
                id,
                stage: stage.id,
                microbatch: mb,
                direction,
                compute_s,
                stage_pred: prev,
                message_pred: None,
                cb_label: false,
                blocked_flag: false,
            });
            index[stage.id][direction as usize][mb] = id;
            ids.push(id);
            prev = Some(id);
        }
        order.push(ids);
    }
    let mut message_succ = vec![None; tasks.len()];
    for s in 0..p {
        for mb in 0..m {
            if s > 0 {
                let (from, to) = (index[s - 1][0][mb], index[s][0][mb]);
                tasks[to.0].message_pred = Some(from);
                message_succ[from.0] = Some(to);
            }
            if s + 1 < p {
                let (from, to) = (index[s + 1][1][mb], index[s][1][mb]);
                tasks[to.0].message_pred = Some(from);
                message_succ[from.0] = Some(to);
            }
        }
    }
    let schedule = Schedule {
        kind,
        stages,
        microbatches,
        tasks,
        order,
        message_succ,
    };
    debug_assert!(schedule.topological_order().is_some());
    Ok(schedule)
}
