//! CSV result rows.

use std::io::{Read, Write};

use cba_core::rsa::Policy;
use cba_core::workload::ScheduleKind;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    /// One measured iteration of one run.
    Row,
    /// Mean over the measured iterations and seeds of a group.
    Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub kind: RowKind,
    pub policy: Policy,
    pub model: String,
    pub schedule: ScheduleKind,
    pub microbatches: usize,
    pub seed: Option<u64>,
    pub iteration: Option<usize>,
    pub runtime_s: f64,
    pub bubble_ratio: f64,
    pub requests: f64,
    pub blocked: f64,
    pub blocking_prob: f64,
}

impl ResultRow {
    pub fn cell(&self) -> (ScheduleKind, &str, usize) {
        (self.schedule, self.model.as_str(), self.microbatches)
    }
}

/// Mean of `rows` as a summary row; `blocking_prob` pools the counts.
pub fn summarize(rows: &[ResultRow]) -> ResultRow {
    let first = rows.first().expect("summary of an empty group");
    let n = rows.len() as f64;
    let mean = |f: fn(&ResultRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let requests = mean(|r| r.requests);
    let blocked = mean(|r| r.blocked);
    ResultRow {
        kind: RowKind::Summary,
        policy: first.policy,
        model: first.model.clone(),
        schedule: first.schedule,
        microbatches: first.microbatches,
        seed: None,
        iteration: None,
        runtime_s: mean(|r| r.runtime_s),
        bubble_ratio: mean(|r| r.bubble_ratio),
        requests,
        blocked,
        blocking_prob: if requests > 0.0 { blocked / requests } else { 0.0 },
    }
}

/// A result row with paired improvements over each baseline in the same
/// cell. Filled on summary rows only:
/// `Δruntime% = (base − policy) / base · 100`, `Δbubble = base − policy`,
/// `Δblocking = base − policy` (positive means the policy is better).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub kind: RowKind,
    pub policy: Policy,
    pub model: String,
    pub schedule: ScheduleKind,
    pub microbatches: usize,
    pub seed: Option<u64>,
    pub iteration: Option<usize>,
    pub runtime_s: f64,
    pub bubble_ratio: f64,
    pub requests: f64,
    pub blocked: f64,
    pub blocking_prob: f64,
    pub delta_runtime_pct_vs_ksp_ff: Option<f64>,
    pub delta_bubble_vs_ksp_ff: Option<f64>,
    pub delta_blocking_vs_ksp_ff: Option<f64>,
    pub delta_runtime_pct_vs_sd_ff: Option<f64>,
    pub delta_bubble_vs_sd_ff: Option<f64>,
    pub delta_blocking_vs_sd_ff: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deltas {
    pub runtime_pct: f64,
    pub bubble: f64,
    pub blocking: f64,
}

pub fn deltas(policy: &ResultRow, base: &ResultRow) -> Deltas {
    Deltas {
        runtime_pct: (base.runtime_s - policy.runtime_s) / base.runtime_s * 100.0,
        bubble: base.bubble_ratio - policy.bubble_ratio,
        blocking: base.blocking_prob - policy.blocking_prob,
    }
}

impl CompareRow {
    pub fn new(row: ResultRow, vs_ksp: Option<Deltas>, vs_sd: Option<Deltas>) -> Self {
        Self {
            kind: row.kind,
            policy: row.policy,
            model: row.model,
            schedule: row.schedule,
            microbatches: row.microbatches,
            seed: row.seed,
            iteration: row.iteration,
            runtime_s: row.runtime_s,
            bubble_ratio: row.bubble_ratio,
            requests: row.requests,
            blocked: row.blocked,
            blocking_prob: row.blocking_prob,
            delta_runtime_pct_vs_ksp_ff: vs_ksp.map(|d| d.runtime_pct),
            delta_bubble_vs_ksp_ff: vs_ksp.map(|d| d.bubble),
            delta_blocking_vs_ksp_ff: vs_ksp.map(|d| d.blocking),
            delta_runtime_pct_vs_sd_ff: vs_sd.map(|d| d.runtime_pct),
            delta_bubble_vs_sd_ff: vs_sd.map(|d| d.bubble),
            delta_blocking_vs_sd_ff: vs_sd.map(|d| d.blocking),
        }
    }

    pub fn result(&self) -> ResultRow {
        ResultRow {
            kind: self.kind,
            policy: self.policy,
            model: self.model.clone(),
            schedule: self.schedule,
            microbatches: self.microbatches,
            seed: self.seed,
            iteration: self.iteration,
            runtime_s: self.runtime_s,
            bubble_ratio: self.bubble_ratio,
            requests: self.requests,
            blocked: self.blocked,
            blocking_prob: self.blocking_prob,
        }
    }
}

pub fn write_csv<T: Serialize, W: Write>(out: W, rows: &[T]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv_string<T: Serialize>(rows: &[T]) -> String {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows).expect("CSV into memory");
    String::from_utf8(buf).expect("CSV is UTF-8")
}

pub fn read_csv<T: for<'de> Deserialize<'de>, R: Read>(input: R) -> csv::Result<Vec<T>> {
    csv::Reader::from_reader(input).deserialize().collect()
}
