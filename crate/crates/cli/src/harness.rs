//! Experiment harness: one simulated training run per [`RunKey`], grids of
//! runs in parallel, and the CSV rows they produce.
//!
//! Placement and the background-arrival stream depend only on the seed, so
//! every policy, model, schedule and micro-batch count with the same seed
//! sees the same datacenters and the same background requests.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use cba_core::cba::{orchestrate, IterationReport, IterationStats, LabelSet, RunSetup, RunSummary};
use cba_core::engine::log::{write_timeline, SpectrumAudit};
use cba_core::engine::Timeline;
use cba_core::rsa::{CandidateCache, Policy};
use cba_core::topology::NodeId;
use cba_core::workload::{build_schedule, partition_stages, random_placement, Schedule, ScheduleKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, RunConfig};
use crate::output::{deltas, summarize, CompareRow, ResultRow, RowKind};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("simulation failed: {0}")]
    Engine(#[from] cba_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RunKey {
    pub policy: Policy,
    pub model: String,
    pub schedule: ScheduleKind,
    pub microbatches: usize,
    pub seed: u64,
}

impl RunKey {
    /// File-name friendly identifier.
    pub fn label(&self) -> String {
        format!(
            "{}_{}_{}_m{}_s{}",
            self.policy, self.model, self.schedule, self.microbatches, self.seed
        )
    }
}

const PLACEMENT_STREAM: u64 = 1;
const BACKGROUND_STREAM: u64 = 2;

/// Independent stream seed for `(seed, stream)` (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stage-to-DC placement for `seed`.
pub fn placement(cfg: &RunConfig, dcs: &[NodeId], seed: u64) -> Vec<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, PLACEMENT_STREAM));
    random_placement(dcs, cfg.p, &mut rng)
}

/// What to record while a run executes.
#[derive(Debug, Clone, Default)]
pub struct Instrumentation {
    /// SHA-256 of the full event log.
    pub digest: bool,
    /// Replay spectrum lines through [`SpectrumAudit`].
    pub audit: bool,
    /// Check every CB label against the raw timeline records.
    pub check_labels: bool,
    /// Write `<label>.log` files here.
    pub log_dir: Option<PathBuf>,
}

impl Instrumentation {
    pub fn full() -> Self {
        Self {
            digest: true,
            audit: true,
            check_labels: true,
            log_dir: None,
        }
    }

    fn needs_log(&self) -> bool {
        self.digest || self.audit || self.log_dir.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditOutcome {
    pub allocations: usize,
    pub releases: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelCheck {
    pub cb_labels: usize,
    pub violations: usize,
    pub first_violation: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub key: RunKey,
    pub placement: Vec<NodeId>,
    pub summary: RunSummary,
    pub log_sha256: Option<String>,
    pub log_lines: u64,
    pub audit: Option<AuditOutcome>,
    pub labels: Option<LabelCheck>,
}

impl RunArtifacts {
    pub fn rows(&self) -> impl Iterator<Item = ResultRow> + '_ {
        self.summary
            .iterations
            .iter()
            .filter(|s| s.measured)
            .map(|s| stats_row(&self.key, s))
    }
}

fn stats_row(key: &RunKey, s: &IterationStats) -> ResultRow {
    ResultRow {
        kind: RowKind::Row,
        policy: key.policy,
        model: key.model.clone(),
        schedule: key.schedule,
        microbatches: key.microbatches,
        seed: Some(key.seed),
        iteration: Some(s.iteration),
        runtime_s: s.makespan_s,
        bubble_ratio: s.bubble_ratio,
        requests: s.requests as f64,
        blocked: s.blocked as f64,
        blocking_prob: s.blocking_probability,
    }
}

/// Checks a CB label from the records alone: the stage idled more than
/// `epsilon_s` and the last prerequisite to arrive was a cross-DC message
/// that arrived after its producer finished.
pub fn label_violation(timeline: &Timeline, schedule: &Schedule, task: usize, epsilon_s: f64) -> Option<String> {
    let t = &schedule.tasks[task];
    let rec = &timeline.tasks[task];
    let prev = t.stage_pred.map_or(0.0, |p| timeline.tasks[p.0].finish_time);
    if !(rec.start_time - prev > epsilon_s) {
        return Some(format!("task {task}: idle gap {} not above ε", rec.start_time - prev));
    }
    let Some(x) = timeline.transfers.iter().find(|x| x.consumer.0 == task) else {
        return Some(format!("task {task}: CB without an incoming message"));
    };
    if x.src_dc == x.dst_dc {
        return Some(format!("task {task}: incoming message is intra-DC"));
    }
    if x.complete_time != rec.start_time || x.complete_time < prev {
        return Some(format!("task {task}: message was not the binding prerequisite"));
    }
    if !(x.complete_time - timeline.tasks[x.producer.0].finish_time > 0.0) {
        return Some(format!("task {task}: message added no delay"));
    }
    None
}

/// Runs one configuration cell for one seed.
pub fn execute(cfg: &RunConfig, key: &RunKey, instr: &Instrumentation) -> Result<RunArtifacts, HarnessError> {
    let mut net = cfg.network()?;
    let dcs = cfg.dc_nodes(&net)?;
    let placement = placement(cfg, &dcs, key.seed);
    if instr.needs_log() {
        net.enable_event_log();
    }
    if let Some(model) = cfg.background_model(derive_seed(key.seed, BACKGROUND_STREAM)) {
        net.set_background(model)?;
    }
    let profile = cfg.profile(&key.model)?;
    let stages = partition_stages(&profile, &placement)?;
    let mut schedule = build_schedule(key.schedule, stages, key.microbatches)?;
    let mut cache = CandidateCache::new(cfg.rsa(), cfg.latency());
    let latency = cfg.latency();
    let engine = cfg.engine();
    let orch = cfg.orchestrator();

    let mut hasher = instr.digest.then(Sha256::new);
    let mut audit = instr
        .audit
        .then(|| (SpectrumAudit::new(net.links().len(), net.fs_total()), None::<String>));
    let mut file = match &instr.log_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join(format!("{}.log", key.label())))?))
        }
        None => None,
    };
    let mut io_error = None;
    let mut label_check = instr.check_labels.then(LabelCheck::default);
    let mut lines = 0u64;
    let mut buf = Vec::new();

    let observer = |report: &IterationReport<'_>| -> cba_core::Result<()> {
        if instr.needs_log() {
            buf.clear();
            write_labels(&mut buf, report.timeline.iteration, report.labels);
            write_timeline(&mut buf, report.timeline, report.schedule).expect("write into memory");
            lines += buf.iter().filter(|&&b| b == b'\n').count() as u64;
            if let Some(h) = hasher.as_mut() {
                h.update(&buf);
            }
            if let Some((auditor, error)) = audit.as_mut() {
                if error.is_none() {
                    let text = std::str::from_utf8(&buf).expect("log is UTF-8");
                    for line in text.lines() {
                        if line.starts_with("SPEC_") || line.starts_with("ITER_END") {
                            if let Err(e) = auditor.feed_line(line) {
                                *error = Some(e);
                                break;
                            }
                        }
                    }
                }
            }
            if let Some(f) = file.as_mut() {
                if io_error.is_none() {
                    if let Err(e) = f.write_all(&buf) {
                        io_error = Some(e);
                    }
                }
            }
        }
        if let Some(check) = label_check.as_mut() {
            let fresh = LabelSet::from_timeline(report.timeline, report.schedule, orch.epsilon_s);
            for task in fresh.cb_tasks() {
                check.cb_labels += 1;
                if let Some(v) = label_violation(report.timeline, report.schedule, task.0, orch.epsilon_s) {
                    check.violations += 1;
                    check.first_violation.get_or_insert(v);
                }
            }
        }
        Ok(())
    };

    let summary = orchestrate(
        RunSetup {
            net: &mut net,
            schedule: &mut schedule,
            cache: &mut cache,
            latency: &latency,
            engine: &engine,
            policy: key.policy,
            msg_bits: profile.msg_bits(),
        },
        &orch,
        observer,
    )?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    if let Some(mut f) = file {
        f.flush()?;
    }
    Ok(RunArtifacts {
        key: key.clone(),
        placement,
        summary,
        log_sha256: hasher.map(|h| hex::encode(h.finalize())),
        log_lines: lines,
        audit: audit.map(|(a, error)| AuditOutcome {
            allocations: a.allocations,
            releases: a.releases,
            error,
        }),
        labels: label_check,
    })
}

fn write_labels(buf: &mut Vec<u8>, iteration: usize, labels: &LabelSet) {
    let mut s = String::new();
    for (task, (&cb, &blocked)) in labels.cb.iter().zip(&labels.blocked).enumerate() {
        if cb || blocked {
            writeln!(s, "LABEL {iteration} {task} {} {}", u8::from(cb), u8::from(blocked)).unwrap();
        }
    }
    buf.extend_from_slice(s.as_bytes());
}

/// Runs every key in parallel; results keep the order of `keys`.
pub fn execute_all(
    cfg: &RunConfig,
    keys: &[RunKey],
    instr: &Instrumentation,
) -> Result<Vec<RunArtifacts>, HarnessError> {
    keys.par_iter().map(|k| execute(cfg, k, instr)).collect()
}

/// Keys of `run`: the configured policy, model and schedule over every
/// micro-batch count and seed.
pub fn run_keys(cfg: &RunConfig) -> Vec<RunKey> {
    let mut keys = Vec::new();
    for &m in &cfg.microbatches {
        for &seed in &cfg.seeds {
            keys.push(RunKey {
                policy: cfg.policy,
                model: cfg.model.clone(),
                schedule: cfg.schedule,
                microbatches: m,
                seed,
            });
        }
    }
    keys
}

/// Keys of `compare`, ordered by policy, model, schedule, micro-batches,
/// seed (each in configuration order).
pub fn compare_keys(cfg: &RunConfig) -> Vec<RunKey> {
    let mut keys = Vec::new();
    for &policy in &cfg.policies {
        for model in &cfg.models {
            for &schedule in &cfg.schedules {
                for &m in &cfg.microbatches {
                    for &seed in &cfg.seeds {
                        keys.push(RunKey {
                            policy,
                            model: model.clone(),
                            schedule,
                            microbatches: m,
                            seed,
                        });
                    }
                }
            }
        }
    }
    keys
}

/// Iteration rows grouped by everything but the seed, each group followed
/// by its summary row. `runs` must be ordered with seeds innermost.
pub fn result_rows(runs: &[RunArtifacts]) -> Vec<ResultRow> {
    let mut out = Vec::new();
    let mut group: Vec<ResultRow> = Vec::new();
    let same_group = |a: &RunKey, b: &RunKey| {
        a.policy == b.policy && a.model == b.model && a.schedule == b.schedule && a.microbatches == b.microbatches
    };
    for (i, run) in runs.iter().enumerate() {
        group.extend(run.rows());
        let last = runs.get(i + 1).is_none_or(|next| !same_group(&run.key, &next.key));
        if last {
            let summary = summarize(&group);
            out.append(&mut group);
            out.push(summary);
        }
    }
    out
}

/// Compare rows: result rows plus per-cell improvements over each baseline
/// on the summary rows.
pub fn compare_rows(rows: Vec<ResultRow>) -> Vec<CompareRow> {
    let summaries: Vec<ResultRow> = rows.iter().filter(|r| r.kind == RowKind::Summary).cloned().collect();
    let find = |row: &ResultRow, base: Policy| {
        summaries
            .iter()
            .find(|s| s.policy == base && s.cell() == row.cell())
            .map(|b| deltas(row, b))
    };
    rows.into_iter()
        .map(|row| match row.kind {
            RowKind::Row => CompareRow::new(row, None, None),
            RowKind::Summary => {
                let ksp = find(&row, Policy::KspFf);
                let sd = find(&row, Policy::SdFf);
                CompareRow::new(row, ksp, sd)
            }
        })
        .collect()
}

/// One line per run of the event-log digest manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigestRow {
    pub policy: Policy,
    pub model: String,
    pub schedule: ScheduleKind,
    pub microbatches: usize,
    pub seed: u64,
    pub lines: u64,
    pub sha256: String,
}

pub fn digest_rows(runs: &[RunArtifacts]) -> Vec<DigestRow> {
    runs.iter()
        .filter_map(|r| {
            r.log_sha256.as_ref().map(|h| DigestRow {
                policy: r.key.policy,
                model: r.key.model.clone(),
                schedule: r.key.schedule,
                microbatches: r.key.microbatches,
                seed: r.key.seed,
                lines: r.log_lines,
                sha256: h.clone(),
            })
        })
        .collect()
}

/// Output of `run`.
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    pub runs: Vec<RunArtifacts>,
}

pub fn cmd_run(cfg: &RunConfig, instr: &Instrumentation) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let runs = execute_all(cfg, &run_keys(cfg), instr)?;
    Ok(RunOutput {
        rows: result_rows(&runs),
        runs,
    })
}

/// Output of `compare`.
pub struct CompareOutput {
    pub rows: Vec<CompareRow>,
    pub runs: Vec<RunArtifacts>,
}

pub fn cmd_compare(cfg: &RunConfig, instr: &Instrumentation) -> Result<CompareOutput, HarnessError> {
    cfg.validate()?;
    let runs = execute_all(cfg, &compare_keys(cfg), instr)?;
    Ok(CompareOutput {
        rows: compare_rows(result_rows(&runs)),
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BackgroundPreset;

    fn small() -> RunConfig {
        RunConfig {
            microbatches: vec![16],
            seeds: vec![1],
            background: BackgroundPreset::Loaded,
            bg_warmup_s: 2.0,
            ..RunConfig::default()
        }
    }

    #[test]
    fn run_emits_ten_rows_and_a_summary() {
        let out = cmd_run(&small(), &Instrumentation::default()).unwrap();
        assert_eq!(out.rows.len(), 11);
        assert_eq!(out.rows.iter().filter(|r| r.kind == RowKind::Summary).count(), 1);
        assert!(out.rows[..10].iter().all(|r| r.iteration.unwrap() >= 1));
        let two = RunConfig {
            seeds: vec![1, 2],
            ..small()
        };
        let out = cmd_run(&two, &Instrumentation::default()).unwrap();
        assert_eq!(out.rows.len(), 21);
        let mean = out.rows[..20].iter().map(|r| r.runtime_s).sum::<f64>() / 20.0;
        assert!((out.rows[20].runtime_s - mean).abs() < 1e-12);
    }

    #[test]
    fn invalid_p_names_key() {
        let cfg = RunConfig { p: 0, ..small() };
        match cmd_run(&cfg, &Instrumentation::default()) {
            Err(HarnessError::Config(e)) => assert_eq!(e.key, "p"),
            other => panic!("{:?}", other.err()),
        }
    }

    #[test]
    fn placement_depends_only_on_seed() {
        let cfg = RunConfig::default();
        let net = cfg.network().unwrap();
        let dcs = cfg.dc_nodes(&net).unwrap();
        assert_eq!(placement(&cfg, &dcs, 5), placement(&cfg, &dcs, 5));
        assert!(placement(&cfg, &dcs, 5).iter().all(|d| dcs.contains(d)));
        assert_ne!(derive_seed(5, PLACEMENT_STREAM), derive_seed(5, BACKGROUND_STREAM));
        assert_ne!(derive_seed(5, PLACEMENT_STREAM), derive_seed(6, PLACEMENT_STREAM));
    }

    #[test]
    fn compare_pairs_policies_and_self_deltas_vanish() {
        let cfg = RunConfig {
            models: vec!["llama3-8b-like".into()],
            schedules: vec![ScheduleKind::Gpipe],
            ..small()
        };
        let out = cmd_compare(&cfg, &Instrumentation::full()).unwrap();
        assert_eq!(out.runs.len(), 3);
        assert!(out.runs.iter().all(|r| r.placement == out.runs[0].placement));
        for run in &out.runs {
            let audit = run.audit.as_ref().unwrap();
            assert_eq!(audit.error, None);
            assert!(audit.allocations > 0);
            assert_eq!(run.labels.as_ref().unwrap().violations, 0);
        }
        let summaries: Vec<_> = out.rows.iter().filter(|r| r.kind == RowKind::Summary).collect();
        assert_eq!(summaries.len(), 3);
        let ksp = summaries.iter().find(|r| r.policy == Policy::KspFf).unwrap();
        assert_eq!(ksp.delta_runtime_pct_vs_ksp_ff, Some(0.0));
        assert_eq!(ksp.delta_bubble_vs_ksp_ff, Some(0.0));
        assert_eq!(ksp.delta_blocking_vs_ksp_ff, Some(0.0));
        let sd = summaries.iter().find(|r| r.policy == Policy::SdFf).unwrap();
        assert_eq!(sd.delta_runtime_pct_vs_sd_ff, Some(0.0));
        assert!(out.rows.iter().filter(|r| r.kind == RowKind::Row).all(|r| r.delta_runtime_pct_vs_ksp_ff.is_none()));
    }

    #[test]
    fn log_files_match_digest() {
        let dir = tempfile::tempdir().unwrap();
        let instr = Instrumentation {
            digest: true,
            log_dir: Some(dir.path().to_path_buf()),
            ..Instrumentation::default()
        };
        let key = &run_keys(&small())[0];
        let run = execute(&small(), key, &instr).unwrap();
        let bytes = std::fs::read(dir.path().join(format!("{}.log", key.label()))).unwrap();
        assert_eq!(run.log_sha256.unwrap(), hex::encode(Sha256::digest(&bytes)));
        assert_eq!(run.log_lines, bytes.iter().filter(|&&b| b == b'\n').count() as u64);
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("ITER_END")).count(), 11);
    }
}
