//! Self-checks against independent oracles: closed-form bubble ratios,
//! brute-force routing and spectrum assignment, exhaustive contiguity
//! indices, spectrum-log replay, determinism, label soundness and CSV
//! round trips.

use std::fmt;
use std::time::{Duration, Instant};

use cba_core::engine::{simulate_iteration, EngineParams, IterationContext, RequestPlan};
use cba_core::latency::{EgressState, LatencyParams};
use cba_core::rsa::{contiguity_index, CandidateCache, CandidatePath, CiMode, Outcome, Policy, RsaParams, SelectionResult};
use cba_core::topology::{LinkId, LinkSpec, Network, NodeId, Occupancy, SlotBlock, SpectrumConfig, TopologyFile};
use cba_core::workload::{build_schedule, partition_stages, ModelProfile, ScheduleKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{BackgroundPreset, RunConfig};
use crate::harness::{cmd_compare, digest_rows, execute, run_keys, Instrumentation};
use crate::output::{read_csv, to_csv_string, CompareRow};

/// Outcome of one check.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {} [{:.2}s]",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

/// Times `body` and wraps its verdict.
pub fn check(name: &'static str, body: impl FnOnce() -> Result<String, String>) -> Check {
    let t = Instant::now();
    let (passed, detail) = match body() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Check {
        name,
        passed,
        detail,
        elapsed: t.elapsed(),
    }
}

// ---------------------------------------------------------------- bubble

/// Bubble ratio of one zero-latency iteration with `p` equal stages versus
/// `(p-1)/(m+p-1)`. Returns the largest absolute error.
pub fn bubble_error(kind: ScheduleKind, p: usize, m: usize) -> Result<f64, String> {
    let profile = ModelProfile::preset("llama3-8b-like").map_err(|e| e.to_string())?;
    let mut net = Network::nsfnet(SpectrumConfig::default()).map_err(|e| e.to_string())?;
    let placement: Vec<NodeId> = (0..p).map(|i| i % net.node_count()).collect();
    let stages = partition_stages(&profile, &placement).map_err(|e| e.to_string())?;
    let schedule = build_schedule(kind, stages, m).map_err(|e| e.to_string())?;
    let latency = LatencyParams::zero();
    let mut cache = CandidateCache::new(RsaParams::default(), latency);
    let mut egress = EgressState::new(p);
    let plan = RequestPlan::uniform(schedule.tasks.len());
    let params = EngineParams::default();
    let mut ctx = IterationContext {
        net: &mut net,
        cache: &mut cache,
        latency: &latency,
        egress: &mut egress,
        params: &params,
        policy: Policy::Cba,
        plan: &plan,
        iteration: 0,
    };
    let t = simulate_iteration(&mut ctx, &schedule, profile.msg_bits()).map_err(|e| e.to_string())?;
    let bubble = t.bubble_ratio().map_err(|e| e.to_string())?;
    Ok((bubble - (p - 1) as f64 / (m + p - 1) as f64).abs())
}

pub fn check_bubble(p: usize, microbatches: &[usize], tol: f64) -> Check {
    check("analytic bubble", || {
        let mut worst = 0.0f64;
        for kind in [ScheduleKind::Gpipe, ScheduleKind::OneFOneB] {
            for &m in microbatches {
                let err = bubble_error(kind, p, m)?;
                if !(err <= tol) {
                    return Err(format!("{kind} p={p} m={m}: error {err:e} > {tol:e}"));
                }
                worst = worst.max(err);
            }
        }
        Ok(format!("p={p} m={microbatches:?}, max error {worst:.1e}"))
    })
}

// ---------------------------------------------------------------- CI

/// Direct summation of rising edges over the window of `mode`.
pub fn reference_ci(bits: &[bool], block: SlotBlock, mode: CiMode) -> f64 {
    let f = bits.len();
    let (start, end) = (block.start, block.end);
    let (lo, hi, denom) = match mode {
        CiMode::Literal if start == end => return 1.0,
        CiMode::Literal => (start + 1, end, end - start),
        CiMode::Window => (start.max(1), (end + 1).min(f - 1), (end - start).max(1)),
        CiMode::Global => (1, f - 1, f - 1),
    };
    let mut rises = 0usize;
    let mut j = lo;
    while j <= hi {
        if !bits[j - 1] && bits[j] {
            rises += 1;
        }
        j += 1;
    }
    (1.0 - rises as f64 / denom as f64).clamp(0.0, 1.0)
}

/// Compares `ci` with [`reference_ci`] on every occupancy of `f` slots,
/// every block and every mode. Returns the number of cases.
pub fn ci_exhaustive(
    f: usize,
    mut ci: impl FnMut(&Occupancy, SlotBlock, CiMode) -> f64,
) -> Result<usize, String> {
    let mut cases = 0;
    for mask in 0u64..1 << f {
        let occ = Occupancy::from_mask(mask, f);
        let bits: Vec<bool> = (0..f).map(|j| mask >> j & 1 == 1).collect();
        for start in 0..f {
            for end in start..f {
                let block = SlotBlock::new(start, end);
                for mode in CiMode::ALL {
                    let (got, want) = (ci(&occ, block, mode), reference_ci(&bits, block, mode));
                    if got != want {
                        return Err(format!(
                            "mask {mask:0f$b} block [{start},{end}] {}: {got} != {want}",
                            mode.as_str()
                        ));
                    }
                    cases += 1;
                }
            }
        }
    }
    Ok(cases)
}

pub fn check_ci(f: usize) -> Check {
    check("contiguity index exhaustive", || {
        ci_exhaustive(f, contiguity_index).map(|n| format!("2^{f} occupancies, {n} cases"))
    })
}

// ---------------------------------------------------------------- RSA

/// A random small network with random static occupancy.
#[derive(Debug, Clone)]
pub struct RsaInstance {
    pub net: Network,
    /// Occupancy of each link, by link id.
    pub link_bits: Vec<Vec<bool>>,
    pub src: NodeId,
    pub dst: NodeId,
    pub width: usize,
    pub params: RsaParams,
    pub latency: LatencyParams,
}

pub fn random_instance(rng: &mut impl Rng) -> RsaInstance {
    let n = rng.random_range(2..=5);
    let fs_total = rng.random_range(2..=10);
    let nodes: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
    // A random spanning tree keeps the graph connected; extra edges add
    // alternative routes.
    let parent: Vec<usize> = (1..n).map(|b| rng.random_range(0..b)).collect();
    let mut links = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if parent[b - 1] == a || rng.random_bool(0.5) {
                links.push(LinkSpec {
                    a: nodes[a].clone(),
                    b: nodes[b].clone(),
                    // Few distinct lengths, so length ties are common, and
                    // long direct links often lose to short multi-hop routes.
                    length_km: [100.0, 100.0, 200.0, 500.0][rng.random_range(0..4)],
                });
            }
        }
    }
    let spectrum = SpectrumConfig {
        fs_total,
        per_direction: rng.random_bool(0.3),
        ..SpectrumConfig::default()
    };
    let mut net = Network::from_file(&TopologyFile { name: None, nodes, links }, spectrum)
        .expect("random topology is valid");
    let density = rng.random_range(0.0..0.8);
    let mut link_bits = Vec::new();
    for l in 0..net.links().len() {
        let bits: Vec<bool> = (0..fs_total).map(|_| rng.random_bool(density)).collect();
        occupy(&mut net, LinkId(l), &bits);
        link_bits.push(bits);
    }
    let src = rng.random_range(0..n);
    let dst = (src + rng.random_range(1..n)) % n;
    let ci_mode = CiMode::ALL[rng.random_range(0..3)];
    RsaInstance {
        net,
        link_bits,
        src,
        dst,
        width: rng.random_range(1..=3),
        params: RsaParams {
            k: rng.random_range(1..=4),
            ci_mode,
            ci_per_link: rng.random_bool(0.25),
        },
        latency: LatencyParams {
            per_hop_overhead_s: [0.0, 1.0e-3, 5.0e-3][rng.random_range(0..3)],
            ..LatencyParams::default()
        },
    }
}

fn occupy(net: &mut Network, link: LinkId, bits: &[bool]) {
    let mut j = 0;
    while j < bits.len() {
        if bits[j] {
            let mut e = j;
            while e + 1 < bits.len() && bits[e + 1] {
                e += 1;
            }
            let owner = net.next_owner_id();
            net.allocate_spectrum(&[link], SlotBlock::new(j, e), owner, f64::MAX)
                .expect("free slots");
            j = e + 1;
        } else {
            j += 1;
        }
    }
}

/// Every simple `src → dst` path by depth-first search, sorted by length,
/// hops and node sequence; the first `k`.
pub fn brute_force_paths(net: &Network, src: NodeId, dst: NodeId, k: usize) -> Vec<CandidatePath> {
    fn dfs(net: &Network, dst: NodeId, nodes: &mut Vec<NodeId>, links: &mut Vec<LinkId>, out: &mut Vec<CandidatePath>) {
        let here = *nodes.last().unwrap();
        if here == dst {
            out.push(CandidatePath::new(net, nodes.clone(), links.clone()));
            return;
        }
        for &(next, link) in net.neighbours(here) {
            if !nodes.contains(&next) {
                nodes.push(next);
                links.push(link);
                dfs(net, dst, nodes, links, out);
                nodes.pop();
                links.pop();
            }
        }
    }
    let mut out = Vec::new();
    dfs(net, dst, &mut vec![src], &mut Vec::new(), &mut out);
    out.sort_by(|a, b| {
        a.length_km
            .total_cmp(&b.length_km)
            .then(a.links.len().cmp(&b.links.len()))
            .then_with(|| a.nodes.cmp(&b.nodes))
    });
    out.truncate(k);
    out
}

/// Reference evaluation of one path: aggregate by explicit OR, blocks by
/// scanning every start.
struct RefPath {
    blocks: Vec<usize>,
    ci: Vec<f64>,
    delta: f64,
}

fn reference_path(inst: &RsaInstance, path: &CandidatePath) -> RefPath {
    let f = inst.net.fs_total();
    let agg: Vec<bool> = (0..f)
        .map(|j| path.links.iter().any(|l| inst.link_bits[l.0][j]))
        .collect();
    let w = inst.width;
    let blocks: Vec<usize> = (0..f)
        .filter(|&s| s + w <= f && agg[s..s + w].iter().all(|&b| !b))
        .collect();
    let ci = blocks
        .iter()
        .map(|&s| {
            let block = SlotBlock::with_width(s, w);
            if inst.params.ci_per_link {
                path.links
                    .iter()
                    .map(|l| reference_ci(&inst.link_bits[l.0], block, inst.params.ci_mode))
                    .sum::<f64>()
                    / path.links.len() as f64
            } else {
                reference_ci(&agg, block, inst.params.ci_mode)
            }
        })
        .collect();
    let delta = 1.0 - agg.iter().filter(|&&b| b).count() as f64 / f as f64;
    RefPath { blocks, ci, delta }
}

/// Expected (path index, block start, fitness) of `policy`, or `None` if
/// the request blocks.
pub fn reference_select(inst: &RsaInstance, paths: &[CandidatePath], policy: Policy) -> Option<(usize, usize, Option<f64>)> {
    let refs: Vec<RefPath> = paths.iter().map(|p| reference_path(inst, p)).collect();
    match policy {
        Policy::KspFf => (0..paths.len()).find_map(|i| refs[i].blocks.first().map(|&s| (i, s, None))),
        Policy::SdFf => {
            let alpha = |p: &CandidatePath| {
                p.length_km * inst.latency.prop_s_per_km + p.links.len() as f64 * inst.latency.per_hop_overhead_s
            };
            let mut order: Vec<usize> = (0..paths.len()).collect();
            order.sort_by(|&a, &b| alpha(&paths[a]).total_cmp(&alpha(&paths[b])).then(a.cmp(&b)));
            order.into_iter().find_map(|i| refs[i].blocks.first().map(|&s| (i, s, None)))
        }
        Policy::Cba => {
            let mut scored: Vec<(usize, f64)> = Vec::new();
            for (i, r) in refs.iter().enumerate() {
                if r.blocks.is_empty() || r.delta <= 0.0 {
                    continue;
                }
                let mean = r.ci.iter().sum::<f64>() / r.ci.len() as f64;
                scored.push((i, mean / (paths[i].length_km * r.delta)));
            }
            let &(i, gamma) = scored.iter().min_by(|a, b| {
                b.1.total_cmp(&a.1)
                    .then(paths[a.0].length_km.total_cmp(&paths[b.0].length_km))
                    .then(paths[a.0].links.len().cmp(&paths[b.0].links.len()))
                    .then(a.0.cmp(&b.0))
            })?;
            let r = &refs[i];
            let mut best = 0;
            for j in 1..r.ci.len() {
                if r.ci[j] > r.ci[best] {
                    best = j;
                }
            }
            Some((i, r.blocks[best], Some(gamma)))
        }
    }
}

/// Policy under test: `(cache, policy, net, src, dst, width)`.
pub type Selector<'a> = dyn Fn(&mut CandidateCache, Policy, &Network, NodeId, NodeId, usize) -> SelectionResult + 'a;

pub fn production_selector(
    cache: &mut CandidateCache,
    policy: Policy,
    net: &Network,
    src: NodeId,
    dst: NodeId,
    width: usize,
) -> SelectionResult {
    cache.select(policy, net, src, dst, width)
}

/// Compares candidate lists and all three selectors with the brute-force
/// reference on `instances` random instances drawn from `seed`.
pub fn rsa_bruteforce(instances: usize, seed: u64, select: &Selector<'_>) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocked = 0;
    let mut assigned = 0;
    for n in 0..instances {
        let inst = random_instance(&mut rng);
        let want_paths = brute_force_paths(&inst.net, inst.src, inst.dst, inst.params.k);
        let mut cache = CandidateCache::new(inst.params, inst.latency);
        let got_paths = cache.routes(&inst.net, inst.src, inst.dst).paths.clone();
        let nodes = |ps: &[CandidatePath]| ps.iter().map(|p| p.nodes.clone()).collect::<Vec<_>>();
        if nodes(&got_paths) != nodes(&want_paths) {
            return Err(format!(
                "instance {n}: paths {:?} != brute force {:?}",
                nodes(&got_paths),
                nodes(&want_paths)
            ));
        }
        for policy in Policy::ALL {
            let got = select(&mut cache, policy, &inst.net, inst.src, inst.dst, inst.width);
            let want = reference_select(&inst, &want_paths, policy);
            let ok = match (&got.outcome, want) {
                (Outcome::Blocked, None) => {
                    blocked += 1;
                    true
                }
                (Outcome::Assigned { path, block, fitness }, Some((i, start, gamma))) => {
                    assigned += 1;
                    path.nodes == want_paths[i].nodes
                        && *block == SlotBlock::with_width(start, inst.width)
                        && match (fitness, gamma) {
                            (Some(a), Some(b)) => (a - b).abs() <= 1e-12 * b.abs().max(1e-300),
                            (None, None) => true,
                            _ => policy != Policy::Cba,
                        }
                }
                _ => false,
            };
            if !ok {
                return Err(format!(
                    "instance {n} ({policy}, width {}, {:?}): got {:?}, expected {:?}",
                    inst.width, inst.params, got.outcome, want
                ));
            }
        }
    }
    Ok(format!("{instances} instances, {assigned} assigned / {blocked} blocked decisions"))
}

pub fn check_rsa(instances: usize, seed: u64) -> Check {
    check("RSA brute force", || rsa_bruteforce(instances, seed, &production_selector))
}

// ---------------------------------------------------------------- runs

/// A compact configuration for end-to-end checks.
pub fn small_config() -> RunConfig {
    RunConfig {
        microbatches: vec![16],
        seeds: vec![1],
        background: BackgroundPreset::Loaded,
        bg_warmup_s: 5.0,
        ..RunConfig::default()
    }
}

/// Replays every spectrum event of a compare grid.
pub fn spectrum_audit(cfg: &RunConfig) -> Result<String, String> {
    let instr = Instrumentation {
        audit: true,
        ..Instrumentation::default()
    };
    let out = cmd_compare(cfg, &instr).map_err(|e| e.to_string())?;
    let (mut allocations, mut releases) = (0, 0);
    for run in &out.runs {
        let audit = run.audit.as_ref().expect("audit requested");
        if let Some(e) = &audit.error {
            return Err(format!("{}: {e}", run.key.label()));
        }
        if audit.allocations == 0 {
            return Err(format!("{}: no spectrum events", run.key.label()));
        }
        allocations += audit.allocations;
        releases += audit.releases;
    }
    Ok(format!(
        "{} runs, {allocations} allocations, {releases} releases",
        out.runs.len()
    ))
}

/// Two compare runs give identical CSV bytes and event-log digests.
pub fn determinism(cfg: &RunConfig) -> Result<String, String> {
    let instr = Instrumentation {
        digest: true,
        ..Instrumentation::default()
    };
    let a = cmd_compare(cfg, &instr).map_err(|e| e.to_string())?;
    let b = cmd_compare(cfg, &instr).map_err(|e| e.to_string())?;
    let (ca, cb) = (to_csv_string(&a.rows), to_csv_string(&b.rows));
    if ca != cb {
        return Err("compare CSV differs between runs".into());
    }
    let (da, db) = (digest_rows(&a.runs), digest_rows(&b.runs));
    if da != db {
        return Err("event-log digests differ between runs".into());
    }
    Ok(format!("{} rows, {} logs identical", a.rows.len(), da.len()))
}

/// Every CB label agrees with the raw records under load, and none appear
/// without communication latency.
pub fn label_soundness(cfg: &RunConfig) -> Result<String, String> {
    let instr = Instrumentation {
        check_labels: true,
        ..Instrumentation::default()
    };
    let mut labels = 0;
    for policy in Policy::ALL {
        for key in run_keys(&RunConfig { policy, ..cfg.clone() }) {
            let run = execute(cfg, &key, &instr).map_err(|e| e.to_string())?;
            let check = run.labels.expect("label check requested");
            if let Some(v) = check.first_violation {
                return Err(format!("{}: {v}", key.label()));
            }
            labels += check.cb_labels;
        }
    }
    let zero = RunConfig {
        prop_s_per_km: 0.0,
        per_hop_overhead_s: 0.0,
        fs_rate_bps: f64::INFINITY,
        intra_dc_latency_s: 0.0,
        intra_dc_rate_bps: f64::INFINITY,
        queue_penalty_per_conflict_s: 0.0,
        background: BackgroundPreset::Off,
        ..cfg.clone()
    };
    for schedule in [ScheduleKind::Gpipe, ScheduleKind::OneFOneB] {
        let zcfg = RunConfig { schedule, ..zero.clone() };
        for key in run_keys(&zcfg) {
            let run = execute(&zcfg, &key, &instr).map_err(|e| e.to_string())?;
            let n = run.labels.expect("label check requested").cb_labels;
            if n != 0 {
                return Err(format!("{}: {n} CB labels without latency", key.label()));
            }
        }
    }
    Ok(format!("{labels} CB labels checked; none at zero latency"))
}

/// Compare rows survive a CSV write and read unchanged.
pub fn csv_round_trip(cfg: &RunConfig) -> Result<String, String> {
    let out = cmd_compare(cfg, &Instrumentation::default()).map_err(|e| e.to_string())?;
    let text = to_csv_string(&out.rows);
    let back: Vec<CompareRow> = read_csv(text.as_bytes()).map_err(|e| e.to_string())?;
    if back != out.rows {
        return Err("rows changed across a CSV round trip".into());
    }
    Ok(format!("{} rows", back.len()))
}

/// The full suite with default sizes.
pub fn run_all() -> Vec<Check> {
    let cfg = small_config();
    vec![
        check_bubble(8, &[16, 32, 64, 128], 1e-9),
        check_rsa(1000, 0x5eed),
        check_ci(10),
        check("spectrum audit", || spectrum_audit(&cfg)),
        check("determinism", || determinism(&cfg)),
        check("label soundness", || label_soundness(&cfg)),
        check("CSV round trip", || csv_round_trip(&cfg)),
    ]
}
