//! Routing and spectrum assignment.
//!
//! Candidate paths come from [`k_shortest_paths`]. For a request of `width`
//! slots, the candidate blocks `B` of a path are every free run start in the
//! path-aggregate occupancy. The fitness of a path is
//!
//! ```text
//! Γ = avail / (L · δ) · mean_{b ∈ B} CI(b),    δ = 1 - occupied / F
//! ```
//!
//! with `avail = 1` iff `B` is nonempty and `δ > 0`. Three selectors share
//! this machinery: the fitness-based selector and the KSP / shortest-delay
//! first-fit baselines. None of them mutate the network.

mod contiguity;
mod ksp;

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use contiguity::{contiguity_index, CiMode, ContiguityScan};
pub use ksp::{k_shortest_paths, CandidatePath};

use crate::latency::{self, LatencyParams};
use crate::topology::{first_fit, Network, NodeId, Occupancy, SlotBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Cba,
    KspFf,
    SdFf,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Cba, Policy::KspFf, Policy::SdFf];

    pub fn as_str(&self) -> &'static str {
        match self {
            Policy::Cba => "cba",
            Policy::KspFf => "ksp_ff",
            Policy::SdFf => "sd_ff",
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Policy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown policy `{s}` (expected cba, ksp_ff or sd_ff)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RsaParams {
    pub k: usize,
    pub ci_mode: CiMode,
    /// Score each block by the mean of its per-link indices instead of the
    /// index on the path-aggregate occupancy.
    pub ci_per_link: bool,
}

impl Default for RsaParams {
    fn default() -> Self {
        Self {
            k: 5,
            ci_mode: CiMode::Window,
            ci_per_link: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Assigned {
        path: CandidatePath,
        block: SlotBlock,
        /// Γ of the chosen path; first-fit selectors do not compute it.
        fitness: Option<f64>,
    },
    Blocked,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub outcome: Outcome,
    pub candidates_examined: usize,
}

impl SelectionResult {
    pub fn is_blocked(&self) -> bool {
        matches!(self.outcome, Outcome::Blocked)
    }
}

/// Every start `f` whose `width`-slot block is free on all links of `path`.
pub fn find_candidate_blocks(net: &Network, path: &CandidatePath, width: usize) -> Vec<SlotBlock> {
    free_blocks(&net.aggregate(&path.links), width)
}

/// Free blocks of `width` in ascending start order.
pub fn free_blocks(occupancy: &Occupancy, width: usize) -> Vec<SlotBlock> {
    let mut out = Vec::new();
    if width == 0 || width > occupancy.len() {
        return out;
    }
    let mut run = 0;
    for j in 0..occupancy.len() {
        if occupancy.get(j) {
            run = 0;
        } else {
            run += 1;
            if run >= width {
                out.push(SlotBlock::with_width(j + 1 - width, width));
            }
        }
    }
    out
}

/// `δ = 1 - occupied / F` on the path-aggregate occupancy.
pub fn availability_factor(net: &Network, path: &CandidatePath) -> f64 {
    delta(&net.aggregate(&path.links))
}

fn delta(aggregate: &Occupancy) -> f64 {
    1.0 - aggregate.count_occupied() as f64 / aggregate.len() as f64
}

/// Γ of `path` for a `width`-slot request on the aggregate occupancy.
pub fn fitness(net: &Network, path: &CandidatePath, width: usize, mode: CiMode) -> f64 {
    let params = RsaParams {
        ci_mode: mode,
        ..RsaParams::default()
    };
    evaluate(net, path, width, &params).map_or(0.0, |e| e.fitness)
}

/// Fitness and best block of one available path.
#[derive(Debug, Clone, Copy)]
struct PathScore {
    fitness: f64,
    best_block: SlotBlock,
}

/// `None` when the path is unavailable (`B` empty or `δ = 0`).
fn evaluate(net: &Network, path: &CandidatePath, width: usize, params: &RsaParams) -> Option<PathScore> {
    let aggregate = net.aggregate(&path.links);
    let blocks = free_blocks(&aggregate, width);
    let delta = delta(&aggregate);
    if blocks.is_empty() || delta <= 0.0 {
        return None;
    }
    let scores: Vec<f64> = if params.ci_per_link {
        let scans: Vec<ContiguityScan> = path
            .links
            .iter()
            .map(|&l| ContiguityScan::new(net.link(l).occupancy()))
            .collect();
        blocks
            .iter()
            .map(|&b| scans.iter().map(|s| s.index(b, params.ci_mode)).sum::<f64>() / scans.len() as f64)
            .collect()
    } else {
        let scan = ContiguityScan::new(&aggregate);
        blocks.iter().map(|&b| scan.index(b, params.ci_mode)).collect()
    };
    let mean_ci = scores.iter().sum::<f64>() / scores.len() as f64;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Some(PathScore {
        fitness: mean_ci / (path.length_km * delta),
        best_block: blocks[best],
    })
}

/// Fitness-based selection over an explicit candidate list.
///
/// The available path with the highest Γ wins; ties go to the shorter path,
/// then fewer hops, then the earlier candidate. Within it, the block with the
/// highest index wins, ties to the lowest start. A path whose blocks all
/// score zero CI is still selectable: blocking means no candidate has any
/// feasible block.
pub fn select_cba_among(
    net: &Network,
    candidates: &[CandidatePath],
    width: usize,
    params: &RsaParams,
) -> SelectionResult {
    let mut best: Option<(usize, PathScore)> = None;
    for (i, path) in candidates.iter().enumerate() {
        let Some(score) = evaluate(net, path, width, params) else {
            continue;
        };
        let wins = match &best {
            None => true,
            Some((j, incumbent)) => {
                let other = &candidates[*j];
                score
                    .fitness
                    .total_cmp(&incumbent.fitness)
                    .reverse()
                    .then(path.length_km.total_cmp(&other.length_km))
                    .then(path.hop_count().cmp(&other.hop_count()))
                    .then(i.cmp(j))
                    == Ordering::Less
            }
        };
        if wins {
            best = Some((i, score));
        }
    }
    let outcome = match best {
        Some((i, score)) => Outcome::Assigned {
            path: candidates[i].clone(),
            block: score.best_block,
            fitness: Some(score.fitness),
        },
        None => Outcome::Blocked,
    };
    SelectionResult {
        outcome,
        candidates_examined: candidates.len(),
    }
}

/// First-fit over candidates visited in the given `order`.
pub fn select_first_fit_among(
    net: &Network,
    candidates: &[CandidatePath],
    order: impl IntoIterator<Item = usize>,
    width: usize,
) -> SelectionResult {
    let mut examined = 0;
    for i in order {
        examined += 1;
        let path = &candidates[i];
        if let Some(start) = first_fit(&net.aggregate(&path.links), width) {
            return SelectionResult {
                outcome: Outcome::Assigned {
                    path: path.clone(),
                    block: SlotBlock::with_width(start, width),
                    fitness: None,
                },
                candidates_examined: examined,
            };
        }
    }
    SelectionResult {
        outcome: Outcome::Blocked,
        candidates_examined: examined,
    }
}

/// Candidate indices sorted by ascending propagation term α; ties keep KSP order.
pub fn alpha_order(candidates: &[CandidatePath], latency: &LatencyParams) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        latency::alpha(latency, &candidates[a])
            .total_cmp(&latency::alpha(latency, &candidates[b]))
            .then(a.cmp(&b))
    });
    order
}

pub fn select_cba(
    net: &Network,
    src: NodeId,
    dst: NodeId,
    width: usize,
    k: usize,
    mode: CiMode,
) -> SelectionResult {
    let candidates = k_shortest_paths(net, src, dst, k);
    let params = RsaParams {
        k,
        ci_mode: mode,
        ci_per_link: false,
    };
    select_cba_among(net, &candidates, width, &params)
}

pub fn select_ksp_ff(net: &Network, src: NodeId, dst: NodeId, width: usize, k: usize) -> SelectionResult {
    let candidates = k_shortest_paths(net, src, dst, k);
    select_first_fit_among(net, &candidates, 0..candidates.len(), width)
}

pub fn select_sd_ff(
    net: &Network,
    src: NodeId,
    dst: NodeId,
    width: usize,
    k: usize,
    latency: &LatencyParams,
) -> SelectionResult {
    let candidates = k_shortest_paths(net, src, dst, k);
    let order = alpha_order(&candidates, latency);
    select_first_fit_among(net, &candidates, order, width)
}

/// Candidate paths between one node pair, with the SD-FF visiting order.
#[derive(Debug, Clone)]
pub struct RouteCandidates {
    pub paths: Vec<CandidatePath>,
    pub alpha_order: Vec<usize>,
}

/// Per node-pair cache of candidate paths; the topology is static so the
/// KSP result only depends on the pair.
#[derive(Debug, Clone)]
pub struct CandidateCache {
    params: RsaParams,
    latency: LatencyParams,
    routes: HashMap<(NodeId, NodeId), RouteCandidates>,
}

impl CandidateCache {
    pub fn new(params: RsaParams, latency: LatencyParams) -> Self {
        Self {
            params,
            latency,
            routes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &RsaParams {
        &self.params
    }

    pub fn routes(&mut self, net: &Network, src: NodeId, dst: NodeId) -> &RouteCandidates {
        let (k, latency) = (self.params.k, &self.latency);
        self.routes.entry((src, dst)).or_insert_with(|| {
            let paths = k_shortest_paths(net, src, dst, k);
            let alpha_order = alpha_order(&paths, latency);
            RouteCandidates { paths, alpha_order }
        })
    }

    /// Runs `policy` for a `width`-slot request between `src` and `dst`.
    pub fn select(
        &mut self,
        policy: Policy,
        net: &Network,
        src: NodeId,
        dst: NodeId,
        width: usize,
    ) -> SelectionResult {
        let params = self.params;
        let routes = self.routes(net, src, dst);
        match policy {
            Policy::Cba => select_cba_among(net, &routes.paths, width, &params),
            Policy::KspFf => select_first_fit_among(net, &routes.paths, 0..routes.paths.len(), width),
            Policy::SdFf => {
                select_first_fit_among(net, &routes.paths, routes.alpha_order.iter().copied(), width)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{LinkId, LinkSpec, SpectrumConfig, TopologyFile};

    fn net_with(nodes: &[&str], links: &[(&str, &str, f64)], fs_total: usize) -> Network {
        Network::from_file(
            &TopologyFile {
                name: None,
                nodes: nodes.iter().map(|s| s.to_string()).collect(),
                links: links
                    .iter()
                    .map(|(a, b, l)| LinkSpec {
                        a: a.to_string(),
                        b: b.to_string(),
                        length_km: *l,
                    })
                    .collect(),
            },
            SpectrumConfig {
                fs_total,
                ..SpectrumConfig::default()
            },
        )
        .unwrap()
    }

    fn fill(net: &mut Network, link: usize, block: SlotBlock) {
        let owner = net.next_owner_id();
        net.allocate_spectrum(&[LinkId(link)], block, owner, 1e9).unwrap();
    }

    fn single_link(length: f64, fs: usize) -> (Network, CandidatePath) {
        let net = net_with(&["A", "B"], &[("A", "B", length)], fs);
        let path = k_shortest_paths(&net, 0, 1, 1).remove(0);
        (net, path)
    }

    #[test]
    fn candidate_blocks_exhaustive_scan() {
        let starts = |bits: &str, w| {
            free_blocks(&Occupancy::from_bits(bits), w)
                .iter()
                .map(|b| b.start)
                .collect::<Vec<_>>()
        };
        assert_eq!(starts("00000000", 4), vec![0, 1, 2, 3, 4]);
        assert_eq!(starts("11110000", 4), vec![4]);
        assert!(starts("10101010", 2).is_empty());
    }

    #[test]
    fn availability() {
        let (mut net, path) = single_link(100.0, 80);
        assert_eq!(availability_factor(&net, &path), 1.0);
        fill(&mut net, 0, SlotBlock::new(0, 39));
        assert_eq!(availability_factor(&net, &path), 0.5);
        fill(&mut net, 0, SlotBlock::new(40, 79));
        assert_eq!(availability_factor(&net, &path), 0.0);
        assert_eq!(fitness(&net, &path, 1, CiMode::Window), 0.0);
    }

    #[test]
    fn fitness_on_free_link() {
        let (net, path) = single_link(100.0, 80);
        assert_eq!(find_candidate_blocks(&net, &path, 4).len(), 77);
        let g = fitness(&net, &path, 4, CiMode::Literal);
        assert!((g - 0.01).abs() < 1e-15);
    }

    #[test]
    fn fitness_half_occupied_with_mean_ci() {
        // F = 80, upper half occupied so δ = 0.5; the free half [0, 39] holds
        // 38 width-3 blocks. In window mode only the block ending at 39 sees
        // a rising edge (at j = 40): CI = 1 - 1/2. Mean = (37 + 0.5) / 38.
        let (mut net, path) = single_link(100.0, 80);
        fill(&mut net, 0, SlotBlock::new(40, 79));
        let mean_ci = (37.0 + 0.5) / 38.0;
        let expected = mean_ci / (100.0 * 0.5);
        let g = fitness(&net, &path, 3, CiMode::Window);
        assert!((g - expected).abs() < 1e-15, "{g} vs {expected}");
        // Literal mode: every free block scores 1 so Γ = 1 / (L δ) = 0.02.
        assert!((fitness(&net, &path, 3, CiMode::Literal) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn unavailable_path_has_zero_fitness() {
        let (mut net, path) = single_link(100.0, 8);
        fill(&mut net, 0, SlotBlock::new(0, 0));
        fill(&mut net, 0, SlotBlock::new(2, 2));
        fill(&mut net, 0, SlotBlock::new(4, 4));
        fill(&mut net, 0, SlotBlock::new(6, 6));
        assert_eq!(fitness(&net, &path, 2, CiMode::Window), 0.0);
    }

    fn two_route() -> Network {
        // A-B direct (2 km) and A-C-B (1.5 + 1.5 km).
        net_with(
            &["A", "B", "C"],
            &[("A", "B", 2.0), ("A", "C", 1.5), ("C", "B", 1.5)],
            8,
        )
    }

    #[test]
    fn cba_skips_full_path() {
        let mut net = two_route();
        fill(&mut net, 0, SlotBlock::new(0, 7));
        let r = select_cba(&net, 0, 1, 2, 2, CiMode::Window);
        match r.outcome {
            Outcome::Assigned { path, fitness, .. } => {
                assert_eq!(path.nodes, vec![0, 2, 1]);
                assert!(fitness.unwrap() > 0.0);
            }
            Outcome::Blocked => panic!("free path exists"),
        }
    }

    #[test]
    fn cba_prefers_shorter_with_identical_spectra() {
        let net = two_route();
        let r = select_cba(&net, 0, 1, 2, 2, CiMode::Window);
        let Outcome::Assigned { path, block, .. } = r.outcome else {
            panic!("blocked");
        };
        assert_eq!(path.length_km, 2.0);
        assert_eq!(block, SlotBlock::new(0, 1));
    }

    #[test]
    fn all_full_blocks_every_selector() {
        let mut net = two_route();
        for l in 0..3 {
            fill(&mut net, l, SlotBlock::new(0, 7));
        }
        let lat = LatencyParams::default();
        let r = select_cba(&net, 0, 1, 1, 2, CiMode::Window);
        assert!(r.is_blocked());
        assert_eq!(r.candidates_examined, 2);
        assert!(select_ksp_ff(&net, 0, 1, 1, 2).is_blocked());
        assert!(select_sd_ff(&net, 0, 1, 1, 2, &lat).is_blocked());
    }

    #[test]
    fn ksp_ff_takes_first_feasible_path() {
        let mut net = two_route();
        let r = select_ksp_ff(&net, 0, 1, 2, 2);
        let Outcome::Assigned { path, block, .. } = r.outcome else {
            panic!()
        };
        assert_eq!((path.nodes.len(), block.start), (2, 0));
        fill(&mut net, 0, SlotBlock::new(0, 7));
        let r = select_ksp_ff(&net, 0, 1, 2, 2);
        let Outcome::Assigned { path, .. } = r.outcome else {
            panic!()
        };
        assert_eq!(path.nodes, vec![0, 2, 1]);
        assert_eq!(r.candidates_examined, 2);
    }

    #[test]
    fn sd_ff_orders_by_alpha() {
        // Two 4 km routes: A-D direct... make equal km with 2 vs 4 hops.
        let net = net_with(
            &["A", "B", "C", "D", "E", "F"],
            &[
                ("A", "B", 2.0),
                ("B", "F", 2.0),
                ("A", "C", 1.0),
                ("C", "D", 1.0),
                ("D", "E", 1.0),
                ("E", "F", 1.0),
            ],
            8,
        );
        let lat = LatencyParams::default();
        let candidates = k_shortest_paths(&net, 0, 5, 2);
        assert_eq!(candidates[0].length_km, candidates[1].length_km);
        let order = alpha_order(&candidates, &lat);
        assert_eq!(candidates[order[0]].hop_count(), 2);
        let Outcome::Assigned { path, block, .. } = select_sd_ff(&net, 0, 5, 3, 2, &lat).outcome else {
            panic!()
        };
        assert_eq!((path.hop_count(), block.start), (2, 0));
    }

    #[test]
    fn selectors_do_not_mutate() {
        let mut net = two_route();
        fill(&mut net, 1, SlotBlock::new(2, 4));
        let before = net.state_fingerprint();
        let lat = LatencyParams::default();
        let mut cache = CandidateCache::new(RsaParams::default(), lat);
        for policy in Policy::ALL {
            cache.select(policy, &net, 0, 1, 2);
        }
        assert_eq!(net.state_fingerprint(), before);
    }

    #[test]
    fn policy_names_round_trip() {
        for p in Policy::ALL {
            assert_eq!(p.as_str().parse::<Policy>().unwrap(), p);
        }
    }
}
