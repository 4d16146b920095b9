//! Contiguity Index of a slot block.
//!
//! `C = 1 - T / D`, where `T` counts free-to-occupied transitions
//! (`s[j-1] = 0`, `s[j] = 1`) over a summation window of `j` and `D` is the
//! denominator of the active [`CiMode`]. The result is clamped to `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::topology::{Occupancy, SlotBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMode {
    /// `j ∈ [start+1, end]`, `D = end - start`; a single-slot block scores 1.
    Literal,
    /// `j ∈ [max(1, start), min(F-1, end+1)]`, `D = max(end - start, 1)`:
    /// the literal window widened by one slot past each block edge.
    #[default]
    Window,
    /// `j ∈ [1, F-1]`, `D = F - 1`; independent of the block.
    Global,
}

impl CiMode {
    pub const ALL: [CiMode; 3] = [CiMode::Literal, CiMode::Window, CiMode::Global];

    pub fn as_str(&self) -> &'static str {
        match self {
            CiMode::Literal => "literal",
            CiMode::Window => "window",
            CiMode::Global => "global",
        }
    }

    /// Summation window `[lo, hi]` (possibly empty) and denominator, or
    /// `None` when the index is defined as 1 without summing.
    fn window(self, block: SlotBlock, len: usize) -> Option<(usize, usize, usize)> {
        match self {
            CiMode::Literal => {
                (block.end > block.start).then(|| (block.start + 1, block.end, block.end - block.start))
            }
            CiMode::Window => Some((
                block.start.max(1),
                (block.end + 1).min(len - 1),
                (block.end - block.start).max(1),
            )),
            CiMode::Global => (len > 1).then(|| (1, len - 1, len - 1)),
        }
    }
}

impl std::str::FromStr for CiMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CiMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown CI mode `{s}` (expected literal, window or global)"))
    }
}

fn score(transitions: usize, denominator: usize) -> f64 {
    (1.0 - transitions as f64 / denominator as f64).clamp(0.0, 1.0)
}

#[inline]
fn rising(occ: &Occupancy, j: usize) -> bool {
    !occ.get(j - 1) && occ.get(j)
}

/// Contiguity Index of `block` against `occupancy`.
pub fn contiguity_index(occupancy: &Occupancy, block: SlotBlock, mode: CiMode) -> f64 {
    debug_assert!(block.end < occupancy.len());
    match mode.window(block, occupancy.len()) {
        None => 1.0,
        Some((lo, hi, denominator)) => {
            let transitions = (lo..=hi).filter(|&j| rising(occupancy, j)).count();
            score(transitions, denominator)
        }
    }
}

/// Prefix sums of rising transitions, for scoring many blocks of one vector.
#[derive(Debug, Clone)]
pub struct ContiguityScan {
    /// `prefix[j]` = rising transitions at positions `1..=j`.
    prefix: Vec<u32>,
}

impl ContiguityScan {
    pub fn new(occupancy: &Occupancy) -> Self {
        let mut prefix = Vec::with_capacity(occupancy.len());
        let mut acc = 0;
        prefix.push(0);
        for j in 1..occupancy.len() {
            if rising(occupancy, j) {
                acc += 1;
            }
            prefix.push(acc);
        }
        Self { prefix }
    }

    pub fn index(&self, block: SlotBlock, mode: CiMode) -> f64 {
        match mode.window(block, self.prefix.len()) {
            None => 1.0,
            Some((lo, hi, _)) if lo > hi => 1.0,
            Some((lo, hi, denominator)) => {
                let transitions = self.prefix[hi] - self.prefix[lo - 1];
                score(transitions as usize, denominator)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ci(bits: &str, start: usize, end: usize, mode: CiMode) -> f64 {
        contiguity_index(&Occupancy::from_bits(bits), SlotBlock::new(start, end), mode)
    }

    #[test]
    fn free_spectrum_scores_one() {
        assert_eq!(ci("00000000", 2, 5, CiMode::Literal), 1.0);
    }

    #[test]
    fn literal_ignores_transitions_outside_block() {
        // The only rising edge is at j = 3, outside j ∈ {5, 6, 7}.
        assert_eq!(ci("00011000", 4, 7, CiMode::Literal), 1.0);
    }

    #[test]
    fn window_sees_right_neighbour() {
        assert_eq!(ci("00000100", 0, 3, CiMode::Window), 1.0);
        let c = ci("00000100", 1, 4, CiMode::Window);
        assert!((c - (1.0 - 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_literal_block() {
        assert_eq!(ci("01", 1, 1, CiMode::Literal), 1.0);
    }

    #[test]
    fn global_counts_whole_vector() {
        // Rising edges at j = 1 and j = 4 over F - 1 = 7.
        let c = ci("01001000", 5, 6, CiMode::Global);
        assert!((c - (1.0 - 2.0 / 7.0)).abs() < 1e-12);
    }

    #[test]
    fn clamps_to_zero() {
        // Width-2 block with an occupied right neighbour: one transition over D = 1.
        assert_eq!(ci("0010", 0, 1, CiMode::Window), 0.0);
        // Literal window on an alternating occupied block: 2 rises over D = 3.
        let c = ci("0101", 0, 3, CiMode::Literal);
        assert!((c - (1.0 - 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn scan_matches_direct_evaluation() {
        for mask in 0u64..(1 << 8) {
            let occ = Occupancy::from_mask(mask, 8);
            let scan = ContiguityScan::new(&occ);
            for start in 0..8 {
                for end in start..8 {
                    let block = SlotBlock::new(start, end);
                    for mode in CiMode::ALL {
                        assert_eq!(
                            scan.index(block, mode),
                            contiguity_index(&occ, block, mode),
                            "{occ} {block} {mode:?}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn parses_mode_names() {
        assert_eq!("window".parse::<CiMode>().unwrap(), CiMode::Window);
        assert!("other".parse::<CiMode>().is_err());
    }
}
