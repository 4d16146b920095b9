//! Fixed-length bit vector of frequency-slot states.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Inclusive slot range `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotBlock {
    pub start: usize,
    pub end: usize,
}

impl SlotBlock {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end, "block [{start},{end}] is reversed");
        Self { start, end }
    }

    /// Block of `width` slots beginning at `start`.
    pub fn with_width(start: usize, width: usize) -> Self {
        debug_assert!(width >= 1);
        Self::new(start, start + width - 1)
    }

    pub fn width(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn overlaps(&self, other: &SlotBlock) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

impl fmt::Display for SlotBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.start, self.end)
    }
}

/// Occupancy vector `s` where bit `j` set means slot `j` is in use.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Occupancy {
    len: usize,
    words: Vec<u64>,
}

impl Occupancy {
    pub fn new(len: usize) -> Self {
        Self {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    /// Parses a string of `0`/`1` characters, slot 0 first.
    pub fn from_bits(bits: &str) -> Self {
        let mut occ = Self::new(bits.len());
        for (j, c) in bits.chars().enumerate() {
            match c {
                '0' => {}
                '1' => occ.set(j),
                other => panic!("invalid occupancy character {other:?}"),
            }
        }
        occ
    }

    /// Builds a vector from the low `len` bits of `mask`.
    pub fn from_mask(mask: u64, len: usize) -> Self {
        assert!(len <= 64);
        let mut occ = Self::new(len);
        if len > 0 {
            let keep = if len == 64 { u64::MAX } else { (1u64 << len) - 1 };
            occ.words[0] = mask & keep;
        }
        occ
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, j: usize) -> bool {
        debug_assert!(j < self.len);
        self.words[j / 64] >> (j % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, j: usize) {
        debug_assert!(j < self.len);
        self.words[j / 64] |= 1 << (j % 64);
    }

    pub fn set_block(&mut self, block: SlotBlock) {
        for j in block.start..=block.end {
            self.set(j);
        }
    }

    pub fn clear_block(&mut self, block: SlotBlock) {
        for j in block.start..=block.end {
            self.words[j / 64] &= !(1 << (j % 64));
        }
    }

    pub fn is_block_free(&self, block: SlotBlock) -> bool {
        block.end < self.len && (block.start..=block.end).all(|j| !self.get(j))
    }

    pub fn count_occupied(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_full(&self) -> bool {
        self.count_occupied() == self.len
    }

    /// In-place elementwise OR.
    pub fn union_with(&mut self, other: &Occupancy) {
        assert_eq!(self.len, other.len, "occupancy length mismatch");
        for (w, o) in self.words.iter_mut().zip(&other.words) {
            *w |= o;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(|j| self.get(j))
    }
}

impl fmt::Display for Occupancy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for bit in self.iter() {
            f.write_str(if bit { "1" } else { "0" })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bits_round_trip() {
        let occ = Occupancy::from_bits("0110001");
        assert_eq!(occ.to_string(), "0110001");
        assert_eq!(occ.count_occupied(), 3);
    }

    #[test]
    fn blocks_across_word_boundary() {
        let mut occ = Occupancy::new(80);
        let block = SlotBlock::new(60, 70);
        occ.set_block(block);
        assert_eq!(occ.count_occupied(), 11);
        assert!(!occ.is_block_free(SlotBlock::new(70, 75)));
        assert!(occ.is_block_free(SlotBlock::new(71, 79)));
        occ.clear_block(block);
        assert_eq!(occ.count_occupied(), 0);
    }

    #[test]
    fn block_past_end_is_not_free() {
        let occ = Occupancy::new(8);
        assert!(!occ.is_block_free(SlotBlock::new(6, 8)));
    }

    #[test]
    fn union_is_or() {
        let mut a = Occupancy::from_bits("1100");
        a.union_with(&Occupancy::from_bits("0110"));
        assert_eq!(a.to_string(), "1110");
    }

    #[test]
    fn from_mask_truncates() {
        assert_eq!(Occupancy::from_mask(0b1_0110, 4).to_string(), "0110");
    }

    #[test]
    fn overlap() {
        assert!(SlotBlock::new(0, 3).overlaps(&SlotBlock::new(3, 5)));
        assert!(!SlotBlock::new(0, 1).overlaps(&SlotBlock::new(2, 3)));
        assert_eq!(SlotBlock::with_width(4, 4), SlotBlock::new(4, 7));
    }
}
