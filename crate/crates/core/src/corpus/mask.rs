use std::fmt;

use crate::error::{Error, Result};

const WORD_BITS: usize = 64;

/// Fixed-width inclusion set over the segments of one instance.
///
/// Bit `j` set means segment `j` is kept in the rendered context.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubsetMask {
    len: usize,
    words: Vec<u64>,
}

impl SubsetMask {
    pub fn empty(len: usize) -> Self {
        Self {
            len,
            words: vec![0; len.div_ceil(WORD_BITS)],
        }
    }

    pub fn full(len: usize) -> Self {
        let mut mask = Self::empty(len);
        for j in 0..len {
            mask.insert(j);
        }
        mask
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(len: usize, indices: I) -> Result<Self> {
        let mut mask = Self::empty(len);
        for j in indices {
            if j >= len {
                return Err(Error::contract(format!(
                    "segment index {j} out of range for mask of width {len}"
                )));
            }
            mask.insert(j);
        }
        Ok(mask)
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut mask = Self::empty(bits.len());
        for (j, &b) in bits.iter().enumerate() {
            if b {
                mask.insert(j);
            }
        }
        mask
    }

    /// Width of the mask (the instance's segment count).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn is_full(&self) -> bool {
        self.count() == self.len
    }

    /// Number of included segments.
    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn contains(&self, j: usize) -> bool {
        j < self.len && self.words[j / WORD_BITS] >> (j % WORD_BITS) & 1 == 1
    }

    /// # Panics
    /// If `j` is outside the mask width.
    pub fn insert(&mut self, j: usize) {
        assert!(j < self.len, "index {j} outside mask of width {}", self.len);
        self.words[j / WORD_BITS] |= 1 << (j % WORD_BITS);
    }

    /// # Panics
    /// If `j` is outside the mask width.
    pub fn remove(&mut self, j: usize) {
        assert!(j < self.len, "index {j} outside mask of width {}", self.len);
        self.words[j / WORD_BITS] &= !(1 << (j % WORD_BITS));
    }

    /// Copy of this mask with segment `j` dropped.
    pub fn without(&self, j: usize) -> Self {
        let mut mask = self.clone();
        mask.remove(j);
        mask
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(move |&j| self.contains(j))
    }

    pub fn is_subset_of(&self, other: &SubsetMask) -> bool {
        self.len == other.len
            && self
                .words
                .iter()
                .zip(&other.words)
                .all(|(a, b)| a & !b == 0)
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len).map(|j| self.contains(j)).collect()
    }

    /// Lowercase hex rendering of the mask as the integer `sum(2^j)`, most
    /// significant digit first, padded to `ceil(len / 4)` digits.
    pub fn to_hex(&self) -> String {
        let digits = self.len.div_ceil(4).max(1);
        (0..digits)
            .rev()
            .map(|d| {
                let nibble = (0..4)
                    .filter(|b| self.contains(4 * d + b))
                    .fold(0u32, |acc, b| acc | 1 << b);
                char::from_digit(nibble, 16).expect("nibble < 16")
            })
            .collect()
    }

    pub fn from_hex(hex: &str, len: usize) -> Result<Self> {
        let bad = |why: &str| Error::contract(format!("invalid mask hex `{hex}`: {why}"));
        if hex.is_empty() {
            return Err(bad("empty string"));
        }
        let mut mask = Self::empty(len);
        for (d, ch) in hex.chars().rev().enumerate() {
            let nibble = ch.to_digit(16).ok_or_else(|| bad("non-hex digit"))?;
            for b in 0..4 {
                if nibble >> b & 1 == 1 {
                    let j = 4 * d + b;
                    if j >= len {
                        return Err(bad("bit set beyond mask width"));
                    }
                    mask.insert(j);
                }
            }
        }
        Ok(mask)
    }
}

impl fmt::Debug for SubsetMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.indices()).finish()
    }
}
