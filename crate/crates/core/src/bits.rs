//! Column-major bit matrix: one `u64` word per 64 rows of a column, so a
//! bitline current is a popcount of `column & wordline_mask`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    words: usize,
    data: Vec<u64>,
}

impl BitMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        let words = rows.div_ceil(64);
        Self {
            rows,
            cols,
            words,
            data: vec![0; words * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(rows, cols);
        for c in 0..cols {
            for r in 0..rows {
                if f(r, c) {
                    m.set(r, c, true);
                }
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn words_per_col(&self) -> usize {
        self.words
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[c * self.words + r / 64] >> (r % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        debug_assert!(r < self.rows && c < self.cols);
        let w = &mut self.data[c * self.words + r / 64];
        if v {
            *w |= 1 << (r % 64);
        } else {
            *w &= !(1 << (r % 64));
        }
    }

    pub fn column(&self, c: usize) -> &[u64] {
        &self.data[c * self.words..(c + 1) * self.words]
    }

    /// Number of set cells in column `c` among the rows selected by `mask`.
    #[inline]
    pub fn masked_popcount(&self, c: usize, mask: &[u64]) -> u32 {
        self.column(c)
            .iter()
            .zip(mask)
            .map(|(a, b)| (a & b).count_ones())
            .sum()
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Row mask with bits set for `rows` where `pick(row)` holds.
    pub fn row_mask(
        &self,
        rows: std::ops::Range<usize>,
        mut pick: impl FnMut(usize) -> bool,
    ) -> Vec<u64> {
        let mut mask = vec![0u64; self.words];
        for r in rows {
            if pick(r) {
                mask[r / 64] |= 1 << (r % 64);
            }
        }
        mask
    }

    /// Copy of the `nr × nc` window at `(r0, c0)`.
    pub fn window(&self, r0: usize, c0: usize, nr: usize, nc: usize) -> BitMatrix {
        BitMatrix::from_fn(nr, nc, |r, c| self.get(r0 + r, c0 + c))
    }
}
