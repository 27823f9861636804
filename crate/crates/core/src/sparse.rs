//! Sparse symmetric matrices stored by their upper triangle.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

/// Symmetric `n x n` matrix holding only entries with `row <= col`.
///
/// Entries are kept sorted by `(row, col)`; the lower triangle is implied.
#[derive(Debug, Clone, PartialEq)]
pub struct SymSparse {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SymSparse {
    pub fn zeros(n: usize) -> Self {
        Self { n, entries: Vec::new() }
    }

    /// Builds from arbitrary `(i, j, v)` triplets. Both triangles are
    /// accepted; `(i, j)` and `(j, i)` address the same stored entry and
    /// duplicates are summed. Exact zeros are dropped.
    pub fn from_triplets(n: usize, triplets: impl IntoIterator<Item = (usize, usize, f64)>) -> Self {
        let mut acc = Accumulator::new(n);
        for (i, j, v) in triplets {
            acc.add(i, j, v);
        }
        acc.finish()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz_upper(&self) -> usize {
        self.entries.len()
    }

    /// Upper-triangle entries in sorted order.
    pub fn upper(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    /// Every stored entry together with its mirror image.
    pub fn iter_full(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.entries.iter().flat_map(|&(i, j, v)| {
            let mirror = (i != j).then_some((j, i, v));
            std::iter::once((i, j, v)).chain(mirror)
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let key = if i <= j { (i, j) } else { (j, i) };
        self.entries
            .binary_search_by(|&(r, c, _)| (r, c).cmp(&key))
            .map(|pos| self.entries[pos].2)
            .unwrap_or(0.0)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (i, j, v) in self.iter_full() {
            m[(i, j)] = v;
        }
        m
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        assert!(m.is_square(), "symmetric matrix must be square");
        let n = m.nrows();
        let mut entries = Vec::new();
        for i in 0..n {
            for j in i..n {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                if v != 0.0 {
                    entries.push((i, j, v));
                }
            }
        }
        Self { n, entries }
    }

    pub fn scale(&mut self, alpha: f64) {
        for e in &mut self.entries {
            e.2 *= alpha;
        }
        if alpha == 0.0 {
            self.entries.clear();
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.2.abs()))
    }
}

/// Dense-keyed accumulator for building a [`SymSparse`] from many updates.
#[derive(Debug, Clone)]
pub struct Accumulator {
    n: usize,
    map: BTreeMap<(usize, usize), f64>,
}

impl Accumulator {
    pub fn new(n: usize) -> Self {
        Self { n, map: BTreeMap::new() }
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(i < self.n && j < self.n, "entry ({i}, {j}) outside {}x{}", self.n, self.n);
        if v == 0.0 {
            return;
        }
        let key = if i <= j { (i, j) } else { (j, i) };
        *self.map.entry(key).or_insert(0.0) += v;
    }

    /// Adds `alpha * (a b^T + b a^T) / 2` restricted to the upper triangle,
    /// i.e. the symmetric part of the outer product.
    pub fn add_sym_outer(&mut self, alpha: f64, a: &[(usize, f64)], b: &[(usize, f64)]) {
        if alpha == 0.0 {
            return;
        }
        for &(i, ai) in a {
            for &(j, bj) in b {
                let v = 0.5 * alpha * ai * bj;
                if i == j {
                    self.add(i, j, 2.0 * v);
                } else if i < j {
                    self.add(i, j, v);
                } else {
                    self.add(j, i, v);
                }
            }
        }
    }

    pub fn finish(self) -> SymSparse {
        let entries = self
            .map
            .into_iter()
            .filter(|&(_, v)| v != 0.0)
            .map(|((i, j), v)| (i, j, v))
            .collect();
        SymSparse { n: self.n, entries }
    }
}
