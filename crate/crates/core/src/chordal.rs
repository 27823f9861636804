//! Sparsity pattern of `Z(gamma)`, its maximal cliques, and graph oracles.
//!
//! The pattern is a union of overlapping diagonal blocks
//! `S(k-1) <= i, j < S(k+1) + tau` for `k = 1..K-1`, so every maximal clique
//! is a contiguous index interval. [`bron_kerbosch`], [`check_chordal`] and
//! [`oracle_edge_set`] exist to check those closed forms independently.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::sdp::{DimsProfile, SdpProblem};
use crate::sparse::SymSparse;

/// Default vertex-count guard for [`bron_kerbosch`].
pub const BRON_KERBOSCH_LIMIT: usize = 256;

/// Symmetric sparsity pattern on `0..n`, stored as upper-triangle pairs
/// (diagonal included).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSet {
    n: usize,
    pairs: BTreeSet<(usize, usize)>,
}

impl EdgeSet {
    pub fn new(n: usize) -> Self {
        Self { n, pairs: BTreeSet::new() }
    }

    pub fn insert(&mut self, i: usize, j: usize) {
        assert!(i < self.n && j < self.n, "edge ({i}, {j}) outside 0..{}", self.n);
        self.pairs.insert(if i <= j { (i, j) } else { (j, i) });
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.pairs.contains(&if i <= j { (i, j) } else { (j, i) })
    }

    /// Marks every pair in `range x range`.
    pub fn insert_block(&mut self, range: std::ops::Range<usize>) {
        for i in range.clone() {
            for j in i..range.end {
                self.insert(i, j);
            }
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Upper-triangle pairs in sorted order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn is_subset(&self, other: &EdgeSet) -> bool {
        self.n == other.n && self.pairs.is_subset(&other.pairs)
    }

    /// Off-diagonal adjacency as a boolean matrix.
    fn adjacency(&self) -> Vec<Vec<bool>> {
        let mut adj = vec![vec![false; self.n]; self.n];
        for &(i, j) in &self.pairs {
            if i != j {
                adj[i][j] = true;
                adj[j][i] = true;
            }
        }
        adj
    }

    /// Plain PBM (`P1`) bitmap, one pixel per matrix entry, 1 = dense.
    pub fn to_pbm(&self) -> String {
        let mut out = format!("P1\n{} {}\n", self.n, self.n);
        for i in 0..self.n {
            let row: Vec<&str> = (0..self.n).map(|j| if self.contains(i, j) { "1" } else { "0" }).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    /// CSV of every dense `(i, j)` entry (both triangles), 1-based.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j\n");
        for i in 0..self.n {
            for j in 0..self.n {
                if self.contains(i, j) {
                    writeln!(out, "{},{}", i + 1, j + 1).unwrap();
                }
            }
        }
        out
    }
}

/// `E = U_{k=1}^{K-1} E_k`, `E_k` the square block on
/// `S(k-1) .. min(S(k+1) + tau, N)`.
pub fn predicted_edge_set(dims: &DimsProfile, tau: usize) -> EdgeSet {
    let n = dims.total();
    let mut e = EdgeSet::new(n);
    for k in 1..dims.depth() {
        e.insert_block(dims.s(k - 1)..(dims.s(k + 1) + tau).min(n));
    }
    e
}

/// Union of the numeric supports of `z_aff` and every basis matrix.
pub fn oracle_edge_set(problem: &SdpProblem) -> EdgeSet {
    let mut e = EdgeSet::new(problem.size());
    for m in std::iter::once(problem.z_aff()).chain(problem.basis()) {
        for &(i, j, v) in m.upper() {
            if v != 0.0 {
                e.insert(i, j);
            }
        }
    }
    e
}

/// Contiguous clique `start..end` (0-based, half-open).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Clique {
    pub start: usize,
    pub end: usize,
}

impl Clique {
    pub fn new(start: usize, end: usize) -> Self {
        assert!(start < end, "empty clique {start}..{end}");
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    pub fn contains_clique(&self, other: &Clique) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    /// 1-based inclusive bounds, the usual way to print them.
    pub fn one_based(&self) -> (usize, usize) {
        (self.start + 1, self.end)
    }
}

impl fmt::Display for Clique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (a, b) = self.one_based();
        write!(f, "[{a}, {b}]")
    }
}

/// Chain of interval cliques covering `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliqueSet {
    n: usize,
    cliques: Vec<Clique>,
}

impl CliqueSet {
    /// Drops intervals contained in another, sorts, and checks that the
    /// remaining chain covers `0..n` without gaps.
    pub fn from_intervals(n: usize, mut cliques: Vec<Clique>) -> Result<Self> {
        for c in &cliques {
            if c.end > n || c.start >= c.end {
                return Err(Error::CliqueRange { start: c.start, end: c.end, n });
            }
        }
        cliques.sort();
        cliques.dedup();
        let all = cliques.clone();
        cliques.retain(|c| !all.iter().any(|o| o != c && o.contains_clique(c)));
        if cliques.is_empty() || cliques[0].start != 0 || cliques.last().unwrap().end != n {
            return Err(Error::InvalidArgument(format!("cliques do not cover 0..{n}")));
        }
        if let Some(w) = cliques.windows(2).find(|w| w[1].start > w[0].end) {
            return Err(Error::InvalidArgument(format!("gap between cliques {} and {}", w[0], w[1])));
        }
        Ok(Self { n, cliques })
    }

    /// The single clique `0..n` (dense constraint).
    pub fn single(n: usize) -> Self {
        Self { n, cliques: vec![Clique::new(0, n)] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn cliques(&self) -> &[Clique] {
        &self.cliques
    }

    pub fn len(&self) -> usize {
        self.cliques.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cliques.is_empty()
    }

    /// Union of `C_k x C_k`.
    pub fn edge_set(&self) -> EdgeSet {
        let mut e = EdgeSet::new(self.n);
        for c in &self.cliques {
            e.insert_block(c.range());
        }
        e
    }
}

/// Closed-form maximal cliques: with `p = min{k : S(k+1) + tau >= N}`,
/// `C_k = S(k-1) .. S(k-1) + n_k + n_{k+1} + tau` for `k < p` and
/// `C_p = S(p-1) .. N`.
pub fn maximal_cliques(dims: &DimsProfile, tau: usize) -> CliqueSet {
    let n = dims.total();
    let p = (1..dims.depth())
        .find(|&k| dims.s(k + 1) + tau >= n)
        .expect("S(K) = N satisfies the defining inequality");
    let mut cliques: Vec<Clique> = (1..p)
        .map(|k| {
            let start = dims.s(k - 1);
            Clique::new(start, start + dims.n(k) + dims.n(k + 1) + tau)
        })
        .collect();
    cliques.push(Clique::new(dims.s(p - 1), n));
    CliqueSet::from_intervals(n, cliques).expect("closed-form cliques form a covering chain")
}

/// All maximal cliques by Bron-Kerbosch with Tomita pivoting. Each clique is
/// sorted and the list is sorted lexicographically.
pub fn bron_kerbosch(e: &EdgeSet, limit: usize) -> Result<Vec<Vec<usize>>> {
    let n = e.n();
    if n > limit {
        return Err(Error::SizeGuard { n, limit });
    }
    let words = n.div_ceil(64).max(1);
    let mut nbrs = vec![vec![0u64; words]; n];
    for (i, j) in e.pairs() {
        if i != j {
            nbrs[i][j / 64] |= 1 << (j % 64);
            nbrs[j][i / 64] |= 1 << (i % 64);
        }
    }
    let mut p = vec![0u64; words];
    for v in 0..n {
        p[v / 64] |= 1 << (v % 64);
    }
    let mut out = Vec::new();
    let mut r = Vec::new();
    bk_pivot(&nbrs, &mut r, p, vec![0u64; words], &mut out);
    for c in &mut out {
        c.sort_unstable();
    }
    out.sort();
    Ok(out)
}

fn bits(set: &[u64]) -> impl Iterator<Item = usize> + '_ {
    set.iter().enumerate().flat_map(|(w, &word)| {
        let mut word = word;
        std::iter::from_fn(move || {
            (word != 0).then(|| {
                let b = word.trailing_zeros() as usize;
                word &= word - 1;
                w * 64 + b
            })
        })
    })
}

fn and(a: &[u64], b: &[u64]) -> Vec<u64> {
    a.iter().zip(b).map(|(x, y)| x & y).collect()
}

fn count_and(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x & y).count_ones()).sum()
}

fn bk_pivot(nbrs: &[Vec<u64>], r: &mut Vec<usize>, mut p: Vec<u64>, mut x: Vec<u64>, out: &mut Vec<Vec<usize>>) {
    if p.iter().all(|&w| w == 0) {
        if x.iter().all(|&w| w == 0) {
            out.push(r.clone());
        }
        return;
    }
    let pivot = bits(&p)
        .chain(bits(&x))
        .max_by_key(|&u| count_and(&p, &nbrs[u]))
        .unwrap();
    let candidates: Vec<usize> = bits(&p).filter(|&v| nbrs[pivot][v / 64] & (1 << (v % 64)) == 0).collect();
    for v in candidates {
        r.push(v);
        bk_pivot(nbrs, r, and(&p, &nbrs[v]), and(&x, &nbrs[v]), out);
        r.pop();
        p[v / 64] &= !(1 << (v % 64));
        x[v / 64] |= 1 << (v % 64);
    }
}

/// Outcome of the maximum-cardinality-search chordality test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChordalCheck {
    pub chordal: bool,
    /// Candidate perfect elimination ordering (reverse MCS visit order).
    pub ordering: Vec<usize>,
}

pub fn check_chordal(e: &EdgeSet) -> ChordalCheck {
    let n = e.n();
    let adj = e.adjacency();

    // Maximum cardinality search; ties broken by smallest index.
    let mut weight = vec![0usize; n];
    let mut visited = vec![false; n];
    let mut visit = Vec::with_capacity(n);
    for _ in 0..n {
        let v = (0..n)
            .filter(|&v| !visited[v])
            .max_by(|&a, &b| weight[a].cmp(&weight[b]).then(b.cmp(&a)))
            .unwrap();
        visited[v] = true;
        visit.push(v);
        for u in 0..n {
            if adj[v][u] && !visited[u] {
                weight[u] += 1;
            }
        }
    }
    let ordering: Vec<usize> = visit.into_iter().rev().collect();
    let mut pos = vec![0; n];
    for (i, &v) in ordering.iter().enumerate() {
        pos[v] = i;
    }

    // For each v, its later neighbours minus the earliest one must all be
    // adjacent to that earliest one.
    let chordal = ordering.iter().all(|&v| {
        let later: Vec<usize> = (0..n).filter(|&u| adj[v][u] && pos[u] > pos[v]).collect();
        match later.iter().min_by_key(|&&u| pos[u]) {
            None => true,
            Some(&first) => later.iter().all(|&u| u == first || adj[first][u]),
        }
    });
    ChordalCheck { chordal, ordering }
}

/// `E_C^T X_k E_C`: embeds a `|C| x |C|` symmetric block at rows/columns `C`.
pub fn scatter(clique: Clique, block: &DMatrix<f64>, n: usize) -> Result<SymSparse> {
    if clique.end > n {
        return Err(Error::CliqueRange { start: clique.start, end: clique.end, n });
    }
    if block.nrows() != clique.len() || block.ncols() != clique.len() {
        return Err(Error::DimensionMismatch { expected: clique.len(), got: block.nrows() });
    }
    let s = clique.start;
    Ok(SymSparse::from_triplets(
        n,
        (0..clique.len())
            .flat_map(|i| (i..clique.len()).map(move |j| (i, j)))
            .map(|(i, j)| (s + i, s + j, 0.5 * (block[(i, j)] + block[(j, i)]))),
    ))
}

/// `E_C X E_C^T`: the principal submatrix on `C`.
pub fn gather(clique: Clique, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if clique.end > x.nrows() || !x.is_square() {
        return Err(Error::CliqueRange { start: clique.start, end: clique.end, n: x.nrows() });
    }
    Ok(x.view((clique.start, clique.start), (clique.len(), clique.len())).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims5() -> DimsProfile {
        DimsProfile::new(&[3, 3, 3, 3, 3, 3]).unwrap()
    }

    fn intervals(cs: &CliqueSet) -> Vec<(usize, usize)> {
        cs.cliques().iter().map(|c| c.one_based()).collect()
    }

    #[test]
    fn predicted_blocks_tau0() {
        let e = predicted_edge_set(&dims5(), 0);
        let mut want = EdgeSet::new(15);
        for start in [0, 3, 6, 9] {
            want.insert_block(start..start + 6);
        }
        assert_eq!(e, want);
    }

    #[test]
    fn predicted_blocks_grow_with_tau() {
        let e = predicted_edge_set(&dims5(), 2);
        let mut want = EdgeSet::new(15);
        for start in [0, 3, 6, 9] {
            want.insert_block(start..(start + 8).min(15));
        }
        assert_eq!(e, want);

        let two = DimsProfile::new(&[2, 4, 1]).unwrap();
        let e = predicted_edge_set(&two, 3);
        let mut full = EdgeSet::new(6);
        full.insert_block(0..6);
        assert_eq!(e, full);
    }

    #[test]
    fn closed_form_cliques() {
        let d = dims5();
        assert_eq!(intervals(&maximal_cliques(&d, 0)), vec![(1, 6), (4, 9), (7, 12), (10, 15)]);
        assert_eq!(intervals(&maximal_cliques(&d, 4)), vec![(1, 10), (4, 13), (7, 15)]);
        assert_eq!(intervals(&maximal_cliques(&d, 100)), vec![(1, 15)]);
        let sizes: Vec<usize> = maximal_cliques(&d, 0).cliques().iter().map(|c| c.len()).collect();
        assert_eq!(sizes, vec![6, 6, 6, 6]);
    }

    #[test]
    fn bron_kerbosch_small_graphs() {
        let mut tri = EdgeSet::new(3);
        tri.insert_block(0..3);
        assert_eq!(bron_kerbosch(&tri, 256).unwrap(), vec![vec![0, 1, 2]]);

        let mut path = EdgeSet::new(3);
        path.insert(0, 1);
        path.insert(1, 2);
        assert_eq!(bron_kerbosch(&path, 256).unwrap(), vec![vec![0, 1], vec![1, 2]]);

        assert!(matches!(bron_kerbosch(&EdgeSet::new(300), 256), Err(Error::SizeGuard { .. })));
    }

    #[test]
    fn bron_kerbosch_recovers_intervals() {
        let d = dims5();
        let e = predicted_edge_set(&d, 2);
        let bk = bron_kerbosch(&e, 256).unwrap();
        let formula: Vec<Vec<usize>> =
            maximal_cliques(&d, 2).cliques().iter().map(|c| c.range().collect()).collect();
        assert_eq!(bk, formula);
    }

    #[test]
    fn chordality() {
        let mut c4 = EdgeSet::new(4);
        for (i, j) in [(0, 1), (1, 2), (2, 3), (0, 3)] {
            c4.insert(i, j);
        }
        assert!(!check_chordal(&c4).chordal);
        c4.insert(0, 2);
        assert!(check_chordal(&c4).chordal);

        let mut k5 = EdgeSet::new(5);
        k5.insert_block(0..5);
        assert!(check_chordal(&k5).chordal);
        assert!(check_chordal(&predicted_edge_set(&dims5(), 3)).chordal);
    }

    #[test]
    fn clique_set_validation() {
        assert!(CliqueSet::from_intervals(5, vec![Clique::new(0, 2), Clique::new(3, 5)]).is_err());
        assert!(CliqueSet::from_intervals(5, vec![Clique::new(0, 6)]).is_err());
        let cs = CliqueSet::from_intervals(
            5,
            vec![Clique::new(2, 5), Clique::new(0, 3), Clique::new(1, 3)],
        )
        .unwrap();
        assert_eq!(cs.cliques(), &[Clique::new(0, 3), Clique::new(2, 5)]);
        assert_eq!(Clique::new(0, 6).to_string(), "[1, 6]");
    }

    #[test]
    fn scatter_gather() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 3.0]);
        let c = Clique::new(1, 3);
        let s = scatter(c, &x, 4).unwrap().to_dense();
        assert_eq!(s[(1, 1)], 1.0);
        assert_eq!(s[(2, 1)], 2.0);
        assert_eq!(s.sum(), 8.0);
        assert_eq!(gather(c, &s).unwrap(), x);
        assert_eq!(scatter(Clique::new(0, 2), &x, 2).unwrap().to_dense(), x);
        assert!(matches!(scatter(Clique::new(3, 5), &x, 4), Err(Error::CliqueRange { .. })));
    }

    #[test]
    fn pbm_layout() {
        let mut e = EdgeSet::new(3);
        e.insert_block(0..2);
        e.insert(2, 2);
        assert_eq!(e.to_pbm(), "P1\n3 3\n1 1 0\n1 1 0\n0 0 1\n");
        assert_eq!(e.to_csv(), "i,j\n1,1\n1,2\n2,1\n2,2\n3,3\n");
    }
}
