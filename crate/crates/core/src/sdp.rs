//! Assembly of the Lipschitz SDP constraint `Z(gamma) <= 0`.
//!
//! `Z(gamma)` is affine in the multipliers:
//!
//! ```text
//! Z(gamma) = z_aff + sum_i gamma_i Z_i
//! ```
//!
//! with `z_aff = E_K^T W_K^T W_K E_K`. The first `N_f` coordinates are the
//! diagonal multipliers of `T`, followed by one coordinate per banded pair
//! `(i, j)` with `0 < j - i <= tau`, and the last coordinate is `gamma_ell`
//! whose basis matrix is `-E_1^T E_1`.
//!
//! Every multiplier enters `T` as a rank-one term `q q^T` (`q = e_i` or
//! `q = e_i - e_j`), so each basis matrix is
//! `[A;B]^T M(q q^T) [A;B]` with `M(T) = [[a T, b T], [b T, c T]]`,
//! which equals `a u u^T + b (u w^T + w u^T) + c w w^T` for `u = A^T q`,
//! `w = B^T q`. Neither `A` nor `B` is ever formed: `A^T e_r` is one row of
//! one weight matrix and `B^T e_r` is a single unit vector.
//!
//! Layer numbers `k` are 1-based as in the block formulas; matrix and neuron
//! indices are 0-based.

use log::warn;

use crate::error::{Error, Result};
use crate::network::{layer_norms, probe_gains, Network};
use crate::sparse::{Accumulator, SymSparse};

/// Probe inputs used to estimate block gains for solver scaling.
const GAIN_PROBES: usize = 32;

/// Layer sizes and their prefix sums `S(k) = n_1 + ... + n_k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DimsProfile {
    /// `n_1, ..., n_K, m`.
    sizes: Vec<usize>,
    /// `S(0), ..., S(K)`.
    prefix: Vec<usize>,
}

impl DimsProfile {
    /// `layer_sizes` is `[n_1, ..., n_K, m]` with `K >= 2`.
    pub fn new(layer_sizes: &[usize]) -> Result<Self> {
        if layer_sizes.len() < 3 {
            return Err(Error::InvalidNetwork(format!(
                "need at least two weight layers, got {} layer sizes",
                layer_sizes.len()
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::InvalidNetwork("layer sizes must be positive".into()));
        }
        let depth = layer_sizes.len() - 1;
        let mut prefix = Vec::with_capacity(depth + 1);
        prefix.push(0);
        for &n in &layer_sizes[..depth] {
            prefix.push(prefix.last().unwrap() + n);
        }
        Ok(Self { sizes: layer_sizes.to_vec(), prefix })
    }

    pub fn from_network(net: &Network) -> Self {
        Self::new(net.layer_sizes()).expect("network sizes are validated on construction")
    }

    /// Number of weight layers `K`.
    pub fn depth(&self) -> usize {
        self.sizes.len() - 1
    }

    /// `n_k` for `1 <= k <= K + 1` (`n_{K+1} = m`).
    pub fn n(&self, k: usize) -> usize {
        self.sizes[k - 1]
    }

    /// `S(k)` for `0 <= k <= K`.
    pub fn s(&self, k: usize) -> usize {
        self.prefix[k]
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Side of `Z`: `N = n_1 + ... + n_K`.
    pub fn total(&self) -> usize {
        self.prefix[self.depth()]
    }

    /// Number of activations `N_f = n_2 + ... + n_K`.
    pub fn hidden(&self) -> usize {
        self.total() - self.sizes[0]
    }

    /// 1-based layer holding 0-based stacked index `i`, i.e. the `k` with
    /// `S(k-1) <= i < S(k)`.
    pub fn block_of(&self, i: usize) -> usize {
        assert!(i < self.total(), "index {i} outside 0..{}", self.total());
        self.prefix.partition_point(|&s| s <= i)
    }

    /// Index range of `x_k` inside the stacked state.
    pub fn block_range(&self, k: usize) -> std::ops::Range<usize> {
        self.s(k - 1)..self.s(k)
    }
}

/// Banded index pairs `(i, j)`, `i < j <= i + tau`, over `0..n_f`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TauIndexSet {
    tau: usize,
    n_f: usize,
    pairs: Vec<(usize, usize)>,
}

impl TauIndexSet {
    /// `tau` is clamped to `n_f - 1`.
    pub fn new(n_f: usize, tau: usize) -> Self {
        let eff = tau.min(n_f.saturating_sub(1));
        if eff < tau {
            warn!("tau = {tau} exceeds N_f - 1 = {eff}; clamping to the dense case");
        }
        let pairs = (0..n_f)
            .flat_map(|i| (i + 1..=(i + eff).min(n_f.saturating_sub(1))).map(move |j| (i, j)))
            .collect();
        Self { tau: eff, n_f, pairs }
    }

    /// Effective (clamped) band width.
    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn n_f(&self) -> usize {
        self.n_f
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Ordering of the decision vector `gamma`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GammaLayout {
    index_set: TauIndexSet,
}

/// What a coordinate of `gamma` multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Multiplier {
    /// `(gamma_alpha)_ii` on `e_i e_i^T`.
    Diagonal(usize),
    /// `(gamma_alpha)_ij` on `(e_i - e_j)(e_i - e_j)^T`.
    Pair(usize, usize),
    /// `gamma_ell`.
    Ell,
}

impl GammaLayout {
    pub fn new(n_f: usize, tau: usize) -> Self {
        Self { index_set: TauIndexSet::new(n_f, tau) }
    }

    pub fn index_set(&self) -> &TauIndexSet {
        &self.index_set
    }

    pub fn n_f(&self) -> usize {
        self.index_set.n_f
    }

    pub fn tau(&self) -> usize {
        self.index_set.tau
    }

    /// Number of `gamma_alpha` coordinates.
    pub fn alpha_len(&self) -> usize {
        self.n_f() + self.index_set.len()
    }

    /// Total variable count `d`.
    pub fn len(&self) -> usize {
        self.alpha_len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of `gamma_ell`, always the last coordinate.
    pub fn ell(&self) -> usize {
        self.alpha_len()
    }

    pub fn multiplier(&self, idx: usize) -> Multiplier {
        let n_f = self.n_f();
        if idx < n_f {
            Multiplier::Diagonal(idx)
        } else if idx < self.alpha_len() {
            let (i, j) = self.index_set.pairs[idx - n_f];
            Multiplier::Pair(i, j)
        } else if idx == self.ell() {
            Multiplier::Ell
        } else {
            panic!("gamma index {idx} outside 0..{}", self.len())
        }
    }
}

/// `T = sum_i g_ii e_i e_i^T + sum_{(i,j)} g_ij (e_i - e_j)(e_i - e_j)^T`.
pub fn build_t(layout: &GammaLayout, gamma_alpha: &[f64]) -> Result<SymSparse> {
    if gamma_alpha.len() != layout.alpha_len() {
        return Err(Error::DimensionMismatch { expected: layout.alpha_len(), got: gamma_alpha.len() });
    }
    if let Some((index, &value)) = gamma_alpha.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::NegativeMultiplier { index, value });
    }
    let mut acc = Accumulator::new(layout.n_f());
    for (idx, &g) in gamma_alpha.iter().enumerate() {
        match layout.multiplier(idx) {
            Multiplier::Diagonal(i) => acc.add(i, i, g),
            Multiplier::Pair(i, j) => {
                acc.add(i, i, g);
                acc.add(j, j, g);
                acc.add(i, j, -g);
            }
            Multiplier::Ell => unreachable!(),
        }
    }
    Ok(acc.finish())
}

/// The affine data of `Z(gamma)` for one network and band width.
#[derive(Debug, Clone)]
pub struct SdpProblem {
    dims: DimsProfile,
    layout: GammaLayout,
    sector: (f64, f64),
    z_aff: SymSparse,
    basis: Vec<SymSparse>,
    layer_norms: Vec<f64>,
    slope: f64,
    probed: Vec<f64>,
}

impl SdpProblem {
    pub fn build(net: &Network, tau: usize) -> Result<Self> {
        let dims = DimsProfile::from_network(net);
        let layout = GammaLayout::new(dims.hidden(), tau);
        let act = net.activation();
        let sector = (act.lo, act.hi);
        let big_n = dims.total();
        let depth = dims.depth();
        let n1 = dims.n(1);

        // A^T e_r for every activation r: row of W_{k-1} placed on block k-1.
        let a_rows: Vec<Vec<(usize, f64)>> = (0..dims.hidden())
            .map(|r| {
                let g = n1 + r;
                let k = dims.block_of(g);
                let w = &net.weights()[k - 2];
                let row = g - dims.s(k - 1);
                let cols = dims.block_range(k - 1);
                cols.enumerate().map(|(c, col)| (col, w[(row, c)])).collect()
            })
            .collect();

        let (a, b, c) = sector_coefficients(sector);
        let rank_one = |q: &[(usize, f64)]| {
            let u: Vec<(usize, f64)> = q
                .iter()
                .flat_map(|&(r, s)| a_rows[r].iter().map(move |&(col, v)| (col, s * v)))
                .collect();
            let w: Vec<(usize, f64)> = q.iter().map(|&(r, s)| (n1 + r, s)).collect();
            let mut acc = Accumulator::new(big_n);
            acc.add_sym_outer(a, &u, &u);
            acc.add_sym_outer(2.0 * b, &u, &w);
            acc.add_sym_outer(c, &w, &w);
            acc.finish()
        };

        let mut basis = Vec::with_capacity(layout.len());
        for idx in 0..layout.alpha_len() {
            let m = match layout.multiplier(idx) {
                Multiplier::Diagonal(i) => rank_one(&[(i, 1.0)]),
                Multiplier::Pair(i, j) => rank_one(&[(i, 1.0), (j, -1.0)]),
                Multiplier::Ell => unreachable!(),
            };
            basis.push(m);
        }
        basis.push(SymSparse::from_triplets(big_n, (0..n1).map(|i| (i, i, -1.0))));

        let w_last = &net.weights()[depth - 1];
        let gram = w_last.transpose() * w_last;
        let off = dims.s(depth - 1);
        let z_aff = SymSparse::from_triplets(
            big_n,
            (0..gram.nrows())
                .flat_map(|i| (i..gram.ncols()).map(move |j| (i, j)))
                .map(|(i, j)| (off + i, off + j, gram[(i, j)])),
        );

        let slope = sector.0.abs().max(sector.1.abs());
        let layer_norms = layer_norms(net)?;
        let probed = probe_gains(net, GAIN_PROBES, 0)?;

        Ok(Self { dims, layout, sector, z_aff, basis, layer_norms, slope, probed })
    }

    pub fn dims(&self) -> &DimsProfile {
        &self.dims
    }

    pub fn layout(&self) -> &GammaLayout {
        &self.layout
    }

    pub fn tau(&self) -> usize {
        self.layout.tau()
    }

    /// Side length `N` of `Z`.
    pub fn size(&self) -> usize {
        self.dims.total()
    }

    /// Number of decision variables `d`.
    pub fn num_vars(&self) -> usize {
        self.layout.len()
    }

    pub fn sector(&self) -> (f64, f64) {
        self.sector
    }

    pub fn z_aff(&self) -> &SymSparse {
        &self.z_aff
    }

    pub fn basis(&self) -> &[SymSparse] {
        &self.basis
    }

    /// Spectral norms of the weight matrices.
    pub fn layer_norms(&self) -> &[f64] {
        &self.layer_norms
    }

    /// Largest absolute slope allowed by the activation sector.
    pub fn max_slope(&self) -> f64 {
        self.slope
    }

    /// Gain bound of the input to each block `x_k`: the product of the
    /// preceding layer norms and slopes. One entry per block, the first is 1.
    pub fn block_gains(&self) -> Vec<f64> {
        let mut gains = vec![1.0];
        for k in 1..self.dims.depth() {
            gains.push(gains[k - 1] * self.layer_norms[k - 1] * self.slope);
        }
        gains
    }

    /// Sampled Jacobian gains of each block and of the output, see
    /// [`probe_gains`]. Used only to scale the solver's working problem.
    pub fn probed_gains(&self) -> &[f64] {
        &self.probed
    }

    /// Product of layer norms times the largest slope for every activation
    /// layer; used as the starting `gamma_ell = naive_bound^2`.
    pub fn naive_bound(&self) -> f64 {
        self.block_gains().last().copied().unwrap_or(1.0) * self.layer_norms.last().copied().unwrap_or(0.0)
    }

    /// `e_d`: the objective picks out `gamma_ell`.
    pub fn objective(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.num_vars()];
        c[self.layout.ell()] = 1.0;
        c
    }

    /// `Z(gamma) = z_aff + sum_i gamma_i Z_i`.
    pub fn assemble(&self, gamma: &[f64]) -> Result<SymSparse> {
        if gamma.len() != self.num_vars() {
            return Err(Error::DimensionMismatch { expected: self.num_vars(), got: gamma.len() });
        }
        let mut acc = Accumulator::new(self.size());
        for &(i, j, v) in self.z_aff.upper() {
            acc.add(i, j, v);
        }
        for (g, z) in gamma.iter().zip(&self.basis) {
            if *g != 0.0 {
                for &(i, j, v) in z.upper() {
                    acc.add(i, j, g * v);
                }
            }
        }
        Ok(acc.finish())
    }
}

/// Coefficients `(a, b, c)` of the block multiplier
/// `[[-2 lo hi T, (lo + hi) T], [(lo + hi) T, -2 T]]`.
pub fn sector_coefficients((lo, hi): (f64, f64)) -> (f64, f64, f64) {
    (-2.0 * lo * hi, lo + hi, -2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{random_network, Activation};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sized_net(sizes: &[usize], act: Activation, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = sizes
            .windows(2)
            .map(|w| DMatrix::from_fn(w[1], w[0], |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        Network::without_bias(sizes.to_vec(), weights, act).unwrap()
    }

    /// Straight-line dense evaluation of `Z(gamma)` from explicit `A`, `B`,
    /// `T`, `E_1` and `E_K`.
    fn dense_oracle(net: &Network, tau: usize, gamma: &[f64]) -> DMatrix<f64> {
        let sizes = net.layer_sizes();
        let k_layers = sizes.len() - 1;
        let n: usize = sizes[..k_layers].iter().sum();
        let n_f = n - sizes[0];
        let mut a = DMatrix::zeros(n_f, n);
        let mut b = DMatrix::zeros(n_f, n);
        let (mut row, mut col) = (0, 0);
        for k in 0..k_layers - 1 {
            let w = &net.weights()[k];
            a.view_mut((row, col), (w.nrows(), w.ncols())).copy_from(w);
            row += w.nrows();
            col += w.ncols();
        }
        for r in 0..n_f {
            b[(r, sizes[0] + r)] = 1.0;
        }
        let mut t = DMatrix::zeros(n_f, n_f);
        for i in 0..n_f {
            t[(i, i)] += gamma[i];
        }
        let mut idx = n_f;
        for i in 0..n_f {
            for j in i + 1..n_f {
                if j - i <= tau {
                    let mut e = DVector::zeros(n_f);
                    e[i] = 1.0;
                    e[j] = -1.0;
                    t += &e * e.transpose() * gamma[idx];
                    idx += 1;
                }
            }
        }
        let act = net.activation();
        let (lo, hi) = (act.lo, act.hi);
        let mut q = DMatrix::zeros(2 * n_f, 2 * n_f);
        q.view_mut((0, 0), (n_f, n_f)).copy_from(&(&t * (-2.0 * lo * hi)));
        q.view_mut((0, n_f), (n_f, n_f)).copy_from(&(&t * (lo + hi)));
        q.view_mut((n_f, 0), (n_f, n_f)).copy_from(&(&t * (lo + hi)));
        q.view_mut((n_f, n_f), (n_f, n_f)).copy_from(&(&t * -2.0));
        let mut ab = DMatrix::zeros(2 * n_f, n);
        ab.view_mut((0, 0), (n_f, n)).copy_from(&a);
        ab.view_mut((n_f, 0), (n_f, n)).copy_from(&b);
        let z_alpha = ab.transpose() * q * ab;

        let n_k = sizes[k_layers - 1];
        let mut e_k = DMatrix::zeros(n_k, n);
        for i in 0..n_k {
            e_k[(i, n - n_k + i)] = 1.0;
        }
        let mut e_1 = DMatrix::zeros(sizes[0], n);
        for i in 0..sizes[0] {
            e_1[(i, i)] = 1.0;
        }
        let w_k = &net.weights()[k_layers - 1];
        let gamma_ell = gamma[gamma.len() - 1];
        let z_ell = e_k.transpose() * w_k.transpose() * w_k * &e_k - e_1.transpose() * e_1 * gamma_ell;
        z_alpha + z_ell
    }

    #[test]
    fn dims_of_uniform_profile() {
        let d = DimsProfile::new(&[3, 3, 3, 3, 3, 2]).unwrap();
        assert_eq!((0..=5).map(|k| d.s(k)).collect::<Vec<_>>(), vec![0, 3, 6, 9, 12, 15]);
        assert_eq!(d.total(), 15);
        assert_eq!(d.hidden(), 12);
        // 1-based index 7 sits in layer 3.
        assert_eq!(d.block_of(6), 3);
        assert_eq!(d.block_of(0), 1);
        assert_eq!(d.block_of(14), 5);

        let d2 = DimsProfile::new(&[2, 4, 1]).unwrap();
        assert_eq!((d2.total(), d2.hidden()), (6, 4));
        assert!(DimsProfile::new(&[2, 3]).is_err());
    }

    #[test]
    fn tau_pairs() {
        assert!(TauIndexSet::new(4, 0).is_empty());
        let t2 = TauIndexSet::new(4, 2);
        assert_eq!(t2.pairs(), &[(0, 1), (0, 2), (1, 2), (1, 3), (2, 3)]);
        assert_eq!(TauIndexSet::new(4, 3).len(), 6);
        let clamped = TauIndexSet::new(4, 10);
        assert_eq!((clamped.tau(), clamped.len()), (3, 6));
    }

    #[test]
    fn tau_pairs_match_enumeration() {
        for n_f in 1..12 {
            for tau in 0..14 {
                let brute: Vec<_> = (0..n_f)
                    .flat_map(|i| (0..n_f).map(move |j| (i, j)))
                    .filter(|&(i, j)| i < j && j - i <= tau)
                    .collect();
                let set = TauIndexSet::new(n_f, tau);
                assert_eq!(set.pairs(), brute.as_slice());
                let t = set.tau();
                assert_eq!(set.len(), t * n_f - t * (t + 1) / 2);
            }
        }
    }

    #[test]
    fn build_t_cases() {
        let layout = GammaLayout::new(3, 0);
        assert_eq!(build_t(&layout, &[1.0; 3]).unwrap().to_dense(), DMatrix::identity(3, 3));

        let layout = GammaLayout::new(2, 1);
        let t = build_t(&layout, &[0.0, 0.0, 1.0]).unwrap().to_dense();
        assert_eq!(t, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));

        let layout = GammaLayout::new(3, 2);
        let t = build_t(&layout, &[1.0; 6]).unwrap().to_dense();
        let mut brute = DMatrix::<f64>::identity(3, 3);
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            let mut e = DVector::zeros(3);
            e[i] = 1.0;
            e[j] = -1.0;
            brute += &e * e.transpose();
        }
        assert_eq!(t, brute);

        assert!(matches!(
            build_t(&layout, &[1.0, -1.0, 0.0, 0.0, 0.0, 0.0]),
            Err(Error::NegativeMultiplier { index: 1, .. })
        ));
        assert!(matches!(build_t(&layout, &[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn layout_counts() {
        let layout = GammaLayout::new(12, 2);
        assert_eq!(layout.len(), 12 * 3 - 3 + 1);
        assert_eq!(layout.multiplier(0), Multiplier::Diagonal(0));
        assert_eq!(layout.multiplier(12), Multiplier::Pair(0, 1));
        assert_eq!(layout.multiplier(layout.ell()), Multiplier::Ell);
    }

    #[test]
    fn zero_gamma_gives_last_layer_gram() {
        let net = random_network(4, 3, 5).unwrap();
        let p = SdpProblem::build(&net, 1).unwrap();
        let z = p.assemble(&vec![0.0; p.num_vars()]).unwrap();
        assert_eq!(&z, p.z_aff());
        let off = p.dims().s(2);
        assert!(z.upper().iter().all(|&(i, j, _)| i >= off && j >= off));
        let ell = &p.basis()[p.layout().ell()];
        assert_eq!(ell.upper(), &[(0, 0, -1.0), (1, 1, -1.0)]);
    }

    #[test]
    fn relu_multiplier_has_no_aa_term() {
        assert_eq!(sector_coefficients((0.0, 1.0)), (0.0, 1.0, -2.0));
    }

    #[test]
    fn assembled_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cases = [
            (vec![3, 3, 3, 3, 3, 3], Activation::sector(0.1, 1.0).unwrap(), 0),
            (vec![3, 3, 3, 3, 3, 3], Activation::relu(), 2),
            (vec![2, 4, 3, 5, 2, 2], Activation::sector(-0.3, 0.8).unwrap(), 3),
            (vec![2, 5, 1], Activation::tanh(), 4),
        ];
        for (sizes, act, tau) in cases {
            let net = sized_net(&sizes, act, 3);
            let p = SdpProblem::build(&net, tau).unwrap();
            let gamma: Vec<f64> = (0..p.num_vars()).map(|_| rng.random_range(0.0..2.0)).collect();
            let got = p.assemble(&gamma).unwrap().to_dense();
            let want = dense_oracle(&net, tau, &gamma);
            assert!((got - want).amax() <= 1e-12, "sizes {sizes:?} tau {tau}");
        }
    }

    #[test]
    fn basis_is_linear_and_bias_free() {
        let net = sized_net(&[2, 3, 4, 2], Activation::relu(), 8);
        let biased = net
            .with_biases(vec![DVector::from_element(3, 0.7), DVector::from_element(4, -1.0), DVector::zeros(2)])
            .unwrap();
        let p = SdpProblem::build(&net, 2).unwrap();
        let q = SdpProblem::build(&biased, 2).unwrap();
        assert_eq!(p.z_aff(), q.z_aff());
        assert_eq!(p.basis(), q.basis());

        let d = p.num_vars();
        let g1: Vec<f64> = (0..d).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let g2: Vec<f64> = (0..d).map(|i| (i as f64 * 0.11).cos().abs()).collect();
        let sum: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
        let lhs = p.assemble(&g1).unwrap().to_dense() + p.assemble(&g2).unwrap().to_dense()
            - p.z_aff().to_dense();
        let rhs = p.assemble(&sum).unwrap().to_dense();
        assert!((lhs - rhs).amax() < 1e-12);
        assert!(p.assemble(&g1[1..]).is_err());
    }
}
