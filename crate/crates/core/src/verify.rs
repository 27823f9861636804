//! Independent checks: sampled Lipschitz lower bounds and the
//! decomposition roundtrip for clique-supported negative semidefinite
//! matrices.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::admm::{max_eigenvalue, AdmmSolver, SolveOptions, StopReason};
use crate::chordal::{scatter, CliqueSet};
use crate::error::{Error, Result};
use crate::network::{ActivationKind, Network};
use crate::sparse::SymSparse;

pub const DEFAULT_PAIRS: usize = 10_000;
pub const DEFAULT_LOCAL: usize = 10_000;
pub const DEFAULT_RADIUS: f64 = 1e-4;

/// Largest side length accepted by [`decomposition_roundtrip`].
pub const ROUNDTRIP_LIMIT: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    Pairwise,
    LocalPerturbation,
}

/// Best difference quotient found by sampling. Always a lower bound on the
/// Lipschitz constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundReport {
    pub best_quotient: f64,
    pub best_pair: (Vec<f64>, Vec<f64>),
    pub samples: usize,
    pub mode: SampleMode,
    pub seed: u64,
    pub n_pairs: usize,
    pub n_local: usize,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingOptions {
    pub n_pairs: usize,
    pub n_local: usize,
    pub radius: f64,
    pub seed: u64,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self { n_pairs: DEFAULT_PAIRS, n_local: DEFAULT_LOCAL, radius: DEFAULT_RADIUS, seed: 0 }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
}

/// `max ||f(x) - f(y)|| / ||x - y||` over `n_pairs` independent Gaussian
/// pairs and `n_local` points `x` with `y = x + radius u`, `u` uniform on the
/// sphere. Pairs and local samples come from separate streams of the seed,
/// so raising either count only adds samples.
pub fn lower_bound_sampling(net: &Network, opts: &SamplingOptions) -> Result<LowerBoundReport> {
    if net.activation().kind == ActivationKind::Sector {
        return Err(Error::UnsupportedActivation("sector"));
    }
    if !(opts.radius > 0.0 && opts.radius.is_finite()) {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {}", opts.radius)));
    }
    let n = net.input_dim();
    let mut best = LowerBoundReport {
        best_quotient: 0.0,
        best_pair: (vec![0.0; n], vec![0.0; n]),
        samples: 0,
        mode: SampleMode::Pairwise,
        seed: opts.seed,
        n_pairs: opts.n_pairs,
        n_local: opts.n_local,
        radius: opts.radius,
    };
    let mut consider = |x: DVector<f64>, y: DVector<f64>, mode: SampleMode| -> Result<()> {
        let dist = (&x - &y).norm();
        if dist == 0.0 {
            return Ok(());
        }
        best.samples += 1;
        let q = (net.eval(&x)? - net.eval(&y)?).norm() / dist;
        if q > best.best_quotient {
            best.best_quotient = q;
            best.best_pair = (x.as_slice().to_vec(), y.as_slice().to_vec());
            best.mode = mode;
        }
        Ok(())
    };

    let mut pairs = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.n_pairs {
        let x = gaussian(&mut pairs, n);
        let y = gaussian(&mut pairs, n);
        consider(x, y, SampleMode::Pairwise)?;
    }
    let mut local = ChaCha8Rng::seed_from_u64(opts.seed);
    local.set_stream(1);
    for _ in 0..opts.n_local {
        let x = gaussian(&mut local, n);
        let u = gaussian(&mut local, n);
        let norm = u.norm();
        if norm == 0.0 {
            continue;
        }
        let y = &x + u * (opts.radius / norm);
        consider(x, y, SampleMode::LocalPerturbation)?;
    }
    Ok(best)
}

/// Outcome of [`decomposition_roundtrip`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundtripReport {
    /// Largest eigenvalue of a sum of scattered NSD blocks.
    pub sum_max_eig: f64,
    /// Whether that sum vanishes outside the clique pattern.
    pub sum_supported: bool,
    /// Largest eigenvalue of the pattern-supported test matrix.
    pub target_max_eig: f64,
    /// `max |target - sum_k scatter(z_k)|` after the feasibility solve.
    pub reconstruction: f64,
    /// Largest eigenvalue among the recovered blocks.
    pub blocks_max_eig: f64,
    pub iters: usize,
}

impl RoundtripReport {
    pub fn passed(&self) -> bool {
        self.sum_max_eig <= 1e-9
            && self.sum_supported
            && self.target_max_eig < 0.0
            && self.reconstruction <= 1e-6
            && self.blocks_max_eig <= 1e-9
    }
}

fn random_nsd_block(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let g: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    -(&g * g.transpose())
}

fn scatter_sum(cliques: &CliqueSet, blocks: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let n = cliques.n();
    let mut total = DMatrix::zeros(n, n);
    for (c, b) in cliques.cliques().iter().zip(blocks) {
        total += scatter(*c, b, n)?.to_dense();
    }
    Ok(total)
}

/// Both directions of the clique decomposition on random instances.
///
/// Forward: a sum of scattered NSD blocks is NSD and lives on the clique
/// pattern. Backward: a negative definite matrix on the pattern, built as
/// scattered blocks `-G G^T - I` plus a pattern-supported perturbation of
/// half the spectral margin, is split back into NSD blocks by the ADMM
/// feasibility solve.
pub fn decomposition_roundtrip(cliques: &CliqueSet, seed: u64) -> Result<RoundtripReport> {
    let n = cliques.n();
    if n > ROUNDTRIP_LIMIT {
        return Err(Error::SizeGuard { n, limit: ROUNDTRIP_LIMIT });
    }
    let pattern = cliques.edge_set();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let blocks: Vec<DMatrix<f64>> = cliques.cliques().iter().map(|c| random_nsd_block(&mut rng, c.len())).collect();
    let sum = scatter_sum(cliques, &blocks)?;
    let scale = 1.0 + sum.amax();
    let sum_max_eig = max_eigenvalue(&sum)? / scale;
    let sum_supported = (0..n).all(|i| (0..n).all(|j| pattern.contains(i, j) || sum[(i, j)] == 0.0));

    let shifted: Vec<DMatrix<f64>> = cliques
        .cliques()
        .iter()
        .map(|c| random_nsd_block(&mut rng, c.len()) - DMatrix::identity(c.len(), c.len()))
        .collect();
    let base = scatter_sum(cliques, &shifted)?;
    let margin = -max_eigenvalue(&base)?;
    let mut noise = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            if pattern.contains(i, j) {
                let v: f64 = rng.random_range(-1.0..1.0);
                noise[(i, j)] = v;
                noise[(j, i)] = v;
            }
        }
    }
    let noise_norm = noise.clone().svd(false, false).singular_values.max();
    if noise_norm > 0.0 {
        noise *= 0.5 * margin / noise_norm;
    }
    let target = base + noise;
    let target_max_eig = max_eigenvalue(&target)?;

    let solver = AdmmSolver::new(&SymSparse::from_dense(&target), &[], &[], cliques)?;
    let mut state = solver.initial_state(&[], 1.0);
    let opts = SolveOptions { eps_abs: 1e-12, eps_rel: 1e-10, max_iters: 100_000, ..SolveOptions::default() };
    let stop = solver.run(&mut state, &opts)?;
    if stop != StopReason::Converged {
        return Err(Error::NoConvergence { iters: state.iter });
    }
    let recovered: Vec<DMatrix<f64>> = (0..cliques.len()).map(|k| solver.z_block(&state, k)).collect();
    let reconstruction = (&target - scatter_sum(cliques, &recovered)?).amax();
    let blocks_max_eig = recovered
        .iter()
        .map(max_eigenvalue)
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);

    Ok(RoundtripReport {
        sum_max_eig,
        sum_supported,
        target_max_eig,
        reconstruction,
        blocks_max_eig,
        iters: state.iter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chordal::Clique;
    use crate::network::{naive_lip, random_network, Activation};

    #[test]
    fn identity_network_has_unit_quotients() {
        let relu = Network::without_bias(
            vec![1, 1, 1],
            vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)],
            Activation::relu(),
        )
        .unwrap();
        let lb = lower_bound_sampling(&relu, &SamplingOptions { n_pairs: 200, n_local: 200, ..Default::default() }).unwrap();
        assert!((lb.best_quotient - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_and_below_naive() {
        let net = random_network(6, 3, 4).unwrap();
        let opts = SamplingOptions { n_pairs: 300, n_local: 300, ..Default::default() };
        let a = lower_bound_sampling(&net, &opts).unwrap();
        let b = lower_bound_sampling(&net, &opts).unwrap();
        assert_eq!(a, b);
        assert!(a.best_quotient <= naive_lip(&net).unwrap());
        let (x, y) = &a.best_pair;
        let fx = net.eval(&DVector::from_column_slice(x)).unwrap();
        let fy = net.eval(&DVector::from_column_slice(y)).unwrap();
        let q = (fx - fy).norm() / (DVector::from_column_slice(x) - DVector::from_column_slice(y)).norm();
        assert_eq!(q, a.best_quotient);
    }

    #[test]
    fn sector_nets_are_rejected() {
        let net = Network::without_bias(
            vec![1, 1, 1],
            vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)],
            Activation::sector(0.1, 1.0).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            lower_bound_sampling(&net, &SamplingOptions::default()),
            Err(Error::UnsupportedActivation(_))
        ));
    }

    #[test]
    fn roundtrip_on_small_chains() {
        let single = CliqueSet::single(4);
        assert!(decomposition_roundtrip(&single, 1).unwrap().passed());
        let chain = CliqueSet::from_intervals(3, vec![Clique::new(0, 2), Clique::new(1, 3)]).unwrap();
        let report = decomposition_roundtrip(&chain, 2).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn roundtrip_rejects_large_sizes() {
        let big = CliqueSet::single(ROUNDTRIP_LIMIT + 1);
        assert!(matches!(decomposition_roundtrip(&big, 0), Err(Error::SizeGuard { .. })));
    }
}
