//! ADMM for the clique-decomposed SDP
//!
//! ```text
//! minimize    c^T gamma
//! subject to  gamma >= 0,
//!             z_aff + sum_i gamma_i Z_i = sum_k E_k^T Z_k E_k,
//!             Z_k <= 0   for every clique k,
//! ```
//!
//! split with copies `omega = gamma` and `v_k = z_k`. The `(omega, v)` block
//! carries the affine equality and is solved exactly; the `(gamma, z)` block
//! carries the cones and is a pair of projections. With a single clique
//! covering everything this is the undecomposed problem.
//!
//! Matrices are handled in column-major vectorized form. The scatter maps
//! `H_k = E_k (x) E_k` are never formed: each clique keeps the list of
//! positions its local entries occupy in the covered part of `vec(Z)`.

use std::time::{Duration, Instant};

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::chordal::{Clique, CliqueSet};
use crate::error::{Error, Result};
use crate::sdp::SdpProblem;
use crate::sparse::SymSparse;

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub rho0: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iters: usize,
    pub adapt_rho: bool,
    /// Largest eigenvalue tolerated in a projected block.
    pub nsd_tol: f64,
    /// Iterations between penalty updates and budget checks.
    pub check_every: usize,
    pub time_budget: Option<Duration>,
    /// Solve the diagonally rescaled problem (see [`Preconditioner`]).
    pub precondition: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            rho0: 10.0,
            eps_abs: 1e-8,
            eps_rel: 1e-6,
            max_iters: 200_000,
            adapt_rho: true,
            nsd_tol: 1e-9,
            check_every: 50,
            time_budget: None,
            precondition: true,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rho", self.rho0),
            ("eps_abs", self.eps_abs),
            ("eps_rel", self.eps_rel),
            ("nsd_tol", self.nsd_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.check_every == 0 {
            return Err(Error::InvalidArgument("check interval must be positive".into()));
        }
        Ok(())
    }
}

/// Column-major `vec(M)`.
pub fn vectorize(m: &DMatrix<f64>) -> Vec<f64> {
    m.as_slice().to_vec()
}

/// Inverse of [`vectorize`] for a square matrix.
pub fn matricize(v: &[f64]) -> Result<DMatrix<f64>> {
    let n = (v.len() as f64).sqrt().round() as usize;
    if n * n != v.len() {
        return Err(Error::InvalidArgument(format!("length {} is not a perfect square", v.len())));
    }
    Ok(DMatrix::from_column_slice(n, n, v))
}

/// Euclidean projection of `mat(v)` onto the negative semidefinite cone.
/// The input is symmetrized first.
pub fn project_nsd(v: &[f64]) -> Result<Vec<f64>> {
    let m = matricize(v)?;
    Ok(vectorize(&project_nsd_matrix(&m)?))
}

pub fn project_nsd_matrix(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let sym = (m + m.transpose()) * 0.5;
    let max_abs = sym.amax();
    if n == 0 || max_abs == 0.0 {
        return Ok(sym);
    }
    let eig = SymmetricEigen::try_new(sym.clone(), f64::EPSILON, 0)
        .ok_or(Error::Eigen { n, max_abs })?;
    let positive = eig.eigenvalues.iter().filter(|&&l| l > 0.0).count();
    if positive == 0 {
        return Ok(sym);
    }
    // Reassemble from whichever side of the spectrum is smaller.
    let mut out;
    if 2 * positive <= n {
        out = sym;
        for (i, &l) in eig.eigenvalues.iter().enumerate() {
            if l > 0.0 {
                let q = eig.eigenvectors.column(i);
                out.ger(-l, &q, &q, 1.0);
            }
        }
    } else {
        out = DMatrix::zeros(n, n);
        for (i, &l) in eig.eigenvalues.iter().enumerate() {
            if l < 0.0 {
                let q = eig.eigenvectors.column(i);
                out.ger(l, &q, &q, 1.0);
            }
        }
    }
    let t = out.transpose();
    out += t;
    out *= 0.5;
    Ok(out)
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    let n = m.nrows();
    if n == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    let sym = (m + m.transpose()) * 0.5;
    let max_abs = sym.amax();
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 0).ok_or(Error::Eigen { n, max_abs })?;
    Ok(eig.eigenvalues.max())
}

const UNCOVERED: u32 = u32::MAX;

/// Covered positions of `vec(Z)` and their clique overlap counts.
#[derive(Debug, Clone)]
pub struct VecSpace {
    n: usize,
    /// Column-major indices `i + j n` covered by some `C_k x C_k`, sorted.
    covered: Vec<usize>,
    /// Number of cliques covering each covered position (`D`).
    overlap: Vec<f64>,
    /// `vec` index to covered position, or `UNCOVERED`.
    lookup: Vec<u32>,
    /// Per clique, covered position of each local column-major entry.
    maps: Vec<Vec<u32>>,
}

impl VecSpace {
    pub fn new(cliques: &CliqueSet) -> Self {
        let n = cliques.n();
        let mut count = vec![0u32; n * n];
        for c in cliques.cliques() {
            for j in c.range() {
                for i in c.range() {
                    count[i + j * n] += 1;
                }
            }
        }
        let mut lookup = vec![UNCOVERED; n * n];
        let mut covered = Vec::new();
        let mut overlap = Vec::new();
        for (idx, &cnt) in count.iter().enumerate() {
            if cnt > 0 {
                lookup[idx] = covered.len() as u32;
                covered.push(idx);
                overlap.push(cnt as f64);
            }
        }
        let maps = cliques
            .cliques()
            .iter()
            .map(|c| {
                c.range()
                    .flat_map(|j| c.range().map(move |i| (i, j)))
                    .map(|(i, j)| lookup[i + j * n])
                    .collect()
            })
            .collect();
        Self { n, covered, overlap, lookup, maps }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.covered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covered.is_empty()
    }

    pub fn covered(&self) -> &[usize] {
        &self.covered
    }

    pub fn overlap(&self) -> &[f64] {
        &self.overlap
    }

    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let p = self.lookup[i + j * self.n];
        (p != UNCOVERED).then_some(p as usize)
    }

    /// Covered position of each local entry of clique `k`.
    pub fn clique_map(&self, k: usize) -> &[u32] {
        &self.maps[k]
    }

    /// `H_k x`: the clique's principal block of a covered vector.
    pub fn gather(&self, k: usize, x: &[f64]) -> Vec<f64> {
        self.maps[k].iter().map(|&p| x[p as usize]).collect()
    }

    /// `acc += H_k^T x_k`.
    pub fn scatter_add(&self, k: usize, xk: &[f64], acc: &mut [f64]) {
        for (&p, &v) in self.maps[k].iter().zip(xk) {
            acc[p as usize] += v;
        }
    }

    /// Covered vector of a sparse symmetric matrix; errors if any nonzero
    /// falls outside the cliques.
    fn embed(&self, m: &SymSparse) -> Result<Vec<(u32, f64)>> {
        m.iter_full()
            .map(|(i, j, v)| {
                self.position(i, j)
                    .map(|p| (p as u32, v))
                    .ok_or_else(|| Error::InvalidArgument(format!(
                        "entry ({}, {}) is not covered by any clique",
                        i + 1,
                        j + 1
                    )))
            })
            .collect()
    }
}

/// Iterates of the split problem.
#[derive(Debug, Clone)]
pub struct AdmmState {
    pub omega: Vec<f64>,
    pub v: Vec<Vec<f64>>,
    pub gamma: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub lambda: Vec<Vec<f64>>,
    pub rho: f64,
    pub iter: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub history: Vec<ResidualSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualSample {
    pub iter: usize,
    pub primal: f64,
    pub dual: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopReason {
    Converged,
    MaxIters,
    TimeBudget,
}

/// Precomputed structure for one problem and clique set.
#[derive(Debug, Clone)]
pub struct AdmmSolver {
    space: VecSpace,
    cliques: Vec<Clique>,
    /// Sparse columns `vec(Z_i)` over covered positions.
    j_cols: Vec<Vec<(u32, f64)>>,
    z_aff: Vec<f64>,
    cost: Vec<f64>,
    /// Cholesky factor of `I + J^T D^{-1} J`.
    small: Option<Cholesky<f64, Dyn>>,
    data_norm: f64,
}

impl AdmmSolver {
    /// General form: `z_aff + sum_i gamma_i basis_i` decomposed over `cliques`,
    /// minimizing `cost^T gamma`.
    pub fn new(z_aff: &SymSparse, basis: &[SymSparse], cost: &[f64], cliques: &CliqueSet) -> Result<Self> {
        if cost.len() != basis.len() {
            return Err(Error::DimensionMismatch { expected: basis.len(), got: cost.len() });
        }
        if z_aff.n() != cliques.n() {
            return Err(Error::DimensionMismatch { expected: cliques.n(), got: z_aff.n() });
        }
        let space = VecSpace::new(cliques);
        let mut z_vec = vec![0.0; space.len()];
        for (p, v) in space.embed(z_aff)? {
            z_vec[p as usize] += v;
        }
        let j_cols: Vec<Vec<(u32, f64)>> = basis.iter().map(|b| space.embed(b)).collect::<Result<_>>()?;

        let data_norm = j_cols
            .iter()
            .flatten()
            .map(|e| e.1.abs())
            .chain(z_vec.iter().map(|v| v.abs()))
            .fold(0.0, f64::max);

        let small = if j_cols.is_empty() {
            None
        } else {
            Some(Self::factor_small(&space, &j_cols)?)
        };
        Ok(Self {
            space,
            cliques: cliques.cliques().to_vec(),
            j_cols,
            z_aff: z_vec,
            cost: cost.to_vec(),
            small,
            data_norm,
        })
    }

    pub fn for_problem(problem: &SdpProblem, cliques: &CliqueSet) -> Result<Self> {
        Self::new(problem.z_aff(), problem.basis(), &problem.objective(), cliques)
    }

    fn factor_small(space: &VecSpace, j_cols: &[Vec<(u32, f64)>]) -> Result<Cholesky<f64, Dyn>> {
        let d = j_cols.len();
        let mut g = DMatrix::<f64>::identity(d, d);
        let mut buf = vec![0.0; space.len()];
        // Columns touching each covered position, to visit only overlapping pairs.
        let mut touching: Vec<Vec<u32>> = vec![Vec::new(); space.len()];
        for (c, col) in j_cols.iter().enumerate() {
            for &(p, _) in col {
                touching[p as usize].push(c as u32);
            }
        }
        let mut partners = vec![false; d];
        for (a, col) in j_cols.iter().enumerate() {
            for &(p, v) in col {
                buf[p as usize] = v / space.overlap[p as usize];
                for &b in &touching[p as usize] {
                    partners[b as usize] = true;
                }
            }
            for b in a..d {
                if !partners[b] {
                    continue;
                }
                partners[b] = false;
                let dot: f64 = j_cols[b].iter().map(|&(p, v)| v * buf[p as usize]).sum();
                g[(a, b)] += dot;
                if a != b {
                    g[(b, a)] += dot;
                }
            }
            for b in 0..a {
                partners[b] = false;
            }
            for &(p, _) in col {
                buf[p as usize] = 0.0;
            }
        }
        Cholesky::new(g).ok_or(Error::LinearSolve)
    }

    pub fn space(&self) -> &VecSpace {
        &self.space
    }

    pub fn cliques(&self) -> &[Clique] {
        &self.cliques
    }

    pub fn num_vars(&self) -> usize {
        self.j_cols.len()
    }

    /// Largest absolute entry among `z_aff` and the basis columns.
    pub fn data_norm(&self) -> f64 {
        self.data_norm
    }

    /// `J x` over covered positions, added into `out`.
    fn j_mul_add(&self, x: &[f64], out: &mut [f64]) {
        for (col, &xi) in self.j_cols.iter().zip(x) {
            if xi != 0.0 {
                for &(p, v) in col {
                    out[p as usize] += xi * v;
                }
            }
        }
    }

    fn jt_mul(&self, y: &[f64]) -> Vec<f64> {
        self.j_cols.iter().map(|col| col.iter().map(|&(p, v)| v * y[p as usize]).sum()).collect()
    }

    /// Solves `(J J^T + D) y = r` in place by the Woodbury identity.
    fn solve_reduced(&self, r: &mut [f64]) {
        for (x, d) in r.iter_mut().zip(&self.space.overlap) {
            *x /= d;
        }
        let Some(chol) = &self.small else { return };
        let s = nalgebra::DVector::from_vec(self.jt_mul(r));
        let s = chol.solve(&s);
        for (col, &si) in self.j_cols.iter().zip(s.iter()) {
            for &(p, v) in col {
                r[p as usize] -= si * v / self.space.overlap[p as usize];
            }
        }
    }

    /// Starting point with the given `gamma` (copied into `omega`) and all
    /// matrix blocks and multipliers zero.
    pub fn initial_state(&self, gamma0: &[f64], rho: f64) -> AdmmState {
        let blocks: Vec<Vec<f64>> = self.cliques.iter().map(|c| vec![0.0; c.len() * c.len()]).collect();
        AdmmState {
            omega: gamma0.to_vec(),
            v: blocks.clone(),
            gamma: gamma0.to_vec(),
            z: blocks.clone(),
            mu: vec![0.0; gamma0.len()],
            lambda: blocks,
            rho,
            iter: 0,
            primal_residual: f64::INFINITY,
            dual_residual: f64::INFINITY,
            history: Vec::new(),
        }
    }

    /// Exact minimization over `(omega, v)` subject to the affine equality.
    pub fn update_omega_v(&self, s: &mut AdmmState) {
        let rho = s.rho;
        let mut r: Vec<f64> = self.z_aff.iter().map(|z| rho * z).collect();
        for k in 0..self.cliques.len() {
            for ((&p, &zk), &lk) in self.space.maps[k].iter().zip(&s.z[k]).zip(&s.lambda[k]) {
                r[p as usize] -= rho * zk + lk;
            }
        }
        let shift: Vec<f64> = s
            .gamma
            .iter()
            .zip(&s.mu)
            .zip(&self.cost)
            .map(|((g, m), c)| rho * g + m - c)
            .collect();
        self.j_mul_add(&shift, &mut r);
        self.solve_reduced(&mut r);
        let y = r;

        let jty = self.jt_mul(&y);
        for i in 0..s.omega.len() {
            s.omega[i] = s.gamma[i] + (s.mu[i] - self.cost[i] - jty[i]) / rho;
        }
        for k in 0..self.cliques.len() {
            let map = &self.space.maps[k];
            for (l, &p) in map.iter().enumerate() {
                s.v[k][l] = s.z[k][l] + (s.lambda[k][l] + y[p as usize]) / rho;
            }
        }
    }

    /// `gamma = max(0, omega - mu / rho)`, `z_k = P(v_k - lambda_k / rho)`.
    pub fn update_gamma_z(&self, s: &mut AdmmState) -> Result<()> {
        let rho = s.rho;
        for ((g, o), m) in s.gamma.iter_mut().zip(&s.omega).zip(&s.mu) {
            *g = (o - m / rho).max(0.0);
        }
        for (k, c) in self.cliques.iter().enumerate() {
            let n = c.len();
            let arg = DMatrix::from_iterator(n, n, s.v[k].iter().zip(&s.lambda[k]).map(|(v, l)| v - l / rho));
            let proj = project_nsd_matrix(&arg)?;
            s.z[k].copy_from_slice(proj.as_slice());
        }
        Ok(())
    }

    pub fn update_duals(&self, s: &mut AdmmState) {
        let rho = s.rho;
        for ((m, g), o) in s.mu.iter_mut().zip(&s.gamma).zip(&s.omega) {
            *m += rho * (g - o);
        }
        for k in 0..self.cliques.len() {
            for ((l, z), v) in s.lambda[k].iter_mut().zip(&s.z[k]).zip(&s.v[k]) {
                *l += rho * (z - v);
            }
        }
    }

    /// One full iteration; refreshes the residuals stored on the state.
    pub fn step(&self, s: &mut AdmmState) -> Result<()> {
        let gamma_prev = s.gamma.clone();
        let z_prev = s.z.clone();
        self.update_omega_v(s);
        self.update_gamma_z(s)?;
        self.update_duals(s);
        s.iter += 1;

        let primal = dist(&s.gamma, &s.omega).max(
            s.z.iter().zip(&s.v).map(|(z, v)| dist(z, v)).fold(0.0, f64::max),
        );
        let dual = s.rho
            * dist(&s.gamma, &gamma_prev)
                .max(s.z.iter().zip(&z_prev).map(|(a, b)| dist(a, b)).fold(0.0, f64::max));
        s.primal_residual = primal;
        s.dual_residual = dual;
        Ok(())
    }

    /// `max |J omega + z_aff - sum_k H_k^T v_k|` over covered positions.
    pub fn affine_residual(&self, s: &AdmmState) -> f64 {
        let mut r = self.z_aff.clone();
        self.j_mul_add(&s.omega, &mut r);
        for k in 0..self.cliques.len() {
            for (&p, &v) in self.space.maps[k].iter().zip(&s.v[k]) {
                r[p as usize] -= v;
            }
        }
        r.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    fn tolerances(&self, s: &AdmmState, opts: &SolveOptions) -> (f64, f64) {
        let block_len: usize = s.z.iter().map(Vec::len).sum();
        let dim = ((s.gamma.len() + block_len) as f64).sqrt();
        let stacked = |a: &[f64], b: &[Vec<f64>]| {
            (sq(a) + b.iter().map(|x| sq(x)).sum::<f64>()).sqrt()
        };
        let scale_p = stacked(&s.gamma, &s.z).max(stacked(&s.omega, &s.v));
        let scale_d = stacked(&s.mu, &s.lambda);
        (
            opts.eps_abs * dim + opts.eps_rel * scale_p,
            opts.eps_abs * dim + opts.eps_rel * scale_d,
        )
    }

    /// Iterates from `state` until the stopping rule, the iteration cap, or
    /// the time budget.
    pub fn run(&self, state: &mut AdmmState, opts: &SolveOptions) -> Result<StopReason> {
        opts.validate()?;
        let start = Instant::now();
        Ok(self.run_until(state, opts, opts.max_iters, start)?.unwrap_or(StopReason::MaxIters))
    }

    /// Like [`run`](Self::run) but pauses once `state.iter` reaches `limit`,
    /// returning `None`. The time budget is measured from `start`.
    pub fn run_until(
        &self,
        state: &mut AdmmState,
        opts: &SolveOptions,
        limit: usize,
        start: Instant,
    ) -> Result<Option<StopReason>> {
        let limit = limit.min(opts.max_iters);
        while state.iter < limit {
            self.step(state)?;
            let (eps_p, eps_d) = self.tolerances(state, opts);
            if state.primal_residual <= eps_p && state.dual_residual <= eps_d {
                return Ok(Some(StopReason::Converged));
            }
            if state.iter.is_multiple_of(opts.check_every) {
                state.history.push(ResidualSample {
                    iter: state.iter,
                    primal: state.primal_residual,
                    dual: state.dual_residual,
                    rho: state.rho,
                });
                // mu and lambda are unscaled multipliers, so they stay put
                // when rho changes.
                if opts.adapt_rho {
                    let (p, d) = (state.primal_residual / eps_p, state.dual_residual / eps_d);
                    if p > 10.0 * d {
                        state.rho *= 2.0;
                    } else if d > 10.0 * p {
                        state.rho /= 2.0;
                    }
                }
                if opts.time_budget.is_some_and(|b| start.elapsed() > b) {
                    return Ok(Some(StopReason::TimeBudget));
                }
            }
        }
        Ok((state.iter >= opts.max_iters).then_some(StopReason::MaxIters))
    }

    /// Block `k` of `z` as a matrix.
    pub fn z_block(&self, s: &AdmmState, k: usize) -> DMatrix<f64> {
        let n = self.cliques[k].len();
        DMatrix::from_column_slice(n, n, &s.z[k])
    }
}

fn sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Chordal,
    Dense,
    Naive,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Chordal => "chordal",
            Method::Dense => "dense",
            Method::Naive => "naive",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chordal" => Ok(Method::Chordal),
            "dense" => Ok(Method::Dense),
            "naive" => Ok(Method::Naive),
            other => Err(Error::InvalidArgument(format!("unknown method `{other}`"))),
        }
    }
}

/// Result of one bound computation, in its JSON shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundReport {
    pub method: Method,
    pub tau: usize,
    pub gamma_ell: f64,
    pub lipschitz_bound: f64,
    /// Only converged `tau = 0` SDP solves certify the bound.
    pub certified: bool,
    pub iters: usize,
    pub converged: bool,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub wall_time_s: f64,
}

/// Solver output: the report plus the final iterates needed to check it.
#[derive(Debug, Clone)]
pub struct SolveOutput {
    pub report: BoundReport,
    pub stop: StopReason,
    pub gamma: Vec<f64>,
    pub z_blocks: Vec<DMatrix<f64>>,
    pub history: Vec<ResidualSample>,
}

/// Exact rescaling of the constraint before it reaches ADMM.
///
/// `Z(gamma) <= 0` holds iff `D Z(gamma) D <= 0` for a positive diagonal `D`,
/// and congruence keeps the sparsity pattern, so any such `D` leaves the
/// problem unchanged. `D` is constant on each block `x_k`. Each multiplier is
/// then rescaled so its basis matrix has unit largest entry,
/// `gamma_i = col_scale_i * scaled_gamma_i`, and the cost is normalized to
/// unit largest entry.
#[derive(Debug, Clone)]
pub struct Preconditioner {
    /// One factor per block `x_1, ..., x_K`.
    pub block_scale: Vec<f64>,
    pub col_scale: Vec<f64>,
    pub cost_scale: f64,
}

impl Preconditioner {
    pub fn identity(problem: &SdpProblem) -> Self {
        Self::with_blocks(problem, vec![1.0; problem.dims().depth()], false)
    }

    /// Initial guess: each block scaled by its gain from the input, taken
    /// halfway (geometrically) between the sampled Jacobian gains and the
    /// products of layer norms, over the same for the whole network.
    pub fn for_problem(problem: &SdpProblem) -> Self {
        let depth = problem.dims().depth();
        let naive = problem.block_gains();
        let probed = problem.probed_gains();
        let usable = |g: f64| g > 0.0 && g.is_finite();
        let naive_total = problem.naive_bound();
        if !usable(naive_total) || naive.iter().any(|&g| !usable(g)) {
            return Self::identity(problem);
        }
        let mix = |n: f64, p: f64| if usable(p) { (n * p).sqrt() } else { n };
        let total = mix(naive_total, probed[depth]);
        let blocks = (0..depth).map(|k| mix(naive[k], probed[k]) / total).collect();
        Self::with_blocks(problem, blocks, true)
    }

    fn with_blocks(problem: &SdpProblem, block_scale: Vec<f64>, scale_cols: bool) -> Self {
        let dims = problem.dims();
        let row = |i: usize| block_scale[dims.block_of(i) - 1];
        let col_scale: Vec<f64> = problem
            .basis()
            .iter()
            .map(|b| {
                let m = b.upper().iter().fold(0.0_f64, |m, &(i, j, v)| m.max((v * row(i) * row(j)).abs()));
                if scale_cols && m > 0.0 { 1.0 / m } else { 1.0 }
            })
            .collect();
        let top = problem.objective().iter().zip(&col_scale).fold(0.0_f64, |m, (c, s)| m.max((c * s).abs()));
        let cost_scale = if scale_cols && top > 0.0 { 1.0 / top } else { 1.0 };
        Self { block_scale, col_scale, cost_scale }
    }

    fn row_scale(&self, problem: &SdpProblem) -> Vec<f64> {
        let dims = problem.dims();
        (0..problem.size()).map(|i| self.block_scale[dims.block_of(i) - 1]).collect()
    }

    /// Scaled `(z_aff, basis, cost)`.
    pub fn scaled_data(&self, problem: &SdpProblem) -> (SymSparse, Vec<SymSparse>, Vec<f64>) {
        let d = self.row_scale(problem);
        let apply = |m: &SymSparse, factor: f64| {
            SymSparse::from_triplets(m.n(), m.upper().iter().map(|&(i, j, v)| (i, j, factor * v * d[i] * d[j])))
        };
        let z_aff = apply(problem.z_aff(), 1.0);
        let basis = problem.basis().iter().zip(&self.col_scale).map(|(b, &s)| apply(b, s)).collect();
        let cost = problem
            .objective()
            .iter()
            .zip(&self.col_scale)
            .map(|(c, s)| c * s * self.cost_scale)
            .collect();
        (z_aff, basis, cost)
    }

    /// Undoes the congruence on one clique block.
    pub fn unscale_block(&self, problem: &SdpProblem, clique: Clique, block: &DMatrix<f64>) -> DMatrix<f64> {
        let dims = problem.dims();
        let d: Vec<f64> = clique.range().map(|i| self.block_scale[dims.block_of(i) - 1]).collect();
        DMatrix::from_fn(block.nrows(), block.ncols(), |i, j| block[(i, j)] / (d[i] * d[j]))
    }

    pub fn unscale_gamma(&self, gamma: &[f64]) -> Vec<f64> {
        gamma.iter().zip(&self.col_scale).map(|(g, s)| g * s).collect()
    }
}

/// Largest per-block correction that still counts as balanced.
const BALANCE_TOL: f64 = 1.5;
/// Per-round cap on a block correction.
const BALANCE_STEP: f64 = 10.0;
/// Iterations before the first rebalance; the interval doubles afterwards.
const FIRST_REBALANCE: usize = 200;
const MAX_REBALANCES: usize = 16;

/// Per-block factors that equalize the diagonal magnitude of the primal
/// blocks `z` against the multipliers `lambda`, normalized to unit geometric
/// mean.
fn balance_factors(problem: &SdpProblem, cliques: &CliqueSet, state: &AdmmState) -> Vec<f64> {
    let dims = problem.dims();
    let depth = dims.depth();
    let mut zd = vec![0.0; depth];
    let mut xd = vec![0.0; depth];
    for (k, c) in cliques.cliques().iter().enumerate() {
        let m = c.len();
        for (l, i) in c.range().enumerate() {
            let b = dims.block_of(i) - 1;
            zd[b] += state.z[k][l + l * m].abs();
            xd[b] += state.lambda[k][l + l * m].abs();
        }
    }
    let mut f: Vec<f64> = zd
        .iter()
        .zip(&xd)
        .map(|(&z, &x)| if z > 0.0 && x > 0.0 { (x / z).powf(0.25) } else { 1.0 })
        .collect();
    let mean = (f.iter().map(|v| v.ln()).sum::<f64>() / depth as f64).exp();
    for v in &mut f {
        *v = (*v / mean).clamp(1.0 / BALANCE_STEP, BALANCE_STEP);
    }
    f
}

/// Moves `state` from the coordinates of `old` into those of `new`, whose
/// block scales differ by `f`. Every iterate maps exactly.
fn transform_state(
    problem: &SdpProblem,
    cliques: &CliqueSet,
    old: &Preconditioner,
    new: &Preconditioner,
    f: &[f64],
    state: &mut AdmmState,
) {
    let dims = problem.dims();
    let dual_ratio = new.cost_scale / old.cost_scale;
    for i in 0..state.gamma.len() {
        let r = old.col_scale[i] / new.col_scale[i];
        state.gamma[i] *= r;
        state.omega[i] *= r;
        state.mu[i] *= dual_ratio / r;
    }
    for (k, c) in cliques.cliques().iter().enumerate() {
        let fk: Vec<f64> = c.range().map(|i| f[dims.block_of(i) - 1]).collect();
        let m = c.len();
        for j in 0..m {
            for i in 0..m {
                let p = fk[i] * fk[j];
                let idx = i + j * m;
                state.z[k][idx] *= p;
                state.v[k][idx] *= p;
                state.lambda[k][idx] *= dual_ratio / p;
            }
        }
    }
}

/// Minimizes `gamma_ell` over the decomposition given by `cliques`. Passing
/// [`CliqueSet::single`] solves the undecomposed problem.
///
/// With `opts.precondition` the solver works on a rescaled copy of the
/// problem and periodically re-balances the per-block scaling from the
/// current iterates; convergence is accepted only once the scaling is
/// balanced. The reported `gamma` and blocks are always in the original
/// coordinates.
pub fn solve(problem: &SdpProblem, cliques: &CliqueSet, opts: &SolveOptions) -> Result<SolveOutput> {
    opts.validate()?;
    let start = Instant::now();
    let ell = problem.layout().ell();
    let mut pre = if opts.precondition { Preconditioner::for_problem(problem) } else { Preconditioner::identity(problem) };
    let build = |pre: &Preconditioner| {
        let (z_aff, basis, cost) = pre.scaled_data(problem);
        AdmmSolver::new(&z_aff, &basis, &cost, cliques)
    };
    let mut solver = build(&pre)?;
    let mut gamma0 = vec![0.0; problem.num_vars()];
    gamma0[ell] = problem.naive_bound().powi(2) / pre.col_scale[ell];
    let mut state = solver.initial_state(&gamma0, opts.rho0);

    let mut rebalances = 0;
    let mut next = FIRST_REBALANCE;
    let stop = loop {
        let limit = if opts.precondition && rebalances < MAX_REBALANCES { next } else { opts.max_iters };
        let stop = solver.run_until(&mut state, opts, limit, start)?;
        if matches!(stop, Some(StopReason::MaxIters | StopReason::TimeBudget)) || !opts.precondition {
            break stop.unwrap_or(StopReason::MaxIters);
        }
        if rebalances >= MAX_REBALANCES {
            if let Some(s) = stop {
                break s;
            }
            continue;
        }
        let f = balance_factors(problem, cliques, &state);
        let balanced = f.iter().all(|v| (1.0 / BALANCE_TOL..=BALANCE_TOL).contains(v));
        if balanced {
            if let Some(s) = stop {
                break s;
            }
        } else {
            let blocks = pre.block_scale.iter().zip(&f).map(|(a, b)| a * b).collect();
            let new = Preconditioner::with_blocks(problem, blocks, true);
            transform_state(problem, cliques, &pre, &new, &f, &mut state);
            pre = new;
            solver = build(&pre)?;
            rebalances += 1;
            log::debug!("rebalanced block scaling at iteration {}", state.iter);
        }
        next = state.iter + (FIRST_REBALANCE << rebalances.min(20));
    };

    let gamma = pre.unscale_gamma(&state.gamma);
    let gamma_ell = gamma[ell];
    let converged = stop == StopReason::Converged;
    let method = if cliques.len() == 1 && problem.size() > 0 && cliques.cliques()[0].len() == problem.size() {
        Method::Dense
    } else {
        Method::Chordal
    };
    let report = BoundReport {
        method,
        tau: problem.tau(),
        gamma_ell,
        lipschitz_bound: gamma_ell.max(0.0).sqrt(),
        certified: converged && problem.tau() == 0,
        iters: state.iter,
        converged,
        primal_residual: state.primal_residual,
        dual_residual: state.dual_residual,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let z_blocks = cliques
        .cliques()
        .iter()
        .enumerate()
        .map(|(k, &c)| pre.unscale_block(problem, c, &solver.z_block(&state, k)))
        .collect();
    Ok(SolveOutput { report, stop, gamma, z_blocks, history: state.history })
}

/// One named check of [`verify_solution`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value, threshold, passed: value <= threshold }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionCheck {
    pub checks: Vec<Check>,
}

impl SolutionCheck {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Independent feasibility checks of a solver output: reconstruction of
/// `Z(gamma)` from the blocks, block semidefiniteness, `gamma >= 0`, and
/// semidefiniteness of the full `Z(gamma)` by a dense eigensolve.
pub fn verify_solution(
    problem: &SdpProblem,
    cliques: &CliqueSet,
    gamma: &[f64],
    z_blocks: &[DMatrix<f64>],
) -> Result<SolutionCheck> {
    if z_blocks.len() != cliques.len() {
        return Err(Error::DimensionMismatch { expected: cliques.len(), got: z_blocks.len() });
    }
    let z = problem.assemble(gamma)?.to_dense();
    let mut sum = DMatrix::zeros(problem.size(), problem.size());
    for (c, b) in cliques.cliques().iter().zip(z_blocks) {
        if b.nrows() != c.len() || b.ncols() != c.len() {
            return Err(Error::DimensionMismatch { expected: c.len(), got: b.nrows() });
        }
        let mut view = sum.view_mut((c.start, c.start), (c.len(), c.len()));
        view += b;
    }
    let z_inf = z.amax();
    let recon = (&z - &sum).amax();
    let block_max = z_blocks
        .iter()
        .map(max_eigenvalue)
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    let gamma_min = gamma.iter().copied().fold(f64::INFINITY, f64::min);
    let global_max = max_eigenvalue(&z)?;
    Ok(SolutionCheck {
        checks: vec![
            Check::at_most("reconstruction", recon, 1e-6 * (1.0 + z_inf)),
            Check::at_most("block_nsd", block_max, 1e-6),
            Check::at_most("gamma_nonnegative", -gamma_min, 1e-12),
            Check::at_most("global_nsd", global_max, 1e-6),
        ],
    })
}
