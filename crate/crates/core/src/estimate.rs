//! One-call bound computation: method dispatch and optional weight
//! normalization.

use std::time::Instant;

use crate::admm::{solve, BoundReport, Method, SolveOptions, SolveOutput};
use crate::chordal::{maximal_cliques, CliqueSet};
use crate::error::{Error, Result};
use crate::network::{layer_norms, naive_lip, ActivationKind, Network};
use crate::sdp::SdpProblem;

#[derive(Debug, Clone, Default)]
pub struct EstimateOptions {
    pub solve: SolveOptions,
    /// Solve on the network with every layer normalized to unit spectral
    /// norm and scale the result back. Requires relu and zero biases.
    pub scale_weights: bool,
}

#[derive(Debug, Clone)]
pub struct Estimate {
    pub report: BoundReport,
    /// Solver output for SDP methods, in the coordinates of the network that
    /// was actually solved (the normalized one under `scale_weights`).
    pub output: Option<SolveOutput>,
    pub problem: Option<SdpProblem>,
    pub cliques: Option<CliqueSet>,
    /// Product of the normalization factors' inverses; 1 without scaling.
    pub bound_factor: f64,
}

/// Checks that normalizing weights leaves the Lipschitz constant scaled by
/// exactly the product of the factors.
pub fn check_scalable(net: &Network) -> Result<()> {
    if net.activation().kind != ActivationKind::Relu {
        return Err(Error::InvalidArgument(format!(
            "weight scaling needs a positively homogeneous activation (relu), got {}",
            net.activation().kind.name()
        )));
    }
    if !net.has_zero_bias() {
        return Err(Error::InvalidArgument(
            "weight scaling needs zero biases; a bias does not scale with the weights".into(),
        ));
    }
    Ok(())
}

/// Copy of `net` with unit-norm layers and the product of the original norms.
pub fn normalize_weights(net: &Network) -> Result<(Network, f64)> {
    check_scalable(net)?;
    let norms = layer_norms(net)?;
    if let Some(k) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::InvalidArgument(format!("layer {} has zero weights and cannot be normalized", k + 1)));
    }
    let factors: Vec<f64> = norms.iter().map(|n| 1.0 / n).collect();
    Ok((net.scale_weights(&factors)?, norms.iter().product()))
}

pub fn naive_report(net: &Network, tau: usize) -> Result<BoundReport> {
    let start = Instant::now();
    let bound = naive_lip(net)?;
    Ok(BoundReport {
        method: Method::Naive,
        tau,
        gamma_ell: bound * bound,
        lipschitz_bound: bound,
        certified: false,
        iters: 0,
        converged: true,
        primal_residual: 0.0,
        dual_residual: 0.0,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

pub fn estimate(net: &Network, method: Method, tau: usize, opts: &EstimateOptions) -> Result<Estimate> {
    if method == Method::Naive {
        if opts.scale_weights {
            check_scalable(net)?;
        }
        return Ok(Estimate {
            report: naive_report(net, tau)?,
            output: None,
            problem: None,
            cliques: None,
            bound_factor: 1.0,
        });
    }
    let start = Instant::now();
    let (work, factor) = if opts.scale_weights { normalize_weights(net)? } else { (net.clone(), 1.0) };
    let problem = SdpProblem::build(&work, tau)?;
    let cliques = match method {
        Method::Chordal => maximal_cliques(problem.dims(), problem.tau()),
        _ => CliqueSet::single(problem.size()),
    };
    let output = solve(&problem, &cliques, &opts.solve)?;
    let mut report = output.report.clone();
    report.method = method;
    report.gamma_ell *= factor * factor;
    report.lipschitz_bound *= factor;
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(Estimate { report, output: Some(output), problem: Some(problem), cliques: Some(cliques), bound_factor: factor })
}
