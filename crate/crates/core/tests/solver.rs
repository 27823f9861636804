use lipchord::admm::verify_solution;
use lipchord::estimate::normalize_weights;
use lipchord::verify::{decomposition_roundtrip, lower_bound_sampling, SamplingOptions};
use lipchord::*;
use nalgebra::DMatrix;

fn tight() -> SolveOptions {
    SolveOptions { eps_abs: 1e-10, eps_rel: 1e-8, ..SolveOptions::default() }
}

fn solve_with(net: &Network, tau: usize, dense: bool, opts: &SolveOptions) -> SolveOutput {
    let p = SdpProblem::build(net, tau).unwrap();
    let cs = if dense { CliqueSet::single(p.size()) } else { maximal_cliques(p.dims(), p.tau()) };
    solve(&p, &cs, opts).unwrap()
}

#[test]
fn converged_solve_passes_all_checks() {
    let net = random_network(10, 5, 0).unwrap();
    let p = SdpProblem::build(&net, 0).unwrap();
    let cs = maximal_cliques(p.dims(), 0);
    let out = solve(&p, &cs, &tight()).unwrap();
    assert!(out.report.converged && out.report.certified);
    let check = verify_solution(&p, &cs, &out.gamma, &out.z_blocks).unwrap();
    assert!(check.passed(), "{check:?}");
    assert!(out.report.lipschitz_bound <= naive_lip(&net).unwrap());
}

#[test]
fn feasibility_holds_whenever_converged() {
    for (w, d, seed) in [(3, 2, 0), (4, 3, 1), (5, 4, 2), (6, 3, 3)] {
        let (net, _) = normalize_weights(&random_network(w, d, seed).unwrap()).unwrap();
        for tau in [0, 1] {
            let p = SdpProblem::build(&net, tau).unwrap();
            let cs = maximal_cliques(p.dims(), p.tau());
            let out = solve(&p, &cs, &tight()).unwrap();
            assert!(out.report.converged);
            let check = verify_solution(&p, &cs, &out.gamma, &out.z_blocks).unwrap();
            assert!(check.passed(), "W{w}-D{d} tau {tau}: {check:?}");
        }
    }
}

#[test]
fn single_clique_matches_decomposition() {
    for (w, d, tau) in [(4, 3, 0), (4, 3, 2), (6, 4, 1)] {
        let net = random_network(w, d, 7).unwrap();
        let a = solve_with(&net, tau, false, &SolveOptions::default()).report;
        let b = solve_with(&net, tau, true, &SolveOptions::default()).report;
        assert!(a.converged && b.converged);
        assert_eq!(b.method, Method::Dense);
        let rel = (a.gamma_ell - b.gamma_ell).abs() / b.gamma_ell;
        assert!(rel <= 5e-3, "W{w}-D{d} tau {tau}: {} vs {}", a.gamma_ell, b.gamma_ell);
    }
}

#[test]
fn widening_the_band_never_hurts() {
    let net = random_network(5, 4, 3).unwrap();
    let gammas: Vec<f64> = (0..4).map(|t| solve_with(&net, t, false, &SolveOptions::default()).report.gamma_ell).collect();
    for w in gammas.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-3), "{gammas:?}");
    }
}

#[test]
fn bound_sits_between_sampling_and_naive() {
    for seed in 0..3 {
        let net = random_network(6, 4, seed).unwrap();
        let bound = solve_with(&net, 0, false, &SolveOptions::default()).report.lipschitz_bound;
        let lb = lower_bound_sampling(&net, &SamplingOptions { n_pairs: 2000, n_local: 2000, seed, ..Default::default() })
            .unwrap();
        assert!(lb.best_quotient < bound, "seed {seed}: {} vs {bound}", lb.best_quotient);
        assert!(bound <= naive_lip(&net).unwrap());
    }
}

#[test]
fn weight_scaling_rescales_the_bound() {
    let net = random_network(5, 3, 9).unwrap();
    let factors = [0.5, 2.0, 3.0];
    let scaled = net.scale_weights(&factors).unwrap();
    let a = solve_with(&net, 0, false, &tight()).report.lipschitz_bound;
    let b = solve_with(&scaled, 0, false, &tight()).report.lipschitz_bound / factors.iter().product::<f64>();
    assert!((a - b).abs() <= 1e-4 * a, "{a} vs {b}");
}

#[test]
fn identity_network_has_unit_bound() {
    let net = Network::without_bias(
        vec![2, 2, 2],
        vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
        Activation::relu(),
    )
    .unwrap();
    let r = estimate(&net, Method::Chordal, 0, &EstimateOptions::default()).unwrap().report;
    assert!((r.lipschitz_bound - 1.0).abs() <= 1e-2, "{r:?}");
}

#[test]
fn decomposition_roundtrips_on_layer_cliques() {
    let dims = DimsProfile::new(&[3, 3, 3, 3, 3]).unwrap();
    for tau in [0, 2] {
        let cs = maximal_cliques(&dims, tau);
        for seed in 0..3 {
            let r = decomposition_roundtrip(&cs, seed).unwrap();
            assert!(r.passed(), "tau {tau} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn biases_do_not_change_the_bound() {
    let net = random_network(4, 3, 5).unwrap();
    let biases = net.biases().iter().map(|b| b.map(|_| 0.7)).collect();
    let biased = net.with_biases(biases).unwrap();
    let pa = SdpProblem::build(&net, 1).unwrap();
    let pb = SdpProblem::build(&biased, 1).unwrap();
    assert_eq!(pa.z_aff().to_dense(), pb.z_aff().to_dense());
    // Iterates differ slightly: the preconditioner samples Jacobians, whose
    // relu masks do depend on the biases.
    let a = solve_with(&net, 1, false, &tight()).report.gamma_ell;
    let b = solve_with(&biased, 1, false, &tight()).report.gamma_ell;
    assert!((a - b).abs() <= 1e-5 * a, "{a} vs {b}");
}
