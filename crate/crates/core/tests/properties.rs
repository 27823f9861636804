use lipchord::admm::{matricize, project_nsd, vectorize};
use lipchord::chordal::{check_chordal, oracle_edge_set};
use lipchord::network::spectral_norm;
use lipchord::verify::{lower_bound_sampling, SamplingOptions};
use lipchord::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sym_matrix(max_n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (1..=max_n).prop_flat_map(|n| {
        prop::collection::vec(-5.0..5.0f64, n * n).prop_map(move |v| {
            let m = DMatrix::from_vec(n, n, v);
            (&m + m.transpose()) * 0.5
        })
    })
}

fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 3..6)
}

fn random_net(sizes: &[usize], seed: u64, act: Activation) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = sizes.windows(2).map(|w| DMatrix::from_fn(w[1], w[0], |_, _| rng.random_range(-1.0..1.0))).collect();
    Network::without_bias(sizes.to_vec(), weights, act).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_idempotent_and_nonexpansive(a in sym_matrix(8), seed in 0u64..1000) {
        let n = a.nrows();
        let b = DMatrix::from_fn(n, n, |i, j| a[(i, j)] + ((i * 7 + j * 3 + seed as usize) % 5) as f64 - 2.0);
        let b = (&b + b.transpose()) * 0.5;
        let pa = project_nsd(&vectorize(&a)).unwrap();
        let ppa = project_nsd(&pa).unwrap();
        let diff: f64 = pa.iter().zip(&ppa).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        prop_assert!(diff <= 1e-10);
        let pb = project_nsd(&vectorize(&b)).unwrap();
        let out = (matricize(&pa).unwrap() - matricize(&pb).unwrap()).norm();
        prop_assert!(out <= (&a - &b).norm() + 1e-10);
    }

    #[test]
    fn vec_and_mat_are_inverse(a in sym_matrix(6)) {
        prop_assert_eq!(matricize(&vectorize(&a)).unwrap(), a);
    }

    #[test]
    fn spectral_norm_is_transpose_invariant(v in prop::collection::vec(-3.0..3.0f64, 12)) {
        let m = DMatrix::from_vec(3, 4, v);
        let a = spectral_norm(&m, 1e-12).unwrap();
        let b = spectral_norm(&m.transpose(), 1e-12).unwrap();
        let svd = m.clone().svd(false, false).singular_values.max();
        prop_assert!((a - b).abs() <= 1e-6 * (1.0 + svd));
        prop_assert!((a - svd).abs() <= 1e-6 * (1.0 + svd));
    }

    #[test]
    fn relu_nets_are_positively_homogeneous(sizes in dims_strategy(), seed in 0u64..1000, alpha in 0.01..20.0f64) {
        let net = random_net(&sizes, seed, Activation::relu());
        let x = DVector::from_fn(sizes[0], |i, _| (i as f64 * 0.37).sin());
        let lhs = net.eval(&(&x * alpha)).unwrap();
        let rhs = net.eval(&x).unwrap() * alpha;
        prop_assert!((lhs - rhs).amax() <= 1e-12 * (1.0 + alpha));
    }

    #[test]
    fn sampled_lower_bound_never_exceeds_naive(sizes in dims_strategy(), seed in 0u64..1000) {
        let net = random_net(&sizes, seed, Activation::tanh());
        let lb = lower_bound_sampling(&net, &SamplingOptions { n_pairs: 100, n_local: 100, seed, ..Default::default() }).unwrap();
        prop_assert!(lb.best_quotient <= naive_lip(&net).unwrap() * (1.0 + 1e-9));
    }

    #[test]
    fn assembly_is_affine(sizes in dims_strategy(), tau in 0usize..4, seed in 0u64..1000) {
        let net = random_net(&sizes, seed, Activation::relu());
        let p = SdpProblem::build(&net, tau).unwrap();
        let d = p.num_vars();
        let a: Vec<f64> = (0..d).map(|i| ((i as u64 + seed) % 7) as f64 - 3.0).collect();
        let b: Vec<f64> = (0..d).map(|i| ((i as u64 * 3 + seed) % 5) as f64 * 0.5).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let z0 = p.z_aff().to_dense();
        let lin = |g: &[f64]| p.assemble(g).unwrap().to_dense() - &z0;
        prop_assert!((lin(&ab) - lin(&a) - lin(&b)).amax() <= 1e-9);
    }

    #[test]
    fn numeric_support_stays_inside_prediction(sizes in dims_strategy(), tau in 0usize..6, seed in 0u64..1000) {
        for act in [Activation::relu(), Activation::sector(-0.5, 2.0).unwrap()] {
            let net = random_net(&sizes, seed, act);
            let p = SdpProblem::build(&net, tau).unwrap();
            let predicted = predicted_edge_set(p.dims(), tau);
            prop_assert!(oracle_edge_set(&p).is_subset(&predicted));
        }
    }

    #[test]
    fn cliques_cover_a_chordal_pattern(sizes in dims_strategy(), tau in 0usize..6) {
        let dims = DimsProfile::new(&sizes).unwrap();
        let predicted = predicted_edge_set(&dims, tau);
        let cliques = maximal_cliques(&dims, tau);
        prop_assert_eq!(cliques.edge_set(), predicted.clone());
        prop_assert!(check_chordal(&predicted).chordal);
    }

    #[test]
    fn more_samples_never_lower_the_bound(seed in 0u64..200, extra in 1usize..50) {
        let net = random_net(&[2, 4, 4, 2], seed, Activation::relu());
        let small = SamplingOptions { n_pairs: 40, n_local: 40, seed, ..Default::default() };
        let big = SamplingOptions { n_pairs: 40 + extra, n_local: 40 + extra, ..small };
        let a = lower_bound_sampling(&net, &small).unwrap();
        let b = lower_bound_sampling(&net, &big).unwrap();
        prop_assert!(b.best_quotient >= a.best_quotient);
    }
}

#[test]
fn network_files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.json");
    let net = random_network(7, 4, 11).unwrap();
    net.save(&path).unwrap();
    assert_eq!(Network::load(&path).unwrap(), net);
}
