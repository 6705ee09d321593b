use proptest::prelude::*;
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use csgmcmc::clustering::{ClusterModel, Preprocessing};
use csgmcmc::eval::{
    conjugate_oracle, gradient_variance_mc, k_step_log_predictive, predictive_interval, transition_error,
    ConjugateOracleSpec, MatrixNorm,
};
use csgmcmc::experiment::BuiltinDataset;
use csgmcmc::hmm::{Emissions, HmmParams, PriorSpec, TransitionMatrix};
use csgmcmc::subchain::{partition, MinibatchPlan};

fn matrix_strategy(k: usize) -> impl Strategy<Value = TransitionMatrix> {
    prop::collection::vec(0.01f64..1.0, k * k).prop_map(move |mut d| {
        for j in 0..k {
            let s: f64 = (0..k).map(|i| d[i * k + j]).sum();
            (0..k).for_each(|i| d[i * k + j] /= s);
        }
        TransitionMatrix::new(k, d).unwrap()
    })
}

fn triple() -> impl Strategy<Value = (TransitionMatrix, TransitionMatrix, TransitionMatrix)> {
    (1usize..=5).prop_flat_map(|k| (matrix_strategy(k), matrix_strategy(k), matrix_strategy(k)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn transition_error_is_a_metric((a, b, c) in triple()) {
        for norm in [MatrixNorm::Frobenius, MatrixNorm::Spectral] {
            let ab = transition_error(&a, &b, norm).unwrap();
            let ba = transition_error(&b, &a, norm).unwrap();
            let ac = transition_error(&a, &c, norm).unwrap();
            let cb = transition_error(&c, &b, norm).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(transition_error(&a, &a, norm).unwrap(), 0.0);
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!(ab <= ac + cb + 1e-12);
        }
        let f = transition_error(&a, &b, MatrixNorm::Frobenius).unwrap();
        let s = transition_error(&a, &b, MatrixNorm::Spectral).unwrap();
        prop_assert!(s <= f + 1e-12 && f <= (a.k() as f64).sqrt() * s + 1e-12);
    }

    #[test]
    fn conjugate_variance_shrinks_with_more_data(values in prop::collection::vec(-4.0f64..4.0, 1..60)) {
        let spec = ConjugateOracleSpec {
            sigma2: 1.5,
            emission_means: vec![-1.0, 1.0],
            prior_means: vec![0.0, 0.0],
            prior_vars: vec![4.0, 4.0],
            dirichlet_prior: vec![vec![1.0; 2]; 2],
        };
        let mut prev = spec.prior_vars.clone();
        for n in 1..=values.len() {
            let post = conjugate_oracle(&values[..n], &spec).unwrap();
            for j in 0..2 {
                prop_assert!(post.variances[j] <= prev[j]);
                let expected = 1.0 / (1.0 / spec.prior_vars[j] + post.counts[j] as f64 / spec.sigma2);
                prop_assert!((post.variances[j] - expected).abs() <= 1e-12);
            }
            prev = post.variances.clone();
        }
    }
}

fn sample_k_ahead(params: &HmmParams, alpha: &[f64], k: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut x = WeightedIndex::new(alpha).unwrap().sample(rng);
    for _ in 0..k {
        x = WeightedIndex::new(params.transition.column(x)).unwrap().sample(rng);
    }
    match &params.emissions {
        Emissions::Gaussian { means, variances } => Normal::new(means[x], variances[x].sqrt()).unwrap().sample(rng),
        Emissions::Bernoulli { probs } => f64::from(u8::from(rng.random_bool(probs[x]))),
    }
}

#[test]
fn predictive_intervals_have_nominal_coverage() {
    let params = HmmParams::new(
        TransitionMatrix::from_rows(&[vec![0.7, 0.2, 0.1], vec![0.2, 0.6, 0.3], vec![0.1, 0.2, 0.6]]).unwrap(),
        Emissions::gaussian(vec![-3.0, 0.5, 4.0], vec![1.0, 0.3, 2.5]).unwrap(),
    )
    .unwrap();
    let alpha = [0.5, 0.3, 0.2];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for (k, level) in [(1, 0.95), (3, 0.9), (10, 0.5)] {
        let (lo, hi) = predictive_interval(&params, &alpha, k, level).unwrap();
        let draws = 100_000;
        let inside = (0..draws)
            .filter(|_| (lo..=hi).contains(&sample_k_ahead(&params, &alpha, k, &mut rng)))
            .count();
        let coverage = inside as f64 / draws as f64;
        assert!((coverage - level).abs() <= 0.005, "k {k}: coverage {coverage} for level {level}");
    }
}

#[test]
fn identity_chain_with_known_state_gives_the_emission_interval() {
    let params = HmmParams::new(
        TransitionMatrix::identity(3),
        Emissions::gaussian(vec![-2.0, 1.0, 5.0], vec![0.5, 1.0, 4.0]).unwrap(),
    )
    .unwrap();
    let z = 1.959_963_984_540_054;
    for j in 0..3 {
        let mut alpha = [0.0; 3];
        alpha[j] = 1.0;
        let (lo, hi) = predictive_interval(&params, &alpha, 4, 0.95).unwrap();
        let Emissions::Gaussian { means, variances } = &params.emissions else { unreachable!() };
        let sd = variances[j].sqrt();
        assert!((lo - (means[j] - z * sd)).abs() < 1e-9, "{lo}");
        assert!((hi - (means[j] + z * sd)).abs() < 1e-9, "{hi}");
    }
}

#[test]
fn zero_horizon_is_rejected() {
    let params = BuiltinDataset::Bd.true_params();
    let (_, y) = BuiltinDataset::Bd.simulate(50, 1).unwrap();
    assert!(k_step_log_predictive(&params, &y, 0).is_err());
    assert!(k_step_log_predictive(&params, &y, 50).is_err());
    assert!(k_step_log_predictive(&params, &y, 1).unwrap().is_finite());
}

#[test]
fn census_plans_have_zero_variance() {
    let params = BuiltinDataset::Bd.true_params();
    let (_, y) = BuiltinDataset::Bd.simulate(200, 3).unwrap();
    let part = partition(200, 5).unwrap().with_buffer(4);
    let n = part.n_windows();
    let assignment: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let clusters = ClusterModel::from_assignment(assignment, 3, 5, Preprocessing::None).unwrap();
    let quotas = clusters.sizes().to_vec();
    let plans = [
        MinibatchPlan::Full,
        MinibatchPlan::Uniform { s: n },
        MinibatchPlan::Stratified { clusters, quotas },
    ];
    for plan in &plans {
        let v = gradient_variance_mc(&params, &y, &part, plan, &PriorSpec::Flat, 10, 5).unwrap();
        assert!(v.per_component.iter().all(|c| *c < 1e-18), "{plan:?}: {}", v.mean);
    }
}
