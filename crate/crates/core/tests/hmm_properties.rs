use itertools::Itertools;
use proptest::prelude::*;

use csgmcmc::clustering::{ClusterModel, Preprocessing};
use csgmcmc::hmm::{
    exact_grad_u, log_marginal_likelihood, simulate, stationary_distribution, Emissions, HmmParams, PriorSpec,
    TransitionMatrix,
};
use csgmcmc::subchain::{
    buffered_messages, full_subseries_grad, local_grad_term_with_messages, partition, stratified_grad_for_draw,
    uniform_grad_for_subset,
};

fn column_stochastic(k: usize, raw: &[f64]) -> TransitionMatrix {
    let mut data = raw.to_vec();
    for j in 0..k {
        let s: f64 = (0..k).map(|i| data[i * k + j]).sum();
        for i in 0..k {
            data[i * k + j] /= s;
        }
    }
    TransitionMatrix::new(k, data).unwrap()
}

fn params_strategy() -> impl Strategy<Value = HmmParams> {
    (1usize..=4, any::<bool>()).prop_flat_map(|(k, bernoulli)| {
        (
            prop::collection::vec(0.05f64..1.0, k * k),
            prop::collection::vec(-3.0f64..3.0, k),
            prop::collection::vec(0.3f64..2.0, k),
            prop::collection::vec(0.05f64..0.95, k),
        )
            .prop_map(move |(raw, means, vars, probs)| {
                let emissions = if bernoulli {
                    Emissions::bernoulli(probs).unwrap()
                } else {
                    Emissions::gaussian(means, vars).unwrap()
                };
                HmmParams::new(column_stochastic(k, &raw), emissions).unwrap()
            })
    })
}

fn rel_close(a: &[f64], b: &[f64], tol: f64) -> bool {
    let scale = a.iter().chain(b).fold(1.0f64, |m, x| m.max(x.abs()));
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * scale)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stationary_distribution_is_fixed_point(params in params_strategy()) {
        let a = &params.transition;
        let pi = stationary_distribution(a).unwrap();
        let api = a.apply(&pi);
        let err = api.iter().zip(&pi).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-10, "residual {err}");
        prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn likelihood_invariant_to_relabeling(params in params_strategy(), seed in 0u64..1000, shift in 0usize..24) {
        let k = params.k();
        let y = simulate(&params, 80, seed).unwrap().1;
        let perms: Vec<Vec<usize>> = (0..k).permutations(k).collect();
        let perm = &perms[shift % perms.len()];
        let a = log_marginal_likelihood(&params, &y).unwrap();
        let b = log_marginal_likelihood(&params.permuted(perm), &y).unwrap();
        prop_assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn simulation_is_reproducible(params in params_strategy(), seed in any::<u64>()) {
        let first = simulate(&params, 50, seed).unwrap();
        let second = simulate(&params, 50, seed).unwrap();
        prop_assert_eq!(first.0.states(), second.0.states());
        let bits = |s: &[f64]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(first.1.values()), bits(second.1.values()));
    }

    #[test]
    fn window_terms_sum_to_exact_gradient(
        params in params_strategy(),
        seed in 0u64..1000,
        l in prop::sample::select(vec![1usize, 3, 5, 7]),
        n in 1usize..12,
    ) {
        let t = l * n;
        let y = simulate(&params, t, seed).unwrap().1;
        let part = partition(t, l).unwrap().with_buffer(t);
        let full = full_subseries_grad(&params, &y, &part, &PriorSpec::Flat).unwrap().flatten();
        let exact = exact_grad_u(&params, &y, &PriorSpec::Flat).unwrap().flatten();
        prop_assert!(rel_close(&full, &exact, 1e-10));
    }

    #[test]
    fn local_term_ignores_message_scale(
        params in params_strategy(),
        seed in 0u64..1000,
        c1 in 1e-3f64..1e3,
        c2 in 1e-3f64..1e3,
        idx in 0usize..8,
    ) {
        let y = simulate(&params, 60, seed).unwrap().1;
        let part = partition(60, 5).unwrap().with_buffer(4);
        let w = part.window(&y, idx);
        let (q, pi) = buffered_messages(&params, &w).unwrap();
        let base = local_grad_term_with_messages(&params, &w, &q, &pi).unwrap().flatten();
        let qs: Vec<f64> = q.iter().map(|v| v * c1).collect();
        let ps: Vec<f64> = pi.iter().map(|v| v * c2).collect();
        let scaled = local_grad_term_with_messages(&params, &w, &qs, &ps).unwrap().flatten();
        prop_assert!(rel_close(&base, &scaled, 1e-10));
    }

    #[test]
    fn estimators_are_unbiased_by_enumeration(
        params in params_strategy(),
        seed in 0u64..1000,
        t in 20usize..30,
        buffer in 0usize..4,
        assignment in prop::collection::vec(0usize..2, 4..=5),
    ) {
        // four or five windows of length 5, split into two nonempty strata
        prop_assume!(assignment.len() == t / 5);
        prop_assume!(assignment.contains(&0) && assignment.contains(&1));
        let y = simulate(&params, t, seed).unwrap().1;
        let part = partition(t, 5).unwrap().with_buffer(buffer);
        let full = full_subseries_grad(&params, &y, &part, &PriorSpec::Flat).unwrap().flatten();
        let clusters = ClusterModel::from_assignment(assignment, 2, 5, Preprocessing::None).unwrap();
        let quotas: Vec<usize> = clusters.sizes().iter().map(|&n| n.div_ceil(2)).collect();
        let draws: Vec<Vec<Vec<usize>>> = clusters
            .members()
            .iter()
            .zip(&quotas)
            .map(|(m, &b)| m.iter().copied().combinations(b).collect::<Vec<_>>())
            .multi_cartesian_product()
            .collect();
        let mut avg = vec![0.0; full.len()];
        for d in &draws {
            let g = stratified_grad_for_draw(&params, &y, &part, &clusters, d, &PriorSpec::Flat).unwrap();
            for (a, v) in avg.iter_mut().zip(g.flatten()) {
                *a += v / draws.len() as f64;
            }
        }
        prop_assert!(rel_close(&avg, &full, 1e-10));

        let n = part.n_windows();
        let mut avg = vec![0.0; full.len()];
        for i in 0..n {
            let g = uniform_grad_for_subset(&params, &y, &part, &[i], &PriorSpec::Flat).unwrap();
            for (a, v) in avg.iter_mut().zip(g.flatten()) {
                *a += v / n as f64;
            }
        }
        prop_assert!(rel_close(&avg, &full, 1e-10));
    }
}
