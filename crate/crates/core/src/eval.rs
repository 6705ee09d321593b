//! Evaluation metrics: k-step log predictive density, predictive intervals,
//! transition-matrix error, Monte Carlo gradient variance and the conjugate
//! posterior oracle for well-separated emissions.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{
    Emissions, ForwardFilter, HmmParams, ObservationSeries, PriorSpec, TransitionMatrix,
};
use crate::subchain::{MinibatchPlan, SubchainPartition};

fn matrix_power_apply(a: &TransitionMatrix, v: &[f64], k: usize) -> Vec<f64> {
    (0..k).fold(v.to_vec(), |acc, _| a.apply(&acc))
}

fn log_mixture_density(emissions: &Emissions, weights: &[f64], y: f64) -> f64 {
    let logs: Vec<f64> = weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .map(|(j, w)| w.ln() + emissions.log_density(j, y))
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// `sum_{t=1}^{T'-k} log 1^T P(y'_{t+k}) A^k alpha_t`, where `alpha_t` is the
/// filtered distribution after `y'_{1:t}` starting from stationarity.
pub fn k_step_log_predictive(params: &HmmParams, holdout: &ObservationSeries, k: usize) -> Result<f64> {
    let n = holdout.len();
    if k == 0 || n <= k {
        return Err(Error::InvalidParameter(format!(
            "horizon {k} needs a holdout longer than {k}, got {n}"
        )));
    }
    let y = holdout.values();
    let mut filter = ForwardFilter::stationary(params)?;
    let mut total = 0.0;
    for t in 0..n - k {
        filter.step(y[t])?;
        let weights = matrix_power_apply(&params.transition, filter.alpha(), k);
        let lp = log_mixture_density(&params.emissions, &weights, y[t + k]);
        if !lp.is_finite() {
            return Err(Error::DegenerateLikelihood(t + k));
        }
        total += lp;
    }
    Ok(total)
}

/// Filtered state distribution after the whole series.
pub fn filtered_state(params: &HmmParams, y: &ObservationSeries) -> Result<Vec<f64>> {
    let mut filter = ForwardFilter::stationary(params)?;
    for &v in y.values() {
        filter.step(v)?;
    }
    Ok(filter.alpha().to_vec())
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// Equal-tailed interval of the `k`-step predictive mixture
/// `sum_j (A^k alpha)_j emission_j`.
pub fn predictive_interval(
    params: &HmmParams,
    alpha: &[f64],
    k: usize,
    level: f64,
) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!("level {level} outside (0, 1)")));
    }
    if alpha.len() != params.k() {
        return Err(Error::ShapeMismatch("alpha does not match K".into()));
    }
    let sum: f64 = alpha.iter().sum();
    if alpha.iter().any(|a| !(*a >= 0.0)) || (sum - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidParameter("alpha must be a probability vector".into()));
    }
    let w = matrix_power_apply(&params.transition, alpha, k);
    let lo_p = 0.5 * (1.0 - level);
    let hi_p = 0.5 * (1.0 + level);
    match &params.emissions {
        Emissions::Gaussian { means, variances } => {
            let sds: Vec<f64> = variances.iter().map(|v| v.sqrt()).collect();
            let cdf = |x: f64| -> f64 {
                w.iter()
                    .zip(means.iter().zip(&sds))
                    .map(|(wj, (m, s))| wj * normal_cdf((x - m) / s))
                    .sum()
            };
            let spread = sds.iter().copied().fold(0.0, f64::max) * 40.0;
            let lo = means.iter().copied().fold(f64::INFINITY, f64::min) - spread;
            let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max) + spread;
            let quantile = |p: f64| {
                let (mut a, mut b) = (lo, hi);
                for _ in 0..200 {
                    let mid = 0.5 * (a + b);
                    if cdf(mid) < p {
                        a = mid;
                    } else {
                        b = mid;
                    }
                    if b - a <= 1e-13 * (1.0 + mid.abs()) {
                        break;
                    }
                }
                0.5 * (a + b)
            };
            Ok((quantile(lo_p), quantile(hi_p)))
        }
        Emissions::Bernoulli { probs } => {
            let p_zero: f64 = w.iter().zip(probs).map(|(wj, p)| wj * (1.0 - p)).sum();
            let quantile = |p: f64| if p_zero >= p { 0.0 } else { 1.0 };
            Ok((quantile(lo_p), quantile(hi_p)))
        }
    }
}

/// Intervals for horizons `1..=horizon` anchored at the end of `y`.
pub fn interval_path(
    params: &HmmParams,
    y: &ObservationSeries,
    horizon: usize,
    level: f64,
) -> Result<Vec<(f64, f64)>> {
    let alpha = filtered_state(params, y)?;
    (1..=horizon)
        .map(|k| predictive_interval(params, &alpha, k, level))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixNorm {
    #[default]
    Frobenius,
    /// Largest singular value.
    Spectral,
}

fn to_dmatrix(a: &[f64], k: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(k, k, a)
}

/// `||A - A_ref||` in the chosen norm.
pub fn transition_error(a: &TransitionMatrix, a_ref: &TransitionMatrix, norm: MatrixNorm) -> Result<f64> {
    if a.k() != a_ref.k() {
        return Err(Error::ShapeMismatch(format!(
            "{}-state matrix compared with {}-state reference",
            a.k(),
            a_ref.k()
        )));
    }
    let diff: Vec<f64> = a.as_slice().iter().zip(a_ref.as_slice()).map(|(x, y)| x - y).collect();
    Ok(match norm {
        MatrixNorm::Frobenius => diff.iter().map(|d| d * d).sum::<f64>().sqrt(),
        MatrixNorm::Spectral => to_dmatrix(&diff, a.k())
            .singular_values()
            .iter()
            .copied()
            .fold(0.0, f64::max),
    })
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(k), &mut vec![false; k], &mut out);
    out
}

/// Minimum error over relabelings of `A`'s states, with the minimizing
/// permutation (new state `i` is old state `perm[i]`).
pub fn permutation_aware_error(
    a: &TransitionMatrix,
    a_ref: &TransitionMatrix,
    norm: MatrixNorm,
) -> Result<(f64, Vec<usize>)> {
    let mut best = (f64::INFINITY, Vec::new());
    for perm in permutations(a.k()) {
        let e = transition_error(&a.permuted(&perm), a_ref, norm)?;
        if e < best.0 {
            best = (e, perm);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSummary {
    /// Unbiased sample variance of every flattened gradient component.
    pub per_component: Vec<f64>,
    /// Mean of `per_component`.
    pub mean: f64,
}

/// Sample variance of `reps` independent gradient estimates at fixed `params`.
///
/// Replicate `r` draws from the ChaCha stream `r` of `seed`, so results do
/// not depend on the thread count.
pub fn gradient_variance_mc(
    params: &HmmParams,
    y: &ObservationSeries,
    partition: &SubchainPartition,
    plan: &MinibatchPlan,
    prior: &PriorSpec,
    reps: usize,
    seed: u64,
) -> Result<VarianceSummary> {
    if reps < 2 {
        return Err(Error::InvalidParameter("at least two replicates required".into()));
    }
    plan.validate(partition)?;
    let draws: Vec<Vec<f64>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            plan.estimate(params, y, partition, prior, &mut rng)
                .map(|g| g.flatten())
        })
        .collect::<Result<_>>()?;
    let d = draws[0].len();
    let n = reps as f64;
    let mut per_component = vec![0.0; d];
    for (c, v) in per_component.iter_mut().enumerate() {
        let mean = draws.iter().map(|g| g[c]).sum::<f64>() / n;
        *v = draws.iter().map(|g| (g[c] - mean).powi(2)).sum::<f64>() / (n - 1.0);
    }
    let mean = per_component.iter().sum::<f64>() / d as f64;
    Ok(VarianceSummary { per_component, mean })
}

/// Known-variance conjugate model for states identified by nearest emission mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugateOracleSpec {
    /// Known common emission variance.
    pub sigma2: f64,
    /// Emission means used to assign states.
    pub emission_means: Vec<f64>,
    pub prior_means: Vec<f64>,
    pub prior_vars: Vec<f64>,
    /// `dirichlet_prior[j]` is the prior on column `j` of `A`.
    pub dirichlet_prior: Vec<Vec<f64>>,
}

impl ConjugateOracleSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.emission_means.len();
        if self.prior_means.len() != k
            || self.prior_vars.len() != k
            || self.dirichlet_prior.len() != k
            || self.dirichlet_prior.iter().any(|c| c.len() != k)
        {
            return Err(Error::ShapeMismatch("conjugate oracle sizes disagree".into()));
        }
        if !(self.sigma2 > 0.0) || self.prior_vars.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidParameter("variances must be positive".into()));
        }
        if self.dirichlet_prior.iter().flatten().any(|a| !(*a > 0.0)) {
            return Err(Error::InvalidParameter("Dirichlet parameters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugatePosterior {
    /// Observations assigned to each state.
    pub counts: Vec<usize>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    /// `dirichlet[j][i]`: prior plus the number of `j -> i` transitions.
    pub dirichlet: Vec<Vec<f64>>,
}

impl ConjugatePosterior {
    /// Whether state `j`'s mean posterior and column posterior equal the prior.
    pub fn state_equals_prior(&self, spec: &ConjugateOracleSpec, j: usize) -> bool {
        self.means[j] == spec.prior_means[j]
            && self.variances[j] == spec.prior_vars[j]
            && self.dirichlet[j] == spec.dirichlet_prior[j]
    }
}

/// Nearest emission mean, ties toward the lower state.
pub fn assign_states(values: &[f64], means: &[f64]) -> Vec<usize> {
    values
        .iter()
        .map(|y| {
            let mut best = (0, f64::INFINITY);
            for (j, m) in means.iter().enumerate() {
                let d = (y - m).abs();
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect()
}

/// Conjugate posterior from disjoint segments; transitions are only counted
/// inside a segment.
pub fn conjugate_oracle_segments(segments: &[&[f64]], spec: &ConjugateOracleSpec) -> Result<ConjugatePosterior> {
    spec.validate()?;
    let k = spec.emission_means.len();
    let mut counts = vec![0usize; k];
    let mut sums = vec![0.0; k];
    let mut dirichlet = spec.dirichlet_prior.clone();
    for seg in segments {
        let states = assign_states(seg, &spec.emission_means);
        for (&s, y) in states.iter().zip(seg.iter()) {
            counts[s] += 1;
            sums[s] += y;
        }
        for w in states.windows(2) {
            dirichlet[w[0]][w[1]] += 1.0;
        }
    }
    let mut means = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for j in 0..k {
        if counts[j] == 0 {
            means.push(spec.prior_means[j]);
            variances.push(spec.prior_vars[j]);
            continue;
        }
        let n = counts[j] as f64;
        let v0 = spec.prior_vars[j];
        let var = spec.sigma2 * v0 / (spec.sigma2 + n * v0);
        means.push(var * (spec.prior_means[j] / v0 + sums[j] / spec.sigma2));
        variances.push(var);
    }
    Ok(ConjugatePosterior {
        counts,
        means,
        variances,
        dirichlet,
    })
}

/// Conjugate posterior treating the nearest-mean state path as observed.
pub fn conjugate_oracle(y: &[f64], spec: &ConjugateOracleSpec) -> Result<ConjugatePosterior> {
    conjugate_oracle_segments(&[y], spec)
}
