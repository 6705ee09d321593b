//! Marginal likelihood, filtering and the exact gradient of the negative log
//! posterior.
//!
//! All message vectors are L1-normalized at every step. Emission densities are
//! rescaled per time step by their maximum over states before use; the ratio
//! terms of the gradient are invariant to both rescalings.

use nalgebra::DMatrix;

use super::markov::stationary_distribution;
use super::params::{mat_vec, HmmParams, ObservationSeries, PriorSpec};
use crate::error::{Error, Result};

/// Diagonal matrix of per-state emission densities at `y`.
pub fn emission_matrix(params: &HmmParams, y: f64) -> DMatrix<f64> {
    let k = params.k();
    let diag: Vec<f64> = (0..k).map(|j| params.emissions.density(j, y)).collect();
    DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag))
}

/// Writes `p(y | j) / max_j p(y | j)` into `out` and returns `log max_j p(y | j)`.
#[inline]
fn scaled_density(params: &HmmParams, y: f64, out: &mut [f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for (j, o) in out.iter_mut().enumerate() {
        *o = params.emissions.log_density(j, y);
        max = max.max(*o);
    }
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return max;
    }
    for o in out.iter_mut() {
        *o = (*o - max).exp();
    }
    max
}

fn normalize(v: &mut [f64]) -> f64 {
    let s: f64 = v.iter().sum();
    if s > 0.0 && s.is_finite() {
        v.iter_mut().for_each(|x| *x /= s);
    }
    s
}

/// Normalized forward filter `alpha_t ∝ P(y_t) A alpha_{t-1}`.
#[derive(Debug, Clone)]
pub struct ForwardFilter<'a> {
    params: &'a HmmParams,
    alpha: Vec<f64>,
    pred: Vec<f64>,
    dens: Vec<f64>,
    t: usize,
}

impl<'a> ForwardFilter<'a> {
    /// Starts from `initial`, which is normalized on entry.
    pub fn new(params: &'a HmmParams, initial: &[f64]) -> Self {
        let k = params.k();
        let mut alpha = initial.to_vec();
        normalize(&mut alpha);
        Self {
            params,
            alpha,
            pred: vec![0.0; k],
            dens: vec![0.0; k],
            t: 0,
        }
    }

    /// Starts from the stationary distribution of the transition matrix.
    pub fn stationary(params: &'a HmmParams) -> Result<Self> {
        let pi = stationary_distribution(&params.transition)?;
        Ok(Self::new(params, &pi))
    }

    /// Absorbs one observation and returns `log p(y_t | y_1..y_{t-1})`.
    pub fn step(&mut self, y: f64) -> Result<f64> {
        let k = self.params.k();
        mat_vec(self.params.transition.as_slice(), k, &self.alpha, &mut self.pred);
        let log_max = scaled_density(self.params, y, &mut self.dens);
        for j in 0..k {
            self.alpha[j] = self.dens[j] * self.pred[j];
        }
        let c = normalize(&mut self.alpha);
        let t = self.t;
        self.t += 1;
        if log_max == f64::NEG_INFINITY || !(c > 0.0) || !c.is_finite() {
            return Err(Error::DegenerateLikelihood(t));
        }
        Ok(c.ln() + log_max)
    }

    /// Current filtered distribution.
    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Number of observations absorbed so far.
    pub fn steps(&self) -> usize {
        self.t
    }
}

/// `log p(y | theta) = log 1^T (prod_t P(y_t) A) pi` with running rescaling.
pub fn log_marginal_likelihood(params: &HmmParams, y: &ObservationSeries) -> Result<f64> {
    let mut filter = ForwardFilter::stationary(params)?;
    y.values().iter().try_fold(0.0, |acc, &v| Ok(acc + filter.step(v)?))
}

/// Normalized forward message after propagating `initial` through `obs`.
pub(crate) fn propagate_forward(
    params: &HmmParams,
    obs: &[f64],
    initial: &[f64],
    offset: usize,
) -> Result<Vec<f64>> {
    let mut filter = ForwardFilter::new(params, initial);
    filter.t = offset;
    for &v in obs {
        filter.step(v)?;
    }
    Ok(filter.alpha)
}

/// Normalized backward message `1^T prod_{t in obs} P(y_t) A`, propagated
/// right to left starting from `terminal`.
pub(crate) fn propagate_backward(
    params: &HmmParams,
    obs: &[f64],
    terminal: &[f64],
    offset: usize,
) -> Result<Vec<f64>> {
    let k = params.k();
    let a = params.transition.as_slice();
    let mut b = terminal.to_vec();
    normalize(&mut b);
    let mut dens = vec![0.0; k];
    let mut next = vec![0.0; k];
    for (s, &v) in obs.iter().enumerate().rev() {
        let log_max = scaled_density(params, v, &mut dens);
        for (j, n) in next.iter_mut().enumerate() {
            *n = (0..k).map(|i| b[i] * dens[i] * a[i * k + j]).sum();
        }
        let c = normalize(&mut next);
        if log_max == f64::NEG_INFINITY || !(c > 0.0) || !c.is_finite() {
            return Err(Error::DegenerateLikelihood(offset + s));
        }
        std::mem::swap(&mut b, &mut next);
    }
    Ok(b)
}

/// Which estimator produced a gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Full,
    Uniform,
    Stratified,
}

/// Gradient of `U(theta) = -log p(theta | y)`.
///
/// `a_grad` is row-major with respect to the unconstrained transition entries
/// that column normalization maps onto `A`;
/// `emission_grad` follows the emission coordinate layout (means and
/// log-variances for Gaussian, success probabilities for Bernoulli).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub k: usize,
    pub a_grad: Vec<f64>,
    pub emission_grad: Vec<f64>,
    pub kind: EstimatorKind,
    /// One-based centers of the subchains that entered the estimate.
    pub sampled_centers: Vec<usize>,
}

impl GradientEstimate {
    pub(crate) fn zeros(params: &HmmParams, kind: EstimatorKind) -> Self {
        let k = params.k();
        Self {
            k,
            a_grad: vec![0.0; k * k],
            emission_grad: vec![0.0; params.emissions.n_coords()],
            kind,
            sampled_centers: Vec::new(),
        }
    }

    /// `[a_grad..., emission_grad...]`, matching [`HmmParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        self.a_grad
            .iter()
            .chain(&self.emission_grad)
            .copied()
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.a_grad
            .iter()
            .chain(&self.emission_grad)
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &GradientEstimate) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.flatten().iter().position(|g| !g.is_finite()) {
            Some(i) => Err(Error::NonFiniteGradient(i)),
            None => Ok(()),
        }
    }

    /// Converts a log-likelihood score into a `U` gradient by negating and
    /// subtracting the prior score, then maps the transition part through the
    /// column normalization.
    pub(crate) fn finish_with_prior(mut self, params: &HmmParams, prior: &PriorSpec) -> Self {
        let prior_grad = prior.grad_log_density(&params.flatten());
        let na = self.a_grad.len();
        for (g, p) in self.a_grad.iter_mut().zip(&prior_grad[..na]) {
            *g = -*g - p;
        }
        for (g, p) in self.emission_grad.iter_mut().zip(&prior_grad[na..]) {
            *g = -*g - p;
        }
        through_normalization(params.transition.as_slice(), self.k, &mut self.a_grad);
        self
    }
}

/// Chain rule through `A = normalize_columns(raw)` evaluated at `raw = A`:
/// `g_ij - sum_k A_kj g_kj`.
///
/// The transition gradient is taken with respect to the unconstrained matrix
/// whose column projection gives `A`, so it is tangent to the simplex
/// (`sum_i A_ij g_ij = 0`) and vanishes for a single state.
fn through_normalization(a: &[f64], k: usize, grad: &mut [f64]) {
    for j in 0..k {
        let m: f64 = (0..k).map(|i| a[i * k + j] * grad[i * k + j]).sum();
        for i in 0..k {
            grad[i * k + j] -= m;
        }
    }
}

/// Adds `weight * d/dtheta log(q^T P(y_window) pi)` into the score buffers,
/// where `P(y_window)` is the product of `P(y_t) A` over `obs`, `pi = left`
/// and `q = right`.
///
/// Uses the product rule over positions with a forward sweep storing the
/// normalized prefix messages and a backward sweep carrying the suffix message.
/// The result is invariant to positive rescaling of `left` and `right`.
pub(crate) fn accumulate_window_score(
    params: &HmmParams,
    obs: &[f64],
    left: &[f64],
    right: &[f64],
    weight: f64,
    offset: usize,
    a_out: &mut [f64],
    em_out: &mut [f64],
) -> Result<()> {
    let k = params.k();
    let n = obs.len();
    let a = params.transition.as_slice();

    let mut dens = vec![0.0; n * k];
    let mut fwd = vec![0.0; n * k];
    let mut pred = vec![0.0; n * k];

    let mut f = left.to_vec();
    if !(normalize(&mut f) > 0.0) {
        return Err(Error::DegenerateLikelihood(offset));
    }
    for s in 0..n {
        let row = s * k..(s + 1) * k;
        if scaled_density(params, obs[s], &mut dens[row.clone()]) == f64::NEG_INFINITY {
            return Err(Error::DegenerateLikelihood(offset + s));
        }
        fwd[row.clone()].copy_from_slice(&f);
        mat_vec(a, k, &f, &mut pred[row.clone()]);
        for j in 0..k {
            f[j] = dens[s * k + j] * pred[s * k + j];
        }
        let c = normalize(&mut f);
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::DegenerateLikelihood(offset + s));
        }
    }

    let mut b = right.to_vec();
    if !(normalize(&mut b) > 0.0) {
        return Err(Error::DegenerateLikelihood(offset + n));
    }
    let mut w = vec![0.0; k];
    let mut next = vec![0.0; k];
    for s in (0..n).rev() {
        let d = &dens[s * k..(s + 1) * k];
        let g = &pred[s * k..(s + 1) * k];
        let fs = &fwd[s * k..(s + 1) * k];
        let denom: f64 = (0..k).map(|i| b[i] * d[i] * g[i]).sum();
        if !(denom > 0.0) || !denom.is_finite() {
            return Err(Error::DegenerateLikelihood(offset + s));
        }
        for i in 0..k {
            w[i] = b[i] * d[i] / denom;
        }
        for i in 0..k {
            let wi = weight * w[i];
            if wi == 0.0 {
                continue;
            }
            let row = &mut a_out[i * k..(i + 1) * k];
            for (r, fj) in row.iter_mut().zip(fs) {
                *r += wi * fj;
            }
            params.emissions.add_score(i, obs[s], wi * g[i], em_out);
        }
        for (j, nx) in next.iter_mut().enumerate() {
            *nx = (0..k).map(|i| b[i] * d[i] * a[i * k + j]).sum();
        }
        if !(normalize(&mut next) > 0.0) {
            return Err(Error::DegenerateLikelihood(offset + s));
        }
        std::mem::swap(&mut b, &mut next);
    }
    Ok(())
}

/// Exact gradient of `U(theta) = -log p(y | theta) - log p(theta)` from full
/// forward/backward passes.
///
/// The stationary initial distribution is recomputed from the current
/// transition matrix and held constant inside the derivative.
pub fn exact_grad_u(
    params: &HmmParams,
    y: &ObservationSeries,
    prior: &PriorSpec,
) -> Result<GradientEstimate> {
    let pi = stationary_distribution(&params.transition)?;
    let ones = vec![1.0; params.k()];
    let mut est = GradientEstimate::zeros(params, EstimatorKind::Full);
    accumulate_window_score(
        params,
        y.values(),
        &pi,
        &ones,
        1.0,
        0,
        &mut est.a_grad,
        &mut est.emission_grad,
    )?;
    let est = est.finish_with_prior(params, prior);
    est.check_finite()?;
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::{Emissions, TransitionMatrix};

    fn gaussian_params() -> HmmParams {
        HmmParams::new(
            TransitionMatrix::from_rows(&[vec![0.8, 0.3], vec![0.2, 0.7]]).unwrap(),
            Emissions::gaussian(vec![0.0, 1.0], vec![1.0, 1.0]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn emission_matrix_gaussian_and_bernoulli() {
        let p = gaussian_params();
        let m = emission_matrix(&p, 0.0);
        assert!((m[(0, 0)] - 0.398_942_280_401_432_7).abs() < 1e-12);
        assert!((m[(1, 1)] - 0.241_970_724_519_143_37).abs() < 1e-12);
        assert_eq!(m[(0, 1)], 0.0);

        let b = HmmParams::new(
            TransitionMatrix::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap(),
            Emissions::bernoulli(vec![0.9, 0.1]).unwrap(),
        )
        .unwrap();
        let m1 = emission_matrix(&b, 1.0);
        assert!((m1[(0, 0)] - 0.9).abs() < 1e-15 && (m1[(1, 1)] - 0.1).abs() < 1e-15);
        let m0 = emission_matrix(&b, 0.0);
        assert!((m0[(0, 0)] - 0.1).abs() < 1e-15 && (m0[(1, 1)] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn single_gaussian_log_likelihood_and_score() {
        let p = HmmParams::new(
            TransitionMatrix::identity(1),
            Emissions::gaussian(vec![0.3], vec![2.0]).unwrap(),
        )
        .unwrap();
        let y = ObservationSeries::new(vec![0.0]).unwrap();
        let ll = log_marginal_likelihood(&p, &y).unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI * 2.0).ln() - 0.09 / 4.0;
        assert!((ll - expected).abs() < 1e-14);

        let g = exact_grad_u(&p, &y, &PriorSpec::Flat).unwrap();
        assert!((g.emission_grad[0] - (0.3 - 0.0) / 2.0).abs() < 1e-14);
        assert_eq!(g.kind, EstimatorKind::Full);
    }

    #[test]
    fn bernoulli_path_enumeration() {
        let p = HmmParams::new(
            TransitionMatrix::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap(),
            Emissions::bernoulli(vec![0.9, 0.1]).unwrap(),
        )
        .unwrap();
        let y = ObservationSeries::new(vec![1.0, 1.0]).unwrap();
        // x_0 ~ (0.5, 0.5); sum over (x_0, x_1, x_2)
        let a = [[0.9, 0.1], [0.1, 0.9]];
        let e = [0.9, 0.1];
        let mut total: f64 = 0.0;
        for x0 in 0..2 {
            for x1 in 0..2 {
                for x2 in 0..2 {
                    total += 0.5 * a[x1][x0] * e[x1] * a[x2][x1] * e[x2];
                }
            }
        }
        let ll = log_marginal_likelihood(&p, &y).unwrap();
        assert!((ll - total.ln()).abs() < 1e-13);
    }

    #[test]
    fn impossible_observation_is_degenerate() {
        // state 0 is absorbing, so the prediction puts no mass on state 1
        let p = HmmParams::new(
            TransitionMatrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 0.5]]).unwrap(),
            Emissions::gaussian(vec![0.0, 1e10], vec![1e-6, 1e-6]).unwrap(),
        )
        .unwrap();
        let mut f = ForwardFilter::new(&p, &[1.0, 0.0]);
        assert!(f.step(0.0).is_ok());
        assert!(matches!(f.step(1e10), Err(Error::DegenerateLikelihood(1))));
    }

    #[test]
    fn window_score_is_scale_invariant() {
        let p = gaussian_params();
        let obs = [0.1, 0.9, -0.3, 1.2];
        let run = |left: &[f64], right: &[f64]| {
            let mut a = vec![0.0; 4];
            let mut e = vec![0.0; 4];
            accumulate_window_score(&p, &obs, left, right, 1.0, 0, &mut a, &mut e).unwrap();
            a.into_iter().chain(e).collect::<Vec<_>>()
        };
        let base = run(&[0.3, 0.7], &[0.2, 0.5]);
        let scaled = run(&[0.3, 0.7], &[0.2 * 7.3, 0.5 * 7.3]);
        for (x, y) in base.iter().zip(&scaled) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
