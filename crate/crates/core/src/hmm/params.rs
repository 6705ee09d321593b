use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column sums may deviate from one by at most this much on construction.
pub const STOCHASTIC_TOL: f64 = 1e-8;

/// Column-stochastic transition matrix, `get(i, j) = P(x_t = i | x_{t-1} = j)`.
///
/// Entries are stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct TransitionMatrix {
    k: usize,
    data: Vec<f64>,
}

impl TransitionMatrix {
    /// Builds a transition matrix from row-major entries.
    ///
    /// A matrix whose columns sum to one within [`STOCHASTIC_TOL`] is accepted;
    /// columns off by more than rounding error are renormalized.
    pub fn new(k: usize, data: Vec<f64>) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter("state count must be positive".into()));
        }
        if data.len() != k * k {
            return Err(Error::ShapeMismatch(format!(
                "expected {} entries for K={k}, got {}",
                k * k,
                data.len()
            )));
        }
        if let Some(bad) = data
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::InvalidParameter(format!(
                "transition entry {bad} outside [0, 1]"
            )));
        }
        let mut data = data;
        for j in 0..k {
            let sum: f64 = (0..k).map(|i| data[i * k + j]).sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::NonStochastic { column: j, sum });
            }
            if (sum - 1.0).abs() <= k as f64 * f64::EPSILON {
                continue;
            }
            for i in 0..k {
                data[i * k + j] /= sum;
            }
        }
        Ok(Self { k, data })
    }

    /// Builds from rows, `rows[i][j] = P(i | j)`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::ShapeMismatch("transition matrix must be square".into()));
        }
        Self::new(k, rows.iter().flatten().copied().collect())
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            k,
            data: vec![1.0 / k as f64; k * k],
        }
    }

    pub fn identity(k: usize) -> Self {
        let mut data = vec![0.0; k * k];
        for i in 0..k {
            data[i * k + i] = 1.0;
        }
        Self { k, data }
    }

    /// Internal constructor for matrices already known to be column-stochastic.
    pub(crate) fn from_normalized(k: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), k * k);
        Self { k, data }
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.k + j]
    }

    /// Row-major entries.
    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.k).map(<[f64]>::to_vec).collect()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.k).map(|i| self.get(i, j)).collect()
    }

    pub fn to_dmatrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.k, self.k, &self.data)
    }

    /// `A v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        mat_vec(&self.data, self.k, v, &mut out);
        out
    }

    /// Relabels states: entry `(i, j)` of the result is `(perm[i], perm[j])` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.k;
        let mut data = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                data[i * k + j] = self.get(perm[i], perm[j]);
            }
        }
        Self { k, data }
    }
}

impl TryFrom<Vec<Vec<f64>>> for TransitionMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl From<TransitionMatrix> for Vec<Vec<f64>> {
    fn from(a: TransitionMatrix) -> Self {
        a.rows()
    }
}

/// `out = A v` for a row-major `k x k` matrix.
#[inline]
pub(crate) fn mat_vec(a: &[f64], k: usize, v: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        let row = &a[i * k..(i + 1) * k];
        *o = row.iter().zip(v).map(|(x, y)| x * y).sum();
    }
}

/// Bounds applied to Bernoulli success probabilities after each update.
pub const BERNOULLI_MIN: f64 = 1e-6;
pub const BERNOULLI_MAX: f64 = 1.0 - 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Per-state emission distributions.
///
/// The unconstrained coordinate layout used for gradients and updates is
/// `[means..., log_variances...]` for Gaussian and `[probs...]` for Bernoulli.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Emissions {
    Gaussian { means: Vec<f64>, variances: Vec<f64> },
    Bernoulli { probs: Vec<f64> },
}

impl Emissions {
    pub fn gaussian(means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        let e = Emissions::Gaussian { means, variances };
        e.validate()?;
        Ok(e)
    }

    pub fn bernoulli(probs: Vec<f64>) -> Result<Self> {
        let e = Emissions::Bernoulli { probs };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Emissions::Gaussian { means, variances } => {
                if means.len() != variances.len() {
                    return Err(Error::ShapeMismatch(
                        "means and variances differ in length".into(),
                    ));
                }
                if means.iter().any(|m| !m.is_finite()) {
                    return Err(Error::InvalidParameter("non-finite emission mean".into()));
                }
                if variances.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(Error::InvalidParameter(
                        "Gaussian variances must be strictly positive".into(),
                    ));
                }
            }
            Emissions::Bernoulli { probs } => {
                if probs.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
                    return Err(Error::InvalidParameter(
                        "Bernoulli probabilities must lie in (0, 1)".into(),
                    ));
                }
            }
        }
        if self.n_states() == 0 {
            return Err(Error::InvalidParameter("no emission states".into()));
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        match self {
            Emissions::Gaussian { means, .. } => means.len(),
            Emissions::Bernoulli { probs } => probs.len(),
        }
    }

    /// Number of unconstrained emission coordinates.
    pub fn n_coords(&self) -> usize {
        match self {
            Emissions::Gaussian { means, .. } => 2 * means.len(),
            Emissions::Bernoulli { probs } => probs.len(),
        }
    }

    #[inline]
    pub fn log_density(&self, state: usize, y: f64) -> f64 {
        match self {
            Emissions::Gaussian { means, variances } => {
                let v = variances[state];
                let r = y - means[state];
                -0.5 * (LN_2PI + v.ln()) - 0.5 * r * r / v
            }
            Emissions::Bernoulli { probs } => {
                let p = probs[state];
                if y > 0.5 {
                    p.ln()
                } else {
                    (1.0 - p).ln()
                }
            }
        }
    }

    #[inline]
    pub fn density(&self, state: usize, y: f64) -> f64 {
        self.log_density(state, y).exp()
    }

    /// Adds `weight * d log p(y | state) / d coord` into `out` (coordinate layout).
    #[inline]
    pub(crate) fn add_score(&self, state: usize, y: f64, weight: f64, out: &mut [f64]) {
        match self {
            Emissions::Gaussian { means, variances } => {
                let k = means.len();
                let v = variances[state];
                let r = y - means[state];
                out[state] += weight * r / v;
                out[k + state] += weight * (0.5 * r * r / v - 0.5);
            }
            Emissions::Bernoulli { probs } => {
                let p = probs[state];
                out[state] += weight * if y > 0.5 { 1.0 / p } else { -1.0 / (1.0 - p) };
            }
        }
    }

    /// Unconstrained coordinates.
    pub fn coords(&self) -> Vec<f64> {
        match self {
            Emissions::Gaussian { means, variances } => means
                .iter()
                .copied()
                .chain(variances.iter().map(|v| v.ln()))
                .collect(),
            Emissions::Bernoulli { probs } => probs.clone(),
        }
    }

    /// Rebuilds from unconstrained coordinates, clamping Bernoulli probabilities
    /// into `[BERNOULLI_MIN, BERNOULLI_MAX]`.
    pub fn with_coords(&self, coords: &[f64]) -> Result<Self> {
        if coords.len() != self.n_coords() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} emission coordinates, got {}",
                self.n_coords(),
                coords.len()
            )));
        }
        let out = match self {
            Emissions::Gaussian { means, .. } => {
                let k = means.len();
                Emissions::Gaussian {
                    means: coords[..k].to_vec(),
                    variances: coords[k..].iter().map(|l| l.exp()).collect(),
                }
            }
            Emissions::Bernoulli { .. } => Emissions::Bernoulli {
                probs: coords
                    .iter()
                    .map(|p| p.clamp(BERNOULLI_MIN, BERNOULLI_MAX))
                    .collect(),
            },
        };
        out.validate()?;
        Ok(out)
    }

    /// Relabels states so that new state `i` is old state `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        match self {
            Emissions::Gaussian { means, variances } => Emissions::Gaussian {
                means: perm.iter().map(|&p| means[p]).collect(),
                variances: perm.iter().map(|&p| variances[p]).collect(),
            },
            Emissions::Bernoulli { probs } => Emissions::Bernoulli {
                probs: perm.iter().map(|&p| probs[p]).collect(),
            },
        }
    }

    pub fn family(&self) -> EmissionFamily {
        match self {
            Emissions::Gaussian { .. } => EmissionFamily::Gaussian,
            Emissions::Bernoulli { .. } => EmissionFamily::Bernoulli,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmissionFamily {
    Gaussian,
    Bernoulli,
}

/// Transition matrix plus emission parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmParams {
    pub transition: TransitionMatrix,
    pub emissions: Emissions,
}

impl HmmParams {
    pub fn new(transition: TransitionMatrix, emissions: Emissions) -> Result<Self> {
        emissions.validate()?;
        if emissions.n_states() != transition.k() {
            return Err(Error::ShapeMismatch(format!(
                "{} emission states for a {}-state transition matrix",
                emissions.n_states(),
                transition.k()
            )));
        }
        Ok(Self {
            transition,
            emissions,
        })
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.transition.k()
    }

    /// Length of the flattened parameter vector.
    pub fn n_coords(&self) -> usize {
        self.k() * self.k() + self.emissions.n_coords()
    }

    /// `[A row-major..., emission coords...]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.transition.as_slice().to_vec();
        v.extend(self.emissions.coords());
        v
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            transition: self.transition.permuted(perm),
            emissions: self.emissions.permuted(perm),
        }
    }
}

/// Observed series `y_1..y_T`, stored zero-based.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSeries(Vec<f64>);

impl ObservationSeries {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySeries);
        }
        if let Some(t) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite observation at index {t}"
            )));
        }
        Ok(Self(values))
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Latent states `x_0..x_T` as zero-based state indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentPath(pub Vec<usize>);

impl LatentPath {
    pub fn states(&self) -> &[usize] {
        &self.0
    }
}

/// Prior on the flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PriorSpec {
    /// Improper constant prior.
    #[default]
    Flat,
    /// Independent Normal prior per flattened coordinate.
    Gaussian { mean: Vec<f64>, sd: Vec<f64> },
}

impl PriorSpec {
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        match self {
            PriorSpec::Flat => 0.0,
            PriorSpec::Gaussian { mean, sd } => theta
                .iter()
                .zip(mean)
                .zip(sd)
                .map(|((t, m), s)| -0.5 * ((t - m) / s).powi(2))
                .sum(),
        }
    }

    pub fn grad_log_density(&self, theta: &[f64]) -> Vec<f64> {
        match self {
            PriorSpec::Flat => vec![0.0; theta.len()],
            PriorSpec::Gaussian { mean, sd } => theta
                .iter()
                .zip(mean)
                .zip(sd)
                .map(|((t, m), s)| -(t - m) / (s * s))
                .collect(),
        }
    }

    pub fn validate(&self, n_coords: usize) -> Result<()> {
        if let PriorSpec::Gaussian { mean, sd } = self {
            if mean.len() != n_coords || sd.len() != n_coords {
                return Err(Error::ShapeMismatch(format!(
                    "prior has {}/{} coordinates, model has {n_coords}",
                    mean.len(),
                    sd.len()
                )));
            }
            if sd.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::InvalidParameter("prior sd must be positive".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_stochastic_columns() {
        let err = TransitionMatrix::from_rows(&[vec![0.5, 0.5], vec![0.4, 0.5]]).unwrap_err();
        assert!(matches!(err, Error::NonStochastic { column: 0, .. }));
    }

    #[test]
    fn renormalizes_within_tolerance() {
        let a = TransitionMatrix::from_rows(&[vec![0.9 + 1e-10, 0.1], vec![0.1, 0.9]]).unwrap();
        let s = a.get(0, 0) + a.get(1, 0);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn emission_validation() {
        assert!(Emissions::gaussian(vec![0.0], vec![0.0]).is_err());
        assert!(Emissions::bernoulli(vec![1.0]).is_err());
        assert!(Emissions::bernoulli(vec![0.3, 0.7]).is_ok());
        let a = TransitionMatrix::uniform(3);
        assert!(HmmParams::new(a, Emissions::bernoulli(vec![0.3, 0.7]).unwrap()).is_err());
    }

    #[test]
    fn coords_round_trip_and_clamp() {
        let g = Emissions::gaussian(vec![1.0, -2.0], vec![0.5, 3.0]).unwrap();
        let back = g.with_coords(&g.coords()).unwrap();
        if let (
            Emissions::Gaussian { variances: a, .. },
            Emissions::Gaussian { variances: b, .. },
        ) = (&g, &back)
        {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-14);
            }
        }
        let b = Emissions::bernoulli(vec![0.5, 0.5]).unwrap();
        let clamped = b.with_coords(&[-0.2, 1.4]).unwrap();
        assert_eq!(
            clamped,
            Emissions::Bernoulli {
                probs: vec![BERNOULLI_MIN, BERNOULLI_MAX]
            }
        );
    }

    #[test]
    fn observation_series_rejects_nan() {
        assert!(ObservationSeries::new(vec![]).is_err());
        assert!(ObservationSeries::new(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn transition_matrix_serde_uses_rows() {
        let a = TransitionMatrix::from_rows(&[vec![0.9, 0.2], vec![0.1, 0.8]]).unwrap();
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(json, "[[0.9,0.2],[0.1,0.8]]");
        let back: TransitionMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
    }
}
