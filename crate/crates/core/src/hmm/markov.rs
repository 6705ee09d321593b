//! Stationary analysis of a column-stochastic transition matrix.

use nalgebra::{DMatrix, DVector};

use super::params::{TransitionMatrix, STOCHASTIC_TOL};
use crate::error::{Error, Result};

/// Entries at or below this are treated as structural zeros by the
/// reducibility check. The matrix itself is never thresholded.
pub const IRREDUCIBILITY_TOL: f64 = 1e-12;

fn check_stochastic(a: &TransitionMatrix) -> Result<()> {
    let k = a.k();
    for j in 0..k {
        let sum: f64 = (0..k).map(|i| a.get(i, j)).sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::NonStochastic { column: j, sum });
        }
    }
    Ok(())
}

/// Whether every state reaches every other state.
///
/// Equivalent to `((A + I) / 2)^K` being entrywise positive; evaluated on the
/// support pattern so tiny entries cannot underflow the power.
pub fn is_irreducible(a: &TransitionMatrix) -> bool {
    let k = a.k();
    let base: Vec<bool> = (0..k * k)
        .map(|idx| idx / k == idx % k || a.as_slice()[idx] > IRREDUCIBILITY_TOL)
        .collect();
    let mut reach = base.clone();
    for _ in 1..k {
        let mut next = vec![false; k * k];
        for i in 0..k {
            for j in 0..k {
                next[i * k + j] = (0..k).any(|m| reach[i * k + m] && base[m * k + j]);
            }
        }
        reach = next;
    }
    reach.into_iter().all(|r| r)
}

/// Stationary distribution `pi` with `A pi = pi`, `sum(pi) = 1`.
///
/// Solves `(A - I) pi = 0` with one redundant balance row replaced by the
/// normalization constraint.
pub fn stationary_distribution(a: &TransitionMatrix) -> Result<Vec<f64>> {
    check_stochastic(a)?;
    if !is_irreducible(a) {
        return Err(Error::ReducibleChain);
    }
    let k = a.k();
    if k == 1 {
        return Ok(vec![1.0]);
    }
    let mut m = a.to_dmatrix() - DMatrix::<f64>::identity(k, k);
    for j in 0..k {
        m[(k - 1, j)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(k);
    rhs[k - 1] = 1.0;
    let sol = m.lu().solve(&rhs).ok_or(Error::ReducibleChain)?;
    let mut pi: Vec<f64> = sol.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = pi.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ReducibleChain);
    }
    pi.iter_mut().for_each(|v| *v /= total);
    Ok(pi)
}

/// `1 - |lambda_2|`, where `lambda_2` is the second-largest-modulus eigenvalue.
///
/// Defined as 1 for a single state. Periodic chains return 0.
pub fn spectral_gap(a: &TransitionMatrix) -> Result<f64> {
    check_stochastic(a)?;
    if !is_irreducible(a) {
        return Err(Error::ReducibleChain);
    }
    if a.k() == 1 {
        return Ok(1.0);
    }
    let mut moduli: Vec<f64> = a
        .to_dmatrix()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .collect();
    moduli.sort_by(|x, y| y.total_cmp(x));
    Ok((1.0 - moduli[1]).clamp(0.0, 1.0))
}

/// Maps an unconstrained `K x K` matrix (row-major) onto the column simplex via
/// `A_ij = |raw_ij| / sum_i |raw_ij|`.
pub fn project_columns_to_simplex(k: usize, raw: &[f64]) -> Result<TransitionMatrix> {
    if raw.len() != k * k {
        return Err(Error::ShapeMismatch(format!(
            "expected {} entries, got {}",
            k * k,
            raw.len()
        )));
    }
    let mut data: Vec<f64> = raw.iter().map(|v| v.abs()).collect();
    for j in 0..k {
        let sum: f64 = (0..k).map(|i| data[i * k + j]).sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::ZeroColumn(j));
        }
        for i in 0..k {
            data[i * k + j] /= sum;
        }
    }
    Ok(TransitionMatrix::from_normalized(k, data))
}
