use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::markov::stationary_distribution;
use super::params::{Emissions, HmmParams, LatentPath, ObservationSeries};
use crate::error::{Error, Result};

/// Draws an index from a probability vector.
pub(crate) fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver of mass at the top; take the last supported state
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

fn emit<R: Rng + ?Sized>(rng: &mut R, emissions: &Emissions, state: usize) -> f64 {
    match emissions {
        Emissions::Gaussian { means, variances } => {
            Normal::new(means[state], variances[state].sqrt())
                .expect("validated variance")
                .sample(rng)
        }
        Emissions::Bernoulli { probs } => {
            if rng.random::<f64>() < probs[state] {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Simulates `x_0..x_T` with `x_0` drawn from the stationary distribution and
/// observations `y_1..y_T`.
pub fn simulate(
    params: &HmmParams,
    t: usize,
    seed: u64,
) -> Result<(LatentPath, ObservationSeries)> {
    if t == 0 {
        return Err(Error::InvalidParameter("series length must be positive".into()));
    }
    let pi = stationary_distribution(&params.transition)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = params.k();
    let columns: Vec<Vec<f64>> = (0..k).map(|j| params.transition.column(j)).collect();

    let mut states = Vec::with_capacity(t + 1);
    let mut values = Vec::with_capacity(t);
    let mut x = sample_categorical(&mut rng, &pi);
    states.push(x);
    for _ in 0..t {
        x = sample_categorical(&mut rng, &columns[x]);
        states.push(x);
        values.push(emit(&mut rng, &params.emissions, x));
    }
    Ok((LatentPath(states), ObservationSeries::new(values)?))
}
