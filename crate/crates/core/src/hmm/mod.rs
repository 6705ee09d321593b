//! Hidden Markov model representation: parameters, simulation, stationary
//! analysis, exact marginal likelihood and its gradient.

mod likelihood;
mod markov;
mod params;
mod simulate;

pub use likelihood::{
    emission_matrix, exact_grad_u, log_marginal_likelihood, EstimatorKind, ForwardFilter,
    GradientEstimate,
};
pub(crate) use likelihood::{accumulate_window_score, propagate_backward, propagate_forward};
pub use markov::{
    is_irreducible, project_columns_to_simplex, spectral_gap, stationary_distribution,
    IRREDUCIBILITY_TOL,
};
pub use params::{
    EmissionFamily, Emissions, HmmParams, LatentPath, ObservationSeries, PriorSpec,
    TransitionMatrix, BERNOULLI_MAX, BERNOULLI_MIN, STOCHASTIC_TOL,
};
pub use simulate::simulate;
