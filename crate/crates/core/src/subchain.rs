//! Subchain partition, buffered boundary messages and the three gradient
//! estimators built on them: full subseries, uniform minibatch and stratified.
//!
//! Window indices are zero-based positions in the partition; centers are the
//! one-based time indices `tau_k = ((2k - 1) L + 1) / 2`.
//!
//! Observations past the last full window (fewer than `L` of them) form a
//! remainder block. It has no center and is never subsampled, but every
//! estimator adds its exact buffered term with weight one, so the full
//! subseries gradient reproduces the exact gradient for any `T`.

use std::ops::Range;

use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::clustering::ClusterModel;
use crate::error::{Error, Result};
use crate::hmm::{
    accumulate_window_score, propagate_backward, propagate_forward, stationary_distribution,
    EstimatorKind, GradientEstimate, HmmParams, ObservationSeries, PriorSpec,
};

/// Maximum number of whole-subset redraws when enforcing the gap condition.
pub const MAX_GAP_ATTEMPTS: usize = 1000;

/// Partition of a length-`T` series into `floor(T / L)` consecutive subchains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubchainPartition {
    series_len: usize,
    length: usize,
    buffer: usize,
    gap: usize,
}

/// Partitions a series of length `t` into subchains of odd length `l`.
pub fn partition(t: usize, l: usize) -> Result<SubchainPartition> {
    if l == 0 || l.is_multiple_of(2) || l > t {
        return Err(Error::InvalidLength {
            length: l,
            series: t,
        });
    }
    Ok(SubchainPartition {
        series_len: t,
        length: l,
        buffer: 0,
        gap: 0,
    })
}

impl SubchainPartition {
    pub fn with_buffer(mut self, buffer: usize) -> Self {
        self.buffer = buffer;
        self
    }

    /// Minimum number of timesteps separating the buffered extents of
    /// uniformly sampled subchains.
    pub fn with_gap(mut self, gap: usize) -> Self {
        self.gap = gap;
        self
    }

    pub fn series_len(&self) -> usize {
        self.series_len
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn buffer(&self) -> usize {
        self.buffer
    }

    pub fn gap(&self) -> usize {
        self.gap
    }

    /// Number of subchains, `floor(T / L)`.
    pub fn n_windows(&self) -> usize {
        self.series_len / self.length
    }

    /// One-based center of window `idx`.
    pub fn center(&self, idx: usize) -> usize {
        ((2 * idx + 1) * self.length + 1) / 2
    }

    pub fn centers(&self) -> Vec<usize> {
        (0..self.n_windows()).map(|i| self.center(i)).collect()
    }

    /// Zero-based index range of the core observations of window `idx`.
    pub fn core_range(&self, idx: usize) -> Range<usize> {
        idx * self.length..(idx + 1) * self.length
    }

    /// Zero-based index range of the observations not covered by any window.
    pub fn remainder(&self) -> Range<usize> {
        self.n_windows() * self.length..self.series_len
    }

    fn buffered(&self, core: Range<usize>) -> (Range<usize>, Range<usize>) {
        let left = core.start.saturating_sub(self.buffer)..core.start;
        let right = core.end..(core.end + self.buffer).min(self.series_len);
        (left, right)
    }

    /// Window `idx` with its buffers truncated at the series boundaries.
    pub fn window<'a>(&self, y: &'a ObservationSeries, idx: usize) -> BufferedWindow<'a> {
        let core = self.core_range(idx);
        self.make_window(y, core, self.center(idx))
    }

    /// The remainder block as a shorter window, when `L` does not divide `T`.
    pub fn remainder_window<'a>(&self, y: &'a ObservationSeries) -> Option<BufferedWindow<'a>> {
        let rem = self.remainder();
        if rem.is_empty() {
            return None;
        }
        let center = (rem.start + rem.end + 1) / 2;
        Some(self.make_window(y, rem, center))
    }

    fn make_window<'a>(
        &self,
        y: &'a ObservationSeries,
        core: Range<usize>,
        center: usize,
    ) -> BufferedWindow<'a> {
        let (left, right) = self.buffered(core.clone());
        let v = y.values();
        BufferedWindow {
            center,
            core_start: core.start,
            core: &v[core],
            left: &v[left],
            right: &v[right],
        }
    }

    /// Whether the buffered extents of the (sorted) windows are separated by
    /// at least the configured gap.
    pub fn gap_free(&self, sorted: &[usize]) -> bool {
        let min_between = 2 * self.buffer + self.gap;
        sorted.windows(2).all(|w| {
            let end = self.core_range(w[0]).end;
            let start = self.core_range(w[1]).start;
            start >= end && start - end >= min_between
        })
    }

    pub fn check_series(&self, y: &ObservationSeries) -> Result<()> {
        if y.len() != self.series_len {
            return Err(Error::ShapeMismatch(format!(
                "partition built for T={} applied to a series of length {}",
                self.series_len,
                y.len()
            )));
        }
        Ok(())
    }
}

/// A subchain with its left and right buffers.
#[derive(Debug, Clone, Copy)]
pub struct BufferedWindow<'a> {
    /// One-based center.
    pub center: usize,
    /// Zero-based index of the first core observation.
    pub core_start: usize,
    pub core: &'a [f64],
    pub left: &'a [f64],
    pub right: &'a [f64],
}

/// Normalized boundary messages `(q_bar, pi_bar)` of a buffered window.
///
/// `pi_bar` propagates the stationary distribution through the left buffer;
/// `q_bar` propagates the ones vector backwards through the right buffer.
pub fn buffered_messages(
    params: &HmmParams,
    window: &BufferedWindow<'_>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let pi = stationary_distribution(&params.transition)?;
    messages_from(params, window, &pi)
}

fn messages_from(
    params: &HmmParams,
    window: &BufferedWindow<'_>,
    pi: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let left_start = window.core_start - window.left.len();
    let right_start = window.core_start + window.core.len();
    let pi_bar = propagate_forward(params, window.left, pi, left_start)?;
    let ones = vec![1.0; params.k()];
    let q_bar = propagate_backward(params, window.right, &ones, right_start)?;
    Ok((q_bar, pi_bar))
}

/// The `U`-gradient contribution of one window given its boundary messages.
///
/// Invariant to positive rescaling of either message.
pub fn local_grad_term_with_messages(
    params: &HmmParams,
    window: &BufferedWindow<'_>,
    q_bar: &[f64],
    pi_bar: &[f64],
) -> Result<GradientEstimate> {
    let mut est = GradientEstimate::zeros(params, EstimatorKind::Full);
    accumulate_window_score(
        params,
        window.core,
        pi_bar,
        q_bar,
        1.0,
        window.core_start,
        &mut est.a_grad,
        &mut est.emission_grad,
    )?;
    est.sampled_centers.push(window.center);
    Ok(est.finish_with_prior(params, &PriorSpec::Flat))
}

/// The `U`-gradient contribution of one window, with buffered messages.
pub fn local_grad_term(
    params: &HmmParams,
    window: &BufferedWindow<'_>,
) -> Result<GradientEstimate> {
    let (q_bar, pi_bar) = buffered_messages(params, window)?;
    local_grad_term_with_messages(params, window, &q_bar, &pi_bar)
}

/// Sums `weight * local term` over the listed windows, then the remainder
/// block and prior term.
fn weighted_estimate(
    params: &HmmParams,
    y: &ObservationSeries,
    partition: &SubchainPartition,
    items: &[(usize, f64)],
    kind: EstimatorKind,
    prior: &PriorSpec,
) -> Result<GradientEstimate> {
    partition.check_series(y)?;
    let pi = stationary_distribution(&params.transition)?;
    let mut est = GradientEstimate::zeros(params, kind);
    let add = |w: &BufferedWindow<'_>, weight: f64, est: &mut GradientEstimate| {
        let (q_bar, pi_bar) = messages_from(params, w, &pi)?;
        accumulate_window_score(
            params,
            w.core,
            &pi_bar,
            &q_bar,
            weight,
            w.core_start,
            &mut est.a_grad,
            &mut est.emission_grad,
        )
    };
    for &(idx, weight) in items {
        let w = partition.window(y, idx);
        add(&w, weight, &mut est)?;
        est.sampled_centers.push(w.center);
    }
    if let Some(w) = partition.remainder_window(y) {
        add(&w, 1.0, &mut est)?;
    }
    let est = est.finish_with_prior(params, prior);
    est.check_finite()?;
    Ok(est)
}

/// Sum of every window's buffered term plus the prior term.
pub fn full_subseries_grad(
    params: &HmmParams,
    y: &ObservationSeries,
    partition: &SubchainPartition,
    prior: &PriorSpec,
) -> Result<GradientEstimate> {
    let items: Vec<(usize, f64)> = (0..partition.n_windows()).map(|i| (i, 1.0)).collect();
    weighted_estimate(params, y, partition, &items, EstimatorKind::Full, prior)
}

/// Draws `s` distinct windows uniformly, redrawing the whole subset until
/// the buffered extents are gap-separated.
///
/// A census (`s` equal to the number of windows) is returned directly: it has
/// no sampling independence to protect.
pub fn sample_uniform_subset<R: Rng + ?Sized>(
    partition: &SubchainPartition,
    s: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let n = partition.n_windows();
    if s == 0 || s > n {
        return Err(Error::InvalidParameter(format!(
            "uniform subsample size {s} outside [1, {n}]"
        )));
    }
    if s == n {
        return Ok((0..n).collect());
    }
    for _ in 0..MAX_GAP_ATTEMPTS {
        let mut subset = sample_indices(rng, n, s).into_vec();
        subset.sort_unstable();
        if partition.gap_free(&subset) {
            return Ok(subset);
        }
    }
    Err(Error::InfeasibleGap {
        requested: s,
        attempts: MAX_GAP_ATTEMPTS,
    })
}

/// Uniform minibatch estimate for an explicit subset of windows, scaled by
/// `floor(T / L) / S`.
pub fn uniform_grad_for_subset(
    params: &HmmParams,
    y: &ObservationSeries,
    partition: &SubchainPartition,
    subset: &[usize],
    prior: &PriorSpec,
) -> Result<GradientEstimate> {
    if subset.is_empty() {
        return Err(Error::InvalidParameter("empty subset".into()));
    }
    let n = partition.n_windows();
    if let Some(&bad) = subset.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidParameter(format!("window {bad} out of range")));
    }
    let scale = n as f64 / subset.len() as f64;
    let mut items: Vec<(usize, f64)> = subset.iter().map(|&i| (i, scale)).collect();
    items.sort_by_key(|&(i, _)| i);
    weighted_estimate(params, y, partition, &items, EstimatorKind::Uniform, prior)
}

/// Uniform minibatch gradient with the gap condition.
pub fn uniform_minibatch_grad<R: Rng + ?Sized>(
    params: &HmmParams,
    y: &ObservationSeries,
    partition: &SubchainPartition,
    s: usize,
    prior: &PriorSpec,
    rng: &mut R,
) -> Result<GradientEstimate> {
    let subset = sample_uniform_subset(partition, s, rng)?;
    uniform_grad_for_subset(params, y, partition, &subset, prior)
}

/// Checks that quotas match the clusters and satisfy `1 <= b_m <= n_m`.
pub fn validate_quotas(clusters: &ClusterModel, quotas: &[usize]) -> Result<()> {
    if quotas.len() != clusters.n_clusters() {
        return Err(Error::ShapeMismatch(format!(
            "{} quotas for {} clusters",
            quotas.len(),
            clusters.n_clusters()
        )));
    }
    for (m, (&b, &n)) in quotas.iter().zip(clusters.sizes()).enumerate() {
        if n == 0 {
            return Err(Error::EmptyCluster(m));
        }
        if b == 0 {
            return Err(Error::InvalidParameter(format!("quota for cluster {m} is zero")));
        }
        if b > n {
            return Err(Error::QuotaExceedsCluster {
                cluster: m,
                quota: b,
                size: n,
            });
        }
    }
    Ok(())
}

/// Draws `b_m` windows without replacement from every cluster.
pub fn sample_stratified<R: Rng + ?Sized>(
    clusters: &ClusterModel,
    quotas: &[usize],
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    validate_quotas(clusters, quotas)?;
    Ok(clusters
        .members()
        .iter()
        .zip(quotas)
        .map(|(members, &b)| {
            let mut picked: Vec<usize> = sample_indices(rng, members.len(), b)
                .into_iter()
                .map(|i| members[i])
                .collect();
            picked.sort_unstable();
            picked
        })
        .collect())
}

/// Stratified estimate for an explicit draw, rescaling stratum `m` by `n_m / b_m`.
pub fn stratified_grad_for_draw(
    params: &HmmParams,
    y: &ObservationSeries,
    partition: &SubchainPartition,
    clusters: &ClusterModel,
    draw: &[Vec<usize>],
    prior: &PriorSpec,
) -> Result<GradientEstimate> {
    if clusters.n_windows() != partition.n_windows() {
        return Err(Error::ShapeMismatch(format!(
            "cluster model covers {} windows, partition has {}",
            clusters.n_windows(),
            partition.n_windows()
        )));
    }
    let quotas: Vec<usize> = draw.iter().map(Vec::len).collect();
    validate_quotas(clusters, &quotas)?;
    let mut items = Vec::with_capacity(quotas.iter().sum());
    for (m, picked) in draw.iter().enumerate() {
        let weight = clusters.sizes()[m] as f64 / picked.len() as f64;
        for &idx in picked {
            if clusters.assignment().get(idx) != Some(&m) {
                return Err(Error::InvalidParameter(format!(
                    "window {idx} is not a member of cluster {m}"
                )));
            }
            items.push((idx, weight));
        }
    }
    items.sort_by_key(|&(i, _)| i);
    weighted_estimate(params, y, partition, &items, EstimatorKind::Stratified, prior)
}

/// Stratified gradient with a fresh draw from `rng`.
pub fn stratified_grad<R: Rng + ?Sized>(
    params: &HmmParams,
    y: &ObservationSeries,
    partition: &SubchainPartition,
    clusters: &ClusterModel,
    quotas: &[usize],
    prior: &PriorSpec,
    rng: &mut R,
) -> Result<GradientEstimate> {
    let draw = sample_stratified(clusters, quotas, rng)?;
    stratified_grad_for_draw(params, y, partition, clusters, &draw, prior)
}

/// How a gradient estimate is formed from the subchains.
#[derive(Debug, Clone, PartialEq)]
pub enum MinibatchPlan {
    /// Every window.
    Full,
    /// `s` gap-separated windows, uniformly.
    Uniform { s: usize },
    /// Quotas `b_m` from each cluster.
    Stratified {
        clusters: ClusterModel,
        quotas: Vec<usize>,
    },
}

impl MinibatchPlan {
    pub fn validate(&self, partition: &SubchainPartition) -> Result<()> {
        match self {
            MinibatchPlan::Full => Ok(()),
            MinibatchPlan::Uniform { s } => {
                if *s == 0 || *s > partition.n_windows() {
                    return Err(Error::InvalidParameter(format!(
                        "uniform subsample size {s} outside [1, {}]",
                        partition.n_windows()
                    )));
                }
                Ok(())
            }
            MinibatchPlan::Stratified { clusters, quotas } => {
                if clusters.n_windows() != partition.n_windows() {
                    return Err(Error::ShapeMismatch(
                        "cluster model does not cover the partition".into(),
                    ));
                }
                validate_quotas(clusters, quotas)
            }
        }
    }

    /// Total number of windows evaluated per estimate.
    pub fn total_draws(&self, partition: &SubchainPartition) -> usize {
        match self {
            MinibatchPlan::Full => partition.n_windows(),
            MinibatchPlan::Uniform { s } => *s,
            MinibatchPlan::Stratified { quotas, .. } => quotas.iter().sum(),
        }
    }

    pub fn estimate<R: Rng + ?Sized>(
        &self,
        params: &HmmParams,
        y: &ObservationSeries,
        partition: &SubchainPartition,
        prior: &PriorSpec,
        rng: &mut R,
    ) -> Result<GradientEstimate> {
        match self {
            MinibatchPlan::Full => full_subseries_grad(params, y, partition, prior),
            MinibatchPlan::Uniform { s } => {
                uniform_minibatch_grad(params, y, partition, *s, prior, rng)
            }
            MinibatchPlan::Stratified { clusters, quotas } => {
                stratified_grad(params, y, partition, clusters, quotas, prior, rng)
            }
        }
    }
}
