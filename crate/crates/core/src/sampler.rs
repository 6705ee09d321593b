//! SG-MCMC (uniform minibatches, adaptive buffer) and CSG-MCMC (stratified
//! minibatches, fixed buffer) on a projected SGLD kernel.

use std::io::{Read, Write};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterModel;
use crate::error::{Error, Result};
use crate::hmm::{
    project_columns_to_simplex, spectral_gap, Emissions, GradientEstimate, HmmParams,
    ObservationSeries, PriorSpec, TransitionMatrix, BERNOULLI_MAX, BERNOULLI_MIN,
};
use crate::subchain::{
    sample_stratified, sample_uniform_subset, stratified_grad_for_draw, uniform_grad_for_subset,
    validate_quotas, SubchainPartition,
};

/// Log-variances are clamped to this range after every update.
pub const LOG_VARIANCE_BOUNDS: (f64, f64) = (-30.0, 30.0);

/// `eps_n = a (b + n)^(-gamma)` for outer iterations `n = 1, 2, ...`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub a: f64,
    #[serde(default)]
    pub b: f64,
    #[serde(default)]
    pub gamma: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self::constant(1e-4)
    }
}

impl StepSchedule {
    pub fn constant(a: f64) -> Self {
        Self { a, b: 0.0, gamma: 0.0 }
    }

    pub fn step(&self, n: usize) -> f64 {
        self.a * (self.b + n as f64).powf(-self.gamma)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(Error::InvalidParameter("step scale a must be positive".into()));
        }
        if !(self.b >= 0.0) {
            return Err(Error::InvalidParameter("step offset b must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidParameter("step decay gamma must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgldConfig {
    #[serde(default)]
    pub schedule: StepSchedule,
    #[serde(default = "default_true")]
    pub inject_noise: bool,
    pub n_iter: usize,
    /// Inner steps per outer iteration; SG-MCMC only.
    #[serde(default = "default_one")]
    pub n_steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Fixed multiplier on the step size of the transition block; the noise
    /// variance is scaled to match. One gives the plain kernel.
    #[serde(default = "default_unit")]
    pub transition_scale: f64,
}

fn default_unit() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

impl SgldConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(self.transition_scale > 0.0 && self.transition_scale.is_finite()) {
            return Err(Error::InvalidParameter("transition_scale must be positive".into()));
        }
        if self.n_iter == 0 || self.n_steps == 0 {
            return Err(Error::InvalidParameter(
                "n_iter and n_steps must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// How SG-MCMC chooses its buffer each outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum BufferRule {
    /// `ceil(safety / spectral_gap(A))`, capped at `T / 10`.
    Adaptive { safety: f64 },
    Fixed { buffer: usize },
}

impl Default for BufferRule {
    fn default() -> Self {
        BufferRule::Adaptive { safety: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sgmcmc,
    Csgmcmc,
}

/// `theta - (eps / 2) grad + eta`, with `eta ~ N(0, eps I)` when `inject_noise`.
pub fn sgld_step<R: Rng + ?Sized>(
    theta: &[f64],
    grad: &GradientEstimate,
    eps: f64,
    inject_noise: bool,
    rng: &mut R,
) -> Result<Vec<f64>> {
    grad.check_finite()?;
    let g = grad.flatten();
    if g.len() != theta.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient has {} entries, parameter has {}",
            g.len(),
            theta.len()
        )));
    }
    let mut out = theta.to_vec();
    langevin_update(&mut out, &g, eps, inject_noise, rng);
    Ok(out)
}

fn langevin_update<R: Rng + ?Sized>(
    theta: &mut [f64],
    grad: &[f64],
    eps: f64,
    inject_noise: bool,
    rng: &mut R,
) {
    let sd = eps.sqrt();
    for (t, g) in theta.iter_mut().zip(grad) {
        *t -= 0.5 * eps * g;
        if inject_noise {
            *t += sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// `ceil(safety / gap)` capped at `floor(T / 10)`.
pub fn buffer_from_spectral_gap(a: &TransitionMatrix, safety: f64, t: usize) -> Result<usize> {
    let gap = spectral_gap(a)?;
    let cap = t / 10;
    let raw = safety / gap;
    if !raw.is_finite() || raw >= cap as f64 {
        return Ok(cap);
    }
    Ok(raw.ceil() as usize)
}

/// Rebuilds parameters from a flat vector: the transition block is projected
/// onto the column simplex and emission coordinates are clamped.
pub fn project_params(theta: &[f64], template: &HmmParams) -> Result<HmmParams> {
    let k = template.k();
    let transition = project_columns_to_simplex(k, &theta[..k * k])?;
    let emissions = clamp_emissions(&template.emissions, &theta[k * k..])?;
    HmmParams::new(transition, emissions)
}

fn clamp_emissions(template: &Emissions, coords: &[f64]) -> Result<Emissions> {
    match template {
        Emissions::Gaussian { means, .. } => {
            let k = means.len();
            let (lo, hi) = LOG_VARIANCE_BOUNDS;
            let mut c = coords.to_vec();
            c[k..].iter_mut().for_each(|v| *v = v.clamp(lo, hi));
            template.with_coords(&c)
        }
        Emissions::Bernoulli { .. } => template.with_coords(coords),
    }
}

/// Starting point: uniform `A`; variances at the data variance.
///
/// With one cluster per state, Gaussian means are the centroid means in
/// increasing order and Bernoulli probabilities the centroid means in
/// decreasing order. Otherwise means come from data quantiles and
/// probabilities are one half.
pub fn initial_params(
    y: &ObservationSeries,
    template: &Emissions,
    centroid_means: Option<&[f64]>,
) -> Result<HmmParams> {
    let k = template.n_states();
    let emissions = match template {
        Emissions::Gaussian { .. } => {
            let v = y.values();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let var = if var > 0.0 { var } else { 1.0 };
            let means = match centroid_means {
                Some(c) if c.len() == k => {
                    let mut c = c.to_vec();
                    c.sort_by(f64::total_cmp);
                    c
                }
                _ => {
                    let mut sorted = v.to_vec();
                    sorted.sort_by(f64::total_cmp);
                    (0..k)
                        .map(|j| {
                            let q = (j as f64 + 0.5) / k as f64;
                            sorted[((q * n) as usize).min(sorted.len() - 1)]
                        })
                        .collect()
                }
            };
            Emissions::gaussian(means, vec![var; k])?
        }
        Emissions::Bernoulli { .. } => match centroid_means {
            Some(c) if c.len() == k => {
                let mut c: Vec<f64> = c.iter().map(|p| p.clamp(BERNOULLI_MIN, BERNOULLI_MAX)).collect();
                c.sort_by(|a, b| b.total_cmp(a));
                Emissions::bernoulli(c)?
            }
            _ => Emissions::bernoulli(vec![0.5; k])?,
        },
    };
    HmmParams::new(TransitionMatrix::uniform(k), emissions)
}

/// One outer iteration of a sampler run.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub elapsed_seconds: f64,
    pub params: HmmParams,
    pub grad_norm: f64,
    pub buffer: usize,
    pub sampled_centers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerTrace {
    pub algorithm: Algorithm,
    pub initial: HmmParams,
    pub records: Vec<TraceRecord>,
    /// Set when the run stopped early on a non-finite gradient.
    pub abort: Option<String>,
}

fn trace_header(params: &HmmParams) -> Vec<String> {
    let k = params.k();
    let mut h = vec!["iteration".to_string()];
    for i in 0..k {
        for j in 0..k {
            h.push(format!("a_{i}_{j}"));
        }
    }
    match &params.emissions {
        Emissions::Gaussian { .. } => {
            h.extend((0..k).map(|j| format!("mean_{j}")));
            h.extend((0..k).map(|j| format!("var_{j}")));
        }
        Emissions::Bernoulli { .. } => h.extend((0..k).map(|j| format!("p_{j}"))),
    }
    h.extend(["grad_norm", "buffer", "centers"].map(String::from));
    h
}

fn emission_values(e: &Emissions) -> Vec<f64> {
    match e {
        Emissions::Gaussian { means, variances } => {
            means.iter().chain(variances).copied().collect()
        }
        Emissions::Bernoulli { probs } => probs.clone(),
    }
}

impl SamplerTrace {
    pub fn final_params(&self) -> &HmmParams {
        self.records.last().map_or(&self.initial, |r| &r.params)
    }

    /// One row per outer iteration; the initial state is row zero. Wall-clock
    /// times are kept out so identical runs give identical bytes.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::InvalidParameter(format!("trace write failed: {e}"));
        out.write_record(trace_header(&self.initial)).map_err(io)?;
        let row = |it: usize, p: &HmmParams, norm: f64, buffer: usize, centers: &[usize]| {
            let mut r = vec![it.to_string()];
            r.extend(p.transition.as_slice().iter().map(f64::to_string));
            r.extend(emission_values(&p.emissions).iter().map(f64::to_string));
            r.push(norm.to_string());
            r.push(buffer.to_string());
            r.push(
                centers
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(" "),
            );
            r
        };
        out.write_record(row(0, &self.initial, 0.0, 0, &[])).map_err(io)?;
        for rec in &self.records {
            out.write_record(row(
                rec.iteration,
                &rec.params,
                rec.grad_norm,
                rec.buffer,
                &rec.sampled_centers,
            ))
            .map_err(io)?;
        }
        out.flush()
            .map_err(|e| Error::InvalidParameter(format!("trace write failed: {e}")))
    }

    /// `iteration,elapsed_seconds` per outer iteration.
    pub fn write_timing_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::InvalidParameter(format!("timing write failed: {e}"));
        out.write_record(["iteration", "elapsed_seconds"]).map_err(io)?;
        for rec in &self.records {
            out.write_record([rec.iteration.to_string(), rec.elapsed_seconds.to_string()])
                .map_err(io)?;
        }
        out.flush()
            .map_err(|e| Error::InvalidParameter(format!("timing write failed: {e}")))
    }
}

/// Reads `(iteration, params)` pairs back from a trace CSV.
pub fn read_trace_csv<R: Read>(r: R) -> Result<Vec<(usize, HmmParams)>> {
    let mut rdr = csv::Reader::from_reader(r);
    let bad = |m: String| Error::InvalidParameter(format!("malformed trace: {m}"));
    let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    let n_a = header.iter().filter(|h| h.starts_with("a_")).count();
    let k = (n_a as f64).sqrt().round() as usize;
    if k * k != n_a || k == 0 {
        return Err(bad(format!("{n_a} transition columns")));
    }
    let gaussian = header.iter().any(|h| h.starts_with("mean_"));
    let n_em = if gaussian { 2 * k } else { k };
    let mut out = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            row.get(i)
                .ok_or_else(|| bad(format!("row {} too short", line + 2)))?
                .parse::<f64>()
                .map_err(|e| bad(format!("row {}: {e}", line + 2)))
        };
        let iteration = num(0)? as usize;
        let a: Vec<f64> = (1..=n_a).map(num).collect::<Result<_>>()?;
        let em: Vec<f64> = (n_a + 1..=n_a + n_em).map(num).collect::<Result<_>>()?;
        let emissions = if gaussian {
            Emissions::gaussian(em[..k].to_vec(), em[k..].to_vec())?
        } else {
            Emissions::bernoulli(em)?
        };
        out.push((iteration, HmmParams::new(TransitionMatrix::new(k, a)?, emissions)?));
    }
    Ok(out)
}

fn check_inputs(
    y: &ObservationSeries,
    config: &SgldConfig,
    partition: &SubchainPartition,
    prior: &PriorSpec,
    init: &HmmParams,
) -> Result<()> {
    config.validate()?;
    partition.check_series(y)?;
    prior.validate(init.n_coords())
}

fn aborted(err: &Error, n: usize) -> Option<String> {
    match err {
        Error::NonFiniteGradient(c) => Some(format!(
            "non-finite gradient component {c} at iteration {n}"
        )),
        _ => None,
    }
}

/// SG-MCMC. Each outer iteration recomputes the buffer from the current `A`,
/// draws `s` gap-separated subchains, runs `n_steps` chained updates of `A`
/// with emissions fixed and averages the visited iterates, then does the same
/// for the emission parameters with the new `A`, reusing the subchains.
pub fn run_sgmcmc(
    y: &ObservationSeries,
    config: &SgldConfig,
    partition: &SubchainPartition,
    s: usize,
    buffer: BufferRule,
    prior: &PriorSpec,
    init: &HmmParams,
) -> Result<SamplerTrace> {
    check_inputs(y, config, partition, prior, init)?;
    let k = init.k();
    let kk = k * k;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = SamplerTrace {
        algorithm: Algorithm::Sgmcmc,
        initial: init.clone(),
        records: Vec::with_capacity(config.n_iter),
        abort: None,
    };
    let mut params = init.clone();
    let start = Instant::now();
    for n in 1..=config.n_iter {
        let eps = config.schedule.step(n);
        let eps_a = eps * config.transition_scale;
        let b = match buffer {
            BufferRule::Adaptive { safety } => {
                buffer_from_spectral_gap(&params.transition, safety, y.len())?
            }
            BufferRule::Fixed { buffer } => buffer,
        };
        let part = partition.clone().with_buffer(b);
        let subset = sample_uniform_subset(&part, s, &mut rng)?;

        let mut grad_norm = f64::NAN;
        let mut cur = params.clone();
        let mut a_sum = vec![0.0; kk];
        for _ in 0..config.n_steps {
            let g = match uniform_grad_for_subset(&cur, y, &part, &subset, prior) {
                Ok(g) => g,
                Err(e) => match aborted(&e, n) {
                    Some(msg) => {
                        trace.abort = Some(msg);
                        return Ok(trace);
                    }
                    None => return Err(e),
                },
            };
            if grad_norm.is_nan() {
                grad_norm = g.norm();
            }
            let mut a = cur.transition.as_slice().to_vec();
            langevin_update(&mut a, &g.a_grad, eps_a, config.inject_noise, &mut rng);
            cur.transition = project_columns_to_simplex(k, &a)?;
            a_sum.iter_mut().zip(cur.transition.as_slice()).for_each(|(s, v)| *s += v);
        }
        cur.transition = project_columns_to_simplex(k, &a_sum)?;

        let mut em_sum = vec![0.0; init.emissions.n_coords()];
        let mut coords = cur.emissions.coords();
        for _ in 0..config.n_steps {
            let g = match uniform_grad_for_subset(&cur, y, &part, &subset, prior) {
                Ok(g) => g,
                Err(e) => match aborted(&e, n) {
                    Some(msg) => {
                        trace.abort = Some(msg);
                        return Ok(trace);
                    }
                    None => return Err(e),
                },
            };
            langevin_update(&mut coords, &g.emission_grad, eps, config.inject_noise, &mut rng);
            cur.emissions = clamp_emissions(&cur.emissions, &coords)?;
            coords = cur.emissions.coords();
            em_sum.iter_mut().zip(&coords).for_each(|(s, v)| *s += v);
        }
        em_sum.iter_mut().for_each(|s| *s /= config.n_steps as f64);
        cur.emissions = clamp_emissions(&cur.emissions, &em_sum)?;
        params = cur;

        trace.records.push(TraceRecord {
            iteration: n,
            elapsed_seconds: start.elapsed().as_secs_f64(),
            params: params.clone(),
            grad_norm,
            buffer: b,
            sampled_centers: subset.iter().map(|&i| part.center(i)).collect(),
        });
    }
    Ok(trace)
}

/// CSG-MCMC. The buffer is the partition's, fixed for the run. Each
/// iteration draws a fresh stratified subsample and makes one joint update of
/// `A` and the emission parameters.
pub fn run_csgmcmc(
    y: &ObservationSeries,
    config: &SgldConfig,
    partition: &SubchainPartition,
    clusters: &ClusterModel,
    quotas: &[usize],
    prior: &PriorSpec,
    init: &HmmParams,
) -> Result<SamplerTrace> {
    check_inputs(y, config, partition, prior, init)?;
    if clusters.n_windows() != partition.n_windows() {
        return Err(Error::ShapeMismatch(
            "cluster model does not cover the partition".into(),
        ));
    }
    validate_quotas(clusters, quotas)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = SamplerTrace {
        algorithm: Algorithm::Csgmcmc,
        initial: init.clone(),
        records: Vec::with_capacity(config.n_iter),
        abort: None,
    };
    let mut params = init.clone();
    let start = Instant::now();
    for n in 1..=config.n_iter {
        let eps = config.schedule.step(n);
        let draw = sample_stratified(clusters, quotas, &mut rng)?;
        let g = match stratified_grad_for_draw(&params, y, partition, clusters, &draw, prior) {
            Ok(g) => g,
            Err(e) => match aborted(&e, n) {
                Some(msg) => {
                    trace.abort = Some(msg);
                    return Ok(trace);
                }
                None => return Err(e),
            },
        };
        g.check_finite()?;
        let kk = params.k() * params.k();
        let mut theta = params.flatten();
        let (a, em) = theta.split_at_mut(kk);
        langevin_update(a, &g.a_grad, eps * config.transition_scale, config.inject_noise, &mut rng);
        langevin_update(em, &g.emission_grad, eps, config.inject_noise, &mut rng);
        params = project_params(&theta, &params)?;
        trace.records.push(TraceRecord {
            iteration: n,
            elapsed_seconds: start.elapsed().as_secs_f64(),
            params: params.clone(),
            grad_norm: g.norm(),
            buffer: partition.buffer(),
            sampled_centers: g.sampled_centers,
        });
    }
    Ok(trace)
}
