//! Experiment driver: configuration, data preparation, sampler execution,
//! metric export and gradient-variance sweeps.

mod data;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use data::{generate_dataset, ingest_csv, BuiltinDataset, GeneratedFiles, IngestReport, RARE2_EPSILON};

use crate::clustering::{cluster_subchains, ClusterModel, KMeansOptions, Preprocessing};
use crate::error::{Error, Result};
use crate::eval::{
    gradient_variance_mc, interval_path, k_step_log_predictive, permutation_aware_error,
    MatrixNorm,
};
use crate::hmm::{EmissionFamily, Emissions, HmmParams, ObservationSeries, PriorSpec};
use crate::sampler::{
    buffer_from_spectral_gap, initial_params, read_trace_csv, run_csgmcmc, run_sgmcmc, Algorithm,
    BufferRule, SamplerTrace, SgldConfig, StepSchedule,
};
use crate::subchain::{partition, MinibatchPlan, SubchainPartition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DatasetSpec {
    Builtin {
        name: BuiltinDataset,
        /// Series length; the dataset default when absent.
        #[serde(default)]
        t: Option<usize>,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        column: usize,
        #[serde(default)]
        max_t: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub k: usize,
    pub family: EmissionFamily,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    /// Odd subchain length `L`.
    pub l: usize,
    /// Extra separation between buffered uniform draws.
    #[serde(default)]
    pub gap: usize,
    #[serde(default)]
    pub buffer: BufferRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PlanSpec {
    Uniform {
        s: usize,
    },
    Stratified {
        m: usize,
        quotas: Vec<usize>,
        #[serde(default)]
        preprocessing: Preprocessing,
        #[serde(default)]
        kmeans: KMeansOptions,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub algorithm: Algorithm,
    #[serde(default)]
    pub schedule: StepSchedule,
    #[serde(default = "default_true")]
    pub inject_noise: bool,
    pub n_iter: usize,
    #[serde(default = "default_one")]
    pub n_steps: usize,
    /// Step multiplier for the transition block.
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

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Holdout length; zero disables the predictive metric.
    #[serde(default = "default_holdout")]
    pub holdout: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    /// Metrics are computed every `cadence` iterations.
    #[serde(default = "default_cadence")]
    pub cadence: usize,
    #[serde(default)]
    pub norm: MatrixNorm,
}

fn default_horizon() -> usize {
    10
}

fn default_holdout() -> usize {
    2000
}

fn default_level() -> f64 {
    0.95
}

fn default_cadence() -> usize {
    25
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            horizon: default_horizon(),
            holdout: default_holdout(),
            level: default_level(),
            cadence: default_cadence(),
            norm: MatrixNorm::Frobenius,
        }
    }
}

/// A complete experiment, loadable from a single JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub partition: PartitionSpec,
    pub plan: PlanSpec,
    pub sampler: SamplerSpec,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub prior: PriorSpec,
    /// Master seed; every random stream of the run is derived from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/latest")
}

/// Independent random streams derived from the master seed.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum SeedStream {
    Data = 1,
    Holdout = 2,
    Cluster = 3,
    Sampler = 4,
    Variance = 5,
}

pub fn derive_seed(master: u64, stream: SeedStream) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream as u64);
    rng.next_u64()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.model.k == 0 {
            return bad("model needs at least one state");
        }
        if self.partition.l == 0 || self.partition.l.is_multiple_of(2) {
            return bad("subchain length must be odd");
        }
        match (&self.plan, self.sampler.algorithm) {
            (PlanSpec::Uniform { s }, Algorithm::Sgmcmc) => {
                if *s == 0 {
                    return bad("uniform subsample size must be positive");
                }
            }
            (PlanSpec::Stratified { m, quotas, .. }, Algorithm::Csgmcmc) => {
                if *m == 0 || quotas.len() != *m {
                    return bad("stratified plan needs one quota per cluster");
                }
                if quotas.contains(&0) {
                    return bad("quotas must be positive");
                }
                if !matches!(self.partition.buffer, BufferRule::Fixed { .. }) {
                    return bad("csgmcmc uses a fixed buffer");
                }
            }
            _ => return bad("sgmcmc runs a uniform plan and csgmcmc a stratified plan"),
        }
        if self.eval.cadence == 0 || self.eval.horizon == 0 {
            return bad("metric cadence and horizon must be positive");
        }
        if !(self.eval.level > 0.0 && self.eval.level < 1.0) {
            return bad("interval level must lie in (0, 1)");
        }
        self.sgld().validate()?;
        let n_coords = self.model.k * self.model.k
            + match self.model.family {
                EmissionFamily::Gaussian => 2 * self.model.k,
                EmissionFamily::Bernoulli => self.model.k,
            };
        self.prior.validate(n_coords)
    }

    pub fn sgld(&self) -> SgldConfig {
        SgldConfig {
            schedule: self.sampler.schedule,
            inject_noise: self.sampler.inject_noise,
            n_iter: self.sampler.n_iter,
            n_steps: self.sampler.n_steps,
            transition_scale: self.sampler.transition_scale,
            seed: derive_seed(self.seed, SeedStream::Sampler),
        }
    }

    fn template(&self) -> Emissions {
        let k = self.model.k;
        match self.model.family {
            EmissionFamily::Gaussian => Emissions::Gaussian {
                means: vec![0.0; k],
                variances: vec![1.0; k],
            },
            EmissionFamily::Bernoulli => Emissions::Bernoulli { probs: vec![0.5; k] },
        }
    }
}

/// Training series, optional holdout and known parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub train: ObservationSeries,
    pub holdout: Option<ObservationSeries>,
    pub truth: Option<HmmParams>,
    pub rejected_non_finite: usize,
}

/// Simulates a builtin dataset with an independent holdout, or reads a CSV
/// series and holds out its last `eval.holdout` observations.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let h = cfg.eval.holdout;
    match &cfg.dataset {
        DatasetSpec::Builtin { name, t } => {
            let t = t.unwrap_or(name.default_len());
            let (_, train) = name.simulate(t, derive_seed(cfg.seed, SeedStream::Data))?;
            let holdout = if h > cfg.eval.horizon {
                Some(name.simulate(h, derive_seed(cfg.seed, SeedStream::Holdout))?.1)
            } else {
                None
            };
            Ok(PreparedData {
                train,
                holdout,
                truth: Some(name.true_params()),
                rejected_non_finite: 0,
            })
        }
        DatasetSpec::Csv { path, column, max_t } => {
            let report = ingest_csv(path, *column, *max_t, derive_seed(cfg.seed, SeedStream::Data))?;
            let values = report.series.into_inner();
            let (train, holdout) = if h > cfg.eval.horizon && values.len() > h + cfg.partition.l {
                let split = values.len() - h;
                (values[..split].to_vec(), Some(ObservationSeries::new(values[split..].to_vec())?))
            } else {
                (values, None)
            };
            Ok(PreparedData {
                train: ObservationSeries::new(train)?,
                holdout,
                truth: None,
                rejected_non_finite: report.rejected_non_finite,
            })
        }
    }
}

/// Iterations at which metrics are evaluated: 0, every `cadence`, and the last.
pub fn metric_iterations(n_iter: usize, cadence: usize) -> Vec<usize> {
    let mut its: Vec<usize> = (0..=n_iter).step_by(cadence.max(1)).collect();
    if its.last() != Some(&n_iter) {
        its.push(n_iter);
    }
    its
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: usize,
    pub metric: String,
    pub value: f64,
}

/// Holdout log predictive density and permutation-aware transition error at
/// the listed iterations, ordered by iteration.
pub fn compute_metrics(
    snapshots: &[(usize, &HmmParams)],
    data: &PreparedData,
    eval: &EvalSpec,
) -> Result<Vec<MetricRow>> {
    let per_snapshot: Vec<Vec<MetricRow>> = snapshots
        .par_iter()
        .map(|&(iteration, params)| {
            let mut rows = Vec::new();
            if let Some(holdout) = &data.holdout {
                rows.push(MetricRow {
                    iteration,
                    metric: format!("log_predictive_{}", eval.horizon),
                    value: k_step_log_predictive(params, holdout, eval.horizon)?,
                });
            }
            if let Some(truth) = data.truth.as_ref().filter(|t| t.k() == params.k()) {
                let (e, _) = permutation_aware_error(&params.transition, &truth.transition, eval.norm)?;
                let norm = match eval.norm {
                    MatrixNorm::Frobenius => "frobenius",
                    MatrixNorm::Spectral => "spectral",
                };
                rows.push(MetricRow {
                    iteration,
                    metric: format!("a_error_{norm}"),
                    value: e,
                });
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    Ok(per_snapshot.into_iter().flatten().collect())
}

fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(fs::File::create(path)?));
    let err = |e: csv::Error| Error::InvalidParameter(format!("metrics write failed: {e}"));
    w.write_record(["iteration", "metric", "value"]).map_err(err)?;
    for r in rows {
        w.write_record([r.iteration.to_string(), r.metric.clone(), r.value.to_string()])
            .map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

/// Output of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub trace: SamplerTrace,
    pub metrics: Vec<MetricRow>,
    pub clusters: Option<ClusterModel>,
}

#[derive(Serialize)]
struct ClusterDocument<'a> {
    series_len: usize,
    length: usize,
    centers: Vec<usize>,
    model: Option<&'a ClusterModel>,
}

#[derive(Serialize)]
struct Summary<'a> {
    name: &'a str,
    algorithm: Algorithm,
    series_len: usize,
    iterations_completed: usize,
    abort: &'a Option<String>,
    rejected_non_finite: usize,
    final_params: &'a HmmParams,
    final_metrics: Vec<&'a MetricRow>,
}

fn snapshots(trace: &SamplerTrace, iterations: &[usize]) -> Vec<(usize, HmmParams)> {
    iterations
        .iter()
        .filter_map(|&it| match it {
            0 => Some((0, trace.initial.clone())),
            _ => trace.records.get(it - 1).map(|r| (it, r.params.clone())),
        })
        .collect()
}

/// Executes the configured pipeline and writes `trace.csv`, `timing.csv`,
/// `metrics.csv`, `intervals.csv`, `config.json`, `clusters.json` and
/// `summary.json` into `cfg.output`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let y = &data.train;
    let base = partition(y.len(), cfg.partition.l)?.with_gap(cfg.partition.gap);
    let sgld = cfg.sgld();

    let (trace, clusters, part) = match &cfg.plan {
        PlanSpec::Uniform { s } => {
            let init = initial_params(y, &cfg.template(), None)?;
            let trace = run_sgmcmc(y, &sgld, &base, *s, cfg.partition.buffer, &cfg.prior, &init)?;
            (trace, None, base)
        }
        PlanSpec::Stratified {
            m,
            quotas,
            preprocessing,
            kmeans,
        } => {
            let BufferRule::Fixed { buffer } = cfg.partition.buffer else {
                unreachable!("validated")
            };
            let part = base.with_buffer(buffer);
            let model = cluster_subchains(
                y,
                &part,
                *m,
                *preprocessing,
                derive_seed(cfg.seed, SeedStream::Cluster),
                kmeans,
            )?;
            let means = model.centroid_means();
            let init = initial_params(y, &cfg.template(), Some(&means))?;
            let trace = run_csgmcmc(y, &sgld, &part, &model, quotas, &cfg.prior, &init)?;
            (trace, Some(model), part)
        }
    };

    let its = metric_iterations(trace.records.len(), cfg.eval.cadence);
    let snaps = snapshots(&trace, &its);
    let refs: Vec<(usize, &HmmParams)> = snaps.iter().map(|(i, p)| (*i, p)).collect();
    let metrics = compute_metrics(&refs, &data, &cfg.eval)?;

    let dir = cfg.output.clone();
    fs::create_dir_all(&dir)?;
    trace.write_csv(BufWriter::new(fs::File::create(dir.join("trace.csv"))?))?;
    trace.write_timing_csv(BufWriter::new(fs::File::create(dir.join("timing.csv"))?))?;
    write_metrics(&dir.join("metrics.csv"), &metrics)?;

    let intervals = interval_path(trace.final_params(), y, cfg.eval.horizon, cfg.eval.level)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(fs::File::create(dir.join("intervals.csv"))?));
    let err = |e: csv::Error| Error::InvalidParameter(format!("interval write failed: {e}"));
    w.write_record(["horizon", "lo", "hi"]).map_err(err)?;
    for (h, (lo, hi)) in intervals.iter().enumerate() {
        w.write_record([(h + 1).to_string(), lo.to_string(), hi.to_string()])
            .map_err(err)?;
    }
    w.flush()?;

    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let doc = ClusterDocument {
        series_len: part.series_len(),
        length: part.length(),
        centers: part.centers(),
        model: clusters.as_ref(),
    };
    fs::write(dir.join("clusters.json"), serde_json::to_string(&doc)?)?;
    let last_it = its.last().copied().unwrap_or(0);
    let summary = Summary {
        name: &cfg.name,
        algorithm: trace.algorithm,
        series_len: y.len(),
        iterations_completed: trace.records.len(),
        abort: &trace.abort,
        rejected_non_finite: data.rejected_non_finite,
        final_params: trace.final_params(),
        final_metrics: metrics.iter().filter(|r| r.iteration == last_it).collect(),
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;

    Ok(RunOutcome {
        dir,
        trace,
        metrics,
        clusters,
    })
}

/// Recomputes the metrics of a finished run from its `config.json` and
/// `trace.csv`, at the configured cadence.
pub fn eval_trace(run_dir: &Path) -> Result<Vec<MetricRow>> {
    let cfg = ExperimentConfig::load(&run_dir.join("config.json"))?;
    let data = prepare_data(&cfg)?;
    let rows = read_trace_csv(fs::File::open(run_dir.join("trace.csv"))?)?;
    let n_iter = rows.last().map_or(0, |r| r.0);
    let wanted = metric_iterations(n_iter, cfg.eval.cadence);
    let refs: Vec<(usize, &HmmParams)> = rows
        .iter()
        .filter(|(it, _)| wanted.binary_search(it).is_ok())
        .map(|(it, p)| (*it, p))
        .collect();
    compute_metrics(&refs, &data, &cfg.eval)
}

/// Writes metric rows as CSV.
pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    write_metrics(path, rows)
}

/// One cell of a variance sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub estimator: String,
    pub s: usize,
    pub l: usize,
    /// Flattened component index, or `None` for the mean over components.
    pub component: Option<usize>,
    pub variance: f64,
}

/// Allocates `s` draws over clusters in proportion to their sizes, with at
/// least one draw per cluster and never more than a cluster holds. Rounding
/// follows the largest remainders.
pub fn matched_quotas(s: usize, sizes: &[usize]) -> Result<Vec<usize>> {
    let m = sizes.len();
    let total: usize = sizes.iter().sum();
    if s < m {
        return Err(Error::InvalidParameter(format!(
            "total subsample {s} smaller than the {m} clusters"
        )));
    }
    if s > total {
        return Err(Error::InvalidParameter(format!("{s} draws exceed the partition")));
    }
    if let Some(e) = sizes.iter().position(|&n| n == 0) {
        return Err(Error::EmptyCluster(e));
    }
    let ideal: Vec<f64> = sizes.iter().map(|&n| s as f64 * n as f64 / total as f64).collect();
    let mut quotas: Vec<usize> = ideal
        .iter()
        .zip(sizes)
        .map(|(x, &n)| (x.floor() as usize).clamp(1, n))
        .collect();
    let assigned: usize = quotas.iter().sum();
    if assigned < s {
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            (ideal[b] - quotas[b] as f64).total_cmp(&(ideal[a] - quotas[a] as f64))
        });
        let mut left = s - assigned;
        while left > 0 {
            for &c in &order {
                if left > 0 && quotas[c] < sizes[c] {
                    quotas[c] += 1;
                    left -= 1;
                }
            }
        }
    } else if assigned > s {
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            (quotas[b] as f64 - ideal[b]).total_cmp(&(quotas[a] as f64 - ideal[a]))
        });
        let mut excess = assigned - s;
        while excess > 0 {
            for &c in &order {
                if excess > 0 && quotas[c] > 1 {
                    quotas[c] -= 1;
                    excess -= 1;
                }
            }
        }
    }
    Ok(quotas)
}

/// Monte Carlo gradient variance of the uniform and stratified estimators
/// over an `(S, L)` grid at fixed parameters: the true ones when known, the
/// sampler's initial point otherwise.
pub fn variance_sweep(
    cfg: &ExperimentConfig,
    s_grid: &[usize],
    l_grid: &[usize],
    reps: usize,
) -> Result<Vec<SweepRow>> {
    if s_grid.is_empty() || l_grid.is_empty() {
        return Err(Error::InvalidParameter("empty sweep grid".into()));
    }
    let data = prepare_data(cfg)?;
    let y = &data.train;
    let params = match &data.truth {
        Some(t) if t.k() == cfg.model.k && t.emissions.family() == cfg.model.family => t.clone(),
        _ => initial_params(y, &cfg.template(), None)?,
    };
    let (m, preprocessing, kmeans) = match &cfg.plan {
        PlanSpec::Stratified {
            m,
            preprocessing,
            kmeans,
            ..
        } => (*m, *preprocessing, *kmeans),
        PlanSpec::Uniform { .. } => (1, Preprocessing::None, KMeansOptions::default()),
    };
    let buffer = match cfg.partition.buffer {
        BufferRule::Fixed { buffer } => buffer,
        BufferRule::Adaptive { safety } => buffer_from_spectral_gap(&params.transition, safety, y.len())?,
    };
    let seed = derive_seed(cfg.seed, SeedStream::Variance);
    let mut rows = Vec::new();
    for &l in l_grid {
        let part: SubchainPartition = partition(y.len(), l)?
            .with_gap(cfg.partition.gap)
            .with_buffer(buffer);
        let clusters = cluster_subchains(
            y,
            &part,
            m,
            preprocessing,
            derive_seed(cfg.seed, SeedStream::Cluster),
            &kmeans,
        )?;
        for &s in s_grid {
            let plans = [
                ("uniform", MinibatchPlan::Uniform { s }),
                (
                    "stratified",
                    MinibatchPlan::Stratified {
                        quotas: matched_quotas(s, clusters.sizes())?,
                        clusters: clusters.clone(),
                    },
                ),
            ];
            for (name, plan) in plans {
                let v = gradient_variance_mc(&params, y, &part, &plan, &cfg.prior, reps, seed)?;
                rows.push(SweepRow {
                    estimator: name.into(),
                    s,
                    l,
                    component: None,
                    variance: v.mean,
                });
                rows.extend(v.per_component.iter().enumerate().map(|(c, &var)| SweepRow {
                    estimator: name.into(),
                    s,
                    l,
                    component: Some(c),
                    variance: var,
                }));
            }
        }
    }
    Ok(rows)
}

/// Long-format CSV: `estimator,s,l,component,variance`, with component
/// `mean` for the average over components.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(fs::File::create(path)?));
    let err = |e: csv::Error| Error::InvalidParameter(format!("sweep write failed: {e}"));
    w.write_record(["estimator", "s", "l", "component", "variance"]).map_err(err)?;
    for r in rows {
        w.write_record([
            r.estimator.clone(),
            r.s.to_string(),
            r.l.to_string(),
            r.component.map_or("mean".to_string(), |c| c.to_string()),
            r.variance.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(dir: &Path, stratified: bool) -> ExperimentConfig {
        let plan = if stratified {
            r#"{"kind": "stratified", "m": 2, "quotas": [2, 2]}"#
        } else {
            r#"{"kind": "uniform", "s": 4}"#
        };
        let (algorithm, buffer) = if stratified {
            ("csgmcmc", r#"{"rule": "fixed", "buffer": 5}"#)
        } else {
            ("sgmcmc", r#"{"rule": "adaptive", "safety": 1.0}"#)
        };
        let json = format!(
            r#"{{
                "name": "small",
                "dataset": {{"source": "builtin", "name": "bern", "t": 600}},
                "model": {{"k": 2, "family": "bernoulli"}},
                "partition": {{"l": 5, "buffer": {buffer}}},
                "plan": {plan},
                "sampler": {{"algorithm": "{algorithm}", "schedule": {{"a": 1e-4}}, "n_iter": 30}},
                "eval": {{"holdout": 100, "cadence": 10}},
                "seed": 11,
                "output": {:?}
            }}"#,
            dir.to_str().unwrap()
        );
        ExperimentConfig::from_json(&json).unwrap()
    }

    #[test]
    fn config_consistency() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path(), true);
        cfg.sampler.algorithm = Algorithm::Sgmcmc;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config(dir.path(), true);
        cfg.partition.buffer = BufferRule::Adaptive { safety: 1.0 };
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn run_writes_artifacts_and_metric_order() {
        for stratified in [false, true] {
            let dir = tempfile::tempdir().unwrap();
            let cfg = small_config(dir.path(), stratified);
            let out = run_experiment(&cfg).unwrap();
            for f in ["trace.csv", "timing.csv", "metrics.csv", "intervals.csv", "config.json", "clusters.json", "summary.json"] {
                assert!(out.dir.join(f).exists(), "{f}");
            }
            assert!(out.metrics.windows(2).all(|w| w[0].iteration <= w[1].iteration));
            let its: Vec<usize> = out.metrics.iter().map(|r| r.iteration).collect();
            assert_eq!(its.first(), Some(&0));
            assert_eq!(its.last(), Some(&30));
            let recomputed = eval_trace(&out.dir).unwrap();
            assert_eq!(recomputed, out.metrics);
        }
    }

    #[test]
    fn quota_matching() {
        assert_eq!(matched_quotas(5, &[10, 10]).unwrap(), vec![3, 2]);
        assert_eq!(matched_quotas(6, &[1, 10, 10]).unwrap(), vec![1, 3, 2]);
        assert_eq!(matched_quotas(10, &[80, 15, 5]).unwrap(), vec![8, 1, 1]);
        assert_eq!(matched_quotas(4, &[1, 1, 1, 97]).unwrap(), vec![1, 1, 1, 1]);
        assert_eq!(matched_quotas(12, &[2, 100]).unwrap(), vec![1, 11]);
        assert!(matched_quotas(1, &[3, 3]).is_err());
        assert!(matched_quotas(7, &[3, 3]).is_err());
    }

    #[test]
    fn metric_cadence() {
        assert_eq!(metric_iterations(60, 25), vec![0, 25, 50, 60]);
        assert_eq!(metric_iterations(50, 25), vec![0, 25, 50]);
    }
}
