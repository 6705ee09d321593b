use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{simulate, Emissions, HmmParams, LatentPath, ObservationSeries, TransitionMatrix};

/// Synthetic datasets with known parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BuiltinDataset {
    /// Four-state cyclic chain with a uniform stationary distribution.
    Bd,
    /// Five states, one dominant and four visited in short excursions.
    Id,
    /// Two-state chain with Bernoulli emissions.
    Bern,
    /// Two states, the second rare, with nearly noiseless emissions.
    Rare2,
}

/// Transition probability into the rare state of [`BuiltinDataset::Rare2`].
pub const RARE2_EPSILON: f64 = 1e-4;

impl BuiltinDataset {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "bd" => Ok(Self::Bd),
            "id" => Ok(Self::Id),
            "bern" => Ok(Self::Bern),
            "rare2" => Ok(Self::Rare2),
            _ => Err(Error::UnknownDataset(name.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Bd => "bd",
            Self::Id => "id",
            Self::Bern => "bern",
            Self::Rare2 => "rare2",
        }
    }

    pub fn default_len(self) -> usize {
        match self {
            Self::Bern => 300_000,
            _ => 1_000_000,
        }
    }

    pub fn true_params(self) -> HmmParams {
        let (rows, emissions) = match self {
            Self::Bd => (
                vec![
                    vec![0.9, 0.1, 0.0, 0.0],
                    vec![0.0, 0.9, 0.1, 0.0],
                    vec![0.0, 0.0, 0.9, 0.1],
                    vec![0.1, 0.0, 0.0, 0.9],
                ],
                Emissions::Gaussian {
                    means: vec![-6.0, -3.0, 0.0, 3.0],
                    variances: vec![2.0; 4],
                },
            ),
            Self::Id => (
                vec![
                    vec![0.992, 0.01, 0.01, 0.01, 0.01],
                    vec![0.002, 0.99, 0.0, 0.0, 0.0],
                    vec![0.002, 0.0, 0.99, 0.0, 0.0],
                    vec![0.002, 0.0, 0.0, 0.99, 0.0],
                    vec![0.002, 0.0, 0.0, 0.0, 0.99],
                ],
                Emissions::Gaussian {
                    means: vec![-20.0, -10.0, 0.0, 10.0, 20.0],
                    variances: vec![1.0; 5],
                },
            ),
            Self::Bern => (
                vec![vec![0.9, 0.1], vec![0.1, 0.9]],
                Emissions::Bernoulli {
                    probs: vec![0.9, 0.1],
                },
            ),
            Self::Rare2 => (
                vec![vec![1.0 - RARE2_EPSILON, 0.1], vec![RARE2_EPSILON, 0.9]],
                Emissions::Gaussian {
                    means: vec![0.0, 1.0],
                    variances: vec![1e-4; 2],
                },
            ),
        };
        HmmParams::new(
            TransitionMatrix::from_rows(&rows).expect("builtin matrices are stochastic"),
            emissions,
        )
        .expect("builtin parameters are valid")
    }

    /// Simulates `t` observations.
    pub fn simulate(self, t: usize, seed: u64) -> Result<(LatentPath, ObservationSeries)> {
        simulate(&self.true_params(), t, seed)
    }
}

/// Paths written by [`generate_dataset`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedFiles {
    pub observations: PathBuf,
    pub latent: PathBuf,
    pub params: PathBuf,
}

/// Writes `observations.csv` (one value per line), `latent.csv` (one-based
/// states `x_1..x_T`, one per line) and `params.json` into `dir`.
pub fn generate_dataset(dataset: BuiltinDataset, t: usize, seed: u64, dir: &Path) -> Result<GeneratedFiles> {
    let (x, y) = dataset.simulate(t, seed)?;
    fs::create_dir_all(dir)?;
    let files = GeneratedFiles {
        observations: dir.join("observations.csv"),
        latent: dir.join("latent.csv"),
        params: dir.join("params.json"),
    };
    let mut obs = std::io::BufWriter::new(fs::File::create(&files.observations)?);
    for v in y.values() {
        writeln!(obs, "{v}")?;
    }
    obs.flush()?;
    let mut lat = std::io::BufWriter::new(fs::File::create(&files.latent)?);
    for s in &x.states()[1..] {
        writeln!(lat, "{}", s + 1)?;
    }
    lat.flush()?;
    fs::write(&files.params, serde_json::to_string_pretty(&dataset.true_params())?)?;
    Ok(files)
}

/// Result of reading a CSV series.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub series: ObservationSeries,
    /// Rows dropped for holding NaN or infinite values.
    pub rejected_non_finite: usize,
    /// Zero-based offset of the selected window in the cleaned series.
    pub offset: usize,
}

/// Reads column `column` of a CSV file. A non-numeric first row is taken as
/// a header. Series longer than `max_t` are cut to a uniformly chosen
/// contiguous window of length `max_t`.
pub fn ingest_csv(path: &Path, column: usize, max_t: Option<usize>, seed: u64) -> Result<IngestReport> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Parse {
                line: 0,
                message: format!("{other:?}"),
            },
        })?;
    let mut values = Vec::new();
    let mut rejected = 0;
    for (i, record) in rdr.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let field = record.get(column).ok_or_else(|| Error::Parse {
            line,
            message: format!("no column {column}"),
        })?;
        match field.parse::<f64>() {
            Ok(v) if v.is_finite() => values.push(v),
            Ok(_) => rejected += 1,
            Err(_) if line == 1 => {}
            Err(_) => {
                return Err(Error::Parse {
                    line,
                    message: format!("non-numeric value {field:?}"),
                })
            }
        }
    }
    if values.is_empty() {
        return Err(Error::EmptySeries);
    }
    let mut offset = 0;
    if let Some(max_t) = max_t {
        if max_t == 0 {
            return Err(Error::InvalidParameter("max_t must be positive".into()));
        }
        if values.len() > max_t {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            offset = rng.random_range(0..=values.len() - max_t);
            values = values[offset..offset + max_t].to_vec();
        }
    }
    Ok(IngestReport {
        series: ObservationSeries::new(values)?,
        rejected_non_finite: rejected,
        offset,
    })
}
