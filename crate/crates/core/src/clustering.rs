//! kmeans++ clustering of subchain vectors, used to form the strata of the
//! stratified gradient estimator.
//!
//! Distances are squared Euclidean. Clustering runs once before sampling and
//! the fitted model is never refreshed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::ObservationSeries;
use crate::subchain::SubchainPartition;

/// How a window's core observations are embedded before clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preprocessing {
    #[default]
    None,
    /// Sort the values ascending so the position of a spike inside the
    /// window does not matter.
    SortWithinWindow,
}

/// Embeds a window's core observations as a vector in `R^L`.
pub fn embed(core: &[f64], preprocessing: Preprocessing) -> Vec<f64> {
    let mut v = core.to_vec();
    if preprocessing == Preprocessing::SortWithinWindow {
        v.sort_by(f64::total_cmp);
    }
    v
}

/// Embeddings of every window of the partition, in window order.
pub fn embed_windows(
    y: &ObservationSeries,
    partition: &SubchainPartition,
    preprocessing: Preprocessing,
) -> Vec<Vec<f64>> {
    (0..partition.n_windows())
        .map(|i| embed(&y.values()[partition.core_range(i)], preprocessing))
        .collect()
}

#[inline]
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (m, c) in centroids.iter().enumerate() {
        let d = dist2(point, c);
        if d < best.1 {
            best = (m, d);
        }
    }
    best
}

fn seed_indices<R: Rng + ?Sized>(vectors: &[Vec<f64>], m: usize, rng: &mut R) -> Result<Vec<usize>> {
    let n = vectors.len();
    if m == 0 || m > n {
        return Err(Error::TooManyClusters {
            clusters: m,
            points: n,
        });
    }
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = vectors.iter().map(|v| dist2(v, &vectors[chosen[0]])).collect();
    while chosen.len() < m {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, w) in d2.iter().enumerate() {
                acc += w;
                if *w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|w| *w > 0.0).expect("positive total"))
        } else {
            // every remaining point coincides with a centroid
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (d, v) in d2.iter_mut().zip(vectors) {
            *d = d.min(dist2(v, &vectors[next]));
        }
    }
    Ok(chosen)
}

/// kmeans++ seeding: the first centroid is a uniform point, each further one
/// is drawn with probability proportional to the squared distance to the
/// nearest centroid chosen so far.
pub fn kmeanspp_seed(vectors: &[Vec<f64>], m: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(seed_indices(vectors, m, &mut rng)?
        .into_iter()
        .map(|i| vectors[i].clone())
        .collect())
}

/// Lloyd iteration controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub max_iters: usize,
    pub tol: f64,
    /// Independent kmeans++ restarts; the lowest final within-cluster sum of
    /// squares wins.
    pub restarts: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-8,
            restarts: 1,
        }
    }
}

/// Cluster assignment of the subchains of a partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ClusterModelRepr", into = "ClusterModelRepr")]
pub struct ClusterModel {
    centroids: Vec<Vec<f64>>,
    assignment: Vec<usize>,
    preprocessing: Preprocessing,
    wcss_history: Vec<f64>,
    sizes: Vec<usize>,
    members: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct ClusterModelRepr {
    preprocessing: Preprocessing,
    centroids: Vec<Vec<f64>>,
    assignment: Vec<usize>,
    #[serde(default)]
    wcss_history: Vec<f64>,
}

impl TryFrom<ClusterModelRepr> for ClusterModel {
    type Error = Error;

    fn try_from(r: ClusterModelRepr) -> Result<Self> {
        let m = r.centroids.len();
        let mut model = Self::build(r.centroids, r.assignment, r.preprocessing, m)?;
        model.wcss_history = r.wcss_history;
        Ok(model)
    }
}

impl From<ClusterModel> for ClusterModelRepr {
    fn from(c: ClusterModel) -> Self {
        Self {
            preprocessing: c.preprocessing,
            centroids: c.centroids,
            assignment: c.assignment,
            wcss_history: c.wcss_history,
        }
    }
}

impl ClusterModel {
    fn build(
        centroids: Vec<Vec<f64>>,
        assignment: Vec<usize>,
        preprocessing: Preprocessing,
        m: usize,
    ) -> Result<Self> {
        if let Some(&bad) = assignment.iter().find(|&&a| a >= m) {
            return Err(Error::InvalidParameter(format!(
                "assignment to cluster {bad} with only {m} clusters"
            )));
        }
        let mut members = vec![Vec::new(); m];
        for (i, &a) in assignment.iter().enumerate() {
            members[a].push(i);
        }
        let sizes = members.iter().map(Vec::len).collect();
        Ok(Self {
            centroids,
            assignment,
            preprocessing,
            wcss_history: Vec::new(),
            sizes,
            members,
        })
    }

    /// Model from an explicit assignment with zero centroids of dimension `dim`.
    /// Clusters may be empty.
    pub fn from_assignment(
        assignment: Vec<usize>,
        m: usize,
        dim: usize,
        preprocessing: Preprocessing,
    ) -> Result<Self> {
        Self::build(vec![vec![0.0; dim]; m], assignment, preprocessing, m)
    }

    pub fn n_clusters(&self) -> usize {
        self.sizes.len()
    }

    /// Number of clustered windows.
    pub fn n_windows(&self) -> usize {
        self.assignment.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Cluster id of every window, in window order.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Window indices of every cluster, ascending.
    pub fn members(&self) -> &[Vec<usize>] {
        &self.members
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn preprocessing(&self) -> Preprocessing {
        self.preprocessing
    }

    /// Within-cluster sum of squares after each Lloyd iteration.
    pub fn wcss_history(&self) -> &[f64] {
        &self.wcss_history
    }

    pub fn wcss(&self) -> f64 {
        self.wcss_history.last().copied().unwrap_or(f64::NAN)
    }

    /// Scalar mean of every centroid vector.
    pub fn centroid_means(&self) -> Vec<f64> {
        self.centroids
            .iter()
            .map(|c| c.iter().sum::<f64>() / c.len().max(1) as f64)
            .collect()
    }
}

fn lloyd(
    vectors: &[Vec<f64>],
    mut centroids: Vec<Vec<f64>>,
    opts: &KMeansOptions,
) -> (Vec<Vec<f64>>, Vec<usize>, Vec<f64>) {
    let m = centroids.len();
    let dim = vectors[0].len();
    let mut assignment = vec![0; vectors.len()];
    let mut history = Vec::new();
    for _ in 0..opts.max_iters.max(1) {
        let mut dists = vec![0.0; vectors.len()];
        for (i, v) in vectors.iter().enumerate() {
            let (c, d) = nearest(v, &centroids);
            assignment[i] = c;
            dists[i] = d;
        }
        repair_empty(&mut assignment, &mut dists, &mut centroids, vectors, m);

        let mut sums = vec![vec![0.0; dim]; m];
        let mut counts = vec![0usize; m];
        for (v, &a) in vectors.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(v) {
                *s += x;
            }
        }
        let mut movement: f64 = 0.0;
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            let updated: Vec<f64> = s.into_iter().map(|x| x / n as f64).collect();
            movement = movement.max(dist2(c, &updated).sqrt());
            *c = updated;
        }
        let wcss = vectors
            .iter()
            .zip(&assignment)
            .map(|(v, &a)| dist2(v, &centroids[a]))
            .sum();
        history.push(wcss);
        if movement < opts.tol {
            break;
        }
    }
    (centroids, assignment, history)
}

/// Gives every empty cluster the point farthest from its current centroid,
/// taken from clusters that keep at least one member.
fn repair_empty(
    assignment: &mut [usize],
    dists: &mut [f64],
    centroids: &mut [Vec<f64>],
    vectors: &[Vec<f64>],
    m: usize,
) {
    let mut counts = vec![0usize; m];
    for &a in assignment.iter() {
        counts[a] += 1;
    }
    for empty in 0..m {
        if counts[empty] > 0 {
            continue;
        }
        let mut far: Option<(usize, f64)> = None;
        for (i, &a) in assignment.iter().enumerate() {
            if counts[a] > 1 && far.is_none_or(|(_, d)| dists[i] > d) {
                far = Some((i, dists[i]));
            }
        }
        let Some((i, _)) = far else { return };
        counts[assignment[i]] -= 1;
        counts[empty] += 1;
        assignment[i] = empty;
        dists[i] = 0.0;
        centroids[empty] = vectors[i].clone();
    }
}

/// Lloyd iterations from kmeans++ seeds until the largest centroid movement
/// drops below `tol` or `max_iters` is reached.
pub fn kmeans_fit(
    vectors: &[Vec<f64>],
    m: usize,
    seed: u64,
    opts: &KMeansOptions,
) -> Result<ClusterModel> {
    if vectors.is_empty() || m == 0 || m > vectors.len() {
        return Err(Error::TooManyClusters {
            clusters: m,
            points: vectors.len(),
        });
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::ShapeMismatch("vectors differ in dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<Vec<f64>>, Vec<usize>, Vec<f64>)> = None;
    for _ in 0..opts.restarts.max(1) {
        let seeds: Vec<Vec<f64>> = seed_indices(vectors, m, &mut rng)?
            .into_iter()
            .map(|i| vectors[i].clone())
            .collect();
        let fit = lloyd(vectors, seeds, opts);
        let better = match &best {
            None => true,
            Some(b) => fit.2.last() < b.2.last(),
        };
        if better {
            best = Some(fit);
        }
    }
    let (centroids, assignment, history) = best.expect("at least one restart");
    let mut model = ClusterModel::build(centroids, assignment, Preprocessing::None, m)?;
    model.wcss_history = history;
    Ok(model)
}

/// Embeds and clusters every subchain of the partition.
pub fn cluster_subchains(
    y: &ObservationSeries,
    partition: &SubchainPartition,
    m: usize,
    preprocessing: Preprocessing,
    seed: u64,
    opts: &KMeansOptions,
) -> Result<ClusterModel> {
    let vectors = embed_windows(y, partition, preprocessing);
    let mut model = kmeans_fit(&vectors, m, seed, opts)?;
    model.preprocessing = preprocessing;
    Ok(model)
}
