//! Spectral clustering of embeddings and the descriptive cluster analyses.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ComplaintRecord, ResponseLabel};
use crate::dea::EcoGroup;
use crate::linalg::{lower_median, squared_distance, LinalgError, Matrix, SymmetricEigen};
use crate::rng::{derive_seed, rng_from};

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("degenerate similarity: median pairwise distance is zero")]
    DegenerateSimilarity,
    #[error("vertex {index} has zero degree")]
    IsolatedVertex { index: usize },
    #[error("invalid similarity matrix: {0}")]
    InvalidSimilarity(String),
    #[error("k = {k} is invalid for {n} points")]
    InvalidK { k: usize, n: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("complaint {0} has no cluster assignment")]
    Unclustered(u64),
    #[error("permutation test needs at least one replicate")]
    NoReplicates,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub w: Matrix,
    /// Kernel bandwidth (median pairwise distance).
    pub sigma: f64,
}

/// Gaussian kernel `exp(-‖e_i − e_j‖² / 2σ²)` with σ the (lower) median of
/// all pairwise distances.
pub fn similarity(embeddings: &Matrix) -> Result<SimilarityMatrix, SpectralError> {
    let n = embeddings.rows();
    if n < 2 {
        return Err(SpectralError::TooFewPoints { needed: 2, got: n });
    }
    if !embeddings.is_finite() {
        return Err(SpectralError::NonFinite);
    }
    let d2 = pairwise_squared(embeddings);
    let mut upper = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        upper.extend(d2.row(i)[i + 1..].iter().map(|v| v.sqrt()));
    }
    let sigma = lower_median(&upper).expect("n >= 2");
    if sigma <= 0.0 {
        return Err(SpectralError::DegenerateSimilarity);
    }
    let denom = 2.0 * sigma * sigma;
    let mut w = d2;
    w.as_mut_slice()
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if i == j { 1.0 } else { (-*v / denom).exp() };
            }
        });
    Ok(SimilarityMatrix { w, sigma })
}

/// Full `n × n` matrix of squared distances, computed once per unordered pair
/// so it is exactly symmetric.
fn pairwise_squared(points: &Matrix) -> Matrix {
    let n = points.rows();
    let mut out = Matrix::zeros(n, n);
    out.as_mut_slice()
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| {
            for (j, v) in row.iter_mut().enumerate() {
                let (a, b) = if i < j { (i, j) } else { (j, i) };
                *v = squared_distance(points.row(a), points.row(b));
            }
        });
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedLaplacian {
    pub l: Matrix,
    pub degrees: Vec<f64>,
}

/// `D^{-1/2} (D − W) D^{-1/2}` on the graph with edge weights `W_ij`, `i ≠ j`.
/// The diagonal of `W` (self-similarity) is ignored.
pub fn normalized_laplacian(w: &Matrix) -> Result<NormalizedLaplacian, SpectralError> {
    let n = w.rows();
    if n != w.cols() {
        return Err(SpectralError::InvalidSimilarity(format!("{}x{} is not square", n, w.cols())));
    }
    if !w.is_finite() {
        return Err(SpectralError::NonFinite);
    }
    for i in 0..n {
        for j in 0..i {
            let (a, b) = (w[(i, j)], w[(j, i)]);
            if a < 0.0 {
                return Err(SpectralError::InvalidSimilarity(format!("negative weight at ({i}, {j})")));
            }
            if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                return Err(SpectralError::InvalidSimilarity(format!("asymmetric at ({i}, {j})")));
            }
        }
    }
    let degrees: Vec<f64> = (0..n)
        .map(|i| w.row(i).iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v).sum())
        .collect();
    if let Some(index) = degrees.iter().position(|&d| d <= 0.0) {
        return Err(SpectralError::IsolatedVertex { index });
    }
    let inv_sqrt: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = if i == j { 1.0 } else { -w[(i, j)] * inv_sqrt[i] * inv_sqrt[j] };
            l[(i, j)] = v;
            l[(j, i)] = v;
        }
    }
    Ok(NormalizedLaplacian { l, degrees })
}

/// Eigenvectors for the `k` smallest eigenvalues as columns, optionally with
/// each row scaled to unit length (all-zero rows stay zero).
pub fn spectral_embed(lap: &NormalizedLaplacian, k: usize, row_normalize: bool) -> Result<Matrix, SpectralError> {
    let n = lap.l.rows();
    if k == 0 || k > n {
        return Err(SpectralError::InvalidK { k, n });
    }
    let eig = SymmetricEigen::new(&lap.l)?;
    let which: Vec<usize> = (0..k).collect();
    let mut v = eig.eigenvectors(&which)?;
    if row_normalize {
        for i in 0..n {
            let row = v.row_mut(i);
            let nrm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nrm > 0.0 {
                row.iter_mut().for_each(|x| *x /= nrm);
            }
        }
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// k-means

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centroids: Matrix,
    pub wcss: f64,
    pub iterations: usize,
    /// Within-cluster sum of squares after each Lloyd update.
    pub wcss_trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub n_init: usize,
    pub max_iter: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self { n_init: 10, max_iter: 300 }
    }
}

/// k-means with default options (10 k-means++ restarts, best WCSS kept).
pub fn kmeans(points: &Matrix, k: usize, seed: u64) -> Result<ClusterAssignment, SpectralError> {
    kmeans_with(points, k, seed, KMeansOptions::default())
}

pub fn kmeans_with(
    points: &Matrix,
    k: usize,
    seed: u64,
    opts: KMeansOptions,
) -> Result<ClusterAssignment, SpectralError> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(SpectralError::InvalidK { k, n });
    }
    if !points.is_finite() {
        return Err(SpectralError::NonFinite);
    }
    let mut best: Option<ClusterAssignment> = None;
    for r in 0..opts.n_init.max(1) {
        let run = lloyd(points, k, derive_seed(seed, r as u64), opts.max_iter);
        if best.as_ref().is_none_or(|b| run.wcss < b.wcss) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn kmeans_pp(points: &Matrix, k: usize, rng: &mut crate::rng::Rng) -> Matrix {
    let n = points.rows();
    let mut centroids = Matrix::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| squared_distance(points.row(i), points.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &v) in d2.iter().enumerate() {
                acc += v;
                if acc > target && v > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(squared_distance(points.row(i), points.row(pick)));
        }
    }
    centroids
}

fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = squared_distance(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn lloyd(points: &Matrix, k: usize, seed: u64, max_iter: usize) -> ClusterAssignment {
    let (n, d) = points.shape();
    let mut rng = rng_from(seed);
    let mut centroids = kmeans_pp(points, k, &mut rng);
    let mut labels = vec![usize::MAX; n];
    let mut trace: Vec<f64> = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let mut next: Vec<usize> = Vec::with_capacity(n);
        let mut dist: Vec<f64> = Vec::with_capacity(n);
        for i in 0..n {
            let (c, dd) = nearest(points.row(i), &centroids);
            next.push(c);
            dist.push(dd);
        }
        // Empty cluster: move in the point farthest from its own centroid
        // (taken from a cluster that can spare it).
        let mut counts = vec![0usize; k];
        next.iter().for_each(|&c| counts[c] += 1);
        for c in 0..k {
            if counts[c] == 0 {
                let donor = (0..n)
                    .filter(|&i| counts[next[i]] > 1)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("k <= n leaves a cluster with two members");
                counts[next[donor]] -= 1;
                next[donor] = c;
                dist[donor] = 0.0;
                counts[c] = 1;
            }
        }
        let changed = next != labels;
        labels = next;
        centroids = Matrix::zeros(k, d);
        for (i, &c) in labels.iter().enumerate() {
            crate::linalg::axpy(1.0, points.row(i), centroids.row_mut(c));
        }
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            centroids.row_mut(c).iter_mut().for_each(|v| *v *= inv);
        }
        let wcss = wcss_of(points, &labels, &centroids);
        if let Some(&prev) = trace.last() {
            debug_assert!(wcss <= prev + 1e-9 * prev.max(1.0), "wcss rose: {prev} -> {wcss}");
        }
        trace.push(wcss);
        if !changed {
            break;
        }
    }
    ClusterAssignment {
        labels,
        centroids,
        wcss: *trace.last().expect("one iteration"),
        iterations,
        wcss_trace: trace,
    }
}

fn wcss_of(points: &Matrix, labels: &[usize], centroids: &Matrix) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &c)| squared_distance(points.row(i), centroids.row(c)))
        .sum()
}

/// Best-of-restarts WCSS for every `k` in `1..=k_max`.
pub fn wcss_curve(points: &Matrix, k_max: usize, seed: u64) -> Result<Vec<f64>, SpectralError> {
    let n = points.rows();
    if k_max > n {
        return Err(SpectralError::InvalidK { k: k_max, n });
    }
    (1..=k_max)
        .into_par_iter()
        .map(|k| kmeans(points, k, derive_seed(seed, k as u64)).map(|a| a.wcss))
        .collect()
}

/// `argmax_k wcss(k−1) − 2 wcss(k) + wcss(k+1)` over `k ∈ [2, k_max − 1]`,
/// where `curve[i]` is the WCSS at `k = i + 1`. Ties go to the smaller `k`.
pub fn elbow_from_curve(curve: &[f64]) -> Option<usize> {
    if curve.len() < 3 {
        return None;
    }
    let mut best: Option<(usize, f64)> = None;
    for k in 2..curve.len() {
        let sd = curve[k - 2] - 2.0 * curve[k - 1] + curve[k];
        if best.is_none_or(|(_, b)| sd > b) {
            best = Some((k, sd));
        }
    }
    best.map(|(k, _)| k)
}

/// Elbow choice of `k` from k-means on `points` (max second difference).
pub fn elbow_k(points: &Matrix, k_max: usize, seed: u64) -> Result<usize, SpectralError> {
    if k_max < 3 {
        return Err(SpectralError::InvalidK { k: k_max, n: points.rows() });
    }
    let curve = wcss_curve(points, k_max, seed)?;
    Ok(elbow_from_curve(&curve).expect("k_max >= 3"))
}

// ---------------------------------------------------------------------------
// Scores

/// Per-point silhouette with Euclidean distance. Points in singleton clusters
/// score 0, as does everything when there is a single cluster.
pub fn silhouette(points: &Matrix, labels: &[usize]) -> Result<Vec<f64>, SpectralError> {
    let n = points.rows();
    if labels.len() != n {
        return Err(SpectralError::LengthMismatch(format!("{} labels for {} points", labels.len(), n)));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&c| sizes[c] += 1);
    let s = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = labels[i];
            if sizes[own] <= 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for j in 0..n {
                if j != i {
                    sums[labels[j]] += squared_distance(points.row(i), points.row(j)).sqrt();
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            if !b.is_finite() {
                return 0.0;
            }
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .collect();
    Ok(s)
}

pub fn mean_silhouette(points: &Matrix, labels: &[usize]) -> Result<f64, SpectralError> {
    let s = silhouette(points, labels)?;
    Ok(s.iter().sum::<f64>() / s.len().max(1) as f64)
}

fn choose2(x: u64) -> f64 {
    (x as f64) * (x.saturating_sub(1) as f64) / 2.0
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64, SpectralError> {
    if a.len() != b.len() {
        return Err(SpectralError::LengthMismatch(format!("{} vs {} labels", a.len(), b.len())));
    }
    let n = a.len() as u64;
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let index: f64 = table.iter().map(|&c| choose2(c)).sum();
    let rows: f64 = (0..ka).map(|i| choose2(table[i * kb..(i + 1) * kb].iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| choose2((0..ka).map(|i| table[i * kb + j]).sum())).sum();
    let total = choose2(n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        // Both labelings are trivial in the same way (all-one or all-singleton).
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

// ---------------------------------------------------------------------------
// Pipeline and permutation test

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralOptions {
    pub row_normalize: bool,
    pub kmeans: KMeansOptions,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        Self {
            row_normalize: true,
            kmeans: KMeansOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralClustering {
    pub assignment: ClusterAssignment,
    pub embedding: Matrix,
    /// Mean silhouette of the labels on the spectral embedding.
    pub silhouette: f64,
    pub sigma: f64,
}

impl SpectralClustering {
    pub fn labels(&self) -> &[usize] {
        &self.assignment.labels
    }
}

/// Similarity, normalized Laplacian, `k`-dimensional embedding, k-means.
pub fn spectral_cluster(
    embeddings: &Matrix,
    k: usize,
    seed: u64,
    opts: SpectralOptions,
) -> Result<SpectralClustering, SpectralError> {
    let n = embeddings.rows();
    if k == 0 || k > n {
        return Err(SpectralError::InvalidK { k, n });
    }
    let sim = similarity(embeddings)?;
    let lap = normalized_laplacian(&sim.w)?;
    drop(sim.w);
    let embedding = spectral_embed(&lap, k, opts.row_normalize)?;
    let assignment = kmeans_with(&embedding, k, seed, opts.kmeans)?;
    let silhouette = mean_silhouette(&embedding, &assignment.labels)?;
    Ok(SpectralClustering {
        assignment,
        embedding,
        silhouette,
        sigma: sim.sigma,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationTestResult {
    pub s_obs: f64,
    pub s_perm: Vec<f64>,
    pub p: f64,
}

/// `#{ s_i ≥ s_obs } / N`, or `(1 + #) / (1 + N)` when `smoothed`.
pub fn permutation_p(s_obs: f64, s_perm: &[f64], smoothed: bool) -> f64 {
    let count = s_perm.iter().filter(|&&s| s >= s_obs).count() as f64;
    let n = s_perm.len() as f64;
    if smoothed {
        (1.0 + count) / (1.0 + n)
    } else {
        count / n
    }
}

/// Shuffles every column independently across rows.
pub fn shuffle_columns(points: &Matrix, seed: u64) -> Matrix {
    let (n, d) = points.shape();
    let mut rng = rng_from(seed);
    let mut out = Matrix::zeros(n, d);
    let mut perm: Vec<usize> = (0..n).collect();
    for j in 0..d {
        perm.shuffle(&mut rng);
        for (i, &src) in perm.iter().enumerate() {
            out[(i, j)] = points[(src, j)];
        }
    }
    out
}

/// Observed spectral-clustering silhouette against `n_perm` column-shuffled
/// replicates. Replicate `i` uses seeds derived from `(seed, i)`, so results do
/// not depend on thread count.
pub fn permutation_test(
    embeddings: &Matrix,
    k: usize,
    n_perm: usize,
    seed: u64,
    smoothed: bool,
    opts: SpectralOptions,
) -> Result<PermutationTestResult, SpectralError> {
    if n_perm == 0 {
        return Err(SpectralError::NoReplicates);
    }
    let s_obs = spectral_cluster(embeddings, k, seed, opts)?.silhouette;
    permutation_test_with_observed(embeddings, k, s_obs, n_perm, seed, smoothed, opts)
}

/// As [`permutation_test`] when the observed clustering is already available.
pub fn permutation_test_with_observed(
    embeddings: &Matrix,
    k: usize,
    s_obs: f64,
    n_perm: usize,
    seed: u64,
    smoothed: bool,
    opts: SpectralOptions,
) -> Result<PermutationTestResult, SpectralError> {
    if n_perm == 0 {
        return Err(SpectralError::NoReplicates);
    }
    let s_perm = (0..n_perm)
        .into_par_iter()
        .map(|i| {
            let stream = derive_seed(seed, 0x5045_524d ^ i as u64);
            let shuffled = shuffle_columns(embeddings, derive_seed(stream, 0));
            spectral_cluster(&shuffled, k, derive_seed(stream, 1), opts).map(|c| c.silhouette)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let p = permutation_p(s_obs, &s_perm, smoothed);
    Ok(PermutationTestResult { s_obs, s_perm, p })
}

// ---------------------------------------------------------------------------
// Descriptive analyses

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidShift {
    pub cluster: usize,
    pub n_high: usize,
    pub n_low: usize,
    pub high_centroid: Option<Vec<f64>>,
    pub low_centroid: Option<Vec<f64>>,
    /// Euclidean distance between the two group centroids; absent when one
    /// group has no members in the cluster.
    pub distance: Option<f64>,
}

/// Per-cluster centroids of High- and Low-group members and their distance.
pub fn centroid_shift(
    embeddings: &Matrix,
    clusters: &[usize],
    groups: &[EcoGroup],
    k: usize,
) -> Result<Vec<CentroidShift>, SpectralError> {
    let (n, d) = embeddings.shape();
    if clusters.len() != n || groups.len() != n {
        return Err(SpectralError::LengthMismatch(format!(
            "{n} embeddings, {} clusters, {} groups",
            clusters.len(),
            groups.len()
        )));
    }
    if let Some(&c) = clusters.iter().find(|&&c| c >= k) {
        return Err(SpectralError::InvalidK { k: c, n: k });
    }
    let mut sums = vec![[vec![0.0; d], vec![0.0; d]]; k];
    let mut counts = vec![[0usize; 2]; k];
    for i in 0..n {
        let g = groups[i].is_high() as usize;
        crate::linalg::axpy(1.0, embeddings.row(i), &mut sums[clusters[i]][g]);
        counts[clusters[i]][g] += 1;
    }
    let mean = |v: &[f64], c: usize| (c > 0).then(|| v.iter().map(|x| x / c as f64).collect::<Vec<f64>>());
    Ok((0..k)
        .map(|c| {
            let low = mean(&sums[c][0], counts[c][0]);
            let high = mean(&sums[c][1], counts[c][1]);
            let distance = match (&high, &low) {
                (Some(h), Some(l)) => Some(squared_distance(h, l).sqrt()),
                _ => None,
            };
            CentroidShift {
                cluster: c,
                n_high: counts[c][1],
                n_low: counts[c][0],
                high_centroid: high,
                low_centroid: low,
                distance,
            }
        })
        .collect())
}

/// Fraction of positive targets in each cluster (`None` for empty clusters).
pub fn rate_by_cluster(clusters: &[usize], targets: &[u8], k: usize) -> Result<Vec<Option<f64>>, SpectralError> {
    if clusters.len() != targets.len() {
        return Err(SpectralError::LengthMismatch(format!(
            "{} clusters vs {} targets",
            clusters.len(),
            targets.len()
        )));
    }
    let mut pos = vec![0usize; k];
    let mut tot = vec![0usize; k];
    for (&c, &t) in clusters.iter().zip(targets) {
        if c >= k {
            return Err(SpectralError::InvalidK { k: c, n: k });
        }
        tot[c] += 1;
        pos[c] += (t == 1) as usize;
    }
    Ok(pos
        .iter()
        .zip(&tot)
        .map(|(&p, &t)| (t > 0).then(|| p as f64 / t as f64))
        .collect())
}

pub fn coproduction_rate_by_cluster(complaints: &[ComplaintRecord], k: usize) -> Result<Vec<Option<f64>>, SpectralError> {
    let clusters = complaints
        .iter()
        .map(|c| c.cluster_id.ok_or(SpectralError::Unclustered(c.id)))
        .collect::<Result<Vec<_>, _>>()?;
    let targets: Vec<u8> = complaints
        .iter()
        .map(|c| (c.response_label == ResponseLabel::CoProduction) as u8)
        .collect();
    rate_by_cluster(&clusters, &targets, k)
}

/// Projection onto the two leading principal axes.
pub fn pca_2d(points: &Matrix) -> Result<Matrix, SpectralError> {
    let (n, d) = points.shape();
    if n == 0 {
        return Err(SpectralError::TooFewPoints { needed: 1, got: 0 });
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        crate::linalg::axpy(1.0 / n as f64, points.row(i), &mut mean);
    }
    let mut centered = points.clone();
    for i in 0..n {
        crate::linalg::axpy(-1.0, &mean, centered.row_mut(i));
    }
    let cov = centered.transpose().matmul(&centered)?;
    let eig = SymmetricEigen::new(&cov)?;
    let which: Vec<usize> = (0..d.min(2)).map(|i| d - 1 - i).collect();
    let mut axes = eig.eigenvectors(&which)?;
    // Fix signs so the largest-magnitude loading is positive.
    for c in 0..axes.cols() {
        let col = axes.column(c);
        let big = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if big < 0.0 {
            for r in 0..d {
                axes[(r, c)] = -axes[(r, c)];
            }
        }
    }
    let proj = centered.matmul(&axes)?;
    if proj.cols() == 2 {
        return Ok(proj);
    }
    let mut out = Matrix::zeros(n, 2);
    for i in 0..n {
        out[(i, 0)] = proj[(i, 0)];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::gaussian_blobs;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn rbf_closed_form() {
        let s = similarity(&m(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(s.sigma, 1.0);
        assert!((s.w[(1, 2)] - (-1.0f64).exp()).abs() < 1e-15);
        assert!((s.w[(0, 1)] - (-0.5f64).exp()).abs() < 1e-15);
        for i in 0..3 {
            assert_eq!(s.w[(i, i)], 1.0);
        }
        assert!(matches!(
            similarity(&m(&[&[1.0, 2.0], &[1.0, 2.0]])),
            Err(SpectralError::DegenerateSimilarity)
        ));
    }

    #[test]
    fn two_node_laplacian() {
        let lap = normalized_laplacian(&m(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        assert_eq!(lap.l, m(&[&[1.0, -1.0], &[-1.0, 1.0]]));
        let ev = SymmetricEigen::new(&lap.l).unwrap().eigenvalues();
        assert!(ev[0].abs() < 1e-12 && (ev[1] - 2.0).abs() < 1e-12);
        let emb = spectral_embed(&lap, 1, true).unwrap();
        assert!((emb[(0, 0)].abs() - 1.0).abs() < 1e-12);
        assert!((emb[(1, 0)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn isolated_vertex_rejected() {
        let w = m(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.5], &[0.0, 0.5, 1.0]]);
        assert!(matches!(normalized_laplacian(&w), Err(SpectralError::IsolatedVertex { index: 0 })));
    }

    fn block_w() -> Matrix {
        let mut w = Matrix::zeros(5, 5);
        let blocks = [0, 0, 0, 1, 1];
        for i in 0..5 {
            for j in 0..5 {
                if blocks[i] == blocks[j] {
                    w[(i, j)] = if i == j { 1.0 } else { 0.3 + 0.1 * ((i + j) % 3) as f64 };
                }
            }
        }
        w
    }

    #[test]
    fn block_diagonal_structure() {
        let lap = normalized_laplacian(&block_w()).unwrap();
        let ev = SymmetricEigen::new(&lap.l).unwrap().eigenvalues();
        assert!(ev[0].abs() < 1e-12 && ev[1].abs() < 1e-12 && ev[2] > 0.1);
        let emb = spectral_embed(&lap, 2, true).unwrap();
        for (a, b) in [(0, 1), (0, 2), (3, 4)] {
            for c in 0..2 {
                assert!((emb[(a, c)] - emb[(b, c)]).abs() < 1e-8);
            }
        }
        let raw = spectral_embed(&lap, 2, false).unwrap();
        let dotp: f64 = (0..5).map(|i| raw[(i, 0)] * raw[(i, 1)]).sum();
        assert!(dotp.abs() < 1e-8);
    }

    #[test]
    fn laplacian_null_vector_is_sqrt_degree() {
        let mut rng = rng_from(5);
        let (pts, _, _) = gaussian_blobs(30, 3, 2, 3.0, &mut rng);
        let lap = normalized_laplacian(&similarity(&pts).unwrap().w).unwrap();
        let v: Vec<f64> = lap.degrees.iter().map(|d| d.sqrt()).collect();
        for i in 0..30 {
            let r: f64 = (0..30).map(|j| lap.l[(i, j)] * v[j]).sum();
            assert!(r.abs() < 1e-12);
        }
        let ev = SymmetricEigen::new(&lap.l).unwrap().eigenvalues();
        assert!(ev.iter().all(|&e| (-1e-9..=2.0 + 1e-9).contains(&e)));
    }

    #[test]
    fn kmeans_toy() {
        let pts = m(&[&[0.0, 0.0], &[0.0, 1.0], &[10.0, 0.0], &[10.0, 1.0]]);
        let a = kmeans(&pts, 2, 1).unwrap();
        assert_eq!(a.labels[0], a.labels[1]);
        assert_eq!(a.labels[2], a.labels[3]);
        assert_ne!(a.labels[0], a.labels[2]);
        let mut cs: Vec<Vec<f64>> = a.centroids.iter_rows().map(|r| r.to_vec()).collect();
        cs.sort_by(|x, y| x[0].total_cmp(&y[0]));
        assert_eq!(cs, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
        assert_eq!(kmeans(&pts, 4, 3).unwrap().wcss, 0.0);
    }

    #[test]
    fn kmeans_duplicates_keep_clusters_nonempty() {
        let pts = m(&[&[1.0], &[1.0], &[1.0], &[2.0]]);
        let a = kmeans(&pts, 3, 9).unwrap();
        for c in 0..3 {
            assert!(a.labels.contains(&c));
        }
    }

    #[test]
    fn kmeans_recovers_three_blobs() {
        let mut rng = rng_from(17);
        let (pts, truth, _) = gaussian_blobs(300, 5, 3, 10.0, &mut rng);
        let a = kmeans(&pts, 3, 4).unwrap();
        assert_eq!(adjusted_rand_index(&a.labels, &truth).unwrap(), 1.0);
        assert_eq!(elbow_k(&pts, 8, 2).unwrap(), 3);
    }

    #[test]
    fn single_blob_elbow_in_range() {
        let mut rng = rng_from(3);
        let (pts, _, _) = gaussian_blobs(100, 4, 1, 1.0, &mut rng);
        let k = elbow_k(&pts, 6, 1).unwrap();
        assert!((2..=5).contains(&k));
    }

    #[test]
    fn elbow_curve_arithmetic() {
        // Second differences at k = 2, 3, 4: 30, 40, 5.
        assert_eq!(elbow_from_curve(&[100.0, 50.0, 30.0, 50.0, 75.0]).unwrap(), 3);
    }

    #[test]
    fn permutation_p_arithmetic() {
        assert_eq!(permutation_p(0.9, &[0.1, 0.2, 0.95, 0.3], false), 0.25);
        assert_eq!(permutation_p(0.5, &[0.5, 0.5], false), 1.0);
        assert_eq!(permutation_p(0.9, &[0.1, 0.2, 0.95, 0.3], true), 0.4);
    }

    /// Pair-counting Rand index adjusted by its permutation expectation,
    /// computed directly over all pairs.
    fn ari_oracle(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len();
        let (mut both, mut in_a, mut in_b, mut pairs) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                let sa = a[i] == a[j];
                let sb = b[i] == b[j];
                both += (sa && sb) as u8 as f64;
                in_a += sa as u8 as f64;
                in_b += sb as u8 as f64;
                pairs += 1.0;
            }
        }
        let exp = in_a * in_b / pairs;
        (both - exp) / (0.5 * (in_a + in_b) - exp)
    }

    #[test]
    fn ari_known_value() {
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 2]).unwrap();
        assert!((v - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
    }

    fn silhouette_oracle(p: &Matrix, l: &[usize]) -> Vec<f64> {
        let n = p.rows();
        let dist = |i: usize, j: usize| squared_distance(p.row(i), p.row(j)).sqrt();
        let k = *l.iter().max().unwrap() + 1;
        (0..n)
            .map(|i| {
                let mean_to = |c: usize| {
                    let m: Vec<usize> = (0..n).filter(|&j| j != i && l[j] == c).collect();
                    (!m.is_empty()).then(|| m.iter().map(|&j| dist(i, j)).sum::<f64>() / m.len() as f64)
                };
                let Some(a) = mean_to(l[i]) else { return 0.0 };
                let Some(b) = (0..k).filter(|&c| c != l[i]).filter_map(mean_to).reduce(f64::min) else {
                    return 0.0;
                };
                (b - a) / a.max(b)
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn ari_matches_pair_counting(a in prop::collection::vec(0usize..4, 3..30), seed in any::<u64>()) {
            let mut rng = rng_from(seed);
            let b: Vec<usize> = a.iter().map(|&x| if rng.random_bool(0.3) { rng.random_range(0..4) } else { x }).collect();
            let ours = adjusted_rand_index(&a, &b).unwrap();
            let oracle = ari_oracle(&a, &b);
            if oracle.is_finite() {
                prop_assert!((ours - oracle).abs() < 1e-12, "{} vs {}", ours, oracle);
            }
        }

        #[test]
        fn silhouette_bounded_and_matches_oracle(
            pts in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 2), 4..25),
            k in 2usize..4,
            seed in any::<u64>(),
        ) {
            let p = Matrix::from_rows(&pts).unwrap();
            let a = kmeans(&p, k.min(p.rows()), seed).unwrap();
            let s = silhouette(&p, &a.labels).unwrap();
            let o = silhouette_oracle(&p, &a.labels);
            for (x, y) in s.iter().zip(&o) {
                prop_assert!((-1.0..=1.0).contains(x));
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn kmeans_wcss_trace_and_total(
            pts in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 3), 3..40),
            k in 1usize..5,
            seed in any::<u64>(),
        ) {
            let p = Matrix::from_rows(&pts).unwrap();
            let k = k.min(p.rows());
            let a = kmeans_with(&p, k, seed, KMeansOptions { n_init: 1, max_iter: 300 }).unwrap();
            for w in a.wcss_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9 * w[0].max(1.0));
            }
            let direct: f64 = (0..p.rows()).map(|i| squared_distance(p.row(i), a.centroids.row(a.labels[i]))).sum();
            prop_assert!((direct - a.wcss).abs() <= 1e-9 * direct.max(1.0));
            for c in 0..k {
                prop_assert!(a.labels.contains(&c));
            }
        }

        #[test]
        fn laplacian_spectrum_bounded(
            pts in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 2), 3..20),
        ) {
            let p = Matrix::from_rows(&pts).unwrap();
            if let Ok(s) = similarity(&p) {
                let lap = normalized_laplacian(&s.w).unwrap();
                for i in 0..p.rows() {
                    for j in 0..p.rows() {
                        prop_assert_eq!(lap.l[(i, j)], lap.l[(j, i)]);
                        prop_assert_eq!(s.w[(i, j)], s.w[(j, i)]);
                    }
                }
                let ev = SymmetricEigen::new(&lap.l).unwrap().eigenvalues();
                prop_assert!(ev.iter().all(|&e| (-1e-9..=2.0 + 1e-9).contains(&e)), "{:?}", ev);
            }
        }

        #[test]
        fn permutation_p_order_invariant(mut s in prop::collection::vec(0.0..1.0f64, 1..30), obs in 0.0..1.0f64, seed in any::<u64>()) {
            let p1 = permutation_p(obs, &s, false);
            s.shuffle(&mut rng_from(seed));
            prop_assert_eq!(p1, permutation_p(obs, &s, false));
            let count = s.iter().filter(|&&v| v >= obs).count();
            prop_assert_eq!(p1, count as f64 / s.len() as f64);
        }
    }

    #[test]
    fn centroid_shift_examples() {
        let e = m(&[&[0.0, 0.0], &[3.0, 4.0]]);
        let s = centroid_shift(&e, &[0, 0], &[EcoGroup::High, EcoGroup::Low], 1).unwrap();
        assert_eq!(s[0].distance, Some(5.0));
        let e = m(&[&[1.0, 2.0], &[1.0, 2.0], &[7.0, 7.0]]);
        let s = centroid_shift(&e, &[0, 0, 1], &[EcoGroup::High, EcoGroup::Low, EcoGroup::High], 2).unwrap();
        assert_eq!(s[0].distance, Some(0.0));
        assert_eq!(s[1].distance, None);
    }

    #[test]
    fn centroid_shift_small_for_group_independent_clusters() {
        let mut rng = rng_from(8);
        let (pts, labels, centers) = gaussian_blobs(800, 6, 4, 10.0, &mut rng);
        let groups: Vec<EcoGroup> = (0..800)
            .map(|_| if rng.random_bool(0.5) { EcoGroup::High } else { EcoGroup::Low })
            .collect();
        let shifts = centroid_shift(&pts, &labels, &groups, 4).unwrap();
        let min_between = (0..4)
            .flat_map(|a| (0..a).map(move |b| (a, b)))
            .map(|(a, b)| squared_distance(centers.row(a), centers.row(b)).sqrt())
            .fold(f64::INFINITY, f64::min);
        for s in shifts {
            assert!(s.distance.unwrap() < min_between / 5.0);
        }
    }

    #[test]
    fn rate_examples_and_monte_carlo() {
        assert_eq!(rate_by_cluster(&[0, 0, 0, 0], &[1, 1, 0, 0], 1).unwrap(), vec![Some(0.5)]);
        assert_eq!(rate_by_cluster(&[0, 0], &[1, 1], 2).unwrap(), vec![Some(1.0), None]);
        let mut rng = rng_from(12);
        let planted = [0.2, 0.8];
        let clusters: Vec<usize> = (0..2000).map(|i| i % 2).collect();
        let targets: Vec<u8> = clusters.iter().map(|&c| rng.random_bool(planted[c]) as u8).collect();
        let r = rate_by_cluster(&clusters, &targets, 2).unwrap();
        for c in 0..2 {
            assert!((r[c].unwrap() - planted[c]).abs() < 0.05);
        }
    }

    #[test]
    fn small_spectral_recovery_and_determinism() {
        let mut rng = rng_from(21);
        let (pts, truth, _) = gaussian_blobs(120, 8, 3, 8.0, &mut rng);
        let a = spectral_cluster(&pts, 3, 5, SpectralOptions::default()).unwrap();
        assert!(adjusted_rand_index(a.labels(), &truth).unwrap() >= 0.95);
        let b = spectral_cluster(&pts, 3, 5, SpectralOptions::default()).unwrap();
        assert_eq!(a, b);
        let t = permutation_test_with_observed(&pts, 3, a.silhouette, 5, 2, false, SpectralOptions::default()).unwrap();
        assert_eq!(t.s_perm.len(), 5);
        assert!(t.p <= 0.2);
    }

    #[test]
    fn pca_line() {
        let pts = m(&[&[0.0, 0.0, 1.0], &[1.0, 1.0, 1.0], &[2.0, 2.0, 1.0]]);
        let p = pca_2d(&pts).unwrap();
        assert!((p[(2, 0)] - p[(0, 0)] - 2.0 * 2f64.sqrt()).abs() < 1e-9);
        for i in 0..3 {
            assert!(p[(i, 1)].abs() < 1e-9);
        }
    }
}
