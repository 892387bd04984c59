//! K-means phase clustering, representative selection and diagnostics.

use crate::artifact::{self, load_matrix, save_matrix, ArtifactError};
use crate::tensor::{l2_normalize, sq_dist, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PhasesError {
    #[error("k = {k} exceeds the {points} available points")]
    TooFewPoints { points: usize, k: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("point width {found} does not match centroid width {expected}")]
    Width { expected: usize, found: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Semantic,
    Traditional,
}

impl std::str::FromStr for FeatureKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "semantic" => Ok(FeatureKind::Semantic),
            "traditional" => Ok(FeatureKind::Traditional),
            other => Err(format!("unknown feature kind `{other}` (semantic|traditional)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Independent k-means++ starts; the lowest-inertia fit is kept.
    pub restarts: usize,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig { k, seed, max_iter: 300, restarts: 10 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Matrix,
    pub feature_kind: FeatureKind,
    pub seed: u64,
    pub iterations: usize,
    pub inertia: f64,
    /// Inertia after each assignment step of the kept run.
    pub inertia_trace: Vec<f64>,
}

/// Rows scaled to unit L2 norm (zero rows stay zero).
pub fn normalize_rows(points: &Matrix) -> Matrix {
    let data = (0..points.rows).flat_map(|r| l2_normalize(points.row(r))).collect();
    Matrix::from_vec(points.rows, points.cols, data)
}

/// Nearest centroid and squared distance; ties go to the lowest index.
fn nearest(centroids: &Matrix, p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows {
        let d = sq_dist(centroids.row(c), p);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = points.rows;
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut x = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if x < w {
                    pick = i;
                    break;
                }
                x -= w;
            }
            pick
        } else {
            // All remaining points coincide with a center.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    let data = chosen.iter().flat_map(|&i| points.row(i).to_vec()).collect();
    Matrix::from_vec(k, points.cols, data)
}

fn lloyd(points: &Matrix, mut centroids: Matrix, max_iter: usize) -> (Matrix, usize, Vec<f64>) {
    let (n, k, w) = (points.rows, centroids.rows, points.cols);
    let mut prev: Option<Vec<usize>> = None;
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let cref = &centroids;
        let nearest_all = crate::par::map_indexed(n, |i| nearest(cref, points.row(i)));
        let assign: Vec<usize> = nearest_all.iter().map(|a| a.0).collect();
        trace.push(nearest_all.iter().map(|a| a.1).sum());
        if prev.as_ref() == Some(&assign) || iterations == max_iter {
            break;
        }
        iterations += 1;
        let mut sums = Matrix::zeros(k, w);
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            } else {
                // Reseed at the point farthest from its centroid.
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .fold((0, -1.0), |best, i| if nearest_all[i].1 > best.1 { (i, nearest_all[i].1) } else { best })
                    .0;
                taken[far] = true;
                centroids.row_mut(c).copy_from_slice(points.row(far));
            }
        }
        prev = Some(assign);
    }
    (centroids, iterations, trace)
}

/// Seeded k-means++ plus Lloyd iterations, best of `restarts`.
pub fn kmeans_fit(points: &Matrix, config: &KMeansConfig, feature_kind: FeatureKind) -> Result<ClusterModel, PhasesError> {
    if config.k == 0 {
        return Err(PhasesError::ZeroK);
    }
    if config.k > points.rows {
        return Err(PhasesError::TooFewPoints { points: points.rows, k: config.k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<ClusterModel> = None;
    for _ in 0..config.restarts.max(1) {
        let init = plus_plus(points, config.k, &mut rng);
        let (centroids, iterations, inertia_trace) = lloyd(points, init, config.max_iter);
        let inertia = *inertia_trace.last().expect("at least one assignment");
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            best = Some(ClusterModel { k: config.k, centroids, feature_kind, seed: config.seed, iterations, inertia, inertia_trace });
        }
    }
    Ok(best.expect("one run"))
}

impl ClusterModel {
    /// `(cluster, Euclidean distance)`.
    pub fn assign(&self, point: &[f64]) -> Result<(usize, f64), PhasesError> {
        if point.len() != self.centroids.cols {
            return Err(PhasesError::Width { expected: self.centroids.cols, found: point.len() });
        }
        let (c, d2) = nearest(&self.centroids, point);
        Ok((c, d2.sqrt()))
    }

    pub fn assign_all(&self, points: &Matrix) -> Result<Vec<(usize, f64)>, PhasesError> {
        if points.cols != self.centroids.cols {
            return Err(PhasesError::Width { expected: self.centroids.cols, found: points.cols });
        }
        Ok(crate::par::map_indexed(points.rows, |i| {
            let (c, d2) = nearest(&self.centroids, points.row(i));
            (c, d2.sqrt())
        }))
    }

    pub fn inertia_of(&self, points: &Matrix) -> Result<f64, PhasesError> {
        Ok(self.assign_all(points)?.iter().map(|a| a.1 * a.1).sum())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Representative {
    pub cluster: usize,
    pub program_id: String,
    pub interval_index: usize,
    pub distance: f64,
    /// Row in the clustered point matrix.
    pub row: usize,
}

/// The member nearest each centroid; ties go to the lowest
/// `(program_id, interval_index)`. Clusters without members are skipped.
pub fn pick_representatives(model: &ClusterModel, points: &Matrix, keys: &[(String, usize)]) -> Result<Vec<Representative>, PhasesError> {
    let assigned = model.assign_all(points)?;
    let mut best: Vec<Option<Representative>> = vec![None; model.k];
    for (row, &(c, d)) in assigned.iter().enumerate() {
        let (pid, idx) = &keys[row];
        let better = match &best[c] {
            None => true,
            Some(r) => d < r.distance || (d == r.distance && (pid, *idx) < (&r.program_id, r.interval_index)),
        };
        if better {
            best[c] = Some(Representative { cluster: c, program_id: pid.clone(), interval_index: *idx, distance: d, row });
        }
    }
    Ok(best.into_iter().flatten().collect())
}

/// Mean silhouette coefficient; singleton clusters score 0.
pub fn silhouette(model: &ClusterModel, points: &Matrix) -> Result<f64, PhasesError> {
    let labels: Vec<usize> = model.assign_all(points)?.iter().map(|a| a.0).collect();
    let n = points.rows;
    if n == 0 {
        return Ok(0.0);
    }
    let mut sizes = vec![0usize; model.k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    let scores = crate::par::map_indexed(n, |i| {
        let mut sums = vec![0.0; model.k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += sq_dist(points.row(i), points.row(j)).sqrt();
            }
        }
        let own = labels[i];
        if sizes[own] <= 1 {
            return 0.0;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..model.k).filter(|&c| c != own && sizes[c] > 0).map(|c| sums[c] / sizes[c] as f64).fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            return 0.0;
        }
        let m = a.max(b);
        if m == 0.0 {
            0.0
        } else {
            (b - a) / m
        }
    });
    Ok(scores.iter().sum::<f64>() / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KScan {
    pub k: usize,
    pub inertia: f64,
    pub silhouette: f64,
}

/// Inertia and silhouette for `k ∈ [2, k_max]`.
pub fn scan_k(points: &Matrix, k_max: usize, seed: u64, feature_kind: FeatureKind) -> Result<Vec<KScan>, PhasesError> {
    (2..=k_max.min(points.rows))
        .map(|k| {
            let m = kmeans_fit(points, &KMeansConfig::new(k, seed), feature_kind)?;
            Ok(KScan { k, inertia: m.inertia, silhouette: silhouette(&m, points)? })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    k: usize,
    feature_kind: FeatureKind,
    seed: u64,
    iterations: usize,
    inertia: f64,
}

/// Writes `<stem>.json`/`<stem>.bin` (centroids).
pub fn save_model(stem: &Path, m: &ClusterModel) -> Result<(), ArtifactError> {
    let meta = ModelMeta { k: m.k, feature_kind: m.feature_kind, seed: m.seed, iterations: m.iterations, inertia: m.inertia };
    save_matrix(stem, "clusters", &m.centroids, serde_json::to_value(meta).expect("serializable"))?;
    Ok(())
}

pub fn load_model(stem: &Path) -> Result<ClusterModel, ArtifactError> {
    let (manifest, centroids) = load_matrix(stem, "clusters")?;
    let meta: ModelMeta = serde_json::from_value(manifest.meta)
        .map_err(|e| ArtifactError::Format { path: stem.with_extension("json"), reason: e.to_string() })?;
    Ok(ClusterModel {
        k: meta.k,
        centroids,
        feature_kind: meta.feature_kind,
        seed: meta.seed,
        iterations: meta.iterations,
        inertia: meta.inertia,
        inertia_trace: vec![],
    })
}

pub fn save_representatives(path: &Path, reps: &[Representative]) -> Result<(), ArtifactError> {
    let text: String = reps.iter().map(|r| serde_json::to_string(r).expect("serializable") + "\n").collect();
    artifact::write(path, text.as_bytes())
}

pub fn load_representatives(path: &Path) -> Result<Vec<Representative>, ArtifactError> {
    artifact::read_text(path)?.lines().filter(|l| !l.trim().is_empty()).map(|l| artifact::from_json(path, l)).collect()
}
