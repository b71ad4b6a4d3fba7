//! Speech-token codebooks from mini-batch k-means over frame features.
//!
//! Features are per-utterance matrices of encoder activations (one row per
//! timestep). Fitting uses k-means++ seeding and the mini-batch update with a
//! per-centroid learning rate of `1 / count`. Tokens are assigned per frame by
//! nearest centroid under squared Euclidean distance.

mod io;

use std::collections::HashSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::par_map;
use crate::tokenspace::{Modality, TokenId, TokenRun, TokenSpace};

pub use io::{
    decode_features, encode_features, load_codebook, read_features, save_codebook, sidecar_path,
    write_features,
};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub dim: usize,
    /// Row-major, `rows * dim` values.
    pub values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::invalid("feature matrix needs at least one row and one column"));
        }
        if values.len() != rows * dim {
            return Err(Error::invalid(format!(
                "feature matrix {rows}x{dim} given {} values",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite feature value at index {i}")));
        }
        Ok(FeatureMatrix { rows, dim, values })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dim)
    }
}

/// Per-dimension affine standardization learned from training frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    fn fit(data: &[FeatureMatrix], dim: usize) -> Self {
        let mut mean = vec![0.0; dim];
        let mut n = 0usize;
        for row in data.iter().flat_map(|m| m.iter_rows()) {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += x as f64;
            }
            n += 1;
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for row in data.iter().flat_map(|m| m.iter_rows()) {
            for ((v, &x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x as f64 - m).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardization { mean, std }
    }

    fn apply(&self, row: &[f32], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            row.iter()
                .zip(self.mean.iter().zip(&self.std))
                .map(|(&x, (m, s))| (x as f64 - m) / s),
        );
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookMeta {
    /// Which feature family the codebook was fit on.
    pub source: String,
    /// Which corpus the k-means data came from.
    pub data_tag: String,
    pub seed: u64,
    pub minibatch_utterances: usize,
    pub iterations_run: usize,
    pub standardization: Option<Standardization>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub k: usize,
    pub dim: usize,
    /// `k * dim` row-major centroids, in the standardized space when
    /// `meta.standardization` is set.
    pub centroids: Vec<f32>,
    pub counts: Vec<u64>,
    pub meta: CodebookMeta,
}

#[derive(Debug, Clone)]
pub struct KMeansConfig {
    pub k: usize,
    pub minibatch_utterances: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Stop once the relative squared centroid movement of an iteration falls below this.
    pub tolerance: f64,
    pub standardize: bool,
    pub source: String,
    pub data_tag: String,
}

impl KMeansConfig {
    pub fn new(k: usize, minibatch_utterances: usize, iterations: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            minibatch_utterances,
            iterations,
            seed,
            tolerance: 1e-6,
            standardize: false,
            source: "features".to_string(),
            data_tag: "train".to_string(),
        }
    }
}

/// Frames pooled into f64 rows (standardized if requested).
struct Pool {
    dim: usize,
    values: Vec<f64>,
    /// `offsets[u]..offsets[u + 1]` are the rows of utterance `u`.
    offsets: Vec<usize>,
}

impl Pool {
    fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    fn len(&self) -> usize {
        self.values.len() / self.dim
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid; the lowest index wins ties.
fn nearest(row: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(row, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn common_dim(data: &[FeatureMatrix]) -> Result<usize> {
    let first = data
        .first()
        .ok_or_else(|| Error::invalid("no feature matrices given"))?;
    if let Some(m) = data.iter().find(|m| m.dim != first.dim) {
        return Err(Error::invalid(format!(
            "feature dimension mismatch: {} vs {}",
            first.dim, m.dim
        )));
    }
    Ok(first.dim)
}

fn count_distinct(data: &[FeatureMatrix]) -> usize {
    let rows: HashSet<Vec<u32>> = data
        .iter()
        .flat_map(|m| m.iter_rows())
        .map(|r| r.iter().map(|x| (x + 0.0).to_bits()).collect())
        .collect();
    rows.len()
}

/// k-means++: first center uniform, then sampled proportionally to squared distance.
fn kmeans_plus_plus(pool: &Pool, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = pool.len();
    let dim = pool.dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(pool.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(pool.row(i), pool.row(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            acc += d;
            if d > 0.0 && acc > target {
                pick = Some(i);
                break;
            }
        }
        // Rounding can leave `acc` just short of `target`; fall back to the last positive weight.
        let pick = pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("k <= distinct"));
        let start = centroids.len();
        centroids.extend_from_slice(pool.row(pick));
        let new = centroids[start..].to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(pool.row(i), &new));
        }
    }
    centroids
}

/// Mini-batch k-means over utterance feature matrices.
///
/// Each iteration samples `minibatch_utterances` utterances without
/// replacement (all of them when the corpus is smaller), pools their frames,
/// and moves every hit centroid to the running mean of all frames it has
/// absorbed so far. Centroids that have never absorbed a frame are moved to
/// the minibatch frame farthest from its nearest centroid.
pub fn fit_minibatch_kmeans(data: &[FeatureMatrix], config: &KMeansConfig) -> Result<Codebook> {
    let dim = common_dim(data)?;
    let k = config.k;
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if config.minibatch_utterances == 0 {
        return Err(Error::invalid("minibatch_utterances must be at least 1"));
    }
    let distinct = count_distinct(data);
    if distinct < k {
        return Err(Error::InfeasibleK { k, distinct });
    }

    let standardization = config.standardize.then(|| Standardization::fit(data, dim));
    let mut offsets = vec![0];
    let mut values = Vec::new();
    let mut buf = Vec::with_capacity(dim);
    for m in data {
        for row in m.iter_rows() {
            match &standardization {
                Some(s) => {
                    s.apply(row, &mut buf);
                    values.extend_from_slice(&buf);
                }
                None => values.extend(row.iter().map(|&x| x as f64)),
            }
        }
        offsets.push(offsets.last().unwrap() + m.rows);
    }
    let pool = Pool { dim, values, offsets };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centroids = kmeans_plus_plus(&pool, k, &mut rng);
    let mut counts = vec![0u64; k];
    let n_utts = data.len();
    let mut iterations_run = 0;

    let mut sums = vec![0.0; k * dim];
    let mut batch_counts = vec![0u64; k];
    for _ in 0..config.iterations {
        iterations_run += 1;
        let utts: Vec<usize> = if config.minibatch_utterances >= n_utts {
            (0..n_utts).collect()
        } else {
            let mut picked = index::sample(&mut rng, n_utts, config.minibatch_utterances).into_vec();
            picked.sort_unstable();
            picked
        };
        let frames: Vec<usize> = utts
            .iter()
            .flat_map(|&u| pool.offsets[u]..pool.offsets[u + 1])
            .collect();

        sums.iter_mut().for_each(|s| *s = 0.0);
        batch_counts.iter_mut().for_each(|c| *c = 0);
        let mut frame_dist = Vec::with_capacity(frames.len());
        for &f in &frames {
            let row = pool.row(f);
            let (c, d) = nearest(row, &centroids, dim);
            frame_dist.push(d);
            batch_counts[c] += 1;
            for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row) {
                *s += x;
            }
        }

        let previous = centroids.clone();
        for c in 0..k {
            let bc = batch_counts[c];
            if bc == 0 {
                continue;
            }
            let old = counts[c] as f64;
            let total = (counts[c] + bc) as f64;
            for (x, &s) in centroids[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(&sums[c * dim..(c + 1) * dim])
            {
                *x = (*x * old + s) / total;
            }
            counts[c] += bc;
        }

        let mut taken = HashSet::new();
        for c in (0..k).filter(|&c| counts[c] == 0) {
            let far = frame_dist
                .iter()
                .enumerate()
                .filter(|(i, _)| !taken.contains(i))
                .fold(None, |best: Option<(usize, f64)>, (i, &d)| match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((i, d)),
                });
            if let Some((i, _)) = far {
                taken.insert(i);
                centroids[c * dim..(c + 1) * dim].copy_from_slice(pool.row(frames[i]));
            }
        }

        let moved: f64 = sq_dist(&previous, &centroids);
        let scale: f64 = previous.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
        if moved / scale < config.tolerance {
            break;
        }
    }

    Ok(Codebook {
        k,
        dim,
        centroids: centroids.iter().map(|&x| x as f32).collect(),
        counts,
        meta: CodebookMeta {
            source: config.source.clone(),
            data_tag: config.data_tag.clone(),
            seed: config.seed,
            minibatch_utterances: config.minibatch_utterances,
            iterations_run,
            standardization,
        },
    })
}

impl Codebook {
    fn centroids_f64(&self) -> Vec<f64> {
        self.centroids.iter().map(|&x| x as f64).collect()
    }

    fn check_dim(&self, feats: &FeatureMatrix) -> Result<()> {
        if feats.dim != self.dim {
            return Err(Error::invalid(format!(
                "features have dimension {} but the codebook has {}",
                feats.dim, self.dim
            )));
        }
        Ok(())
    }

    fn project(&self, row: &[f32], buf: &mut Vec<f64>) {
        match &self.meta.standardization {
            Some(s) => s.apply(row, buf),
            None => {
                buf.clear();
                buf.extend(row.iter().map(|&x| x as f64));
            }
        }
    }

    /// Nearest-centroid index and squared distance for every row.
    pub fn nearest_centroids(&self, feats: &FeatureMatrix, jobs: usize) -> Result<Vec<(usize, f64)>> {
        self.check_dim(feats)?;
        let centroids = self.centroids_f64();
        let rows: Vec<&[f32]> = feats.iter_rows().collect();
        Ok(par_map(&rows, jobs, |row| {
            let mut buf = Vec::with_capacity(self.dim);
            self.project(row, &mut buf);
            nearest(&buf, &centroids, self.dim)
        }))
    }
}

/// One speech token per frame: the speech range start plus the nearest centroid index.
pub fn assign_tokens(cb: &Codebook, feats: &FeatureMatrix, space: &TokenSpace) -> Result<TokenRun> {
    assign_tokens_par(cb, feats, space, 1)
}

pub fn assign_tokens_par(
    cb: &Codebook,
    feats: &FeatureMatrix,
    space: &TokenSpace,
    jobs: usize,
) -> Result<TokenRun> {
    if cb.k > space.speech_range.len() {
        return Err(Error::invalid(format!(
            "codebook has {} centroids but the speech range holds {}",
            cb.k,
            space.speech_range.len()
        )));
    }
    let ids = cb
        .nearest_centroids(feats, jobs)?
        .into_iter()
        .map(|(c, _)| space.speech_range.start + c as TokenId)
        .collect();
    Ok(TokenRun::new(Modality::Speech, ids))
}

/// Sum over all frames of the squared distance to the nearest centroid.
pub fn inertia(cb: &Codebook, data: &[FeatureMatrix]) -> Result<f64> {
    inertia_par(cb, data, 1)
}

pub fn inertia_par(cb: &Codebook, data: &[FeatureMatrix], jobs: usize) -> Result<f64> {
    let mut total = 0.0;
    for m in data {
        total += cb
            .nearest_centroids(m, jobs)?
            .into_iter()
            .map(|(_, d)| d)
            .sum::<f64>();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenspace::build_token_space;
    use rand_distr::{Distribution, Normal};

    fn matrix(rows: &[[f32; 2]]) -> FeatureMatrix {
        FeatureMatrix::new(rows.len(), 2, rows.iter().flatten().copied().collect()).unwrap()
    }

    fn codebook(centroids: &[[f32; 2]]) -> Codebook {
        Codebook {
            k: centroids.len(),
            dim: 2,
            centroids: centroids.iter().flatten().copied().collect(),
            counts: vec![0; centroids.len()],
            meta: CodebookMeta {
                source: "test".into(),
                data_tag: "test".into(),
                seed: 0,
                minibatch_utterances: 1,
                iterations_run: 0,
                standardization: None,
            },
        }
    }

    #[test]
    fn k_equal_to_distinct_points_is_exact() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [3.0, 3.0]];
        let data = vec![matrix(&pts[..2]), matrix(&pts[2..])];
        let cb = fit_minibatch_kmeans(&data, &KMeansConfig::new(4, 2, 10, 1)).unwrap();
        assert_eq!(inertia(&cb, &data).unwrap(), 0.0);
        let mut got: Vec<[f32; 2]> = cb.centroids.chunks(2).map(|c| [c[0], c[1]]).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want = pts.to_vec();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
        assert_eq!(cb.counts.iter().sum::<u64>(), 4 * cb.meta.iterations_run as u64);
    }

    #[test]
    fn single_cluster_full_batch_is_grand_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let data: Vec<FeatureMatrix> = (0..5)
            .map(|_| {
                let v: Vec<f32> = (0..3 * 4).map(|_| normal.sample(&mut rng)).collect();
                FeatureMatrix::new(4, 3, v).unwrap()
            })
            .collect();
        let cb = fit_minibatch_kmeans(&data, &KMeansConfig::new(1, 5, 1, 9)).unwrap();
        let mut sum = [0.0f64; 3];
        for row in data.iter().flat_map(|m| m.iter_rows()) {
            for (s, &x) in sum.iter_mut().zip(row) {
                *s += x as f64;
            }
        }
        let mean: Vec<f32> = sum.iter().map(|s| (s / 20.0) as f32).collect();
        assert_eq!(cb.centroids, mean);
        assert_eq!(cb.counts, vec![20]);
    }

    #[test]
    fn infeasible_and_mismatched_inputs() {
        let data = vec![matrix(&[[1.0, 1.0], [1.0, 1.0], [2.0, 2.0]])];
        assert!(matches!(
            fit_minibatch_kmeans(&data, &KMeansConfig::new(3, 1, 5, 0)),
            Err(Error::InfeasibleK { k: 3, distinct: 2 })
        ));
        let other = FeatureMatrix::new(1, 3, vec![0.0; 3]).unwrap();
        let mixed = vec![data[0].clone(), other.clone()];
        assert!(matches!(
            fit_minibatch_kmeans(&mixed, &KMeansConfig::new(1, 1, 5, 0)),
            Err(Error::InvalidArgument(_))
        ));
        let cb = codebook(&[[0.0, 0.0]]);
        assert!(inertia(&cb, std::slice::from_ref(&other)).is_err());
        let space = build_token_space(2, 4, 0).unwrap();
        assert!(assign_tokens(&cb, &other, &space).is_err());
    }

    #[test]
    fn assignment_of_centroids_is_identity() {
        let cents = [[0.0, 0.0], [4.0, 0.0], [0.0, 4.0], [4.0, 4.0]];
        let cb = codebook(&cents);
        let space = build_token_space(3, 8, 0).unwrap();
        let run = assign_tokens(&cb, &matrix(&cents), &space).unwrap();
        assert_eq!(run.ids, vec![3, 4, 5, 6]);
        assert_eq!(inertia(&cb, &[matrix(&cents)]).unwrap(), 0.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        // (0,0) is at distance 1 from centroids 2 and 5 and farther from the rest.
        let cents = [
            [5.0, 5.0],
            [6.0, 5.0],
            [1.0, 0.0],
            [7.0, 5.0],
            [8.0, 5.0],
            [-1.0, 0.0],
        ];
        let cb = codebook(&cents);
        let space = build_token_space(1, 6, 0).unwrap();
        let run = assign_tokens(&cb, &matrix(&[[0.0, 0.0]]), &space).unwrap();
        assert_eq!(run.ids, vec![space.speech_range.start + 2]);
    }

    #[test]
    fn too_many_centroids_for_speech_range() {
        let cb = codebook(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]);
        let space = build_token_space(1, 2, 0).unwrap();
        assert!(assign_tokens(&cb, &matrix(&[[0.0, 0.0]]), &space).is_err());
    }

    #[test]
    fn single_centroid_inertia_is_total_variance() {
        let pts = [[1.0, 2.0], [3.0, -1.0], [-2.0, 0.5], [0.0, 0.0]];
        let n = pts.len() as f64;
        let mean = [
            pts.iter().map(|p| p[0] as f64).sum::<f64>() / n,
            pts.iter().map(|p| p[1] as f64).sum::<f64>() / n,
        ];
        let var: f64 = pts
            .iter()
            .map(|p| (p[0] as f64 - mean[0]).powi(2) + (p[1] as f64 - mean[1]).powi(2))
            .sum::<f64>()
            / n;
        let cb = codebook(&[[mean[0] as f32, mean[1] as f32]]);
        let got = inertia(&cb, &[matrix(&pts)]).unwrap();
        assert!((got - var * n).abs() < 1e-5, "{got} vs {}", var * n);
    }

    #[test]
    fn seeded_fit_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let data: Vec<FeatureMatrix> = (0..12)
            .map(|_| {
                let v: Vec<f32> = (0..10 * 4).map(|_| normal.sample(&mut rng)).collect();
                FeatureMatrix::new(10, 4, v).unwrap()
            })
            .collect();
        let mut cfg = KMeansConfig::new(8, 3, 20, 42);
        let a = fit_minibatch_kmeans(&data, &cfg).unwrap();
        let b = fit_minibatch_kmeans(&data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.counts.iter().sum::<u64>(), a.counts.iter().sum::<u64>());
        cfg.standardize = true;
        let s = fit_minibatch_kmeans(&data, &cfg).unwrap();
        assert!(s.meta.standardization.is_some());
        let space = build_token_space(1, 8, 0).unwrap();
        let run = assign_tokens(&s, &data[0], &space).unwrap();
        assert_eq!(run.len(), 10);
    }

    #[test]
    fn counts_sum_to_frames_seen() {
        let data: Vec<FeatureMatrix> = (0..6)
            .map(|u| {
                let v: Vec<f32> = (0..(u + 2) * 2).map(|i| (i * 7 % 11) as f32 + u as f32).collect();
                FeatureMatrix::new(u + 2, 2, v).unwrap()
            })
            .collect();
        let mut cfg = KMeansConfig::new(3, 2, 7, 5);
        cfg.tolerance = 0.0;
        let cb = fit_minibatch_kmeans(&data, &cfg).unwrap();
        assert_eq!(cb.meta.iterations_run, 7);
        let sizes: Vec<u64> = data.iter().map(|m| m.rows as u64).collect();
        let seen = cb.counts.iter().sum::<u64>();
        // every iteration pools exactly two utterances
        assert!(seen >= 7 * (sizes[0] + sizes[1]) && seen <= 7 * (sizes[4] + sizes[5]));
    }

    #[test]
    fn codebook_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cb.feat");
        let data = vec![matrix(&[[0.0, 0.0], [1.0, 0.0], [5.0, 5.0], [6.0, 5.0]])];
        let mut cfg = KMeansConfig::new(2, 1, 5, 0);
        cfg.standardize = true;
        let cb = fit_minibatch_kmeans(&data, &cfg).unwrap();
        save_codebook(&path, &cb).unwrap();
        assert!(sidecar_path(&path).exists());
        assert_eq!(load_codebook(&path).unwrap(), cb);
    }
}
