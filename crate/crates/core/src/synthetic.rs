//! Synthetic embedding pairs with a known translation.
//!
//! Source vectors are drawn from a mixture of clusters with uneven sizes and
//! spreads, then normalized. The target language is a rotated, noisy,
//! locally reshuffled copy, optionally padded with target-only outlier words
//! drawn around centers the source does not use.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embeddings::{normalize, unit_normalize_rows, EmbeddingMatrix};
use crate::retrieval::BilingualDictionary;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    /// Source vocabulary size (also the number of inlier target words).
    pub n: usize,
    pub d: usize,
    pub clusters: usize,
    /// Additive Gaussian noise per target coordinate, before renormalization.
    pub noise: f64,
    /// Fraction of the target vocabulary made of outliers.
    pub outlier_fraction: f64,
    /// Standard deviation of the frequency-rank jitter applied to the target
    /// order, as a fraction of `n`.
    pub rank_jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            d: 50,
            clusters: 40,
            noise: 0.0,
            outlier_fraction: 0.0,
            rank_jitter: 0.02,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub x: EmbeddingMatrix,
    pub y: EmbeddingMatrix,
    /// Ground-truth rotation: the noise-free image of source row `i` is `xᵢ·R`.
    pub rotation: DMatrix<f64>,
    /// Target row holding the translation of source row `i`.
    pub gold: Vec<usize>,
    /// Target rows that are outliers.
    pub outliers: Vec<usize>,
}

impl SyntheticPair {
    /// Gold dictionary `sᵢ → tᵢ` over all source words.
    pub fn dictionary(&self) -> BilingualDictionary {
        let mut dict = BilingualDictionary::new();
        for (i, &j) in self.gold.iter().enumerate() {
            dict.insert(self.x.vocab()[i].clone(), self.y.vocab()[j].clone());
        }
        dict
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian with sign correction).
pub fn random_orthogonal(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            let mut col = q.column_mut(j);
            col.neg_mut();
        }
    }
    q
}

/// Points scattered around `centers`, with cluster sizes drawn from a
/// Zipf-like law and per-cluster spreads in `[0.6, 1.4]`.
fn clustered(count: usize, centers: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let (k, d) = centers.shape();
    let weights: Vec<f64> = (0..k).map(|c| 1.0 / (c as f64 + 2.0)).collect();
    let total: f64 = weights.iter().sum();
    let spreads: Vec<f64> = (0..k).map(|_| rng.random_range(0.6..1.4)).collect();
    let mut out = DMatrix::zeros(count, d);
    for i in 0..count {
        let mut u = rng.random::<f64>() * total;
        let mut c = 0;
        while c + 1 < k && u >= weights[c] {
            u -= weights[c];
            c += 1;
        }
        let s = spreads[c] / (d as f64).sqrt();
        for j in 0..d {
            let z: f64 = StandardNormal.sample(rng);
            out[(i, j)] = centers[(c, j)] + s * z;
        }
    }
    out
}

fn unit_centers(k: usize, d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut c = gaussian(k, d, rng);
    for mut row in c.row_iter_mut() {
        let n = row.norm();
        row /= n;
    }
    c
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, d) = (cfg.n, cfg.d);

    let centers = unit_centers(cfg.clusters.max(1), d, &mut rng);
    let x = normalize(&EmbeddingMatrix::from_vectors(clustered(n, &centers, &mut rng)))?;
    let rotation = random_orthogonal(d, &mut rng);

    let mut images = x.vectors() * &rotation;
    if cfg.noise > 0.0 {
        images += gaussian(n, d, &mut rng) * cfg.noise;
    }

    let n_out = if cfg.outlier_fraction > 0.0 {
        ((n as f64) * cfg.outlier_fraction / (1.0 - cfg.outlier_fraction)).round() as usize
    } else {
        0
    };
    let outlier_centers = unit_centers((cfg.clusters / 8).max(1), d, &mut rng);
    let outliers = clustered(n_out, &outlier_centers, &mut rng);

    // frequency order: inliers keep their source rank up to jitter, outliers
    // land anywhere
    let jitter = cfg.rank_jitter * n as f64;
    let mut keys: Vec<(f64, usize)> = Vec::with_capacity(n + n_out);
    for i in 0..n {
        let z: f64 = StandardNormal.sample(&mut rng);
        keys.push((i as f64 + jitter * z, i));
    }
    for o in 0..n_out {
        keys.push((rng.random_range(0.0..n as f64), n + o));
    }
    keys.shuffle(&mut rng);
    keys.sort_by(|a, b| a.0.total_cmp(&b.0));

    let total = n + n_out;
    let mut rows = DMatrix::zeros(total, d);
    let mut vocab = Vec::with_capacity(total);
    let mut gold = vec![0; n];
    let mut outlier_rows = Vec::with_capacity(n_out);
    for (pos, &(_, id)) in keys.iter().enumerate() {
        if id < n {
            rows.set_row(pos, &images.row(id));
            vocab.push(format!("t{id}"));
            gold[id] = pos;
        } else {
            rows.set_row(pos, &outliers.row(id - n));
            vocab.push(format!("o{}", id - n));
            outlier_rows.push(pos);
        }
    }
    let y = unit_normalize_rows(&EmbeddingMatrix::new(vocab, rows)?)?;

    let (_, xv) = x.into_parts();
    let x_vocab = (0..n).map(|i| format!("s{i}")).collect();
    let x = EmbeddingMatrix::new(x_vocab, xv)?;

    Ok(SyntheticPair {
        x,
        y,
        rotation,
        gold,
        outliers: outlier_rows,
    })
}
