//! The unsupervised alignment pipeline.
//!
//! 1. [`initialize`] estimates a starting map on the most frequent words.
//! 2. [`align`] runs stochastic alternating minimization of `‖XQ − PY‖²`:
//!    each iteration samples a batch per language, picks a direction at
//!    random (map `X_b` onto `Y_b` with `Q`, or `Y_b` onto `X_b` with `Qᵀ`),
//!    solves a relaxed transport problem for the matching `P` and takes one
//!    projected gradient step on `Q`. Batch size doubles and the iteration
//!    count is quartered after every epoch.
//! 3. [`refine`] alternates mutual-CSLS dictionary induction and Procrustes.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::{normalize, sample_batch, Batch, EmbeddingMatrix};
use crate::mapping::{gradient_step, procrustes, OrthogonalMap, ORTHOGONALITY_TOL};
use crate::ot::{
    rcsls_cost, sinkhorn_generalized, solve_scaling, squared_euclidean_cost, CostMatrix,
    MarginalWeights, Metric, Potentials, SinkhornParams, StopRule,
};
use crate::retrieval::csls_retrieve;
use crate::{Error, Result};

/// Sinkhorn/Procrustes alternations run by [`initialize`].
pub const INIT_ROUNDS: usize = 30;

/// Neighbourhood used when matching similarity profiles in [`initialize`].
const PROFILE_CSLS_K: usize = 10;

/// Every knob of [`align`]. Defaults follow the published schedule where one
/// exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub epsilon: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub batch_size_init: usize,
    pub iters_per_epoch_init: usize,
    pub epochs: usize,
    pub init_words: usize,
    pub train_pool: usize,
    pub lr: f64,
    pub seed: u64,
    pub cost_metric: Metric,
    pub rcsls_k: usize,
    /// When false every step maps source onto target.
    pub bidirectional: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        let s = SinkhornParams::default();
        Self {
            epsilon: s.epsilon,
            lambda1: s.lambda1,
            lambda2: s.lambda2,
            tol: s.tol,
            max_iter: s.max_iter,
            batch_size_init: 500,
            iters_per_epoch_init: 2000,
            epochs: 4,
            init_words: 2500,
            train_pool: 20000,
            lr: 0.5,
            seed: 0,
            cost_metric: Metric::Rcsls,
            rcsls_k: 10,
            bidirectional: true,
        }
    }
}

impl AlignConfig {
    pub fn sinkhorn(&self) -> SinkhornParams {
        SinkhornParams {
            epsilon: self.epsilon,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }

    /// `(batch size, iterations)` for each epoch.
    pub fn schedule(&self) -> Vec<(usize, usize)> {
        (0..self.epochs)
            .map(|e| {
                let b = self.batch_size_init.saturating_mul(1usize.checked_shl(e as u32).unwrap_or(usize::MAX));
                let iters = self
                    .iters_per_epoch_init
                    .checked_div(4usize.saturating_pow(e as u32))
                    .unwrap_or(0)
                    .max(1);
                (b, iters)
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        self.sinkhorn().validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("lr must be nonnegative, got {}", self.lr)));
        }
        if self.batch_size_init == 0 || self.rcsls_k == 0 {
            return Err(Error::Invalid("batch size and rcsls_k must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Match `X_b·Q` with `Y_b`.
    Forward,
    /// Match `Y_b·Qᵀ` with `X_b`.
    Backward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    #[serde(skip)]
    pub q: Option<OrthogonalMap>,
    pub epoch: usize,
    pub iteration: usize,
    pub forward_steps: usize,
    pub backward_steps: usize,
    /// `⟨D, P⟩` of every step.
    pub loss_trace: Vec<f64>,
}

impl TrainState {
    pub fn new(q: OrthogonalMap) -> Self {
        Self {
            q: Some(q),
            epoch: 0,
            iteration: 0,
            forward_steps: 0,
            backward_steps: 0,
            loss_trace: Vec::new(),
        }
    }

    pub fn map(&self) -> &OrthogonalMap {
        self.q.as_ref().expect("train state always holds a map")
    }
}

fn clamp_words(what: &str, wanted: usize, limit: usize) -> usize {
    if wanted > limit {
        log::warn!("{what} {wanted} exceeds the available {limit} words; clamped");
        limit
    } else {
        wanted
    }
}

fn check_pair(x: &EmbeddingMatrix, y: &EmbeddingMatrix) -> Result<()> {
    if x.d() != y.d() {
        return Err(Error::Shape(format!("source dimension {} vs target dimension {}", x.d(), y.d())));
    }
    Ok(())
}

fn build_cost(metric: Metric, a: &DMatrix<f64>, b: &DMatrix<f64>, k: usize) -> Result<CostMatrix> {
    match metric {
        Metric::SquaredEuclidean => squared_euclidean_cost(a, b),
        Metric::Rcsls => rcsls_cost(a, b, k.min(a.nrows()).min(b.nrows())),
    }
}

/// Sorted rows of `sqrt(H·Hᵀ) = H·(HᵀH)^{-1/2}·Hᵀ`, normalized; invariant to
/// rotations of `H`.
fn similarity_profiles(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = h.transpose() * h;
    let eig = gram.symmetric_eigen();
    let top = eig.eigenvalues.max();
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| {
        if l > 1e-12 * top {
            1.0 / l.sqrt()
        } else {
            0.0
        }
    }));
    let w = &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();
    let mut sim = h * w * h.transpose();
    let m = sim.nrows();
    let mut row = vec![0.0; m];
    for i in 0..m {
        row.iter_mut().enumerate().for_each(|(j, v)| *v = sim[(i, j)]);
        row.sort_by(f64::total_cmp);
        for (j, v) in row.iter().enumerate() {
            sim[(i, j)] = *v;
        }
    }
    Ok(normalize(&EmbeddingMatrix::from_vectors(sim))?.into_parts().1)
}

/// Starting map from the first `init_words` words of each language.
///
/// Similarity profiles (sorted rows of the square-rooted Gram matrix) are
/// rotation invariant, so matching them by CSLS gives a seed dictionary that
/// does not depend on the relative orientation of the spaces. Procrustes on
/// that seed is then polished by [`INIT_ROUNDS`] alternations of balanced
/// Sinkhorn (uniform marginals, squared Euclidean cost) and Procrustes on the
/// barycentric targets `m·P·Y_head`.
pub fn initialize(x: &EmbeddingMatrix, y: &EmbeddingMatrix, cfg: &AlignConfig) -> Result<OrthogonalMap> {
    check_pair(x, y)?;
    cfg.validate()?;
    let limit = cfg.train_pool.min(x.n()).min(y.n());
    let m = clamp_words("init_words", cfg.init_words, limit);
    let d = x.d();
    if m < d {
        return Err(Error::Invalid(format!(
            "init_words {m} is smaller than the dimension {d}; Procrustes is underdetermined"
        )));
    }
    let xh = x.vectors().rows(0, m).into_owned();
    let yh = y.vectors().rows(0, m).into_owned();

    let px = similarity_profiles(&xh)?;
    let py = similarity_profiles(&yh)?;
    let seed = csls_retrieve(&px, &py, PROFILE_CSLS_K.min(m))?;
    let mut q = procrustes(&xh, &yh.select_rows(seed.iter()))?;

    let w = MarginalWeights::uniform(m, m)?;
    let mut warm: Option<Potentials> = None;
    for _ in 0..INIT_ROUNDS {
        let d = squared_euclidean_cost(&q.apply(&xh)?, &yh)?;
        let (plan, pot) = solve_scaling(
            &d,
            &w,
            cfg.epsilon,
            (1.0, 1.0),
            cfg.tol,
            cfg.max_iter,
            StopRule::Marginal,
            warm.take(),
        )?;
        warm = Some(pot);
        let targets = plan.values() * &yh * m as f64;
        q = procrustes(&xh, &targets)?;
    }
    q.non_unique = false;
    Ok(q)
}

/// One relaxed-matching step.
///
/// Backward steps swap the batches and work on `Qᵀ`, then transpose back.
/// The plan between the two batches is solved with uniform `1/b` marginals and
/// rescaled to unit total mass, so only the relative weights of the matches
/// reach the gradient. The recorded loss is `⟨D, P⟩` of the rescaled plan.
pub fn rmp_step(
    mut state: TrainState,
    xb: &Batch,
    yb: &Batch,
    cfg: &AlignConfig,
    direction: Direction,
) -> Result<TrainState> {
    let q = state.q.take().expect("train state always holds a map");
    let (src, tgt, q) = match direction {
        Direction::Forward => (&xb.matrix, &yb.matrix, q),
        Direction::Backward => (&yb.matrix, &xb.matrix, q.transpose()),
    };
    if src.nrows() != tgt.nrows() {
        return Err(Error::Shape(format!("batches of {} and {} rows", src.nrows(), tgt.nrows())));
    }
    let b = src.nrows();
    let params = cfg.sinkhorn();
    let d = build_cost(cfg.cost_metric, &q.apply(src)?, tgt, cfg.rcsls_k)?;
    let plan = sinkhorn_generalized(&d, &MarginalWeights::uniform(b, b)?, &params)?;
    let mass = plan.total_mass();
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(Error::Numerical(format!("relaxed plan has total mass {mass}")));
    }
    let plan = plan.scaled(1.0 / mass);
    state.loss_trace.push(plan.cost(&d));

    let next = gradient_step(&q, src, tgt, &plan, cfg.lr)?;
    state.q = Some(match direction {
        Direction::Forward => {
            state.forward_steps += 1;
            next
        }
        Direction::Backward => {
            state.backward_steps += 1;
            next.transpose()
        }
    });
    state.iteration += 1;
    Ok(state)
}

/// Full pipeline: initialization followed by the epoch schedule.
pub fn align(x: &EmbeddingMatrix, y: &EmbeddingMatrix, cfg: &AlignConfig) -> Result<TrainState> {
    let q0 = initialize(x, y, cfg)?;
    train_from(x, y, cfg, q0)
}

/// The stochastic loop of [`align`] started from a given map.
pub fn train_from(
    x: &EmbeddingMatrix,
    y: &EmbeddingMatrix,
    cfg: &AlignConfig,
    q0: OrthogonalMap,
) -> Result<TrainState> {
    check_pair(x, y)?;
    cfg.validate()?;
    let pool = cfg.train_pool.min(x.n()).min(y.n());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = TrainState::new(q0);

    for (epoch, (b, iters)) in cfg.schedule().into_iter().enumerate() {
        let b = clamp_words("batch size", b, pool);
        state.epoch = epoch;
        log::info!("epoch {epoch}: batch {b}, {iters} iterations");
        for _ in 0..iters {
            let xb = sample_batch(x, pool, b, &mut rng)?;
            let yb = sample_batch(y, pool, b, &mut rng)?;
            let draw: u32 = rng.random();
            let direction = if cfg.bidirectional && draw % 2 == 1 {
                Direction::Backward
            } else {
                Direction::Forward
            };
            state = rmp_step(state, &xb, &yb, cfg, direction)?;
            if state.iteration % 100 == 0 {
                let err = state.map().orthogonality_error();
                if err > ORTHOGONALITY_TOL {
                    return Err(Error::Numerical(format!(
                        "map drifted off the orthogonal group (‖QᵀQ−I‖max = {err:e})"
                    )));
                }
            }
        }
    }
    Ok(state)
}

/// Mutual CSLS nearest neighbours between the first `dict_size` mapped source
/// words and the first `dict_size` target words.
pub fn mutual_csls_pairs(
    x: &EmbeddingMatrix,
    y: &EmbeddingMatrix,
    q: &OrthogonalMap,
    dict_size: usize,
    csls_k: usize,
) -> Result<Vec<(usize, usize)>> {
    let ms = dict_size.min(x.n());
    let mt = dict_size.min(y.n());
    if ms == 0 || mt == 0 {
        return Ok(Vec::new());
    }
    let s = q.apply(&x.vectors().rows(0, ms).into_owned())?;
    let t = y.vectors().rows(0, mt).into_owned();
    let k = csls_k.min(ms).min(mt);
    let fwd = csls_retrieve(&s, &t, k)?;
    let bwd = csls_retrieve(&t, &s, k)?;
    Ok(fwd
        .into_iter()
        .enumerate()
        .filter(|&(i, j)| bwd[j] == i)
        .collect())
}

/// Refinement: `rounds` times, induce a dictionary of mutual CSLS neighbours
/// and re-solve Procrustes on it.
pub fn refine(
    x: &EmbeddingMatrix,
    y: &EmbeddingMatrix,
    q: &OrthogonalMap,
    rounds: usize,
    dict_size: usize,
    csls_k: usize,
) -> Result<OrthogonalMap> {
    check_pair(x, y)?;
    let mut q = q.clone();
    for round in 0..rounds {
        let pairs = mutual_csls_pairs(x, y, &q, dict_size, csls_k)?;
        if pairs.is_empty() {
            log::warn!("refinement round {round}: no mutual neighbours, keeping the current map");
            return Ok(q);
        }
        log::info!("refinement round {round}: {} mutual pairs", pairs.len());
        let xs = x.vectors().select_rows(pairs.iter().map(|p| &p.0));
        let ys = y.vectors().select_rows(pairs.iter().map(|p| &p.1));
        q = procrustes(&xs, &ys)?;
    }
    q.non_unique = false;
    Ok(q)
}
