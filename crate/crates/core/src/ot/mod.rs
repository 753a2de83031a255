//! Optimal-transport building blocks.
//!
//! Two entropic solvers share one log-domain kernel:
//!
//! * [`sinkhorn_balanced`] enforces both marginals exactly (up to `tol`);
//! * [`sinkhorn_generalized`] replaces the marginal constraints by
//!   `λ₁·KL(P𝟙‖μ) + λ₂·KL(Pᵀ𝟙‖ν)`, damping each scaling update by the
//!   exponent `λ/(ε+λ)`. Small `λ` lets mass between distant points vanish
//!   instead of being forced into a match.
//!
//! [`exact_emd_bruteforce`] enumerates permutations and is only meant as a
//! test oracle for tiny problems.

pub(crate) mod cost;
mod exact;
mod sinkhorn;
mod text;

pub use cost::{rcsls_cost, squared_euclidean_cost};
pub use exact::{exact_emd_bruteforce, MAX_BRUTEFORCE};
pub use sinkhorn::{sinkhorn_balanced, sinkhorn_generalized};
pub(crate) use sinkhorn::{solve_scaling, Potentials, StopRule};
pub use text::{format_plan, parse_cost_matrix};

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Pairwise cost used to compare mapped source rows with target rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[serde(rename = "sqeuclidean")]
    SquaredEuclidean,
    Rcsls,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::SquaredEuclidean => "sqeuclidean",
            Metric::Rcsls => "rcsls",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqeuclidean" | "squared_euclidean" => Ok(Metric::SquaredEuclidean),
            "rcsls" => Ok(Metric::Rcsls),
            _ => Err(Error::Invalid(format!("unknown metric {s:?}"))),
        }
    }
}

/// Dense `I×J` cost matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    values: DMatrix<f64>,
    /// `None` for matrices read from a file.
    metric: Option<Metric>,
}

impl CostMatrix {
    pub fn new(values: DMatrix<f64>, metric: Option<Metric>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("cost matrix is empty".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite cost {v}")));
        }
        if metric == Some(Metric::SquaredEuclidean) && values.iter().any(|&v| v < 0.0) {
            return Err(Error::Invalid("negative squared distance".into()));
        }
        Ok(Self { values, metric })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn metric(&self) -> Option<Metric> {
        self.metric
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        CostMatrix::new(&self.values * c, self.metric)
    }
}

/// Source and target masses `μ`, `ν`. Both are strictly positive probability
/// vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalWeights {
    mu: DVector<f64>,
    nu: DVector<f64>,
}

impl MarginalWeights {
    pub fn new(mu: DVector<f64>, nu: DVector<f64>) -> Result<Self> {
        for (name, w) in [("mu", &mu), ("nu", &nu)] {
            if w.is_empty() {
                return Err(Error::Invalid(format!("{name} is empty")));
            }
            if w.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                return Err(Error::Invalid(format!("{name} has a nonpositive entry")));
            }
            let s = w.sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::Invalid(format!("{name} sums to {s}, expected 1")));
            }
        }
        Ok(Self { mu, nu })
    }

    pub fn uniform(i: usize, j: usize) -> Result<Self> {
        if i == 0 || j == 0 {
            return Err(Error::Invalid("marginals must be nonempty".into()));
        }
        Ok(Self {
            mu: DVector::from_element(i, 1.0 / i as f64),
            nu: DVector::from_element(j, 1.0 / j as f64),
        })
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn nu(&self) -> &DVector<f64> {
        &self.nu
    }
}

/// Nonnegative transport plan plus solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    values: DMatrix<f64>,
    pub converged: bool,
    pub iterations_used: usize,
    marginal_row: DVector<f64>,
    marginal_col: DVector<f64>,
}

impl TransportPlan {
    pub(crate) fn from_values(values: DMatrix<f64>, converged: bool, iterations_used: usize) -> Self {
        let marginal_row = values.column_sum();
        let marginal_col = values.row_sum().transpose();
        Self {
            values,
            converged,
            iterations_used,
            marginal_row,
            marginal_col,
        }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Row sums `P𝟙`.
    pub fn marginal_row(&self) -> &DVector<f64> {
        &self.marginal_row
    }

    /// Column sums `Pᵀ𝟙`.
    pub fn marginal_col(&self) -> &DVector<f64> {
        &self.marginal_col
    }

    pub fn total_mass(&self) -> f64 {
        self.marginal_row.sum()
    }

    /// `⟨D, P⟩`.
    pub fn cost(&self, d: &CostMatrix) -> f64 {
        self.values.dot(d.values())
    }

    /// The same plan with every entry multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: &self.values * c,
            converged: self.converged,
            iterations_used: self.iterations_used,
            marginal_row: &self.marginal_row * c,
            marginal_col: &self.marginal_col * c,
        }
    }
}

/// Entropy regularizer, KL relaxation weights and stopping rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornParams {
    pub epsilon: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            lambda1: 0.001,
            lambda2: 0.001,
            tol: 1e-6,
            max_iter: 1000,
        }
    }
}

impl SinkhornParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        for (name, l) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            // +inf is allowed and means a hard marginal constraint
            if l.is_nan() || l < 0.0 {
                return Err(Error::Invalid(format!("{name} must be nonnegative, got {l}")));
            }
        }
        if !(self.tol > 0.0) {
            return Err(Error::Invalid(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Invalid("max_iter must be at least 1".into()));
        }
        Ok(())
    }

    /// Damping exponents `λᵢ/(ε+λᵢ)` of the scaling updates.
    pub fn exponents(&self) -> (f64, f64) {
        let rho = |l: f64| if l.is_infinite() { 1.0 } else { l / (self.epsilon + l) };
        (rho(self.lambda1), rho(self.lambda2))
    }
}

/// Generalized KL divergence `Σ pᵢ log(pᵢ/qᵢ) − pᵢ + qᵢ`, with `0·log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("p has {} entries, q has {}", p.len(), q.len())));
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if !(pi >= 0.0) {
            return Err(Error::Invalid(format!("negative mass {pi} in p")));
        }
        if !(qi > 0.0) {
            return Err(Error::Invalid(format!("nonpositive mass {qi} in q")));
        }
        let log_term = if pi == 0.0 { 0.0 } else { pi * (pi / qi).ln() };
        total += log_term - pi + qi;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let v = kl_divergence(&[1.0], &[0.5]).unwrap();
        assert!((v - (2f64.ln() - 0.5)).abs() < 1e-15);
        assert!((v - 0.19315).abs() < 1e-5);
        // (0 − 0 + 0.5) + (ln 2 − 1 + 0.5)
        let v = kl_divergence(&[0.0, 1.0], &[0.5, 0.5]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kl_errors() {
        assert!(kl_divergence(&[-0.1], &[1.0]).is_err());
        assert!(kl_divergence(&[0.1], &[0.0]).is_err());
        assert!(kl_divergence(&[0.1], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn weights_validation() {
        let ok = DVector::from_vec(vec![0.5, 0.5]);
        assert!(MarginalWeights::new(ok.clone(), ok.clone()).is_ok());
        assert!(MarginalWeights::new(DVector::from_vec(vec![0.5, 0.6]), ok.clone()).is_err());
        assert!(MarginalWeights::new(DVector::from_vec(vec![0.0, 1.0]), ok).is_err());
        assert!(MarginalWeights::uniform(0, 1).is_err());
    }

    #[test]
    fn params_validation() {
        let base = SinkhornParams::default();
        assert!(base.validate().is_ok());
        assert!(SinkhornParams { epsilon: 0.0, ..base }.validate().is_err());
        assert!(SinkhornParams { lambda1: -1.0, ..base }.validate().is_err());
        assert!(SinkhornParams { max_iter: 0, ..base }.validate().is_err());
        let inf = SinkhornParams { lambda1: f64::INFINITY, ..base };
        assert!(inf.validate().is_ok());
        assert_eq!(inf.exponents().0, 1.0);
    }

    #[test]
    fn metric_round_trip() {
        for m in [Metric::SquaredEuclidean, Metric::Rcsls] {
            assert_eq!(m.to_string().parse::<Metric>().unwrap(), m);
        }
        assert!("cosine".parse::<Metric>().is_err());
    }

    #[test]
    fn cost_matrix_rejects_nan() {
        let m = DMatrix::from_row_slice(1, 2, &[0.0, f64::NAN]);
        assert!(CostMatrix::new(m, None).is_err());
    }
}
