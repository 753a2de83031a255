//! Orthogonal maps between embedding spaces.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::ot::TransportPlan;
use crate::{Error, Result};

/// Maximum tolerated `‖QᵀQ − I‖max`.
pub const ORTHOGONALITY_TOL: f64 = 1e-6;

/// Relative singular-value threshold below which a cross-covariance is
/// considered rank deficient.
const RANK_TOL: f64 = 1e-10;

/// A `d×d` orthogonal matrix. Rows of a source embedding are mapped as `x·Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalMap {
    q: DMatrix<f64>,
    /// Set by [`procrustes`] when the cross-covariance is rank deficient, in
    /// which case the optimum is not unique.
    pub non_unique: bool,
}

impl OrthogonalMap {
    /// Wraps `q` after checking orthogonality.
    pub fn new(q: DMatrix<f64>) -> Result<Self> {
        if !q.is_square() || q.is_empty() {
            return Err(Error::Shape(format!("map must be square, got {:?}", q.shape())));
        }
        let m = Self { q, non_unique: false };
        let err = m.orthogonality_error();
        if !(err <= ORTHOGONALITY_TOL) {
            return Err(Error::Invalid(format!("matrix is not orthogonal (‖QᵀQ−I‖max = {err:e})")));
        }
        Ok(m)
    }

    pub fn identity(d: usize) -> Self {
        Self {
            q: DMatrix::identity(d, d),
            non_unique: false,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn transpose(&self) -> Self {
        Self {
            q: self.q.transpose(),
            non_unique: self.non_unique,
        }
    }

    /// `X·Q`.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "vectors have dimension {} but the map is {}x{}",
                x.ncols(),
                self.dim(),
                self.dim()
            )));
        }
        Ok(x * &self.q)
    }

    pub fn orthogonality_error(&self) -> f64 {
        let d = self.dim();
        (self.q.transpose() * &self.q - DMatrix::<f64>::identity(d, d)).amax()
    }

    /// Text form: the dimension on the first line, then `d` rows of `d` values.
    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.dim());
        for row in self.q.row_iter() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (_, first) = lines.next().ok_or_else(|| Error::parse(1, "empty map file"))?;
        let d: usize = first
            .parse()
            .map_err(|_| Error::parse(1, format!("bad dimension {first:?}")))?;
        if d == 0 {
            return Err(Error::parse(1, "dimension must be positive"));
        }
        let mut data = Vec::with_capacity(d.saturating_mul(d).min(1 << 24));
        let mut rows = 0;
        for (lineno, line) in lines {
            if rows == d {
                return Err(Error::parse(lineno, format!("more than {d} rows")));
            }
            let start = data.len();
            for tok in line.split_ascii_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::parse(lineno, format!("bad number {tok:?}")))?;
                if !v.is_finite() {
                    return Err(Error::parse(lineno, format!("non-finite value {tok:?}")));
                }
                data.push(v);
            }
            if data.len() - start != d {
                return Err(Error::parse(
                    lineno,
                    format!("row has {} values, expected {d}", data.len() - start),
                ));
            }
            rows += 1;
        }
        if rows != d {
            return Err(Error::parse(rows + 1, format!("expected {d} rows, found {rows}")));
        }
        OrthogonalMap::new(DMatrix::from_row_slice(d, d, &data))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| e.in_file(path))
    }
}

/// Polar factor `UVᵀ` of `m = USVᵀ`, plus whether `m` was rank deficient.
fn polar(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite matrix entry".into()));
    }
    let svd = m
        .clone()
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let (Some(u), Some(v_t)) = (&svd.u, &svd.v_t) else {
        return Err(Error::Numerical("SVD factors missing".into()));
    };
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let deficient = smax == 0.0 || smin <= RANK_TOL * smax;
    Ok((u * v_t, deficient))
}

/// Orthogonal `Q` minimizing `‖XQ − Y‖_F`, from the SVD of `XᵀY`.
pub fn procrustes(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<OrthogonalMap> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!("X is {:?}, Y is {:?}", x.shape(), y.shape())));
    }
    if x.is_empty() {
        return Err(Error::Shape("empty point sets".into()));
    }
    let (q, non_unique) = polar(&(x.transpose() * y))?;
    Ok(OrthogonalMap { q, non_unique })
}

/// Nearest orthogonal matrix to `m` in Frobenius norm.
pub fn project_orthogonal(m: &DMatrix<f64>) -> Result<OrthogonalMap> {
    if !m.is_square() || m.is_empty() {
        return Err(Error::Shape(format!("expected a square matrix, got {:?}", m.shape())));
    }
    let (q, non_unique) = polar(m)?;
    Ok(OrthogonalMap { q, non_unique })
}

fn check_step_shapes(q: &OrthogonalMap, xb: &DMatrix<f64>, yb: &DMatrix<f64>, p: &TransportPlan) -> Result<()> {
    let d = q.dim();
    let b = xb.nrows();
    if xb.ncols() != d || yb.ncols() != d {
        return Err(Error::Shape(format!(
            "batches have dimensions {} and {}, map is {d}x{d}",
            xb.ncols(),
            yb.ncols()
        )));
    }
    if p.values().shape() != (b, yb.nrows()) || yb.nrows() != b || b == 0 {
        return Err(Error::Shape(format!(
            "plan is {:?} for batches of {b} and {} rows",
            p.values().shape(),
            yb.nrows()
        )));
    }
    Ok(())
}

/// Residual `XbQ − b·P·Yb`.
///
/// A plan between two batches of `b` points with uniform marginals `1/b` is
/// multiplied by `b` so that it lives on the scale of a permutation matrix.
fn residual(q: &OrthogonalMap, xb: &DMatrix<f64>, yb: &DMatrix<f64>, p: &TransportPlan) -> DMatrix<f64> {
    let b = xb.nrows() as f64;
    xb * q.matrix() - (p.values() * yb) * b
}

/// Batch objective `‖XbQ − b·P·Yb‖²_F / b`.
pub fn batch_objective(q: &OrthogonalMap, xb: &DMatrix<f64>, yb: &DMatrix<f64>, p: &TransportPlan) -> Result<f64> {
    check_step_shapes(q, xb, yb, p)?;
    Ok(residual(q, xb, yb, p).norm_squared() / xb.nrows() as f64)
}

/// Euclidean gradient of [`batch_objective`] with respect to `Q`:
/// `(2/b)·Xbᵀ(XbQ − b·P·Yb)`.
pub fn objective_gradient(
    q: &OrthogonalMap,
    xb: &DMatrix<f64>,
    yb: &DMatrix<f64>,
    p: &TransportPlan,
) -> Result<DMatrix<f64>> {
    check_step_shapes(q, xb, yb, p)?;
    let b = xb.nrows() as f64;
    Ok(xb.transpose() * residual(q, xb, yb, p) * (2.0 / b))
}

/// One projected gradient step `Q ← proj_O(Q − lr·∇)`.
pub fn gradient_step(
    q: &OrthogonalMap,
    xb: &DMatrix<f64>,
    yb: &DMatrix<f64>,
    p: &TransportPlan,
    lr: f64,
) -> Result<OrthogonalMap> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Invalid(format!("learning rate must be nonnegative, got {lr}")));
    }
    let g = objective_gradient(q, xb, yb, p)?;
    if lr == 0.0 {
        return Ok(q.clone());
    }
    let m = q.matrix() - g * lr;
    let mut next = project_orthogonal(&m)?;
    next.non_unique = false;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let qr = gaussian(d, d, rng).qr();
        qr.q()
    }

    fn plan(m: DMatrix<f64>) -> TransportPlan {
        TransportPlan::from_values(m, true, 1)
    }

    #[test]
    fn procrustes_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian(20, 4, &mut rng);
        let q = procrustes(&x, &x).unwrap();
        assert!((q.matrix() - DMatrix::<f64>::identity(4, 4)).amax() < 1e-10);
        assert!(!q.non_unique);
    }

    #[test]
    fn procrustes_with_identity_source() {
        let x = DMatrix::<f64>::identity(2, 2);
        let y = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let q = procrustes(&x, &y).unwrap();
        assert!((q.matrix() - &y).amax() < 1e-12);
    }

    #[test]
    fn procrustes_recovers_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gaussian(50, 5, &mut rng);
        let r = random_orthogonal(5, &mut rng);
        let y = &x * &r;
        let q = procrustes(&x, &y).unwrap();
        assert!((q.matrix() - &r).amax() < 1e-8);
        assert!((&x * q.matrix() - &y).norm() <= 1e-8);
    }

    #[test]
    fn procrustes_flags_rank_deficiency() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let q = procrustes(&x, &x).unwrap();
        assert!(q.non_unique);
        assert!(q.orthogonality_error() <= ORTHOGONALITY_TOL);
    }

    #[test]
    fn procrustes_rejects_nan() {
        let x = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert!(matches!(procrustes(&x, &x), Err(Error::Numerical(_))));
    }

    #[test]
    fn procrustes_beats_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = gaussian(30, 4, &mut rng);
        let y = gaussian(30, 4, &mut rng);
        let q = procrustes(&x, &y).unwrap();
        let best = (&x * q.matrix() - &y).norm();
        for _ in 0..100 {
            let other = random_orthogonal(4, &mut rng);
            assert!(best <= (&x * other - &y).norm() + 1e-9);
        }
    }

    #[test]
    fn projection_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = random_orthogonal(4, &mut rng);
        assert!((project_orthogonal(&r).unwrap().matrix() - &r).amax() < 1e-10);
        let two = DMatrix::<f64>::identity(3, 3) * 2.0;
        assert!((project_orthogonal(&two).unwrap().matrix() - DMatrix::<f64>::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn projection_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let m = gaussian(5, 5, &mut rng);
            let once = project_orthogonal(&m).unwrap();
            let twice = project_orthogonal(once.matrix()).unwrap();
            assert!((once.matrix() - twice.matrix()).amax() < 1e-10);
        }
    }

    #[test]
    fn text_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = OrthogonalMap::new(random_orthogonal(3, &mut rng)).unwrap();
        let back = OrthogonalMap::from_text(&q.to_text()).unwrap();
        assert_eq!(back.matrix(), q.matrix());
    }

    #[test]
    fn text_errors() {
        assert!(OrthogonalMap::from_text("").is_err());
        assert!(OrthogonalMap::from_text("2\n1 0\n").is_err());
        assert!(OrthogonalMap::from_text("2\n1 0\n0\n").is_err());
        assert!(OrthogonalMap::from_text("1\n2\n").is_err());
        assert!(OrthogonalMap::from_text("1\n1\n1\n").is_err());
        assert!(OrthogonalMap::from_text("1\n1\n").is_ok());
    }

    #[test]
    fn zero_residual_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = OrthogonalMap::new(random_orthogonal(4, &mut rng)).unwrap();
        let xb = gaussian(6, 4, &mut rng);
        let yb = &xb * q.matrix();
        let p = plan(DMatrix::identity(6, 6) / 6.0);
        let g = objective_gradient(&q, &xb, &yb, &p).unwrap();
        assert!(g.amax() < 1e-12);
        let next = gradient_step(&q, &xb, &yb, &p, 0.1).unwrap();
        assert!((next.matrix() - q.matrix()).amax() < 1e-12);
    }

    #[test]
    fn zero_lr_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = OrthogonalMap::new(random_orthogonal(3, &mut rng)).unwrap();
        let xb = gaussian(4, 3, &mut rng);
        let yb = gaussian(4, 3, &mut rng);
        let p = plan(DMatrix::from_element(4, 4, 1.0 / 16.0));
        assert_eq!(gradient_step(&q, &xb, &yb, &p, 0.0).unwrap().matrix(), q.matrix());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 3;
        let q = OrthogonalMap::new(random_orthogonal(d, &mut rng)).unwrap();
        let xb = gaussian(5, d, &mut rng);
        let yb = gaussian(5, d, &mut rng);
        let p = plan(gaussian(5, 5, &mut rng).map(|v| v.abs() / 25.0));
        let g = objective_gradient(&q, &xb, &yb, &p).unwrap();
        // objective evaluated directly, off the orthogonal manifold
        let f = |m: &DMatrix<f64>| (&xb * m - (p.values() * &yb) * 5.0).norm_squared() / 5.0;
        let h = 1e-6;
        for i in 0..d {
            for j in 0..d {
                let mut plus = q.matrix().clone();
                let mut minus = q.matrix().clone();
                plus[(i, j)] += h;
                minus[(i, j)] -= h;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                assert!((fd - g[(i, j)]).abs() <= 1e-5 * g[(i, j)].abs().max(1.0));
            }
        }
    }

    #[test]
    fn step_shape_errors() {
        let q = OrthogonalMap::identity(2);
        let xb = DMatrix::zeros(3, 2);
        let p = plan(DMatrix::zeros(3, 3));
        assert!(gradient_step(&q, &xb, &DMatrix::zeros(3, 3), &p, 0.1).is_err());
        assert!(gradient_step(&q, &xb, &xb, &plan(DMatrix::zeros(2, 2)), 0.1).is_err());
        assert!(gradient_step(&q, &xb, &xb, &p, -1.0).is_err());
    }
}
