use nalgebra::DMatrix;
use rayon::prelude::*;

use super::{CostMatrix, MarginalWeights, SinkhornParams, TransportPlan};
use crate::{Error, Result};

/// Below this many kernel entries the reductions run on the calling thread.
const PAR_THRESHOLD: usize = 1 << 14;

/// Log scaling vectors `f = log u`, `g = log v`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Potentials {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum StopRule {
    /// `‖P𝟙 − μ‖∞ ≤ tol` (columns are exact after each `g` update).
    Marginal,
    /// `max(‖Δf‖∞, ‖Δg‖∞) < tol`.
    ScalingChange,
}

fn logsumexp(row: &[f64], pot: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for (&a, &b) in row.iter().zip(pot) {
        m = m.max(a + b);
    }
    if !m.is_finite() {
        return m;
    }
    let s: f64 = row.iter().zip(pot).map(|(&a, &b)| (a + b - m).exp()).sum();
    m + s.ln()
}

/// `out[r] = LSE_c(kernel[r][c] + pot[c])` for a row-major kernel.
fn reduce_rows(kernel: &[f64], width: usize, pot: &[f64], out: &mut [f64]) {
    if kernel.len() >= PAR_THRESHOLD {
        out.par_iter_mut()
            .zip(kernel.par_chunks(width))
            .for_each(|(o, row)| *o = logsumexp(row, pot));
    } else {
        out.iter_mut()
            .zip(kernel.chunks(width))
            .for_each(|(o, row)| *o = logsumexp(row, pot));
    }
}

/// Pure log-domain iteration
///
/// `f ← ρ₁(log μ − LSEⱼ(gⱼ − Dᵢⱼ/ε))`, `g ← ρ₂(log ν − LSEᵢ(fᵢ − Dᵢⱼ/ε))`,
/// with `ρ = 1` giving classic Sinkhorn. Never underflows but evaluates an
/// exponential per kernel entry and iteration; [`solve_scaling`] falls back
/// to it when its kernel underflows.
fn solve_log_domain(
    d: &CostMatrix,
    w: &MarginalWeights,
    epsilon: f64,
    (rho1, rho2): (f64, f64),
    tol: f64,
    max_iter: usize,
    rule: StopRule,
    warm: Option<Potentials>,
) -> Result<(TransportPlan, Potentials)> {
    let (ni, nj) = (d.nrows(), d.ncols());
    if w.mu().len() != ni || w.nu().len() != nj {
        return Err(Error::Shape(format!(
            "cost is {ni}x{nj} but marginals have lengths {} and {}",
            w.mu().len(),
            w.nu().len()
        )));
    }

    let dv = d.values();
    let mut lk = vec![0.0; ni * nj];
    let mut lkt = vec![0.0; ni * nj];
    for i in 0..ni {
        for j in 0..nj {
            let v = -dv[(i, j)] / epsilon;
            lk[i * nj + j] = v;
            lkt[j * ni + i] = v;
        }
    }
    let log_mu: Vec<f64> = w.mu().iter().map(|x| x.ln()).collect();
    let log_nu: Vec<f64> = w.nu().iter().map(|x| x.ln()).collect();

    let Potentials { mut f, mut g } = match warm {
        Some(p) if p.f.len() == ni && p.g.len() == nj => p,
        Some(_) => return Err(Error::Shape("warm-start potentials have wrong length".into())),
        None => Potentials {
            f: vec![0.0; ni],
            g: vec![0.0; nj],
        },
    };

    let mut lse_r = vec![0.0; ni];
    let mut lse_c = vec![0.0; nj];
    let mut converged = false;
    let mut iterations = max_iter;

    for it in 1..=max_iter {
        reduce_rows(&lk, nj, &g, &mut lse_r);
        if rule == StopRule::Marginal && it > 1 {
            let err = (0..ni)
                .map(|i| ((f[i] + lse_r[i]).exp() - w.mu()[i]).abs())
                .fold(0.0, f64::max);
            if err <= tol {
                converged = true;
                iterations = it - 1;
                break;
            }
        }
        let mut delta: f64 = 0.0;
        for i in 0..ni {
            let nf = rho1 * (log_mu[i] - lse_r[i]);
            delta = delta.max((nf - f[i]).abs());
            f[i] = nf;
        }
        reduce_rows(&lkt, ni, &f, &mut lse_c);
        for j in 0..nj {
            let ng = rho2 * (log_nu[j] - lse_c[j]);
            delta = delta.max((ng - g[j]).abs());
            g[j] = ng;
        }
        if f.iter().chain(&g).any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite scaling at iteration {it}")));
        }
        if rule == StopRule::ScalingChange && delta < tol {
            converged = true;
            iterations = it;
            break;
        }
    }

    let values = DMatrix::from_fn(ni, nj, |i, j| (lk[i * nj + j] + f[i] + g[j]).exp());
    Ok((
        TransportPlan::from_values(values, converged, iterations),
        Potentials { f, g },
    ))
}

/// Absorb the scalings into the potentials once `|log u|` or `|log v|`
/// exceeds this.
const ABSORB_AT: f64 = 50.0;

/// `kernel[i][j] = exp(fᵢ + gⱼ − Dᵢⱼ/ε)`, row-major.
fn stabilized_kernel(d: &CostMatrix, epsilon: f64, f: &[f64], g: &[f64]) -> Vec<f64> {
    let dv = d.values();
    let nj = d.ncols();
    let mut k = vec![0.0; d.nrows() * nj];
    for (i, row) in k.chunks_mut(nj).enumerate() {
        for (j, e) in row.iter_mut().enumerate() {
            *e = (f[i] + g[j] - dv[(i, j)] / epsilon).exp();
        }
    }
    k
}

/// `out = K·v`.
fn mat_vec(kernel: &[f64], width: usize, v: &[f64], out: &mut [f64]) {
    let dot = |row: &[f64]| row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    if kernel.len() >= PAR_THRESHOLD {
        out.par_iter_mut()
            .zip(kernel.par_chunks(width))
            .for_each(|(o, row)| *o = dot(row));
    } else {
        out.iter_mut().zip(kernel.chunks(width)).for_each(|(o, row)| *o = dot(row));
    }
}

/// `out = Kᵀ·u`, accumulated row by row.
fn mat_t_vec(kernel: &[f64], width: usize, u: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (row, &ui) in kernel.chunks(width).zip(u) {
        out.iter_mut().zip(row).for_each(|(o, &k)| *o += ui * k);
    }
}

/// One damped scaling update in log space. Returns `false` on underflow.
fn update_scalings(
    log_marg: &[f64],
    reduced: &[f64],
    absorbed: &[f64],
    rho: f64,
    log_s: &mut [f64],
    s: &mut [f64],
    delta: &mut f64,
) -> bool {
    for i in 0..s.len() {
        if !(reduced[i] > 0.0 && reduced[i].is_finite()) {
            return false;
        }
        // full scaling exp(absorbed + log_s) = (marg / Σ_j e^{−D/ε}·t_j)^ρ
        let next = rho * (log_marg[i] - reduced[i].ln()) + (rho - 1.0) * absorbed[i];
        *delta = delta.max((next - log_s[i]).abs());
        log_s[i] = next;
        s[i] = next.exp();
    }
    true
}

/// Shared solver for both variants: the log-domain updates of
/// [`solve_log_domain`] carried out as multiplicative scalings of a
/// stabilized kernel.
///
/// Starts from `warm` or from zero potentials (all-ones scalings). The
/// scalings are folded into the kernel whenever they grow past
/// [`ABSORB_AT`] in log space; if a kernel row or column still underflows the
/// remaining iterations run in the pure log domain.
pub(crate) fn solve_scaling(
    d: &CostMatrix,
    w: &MarginalWeights,
    epsilon: f64,
    (rho1, rho2): (f64, f64),
    tol: f64,
    max_iter: usize,
    rule: StopRule,
    warm: Option<Potentials>,
) -> Result<(TransportPlan, Potentials)> {
    let (ni, nj) = (d.nrows(), d.ncols());
    if w.mu().len() != ni || w.nu().len() != nj {
        return Err(Error::Shape(format!(
            "cost is {ni}x{nj} but marginals have lengths {} and {}",
            w.mu().len(),
            w.nu().len()
        )));
    }
    let log_mu: Vec<f64> = w.mu().iter().map(|x| x.ln()).collect();
    let log_nu: Vec<f64> = w.nu().iter().map(|x| x.ln()).collect();

    let Potentials { f: mut alpha, g: mut beta } = match warm {
        Some(p) if p.f.len() == ni && p.g.len() == nj => p,
        Some(_) => return Err(Error::Shape("warm-start potentials have wrong length".into())),
        None => Potentials {
            f: vec![0.0; ni],
            g: vec![0.0; nj],
        },
    };
    let mut kernel = stabilized_kernel(d, epsilon, &alpha, &beta);
    let (mut u, mut v) = (vec![1.0; ni], vec![1.0; nj]);
    let (mut log_u, mut log_v) = (vec![0.0; ni], vec![0.0; nj]);
    let (mut kv, mut ktu) = (vec![0.0; ni], vec![0.0; nj]);
    let mut converged = false;
    let mut iterations = max_iter;

    let potentials = |alpha: &[f64], beta: &[f64], log_u: &[f64], log_v: &[f64]| Potentials {
        f: alpha.iter().zip(log_u).map(|(a, b)| a + b).collect(),
        g: beta.iter().zip(log_v).map(|(a, b)| a + b).collect(),
    };

    for it in 1..=max_iter {
        mat_vec(&kernel, nj, &v, &mut kv);
        if rule == StopRule::Marginal && it > 1 {
            let err = (0..ni).map(|i| (u[i] * kv[i] - w.mu()[i]).abs()).fold(0.0, f64::max);
            if err <= tol {
                converged = true;
                iterations = it - 1;
                break;
            }
        }
        let mut delta: f64 = 0.0;
        let mut ok = update_scalings(&log_mu, &kv, &alpha, rho1, &mut log_u, &mut u, &mut delta);
        if ok {
            mat_t_vec(&kernel, nj, &u, &mut ktu);
            ok = update_scalings(&log_nu, &ktu, &beta, rho2, &mut log_v, &mut v, &mut delta);
        }
        if !ok {
            log::debug!("kernel underflow at iteration {it}; continuing in the log domain");
            let (plan, pot) = solve_log_domain(
                d,
                w,
                epsilon,
                (rho1, rho2),
                tol,
                max_iter - it + 1,
                rule,
                Some(potentials(&alpha, &beta, &log_u, &log_v)),
            )?;
            let used = it - 1 + plan.iterations_used;
            let plan = TransportPlan::from_values(plan.values().clone(), plan.converged, used);
            return Ok((plan, pot));
        }
        if log_u.iter().chain(&log_v).any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite scaling at iteration {it}")));
        }
        if rule == StopRule::ScalingChange && delta < tol {
            converged = true;
            iterations = it;
            break;
        }
        if log_u.iter().chain(&log_v).any(|x| x.abs() > ABSORB_AT) {
            let p = potentials(&alpha, &beta, &log_u, &log_v);
            alpha = p.f;
            beta = p.g;
            log_u.iter_mut().chain(log_v.iter_mut()).for_each(|x| *x = 0.0);
            u.iter_mut().chain(v.iter_mut()).for_each(|x| *x = 1.0);
            kernel = stabilized_kernel(d, epsilon, &alpha, &beta);
        }
    }

    let pot = potentials(&alpha, &beta, &log_u, &log_v);
    let dv = d.values();
    let values = DMatrix::from_fn(ni, nj, |i, j| (pot.f[i] + pot.g[j] - dv[(i, j)] / epsilon).exp());
    Ok((TransportPlan::from_values(values, converged, iterations), pot))
}

/// Entropic optimal transport with hard marginals `P𝟙 = μ`, `Pᵀ𝟙 = ν`.
///
/// Only `epsilon`, `tol` and `max_iter` of `params` are used. If `max_iter`
/// runs out the last iterate is returned with `converged = false`.
pub fn sinkhorn_balanced(
    d: &CostMatrix,
    w: &MarginalWeights,
    params: &SinkhornParams,
) -> Result<TransportPlan> {
    params.validate()?;
    solve_scaling(
        d,
        w,
        params.epsilon,
        (1.0, 1.0),
        params.tol,
        params.max_iter,
        StopRule::Marginal,
        None,
    )
    .map(|(p, _)| p)
}

/// Generalized Sinkhorn for the KL-relaxed problem
///
/// `min_{P ≥ 0} ⟨D,P⟩ + λ₁·KL(P𝟙‖μ) + λ₂·KL(Pᵀ𝟙‖ν) + ε·Σ Pᵢⱼ(log Pᵢⱼ − 1)`.
///
/// The scalings start at one and the iteration stops once neither log-scaling
/// moves by `tol` or more.
pub fn sinkhorn_generalized(
    d: &CostMatrix,
    w: &MarginalWeights,
    params: &SinkhornParams,
) -> Result<TransportPlan> {
    params.validate()?;
    solve_scaling(
        d,
        w,
        params.epsilon,
        params.exponents(),
        params.tol,
        params.max_iter,
        StopRule::ScalingChange,
        None,
    )
    .map(|(p, _)| p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::{exact_emd_bruteforce, kl_divergence};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cost(rows: usize, cols: usize, data: &[f64]) -> CostMatrix {
        CostMatrix::new(DMatrix::from_row_slice(rows, cols, data), None).unwrap()
    }

    fn random_cost(n: usize, lo: f64, hi: f64, seed: u64) -> CostMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CostMatrix::new(DMatrix::from_fn(n, n, |_, _| rng.random_range(lo..hi)), None).unwrap()
    }

    fn params(epsilon: f64, lambda: f64) -> SinkhornParams {
        SinkhornParams {
            epsilon,
            lambda1: lambda,
            lambda2: lambda,
            tol: 1e-9,
            max_iter: 100_000,
        }
    }

    /// Plain multiplicative fixed-point iteration on `u`, `v`, written
    /// independently of the log-domain solver. Only valid when the kernel does
    /// not underflow.
    fn reference_generalized(d: &DMatrix<f64>, mu: &[f64], nu: &[f64], p: &SinkhornParams) -> DMatrix<f64> {
        let (ni, nj) = d.shape();
        let k = d.map(|x| (-x / p.epsilon).exp());
        let (e1, e2) = (p.lambda1 / (p.epsilon + p.lambda1), p.lambda2 / (p.epsilon + p.lambda2));
        let mut u = vec![1.0f64; ni];
        let mut v = vec![1.0f64; nj];
        for _ in 0..1_000_000 {
            let mut change: f64 = 0.0;
            for i in 0..ni {
                let kv: f64 = (0..nj).map(|j| k[(i, j)] * v[j]).sum();
                let nu_i = (mu[i] / kv).powf(e1);
                change = change.max((nu_i.ln() - u[i].ln()).abs());
                u[i] = nu_i;
            }
            for j in 0..nj {
                let ktu: f64 = (0..ni).map(|i| k[(i, j)] * u[i]).sum();
                let nv = (nu[j] / ktu).powf(e2);
                change = change.max((nv.ln() - v[j].ln()).abs());
                v[j] = nv;
            }
            if change < 1e-12 {
                break;
            }
        }
        DMatrix::from_fn(ni, nj, |i, j| u[i] * k[(i, j)] * v[j])
    }

    #[test]
    fn balanced_one_by_one() {
        let d = cost(1, 1, &[0.0]);
        let w = MarginalWeights::uniform(1, 1).unwrap();
        let p = sinkhorn_balanced(&d, &w, &SinkhornParams::default()).unwrap();
        assert!(p.converged);
        assert!((p.values()[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn balanced_two_by_two() {
        let d = cost(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let (exact, perm) = exact_emd_bruteforce(&d).unwrap();
        assert_eq!((exact, perm), (0.0, vec![0, 1]));
        let w = MarginalWeights::uniform(2, 2).unwrap();
        let p = sinkhorn_balanced(&d, &w, &params(0.01, 0.0)).unwrap();
        let expect = [[0.5, 0.0], [0.0, 0.5]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((p.values()[(i, j)] - expect[i][j]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn balanced_near_exact_cost() {
        let d = random_cost(4, 0.0, 1.0, 42);
        let (exact, _) = exact_emd_bruteforce(&d).unwrap();
        let w = MarginalWeights::uniform(4, 4).unwrap();
        // near-ties make convergence at this epsilon slow; the cost is what matters
        let prm = SinkhornParams { tol: 1e-6, ..params(0.001, 0.0) };
        let p = sinkhorn_balanced(&d, &w, &prm).unwrap();
        let rel = (p.cost(&d) - exact).abs() / exact;
        assert!(rel < 0.01, "relative gap {rel}");
    }

    #[test]
    fn balanced_marginals_within_tol() {
        for seed in 0..10 {
            let d = random_cost(5, 0.0, 2.0, seed);
            let w = MarginalWeights::uniform(5, 5).unwrap();
            let prm = SinkhornParams { tol: 1e-6, max_iter: 1_000_000, ..params(0.05, 0.0) };
            let p = sinkhorn_balanced(&d, &w, &prm).unwrap();
            assert!(p.converged);
            assert!((p.marginal_row() - w.mu()).amax() <= prm.tol);
            assert!((p.marginal_col() - w.nu()).amax() <= prm.tol);
            // diagnostics match recomputed sums
            assert!((p.values().column_sum() - p.marginal_row()).amax() <= 1e-12);
        }
    }

    #[test]
    fn balanced_scale_covariance() {
        let d = random_cost(5, 0.0, 1.0, 7);
        let w = MarginalWeights::uniform(5, 5).unwrap();
        let p1 = sinkhorn_balanced(&d, &w, &params(0.05, 0.0)).unwrap();
        let p2 = sinkhorn_balanced(&d.scaled(3.0).unwrap(), &w, &params(0.15, 0.0)).unwrap();
        assert!((p1.values() - p2.values()).amax() < 1e-9);
    }

    #[test]
    fn generalized_one_by_one() {
        let d = cost(1, 1, &[0.0]);
        let w = MarginalWeights::uniform(1, 1).unwrap();
        for eps in [0.01, 0.5, 3.0] {
            let p = sinkhorn_generalized(&d, &w, &params(eps, 1.0)).unwrap();
            assert!(p.converged);
            assert!((p.values()[(0, 0)] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generalized_large_lambda_is_balanced() {
        let d = cost(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let w = MarginalWeights::uniform(2, 2).unwrap();
        let g = sinkhorn_generalized(&d, &w, &params(0.05, 1e6)).unwrap();
        let b = sinkhorn_balanced(&d, &w, &params(0.05, 0.0)).unwrap();
        assert!((g.values() - b.values()).amax() < 1e-3);

        for seed in 0..5 {
            let d = random_cost(5, 0.0, 1.0, 100 + seed);
            let w = MarginalWeights::uniform(5, 5).unwrap();
            let g = sinkhorn_generalized(&d, &w, &params(0.05, 1e6)).unwrap();
            let b = sinkhorn_balanced(&d, &w, &params(0.05, 0.0)).unwrap();
            assert!((g.values() - b.values()).amax() < 1e-3);
        }
    }

    #[test]
    fn generalized_outlier_row_is_dropped() {
        let d = cost(
            3,
            3,
            &[0.1, 0.8, 0.9, 100.0, 120.0, 150.0, 0.7, 0.2, 1.0],
        );
        let w = MarginalWeights::uniform(3, 3).unwrap();
        let prm = params(0.05, 0.001);
        let p = sinkhorn_generalized(&d, &w, &prm).unwrap();
        assert!(p.converged);
        assert!(p.marginal_row()[1] < 0.01 / 3.0);

        // reference iteration on the inlier block: the outlier row's kernel
        // underflows, so it contributes nothing to the other rows and columns
        let inl = DMatrix::from_row_slice(2, 3, &[0.1, 0.8, 0.9, 0.7, 0.2, 1.0]);
        let r = reference_generalized(&inl, &[1.0 / 3.0; 2], &[1.0 / 3.0; 3], &prm);
        for (ri, pi) in [(0, 0), (1, 2)] {
            for j in 0..3 {
                let (a, b) = (r[(ri, j)], p.values()[(pi, j)]);
                assert!((a - b).abs() <= 1e-9 * a.max(1e-300), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn generalized_matches_reference_iteration() {
        for (seed, lambda) in [(1, 0.001), (2, 0.1), (3, 1.0), (4, 10.0)] {
            let d = random_cost(4, 0.0, 0.5, seed);
            let w = MarginalWeights::uniform(4, 4).unwrap();
            let prm = SinkhornParams { tol: 1e-13, ..params(0.1, lambda) };
            let p = sinkhorn_generalized(&d, &w, &prm).unwrap();
            let r = reference_generalized(d.values(), &[0.25; 4], &[0.25; 4], &prm);
            assert!((p.values() - &r).amax() < 1e-9, "lambda {lambda}");
        }
    }

    #[test]
    fn relaxation_monotone_in_lambda() {
        for seed in 0..5 {
            let d = random_cost(5, 0.0, 1.0, 200 + seed);
            let w = MarginalWeights::uniform(5, 5).unwrap();
            let mut last = f64::INFINITY;
            for lambda in [1e-3, 1e-1, 10.0, 1e3] {
                let p = sinkhorn_generalized(&d, &w, &params(0.05, lambda)).unwrap();
                let viol = kl_divergence(p.marginal_row().as_slice(), w.mu().as_slice()).unwrap()
                    + kl_divergence(p.marginal_col().as_slice(), w.nu().as_slice()).unwrap();
                assert!(viol <= last + 1e-12, "lambda {lambda}: {viol} > {last}");
                last = viol;
            }
        }
    }

    #[test]
    fn vanishing_lambda_drops_all_mass() {
        // with λ → 0 the plan tends to the bare kernel exp(−D/ε), so the costs
        // must be large relative to ε for the mass to vanish
        let d = random_cost(5, 1.0, 2.0, 9);
        let w = MarginalWeights::uniform(5, 5).unwrap();
        let p = sinkhorn_generalized(&d, &w, &params(0.05, 1e-8)).unwrap();
        assert!(p.total_mass() <= 1e-3);
    }

    #[test]
    fn plan_is_nonnegative() {
        let d = random_cost(6, -1.0, 1.0, 3);
        let w = MarginalWeights::uniform(6, 6).unwrap();
        let p = sinkhorn_generalized(&d, &w, &params(0.02, 0.5)).unwrap();
        assert!(p.values().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn shape_mismatch() {
        let d = cost(2, 3, &[0.0; 6]);
        let w = MarginalWeights::uniform(2, 2).unwrap();
        assert!(sinkhorn_balanced(&d, &w, &params(0.1, 0.0)).is_err());
    }

    #[test]
    fn max_iter_exhaustion_reports_unconverged() {
        let d = random_cost(5, 0.0, 1.0, 1);
        let w = MarginalWeights::uniform(5, 5).unwrap();
        let prm = SinkhornParams { max_iter: 2, tol: 1e-15, ..params(0.001, 0.001) };
        let p = sinkhorn_generalized(&d, &w, &prm).unwrap();
        assert!(!p.converged);
        assert_eq!(p.iterations_used, 2);
    }

    #[test]
    fn scaling_solver_matches_log_domain() {
        for (seed, eps, lambda) in [(1, 0.05, 0.001), (2, 0.05, 1e6), (3, 0.01, 0.5), (4, 0.2, f64::INFINITY)] {
            let d = random_cost(7, -1.0, 1.0, seed);
            let w = MarginalWeights::uniform(7, 7).unwrap();
            let rho = params(eps, lambda).exponents();
            let rule = StopRule::ScalingChange;
            let (a, pa) = solve_scaling(&d, &w, eps, rho, 1e-10, 100_000, rule, None).unwrap();
            let (b, pb) = solve_log_domain(&d, &w, eps, rho, 1e-10, 100_000, rule, None).unwrap();
            assert!((a.values() - b.values()).amax() <= 1e-9 * b.values().amax().max(1.0));
            assert_eq!(a.iterations_used, b.iterations_used);
            assert!(pa.f.iter().zip(&pb.f).all(|(x, y)| (x - y).abs() < 1e-7));
        }
    }

    #[test]
    fn underflowing_kernel_falls_back() {
        // exp(−2/0.001) underflows; the answer must still be the balanced plan
        let d = cost(2, 2, &[2.0, 2.5, 2.5, 2.0]);
        let w = MarginalWeights::uniform(2, 2).unwrap();
        let p = sinkhorn_balanced(&d, &w, &params(0.001, 0.0)).unwrap();
        assert!(p.converged);
        assert!((p.values()[(0, 0)] - 0.5).abs() < 1e-6);
        assert!((p.values()[(1, 1)] - 0.5).abs() < 1e-6);
        let (_, lp) = solve_log_domain(&d, &w, 0.001, (1.0, 1.0), 1e-9, 1000, StopRule::Marginal, None).unwrap();
        assert!(lp.f.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn absorption_keeps_large_scalings_finite() {
        // an offset of 20 puts the potentials near 400, forcing absorptions;
        // balanced plans ignore constant shifts
        let base = random_cost(6, 0.0, 1.0, 9);
        let shifted = CostMatrix::new(base.values().add_scalar(20.0), None).unwrap();
        let w = MarginalWeights::uniform(6, 6).unwrap();
        let prm = SinkhornParams { tol: 1e-10, ..params(0.05, 0.0) };
        let p = sinkhorn_balanced(&shifted, &w, &prm).unwrap();
        let q = sinkhorn_balanced(&base, &w, &prm).unwrap();
        assert!(p.converged && q.converged);
        assert!((p.values() - q.values()).amax() < 1e-9);
    }
}
