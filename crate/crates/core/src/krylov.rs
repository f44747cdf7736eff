//! Restarted GMRES with right preconditioning for the singular but
//! consistent pressure system, and condition-number estimates of `P⁻¹A`.

use faer::{Mat, Side};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::precond::{LinearOperator, Preconditioner};

/// Largest order for which `P⁻¹A` is formed explicitly.
pub const DENSE_COND_LIMIT: usize = 20000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KrylovError {
    #[error("right-hand side has length {got}, operator order is {expected}")]
    Length { got: usize, expected: usize },
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("restart length must be positive")]
    BadRestart,
    #[error("non-finite value encountered at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("order {n} exceeds the dense limit {limit}; use the iterative estimate")]
    TooLarge { n: usize, limit: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmresOptions {
    pub tol: f64,
    pub restart: usize,
    pub maxit: usize,
    /// Stop on `‖r‖ ≤ tol·‖b‖` instead of `‖r‖ ≤ tol`.
    pub relative: bool,
}

impl Default for GmresOptions {
    fn default() -> Self {
        Self {
            tol: 1e-5,
            restart: 30,
            maxit: 1000,
            relative: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// `‖b − Ax_k‖₂` for `k = 0..=iterations` (the Arnoldi estimate inside a
    /// cycle, which equals the true residual in exact arithmetic).
    pub history: Vec<f64>,
    pub converged: bool,
    /// True residual norm of the returned solution.
    pub final_residual: f64,
    pub relative_residual: f64,
    /// Norm of the mean-free right-hand side.
    pub rhs_norm: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn remove_mean(v: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
}

fn residual(a: &dyn LinearOperator, b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut r = vec![0.0; b.len()];
    a.apply_into(x, &mut r);
    r.iter_mut().zip(b).for_each(|(r, b)| *r = b - *r);
    r
}

/// Solves `A x = b` from a zero initial guess.
pub fn gmres(
    a: &dyn LinearOperator,
    b: &[f64],
    m: &dyn Preconditioner,
    opts: &GmresOptions,
) -> Result<(Vec<f64>, SolveReport), KrylovError> {
    gmres_with_guess(a, b, m, opts, None)
}

/// GMRES(restart) on `A M y = b`, `x = M y`. The right-hand side is
/// projected to zero mean first and the returned `x` has zero mean.
pub fn gmres_with_guess(
    a: &dyn LinearOperator,
    b: &[f64],
    m: &dyn Preconditioner,
    opts: &GmresOptions,
    x0: Option<&[f64]>,
) -> Result<(Vec<f64>, SolveReport), KrylovError> {
    let n = a.order();
    if b.len() != n {
        return Err(KrylovError::Length { got: b.len(), expected: n });
    }
    if let Some(x0) = x0 {
        if x0.len() != n {
            return Err(KrylovError::Length { got: x0.len(), expected: n });
        }
    }
    if !(opts.tol > 0.0) {
        return Err(KrylovError::BadTolerance(opts.tol));
    }
    if opts.restart == 0 {
        return Err(KrylovError::BadRestart);
    }
    let mut rhs = b.to_vec();
    remove_mean(&mut rhs);
    let rhs_norm = norm(&rhs);
    let target = if opts.relative { opts.tol * rhs_norm } else { opts.tol };

    let mut x = x0.map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    let mut r = residual(a, &rhs, &x);
    let mut beta = norm(&r);
    let mut history = vec![beta];
    let mut iters = 0usize;
    let k = opts.restart;

    while beta > target && iters < opts.maxit {
        if !beta.is_finite() {
            return Err(KrylovError::NonFinite { iteration: iters });
        }
        let mut v: Vec<Vec<f64>> = Vec::with_capacity(k + 1);
        let mut z: Vec<Vec<f64>> = Vec::with_capacity(k);
        v.push(r.iter().map(|x| x / beta).collect());
        // Column-major Hessenberg, (k+1) × k.
        let mut h = vec![vec![0.0; k + 1]; k];
        let mut cs = vec![0.0; k];
        let mut sn = vec![0.0; k];
        let mut g = vec![0.0; k + 1];
        g[0] = beta;
        let mut cols = 0;
        for j in 0..k {
            let mut zj = vec![0.0; n];
            m.precondition_into(&v[j], &mut zj);
            let mut w = vec![0.0; n];
            a.apply_into(&zj, &mut w);
            z.push(zj);
            for (i, vi) in v.iter().enumerate() {
                let hij = dot(&w, vi);
                h[j][i] = hij;
                w.iter_mut().zip(vi).for_each(|(w, v)| *w -= hij * v);
            }
            let hn = norm(&w);
            h[j][j + 1] = hn;
            for i in 0..j {
                let (a1, a2) = (h[j][i], h[j][i + 1]);
                h[j][i] = cs[i] * a1 + sn[i] * a2;
                h[j][i + 1] = -sn[i] * a1 + cs[i] * a2;
            }
            let (a1, a2) = (h[j][j], h[j][j + 1]);
            let rho = a1.hypot(a2);
            if rho == 0.0 {
                cs[j] = 1.0;
                sn[j] = 0.0;
            } else {
                cs[j] = a1 / rho;
                sn[j] = a2 / rho;
            }
            h[j][j] = rho;
            h[j][j + 1] = 0.0;
            g[j + 1] = -sn[j] * g[j];
            g[j] *= cs[j];
            iters += 1;
            cols = j + 1;
            let est = g[j + 1].abs();
            if !est.is_finite() {
                return Err(KrylovError::NonFinite { iteration: iters });
            }
            history.push(est);
            if est <= target || iters >= opts.maxit || hn <= 1e-14 * rho.max(f64::MIN_POSITIVE) {
                break;
            }
            v.push(w.iter().map(|x| x / hn).collect());
        }
        // Back substitution for the least-squares coefficients.
        let mut y = vec![0.0; cols];
        for i in (0..cols).rev() {
            let mut s = g[i];
            for (l, yl) in y.iter().enumerate().skip(i + 1) {
                s -= h[l][i] * yl;
            }
            y[i] = if h[i][i] != 0.0 { s / h[i][i] } else { 0.0 };
        }
        for (yi, zi) in y.iter().zip(&z) {
            x.iter_mut().zip(zi).for_each(|(x, z)| *x += yi * z);
        }
        r = residual(a, &rhs, &x);
        let new_beta = norm(&r);
        let stalled = new_beta >= beta;
        beta = new_beta;
        if stalled && beta > target && cols < k && iters < opts.maxit {
            // Invariant subspace reached without meeting the target; another
            // cycle from the same point would repeat itself.
            break;
        }
    }
    remove_mean(&mut x);
    let final_residual = norm(&residual(a, &rhs, &x));
    let report = SolveReport {
        iterations: iters,
        converged: final_residual <= target,
        relative_residual: if rhs_norm > 0.0 { final_residual / rhs_norm } else { 0.0 },
        final_residual,
        history,
        rhs_norm,
    };
    Ok((x, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CondEstimate {
    /// Best estimate of `σ_max/σ₂` (dense) or of the Ritz ratio (iterative).
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub largest: f64,
    pub second_smallest: f64,
}

/// `σ_max(P⁻¹A)/σ₂(P⁻¹A)` from the full singular spectrum of the explicitly
/// formed operator. A single nonzero singular value counts as both.
pub fn estimate_cond_dense(a: &dyn LinearOperator, p: &dyn Preconditioner) -> Result<CondEstimate, KrylovError> {
    let n = a.order();
    if n > DENSE_COND_LIMIT {
        return Err(KrylovError::TooLarge {
            n,
            limit: DENSE_COND_LIMIT,
        });
    }
    let mut op = Mat::<f64>::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut ae = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        a.apply_into(&e, &mut ae);
        p.precondition_into(&ae, &mut col);
        for i in 0..n {
            op[(i, j)] = col[i];
        }
        e[j] = 0.0;
    }
    let sv = op.singular_values().expect("dense singular values");
    let mut asc = sv.clone();
    asc.sort_by(f64::total_cmp);
    let largest = *asc.last().unwrap_or(&0.0);
    let second = asc[1.min(asc.len().saturating_sub(1))];
    let value = largest / second;
    Ok(CondEstimate {
        value,
        lower: value,
        upper: value,
        largest,
        second_smallest: second,
    })
}

/// Lanczos estimate from `steps` preconditioned conjugate-gradient steps on
/// a mean-free right-hand side. Extreme Ritz values of the CG tridiagonal
/// approximate the extreme nonzero eigenvalues of `P⁻¹A` from inside; the
/// residual bounds `|β_k s_k|` widen them into `[lower, upper]`.
pub fn estimate_cond_lanczos(
    a: &dyn LinearOperator,
    p: &dyn Preconditioner,
    steps: usize,
    seed_rhs: &[f64],
) -> Result<CondEstimate, KrylovError> {
    let n = a.order();
    if seed_rhs.len() != n {
        return Err(KrylovError::Length {
            got: seed_rhs.len(),
            expected: n,
        });
    }
    let mut r = seed_rhs.to_vec();
    remove_mean(&mut r);
    let mut zv = vec![0.0; n];
    p.precondition_into(&r, &mut zv);
    let mut d = zv.clone();
    let mut rz = dot(&r, &zv);
    let (mut alphas, mut betas) = (Vec::new(), Vec::new());
    let mut ad = vec![0.0; n];
    let r0 = rz.abs().sqrt();
    for it in 0..steps {
        a.apply_into(&d, &mut ad);
        let dad = dot(&d, &ad);
        if !(dad > 0.0) || !dad.is_finite() {
            if !dad.is_finite() {
                return Err(KrylovError::NonFinite { iteration: it });
            }
            break;
        }
        let alpha = rz / dad;
        r.iter_mut().zip(&ad).for_each(|(r, a)| *r -= alpha * a);
        p.precondition_into(&r, &mut zv);
        let rz_new = dot(&r, &zv);
        let beta = rz_new / rz;
        alphas.push(alpha);
        betas.push(beta);
        if rz_new.abs().sqrt() <= 1e-14 * r0 {
            break;
        }
        d.iter_mut().zip(&zv).for_each(|(d, z)| *d = z + beta * *d);
        rz = rz_new;
    }
    let k = alphas.len();
    if k == 0 {
        return Ok(CondEstimate {
            value: 1.0,
            lower: 1.0,
            upper: 1.0,
            largest: 0.0,
            second_smallest: 0.0,
        });
    }
    let mut t = Mat::<f64>::zeros(k, k);
    for j in 0..k {
        let prev = if j == 0 { 0.0 } else { betas[j - 1] / alphas[j - 1] };
        t[(j, j)] = 1.0 / alphas[j] + prev;
        if j + 1 < k {
            let off = betas[j].sqrt() / alphas[j];
            t[(j, j + 1)] = off;
            t[(j + 1, j)] = off;
        }
    }
    let eig = t.self_adjoint_eigen(Side::Lower).expect("tridiagonal eigensolve");
    let next_off = betas[k - 1].sqrt() / alphas[k - 1];
    let lo = eig.S()[0];
    let hi = eig.S()[k - 1];
    let err_lo = (next_off * eig.U()[(k - 1, 0)]).abs();
    let err_hi = (next_off * eig.U()[(k - 1, k - 1)]).abs();
    let value = hi / lo;
    Ok(CondEstimate {
        value,
        lower: value,
        upper: (hi + err_hi) / (lo - err_lo).max(lo * 1e-3),
        largest: hi,
        second_smallest: lo,
    })
}
