//! Local generalized eigenproblems `Â_i Φ = λ S_i Φ` and the coarse space
//! spanned by their zero-extended low eigenvectors.

use faer::{Mat, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::assembly::{assemble_interior, assemble_weights, AssemblyError, DiagWeights, WeightMode};
use crate::media::PermField;
use crate::mesh::{CoarseLayout, StructuredGrid};
use crate::sparse::{FactorError, SparseSym};

/// Elements up to this many cells use a dense symmetric eigensolve.
pub const DENSE_EIGEN_LIMIT: usize = 5000;
pub const EIGEN_TOL: f64 = 1e-8;
pub const EIGEN_MAX_ITER: usize = 500;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("requested {requested} eigenpairs but the element has {available} cells")]
    TooManyPairs { requested: usize, available: usize },
    #[error("at least one eigenpair is required")]
    ZeroPairs,
    #[error("weights must be positive and match the matrix order {order}")]
    BadWeights { order: usize },
    #[error("eigensolver did not converge within {iterations} iterations (worst residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("first eigenvalue {lambda:.3e} of element {element} is not zero")]
    NonZeroFirst { element: usize, lambda: f64 },
    #[error("adaptive threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
}

/// How many eigenvectors each element contributes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LPolicy {
    /// The same `L★` everywhere.
    Fixed(usize),
    /// Smallest `L_i` with `1/λ_{L_i+1} ≤ eps` (all of them if none).
    Adaptive { eps: f64 },
}

/// Low end of the spectrum of one local pencil.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalEigenBasis {
    pub element: usize,
    /// `λ_1 ≤ … ≤ λ_L`.
    pub eigenvalues: Vec<f64>,
    /// `S_i`-orthonormal eigenvectors on the cells of `K_i`.
    pub vectors: Vec<Vec<f64>>,
    /// `λ_{L+1}`, absent when every mode is kept.
    pub next_eigenvalue: Option<f64>,
    /// `Σ_τ κ̃|τ|` over the element.
    pub weight_total: f64,
}

impl LocalEigenBasis {
    pub fn count(&self) -> usize {
        self.vectors.len()
    }

    pub fn n_cells(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// `1/λ_{L+1}`, or zero when the whole local space is kept.
    pub fn epsilon(&self) -> f64 {
        self.next_eigenvalue.map_or(0.0, |l| 1.0 / l)
    }
}

fn check_inputs(a_hat: &SparseSym, s: &DiagWeights) -> Result<(), SpectralError> {
    let n = a_hat.order();
    if s.len() != n || s.values().iter().any(|&v| !(v > 0.0)) {
        return Err(SpectralError::BadWeights { order: n });
    }
    Ok(())
}

/// `L` smallest eigenpairs of `(Â_i, S_i)`, plus `λ_{L+1}` when it exists.
pub fn solve_local_eigen(a_hat: &SparseSym, s: &DiagWeights, l: usize) -> Result<LocalEigenBasis, SpectralError> {
    check_inputs(a_hat, s)?;
    let n = a_hat.order();
    if l == 0 {
        return Err(SpectralError::ZeroPairs);
    }
    if l > n {
        return Err(SpectralError::TooManyPairs {
            requested: l,
            available: n,
        });
    }
    let want = (l + 1).min(n);
    let (vals, vecs) = lowest_pairs(a_hat, s, want)?;
    Ok(finish(a_hat, s, vals, vecs, l))
}

/// Adaptive count: the smallest `L` with `λ_{L+1} ≥ 1/eps`.
pub fn solve_local_eigen_adaptive(a_hat: &SparseSym, s: &DiagWeights, eps: f64) -> Result<LocalEigenBasis, SpectralError> {
    check_inputs(a_hat, s)?;
    if !(eps > 0.0) {
        return Err(SpectralError::BadThreshold(eps));
    }
    let n = a_hat.order();
    let threshold = 1.0 / eps;
    let mut want = if n <= DENSE_EIGEN_LIMIT { n } else { 16.min(n) };
    loop {
        let (vals, vecs) = lowest_pairs(a_hat, s, want)?;
        // vals[L] is λ_{L+1}; L ≥ 1 because the constant is always kept.
        if let Some(l) = (1..vals.len()).find(|&l| vals[l] >= threshold) {
            return Ok(finish(a_hat, s, vals, vecs, l));
        }
        if want == n {
            return Ok(finish(a_hat, s, vals, vecs, n));
        }
        want = (2 * want).min(n);
    }
}

/// Ascending eigenpairs, `k` of them, of the pencil.
fn lowest_pairs(a_hat: &SparseSym, s: &DiagWeights, k: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>), SpectralError> {
    let n = a_hat.order();
    if n <= DENSE_EIGEN_LIMIT {
        Ok(dense_pairs(a_hat, s, k))
    } else {
        lobpcg_pairs(a_hat, s, k)
    }
}

fn dense_pairs(a_hat: &SparseSym, s: &DiagWeights, k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a_hat.order();
    let isq: Vec<f64> = s.values().iter().map(|v| 1.0 / v.sqrt()).collect();
    let mut h = Mat::<f64>::zeros(n, n);
    for r in 0..n {
        for (c, v) in a_hat.row(r) {
            h[(r, c)] = v * isq[r] * isq[c];
        }
    }
    let eig = h
        .self_adjoint_eigen(Side::Lower)
        .expect("dense symmetric eigensolve");
    let (u, sv) = (eig.U(), eig.S());
    let vals = (0..k).map(|j| sv[j]).collect();
    let vecs = (0..k).map(|j| (0..n).map(|r| u[(r, j)] * isq[r]).collect()).collect();
    (vals, vecs)
}

/// Snaps the first pair to the exact kernel, re-orthonormalizes the rest in
/// the `S` inner product, recomputes Rayleigh quotients, fixes signs and
/// keeps `l` pairs.
fn finish(a_hat: &SparseSym, s: &DiagWeights, vals: Vec<f64>, mut vecs: Vec<Vec<f64>>, l: usize) -> LocalEigenBasis {
    let sw = s.values();
    let total = s.total();
    let n = sw.len();
    let next_eigenvalue = vals.get(l).copied();
    vecs.truncate(l);
    vecs[0] = vec![1.0 / total.sqrt(); n];
    let sdot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).zip(sw).map(|((x, y), w)| x * y * w).sum() };
    for j in 1..vecs.len() {
        let (done, rest) = vecs.split_at_mut(j);
        let v = &mut rest[0];
        for _ in 0..2 {
            for q in done.iter() {
                let c = sdot(v, q);
                v.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
            }
        }
        let nrm = sdot(v, v).sqrt();
        v.iter_mut().for_each(|x| *x /= nrm);
        fix_sign(v);
    }
    let mut eigenvalues = Vec::with_capacity(vecs.len());
    eigenvalues.push(0.0);
    for v in vecs.iter().skip(1) {
        let av = a_hat.mul_vec(v);
        eigenvalues.push(av.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>().max(0.0));
    }
    LocalEigenBasis {
        element: 0,
        eigenvalues,
        vectors: vecs,
        next_eigenvalue,
        weight_total: total,
    }
}

/// Makes the first component of significant size positive.
fn fix_sign(v: &mut [f64]) {
    let big = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-8 * big) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

/// Orthonormalizes `cand` against `basis` and itself (two Gram–Schmidt
/// passes); vectors that lose almost all of their norm are dropped.
fn extend_orthonormal(basis: &mut Vec<Vec<f64>>, cand: Vec<Vec<f64>>) {
    for mut v in cand {
        let start = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if start == 0.0 {
            continue;
        }
        for _ in 0..2 {
            for q in basis.iter() {
                let c = dot(&v, q);
                axpy(-c, q, &mut v);
            }
        }
        let nrm = dot(&v, &v).sqrt();
        if nrm > 1e-10 * start {
            v.iter_mut().for_each(|x| *x /= nrm);
            basis.push(v);
        }
    }
}

/// Symmetric operator `H = S^{-1/2} Â S^{-1/2}` with its shifted inverse.
struct ReducedPencil<'a> {
    a_hat: &'a SparseSym,
    isq: Vec<f64>,
    sq: Vec<f64>,
    shifted: crate::sparse::CholeskyFactor,
}

impl ReducedPencil<'_> {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let t: Vec<f64> = x.iter().zip(&self.isq).map(|(a, b)| a * b).collect();
        let mut y = self.a_hat.mul_vec(&t);
        y.iter_mut().zip(&self.isq).for_each(|(a, b)| *a *= b);
        y
    }

    /// `(H + σI)^{-1} = S^{1/2} (Â + σS)^{-1} S^{1/2}` applied to a block.
    fn precondition(&self, block: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = self.sq.len();
        let k = block.len();
        let mut buf = vec![0.0; n * k];
        for (j, r) in block.iter().enumerate() {
            for i in 0..n {
                buf[j * n + i] = r[i] * self.sq[i];
            }
        }
        self.shifted.solve_many_in_place(&mut buf, k);
        (0..k)
            .map(|j| (0..n).map(|i| buf[j * n + i] * self.sq[i]).collect())
            .collect()
    }
}

/// Blocked preconditioned eigensolver (LOBPCG) for the lowest `k` pairs.
/// The kernel of `H` (`S^{1/2}·1`) is known and deflated; the iteration
/// targets the next `k − 1` pairs with a few guard vectors.
fn lobpcg_pairs(a_hat: &SparseSym, s: &DiagWeights, k: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>), SpectralError> {
    let n = a_hat.order();
    let sw = s.values();
    let sq: Vec<f64> = sw.iter().map(|v| v.sqrt()).collect();
    let isq: Vec<f64> = sq.iter().map(|v| 1.0 / v).collect();
    // Gershgorin bound on ‖H‖.
    let h_norm = (0..n)
        .map(|r| a_hat.row(r).map(|(c, v)| v.abs() * isq[r] * isq[c]).sum::<f64>())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let sigma = 1e-6 * h_norm;
    let shifted = a_hat.add_diagonal(sw, sigma).cholesky()?;
    let op = ReducedPencil {
        a_hat,
        isq: isq.clone(),
        sq: sq.clone(),
        shifted,
    };
    let kernel_norm = sw.iter().sum::<f64>().sqrt();
    let q0: Vec<f64> = sq.iter().map(|v| v / kernel_norm).collect();

    let wanted = k - 1;
    let mut vals = vec![0.0];
    let mut vecs = vec![q0.iter().zip(&isq).map(|(a, b)| a * b).collect::<Vec<f64>>()];
    if wanted == 0 {
        return Ok((vals, vecs));
    }
    let block = (2 * wanted + 4).min(n - 1);
    let deflate = |v: &mut Vec<f64>| {
        for _ in 0..2 {
            let c = dot(v, &q0);
            axpy(-c, &q0, v);
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 ^ n as u64);
    let init: Vec<Vec<f64>> = (0..block)
        .map(|_| {
            let mut v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
            deflate(&mut v);
            v
        })
        .collect();
    let mut x = vec![q0.clone()];
    extend_orthonormal(&mut x, op.precondition(&init));
    let x0 = x.split_off(1);
    let hx0: Vec<Vec<f64>> = x0.iter().map(|v| op.apply(v)).collect();
    let (mut theta, c) = rayleigh_ritz(&x0, &hx0);
    let m = x0.len();
    let mut x = combine(&x0, &c, 0, x0.len(), m);
    let mut hx = combine(&hx0, &c, 0, x0.len(), m);
    let mut p: Vec<Vec<f64>> = Vec::new();

    for iter in 0..=EIGEN_MAX_ITER {
        let resid: Vec<Vec<f64>> = x
            .iter()
            .zip(&hx)
            .zip(&theta)
            .map(|((xv, hv), &t)| {
                let mut r = hv.clone();
                axpy(-t, xv, &mut r);
                r
            })
            .collect();
        let norms: Vec<f64> = resid.iter().map(|r| dot(r, r).sqrt()).collect();
        let worst = norms[..wanted].iter().fold(0.0f64, |a, &b| a.max(b));
        if worst <= EIGEN_TOL * h_norm {
            break;
        }
        if iter == EIGEN_MAX_ITER {
            return Err(SpectralError::NoConvergence {
                iterations: EIGEN_MAX_ITER,
                residual: worst / h_norm,
            });
        }
        let active: Vec<Vec<f64>> = resid
            .into_iter()
            .zip(&norms)
            .filter(|(_, &nr)| nr > 1e-2 * EIGEN_TOL * h_norm)
            .map(|(r, _)| r)
            .collect();
        let mut w = op.precondition(&active);
        w.iter_mut().for_each(&deflate);

        // Rayleigh–Ritz over span[X, W, P].
        let nx = x.len();
        let mut basis = vec![q0.clone()];
        basis.append(&mut x);
        extend_orthonormal(&mut basis, w);
        extend_orthonormal(&mut basis, std::mem::take(&mut p));
        let basis = basis.split_off(1);
        let hb: Vec<Vec<f64>> = basis.iter().map(|v| op.apply(v)).collect();
        let (t, c) = rayleigh_ritz(&basis, &hb);
        x = combine(&basis, &c, 0, basis.len(), m);
        hx = combine(&hb, &c, 0, basis.len(), m);
        // Search direction: the part of the new iterate outside the old X.
        p = combine(&basis, &c, nx, basis.len(), m);
        theta = t[..m].to_vec();
    }
    for j in 0..wanted {
        vals.push(theta[j]);
        vecs.push(x[j].iter().zip(&isq).map(|(a, b)| a * b).collect());
    }
    Ok((vals, vecs))
}

/// Projected eigenproblem on an orthonormal basis; returns ascending Ritz
/// values and the coefficient matrix (column `j` → Ritz vector `j`).
fn rayleigh_ritz(basis: &[Vec<f64>], hb: &[Vec<f64>]) -> (Vec<f64>, Mat<f64>) {
    let m = basis.len();
    let mut g = Mat::<f64>::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let v = 0.5 * (dot(&basis[i], &hb[j]) + dot(&basis[j], &hb[i]));
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    let eig = g.self_adjoint_eigen(Side::Lower).expect("projected eigensolve");
    let vals = (0..m).map(|j| eig.S()[j]).collect();
    (vals, eig.U().to_owned())
}

/// First `cols` Ritz vectors restricted to basis rows `lo..hi`.
fn combine(basis: &[Vec<f64>], c: &Mat<f64>, lo: usize, hi: usize, cols: usize) -> Vec<Vec<f64>> {
    let n = basis.first().map_or(0, Vec::len);
    (0..cols)
        .map(|j| {
            let mut v = vec![0.0; n];
            for r in lo..hi {
                axpy(c[(r, j)], &basis[r], &mut v);
            }
            v
        })
        .collect()
}

/// Assembles `Â_i`, `S_i` and solves element `i` under `policy`.
pub fn element_basis(
    grid: &StructuredGrid,
    perm: &PermField,
    layout: &CoarseLayout,
    i: usize,
    mode: WeightMode,
    policy: LPolicy,
) -> Result<LocalEigenBasis, SpectralError> {
    let a_hat = assemble_interior(grid, perm, layout, i)?;
    let s = assemble_weights(grid, perm, layout, i, mode)?;
    let mut basis = match policy {
        LPolicy::Fixed(l) => solve_local_eigen(&a_hat, &s, l)?,
        LPolicy::Adaptive { eps } => solve_local_eigen_adaptive(&a_hat, &s, eps)?,
    };
    basis.element = i;
    Ok(basis)
}

/// Bases for every element, computed concurrently, returned in element order.
pub fn build_bases(
    grid: &StructuredGrid,
    perm: &PermField,
    layout: &CoarseLayout,
    mode: WeightMode,
    policy: LPolicy,
) -> Result<Vec<LocalEigenBasis>, SpectralError> {
    (0..layout.n_elements())
        .into_par_iter()
        .map(|i| element_basis(grid, perm, layout, i, mode, policy))
        .collect()
}

/// Direct sum of the local spaces; column block `i` of `R₀ᵀ` holds the
/// eigenvectors of element `i`, zero outside `K_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseSpace {
    pub n_fine: usize,
    pub bases: Vec<LocalEigenBasis>,
    /// Global cell ids of each `K_i`.
    pub supports: Vec<Vec<usize>>,
    /// Column offsets per element; `offsets[i]..offsets[i+1]` is block `i`.
    pub offsets: Vec<usize>,
}

pub fn build_coarse_space(layout: &CoarseLayout, bases: Vec<LocalEigenBasis>) -> CoarseSpace {
    assert_eq!(bases.len(), layout.n_elements(), "one basis per element");
    let supports: Vec<Vec<usize>> = layout
        .elements
        .iter()
        .map(|b| b.global_indices(&layout.grid))
        .collect();
    let mut offsets = vec![0];
    for b in &bases {
        offsets.push(offsets.last().unwrap() + b.count());
    }
    CoarseSpace {
        n_fine: layout.grid.n_cells(),
        bases,
        supports,
        offsets,
    }
}

impl CoarseSpace {
    /// `N^c`.
    pub fn n_coarse(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn n_elements(&self) -> usize {
        self.bases.len()
    }

    /// `R₀ᵀ c`.
    pub fn prolong(&self, coarse: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_fine];
        for (i, b) in self.bases.iter().enumerate() {
            let cs = &coarse[self.offsets[i]..self.offsets[i + 1]];
            for (phi, &c) in b.vectors.iter().zip(cs) {
                for (&g, &v) in self.supports[i].iter().zip(phi) {
                    out[g] += c * v;
                }
            }
        }
        out
    }

    /// `R₀ r`.
    pub fn restrict(&self, fine: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_coarse());
        for (i, b) in self.bases.iter().enumerate() {
            for phi in &b.vectors {
                out.push(self.supports[i].iter().zip(phi).map(|(&g, &v)| fine[g] * v).sum());
            }
        }
        out
    }

    /// `R₀ᵀ` as `(fine row, coarse column, value)` entries.
    pub fn prolongation_triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut t = Vec::new();
        for (i, b) in self.bases.iter().enumerate() {
            for (k, phi) in b.vectors.iter().enumerate() {
                let col = self.offsets[i] + k;
                t.extend(self.supports[i].iter().zip(phi).map(|(&g, &v)| (g, col, v)));
            }
        }
        t
    }

    /// Largest `1/λ_{L_i+1}` over elements.
    pub fn epsilon(&self) -> f64 {
        self.bases.iter().map(LocalEigenBasis::epsilon).fold(0.0, f64::max)
    }
}

/// Coarse coordinates of the global constant: `√(Σ_{K_i} κ̃|τ|)` at each
/// element's first column, zero elsewhere.
pub fn coarse_kernel_vector(space: &CoarseSpace) -> Result<Vec<f64>, SpectralError> {
    let mut z = vec![0.0; space.n_coarse()];
    for (i, b) in space.bases.iter().enumerate() {
        let lam = b.eigenvalues[0];
        let top = b.eigenvalues.last().copied().unwrap_or(0.0);
        let tol = if top > 1e-2 { 1e-10 * top } else { 1e-12 };
        if lam.abs() > tol {
            return Err(SpectralError::NonZeroFirst { element: i, lambda: lam });
        }
        let sign = b.vectors[0].first().map_or(1.0, |v| v.signum());
        z[space.offsets[i]] = sign * b.weight_total.sqrt();
    }
    Ok(z)
}
