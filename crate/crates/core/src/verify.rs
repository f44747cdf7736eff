//! Dense audit of the structural facts behind the condition-number bound on
//! small instances, summarised in a JSON certificate.

use faer::{Mat, Side};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{assemble_fine, assemble_interior, assemble_local_raw, assemble_weights, AssemblyError, WeightMode};
use crate::krylov::{estimate_cond_dense, KrylovError, DENSE_COND_LIMIT};
use crate::media::PermField;
use crate::mesh::{compute_cos, CoarseLayout, MeshError, StructuredGrid};
use crate::precond::{assemble_coarse, setup, PrecondError, Preconditioner, TwoLevelPreconditioner};
use crate::sparse::SparseSym;
use crate::spectral::{build_bases, build_coarse_space, LPolicy, SpectralError, EIGEN_TOL};

/// Relative slack for positive semidefiniteness checks.
pub const PSD_TOL: f64 = 1e-10;
/// Slack allowed on the measured spectrum relative to the bound.
pub const BOUND_SLACK: f64 = 0.05;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("order {n} exceeds the dense audit limit {limit}")]
    TooLarge { n: usize, limit: usize },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Precond(#[from] PrecondError),
    #[error(transparent)]
    Krylov(#[from] KrylovError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed value of the checked quantity, scaled as in `detail`.
    pub margin: f64,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, margin: f64, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            margin,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisCertificate {
    pub n: usize,
    pub n_elements: usize,
    pub n_coarse: usize,
    pub weights: WeightMode,
    pub counts: Vec<usize>,
    pub c_os: usize,
    pub epsilon: f64,
    pub theorem_bound: f64,
    /// `σ_max/σ₂` of `P⁻¹A`.
    pub measured_cond: f64,
    /// Smallest and largest nonzero eigenvalue of `P⁻¹A`.
    pub eig_min: f64,
    pub eig_max: f64,
    /// `[1/(2+(8C_os+1)ε), 1+4C_os]`.
    pub eig_interval: [f64; 2],
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

/// `(2 + (8C_os+1)ε)(1 + 4C_os)`.
pub fn theorem_bound(c_os: usize, eps: f64) -> f64 {
    let c = c_os as f64;
    (2.0 + (8.0 * c + 1.0) * eps) * (1.0 + 4.0 * c)
}

/// Ascending eigenvalues of a symmetric dense matrix.
pub fn sym_eigenvalues(m: &Mat<f64>) -> Vec<f64> {
    m.self_adjoint_eigenvalues(Side::Lower).expect("dense symmetric eigenvalues")
}

fn dense(a: &SparseSym) -> Mat<f64> {
    a.to_faer_dense()
}

/// `(λ_min / ‖M‖₂, ‖M‖₂)`.
fn psd_margin(m: &Mat<f64>) -> (f64, f64) {
    let ev = sym_eigenvalues(m);
    let lo = ev.first().copied().unwrap_or(0.0);
    let hi = ev.last().copied().unwrap_or(0.0);
    let norm = lo.abs().max(hi.abs());
    if norm == 0.0 {
        (0.0, 0.0)
    } else {
        (lo / norm, norm)
    }
}

/// Ascending eigenvalues of `P⁻¹A` through the similar symmetric matrix
/// `Lᵀ A L`, `P⁻¹ = L Lᵀ`.
pub fn preconditioned_spectrum(a: &SparseSym, p: &dyn Preconditioner) -> Vec<f64> {
    let n = a.order();
    let mut pinv = Mat::<f64>::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        p.precondition_into(&e, &mut col);
        for i in 0..n {
            pinv[(i, j)] = col[i];
        }
        e[j] = 0.0;
    }
    let sym = Mat::from_fn(n, n, |i, j| 0.5 * (pinv[(i, j)] + pinv[(j, i)]));
    let l = sym.llt(Side::Lower).expect("preconditioner is positive definite").L().to_owned();
    let ad = dense(a);
    let b = l.transpose() * &ad * &l;
    let b = Mat::from_fn(n, n, |i, j| 0.5 * (b[(i, j)] + b[(j, i)]));
    sym_eigenvalues(&b)
}

/// Everything the audit needs about one instance.
#[derive(Debug, Clone)]
pub struct AuditInstance<'a> {
    pub grid: &'a StructuredGrid,
    pub perm: &'a PermField,
    pub layout: &'a CoarseLayout,
    pub weights: WeightMode,
    pub policy: LPolicy,
}

/// Runs every dense check; failures are recorded in the certificate.
pub fn audit(inst: &AuditInstance<'_>) -> Result<AnalysisCertificate, VerifyError> {
    let AuditInstance {
        grid,
        perm,
        layout,
        weights,
        policy,
    } = *inst;
    let n = grid.n_cells();
    if n > DENSE_COND_LIMIT {
        return Err(VerifyError::TooLarge {
            n,
            limit: DENSE_COND_LIMIT,
        });
    }
    let mut checks = Vec::new();
    let a = assemble_fine(grid, perm);
    let a_norm = a.norm_inf();

    // Fine operator: symmetric, constants in the kernel, rank n − 1.
    checks.push(CheckResult::new("fine_symmetric", a.is_symmetric(), 0.0, "exact entrywise symmetry".into()));
    let a1 = a.mul_vec(&vec![1.0; n]);
    let k_res = a1.iter().fold(0.0f64, |m, v| m.max(v.abs())) / a_norm;
    checks.push(CheckResult::new(
        "fine_kernel",
        k_res <= 1e-12,
        k_res,
        "‖A·1‖∞/‖A‖∞".into(),
    ));
    let ev = sym_eigenvalues(&dense(&a));
    let top = ev.last().copied().unwrap_or(0.0);
    let zero_count = ev.iter().filter(|v| v.abs() <= PSD_TOL * top).count();
    checks.push(CheckResult::new(
        "fine_rank",
        zero_count == 1,
        ev.get(1).map_or(0.0, |v| v / top),
        format!("{zero_count} eigenvalues below {PSD_TOL:e}·λ_max; margin is λ_2/λ_max"),
    ));

    // A_i − R_i A R_iᵀ is diagonal and nonnegative.
    let mut worst_psd = f64::INFINITY;
    let mut worst_off = 0.0f64;
    for i in 0..layout.n_elements() {
        let (a_i, _) = assemble_local_raw(grid, perm, layout, i)?;
        let idx = layout.oversampled[i].global_indices(grid);
        let ra = a.principal_submatrix(&idx);
        let d = Mat::from_fn(idx.len(), idx.len(), |r, c| a_i.get(r, c) - ra.get(r, c));
        for r in 0..idx.len() {
            for c in 0..idx.len() {
                if r != c {
                    worst_off = worst_off.max(d[(r, c)].abs() / a_norm);
                }
            }
        }
        worst_psd = worst_psd.min(psd_margin(&d).0);
    }
    checks.push(CheckResult::new(
        "local_dominates_restriction",
        worst_psd >= -PSD_TOL && worst_off <= 1e-14,
        worst_psd,
        format!("min over i of λ_min(A_i − R_iAR_iᵀ)/‖·‖₂; off-diagonal max {worst_off:.1e}"),
    ));

    // Σ C_iᵀ Â_i C_i ≼ A.
    let mut sum = Mat::<f64>::zeros(n, n);
    for i in 0..layout.n_elements() {
        let ah = assemble_interior(grid, perm, layout, i)?;
        let idx = layout.elements[i].global_indices(grid);
        for (r, &gr) in idx.iter().enumerate() {
            for (c, v) in ah.row(r) {
                sum[(gr, idx[c])] += v;
            }
        }
    }
    let diff = &dense(&a) - &sum;
    let (m_part, _) = psd_margin(&diff);
    checks.push(CheckResult::new(
        "partition_below_fine",
        m_part >= -PSD_TOL,
        m_part,
        "λ_min(A − ΣC_iᵀÂ_iC_i)/‖·‖₂".into(),
    ));

    // E_iᵀ A_i E_i ≼ S_i (the lumped construction guarantees this).
    let mut worst_b = f64::INFINITY;
    for i in 0..layout.n_elements() {
        let (a_i, _) = assemble_local_raw(grid, perm, layout, i)?;
        let pos = layout.extension_positions(i)?;
        let s = assemble_weights(grid, perm, layout, i, weights)?;
        let sub = a_i.principal_submatrix(&pos);
        let d = Mat::from_fn(pos.len(), pos.len(), |r, c| {
            let sv = if r == c { s.values()[r] } else { 0.0 };
            sv - sub.get(r, c)
        });
        worst_b = worst_b.min(psd_margin(&d).0);
    }
    let b_applies = weights == WeightMode::Lumped;
    checks.push(CheckResult::new(
        "weights_dominate_local",
        !b_applies || worst_b >= -PSD_TOL,
        worst_b,
        format!(
            "min over i of λ_min(S_i − E_iᵀA_iE_i)/‖·‖₂{}",
            if b_applies { "" } else { " (informational for kappa weights)" }
        ),
    ));

    // Local eigenpairs.
    let bases = build_bases(grid, perm, layout, weights, policy)?;
    let mut worst_orth = 0.0f64;
    let mut worst_res = 0.0f64;
    let mut counts = Vec::with_capacity(bases.len());
    for (i, b) in bases.iter().enumerate() {
        let ah = assemble_interior(grid, perm, layout, i)?;
        let s = assemble_weights(grid, perm, layout, i, weights)?;
        let sw = s.values();
        counts.push(b.count());
        for (p, u) in b.vectors.iter().enumerate() {
            for (q, v) in b.vectors.iter().enumerate() {
                let ip: f64 = u.iter().zip(v).zip(sw).map(|((x, y), w)| x * y * w).sum();
                let target = if p == q { 1.0 } else { 0.0 };
                worst_orth = worst_orth.max((ip - target).abs());
            }
            let au = ah.mul_vec(u);
            let lam = b.eigenvalues[p];
            let res = au.iter().zip(u).zip(sw).map(|((x, y), w)| (x - lam * w * y).powi(2)).sum::<f64>().sqrt();
            let scale = ah.norm_inf().max(f64::MIN_POSITIVE) * u.iter().map(|x| x * x).sum::<f64>().sqrt();
            worst_res = worst_res.max(res / scale);
        }
    }
    checks.push(CheckResult::new(
        "local_eigenpairs",
        worst_orth <= 1e-10 && worst_res <= EIGEN_TOL,
        worst_res,
        format!("max relative residual; S-orthonormality defect {worst_orth:.1e}"),
    ));

    let space = build_coarse_space(layout, bases);
    let eps = space.epsilon();
    let c_os = compute_cos(layout);
    let bound = theorem_bound(c_os, eps);

    // Coarse operator: one-dimensional kernel spanned by z.
    let a0 = assemble_coarse(&a, layout, &space);
    let nc = a0.order();
    let a0_ev = sym_eigenvalues(&dense(&a0));
    let a0_top = a0_ev.last().copied().unwrap_or(0.0);
    let a0_zero = a0_ev.iter().filter(|v| v.abs() <= PSD_TOL * a0_top.max(f64::MIN_POSITIVE)).count();
    let locals = (0..layout.n_elements())
        .map(|i| assemble_local_raw(grid, perm, layout, i).map(|(m, _)| m))
        .collect::<Result<Vec<_>, _>>()?;
    let p: TwoLevelPreconditioner = setup(&a, layout, space, locals)?;
    let a0z = p.coarse.a0.mul_vec(&p.kernel);
    let a0z_norm = a0z.iter().map(|v| v * v).sum::<f64>().sqrt() / p.coarse.a0.norm_inf().max(f64::MIN_POSITIVE);
    checks.push(CheckResult::new(
        "coarse_kernel",
        a0_zero == 1 && a0z_norm <= 1e-8,
        a0z_norm,
        format!("rank(A₀) = {} of {nc}; margin is ‖A₀z‖/‖A₀‖", nc - a0_zero),
    ));

    // Spectrum of P⁻¹A against the bound endpoints.
    let spec = preconditioned_spectrum(&a, &p);
    let nonzero = &spec[1.min(spec.len())..];
    let eig_min = nonzero.first().copied().unwrap_or(0.0);
    let eig_max = nonzero.last().copied().unwrap_or(0.0);
    let lower = 1.0 / (2.0 + (8.0 * c_os as f64 + 1.0) * eps);
    let upper = 1.0 + 4.0 * c_os as f64;
    checks.push(CheckResult::new(
        "spectrum_in_interval",
        eig_min >= lower / (1.0 + BOUND_SLACK) && eig_max <= upper * (1.0 + BOUND_SLACK),
        (eig_min / lower).min(upper / eig_max),
        format!("nonzero eigenvalues in [{eig_min:.4}, {eig_max:.4}] vs [{lower:.4}, {upper:.4}]"),
    ));

    let cond = estimate_cond_dense(&a, &p)?;
    checks.push(CheckResult::new(
        "condition_bound",
        cond.value <= bound * (1.0 + BOUND_SLACK),
        cond.value / bound,
        format!("σ_max/σ₂ = {:.4} vs bound {bound:.4}", cond.value),
    ));

    let passed = checks.iter().all(|c| c.passed);
    Ok(AnalysisCertificate {
        n,
        n_elements: layout.n_elements(),
        n_coarse: nc,
        weights,
        counts,
        c_os,
        epsilon: eps,
        theorem_bound: bound,
        measured_cond: cond.value,
        eig_min,
        eig_max,
        eig_interval: [lower, upper],
        checks,
        passed,
    })
}
