//! Additive two-level Schwarz preconditioner
//! `P⁻¹ r = R₀ᵀ A₀† R₀ r + Σ_i R_iᵀ A_i⁻¹ R_i r`.

use std::collections::HashMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::assembly::{assemble_local_raw, AssemblyError};
use crate::media::PermField;
use crate::mesh::{CoarseLayout, StructuredGrid};
use crate::sparse::{CholeskyFactor, FactorError, SparseSym};
use crate::spectral::{coarse_kernel_vector, CoarseSpace, SpectralError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrecondError {
    #[error("local matrix of element {element} is singular (oversampled box covers the domain)")]
    SingularLocal { element: usize },
    #[error("factorization of local matrix {element} failed: {source}")]
    LocalFactor { element: usize, source: FactorError },
    #[error("factorization of the coarse matrix failed: {0}")]
    CoarseFactor(FactorError),
    #[error("{got} local matrices supplied for {expected} elements")]
    LocalCount { got: usize, expected: usize },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
}

/// Square operator acting on fine vectors.
pub trait LinearOperator: Sync {
    fn order(&self) -> usize;
    fn apply_into(&self, x: &[f64], y: &mut [f64]);
}

impl LinearOperator for SparseSym {
    fn order(&self) -> usize {
        SparseSym::order(self)
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        self.mul_vec_into(x, y)
    }
}

/// Action of `P⁻¹`.
pub trait Preconditioner: Sync {
    fn precondition_into(&self, r: &[f64], z: &mut [f64]);
}

pub struct IdentityPreconditioner;

impl Preconditioner for IdentityPreconditioner {
    fn precondition_into(&self, r: &[f64], z: &mut [f64]) {
        z.copy_from_slice(r);
    }
}

/// Stored factor of one `A_i` with the cells of `K_i^m` it acts on.
#[derive(Debug, Clone)]
pub struct LocalSolver {
    pub element: usize,
    pub indices: Vec<usize>,
    factor: CholeskyFactor,
}

impl LocalSolver {
    pub fn new(element: usize, indices: Vec<usize>, a_i: &SparseSym) -> Result<Self, PrecondError> {
        let factor = a_i
            .cholesky()
            .map_err(|source| PrecondError::LocalFactor { element, source })?;
        Ok(Self {
            element,
            indices,
            factor,
        })
    }

    /// `A_i⁻¹ R_i r` on the local cells.
    pub fn solve_restricted(&self, r: &[f64]) -> Vec<f64> {
        let mut loc: Vec<f64> = self.indices.iter().map(|&g| r[g]).collect();
        self.factor.solve_in_place(&mut loc);
        loc
    }
}

/// Assembles and factors every `A_i`; singular local matrices are rejected.
pub fn factor_locals(grid: &StructuredGrid, perm: &PermField, layout: &CoarseLayout) -> Result<Vec<LocalSolver>, PrecondError> {
    (0..layout.n_elements())
        .into_par_iter()
        .map(|i| {
            let (a_i, faces) = assemble_local_raw(grid, perm, layout, i)?;
            if faces == 0 {
                return Err(PrecondError::SingularLocal { element: i });
            }
            let idx = layout.oversampled[i].global_indices(grid);
            LocalSolver::new(i, idx, &a_i)
        })
        .collect()
}

/// `A₀ = R₀ A R₀ᵀ`. Only pairs of elements within one cell of each other
/// couple; the result is symmetrized.
pub fn assemble_coarse(a: &SparseSym, layout: &CoarseLayout, space: &CoarseSpace) -> SparseSym {
    let grid = &layout.grid;
    let n = a.order();
    let nel = layout.n_elements();
    let local_pos: Vec<HashMap<usize, usize>> = space
        .supports
        .iter()
        .map(|s| s.iter().enumerate().map(|(k, &g)| (g, k)).collect())
        .collect();
    let blocks: Vec<Vec<(usize, usize, f64)>> = (0..nel)
        .into_par_iter()
        .map(|j| {
            let halo = layout.elements[j].grow(1, grid);
            let rows = halo.global_indices(grid);
            let touching: Vec<usize> = (0..nel).filter(|&i| layout.elements[i].intersects(&halo)).collect();
            let mut x = vec![0.0; n];
            let mut out = Vec::new();
            for (c, phi) in space.bases[j].vectors.iter().enumerate() {
                for (&g, &v) in space.supports[j].iter().zip(phi) {
                    x[g] = v;
                }
                // y = A R₀ᵀ e_c on the halo of K_j.
                let y: Vec<(usize, f64)> = rows
                    .iter()
                    .map(|&r| (r, a.row(r).map(|(cc, v)| v * x[cc]).sum::<f64>()))
                    .collect();
                for &i in &touching {
                    for (k, psi) in space.bases[i].vectors.iter().enumerate() {
                        let mut acc = 0.0;
                        for &(g, yv) in &y {
                            if let Some(&p) = local_pos[i].get(&g) {
                                acc += psi[p] * yv;
                            }
                        }
                        out.push((space.offsets[i] + k, space.offsets[j] + c, acc));
                    }
                }
                for &g in &space.supports[j] {
                    x[g] = 0.0;
                }
            }
            out
        })
        .collect();
    let mut entries = Vec::new();
    for (r, c, v) in blocks.into_iter().flatten() {
        entries.push((r, c, 0.5 * v));
        entries.push((c, r, 0.5 * v));
    }
    SparseSym::from_triplets(space.n_coarse(), entries)
}

/// Pseudo-inverse solves with `A₀` through the rank-one shifted matrix
/// `A₀ + σ ẑẑᵀ`, `ẑ = z/‖z‖`, followed by removal of the `ẑ` component.
#[derive(Debug, Clone)]
pub struct CoarseSolver {
    pub a0: SparseSym,
    pub z_hat: Vec<f64>,
    pub shift: f64,
    factor: CholeskyFactor,
}

impl CoarseSolver {
    pub fn new(a0: SparseSym, z: &[f64]) -> Result<Self, PrecondError> {
        let nc = a0.order();
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let z_hat: Vec<f64> = z.iter().map(|v| v / norm).collect();
        let trace = a0.trace();
        let shift = if trace > 0.0 { trace / nc as f64 } else { 1.0 };
        let support: Vec<usize> = (0..nc).filter(|&k| z_hat[k] != 0.0).collect();
        let mut entries: Vec<(usize, usize, f64)> = Vec::with_capacity(a0.nnz() + support.len() * support.len());
        for r in 0..nc {
            entries.extend(a0.row(r).map(|(c, v)| (r, c, v)));
        }
        for &r in &support {
            for &c in &support {
                entries.push((r, c, shift * z_hat[r] * z_hat[c]));
            }
        }
        let shifted = SparseSym::from_triplets(nc, entries);
        let factor = shifted.cholesky().map_err(PrecondError::CoarseFactor)?;
        Ok(Self {
            a0,
            z_hat,
            shift,
            factor,
        })
    }

    /// `A₀† y`.
    pub fn solve(&self, y: &[f64]) -> Vec<f64> {
        let mut x = self.factor.solve(y);
        for _ in 0..2 {
            let c: f64 = x.iter().zip(&self.z_hat).map(|(a, b)| a * b).sum();
            x.iter_mut().zip(&self.z_hat).for_each(|(a, b)| *a -= c * b);
        }
        x
    }
}

/// Two-level preconditioner; immutable after setup.
#[derive(Debug, Clone)]
pub struct TwoLevelPreconditioner {
    pub n: usize,
    pub space: CoarseSpace,
    pub locals: Vec<LocalSolver>,
    pub coarse: CoarseSolver,
    pub kernel: Vec<f64>,
}

impl TwoLevelPreconditioner {
    pub fn from_parts(space: CoarseSpace, locals: Vec<LocalSolver>, a0: SparseSym) -> Result<Self, PrecondError> {
        let kernel = coarse_kernel_vector(&space)?;
        let coarse = CoarseSolver::new(a0, &kernel)?;
        Ok(Self {
            n: space.n_fine,
            space,
            locals,
            coarse,
            kernel,
        })
    }

    pub fn apply(&self, r: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.n];
        self.precondition_into(r, &mut z);
        z
    }

    pub fn n_coarse(&self) -> usize {
        self.space.n_coarse()
    }
}

impl Preconditioner for TwoLevelPreconditioner {
    fn precondition_into(&self, r: &[f64], z: &mut [f64]) {
        let parts: Vec<Vec<f64>> = self.locals.par_iter().map(|l| l.solve_restricted(r)).collect();
        let coarse = self.space.prolong(&self.coarse.solve(&self.space.restrict(r)));
        z.copy_from_slice(&coarse);
        for (l, part) in self.locals.iter().zip(parts) {
            for (&g, v) in l.indices.iter().zip(part) {
                z[g] += v;
            }
        }
    }
}

/// Factors the supplied `A_i` (in element order), assembles and
/// deflation-factors `A₀`.
pub fn setup(
    a: &SparseSym,
    layout: &CoarseLayout,
    space: CoarseSpace,
    locals: Vec<SparseSym>,
) -> Result<TwoLevelPreconditioner, PrecondError> {
    if locals.len() != layout.n_elements() {
        return Err(PrecondError::LocalCount {
            got: locals.len(),
            expected: layout.n_elements(),
        });
    }
    let solvers = locals
        .par_iter()
        .enumerate()
        .map(|(i, a_i)| LocalSolver::new(i, layout.oversampled[i].global_indices(&layout.grid), a_i))
        .collect::<Result<Vec<_>, _>>()?;
    let a0 = assemble_coarse(a, layout, &space);
    TwoLevelPreconditioner::from_parts(space, solvers, a0)
}
