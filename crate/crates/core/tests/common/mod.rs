//! Independent dense oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

use darcy_ddm::media::PermField;
use darcy_ddm::mesh::StructuredGrid;
use darcy_ddm::sparse::SparseSym;

/// Velocity unknowns: one normal component per internal face, in a plain
/// (axis, lower cell) enumeration unrelated to the library's face order.
pub struct FaceList {
    pub faces: Vec<(usize, usize, usize)>, // (axis, lower cell, upper cell)
}

pub fn internal_faces(g: &StructuredGrid) -> FaceList {
    let [nx, ny, nz] = g.dims();
    let id = |i: usize, j: usize, k: usize| i + nx * (j + ny * k);
    let mut faces = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if i + 1 < nx {
                    faces.push((0, id(i, j, k), id(i + 1, j, k)));
                }
                if j + 1 < ny {
                    faces.push((1, id(i, j, k), id(i, j + 1, k)));
                }
                if k + 1 < nz {
                    faces.push((2, id(i, j, k), id(i, j, k + 1)));
                }
            }
        }
    }
    FaceList { faces }
}

/// Lowest-order Raviart–Thomas pieces on boxes with the vertex
/// (trapezoidal) quadrature for the weighted mass form: returns the
/// divergence matrix `B` (cells × faces) and the lumped mass `M̃`.
pub fn mixed_blocks(g: &StructuredGrid, k: &PermField) -> (DMatrix<f64>, DMatrix<f64>) {
    let fl = internal_faces(g);
    let n = g.n_cells();
    let nf = fl.faces.len();
    let d = g.dimension();
    let h = g.spacing();
    let vol: f64 = (0..d).map(|a| h[a]).product();
    let mut b = DMatrix::zeros(n, nf);
    let mut m = DMatrix::zeros(nf, nf);
    for (f, &(axis, lo, hi)) in fl.faces.iter().enumerate() {
        let area: f64 = (0..d).filter(|&a| a != axis).map(|a| h[a]).product();
        // ∫_τ div φ_f = ± |e| for unit normal component on f.
        b[(lo, f)] += area;
        b[(hi, f)] -= area;
    }
    // Vertex quadrature cell by cell: basis f restricted to cell τ has normal
    // component 1 on its own face and 0 on the opposite one.
    for (f, &(axis, lo, hi)) in fl.faces.iter().enumerate() {
        for (f2, &(axis2, lo2, hi2)) in fl.faces.iter().enumerate() {
            if axis2 != axis {
                continue;
            }
            for (cell, side) in [(lo, 1u8), (hi, 0u8)] {
                // side: 1 → face f is the upper face of `cell`.
                let side2 = if lo2 == cell {
                    1u8
                } else if hi2 == cell {
                    0u8
                } else {
                    continue;
                };
                let verts = 1usize << d;
                let mut acc = 0.0;
                for v in 0..verts {
                    let at_upper = (v >> axis) & 1 == 1;
                    let phi = |s: u8| if (s == 1) == at_upper { 1.0 } else { 0.0 };
                    acc += phi(side) * phi(side2);
                }
                m[(f, f2)] += vol / verts as f64 * acc / k.get(cell);
            }
        }
    }
    (b, m)
}

/// `B M̃⁻¹ Bᵀ`.
pub fn oracle_pressure_matrix(g: &StructuredGrid, k: &PermField) -> DMatrix<f64> {
    let (b, m) = mixed_blocks(g, k);
    let minv = m.try_inverse().expect("lumped mass is invertible");
    &b * minv * b.transpose()
}

pub fn to_na(a: &SparseSym) -> DMatrix<f64> {
    let n = a.order();
    DMatrix::from_row_slice(n, n, &a.to_dense())
}

pub fn pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    let scale = a.abs().max();
    a.clone().pseudo_inverse(1e-11 * scale).expect("pseudo-inverse")
}

pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

pub fn vec_rel(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / nb.max(f64::MIN_POSITIVE)
}

pub fn mean_free(v: &[f64]) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - m).collect()
}

pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
