//! Pressure-only systems from velocity elimination on structured grids.
//!
//! Every internal face `e` between cells τ₋, τ₊ couples them with the
//! transmissibility `T_e = κ_e |e|² / |τ|`, where `κ_e` is the harmonic mean
//! of the two cell values. The no-flux boundary contributes nothing; a
//! zero-Dirichlet face of an oversampled box contributes `2 κ_τ |e|² / |τ|`
//! to the diagonal (ghost value at half a cell distance).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::media::PermField;
use crate::mesh::{CellBox, CoarseLayout, MeshError, StructuredGrid};
pub use crate::sparse::SparseSym;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssemblyError {
    #[error("harmonic mean needs positive inputs, got ({0}, {1})")]
    NonPositive(f64, f64),
    #[error("local matrix of element {element} is singular: its oversampled box has no boundary inside the domain")]
    SingularLocal { element: usize },
    #[error("vector length {got} does not match cell count {expected}")]
    Length { got: usize, expected: usize },
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// `2 / (1/k₊ + 1/k₋)`.
pub fn harmonic_face(k_plus: f64, k_minus: f64) -> Result<f64, AssemblyError> {
    if !(k_plus > 0.0 && k_minus > 0.0) {
        return Err(AssemblyError::NonPositive(k_plus, k_minus));
    }
    Ok(2.0 / (1.0 / k_plus + 1.0 / k_minus))
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 / (1.0 / a + 1.0 / b)
}

/// Transmissibility of an internal face normal to `axis`.
pub fn face_transmissibility(grid: &StructuredGrid, axis: usize, k_a: f64, k_b: f64) -> f64 {
    let area = grid.face_area(axis);
    harmonic(k_a, k_b) * area * area / grid.cell_volume()
}

/// Transmissibility between a cell and a zero-Dirichlet face.
pub fn dirichlet_transmissibility(grid: &StructuredGrid, axis: usize, k: f64) -> f64 {
    let area = grid.face_area(axis);
    2.0 * k * area * area / grid.cell_volume()
}

/// Assembles the operator on `bx` (cells in ascending global order). Faces
/// leaving the box into the domain become Dirichlet faces when `dirichlet`
/// is set and are dropped otherwise. Returns the matrix and the number of
/// Dirichlet faces.
fn assemble_box(grid: &StructuredGrid, perm: &PermField, bx: &CellBox, dirichlet: bool) -> (SparseSym, usize) {
    let n = bx.len();
    let mut entries = Vec::with_capacity(n * (1 + 2 * grid.dimension()));
    let mut diag = vec![0.0; n];
    let mut dirichlet_faces = 0usize;
    for (l, c) in bx.cells().enumerate() {
        let kc = perm.at(c);
        for axis in 0..grid.dimension() {
            for upper in [false, true] {
                let Some(nb) = grid.neighbor(c, axis, upper) else {
                    continue;
                };
                if bx.contains(nb) {
                    if upper {
                        let t = face_transmissibility(grid, axis, kc, perm.at(nb));
                        let m = bx.local_index(nb);
                        diag[l] += t;
                        diag[m] += t;
                        entries.push((l, m, -t));
                        entries.push((m, l, -t));
                    }
                } else if dirichlet {
                    diag[l] += dirichlet_transmissibility(grid, axis, kc);
                    dirichlet_faces += 1;
                }
            }
        }
    }
    entries.extend(diag.into_iter().enumerate().map(|(l, d)| (l, l, d)));
    (SparseSym::from_triplets(n, entries), dirichlet_faces)
}

/// Fine no-flux pressure matrix `A`.
pub fn assemble_fine(grid: &StructuredGrid, perm: &PermField) -> SparseSym {
    assemble_box(grid, perm, &grid.whole(), false).0
}

/// Local zero-Dirichlet matrix on `K_i^m` together with its Dirichlet face
/// count; a zero count means the matrix is singular.
pub fn assemble_local_raw(
    grid: &StructuredGrid,
    perm: &PermField,
    layout: &CoarseLayout,
    i: usize,
) -> Result<(SparseSym, usize), AssemblyError> {
    check_element(layout, i)?;
    Ok(assemble_box(grid, perm, &layout.oversampled[i], true))
}

/// Local zero-Dirichlet matrix `A_i` on `K_i^m`; rejects the singular case
/// where `K_i^m` has no boundary inside the domain.
pub fn assemble_local(
    grid: &StructuredGrid,
    perm: &PermField,
    layout: &CoarseLayout,
    i: usize,
) -> Result<SparseSym, AssemblyError> {
    let (a, faces) = assemble_local_raw(grid, perm, layout, i)?;
    if faces == 0 {
        return Err(AssemblyError::SingularLocal { element: i });
    }
    Ok(a)
}

/// `Â_i`: faces with both cells in `K_i` only.
pub fn assemble_interior(
    grid: &StructuredGrid,
    perm: &PermField,
    layout: &CoarseLayout,
    i: usize,
) -> Result<SparseSym, AssemblyError> {
    check_element(layout, i)?;
    Ok(assemble_box(grid, perm, &layout.elements[i], false).0)
}

fn check_element(layout: &CoarseLayout, i: usize) -> Result<(), AssemblyError> {
    if i >= layout.n_elements() {
        return Err(MeshError::BadElement {
            id: i,
            count: layout.n_elements(),
        }
        .into());
    }
    Ok(())
}

/// How the weight `κ̃` of the local mass form is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// `κ̃ = κ`.
    #[default]
    Kappa,
    /// Row lumping of `E_iᵀ A_i E_i`, which dominates it.
    Lumped,
}

impl std::str::FromStr for WeightMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kappa" => Ok(Self::Kappa),
            "lumped" => Ok(Self::Lumped),
            other => Err(format!("unknown weight mode '{other}' (expected kappa|lumped)")),
        }
    }
}

/// Positive diagonal `S_i` with `[S_i]_ss = κ̃|_τ |τ|`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagWeights(pub Vec<f64>);

impl DiagWeights {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Weights `S_i` over the cells of `K_i`.
///
/// In lumped mode each entry is the absolute row sum of `E_iᵀ A_i E_i`:
/// faces to neighbours inside `K_i` count `2 T_e`, faces to neighbours in
/// `K_i^m \ K_i` count `T_e`, Dirichlet faces of `K_i^m` count their
/// boundary transmissibility and no-flux faces nothing. A cell with an
/// empty row (single-cell domain) falls back to `κ|τ|`.
pub fn assemble_weights(
    grid: &StructuredGrid,
    perm: &PermField,
    layout: &CoarseLayout,
    i: usize,
    mode: WeightMode,
) -> Result<DiagWeights, AssemblyError> {
    check_element(layout, i)?;
    let inner = layout.elements[i];
    let outer = layout.oversampled[i];
    let vol = grid.cell_volume();
    let w = inner
        .cells()
        .map(|c| {
            let kc = perm.at(c);
            match mode {
                WeightMode::Kappa => kc * vol,
                WeightMode::Lumped => {
                    let mut s = 0.0;
                    for axis in 0..grid.dimension() {
                        for upper in [false, true] {
                            let Some(nb) = grid.neighbor(c, axis, upper) else {
                                continue;
                            };
                            if inner.contains(nb) {
                                s += 2.0 * face_transmissibility(grid, axis, kc, perm.at(nb));
                            } else if outer.contains(nb) {
                                s += face_transmissibility(grid, axis, kc, perm.at(nb));
                            } else {
                                s += dirichlet_transmissibility(grid, axis, kc);
                            }
                        }
                    }
                    if s > 0.0 {
                        s
                    } else {
                        kc * vol
                    }
                }
            }
        })
        .collect();
    Ok(DiagWeights(w))
}

/// Normal velocities on internal faces, grouped by face orientation. Face
/// `(c, c + e_axis)` is stored at index `c` of the face grid whose extent
/// along `axis` is one less than the cell grid. Positive values point
/// towards `+axis`; boundary faces carry zero and are not stored.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceVelocity {
    pub grid: StructuredGrid,
    pub faces: [Vec<f64>; 3],
}

impl FaceVelocity {
    fn face_dims(grid: &StructuredGrid, axis: usize) -> [usize; 3] {
        let mut d = grid.dims();
        d[axis] -= 1;
        d
    }

    fn face_index(dims: [usize; 3], c: [usize; 3]) -> usize {
        c[0] + dims[0] * (c[1] + dims[1] * c[2])
    }

    /// Velocity on the face between `c` and its `+axis` neighbour.
    pub fn get(&self, axis: usize, c: [usize; 3]) -> f64 {
        let d = Self::face_dims(&self.grid, axis);
        self.faces[axis][Self::face_index(d, c)]
    }

    /// Net outward flux `Σ |e| v_e·n` of every cell.
    pub fn divergence(&self) -> Vec<f64> {
        let g = &self.grid;
        let mut div = vec![0.0; g.n_cells()];
        for axis in 0..3 {
            let d = Self::face_dims(g, axis);
            let area = g.face_area(axis);
            for (f, &v) in self.faces[axis].iter().enumerate() {
                let lower = [f % d[0], (f / d[0]) % d[1], f / (d[0] * d[1])];
                let mut upper = lower;
                upper[axis] += 1;
                div[g.index(lower)] += area * v;
                div[g.index(upper)] -= area * v;
            }
        }
        div
    }

    /// All internal-face values, x faces first, then y, then z.
    pub fn flatten(&self) -> Vec<f64> {
        self.faces.iter().flat_map(|f| f.iter().copied()).collect()
    }
}

/// `v_e = −κ_e |e| [p]_e / |τ|` on every internal face.
pub fn recover_velocity(
    grid: &StructuredGrid,
    perm: &PermField,
    pressure: &[f64],
) -> Result<FaceVelocity, AssemblyError> {
    if pressure.len() != grid.n_cells() {
        return Err(AssemblyError::Length {
            got: pressure.len(),
            expected: grid.n_cells(),
        });
    }
    let vol = grid.cell_volume();
    let faces = [0, 1, 2].map(|axis| {
        let d = FaceVelocity::face_dims(grid, axis);
        let count: usize = d.iter().product();
        let area = grid.face_area(axis);
        (0..count)
            .map(|f| {
                let lower = [f % d[0], (f / d[0]) % d[1], f / (d[0] * d[1])];
                let mut upper = lower;
                upper[axis] += 1;
                let (il, iu) = (grid.index(lower), grid.index(upper));
                let ke = harmonic(perm.get(il), perm.get(iu));
                -ke * area * (pressure[iu] - pressure[il]) / vol
            })
            .collect()
    });
    Ok(FaceVelocity { grid: *grid, faces })
}
