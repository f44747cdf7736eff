//! Uniform structured grids, coarse non-overlapping partitions and their
//! oversampled (overlapping) extensions.
//!
//! Cells are numbered x-fastest: `idx = i + nx * (j + ny * k)`. A 2D grid is
//! stored as a 3D grid with a single layer in z and unit z-spacing, so cell
//! volumes and face areas reduce to the planar areas and edge lengths.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("grid dimension must be 2 or 3, got {0}")]
    BadDimension(usize),
    #[error("cell count along axis {axis} must be at least 1")]
    EmptyAxis { axis: usize },
    #[error("spacing along axis {axis} must be positive and finite, got {value}")]
    BadSpacing { axis: usize, value: f64 },
    #[error("subdivision count sd must be at least 1")]
    ZeroSubdivision,
    #[error("worker count {workers} cannot be factored into a process grid fitting dims {dims:?}")]
    InfeasibleFactorization { workers: usize, dims: [usize; 3] },
    #[error("coarse element would be empty: axis {axis} has {cells} cells for {elements} elements")]
    EmptyElement {
        axis: usize,
        cells: usize,
        elements: usize,
    },
    #[error("element id {id} out of range (layout has {count} elements)")]
    BadElement { id: usize, count: usize },
}

/// Uniform axis-aligned fine mesh with cell-centered pressure unknowns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructuredGrid {
    dims: [usize; 3],
    spacing: [f64; 3],
    dimension: usize,
}

impl StructuredGrid {
    pub fn new_2d(nx: usize, ny: usize, hx: f64, hy: f64) -> Result<Self, MeshError> {
        Self::build(2, [nx, ny, 1], [hx, hy, 1.0])
    }

    pub fn new_3d(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self, MeshError> {
        Self::build(3, dims, spacing)
    }

    /// Grid on the unit square/cube with `dims.len()` axes.
    pub fn unit(dims: &[usize]) -> Result<Self, MeshError> {
        match *dims {
            [nx, ny] => Self::new_2d(nx, ny, 1.0 / nx.max(1) as f64, 1.0 / ny.max(1) as f64),
            [nx, ny, nz] => Self::new_3d(
                [nx, ny, nz],
                [
                    1.0 / nx.max(1) as f64,
                    1.0 / ny.max(1) as f64,
                    1.0 / nz.max(1) as f64,
                ],
            ),
            _ => Err(MeshError::BadDimension(dims.len())),
        }
    }

    /// Grid from per-axis cell counts and spacings of equal length (2 or 3).
    pub fn from_parts(dims: &[usize], spacing: &[f64]) -> Result<Self, MeshError> {
        match (dims, spacing) {
            (&[nx, ny], &[hx, hy]) => Self::new_2d(nx, ny, hx, hy),
            (&[nx, ny, nz], &[hx, hy, hz]) => Self::new_3d([nx, ny, nz], [hx, hy, hz]),
            _ => Err(MeshError::BadDimension(dims.len())),
        }
    }

    fn build(dimension: usize, dims: [usize; 3], spacing: [f64; 3]) -> Result<Self, MeshError> {
        for axis in 0..3 {
            if dims[axis] == 0 {
                return Err(MeshError::EmptyAxis { axis });
            }
            let h = spacing[axis];
            if !(h.is_finite() && h > 0.0) {
                return Err(MeshError::BadSpacing { axis, value: h });
            }
        }
        Ok(Self {
            dims,
            spacing,
            dimension,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Cell counts padded to three axes (`nz = 1` in 2D).
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    /// Cell counts over the active axes only.
    pub fn active_dims(&self) -> Vec<usize> {
        self.dims[..self.dimension].to_vec()
    }

    pub fn active_spacing(&self) -> Vec<f64> {
        self.spacing[..self.dimension].to_vec()
    }

    pub fn n_cells(&self) -> usize {
        self.dims.iter().product()
    }

    /// |τ|: area in 2D, volume in 3D.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// |e| for a face normal to `axis`.
    pub fn face_area(&self, axis: usize) -> f64 {
        self.cell_volume() / self.spacing[axis]
    }

    pub fn index(&self, c: [usize; 3]) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    pub fn whole(&self) -> CellBox {
        CellBox {
            lo: [0; 3],
            hi: self.dims,
        }
    }

    /// Number of internal faces normal to `axis`.
    pub fn n_internal_faces(&self, axis: usize) -> usize {
        let mut d = self.dims;
        d[axis] -= 1;
        d.iter().product()
    }

    /// Internal face count over all axes.
    pub fn n_all_internal_faces(&self) -> usize {
        (0..3).map(|a| self.n_internal_faces(a)).sum()
    }

    /// Neighbour of cell `c` across the face normal to `axis` on side
    /// `upper` (`true` = +axis). `None` at the domain boundary.
    pub fn neighbor(&self, c: [usize; 3], axis: usize, upper: bool) -> Option<[usize; 3]> {
        let mut n = c;
        if upper {
            if c[axis] + 1 >= self.dims[axis] {
                return None;
            }
            n[axis] += 1;
        } else {
            if c[axis] == 0 {
                return None;
            }
            n[axis] -= 1;
        }
        Some(n)
    }
}

/// Half-open axis-aligned box of cells `lo[a] <= c[a] < hi[a]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl CellBox {
    pub fn shape(&self) -> [usize; 3] {
        [
            self.hi[0] - self.lo[0],
            self.hi[1] - self.lo[1],
            self.hi[2] - self.lo[2],
        ]
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, c: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= c[a] && c[a] < self.hi[a])
    }

    pub fn intersects(&self, other: &CellBox) -> bool {
        (0..3).all(|a| self.lo[a].max(other.lo[a]) < self.hi[a].min(other.hi[a]))
    }

    pub fn intersection(&self, other: &CellBox) -> Option<CellBox> {
        let mut out = *self;
        for a in 0..3 {
            out.lo[a] = self.lo[a].max(other.lo[a]);
            out.hi[a] = self.hi[a].min(other.hi[a]);
            if out.lo[a] >= out.hi[a] {
                return None;
            }
        }
        Some(out)
    }

    /// Grows by `layers` cells along every active axis, clipped to the grid.
    pub fn grow(&self, layers: usize, grid: &StructuredGrid) -> CellBox {
        let dims = grid.dims();
        let mut out = *self;
        for a in 0..grid.dimension() {
            out.lo[a] = self.lo[a].saturating_sub(layers);
            out.hi[a] = (self.hi[a] + layers).min(dims[a]);
        }
        out
    }

    /// Position of a contained cell in this box's ascending global ordering.
    pub fn local_index(&self, c: [usize; 3]) -> usize {
        let s = self.shape();
        (c[0] - self.lo[0]) + s[0] * ((c[1] - self.lo[1]) + s[1] * (c[2] - self.lo[2]))
    }

    pub fn local_coords(&self, local: usize) -> [usize; 3] {
        let s = self.shape();
        [
            self.lo[0] + local % s[0],
            self.lo[1] + (local / s[0]) % s[1],
            self.lo[2] + local / (s[0] * s[1]),
        ]
    }

    /// Cell coordinates in ascending global index order (x fastest).
    pub fn cells(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let lo = self.lo;
        let hi = self.hi;
        (lo[2]..hi[2]).flat_map(move |k| {
            (lo[1]..hi[1]).flat_map(move |j| (lo[0]..hi[0]).map(move |i| [i, j, k]))
        })
    }

    /// Global indices of the contained cells, ascending.
    pub fn global_indices(&self, grid: &StructuredGrid) -> Vec<usize> {
        self.cells().map(|c| grid.index(c)).collect()
    }
}

/// Non-overlapping coarse elements `K_i` and their oversampled boxes `K_i^m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseLayout {
    pub grid: StructuredGrid,
    pub elements: Vec<CellBox>,
    pub oversampled: Vec<CellBox>,
    pub overlap: usize,
    pub sd: usize,
    pub workers: usize,
    /// Per-axis worker grid.
    pub process_grid: [usize; 3],
    /// Per-axis number of coarse elements.
    pub element_grid: [usize; 3],
}

/// Splits `n` cells into `parts` contiguous ranges whose sizes differ by at
/// most one, extra cells going to the low-index ranges.
fn split_range(start: usize, n: usize, parts: usize) -> Vec<(usize, usize)> {
    let base = n / parts;
    let extra = n % parts;
    let mut out = Vec::with_capacity(parts);
    let mut lo = start;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push((lo, lo + len));
        lo += len;
    }
    out
}

/// Factors `workers` into a per-axis process grid: as close to cubical as
/// possible, largest factors on the largest axes, ties in axis length broken
/// so that the factor is non-decreasing in axis order.
pub fn factor_workers(workers: usize, grid: &StructuredGrid) -> Result<[usize; 3], MeshError> {
    let dims = grid.dims();
    let d = grid.dimension();
    let infeasible = MeshError::InfeasibleFactorization { workers, dims };
    if workers == 0 {
        return Err(infeasible);
    }

    // Candidate factor multisets (sorted ascending), then score.
    let mut candidates: Vec<Vec<usize>> = Vec::new();
    for a in 1..=workers {
        if workers % a != 0 {
            continue;
        }
        let rest = workers / a;
        if d == 2 {
            if a <= rest {
                candidates.push(vec![a, rest]);
            }
            continue;
        }
        for b in a..=rest {
            if rest % b != 0 {
                continue;
            }
            let c = rest / b;
            if b <= c {
                candidates.push(vec![a, b, c]);
            }
        }
    }

    // Axes ordered by cell count ascending; equal counts keep axis order.
    let mut axes: Vec<usize> = (0..d).collect();
    axes.sort_by_key(|&a| (dims[a], a));

    let mut best: Option<([usize; 3], (usize, usize))> = None;
    for factors in candidates {
        let mut grid_p = [1usize; 3];
        for (slot, &axis) in axes.iter().enumerate() {
            grid_p[axis] = factors[slot];
        }
        if (0..d).any(|a| grid_p[a] > dims[a]) {
            continue;
        }
        let spread = factors[d - 1] - factors[0];
        let score = (factors[d - 1], spread);
        if best.map_or(true, |(_, s)| score < s) {
            best = Some((grid_p, score));
        }
    }
    best.map(|(g, _)| g).ok_or(infeasible)
}

impl CoarseLayout {
    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    fn check(&self, id: usize) -> Result<(), MeshError> {
        if id < self.elements.len() {
            Ok(())
        } else {
            Err(MeshError::BadElement {
                id,
                count: self.elements.len(),
            })
        }
    }

    /// Sorted global cell ids of `K_i` (`oversampled = false`, the rows of
    /// `C_i`) or `K_i^m` (`oversampled = true`, the rows of `R_i`).
    pub fn restriction_indices(&self, id: usize, oversampled: bool) -> Result<Vec<usize>, MeshError> {
        self.check(id)?;
        let b = if oversampled {
            &self.oversampled[id]
        } else {
            &self.elements[id]
        };
        Ok(b.global_indices(&self.grid))
    }

    /// Positions of the `K_i` cells inside the `K_i^m` list (the embedding `E_i`).
    pub fn extension_positions(&self, id: usize) -> Result<Vec<usize>, MeshError> {
        self.check(id)?;
        let over = self.oversampled[id];
        Ok(self.elements[id].cells().map(|c| over.local_index(c)).collect())
    }

    /// Element owning each fine cell.
    pub fn owner_map(&self) -> Vec<usize> {
        let mut owner = vec![usize::MAX; self.grid.n_cells()];
        for (id, b) in self.elements.iter().enumerate() {
            for c in b.cells() {
                owner[self.grid.index(c)] = id;
            }
        }
        owner
    }
}

/// Partitions `grid` into `sd^d × workers` coarse elements and grows each by
/// `m` fine layers.
pub fn build_layout(
    grid: &StructuredGrid,
    sd: usize,
    workers: usize,
    m: usize,
) -> Result<CoarseLayout, MeshError> {
    if sd == 0 {
        return Err(MeshError::ZeroSubdivision);
    }
    let process_grid = factor_workers(workers, grid)?;
    let dims = grid.dims();
    let d = grid.dimension();

    let mut ranges: Vec<Vec<(usize, usize)>> = Vec::with_capacity(3);
    let mut element_grid = [1usize; 3];
    for axis in 0..3 {
        if axis >= d {
            ranges.push(vec![(0, dims[axis])]);
            continue;
        }
        let count = process_grid[axis] * sd;
        if count > dims[axis] {
            return Err(MeshError::EmptyElement {
                axis,
                cells: dims[axis],
                elements: count,
            });
        }
        let mut axis_ranges = Vec::with_capacity(count);
        for (lo, hi) in split_range(0, dims[axis], process_grid[axis]) {
            axis_ranges.extend(split_range(lo, hi - lo, sd));
        }
        element_grid[axis] = count;
        ranges.push(axis_ranges);
    }

    let mut elements = Vec::new();
    for &(zlo, zhi) in &ranges[2] {
        for &(ylo, yhi) in &ranges[1] {
            for &(xlo, xhi) in &ranges[0] {
                elements.push(CellBox {
                    lo: [xlo, ylo, zlo],
                    hi: [xhi, yhi, zhi],
                });
            }
        }
    }
    let oversampled = elements.iter().map(|b| b.grow(m, grid)).collect();

    Ok(CoarseLayout {
        grid: *grid,
        elements,
        oversampled,
        overlap: m,
        sd,
        workers,
        process_grid,
        element_grid,
    })
}

/// Overlap constant: the largest number of oversampled elements `K_j^m`
/// meeting any `K_i^{m+1}`.
pub fn compute_cos(layout: &CoarseLayout) -> usize {
    layout
        .elements
        .iter()
        .map(|k| {
            let wide = k.grow(layout.overlap + 1, &layout.grid);
            layout
                .oversampled
                .iter()
                .filter(|o| o.intersects(&wide))
                .count()
        })
        .max()
        .unwrap_or(0)
}
