//! Permeability fields and the well-like source term.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::StructuredGrid;

/// Width in cells of one channel stripe inside a periodic tile.
pub const CHANNEL_WIDTH: usize = 2;
/// Side length in cells of the periodic channel tile.
pub const CHANNEL_TILE: usize = 16;

#[derive(Debug, Error)]
pub enum MediaError {
    #[error("channel media need x{} divisible by {CHANNEL_TILE}: dims {dims:?}", if *.three_d { " and z" } else { "" })]
    IndivisibleDims { dims: [usize; 3], three_d: bool },
    #[error("channel count must be in 2..=5, got {0}")]
    BadChannelCount(usize),
    #[error("contrast exponent must be finite and non-negative, got {0}")]
    BadContrast(f64),
    #[error("raster dims {raster:?} do not tile grid dims {grid:?}")]
    ShapeMismatch { raster: [usize; 3], grid: [usize; 3] },
    #[error("malformed raster {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("permeability must be positive and finite (cell {cell}: {value})")]
    NonPositive { cell: usize, value: f64 },
    #[error("field length {got} does not match cell count {expected}")]
    Length { got: usize, expected: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Cell-wise permeability κ.
#[derive(Debug, Clone, PartialEq)]
pub struct PermField {
    pub grid: StructuredGrid,
    values: Vec<f64>,
}

impl PermField {
    pub fn new(grid: StructuredGrid, values: Vec<f64>) -> Result<Self, MediaError> {
        if values.len() != grid.n_cells() {
            return Err(MediaError::Length {
                got: values.len(),
                expected: grid.n_cells(),
            });
        }
        if let Some((cell, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(MediaError::NonPositive { cell, value });
        }
        Ok(Self { grid, values })
    }

    pub fn uniform(grid: StructuredGrid, value: f64) -> Result<Self, MediaError> {
        Self::new(grid, vec![value; grid.n_cells()])
    }

    /// log10 κ drawn uniformly from `[0, log10_contrast]`, seeded.
    pub fn log_uniform(grid: StructuredGrid, log10_contrast: f64, seed: u64) -> Result<Self, MediaError> {
        if !(log10_contrast.is_finite() && log10_contrast >= 0.0) {
            return Err(MediaError::BadContrast(log10_contrast));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..grid.n_cells())
            .map(|_| 10f64.powf(rng.gen::<f64>() * log10_contrast))
            .collect();
        Self::new(grid, values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    pub fn at(&self, c: [usize; 3]) -> f64 {
        self.values[self.grid.index(c)]
    }
}

/// Per-cell integral of the source `f`; entries sum to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceField {
    pub grid: StructuredGrid,
    pub values: Vec<f64>,
}

impl SourceField {
    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn is_compatible(&self) -> bool {
        let l1: f64 = self.values.iter().map(|v| v.abs()).sum();
        self.sum().abs() <= 1e-12 * l1
    }
}

/// First cell of each stripe inside a periodic tile.
pub fn channel_starts(n_channels: usize) -> Vec<usize> {
    (0..n_channels)
        .map(|k| {
            let center = ((2 * k + 1) * CHANNEL_TILE) / (2 * n_channels);
            center.saturating_sub(CHANNEL_WIDTH / 2)
        })
        .collect()
}

/// Whether tile column `x` (0..16) lies inside one of the stripes.
pub fn in_channel(n_channels: usize, x: usize) -> bool {
    let x = x % CHANNEL_TILE;
    channel_starts(n_channels)
        .into_iter()
        .any(|s| s <= x && x < s + CHANNEL_WIDTH)
}

/// Periodic channel medium: stripes of `α = 1` spanning y (and z) inside
/// every 16-cell tile along x, κ = 10^(α·cr).
pub fn channel_medium(grid: &StructuredGrid, n_channels: usize, cr: f64) -> Result<PermField, MediaError> {
    if !(2..=5).contains(&n_channels) {
        return Err(MediaError::BadChannelCount(n_channels));
    }
    if !(cr.is_finite() && cr >= 0.0) {
        return Err(MediaError::BadContrast(cr));
    }
    let dims = grid.dims();
    let three_d = grid.dimension() == 3;
    if dims[0] % CHANNEL_TILE != 0 || (three_d && dims[2] % CHANNEL_TILE != 0) {
        return Err(MediaError::IndivisibleDims { dims, three_d });
    }
    let high = 10f64.powf(cr);
    let values = (0..grid.n_cells())
        .map(|idx| {
            let c = grid.coords(idx);
            if in_channel(n_channels, c[0]) {
                high
            } else {
                1.0
            }
        })
        .collect();
    PermField::new(*grid, values)
}

#[derive(Debug, Deserialize, Serialize)]
struct RasterSidecar {
    dims: Vec<usize>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn bin_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

/// Writes a binary raster (`<name>.bin` raw 0/1 bytes, x fastest) with its
/// `<name>.json` sidecar.
pub fn write_raster(path: &Path, dims: [usize; 3], mask: &[u8]) -> Result<(), MediaError> {
    if mask.len() != dims.iter().product::<usize>() {
        return Err(MediaError::Length {
            got: mask.len(),
            expected: dims.iter().product(),
        });
    }
    fs::write(bin_path(path), mask)?;
    let sidecar = serde_json::to_string(&RasterSidecar { dims: dims.to_vec() })
        .expect("sidecar serializes");
    fs::write(sidecar_path(path), sidecar)?;
    Ok(())
}

/// Reads a binary raster and returns its dims and bytes.
pub fn read_raster(path: &Path) -> Result<([usize; 3], Vec<u8>), MediaError> {
    let malformed = |reason: String| MediaError::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(sidecar_path(path))?;
    let sidecar: RasterSidecar =
        serde_json::from_str(&text).map_err(|e| malformed(format!("sidecar: {e}")))?;
    let dims = match sidecar.dims[..] {
        [x, y] => [x, y, 1],
        [x, y, z] => [x, y, z],
        _ => return Err(malformed(format!("dims must have 2 or 3 entries, got {:?}", sidecar.dims))),
    };
    if dims.iter().any(|&d| d == 0) {
        return Err(malformed("zero-length axis".into()));
    }
    let bytes = fs::read(bin_path(path))?;
    let expected: usize = dims.iter().product();
    if bytes.len() != expected {
        return Err(malformed(format!("{} bytes, expected {expected}", bytes.len())));
    }
    if let Some(pos) = bytes.iter().position(|&b| b > 1) {
        return Err(malformed(format!("byte {pos} is {} (expected 0 or 1)", bytes[pos])));
    }
    Ok((dims, bytes))
}

/// Fracture medium from a binary raster, duplicated periodically over the
/// grid: κ = 10^cr on fracture cells, 1 elsewhere.
pub fn load_raster(path: &Path, grid: &StructuredGrid, cr: f64) -> Result<PermField, MediaError> {
    if !(cr.is_finite() && cr >= 0.0) {
        return Err(MediaError::BadContrast(cr));
    }
    let (rdims, bytes) = read_raster(path)?;
    let gdims = grid.dims();
    if (0..3).any(|a| gdims[a] % rdims[a] != 0) {
        return Err(MediaError::ShapeMismatch {
            raster: rdims,
            grid: gdims,
        });
    }
    let high = 10f64.powf(cr);
    let values = (0..grid.n_cells())
        .map(|idx| {
            let c = grid.coords(idx);
            let r = (c[0] % rdims[0]) + rdims[0] * ((c[1] % rdims[1]) + rdims[1] * (c[2] % rdims[2]));
            if bytes[r] == 1 {
                high
            } else {
                1.0
            }
        })
        .collect();
    PermField::new(*grid, values)
}

/// Four positive wells at the corners of the x–y plane and one negative
/// well at its middle, each spanning the full z extent. Corner cells get +1,
/// middle cells −4, so the total is exactly zero.
pub fn well_source(grid: &StructuredGrid) -> SourceField {
    let [nx, ny, nz] = grid.dims();
    let mut values = vec![0.0; grid.n_cells()];
    let corners = [(0, 0), (nx - 1, 0), (0, ny - 1), (nx - 1, ny - 1)];
    for k in 0..nz {
        for &(i, j) in &corners {
            values[grid.index([i, j, k])] += 1.0;
        }
        values[grid.index([nx / 2, ny / 2, k])] -= 4.0;
    }
    SourceField { grid: *grid, values }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stripes_are_disjoint_and_sized() {
        for n in 2..=5 {
            let starts = channel_starts(n);
            let cells: usize = (0..CHANNEL_TILE).filter(|&x| in_channel(n, x)).count();
            assert_eq!(cells, n * CHANNEL_WIDTH, "n = {n}, starts {starts:?}");
            assert!(starts.iter().all(|&s| s + CHANNEL_WIDTH <= CHANNEL_TILE));
        }
    }

    #[test]
    fn zero_contrast_is_uniform() {
        let g = StructuredGrid::unit(&[16, 8, 16]).unwrap();
        let k = channel_medium(&g, 3, 0.0).unwrap();
        assert!(k.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn channel_fraction_matches_mask() {
        let g = StructuredGrid::unit(&[32, 4, 16]).unwrap();
        let k = channel_medium(&g, 3, 6.0).unwrap();
        let high = k.values().iter().filter(|&&v| v == 1e6).count();
        let low = k.values().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(high + low, g.n_cells());
        // (3 × 2 × 16) / 256 of every tile
        assert_eq!(high * 256, g.n_cells() * 3 * CHANNEL_WIDTH * 16);
    }

    #[test]
    fn channels_are_y_invariant() {
        let g = StructuredGrid::unit(&[16, 5, 16]).unwrap();
        let k = channel_medium(&g, 4, 3.0).unwrap();
        for idx in 0..g.n_cells() {
            let mut c = g.coords(idx);
            let v = k.at(c);
            c[1] = 0;
            assert_eq!(v, k.at(c));
        }
    }

    #[test]
    fn channel_errors() {
        let g = StructuredGrid::unit(&[12, 4, 16]).unwrap();
        assert!(matches!(channel_medium(&g, 3, 1.0), Err(MediaError::IndivisibleDims { .. })));
        let g = StructuredGrid::unit(&[16, 4, 16]).unwrap();
        assert!(matches!(channel_medium(&g, 6, 1.0), Err(MediaError::BadChannelCount(6))));
        assert!(channel_medium(&g, 3, -1.0).is_err());
    }

    #[test]
    fn well_source_small_cases() {
        let g = StructuredGrid::unit(&[4, 4, 4]).unwrap();
        let f = well_source(&g);
        assert_eq!(f.sum(), 0.0);
        assert_eq!(f.values.iter().filter(|&&v| v == 1.0).count(), 16);
        assert_eq!(f.values.iter().filter(|&&v| v == -4.0).count(), 4);

        let g = StructuredGrid::unit(&[3, 3, 1]).unwrap();
        let f = well_source(&g);
        let expected = [1.0, 0.0, 1.0, 0.0, -4.0, 0.0, 1.0, 0.0, 1.0];
        assert_eq!(f.values, expected);
        assert!(f.is_compatible());
    }

    #[test]
    fn rejects_non_positive_perm() {
        let g = StructuredGrid::unit(&[2, 2]).unwrap();
        assert!(PermField::new(g, vec![1.0, 0.0, 1.0, 1.0]).is_err());
        assert!(PermField::new(g, vec![1.0, f64::NAN, 1.0, 1.0]).is_err());
        assert!(PermField::new(g, vec![1.0; 3]).is_err());
    }
}
