//! Run configuration, the timed solve pipeline, parameter sweeps and raw
//! field output.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{assemble_fine, recover_velocity, AssemblyError, WeightMode};
use crate::krylov::{gmres, GmresOptions, KrylovError};
use crate::media::{channel_medium, load_raster, well_source, MediaError, PermField, SourceField};
use crate::mesh::{build_layout, compute_cos, CoarseLayout, MeshError, StructuredGrid};
use crate::precond::{assemble_coarse, factor_locals, PrecondError, TwoLevelPreconditioner};
use crate::spectral::{build_bases, build_coarse_space, LPolicy, SpectralError};
use crate::verify::{audit, AnalysisCertificate, AuditInstance, VerifyError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("field file {path}: {reason}")]
    Field { path: PathBuf, reason: String },
    #[error("mesh: {0}")]
    Mesh(#[from] MeshError),
    #[error("medium: {0}")]
    Media(#[from] MediaError),
    #[error("assembly: {0}")]
    Assembly(#[from] AssemblyError),
    #[error("local eigenproblems: {0}")]
    Spectral(#[from] SpectralError),
    #[error("preconditioner setup: {0}")]
    Precond(#[from] PrecondError),
    #[error("iteration: {0}")]
    Krylov(#[from] KrylovError),
    #[error("audit: {0}")]
    Verify(#[from] VerifyError),
    #[error("thread pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MediumKind {
    #[default]
    Uniform,
    Channel,
    Raster,
    Random,
}

/// Flat run configuration. Every key can also be given as a CLI flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Cells per axis; two entries give a 2D grid.
    pub dims: Vec<usize>,
    /// Cell sizes; defaults to a unit box (`1/n` per axis).
    pub spacing: Option<Vec<f64>>,
    pub medium: MediumKind,
    pub n_channels: usize,
    /// log10 of the high-to-low permeability ratio (channel and raster media).
    pub cr: f64,
    pub raster: Option<PathBuf>,
    /// Seed of the random medium.
    pub seed: u64,
    /// log10 contrast of the random medium.
    pub log10_contrast: f64,
    pub sd: usize,
    pub workers: usize,
    /// Oversampling layers `m`.
    pub overlap: usize,
    pub l_star: usize,
    /// When set, choose `L_i` adaptively with this threshold instead of `l_star`.
    pub eps: Option<f64>,
    pub weights: WeightMode,
    pub tol: f64,
    pub restart: usize,
    pub maxit: usize,
    pub relative: bool,
    pub report: Option<PathBuf>,
    pub audit: bool,
    pub dump_pressure: Option<PathBuf>,
    pub dump_velocity: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dims: vec![16, 16, 16],
            spacing: None,
            medium: MediumKind::Uniform,
            n_channels: 3,
            cr: 0.0,
            raster: None,
            seed: 0,
            log10_contrast: 0.0,
            sd: 2,
            workers: 1,
            overlap: 1,
            l_star: 4,
            eps: None,
            weights: WeightMode::Kappa,
            tol: 1e-5,
            restart: 30,
            maxit: 1000,
            relative: false,
            report: None,
            audit: false,
            dump_pressure: None,
            dump_velocity: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|source| HarnessError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Sets `key` from its textual value. Values are read as TOML; comma
    /// lists become arrays and anything unparsable is taken as a string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let text = if value.contains(',') && !value.trim_start().starts_with('[') {
            format!("[{value}]")
        } else {
            value.to_string()
        };
        let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {text}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(value.to_string()),
        };
        let mut table = toml::Table::try_from(&*self).map_err(|e| HarnessError::Config(e.to_string()))?;
        table.insert(key.to_string(), parsed);
        *self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(format!("{key} = {value}: {e}")))?;
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn grid(&self) -> Result<StructuredGrid, HarnessError> {
        let spacing: Vec<f64> = match &self.spacing {
            Some(s) => s.clone(),
            None => self.dims.iter().map(|&n| 1.0 / n.max(1) as f64).collect(),
        };
        Ok(StructuredGrid::from_parts(&self.dims, &spacing)?)
    }

    pub fn policy(&self) -> LPolicy {
        match self.eps {
            Some(eps) => LPolicy::Adaptive { eps },
            None => LPolicy::Fixed(self.l_star),
        }
    }

    pub fn gmres_options(&self) -> GmresOptions {
        GmresOptions {
            tol: self.tol,
            restart: self.restart,
            maxit: self.maxit,
            relative: self.relative,
        }
    }

    /// Checks everything that can be checked before any heavy work.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if !(self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if self.restart == 0 || self.maxit == 0 {
            return bad("restart and maxit must be positive".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        match self.eps {
            Some(e) if !(e > 0.0) => return bad(format!("eps must be positive, got {e}")),
            None if self.l_star == 0 => return bad("l_star must be at least 1".into()),
            _ => {}
        }
        if self.medium == MediumKind::Raster && self.raster.is_none() {
            return bad("raster medium needs a raster path".into());
        }
        let grid = self.grid()?;
        let layout = build_layout(&grid, self.sd, self.workers, self.overlap)?;
        if self.eps.is_none() {
            if let Some((i, b)) = layout.elements.iter().enumerate().find(|(_, b)| b.len() < self.l_star) {
                return bad(format!("l_star = {} exceeds the {} cells of element {i}", self.l_star, b.len()));
            }
        }
        Ok(())
    }

    pub fn medium(&self, grid: &StructuredGrid) -> Result<PermField, HarnessError> {
        Ok(match self.medium {
            MediumKind::Uniform => PermField::uniform(*grid, 1.0)?,
            MediumKind::Channel => channel_medium(grid, self.n_channels, self.cr)?,
            MediumKind::Raster => {
                let path = self.raster.as_ref().expect("validated raster path");
                load_raster(path, grid, self.cr)?
            }
            MediumKind::Random => PermField::log_uniform(*grid, self.log10_contrast, self.seed)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Timings {
    /// Local factorizations and eigenproblems.
    pub pre0: f64,
    /// Coarse assembly and factorization.
    pub pre1: f64,
    /// GMRES.
    pub ite: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub iter: usize,
    pub converged: bool,
    pub timings: Timings,
    pub dof: usize,
    pub n_elements: usize,
    pub n_coarse: usize,
    pub counts: Vec<usize>,
    pub c_os: usize,
    pub epsilon: f64,
    pub final_residual: f64,
    pub history: Vec<f64>,
    /// `max_τ |div v − (f − r)| / max|f|`, with `r` the final residual.
    pub mass_defect: f64,
    /// `max_τ |div v − f| / max|f|`, bounded by the solver tolerance.
    pub source_defect: f64,
    pub certificate: Option<AnalysisCertificate>,
}

impl RunReport {
    /// The report without wall-clock fields, for reproducibility checks.
    pub fn without_timings(&self) -> RunReport {
        RunReport {
            timings: Timings::default(),
            ..self.clone()
        }
    }
}

pub struct RunOutcome {
    pub report: RunReport,
    pub pressure: Vec<f64>,
    pub velocity: Vec<f64>,
}

/// Relative slack of the discrete mass balance.
pub const MASS_TOL: f64 = 1e-10;

/// Per-cell mass balance of a pressure field: returns
/// `(max|div v − (f − r)|, max|div v − f|)` relative to `max|f|`.
pub fn mass_balance(grid: &StructuredGrid, perm: &PermField, f: &SourceField, p: &[f64]) -> Result<(f64, f64), HarnessError> {
    let a = assemble_fine(grid, perm);
    let div = recover_velocity(grid, perm, p)?.divergence();
    let ap = a.mul_vec(p);
    let fmax = f.values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut defect = 0.0f64;
    let mut raw = 0.0f64;
    for ((d, ap), fv) in div.iter().zip(&ap).zip(&f.values) {
        // f − r = A p.
        defect = defect.max((d - ap).abs());
        raw = raw.max((d - fv).abs());
    }
    Ok((defect / fmax, raw / fmax))
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))
}

/// Assemble, set up the two-level preconditioner and solve with the well
/// source. Work inside runs on a pool of `workers` threads.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome, HarnessError> {
    cfg.validate()?;
    pool(cfg.workers)?.install(|| run_inner(cfg))
}

fn run_inner(cfg: &RunConfig) -> Result<RunOutcome, HarnessError> {
    let start = Instant::now();
    let grid = cfg.grid()?;
    let perm = cfg.medium(&grid)?;
    let layout = build_layout(&grid, cfg.sd, cfg.workers, cfg.overlap)?;
    let a = assemble_fine(&grid, &perm);
    let f = well_source(&grid);

    let t = Instant::now();
    let locals = factor_locals(&grid, &perm, &layout)?;
    let bases = build_bases(&grid, &perm, &layout, cfg.weights, cfg.policy())?;
    let pre0 = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let space = build_coarse_space(&layout, bases);
    let counts = space.bases.iter().map(|b| b.count()).collect();
    let epsilon = space.epsilon();
    let a0 = assemble_coarse(&a, &layout, &space);
    let p = TwoLevelPreconditioner::from_parts(space, locals, a0)?;
    let pre1 = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let (x, solve) = gmres(&a, &f.values, &p, &cfg.gmres_options())?;
    let ite = t.elapsed().as_secs_f64();

    let (mass_defect, source_defect) = mass_balance(&grid, &perm, &f, &x)?;
    let velocity = recover_velocity(&grid, &perm, &x)?.flatten();
    let certificate = if cfg.audit {
        Some(audit(&AuditInstance {
            grid: &grid,
            perm: &perm,
            layout: &layout,
            weights: cfg.weights,
            policy: cfg.policy(),
        })?)
    } else {
        None
    };
    let report = RunReport {
        iter: solve.iterations,
        converged: solve.converged,
        timings: Timings {
            pre0,
            pre1,
            ite,
            total: start.elapsed().as_secs_f64(),
        },
        dof: grid.n_cells(),
        n_elements: layout.n_elements(),
        n_coarse: p.n_coarse(),
        counts,
        c_os: compute_cos(&layout),
        epsilon,
        final_residual: solve.final_residual,
        history: solve.history,
        mass_defect,
        source_defect,
        certificate,
    };
    Ok(RunOutcome {
        report,
        pressure: x,
        velocity,
    })
}

/// Runs and writes the report and any requested field dumps.
pub fn execute(cfg: &RunConfig) -> Result<RunOutcome, HarnessError> {
    let out = run(cfg)?;
    let grid = cfg.grid()?;
    if let Some(path) = &cfg.report {
        write_json(path, &out.report)?;
    }
    if let Some(path) = &cfg.dump_pressure {
        dump_field(path, &grid, &out.pressure, FieldKind::Pressure)?;
    }
    if let Some(path) = &cfg.dump_velocity {
        dump_field(path, &grid, &out.velocity, FieldKind::Velocity)?;
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|source| HarnessError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Standalone audit of the configured instance.
pub fn run_audit(cfg: &RunConfig) -> Result<AnalysisCertificate, HarnessError> {
    cfg.validate()?;
    pool(cfg.workers)?.install(|| {
        let grid = cfg.grid()?;
        let perm = cfg.medium(&grid)?;
        let layout: CoarseLayout = build_layout(&grid, cfg.sd, cfg.workers, cfg.overlap)?;
        Ok(audit(&AuditInstance {
            grid: &grid,
            perm: &perm,
            layout: &layout,
            weights: cfg.weights,
            policy: cfg.policy(),
        })?)
    })
}

/// Parameters a sweep may vary.
pub const SWEEP_AXES: [&str; 5] = ["cr", "l_star", "overlap", "sd", "eps"];

#[derive(Debug)]
pub struct SweepRow {
    pub value: String,
    pub outcome: Result<RunReport, HarnessError>,
}

/// One run per value of `axis`; failures are kept and the sweep goes on.
pub fn sweep(base: &RunConfig, axis: &str, values: &[String]) -> Result<Vec<SweepRow>, HarnessError> {
    let key = if axis == "m" { "overlap" } else { axis };
    if !SWEEP_AXES.contains(&key) {
        return Err(HarnessError::Config(format!(
            "cannot sweep over '{axis}' (expected one of {})",
            SWEEP_AXES.join(", ")
        )));
    }
    Ok(values
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            let outcome = cfg.set(key, v).and_then(|_| run(&cfg)).map(|o| o.report);
            SweepRow {
                value: v.clone(),
                outcome,
            }
        })
        .collect())
}

pub fn write_sweep_csv(path: &Path, axis: &str, rows: &[SweepRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([axis, "iter", "converged", "pre0", "pre1", "ite", "n_coarse", "epsilon", "error"])?;
    for row in rows {
        match &row.outcome {
            Ok(r) => w.write_record([
                row.value.clone(),
                r.iter.to_string(),
                r.converged.to_string(),
                format!("{:.6}", r.timings.pre0),
                format!("{:.6}", r.timings.pre1),
                format!("{:.6}", r.timings.ite),
                r.n_coarse.to_string(),
                format!("{:e}", r.epsilon),
                String::new(),
            ])?,
            Err(e) => w.write_record([
                row.value.clone(),
                String::new(),
                "false".into(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                e.to_string(),
            ])?,
        }
    }
    w.flush().map_err(|source| HarnessError::Write {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    /// One value per cell.
    Pressure,
    /// One value per internal face: x faces, then y, then z.
    Velocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub kind: FieldKind,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn expected_len(grid: &StructuredGrid, kind: FieldKind) -> usize {
    match kind {
        FieldKind::Pressure => grid.n_cells(),
        FieldKind::Velocity => grid.n_all_internal_faces(),
    }
}

/// Raw little-endian `f64` values plus a `<path>.json` header.
pub fn dump_field(path: &Path, grid: &StructuredGrid, values: &[f64], kind: FieldKind) -> Result<(), HarnessError> {
    let expected = expected_len(grid, kind);
    if values.len() != expected {
        return Err(HarnessError::Field {
            path: path.to_path_buf(),
            reason: format!("{} values for a {kind:?} field of {expected}", values.len()),
        });
    }
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|source| HarnessError::Write {
        path: path.to_path_buf(),
        source,
    })?;
    write_json(
        &sidecar(path),
        &FieldHeader {
            dims: grid.dims(),
            spacing: grid.spacing(),
            kind,
        },
    )
}

pub fn read_field(path: &Path) -> Result<(FieldHeader, Vec<f64>), HarnessError> {
    let side = sidecar(path);
    let text = fs::read_to_string(&side).map_err(|source| HarnessError::Read { path: side, source })?;
    let header: FieldHeader = serde_json::from_str(&text)?;
    let bytes = fs::read(path).map_err(|source| HarnessError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() % 8 != 0 {
        return Err(HarnessError::Field {
            path: path.to_path_buf(),
            reason: format!("{} bytes is not a whole number of f64 values", bytes.len()),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, values))
}

/// Reads a field and checks it belongs to `grid`.
pub fn read_field_for(path: &Path, grid: &StructuredGrid, kind: FieldKind) -> Result<Vec<f64>, HarnessError> {
    let (header, values) = read_field(path)?;
    let reason = if header.dims != grid.dims() {
        Some(format!("dims {:?} differ from grid {:?}", header.dims, grid.dims()))
    } else if header.kind != kind {
        Some(format!("holds a {:?} field, expected {kind:?}", header.kind))
    } else if values.len() != expected_len(grid, kind) {
        Some(format!("{} values, expected {}", values.len(), expected_len(grid, kind)))
    } else {
        None
    };
    match reason {
        Some(reason) => Err(HarnessError::Field {
            path: path.to_path_buf(),
            reason,
        }),
        None => Ok(values),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse() {
        let mut c = RunConfig::default();
        c.set("dims", "8,8").unwrap();
        c.set("medium", "channel").unwrap();
        c.set("cr", "4").unwrap();
        c.set("eps", "0.5").unwrap();
        c.set("weights", "lumped").unwrap();
        assert_eq!(c.dims, vec![8, 8]);
        assert_eq!(c.medium, MediumKind::Channel);
        assert_eq!(c.cr, 4.0);
        assert_eq!(c.eps, Some(0.5));
        assert_eq!(c.weights, WeightMode::Lumped);
        assert!(c.set("nonsense", "1").is_err());
        assert!(c.set("sd", "-1").is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let mut c = RunConfig::default();
        c.raster = Some("frac.bin".into());
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn validation() {
        let mut c = RunConfig::default();
        c.tol = 0.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.dims = vec![4, 4, 4];
        c.l_star = 9;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.medium = MediumKind::Raster;
        assert!(c.validate().is_err());
    }

    #[test]
    fn field_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let g = StructuredGrid::unit(&[3, 2, 2]).unwrap();
        let v: Vec<f64> = (0..12).map(|i| (i as f64).exp() * 1e-3).collect();
        let p = dir.path().join("p.bin");
        dump_field(&p, &g, &v, FieldKind::Pressure).unwrap();
        assert_eq!(read_field_for(&p, &g, FieldKind::Pressure).unwrap(), v);
        let other = StructuredGrid::unit(&[2, 3, 2]).unwrap();
        assert!(read_field_for(&p, &other, FieldKind::Pressure).is_err());
        assert!(dump_field(&p, &g, &v[..5], FieldKind::Pressure).is_err());
    }
}
