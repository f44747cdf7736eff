mod common;

use std::path::PathBuf;
use std::process::Command;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use darcy_ddm::assembly::{assemble_fine, assemble_interior, assemble_local, assemble_weights, WeightMode};
use darcy_ddm::harness::{execute, read_field_for, run, sweep, write_sweep_csv, FieldKind, MediumKind, RunConfig};
use darcy_ddm::krylov::{gmres, GmresOptions};
use darcy_ddm::media::{channel_medium, PermField};
use darcy_ddm::mesh::{build_layout, compute_cos, StructuredGrid};
use darcy_ddm::precond::{assemble_coarse, factor_locals, IdentityPreconditioner, TwoLevelPreconditioner};
use darcy_ddm::sparse::SparseSym;
use darcy_ddm::spectral::{build_bases, build_coarse_space, coarse_kernel_vector, element_basis, LPolicy};
use darcy_ddm::verify::theorem_bound;

use common::{pinv, to_na, vec_rel};

fn two_level(grid: &StructuredGrid, perm: &PermField, sd: usize, m: usize, l: usize) -> (SparseSym, TwoLevelPreconditioner) {
    let layout = build_layout(grid, sd, 1, m).unwrap();
    let a = assemble_fine(grid, perm);
    let locals = factor_locals(grid, perm, &layout).unwrap();
    let bases = build_bases(grid, perm, &layout, WeightMode::Kappa, LPolicy::Fixed(l)).unwrap();
    let space = build_coarse_space(&layout, bases);
    let a0 = assemble_coarse(&a, &layout, &space);
    (a, TwoLevelPreconditioner::from_parts(space, locals, a0).unwrap())
}

#[test]
fn preconditioner_matches_dense_sum_of_pseudo_inverses() {
    let grid = StructuredGrid::unit(&[10, 8]).unwrap();
    let perm = PermField::log_uniform(grid, 3.0, 11).unwrap();
    let layout = build_layout(&grid, 2, 1, 1).unwrap();
    let (a, p) = two_level(&grid, &perm, 2, 1, 3);
    let n = grid.n_cells();

    let mut r0t = DMatrix::zeros(n, p.n_coarse());
    for (row, col, v) in p.space.prolongation_triplets() {
        r0t[(row, col)] = v;
    }
    let a0 = r0t.transpose() * to_na(&a) * &r0t;
    let mut dense = &r0t * pinv(&a0) * r0t.transpose();
    for i in 0..layout.n_elements() {
        let ai = to_na(&assemble_local(&grid, &perm, &layout, i).unwrap());
        let inv = ai.try_inverse().unwrap();
        let idx = layout.restriction_indices(i, true).unwrap();
        for (r, &gr) in idx.iter().enumerate() {
            for (c, &gc) in idx.iter().enumerate() {
                dense[(gr, gc)] += inv[(r, c)];
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let want = &dense * DVector::from_column_slice(&r);
        assert!(vec_rel(&p.apply(&r), want.as_slice()) < 1e-9);
    }
}

#[test]
fn gmres_solves_two_cell_system_in_one_step() {
    let a = SparseSym::from_dense(2, &[1.0, -1.0, -1.0, 1.0]);
    let (x, rep) = gmres(&a, &[1.0, -1.0], &IdentityPreconditioner, &GmresOptions::default()).unwrap();
    assert_eq!(rep.iterations, 1);
    assert!((x[0] - 0.5).abs() < 1e-14 && (x[1] + 0.5).abs() < 1e-14);
}

#[test]
fn coarse_space_reproduces_constants() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for dims in [vec![12, 9], vec![6, 6, 5], vec![16, 4]] {
        let grid = StructuredGrid::unit(&dims).unwrap();
        let perm = PermField::log_uniform(grid, 6.0, rng.gen()).unwrap();
        let layout = build_layout(&grid, 2, 2, 1).unwrap();
        for mode in [WeightMode::Kappa, WeightMode::Lumped] {
            let bases = build_bases(&grid, &perm, &layout, mode, LPolicy::Fixed(3)).unwrap();
            let space = build_coarse_space(&layout, bases);
            let z = coarse_kernel_vector(&space).unwrap();
            let one = space.prolong(&z);
            let err = one.iter().fold(0.0f64, |m, v| m.max((v - 1.0).abs()));
            assert!(err <= 1e-10, "{dims:?} {mode:?}: {err:e}");
        }
    }
}

#[test]
fn local_bases_are_weight_orthonormal_eigenpairs() {
    let grid = StructuredGrid::unit(&[12, 12]).unwrap();
    let perm = PermField::log_uniform(grid, 4.0, 8).unwrap();
    let layout = build_layout(&grid, 2, 1, 2).unwrap();
    for i in 0..layout.n_elements() {
        let b = element_basis(&grid, &perm, &layout, i, WeightMode::Lumped, LPolicy::Fixed(5)).unwrap();
        let ah = to_na(&assemble_interior(&grid, &perm, &layout, i).unwrap());
        let s = DMatrix::from_diagonal(&DVector::from_column_slice(
            assemble_weights(&grid, &perm, &layout, i, WeightMode::Lumped).unwrap().values(),
        ));
        let v = DMatrix::from_columns(&b.vectors.iter().map(|u| DVector::from_column_slice(u)).collect::<Vec<_>>());
        let gram = v.transpose() * &s * &v;
        assert!((gram - DMatrix::identity(5, 5)).amax() < 1e-10);
        let rq = v.transpose() * &ah * &v;
        for k in 0..5 {
            assert!((rq[(k, k)] - b.eigenvalues[k]).abs() <= 1e-8 * b.eigenvalues[4].max(1.0));
        }
        // Dense reference for the leading eigenvalues.
        let sinv_half = DMatrix::from_diagonal(&s.diagonal().map(|w| 1.0 / w.sqrt()));
        let mut want: Vec<f64> = (&sinv_half * &ah * &sinv_half).symmetric_eigen().eigenvalues.iter().copied().collect();
        want.sort_by(f64::total_cmp);
        for k in 0..5 {
            assert!((want[k] - b.eigenvalues[k]).abs() <= 1e-8 * want[5].max(1.0));
        }
        assert!((b.next_eigenvalue.unwrap() - want[5]).abs() <= 1e-8 * want[5]);
    }
}

#[test]
fn single_element_overlap_constant() {
    let grid = StructuredGrid::unit(&[6, 6, 6]).unwrap();
    let layout = build_layout(&grid, 1, 1, 2).unwrap();
    assert_eq!(compute_cos(&layout), 1);
    for eps in [0.0, 0.1, 1.0] {
        assert!((theorem_bound(1, eps) - (2.0 + 9.0 * eps) * 5.0).abs() < 1e-12);
    }
}

#[test]
fn channel_modes_separate_with_contrast() {
    let grid = StructuredGrid::unit(&[16, 16]).unwrap();
    let layout = build_layout(&grid, 1, 1, 0).unwrap();
    let eig = |cr: f64| {
        let perm = channel_medium(&grid, 3, cr).unwrap();
        element_basis(&grid, &perm, &layout, 0, WeightMode::Kappa, LPolicy::Fixed(4))
            .unwrap()
            .eigenvalues
    };
    let (e0, e2, e4) = (eig(0.0), eig(2.0), eig(4.0));
    assert!(e0[0].abs() < 1e-10 && e4[0].abs() < 1e-10);
    // One mode per channel collapses like 1/κ*; the next one does not.
    for k in 1..3 {
        assert!(e4[k] < 0.02 * e2[k] && e4[k] < 0.01 * e4[3], "k={k}: {e0:?} {e2:?} {e4:?}");
    }
    assert!(e4[3] > 0.1 * e0[3], "{e0:?} {e4:?}");
}

fn small_cfg() -> RunConfig {
    RunConfig {
        dims: vec![16, 16, 16],
        medium: MediumKind::Channel,
        cr: 3.0,
        ..RunConfig::default()
    }
}

#[test]
fn contrast_sweep_keeps_problem_size() {
    let values: Vec<String> = ["0", "2", "4"].iter().map(|s| s.to_string()).collect();
    let rows = sweep(&small_cfg(), "cr", &values).unwrap();
    assert_eq!(rows.len(), 3);
    for row in &rows {
        let r = row.outcome.as_ref().unwrap();
        assert!(r.converged);
        assert_eq!(r.dof, 4096);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cr.csv");
    write_sweep_csv(&path, "cr", &rows).unwrap();
    let mut reader = csv::Reader::from_path(&path).unwrap();
    assert_eq!(reader.headers().unwrap().get(0), Some("cr"));
    assert_eq!(reader.records().count(), 3);
}

#[test]
fn subdivision_sweep_scales_coarse_space() {
    let values: Vec<String> = ["1", "2", "4"].iter().map(|s| s.to_string()).collect();
    let rows = sweep(&small_cfg(), "sd", &values).unwrap();
    // One element covering the whole domain has no Dirichlet face.
    assert!(rows[0].outcome.is_err());
    for (row, sd) in rows[1..].iter().zip([2usize, 4]) {
        let r = row.outcome.as_ref().unwrap();
        assert_eq!(r.n_coarse, sd.pow(3) * 4);
        assert!(r.converged);
    }
}

#[test]
fn uniform_run_conserves_mass() {
    let out = run(&RunConfig::default()).unwrap();
    let r = &out.report;
    assert!(r.converged && r.iter < 100);
    assert!(r.mass_defect <= 1e-10);
    assert!(r.final_residual <= 1e-5);
    assert_eq!(r.history.len(), r.iter + 1);
}

#[test]
fn field_dumps_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        dims: vec![8, 6, 4],
        sd: 2,
        l_star: 2,
        dump_pressure: Some(dir.path().join("p.bin")),
        dump_velocity: Some(dir.path().join("v.bin")),
        report: Some(dir.path().join("report.json")),
        ..RunConfig::default()
    };
    let out = execute(&cfg).unwrap();
    let grid = cfg.grid().unwrap();
    let p = read_field_for(&dir.path().join("p.bin"), &grid, FieldKind::Pressure).unwrap();
    assert_eq!(p, out.pressure);
    let v = read_field_for(&dir.path().join("v.bin"), &grid, FieldKind::Velocity).unwrap();
    assert_eq!(v, out.velocity);
    assert!(read_field_for(&dir.path().join("p.bin"), &grid, FieldKind::Velocity).is_err());
    let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(json["iter"].as_u64(), Some(out.report.iter as u64));
}

#[test]
fn shipped_config_loads() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/channels.toml");
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.dims, vec![64, 64, 32]);
    assert_eq!(cfg.medium, MediumKind::Channel);
    cfg.validate().unwrap();
}

#[test]
fn cli_solve_prints_report() {
    let out = Command::new(env!("CARGO_BIN_EXE_darcy-ddm"))
        .args(["solve", "--dims", "8,8", "--medium", "random", "--log10-contrast", "3", "--l-star", "3"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["dof"].as_u64(), Some(64));
    assert_eq!(json["converged"].as_bool(), Some(true));

    let bad = Command::new(env!("CARGO_BIN_EXE_darcy-ddm"))
        .args(["sweep", "--axis", "tol", "--values", "1,2", "--csv", "/dev/null"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
}
