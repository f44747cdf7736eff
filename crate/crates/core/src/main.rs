use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use darcy_ddm::harness::{execute, run_audit, sweep, write_json, write_sweep_csv, RunConfig};

#[derive(Parser)]
#[command(name = "darcy-ddm", version, about = "Two-level Schwarz solver for high-contrast Darcy flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the configured instance and print the JSON report.
    Solve {
        #[command(flatten)]
        common: Common,
    },
    /// Solve once per value of one parameter and write a CSV summary.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// cr, l_star, overlap (or m), sd or eps.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Run the dense structural checks and print the certificate.
    Audit {
        #[command(flatten)]
        common: Common,
        /// Also write the certificate here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Config file plus per-key overrides (`--n-channels` or `--n_channels`).
#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dims: Option<String>,
    #[arg(long)]
    spacing: Option<String>,
    #[arg(long)]
    medium: Option<String>,
    #[arg(long, alias = "n_channels")]
    n_channels: Option<String>,
    #[arg(long)]
    cr: Option<String>,
    #[arg(long)]
    raster: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long, alias = "log10_contrast")]
    log10_contrast: Option<String>,
    #[arg(long)]
    sd: Option<String>,
    #[arg(long)]
    workers: Option<String>,
    #[arg(long, alias = "m")]
    overlap: Option<String>,
    #[arg(long, alias = "l_star")]
    l_star: Option<String>,
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    tol: Option<String>,
    #[arg(long)]
    restart: Option<String>,
    #[arg(long)]
    maxit: Option<String>,
    #[arg(long)]
    relative: bool,
    #[arg(long)]
    report: Option<String>,
    #[arg(long)]
    audit: bool,
    #[arg(long, alias = "dump_pressure")]
    dump_pressure: Option<String>,
    #[arg(long, alias = "dump_velocity")]
    dump_velocity: Option<String>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        let pairs = [
            ("dims", &self.dims),
            ("spacing", &self.spacing),
            ("medium", &self.medium),
            ("n_channels", &self.n_channels),
            ("cr", &self.cr),
            ("seed", &self.seed),
            ("log10_contrast", &self.log10_contrast),
            ("sd", &self.sd),
            ("workers", &self.workers),
            ("overlap", &self.overlap),
            ("l_star", &self.l_star),
            ("eps", &self.eps),
            ("weights", &self.weights),
            ("tol", &self.tol),
            ("restart", &self.restart),
            ("maxit", &self.maxit),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                cfg.set(key, v).with_context(|| format!("--{key}"))?;
            }
        }
        // Paths are taken verbatim.
        if let Some(p) = &self.raster {
            cfg.raster = Some(p.into());
        }
        if let Some(p) = &self.report {
            cfg.report = Some(p.into());
        }
        if let Some(p) = &self.dump_pressure {
            cfg.dump_pressure = Some(p.into());
        }
        if let Some(p) = &self.dump_velocity {
            cfg.dump_velocity = Some(p.into());
        }
        cfg.relative |= self.relative;
        cfg.audit |= self.audit;
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Solve { common } => {
            let cfg = common.config()?;
            let out = execute(&cfg)?;
            let r = &out.report;
            eprintln!(
                "iter {} converged {} residual {:.3e} | pre0 {:.3}s pre1 {:.3}s ite {:.3}s | N^c {}",
                r.iter, r.converged, r.final_residual, r.timings.pre0, r.timings.pre1, r.timings.ite, r.n_coarse
            );
            println!("{}", serde_json::to_string_pretty(r)?);
            if !r.converged {
                bail!("GMRES did not reach tol {} within {} iterations", cfg.tol, cfg.maxit);
            }
        }
        Command::Sweep {
            common,
            axis,
            values,
            csv,
        } => {
            let cfg = common.config()?;
            let rows = sweep(&cfg, &axis, &values)?;
            write_sweep_csv(&csv, &axis, &rows)?;
            for row in &rows {
                match &row.outcome {
                    Ok(r) => eprintln!("{axis}={}: iter {} (pre0 {:.3}s pre1 {:.3}s ite {:.3}s)", row.value, r.iter, r.timings.pre0, r.timings.pre1, r.timings.ite),
                    Err(e) => eprintln!("{axis}={}: failed: {e}", row.value),
                }
            }
        }
        Command::Audit { common, out } => {
            let cfg = common.config()?;
            let cert = run_audit(&cfg)?;
            if let Some(p) = &out {
                write_json(p, &cert)?;
            }
            println!("{}", serde_json::to_string_pretty(&cert)?);
            if !cert.passed {
                bail!("audit failed");
            }
        }
    }
    Ok(())
}
