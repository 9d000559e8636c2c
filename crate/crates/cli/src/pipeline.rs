use std::fs;
use std::path::{Path, PathBuf};

use pnp_homog::cellcorrect::CorrectorSet;
use pnp_homog::io::{atomic_write, format_diagnostics, format_grid_dump, format_mask, sha256_hex};
use pnp_homog::macropnp::{run_macro, MacroRun, MacroState};
use pnp_homog::microdns::{
    assemble_micro_domain, compare_fields, interpolate_macro, reconstruct_two_scale, run_micro, MicroConfig,
    MicroDomain, MicroState,
};
use pnp_homog::unitcell::{build_unit_cell, UnitCell};
use pnp_homog::upscale::{upscale, EffectiveTensors, UpscaleOptions};
use pnp_homog::CoreError;
use rayon::prelude::*;
use serde_json::json;
use thiserror::Error;
use tracing::info;

use crate::config::{ConfigErrors, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Cell,
    Upscale,
    Macro,
    Micro,
    Validate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Cell => "cell",
            Command::Upscale => "upscale",
            Command::Macro => "macro",
            Command::Micro => "micro",
            Command::Validate => "validate",
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigErrors),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("solver failure: {0}")]
    Solver(CoreError),

    #[error("i/o failure: {0}")]
    Io(String),

    #[error(
        "validation failed: reconstructed potential error {worst:.3e} at s = {s} exceeds threshold {threshold:.3e}"
    )]
    Validation { worst: f64, s: f64, threshold: f64 },
}

impl From<CoreError> for PipelineError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Io(e) => PipelineError::Io(e.to_string()),
            // problems with what the user asked for, not with the numerics
            e @ (CoreError::Geometry(_)
            | CoreError::Parameter(_)
            | CoreError::Disconnected { .. }
            | CoreError::Budget { .. }
            | CoreError::Format(_)
            | CoreError::Json(_)) => PipelineError::Input(e.to_string()),
            other => PipelineError::Solver(other),
        }
    }
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Input(_) => 2,
            PipelineError::Solver(_) => 3,
            PipelineError::Validation { .. } => 4,
            PipelineError::Io(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Input(_) => "input",
            PipelineError::Solver(_) => "solver",
            PipelineError::Io(_) => "io",
            PipelineError::Validation { .. } => "validation",
        }
    }

    /// Machine-readable error record.
    pub fn record(&self) -> serde_json::Value {
        let details: Vec<serde_json::Value> = match self {
            PipelineError::Config(errs) => {
                errs.0.iter().map(|e| json!({ "line": e.line, "key": e.key, "message": e.message })).collect()
            }
            _ => Vec::new(),
        };
        json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
            "details": details,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    /// Output directory, or output file for `upscale` and `validate`.
    pub out: Option<PathBuf>,
    /// Precomputed tensors for `macro`.
    pub tensors: Option<PathBuf>,
}

/// One row of the validation report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationRow {
    pub s: f64,
    pub err_phi: f64,
    pub err_n1: f64,
    pub err_n2: f64,
    pub err_phi_recon: f64,
}

pub const REPORT_HEADER: &str = "s,err_phi_L2,err_n1_L2,err_n2_L2,err_phi_recon_L2";

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub report: Vec<ValidationRow>,
}

/// Collects artifacts and writes the provenance record last.
struct Writer {
    dir: PathBuf,
    files: Vec<(PathBuf, String)>,
}

impl Writer {
    fn new(dir: PathBuf) -> Self {
        Self { dir, files: Vec::new() }
    }

    fn put(&mut self, path: PathBuf, contents: &str) -> Result<(), PipelineError> {
        atomic_write(&path, contents.as_bytes())?;
        self.files.push((path, sha256_hex(contents.as_bytes())));
        Ok(())
    }

    fn put_in_dir(&mut self, name: &str, contents: &str) -> Result<(), PipelineError> {
        self.put(self.dir.join(name), contents)
    }

    fn finish(mut self, cfg: &RunConfig, cmd: Command) -> Result<Vec<PathBuf>, PipelineError> {
        let files: Vec<serde_json::Value> = self
            .files
            .iter()
            .map(|(p, h)| json!({ "file": p.file_name().map(|n| n.to_string_lossy()), "sha256": h }))
            .collect();
        let record = json!({
            "command": cmd.name(),
            "config_hash": cfg.hash,
            "version": env!("CARGO_PKG_VERSION"),
            "files": files,
        });
        let text = serde_json::to_string_pretty(&record).map_err(CoreError::from)? + "\n";
        let path = self.dir.join(format!("provenance-{}.json", cmd.name()));
        atomic_write(&path, text.as_bytes())?;
        let mut out: Vec<PathBuf> = self.files.drain(..).map(|(p, _)| p).collect();
        out.push(path);
        Ok(out)
    }
}

fn build_cell(cfg: &RunConfig) -> Result<UnitCell, PipelineError> {
    Ok(build_unit_cell(&cfg.cell.geometry, cfg.cell.dim, cfg.cell.resolution)?)
}

fn tensors_for(
    cfg: &RunConfig,
    cell: &UnitCell,
    second_order: bool,
) -> Result<(CorrectorSet, EffectiveTensors), PipelineError> {
    let opts = UpscaleOptions { solver: cfg.solver_settings(), second_order };
    let (corr, mut tensors) = upscale(cell, &cfg.physics, &opts)?;
    tensors.provenance.config_hash = Some(cfg.hash.clone());
    info!(p = tensors.p, eps0 = %tensors.eps0, "effective tensors assembled");
    Ok((corr, tensors))
}

fn tensors_json(t: &EffectiveTensors) -> Result<String, PipelineError> {
    Ok(t.to_json()? + "\n")
}

fn file_target(out: &Option<PathBuf>, default_dir: &Path, default_name: &str) -> (PathBuf, PathBuf) {
    let path = out.clone().unwrap_or_else(|| default_dir.join(default_name));
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    (path, dir)
}

fn macro_initial(cfg: &RunConfig) -> Result<MacroState, PipelineError> {
    let grid = cfg.macro_config().grid()?;
    Ok(cfg.macro_run.init.macro_state(grid))
}

fn run_macro_stage(cfg: &RunConfig, tensors: &EffectiveTensors) -> Result<MacroRun, PipelineError> {
    let mcfg = cfg.macro_config();
    let run = run_macro(&mcfg, tensors, &macro_initial(cfg)?)?;
    info!(steps = run.rows.len(), "macro run finished");
    Ok(run)
}

fn micro_run(cfg: &RunConfig, cell: &UnitCell, s: f64) -> Result<(MicroDomain, MicroState), PipelineError> {
    let dom = assemble_micro_domain(cell, &cfg.physics, s, cfg.budget)?;
    let init = MicroState::from_profile(&dom, &cfg.macro_run.init);
    let run = run_micro(&dom, &MicroConfig::from(&cfg.macro_config()), &init)?;
    info!(s, n = dom.grid.n, "direct simulation finished");
    Ok((dom, run.final_state))
}

fn fmt_t(t: f64) -> String {
    format!("{t:.6e}")
}

/// Run one command to completion, writing its artifacts.
pub fn run_pipeline(cfg: &RunConfig, cmd: Command, opts: &PipelineOptions) -> Result<Outcome, PipelineError> {
    let out_dir = opts.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    match cmd {
        Command::Cell => {
            let cell = build_cell(cfg)?;
            let (corr, tensors) = tensors_for(cfg, &cell, true)?;
            let mut w = Writer::new(out_dir);
            w.put_in_dir("mask.txt", &format_mask(cell.dim(), cell.resolution(), cell.fluid_mask()))?;
            for (name, field) in corr.named_fields() {
                w.put_in_dir(&format!("{name}.txt"), &format_grid_dump(&name, field)?)?;
            }
            w.put_in_dir("tensors.json", &tensors_json(&tensors)?)?;
            Ok(Outcome { files: w.finish(cfg, cmd)?, report: Vec::new() })
        }
        Command::Upscale => {
            let cell = build_cell(cfg)?;
            let (_, tensors) = tensors_for(cfg, &cell, false)?;
            let (path, dir) = file_target(&opts.out, &cfg.output_dir, "tensors.json");
            let mut w = Writer::new(dir);
            w.put(path, &tensors_json(&tensors)?)?;
            Ok(Outcome { files: w.finish(cfg, cmd)?, report: Vec::new() })
        }
        Command::Macro => {
            let tensors = match &opts.tensors {
                Some(p) => {
                    let text =
                        fs::read_to_string(p).map_err(|e| PipelineError::Input(format!("{}: {e}", p.display())))?;
                    let t = EffectiveTensors::from_json(&text)
                        .map_err(|e| PipelineError::Input(format!("{}: {e}", p.display())))?;
                    if t.dim != cfg.cell.dim {
                        return Err(PipelineError::Input(format!(
                            "tensors are {}-dimensional but cell.dim = {}",
                            t.dim, cfg.cell.dim
                        )));
                    }
                    t
                }
                None => tensors_for(cfg, &build_cell(cfg)?, false)?.1,
            };
            let run = run_macro_stage(cfg, &tensors)?;
            let mut w = Writer::new(out_dir);
            w.put_in_dir("diagnostics.csv", &format_diagnostics(&run.rows))?;
            for (k, snap) in run.snapshots.iter().enumerate() {
                for (which, label) in ["u1", "u2", "u3"].iter().enumerate() {
                    let name = format!("{label}_t{}", fmt_t(snap.t));
                    w.put_in_dir(&format!("snapshot{k}_{label}.txt"), &format_grid_dump(&name, &snap.field(which))?)?;
                }
            }
            for (which, label) in ["u1", "u2", "u3"].iter().enumerate() {
                w.put_in_dir(&format!("final_{label}.txt"), &format_grid_dump(label, &run.final_state.field(which))?)?;
            }
            Ok(Outcome { files: w.finish(cfg, cmd)?, report: Vec::new() })
        }
        Command::Micro => {
            let cell = build_cell(cfg)?;
            let runs: Vec<_> = cfg.scales.par_iter().map(|&s| micro_run(cfg, &cell, s)).collect::<Result<_, _>>()?;
            let mut w = Writer::new(out_dir);
            for (dom, state) in &runs {
                for (which, label) in ["nplus", "nminus", "phi"].iter().enumerate() {
                    w.put_in_dir(
                        &format!("micro_s{}_{label}.txt", dom.tiles),
                        &format_grid_dump(label, &state.field(which))?,
                    )?;
                }
            }
            Ok(Outcome { files: w.finish(cfg, cmd)?, report: Vec::new() })
        }
        Command::Validate => {
            let cell = build_cell(cfg)?;
            cell.ensure_connected()?;
            let (corr, tensors) = tensors_for(cfg, &cell, true)?;
            let macro_run = run_macro_stage(cfg, &tensors)?;
            let report: Vec<ValidationRow> = cfg
                .scales
                .par_iter()
                .map(|&s| -> Result<ValidationRow, PipelineError> {
                    let (dom, dns) = micro_run(cfg, &cell, s)?;
                    let rec = reconstruct_two_scale(&macro_run.final_state, &corr, &dom)?;
                    let plain = interpolate_macro(&macro_run.final_state, &dom);
                    let fluid = Some(dom.fluid_mask.as_slice());
                    Ok(ValidationRow {
                        s,
                        err_phi: compare_fields(&dns.field(2), &plain.field(2), None)?.rel_l2,
                        err_n1: compare_fields(&dns.field(0), &rec.field(0), fluid)?.rel_l2,
                        err_n2: compare_fields(&dns.field(1), &rec.field(1), fluid)?.rel_l2,
                        err_phi_recon: compare_fields(&dns.field(2), &rec.field(2), None)?.rel_l2,
                    })
                })
                .collect::<Result<_, _>>()?;
            let mut csv = String::from(REPORT_HEADER);
            csv.push('\n');
            for r in &report {
                csv.push_str(&format!("{},{:e},{:e},{:e},{:e}\n", r.s, r.err_phi, r.err_n1, r.err_n2, r.err_phi_recon));
            }
            let (path, dir) = file_target(&opts.out, &cfg.output_dir, "report.csv");
            let mut w = Writer::new(dir);
            w.put(path, &csv)?;
            let files = w.finish(cfg, cmd)?;
            if let Some(bad) = report.iter().find(|r| !(r.err_phi_recon <= cfg.threshold)) {
                return Err(PipelineError::Validation { worst: bad.err_phi_recon, s: bad.s, threshold: cfg.threshold });
            }
            Ok(Outcome { files, report })
        }
    }
}
