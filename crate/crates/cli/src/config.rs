//! INI-style run configuration.
//!
//! ```text
//! # comment
//! [cell]
//! kind = disc
//! radius = 0.25
//! physics.lambda = 1.0      # dotted keys work outside sections too
//! ```
//!
//! Every key is validated before any computation starts; all violations are
//! collected and reported together, each with its line number.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use pnp_homog::cellcorrect::SolverSettings;
use pnp_homog::io::{read_mask, sha256_hex};
use pnp_homog::macropnp::{InitialProfile, MacroConfig};
use pnp_homog::microdns::{tiles_for_scale, DEFAULT_BUDGET};
use pnp_homog::transport::{DensityBc, DriftScheme, PicardSettings};
use pnp_homog::unitcell::{GeometrySpec, PermittivityParams, MIN_RESOLUTION};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(l) = self.line {
            write!(f, "line {l}: ")?;
        }
        if let Some(k) = &self.key {
            write!(f, "{k}: ")?;
        }
        f.write_str(&self.message)
    }
}

#[derive(Debug, Error)]
#[error("{} configuration error(s):\n  {}", .0.len(), .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("\n  "))]
pub struct ConfigErrors(pub Vec<ConfigError>);

#[derive(Debug, Clone, PartialEq)]
pub struct CellConfig {
    pub geometry: GeometrySpec,
    pub dim: usize,
    pub resolution: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub tol: f64,
    pub iter_factor: usize,
    pub picard_tol: f64,
    pub picard_max: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroSection {
    pub resolution: usize,
    pub dt: f64,
    pub t_final: f64,
    pub bc: DensityBc,
    pub drift: DriftScheme,
    pub init: InitialProfile,
    pub loceq_window: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub cell: CellConfig,
    pub physics: PermittivityParams,
    pub solver: SolverConfig,
    pub macro_run: MacroSection,
    /// Scale ratios `s`, each with integer `1/s`.
    pub scales: Vec<f64>,
    pub budget: usize,
    pub output_dir: PathBuf,
    pub snapshots: Vec<f64>,
    /// Largest accepted relative L² error of the reconstructed potential.
    pub threshold: f64,
    /// SHA-256 of the configuration text.
    pub hash: String,
}

impl RunConfig {
    pub fn solver_settings(&self) -> SolverSettings {
        SolverSettings { tol: self.solver.tol, iter_factor: self.solver.iter_factor }
    }

    pub fn macro_config(&self) -> MacroConfig {
        let mut c =
            MacroConfig::new(self.cell.dim, self.macro_run.resolution, self.macro_run.dt, self.macro_run.t_final);
        c.picard = PicardSettings { tol: self.solver.picard_tol, max_iter: self.solver.picard_max };
        c.drift = self.macro_run.drift;
        c.bc = self.macro_run.bc;
        c.solver = self.solver_settings();
        c.lambda2 = self.physics.fluid();
        c.loceq_window = self.macro_run.loceq_window;
        c.snapshots = self.snapshots.clone();
        c
    }
}

const KEYS: &[&str] = &[
    "cell.kind",
    "cell.dim",
    "cell.resolution",
    "cell.fraction",
    "cell.axis",
    "cell.radius",
    "cell.mask_path",
    "physics.lambda",
    "physics.alpha",
    "solver.tol",
    "solver.iter_factor",
    "solver.picard_tol",
    "solver.picard_max",
    "macro.resolution",
    "macro.dt",
    "macro.t_final",
    "macro.bc",
    "macro.drift",
    "macro.init",
    "macro.amplitude",
    "macro.loceq_window",
    "micro.s",
    "micro.budget",
    "output.directory",
    "output.snapshots",
    "validate.threshold",
];

struct Entries {
    map: BTreeMap<String, (String, usize)>,
    errors: Vec<ConfigError>,
}

impl Entries {
    fn err(&mut self, key: &str, message: String) {
        let line = self.map.get(key).map(|(_, l)| *l);
        self.errors.push(ConfigError { line, key: Some(key.to_string()), message });
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|(v, _)| v.as_str())
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str, default: T, what: &str) -> T {
        match self.raw(key).map(|v| v.parse::<T>()) {
            None => default,
            Some(Ok(v)) => v,
            Some(Err(_)) => {
                let v = self.raw(key).unwrap_or_default().to_string();
                self.err(key, format!("expected {what}, got {v:?}"));
                default
            }
        }
    }

    fn real(&mut self, key: &str, default: f64, ok: impl Fn(f64) -> bool, range: &str) -> f64 {
        let v: f64 = self.parsed(key, default, "a number");
        if !v.is_finite() || !ok(v) {
            self.err(key, format!("value {v} out of range: must be {range}"));
        }
        v
    }

    fn int(&mut self, key: &str, default: usize, ok: impl Fn(usize) -> bool, range: &str) -> usize {
        let v: usize = self.parsed(key, default, "a non-negative integer");
        if !ok(v) {
            self.err(key, format!("value {v} out of range: must be {range}"));
        }
        v
    }

    fn choice<'a>(&mut self, key: &str, default: &'a str, options: &[&'a str]) -> &'a str {
        match self.raw(key) {
            None => default,
            Some(v) => match options.iter().find(|o| **o == v) {
                Some(o) => o,
                None => {
                    let v = v.to_string();
                    self.err(key, format!("expected one of {}, got {v:?}", options.join("|")));
                    default
                }
            },
        }
    }
}

fn unquote(v: &str) -> &str {
    let v = v.trim();
    if v.len() >= 2 && ((v.starts_with('"') && v.ends_with('"')) || (v.starts_with('\'') && v.ends_with('\''))) {
        &v[1..v.len() - 1]
    } else {
        v
    }
}

fn tokenize(text: &str) -> Entries {
    let mut map: BTreeMap<String, (String, usize)> = BTreeMap::new();
    let mut errors = Vec::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            match rest.strip_suffix(']') {
                Some(name) if !name.trim().is_empty() && !name.contains(char::is_whitespace) => {
                    section = name.trim().to_string();
                }
                _ => errors.push(ConfigError {
                    line: Some(ln),
                    key: None,
                    message: format!("malformed section header {line:?}"),
                }),
            }
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            errors.push(ConfigError {
                line: Some(ln),
                key: None,
                message: format!("expected `key = value`, got {line:?}"),
            });
            continue;
        };
        let k = k.trim();
        let key = if section.is_empty() || k.contains('.') { k.to_string() } else { format!("{section}.{k}") };
        if !KEYS.contains(&key.as_str()) {
            errors.push(ConfigError { line: Some(ln), key: Some(key), message: "unknown key".into() });
            continue;
        }
        if let Some((_, first)) = map.get(&key) {
            errors.push(ConfigError {
                line: Some(ln),
                key: Some(key.clone()),
                message: format!("duplicate key (first set on line {first}, again on line {ln})"),
            });
            continue;
        }
        map.insert(key, (unquote(v).to_string(), ln));
    }
    Entries { map, errors }
}

fn parse_scale(tok: &str) -> Option<f64> {
    let tok = tok.trim();
    match tok.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().ok()?;
            let b: f64 = b.trim().parse().ok()?;
            (b != 0.0).then(|| a / b)
        }
        None => tok.parse().ok(),
    }
}

/// Parse configuration text; `base` resolves relative file paths.
pub fn parse_config(text: &str, base: &Path) -> Result<RunConfig, ConfigErrors> {
    let mut e = tokenize(text);

    let kind = match e.raw("cell.kind") {
        Some(_) => e.choice("cell.kind", "full", &["full", "laminate", "disc", "checkerboard", "mask"]),
        None => {
            e.errors.push(ConfigError {
                line: None,
                key: Some("cell.kind".into()),
                message: "missing required key".into(),
            });
            "full"
        }
    };
    let mut dim = e.int("cell.dim", 2, |v| (1..=3).contains(&v), "1, 2 or 3");
    let mut resolution = e.int("cell.resolution", 32, |v| v >= MIN_RESOLUTION, &format!(">= {MIN_RESOLUTION}"));
    let fraction = e.real("cell.fraction", 0.5, |v| v > 0.0 && v <= 1.0, "in (0, 1]");
    let axis = e.int("cell.axis", 1, |v| v >= 1 && v <= dim, &format!("between 1 and cell.dim = {dim}"));
    let radius = e.real("cell.radius", 0.25, |v| v >= 0.0, ">= 0");
    let geometry = match kind {
        "laminate" => GeometrySpec::Laminate { fluid_fraction: fraction, axis: axis.saturating_sub(1) },
        "disc" => GeometrySpec::Disc { radius },
        "checkerboard" => {
            if dim < 2 {
                e.err("cell.dim", "checkerboard needs cell.dim >= 2".into());
            }
            GeometrySpec::Checkerboard
        }
        "mask" => match e.raw("cell.mask_path").map(|p| base.join(p)) {
            None => {
                e.errors.push(ConfigError {
                    line: e.map.get("cell.kind").map(|(_, l)| *l),
                    key: Some("cell.mask_path".into()),
                    message: "missing required key (cell.kind = mask)".into(),
                });
                GeometrySpec::Full
            }
            Some(path) => match read_mask(&path) {
                Ok((d, m, mask)) => {
                    for (key, set, file) in [("cell.dim", dim, d), ("cell.resolution", resolution, m)] {
                        if e.raw(key).is_some() && set != file {
                            e.err(key, format!("{set} disagrees with mask file value {file}"));
                        }
                    }
                    dim = d;
                    resolution = m;
                    GeometrySpec::Mask { mask }
                }
                Err(err) => {
                    e.err("cell.mask_path", format!("cannot use {}: {err}", path.display()));
                    GeometrySpec::Full
                }
            },
        },
        _ => GeometrySpec::Full,
    };
    if kind != "mask" && e.raw("cell.mask_path").is_some() {
        e.err("cell.mask_path", "only valid with cell.kind = mask".into());
    }

    let lambda = e.real("physics.lambda", 1.0, |v| v > 0.0, "> 0");
    let alpha = e.real("physics.alpha", 1.0, |v| v > 0.0, "> 0");

    let tol = e.real("solver.tol", 1e-10, |v| v > 0.0 && v < 1.0, "in (0, 1)");
    let iter_factor = e.int("solver.iter_factor", 50, |v| v >= 1, ">= 1");
    let picard_tol = e.real("solver.picard_tol", 1e-10, |v| v > 0.0, "> 0");
    let picard_max = e.int("solver.picard_max", 50, |v| v >= 1, ">= 1");

    let macro_res = e.int("macro.resolution", 64, |v| v >= 2, ">= 2");
    let dt = e.real("macro.dt", 1e-4, |v| v > 0.0, "> 0");
    let t_final = e.real("macro.t_final", 1e-3, |v| v >= dt, &format!(">= macro.dt = {dt}"));
    let bc = match e.choice("macro.bc", "abc", &["abc", "neumann"]) {
        "neumann" => DensityBc::NoFlux,
        _ => DensityBc::Dirichlet,
    };
    let drift = match e.choice("macro.drift", "upwind", &["upwind", "central"]) {
        "central" => DriftScheme::Central,
        _ => DriftScheme::Upwind,
    };
    let init_kind = e.choice("macro.init", "cosine", &["zero", "eigenmode", "asymmetric", "cosine"]);
    let amplitude = e.real("macro.amplitude", 0.5, |v| v.abs() <= 1.0, "in [-1, 1] (densities stay non-negative)");
    let init = match init_kind {
        "zero" => InitialProfile::Zero,
        "eigenmode" => InitialProfile::Eigenmode,
        "asymmetric" => InitialProfile::Asymmetric { amplitude },
        _ => InitialProfile::Cosine { amplitude },
    };
    let loceq_window = e.int("macro.loceq_window", 4, |v| v >= 1, ">= 1");

    let mut scales = Vec::new();
    let s_raw = e.raw("micro.s").unwrap_or("1/2, 1/4, 1/8").to_string();
    for tok in s_raw.split(',').filter(|t| !t.trim().is_empty()) {
        match parse_scale(tok) {
            Some(s) if tiles_for_scale(s).is_ok() => scales.push(s),
            _ => e.err("micro.s", format!("{:?} is not a scale ratio with integer 1/s", tok.trim())),
        }
    }
    if scales.is_empty() && e.raw("micro.s").is_some() {
        e.err("micro.s", "empty list".into());
    }
    let budget = e.int("micro.budget", DEFAULT_BUDGET, |v| v >= 1, ">= 1");

    let output_dir = base.join(e.raw("output.directory").unwrap_or("out"));
    let mut snapshots = Vec::new();
    if let Some(raw) = e.raw("output.snapshots").map(str::to_string) {
        for tok in raw.split(',').filter(|t| !t.trim().is_empty()) {
            match tok.trim().parse::<f64>() {
                Ok(t) if (0.0..=t_final).contains(&t) => snapshots.push(t),
                _ => e.err("output.snapshots", format!("{:?} is not a time in [0, macro.t_final]", tok.trim())),
            }
        }
    }
    let threshold = e.real("validate.threshold", 0.1, |v| v > 0.0, "> 0");

    if !e.errors.is_empty() {
        e.errors.sort_by_key(|x| x.line.unwrap_or(0));
        return Err(ConfigErrors(e.errors));
    }
    Ok(RunConfig {
        cell: CellConfig { geometry, dim, resolution },
        physics: PermittivityParams { lambda, alpha },
        solver: SolverConfig { tol, iter_factor, picard_tol, picard_max },
        macro_run: MacroSection { resolution: macro_res, dt, t_final, bc, drift, init, loceq_window },
        scales,
        budget,
        output_dir,
        snapshots,
        threshold,
        hash: sha256_hex(text.as_bytes()),
    })
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigErrors> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        ConfigErrors(vec![ConfigError {
            line: None,
            key: None,
            message: format!("cannot read {}: {e}", path.display()),
        }])
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base)
}
