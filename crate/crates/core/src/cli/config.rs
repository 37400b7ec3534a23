//! Run configuration: JSON schema, layering and conversion into a `ModelSpec`.
//!
//! A config is built from four layers, later layers winning key by key:
//! built-in defaults, the named preset, the config file, `--override` flags.

use std::path::{Path, PathBuf};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::presets;
use crate::error::{Error, Result};
use crate::grid::{ScalarField, StructuredGrid};
use crate::linalg::NewtonSettings;
use crate::observables::ObservableSet;
use crate::physics::{MobilityLaw, PotentialLaw};
use crate::sensitivity::PriorSet;
use crate::solver::{MobilityJacobian, ModelSpec, ModelVariant, PreconditionerKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Simulate,
    Sensitivity,
    Convergence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub preset: Option<String>,
    pub scale: Scale,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Times at which `phi` (and `sigma`) are written as VTK files.
    pub snapshot_times: Vec<f64>,
    pub model: ModelConfig,
    pub observables: ObservablesConfig,
    pub solver: SolverConfig,
    pub sensitivity: SensitivityConfig,
    pub convergence: ConvergenceConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub alpha: f64,
    pub epsilon: f64,
    pub potential: PotentialLaw,
    pub mobility: MobilityLaw,
    pub grid: GridConfig,
    pub dt: f64,
    pub final_time: f64,
    pub initial_phi: InitialField,
    /// Constant initial nutrient; tumor model only.
    pub initial_sigma: Option<f64>,
    pub clip_proliferation: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub cells: Vec<usize>,
    pub extent: Vec<f64>,
}

/// Initial order parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialField {
    Constant {
        value: f64,
    },
    /// `mean + amplitude · u` with `u` uniform on `[−1, 1]` per node, drawn from the run seed.
    Random {
        mean: f64,
        amplitude: f64,
    },
    /// `mean + amplitude · Π_a cos(2π periods x_a)`.
    Cosine {
        mean: f64,
        amplitude: f64,
        periods: f64,
    },
    /// `low + (high − low) · exp(1 − 1/(1 − r²))` for `r = |x − center| / radius < 1`, `low` elsewhere.
    Bump {
        center: Vec<f64>,
        radius: f64,
        low: f64,
        high: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservablesConfig {
    pub mass: bool,
    pub energy: bool,
    pub roughness: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub max_halvings: usize,
    pub preconditioner: PreconditionerKind,
    pub mobility_jacobian: MobilityJacobian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityConfig {
    pub samples: usize,
    /// Size of the evaluation pool.
    pub workers: usize,
    /// Number of equispaced QoI times in `(0, T]`.
    pub qoi_times: usize,
    /// Defaults to the tumor priors when absent.
    pub priors: Option<PriorSet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    /// Number of time-step halvings after the configured `dt`.
    pub refinements: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Simulate,
            preset: None,
            scale: Scale::Desk,
            seed: 0,
            output_dir: PathBuf::from("out"),
            snapshot_times: Vec::new(),
            model: ModelConfig {
                variant: ModelVariant::CahnHilliard,
                alpha: 0.5,
                epsilon: 0.02,
                potential: PotentialLaw::Landau { c: 0.25 },
                mobility: MobilityLaw::Constant { m: 1.0 },
                grid: GridConfig {
                    cells: vec![32, 32],
                    extent: vec![1.0, 1.0],
                },
                dt: 1e-3,
                final_time: 0.01,
                initial_phi: InitialField::Random {
                    mean: 0.0,
                    amplitude: 0.05,
                },
                initial_sigma: None,
                clip_proliferation: false,
            },
            observables: ObservablesConfig {
                mass: true,
                energy: true,
                roughness: true,
            },
            solver: SolverConfig {
                newton_tol: NewtonSettings::default().tol,
                newton_max_iter: NewtonSettings::default().max_iter,
                max_halvings: NewtonSettings::default().max_halvings,
                preconditioner: PreconditionerKind::Auto,
                mobility_jacobian: MobilityJacobian::Lagged,
            },
            sensitivity: SensitivityConfig {
                samples: 100,
                workers: 1,
                qoi_times: 10,
                priors: None,
            },
            convergence: ConvergenceConfig { refinements: 3 },
        }
    }
}

/// Recursively merges `top` into `base`. Objects merge key by key, except
/// that a tagged object whose `type` changes is replaced wholesale.
pub fn merge(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            let retag = matches!((b.get("type"), t.get("type")), (Some(x), Some(y)) if x != y);
            if retag {
                *b = t.clone();
                return;
            }
            for (k, v) in t {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, t) => *b = t.clone(),
    }
}

/// Parses `key=value` with a dotted key. The value is read as JSON and
/// falls back to a plain string.
pub fn parse_override(text: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::config(text, "override must have the form key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config(key, "empty segment in override key"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.split('.').map(String::from).collect(), value))
}

fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut cur = root;
    for (i, seg) in path.iter().enumerate() {
        let obj = match cur {
            Value::Object(m) => m,
            _ => return Err(Error::config(path[..i].join("."), "is not an object")),
        };
        if i + 1 == path.len() {
            obj.insert(seg.clone(), value);
            return Ok(());
        }
        cur = obj.entry(seg.clone()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// Layers defaults, preset, `file` and `overrides`, then deserializes and validates.
pub fn resolve(file: &Value, overrides: &[String]) -> Result<RunConfig> {
    if !file.is_object() {
        return Err(Error::config("<root>", "config must be a JSON object"));
    }
    let mut top = file.clone();
    for o in overrides {
        let (path, value) = parse_override(o)?;
        set_path(&mut top, &path, value)?;
    }
    let mut merged = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    match top.get("preset") {
        None | Some(Value::Null) => {}
        Some(Value::String(name)) => merge(&mut merged, &presets::preset(name)?),
        Some(other) => return Err(Error::config("preset", format!("expected a preset name, got {other}"))),
    }
    merge(&mut merged, &top);
    let cfg: RunConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
        let key = e.path().to_string();
        Error::config(if key == "." { "<root>".to_string() } else { key }, e.inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a JSON config file and resolves it with `overrides`.
pub fn parse_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| {
        Error::config("<root>", format!("{} is not valid JSON: {e}", path.display()))
    })?;
    resolve(&value, overrides)
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be positive, got {v}")))
    }
}

impl RunConfig {
    /// Number of time steps, `final_time / dt` rounded to an integer.
    pub fn n_steps(&self) -> usize {
        (self.model.final_time / self.model.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if !(m.alpha > 0.0 && m.alpha <= 1.0) {
            return Err(Error::config("model.alpha", format!("must lie in (0, 1], got {}", m.alpha)));
        }
        positive("model.epsilon", m.epsilon)?;
        positive("model.dt", m.dt)?;
        positive("model.final_time", m.final_time)?;
        let n = m.final_time / m.dt;
        if (n - n.round()).abs() > 1e-9 * n.max(1.0) {
            return Err(Error::config(
                "model.final_time",
                format!("{} is not a whole number of steps of {}", m.final_time, m.dt),
            ));
        }
        if m.grid.cells.len() != m.grid.extent.len() {
            return Err(Error::config("model.grid", "cells and extent need one entry per axis"));
        }
        if let Err(e) = StructuredGrid::new(&m.grid.cells, &m.grid.extent) {
            return Err(Error::config("model.grid", e.to_string()));
        }
        m.potential
            .validate()
            .map_err(|e| Error::config("model.potential", e.to_string()))?;
        m.mobility
            .validate()
            .map_err(|e| Error::config("model.mobility", e.to_string()))?;
        match (&m.variant, m.initial_sigma) {
            (ModelVariant::Tumor { .. }, None) => {
                return Err(Error::config("model.initial_sigma", "required by the tumor model"))
            }
            (ModelVariant::Tumor { .. }, Some(_)) => {}
            (_, Some(_)) => {
                return Err(Error::config("model.initial_sigma", "only allowed for the tumor model"))
            }
            (_, None) => {}
        }
        if let ModelVariant::OhtaKawasaki { .. } = m.variant {
            if !m.mobility.is_constant() {
                return Err(Error::config("model.mobility", "the Ohta-Kawasaki model requires a constant mobility"));
            }
        }
        if let InitialField::Bump { center, radius, .. } = &m.initial_phi {
            if center.len() != m.grid.cells.len() {
                return Err(Error::config("model.initial_phi.center", "needs one entry per axis"));
            }
            positive("model.initial_phi.radius", *radius)?;
        }
        let t_end = self.n_steps() as f64 * m.dt;
        for (i, &t) in self.snapshot_times.iter().enumerate() {
            if !(t >= 0.0 && t <= t_end * (1.0 + 1e-12)) {
                return Err(Error::config(format!("snapshot_times[{i}]"), format!("{t} is outside [0, {t_end}]")));
            }
        }
        positive("solver.newton_tol", self.solver.newton_tol)?;
        if self.solver.newton_max_iter == 0 {
            return Err(Error::config("solver.newton_max_iter", "must be at least 1"));
        }
        if self.mode == Mode::Sensitivity {
            if !matches!(m.variant, ModelVariant::Tumor { .. }) {
                return Err(Error::config("model.variant", "sensitivity mode runs the tumor model"));
            }
            if self.sensitivity.samples < 2 {
                return Err(Error::config("sensitivity.samples", "must be at least 2"));
            }
            if self.sensitivity.workers == 0 {
                return Err(Error::config("sensitivity.workers", "must be at least 1"));
            }
            if self.sensitivity.qoi_times == 0 {
                return Err(Error::config("sensitivity.qoi_times", "must be at least 1"));
            }
            if let Some(p) = &self.sensitivity.priors {
                if p.len() != 8 {
                    return Err(Error::config("sensitivity.priors", "the tumor model has 8 parameters"));
                }
                p.validate().map_err(|e| Error::config("sensitivity.priors", e.to_string()))?;
            }
        }
        self.to_spec().map(|_| ())
    }

    pub fn grid(&self) -> Result<StructuredGrid> {
        StructuredGrid::new(&self.model.grid.cells, &self.model.grid.extent)
            .map_err(|e| Error::config("model.grid", e.to_string()))
    }

    pub fn initial_phi(&self) -> Result<ScalarField> {
        let grid = self.grid()?;
        let field = match &self.model.initial_phi {
            InitialField::Constant { value } => ScalarField::constant(grid, *value),
            InitialField::Random { mean, amplitude } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let values = (0..grid.node_count())
                    .map(|_| {
                        let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                        mean + amplitude * (2.0 * u - 1.0)
                    })
                    .collect();
                ScalarField::new(grid, values)?
            }
            InitialField::Cosine { mean, amplitude, periods } => ScalarField::from_fn(grid, |x| {
                mean + amplitude
                    * x.iter()
                        .map(|xa| (2.0 * std::f64::consts::PI * periods * xa).cos())
                        .product::<f64>()
            }),
            InitialField::Bump {
                center,
                radius,
                low,
                high,
            } => ScalarField::from_fn(grid, |x| {
                let r2 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum::<f64>() / (radius * radius);
                if r2 < 1.0 {
                    low + (high - low) * (1.0 - 1.0 / (1.0 - r2)).exp()
                } else {
                    *low
                }
            }),
        };
        Ok(field)
    }

    pub fn probes(&self) -> Result<ObservableSet> {
        let mut steps: Vec<usize> = self
            .snapshot_times
            .iter()
            .map(|t| (t / self.model.dt).round() as usize)
            .collect();
        steps.sort_unstable();
        steps.dedup();
        let probes = ObservableSet {
            mass: self.observables.mass,
            energy: self.observables.energy,
            roughness: self.observables.roughness,
            snapshot_steps: steps,
        };
        probes.validate(self.n_steps())?;
        Ok(probes)
    }

    /// The model spec described by this config.
    pub fn to_spec(&self) -> Result<ModelSpec> {
        let m = &self.model;
        let phi0 = self.initial_phi()?;
        let grid = *phi0.grid();
        let spec = ModelSpec {
            variant: m.variant,
            alpha: m.alpha,
            epsilon: m.epsilon,
            potential: m.potential,
            mobility: m.mobility,
            source_f: None,
            grid,
            dt: m.dt,
            n_steps: self.n_steps(),
            initial_phi: phi0,
            initial_sigma: m.initial_sigma.map(|s| ScalarField::constant(grid, s)),
            clip_proliferation: m.clip_proliferation,
            newton: NewtonSettings {
                tol: self.solver.newton_tol,
                max_iter: self.solver.newton_max_iter,
                max_halvings: self.solver.max_halvings,
                ..NewtonSettings::default()
            },
            preconditioner: self.solver.preconditioner,
            mobility_jacobian: self.solver.mobility_jacobian,
        };
        spec.validate().map_err(|e| Error::config("model", e.to_string()))?;
        Ok(spec)
    }
}
