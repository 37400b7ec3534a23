//! Batch front end: config handling, run modes and output files.

pub mod config;
pub mod output;
pub mod presets;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;

pub use config::{parse_config, resolve, InitialField, Mode, RunConfig, Scale};
pub use output::{emit_field, emit_timeseries, read_timeseries};

use crate::error::Result;
use crate::grid::FeSpace;
use crate::sensitivity::{self, TumorTemplate};
use crate::solver::{self, ModelSpec};
use output::{fmt_f64, ArtifactWriter};

/// Files written by one invocation.
#[derive(Clone, Debug)]
pub struct Report {
    pub output_dir: PathBuf,
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

/// Runs the configured mode and writes its artifacts under `out`
/// (the config's `output_dir` when `None`).
pub fn execute(cfg: &RunConfig, out: Option<&Path>) -> Result<Report> {
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.clone());
    let mut w = ArtifactWriter::new(&dir)?;
    let resolved = serde_json::to_string_pretty(cfg).expect("config serializes") + "\n";
    w.write("config.json", &resolved)?;
    let summary = match cfg.mode {
        Mode::Simulate => simulate(cfg, &mut w)?,
        Mode::Sensitivity => sensitivity_mode(cfg, &mut w)?,
        Mode::Convergence => convergence(cfg, &mut w)?,
    };
    let artifacts = w.finish()?;
    Ok(Report {
        output_dir: dir,
        artifacts,
        summary,
    })
}

fn simulate(cfg: &RunConfig, w: &mut ArtifactWriter) -> Result<String> {
    let spec = cfg.to_spec()?;
    let probes = cfg.probes()?;
    let n = spec.n_steps;
    let out = solver::run_with(&spec, &probes, |step, res| {
        log::debug!("step {step}/{n}: {} Newton, {} Krylov", res.newton_iters, res.krylov_iters);
    })?;
    info!("simulated {n} steps in {:.2} s", out.wall_seconds);
    w.write("timeseries.csv", &output::timeseries_csv(&out.series)?)?;
    w.write("diagnostics.csv", &output::diagnostics_csv(&out.diagnostics))?;
    for snap in &out.snapshots {
        w.write(&format!("snapshots/phi_{:06}.vtk", snap.step), &output::vtk_string(&snap.phi, "phi"))?;
        if let Some(s) = &snap.sigma {
            w.write(&format!("snapshots/sigma_{:06}.vtk", snap.step), &output::vtk_string(s, "sigma"))?;
        }
    }
    let newton: usize = out.diagnostics.iter().map(|d| d.newton_iters).sum();
    Ok(format!(
        "simulate: {} steps to t={}, {} Newton iterations, {} snapshots",
        n,
        spec.final_time(),
        newton,
        out.snapshots.len()
    ))
}

fn sensitivity_mode(cfg: &RunConfig, w: &mut ArtifactWriter) -> Result<String> {
    let spec = cfg.to_spec()?;
    let s = &cfg.sensitivity;
    let template = TumorTemplate::equispaced(spec, s.qoi_times);
    let priors = s.priors.clone().unwrap_or_default();
    let result = sensitivity::run_sobol(
        &priors,
        s.samples,
        cfg.seed,
        s.workers,
        "tumor mass at equispaced times",
        |theta| sensitivity::qoi_tumor_mass(theta, &template),
    )?;
    let mut idx = String::from("parameter,index\n");
    for (name, v) in result.names.iter().zip(&result.indices) {
        let _ = writeln!(idx, "{name},{}", fmt_f64(*v));
    }
    w.write("sobol_indices.csv", &idx)?;
    let mut per = String::from("time");
    for name in &result.names {
        let _ = write!(per, ",{name}");
    }
    per.push('\n');
    for (t, row) in template.times.iter().zip(&result.per_component) {
        per.push_str(&fmt_f64(*t));
        for v in row {
            per.push(',');
            per.push_str(&fmt_f64(*v));
        }
        per.push('\n');
    }
    w.write("sobol_per_time.csv", &per)?;
    let mut ranked: Vec<(&String, f64)> = result.names.iter().zip(result.indices.iter().copied()).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(format!(
        "sensitivity: N={} samples, ranking {}",
        s.samples,
        ranked.iter().map(|(n, v)| format!("{n}={v:.3}")).collect::<Vec<_>>().join(" ")
    ))
}

/// Final-time solutions for `dt, dt/2, …` compared against the finest run in `L²`.
fn convergence(cfg: &RunConfig, w: &mut ArtifactWriter) -> Result<String> {
    let base = cfg.to_spec()?;
    let levels = cfg.convergence.refinements + 1;
    let fe = FeSpace::new(base.grid);
    let probes = crate::observables::ObservableSet::none();
    let finals = (0..levels)
        .map(|k| {
            let spec = ModelSpec {
                dt: base.dt / (1u64 << k) as f64,
                n_steps: base.n_steps << k,
                ..base.clone()
            };
            solver::run(&spec, &probes).map(|o| (spec.dt, spec.n_steps, o.final_phi))
        })
        .collect::<Result<Vec<_>>>()?;
    let reference = finals.last().expect("at least one level").2.values();
    let mut errors = Vec::new();
    for (_, _, phi) in &finals[..levels - 1] {
        let d: Vec<f64> = phi.values().iter().zip(reference).map(|(a, b)| a - b).collect();
        let md = fe.mass().spmv(&d)?;
        errors.push(d.iter().zip(&md).map(|(a, b)| a * b).sum::<f64>().sqrt());
    }
    let mut text = String::from("dt,n_steps,l2_error,observed_order\n");
    for (k, (dt, n, _)) in finals.iter().enumerate() {
        let err = errors.get(k).map(|e| fmt_f64(*e)).unwrap_or_default();
        let order = match (errors.get(k), errors.get(k + 1)) {
            (Some(a), Some(b)) if *a > 0.0 && *b > 0.0 => fmt_f64((a / b).log2()),
            _ => String::new(),
        };
        let _ = writeln!(text, "{},{n},{err},{order}", fmt_f64(*dt));
    }
    w.write("convergence.csv", &text)?;
    let shown: Vec<String> = errors.iter().map(|e| format!("{e:.3e}")).collect();
    Ok(format!("convergence: {levels} levels, errors against the finest [{}]", shown.join(", ")))
}
