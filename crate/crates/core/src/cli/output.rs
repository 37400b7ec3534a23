//! CSV, VTK legacy and manifest writers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::ScalarField;
use crate::observables::TimeSeries;
use crate::solver::StepDiagnostics;

/// Shortest-exact scientific notation: 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Renders series that share one time axis as `time,<label>...` CSV.
pub fn timeseries_csv(series: &[TimeSeries]) -> Result<String> {
    let mut out = String::from("time");
    for s in series {
        out.push(',');
        out.push_str(&s.label);
    }
    out.push('\n');
    let Some(first) = series.first() else {
        return Ok(out);
    };
    for s in series {
        if s.times.len() != first.times.len() || s.times.iter().zip(&first.times).any(|(a, b)| a != b) {
            return Err(Error::Shape(format!(
                "series `{}` does not share the time axis of `{}`",
                s.label, first.label
            )));
        }
    }
    for (i, t) in first.times.iter().enumerate() {
        out.push_str(&fmt_f64(*t));
        for s in series {
            out.push(',');
            out.push_str(&fmt_f64(s.values[i]));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn emit_timeseries(series: &[TimeSeries], path: &Path) -> Result<()> {
    write_file(path, &timeseries_csv(series)?)
}

/// Parses a file written by [`emit_timeseries`] back into series.
pub fn read_timeseries(path: &Path) -> Result<Vec<TimeSeries>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Shape("empty CSV".into()))?;
    let labels: Vec<&str> = header.split(',').skip(1).collect();
    let mut times = Vec::new();
    let mut cols = vec![Vec::new(); labels.len()];
    for (n, line) in lines.enumerate() {
        let mut fields = line.split(',');
        let parse = |s: Option<&str>| -> Result<f64> {
            s.and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Shape(format!("bad number on CSV row {}", n + 2)))
        };
        times.push(parse(fields.next())?);
        for c in cols.iter_mut() {
            c.push(parse(fields.next())?);
        }
    }
    labels
        .into_iter()
        .zip(cols)
        .map(|(l, v)| TimeSeries::from_parts(l, times.clone(), v))
        .collect()
}

pub fn diagnostics_csv(diag: &[StepDiagnostics]) -> String {
    let mut out = String::from("step,time,newton_iterations,residual_norm,krylov_iterations,sigma_min\n");
    for d in diag {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            d.step,
            fmt_f64(d.time),
            d.newton_iters,
            fmt_f64(d.residual_norm),
            d.krylov_iters,
            d.sigma_min.map(fmt_f64).unwrap_or_default()
        );
    }
    out
}

/// VTK legacy ASCII `STRUCTURED_POINTS`; missing axes are written with one node.
pub fn vtk_string(field: &ScalarField, label: &str) -> String {
    let g = field.grid();
    let mut dims = [1usize; 3];
    let mut spacing = [1.0; 3];
    let mut origin = [0.0; 3];
    for a in 0..g.dim() {
        dims[a] = g.cells(a) + 1;
        spacing[a] = g.spacing(a);
        origin[a] = g.origin()[a];
    }
    let mut out = String::new();
    out.push_str("# vtk DataFile Version 3.0\n");
    let _ = writeln!(out, "{label}");
    out.push_str("ASCII\nDATASET STRUCTURED_POINTS\n");
    let _ = writeln!(out, "DIMENSIONS {} {} {}", dims[0], dims[1], dims[2]);
    let _ = writeln!(out, "ORIGIN {} {} {}", fmt_f64(origin[0]), fmt_f64(origin[1]), fmt_f64(origin[2]));
    let _ = writeln!(out, "SPACING {} {} {}", fmt_f64(spacing[0]), fmt_f64(spacing[1]), fmt_f64(spacing[2]));
    let _ = writeln!(out, "POINT_DATA {}", field.len());
    let _ = writeln!(out, "SCALARS {label} double 1");
    out.push_str("LOOKUP_TABLE default\n");
    for v in field.values() {
        out.push_str(&fmt_f64(*v));
        out.push('\n');
    }
    out
}

pub fn emit_field(field: &ScalarField, label: &str, path: &Path) -> Result<()> {
    write_file(path, &vtk_string(field, label))
}

/// Collects artifacts written below one directory.
#[derive(Debug)]
pub struct ArtifactWriter {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl ArtifactWriter {
    pub fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, contents: &str) -> Result<PathBuf> {
        let path = self.root.join(rel);
        write_file(&path, contents)?;
        self.files.push(PathBuf::from(rel));
        Ok(path)
    }

    /// Writes `manifest.csv` (`path,sha256,bytes`, sorted by path) and
    /// returns every artifact path including the manifest.
    pub fn finish(mut self) -> Result<Vec<PathBuf>> {
        self.files.sort();
        self.files.dedup();
        let mut out = String::from("path,sha256,bytes\n");
        for rel in &self.files {
            let path = self.root.join(rel);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let digest = hex::encode(Sha256::digest(&bytes));
            let name = rel.to_string_lossy().replace('\\', "/");
            let _ = writeln!(out, "{name},{digest},{}", bytes.len());
        }
        let manifest = self.root.join("manifest.csv");
        write_file(&manifest, &out)?;
        let mut all: Vec<PathBuf> = self.files.iter().map(|r| self.root.join(r)).collect();
        all.push(manifest);
        Ok(all)
    }
}
