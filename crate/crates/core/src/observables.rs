//! Mass, Ginzburg–Landau energy, interface roughness and power-law fits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::grid::{FeSpace, ScalarField};
use crate::linalg::CsrMatrix;
use crate::physics::PotentialLaw;

/// Which scalar observables to record, and at which steps to keep field snapshots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservableSet {
    pub mass: bool,
    pub energy: bool,
    pub roughness: bool,
    /// Step indices, sorted ascending.
    pub snapshot_steps: Vec<usize>,
}

impl Default for ObservableSet {
    fn default() -> Self {
        Self {
            mass: true,
            energy: true,
            roughness: true,
            snapshot_steps: Vec::new(),
        }
    }
}

impl ObservableSet {
    pub fn none() -> Self {
        Self {
            mass: false,
            energy: false,
            roughness: false,
            snapshot_steps: Vec::new(),
        }
    }

    pub fn validate(&self, n_steps: usize) -> Result<()> {
        if self.snapshot_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter("snapshot steps must be strictly increasing".into()));
        }
        if let Some(&s) = self.snapshot_steps.last() {
            if s > n_steps {
                return Err(Error::Parameter(format!("snapshot step {s} exceeds n_steps = {n_steps}")));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.mass {
            out.push("mass");
        }
        if self.energy {
            out.push("energy");
        }
        if self.roughness {
            out.push("roughness");
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    pub label: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            times: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn from_parts(label: impl Into<String>, times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::Shape(format!(
                "{} times but {} values",
                times.len(),
                values.len()
            )));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Domain("times must be strictly increasing".into()));
        }
        Ok(Self {
            label: label.into(),
            times,
            values,
        })
    }

    pub fn push(&mut self, t: f64, v: f64) {
        debug_assert!(self.times.last().is_none_or(|&l| l < t));
        self.times.push(t);
        self.values.push(v);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Value at the sample whose time is closest to `t`.
    pub fn value_near(&self, t: f64) -> Option<f64> {
        let i = self
            .times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))?
            .0;
        Some(self.values[i])
    }
}

fn check_len(phi: &ScalarField, m: &CsrMatrix) -> Result<()> {
    if m.n_rows() != phi.len() || m.n_cols() != phi.len() {
        return Err(Error::Shape(format!(
            "matrix is {}x{}, field has {} values",
            m.n_rows(),
            m.n_cols(),
            phi.len()
        )));
    }
    Ok(())
}

/// `1ᵀ M φ`
pub fn mass(phi: &ScalarField, m: &CsrMatrix) -> Result<f64> {
    check_len(phi, m)?;
    let mphi = m.spmv(phi.values())?;
    Ok(exec::sum_indexed(exec::Strategy::current(), mphi.len(), |i| mphi[i]))
}

/// `∫ Ψ(φ_h) + (ε²/2) φᵀKφ`, the potential integrated by element quadrature.
pub fn energy(phi: &ScalarField, p: &PotentialLaw, epsilon: f64, fe: &FeSpace) -> Result<f64> {
    check_len(phi, fe.mass())?;
    Ok(energy_values(phi.values(), p, epsilon, fe))
}

pub(crate) fn energy_values(phi: &[f64], p: &PotentialLaw, epsilon: f64, fe: &FeSpace) -> f64 {
    let psi: Vec<f64> = fe.interpolate(phi).into_iter().map(|x| p.psi(x)).collect();
    let bulk = fe.integrate(&psi);
    let kphi = fe.stiffness().spmv(phi).expect("stiffness matches field");
    bulk + 0.5 * epsilon * epsilon * exec::dot(phi, &kphi)
}

/// `sqrt((φ − m̄)ᵀ M (φ − m̄) / |Ω|)` with `m̄` the mean of `φ`.
pub fn roughness(phi: &ScalarField, m: &CsrMatrix) -> Result<f64> {
    check_len(phi, m)?;
    let volume: f64 = m.values().iter().sum();
    let mean = mass(phi, m)? / volume;
    let dev: Vec<f64> = phi.values().iter().map(|v| v - mean).collect();
    let mdev = m.spmv(&dev)?;
    Ok((exec::dot(&dev, &mdev).max(0.0) / volume).sqrt())
}

/// Least-squares slope of `ln value` against `ln time` over `window`
/// (default: the last half of the samples), with its coefficient of
/// determination.
pub fn fit_power_law(series: &TimeSeries, window: Option<std::ops::Range<usize>>) -> Result<(f64, f64)> {
    let n = series.len();
    let w = window.unwrap_or(n / 2..n);
    if w.end > n || w.len() < 3 {
        return Err(Error::Domain(format!(
            "power-law window {}..{} needs at least 3 samples within {n}",
            w.start, w.end
        )));
    }
    let mut xs = Vec::with_capacity(w.len());
    let mut ys = Vec::with_capacity(w.len());
    for i in w {
        let (t, v) = (series.times[i], series.values[i]);
        if !(t > 0.0) || !(v > 0.0) {
            return Err(Error::Domain(format!(
                "power-law fit needs positive times and values, got ({t}, {v}) at sample {i}"
            )));
        }
        xs.push(t.ln());
        ys.push(v.ln());
    }
    Ok(linear_fit(&xs, &ys))
}

/// Ordinary least squares `y ≈ a + b x`; returns `(b, r²)`. A perfect fit of
/// constant data reports `r² = 1`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::StructuredGrid;

    #[test]
    fn mass_examples() {
        let g = StructuredGrid::unit(3, 2).unwrap();
        let fe = FeSpace::new(g);
        let c = ScalarField::constant(g, 0.4);
        assert!((mass(&c, fe.mass()).unwrap() - 0.4).abs() < 1e-14);
        assert_eq!(mass(&ScalarField::constant(g, 0.0), fe.mass()).unwrap(), 0.0);
        let g1 = StructuredGrid::unit(1, 7).unwrap();
        let fe1 = FeSpace::new(g1);
        let lin = ScalarField::from_fn(g1, |x| x[0]);
        assert!((mass(&lin, fe1.mass()).unwrap() - 0.5).abs() < 1e-15);
        let wrong = ScalarField::constant(StructuredGrid::unit(1, 3).unwrap(), 1.0);
        assert!(matches!(mass(&wrong, fe.mass()), Err(Error::Shape(_))));
    }

    #[test]
    fn energy_examples() {
        let g = StructuredGrid::unit(2, 4).unwrap();
        let fe = FeSpace::new(g);
        let p = PotentialLaw::Landau { c: 0.25 };
        assert!(energy(&ScalarField::constant(g, 1.0), &p, 0.1, &fe).unwrap().abs() < 1e-15);
        let e0 = energy(&ScalarField::constant(g, 0.0), &p, 0.1, &fe).unwrap();
        assert!((e0 - 0.25).abs() < 1e-14);
    }

    #[test]
    fn energy_of_ramp_matches_fine_quadrature() {
        // φ = 2x − 1 on (0,1) is reproduced exactly by Q1, so the gradient
        // part is ε²/2 · 4 and the bulk part is ∫ c(1 − φ²)² only up to the
        // 2-point rule error per cell.
        let n = 64;
        let g = StructuredGrid::unit(1, n).unwrap();
        let fe = FeSpace::new(g);
        let c = 0.5;
        let eps = 0.05;
        let phi = ScalarField::from_fn(g, |x| 2.0 * x[0] - 1.0);
        let e = energy(&phi, &PotentialLaw::Landau { c }, eps, &fe).unwrap();
        let m = 200_000;
        let bulk: f64 = (0..m)
            .map(|k| {
                let x = (k as f64 + 0.5) / m as f64;
                let f = 2.0 * x - 1.0;
                c * (1.0 - f * f).powi(2) / m as f64
            })
            .sum();
        let exact = bulk + 0.5 * eps * eps * 4.0;
        assert!((e - exact).abs() < 1e-7, "{e} vs {exact}");
    }

    #[test]
    fn roughness_examples() {
        let g = StructuredGrid::unit(1, 10).unwrap();
        let fe = FeSpace::new(g);
        assert!(roughness(&ScalarField::constant(g, 0.3), fe.mass()).unwrap() < 1e-14);
        // ±1 split with the middle node at 0: W² = 1 − 4h/3
        let phi = ScalarField::from_fn(g, |x| {
            if x[0] < 0.5 - 1e-9 {
                -1.0
            } else if x[0] > 0.5 + 1e-9 {
                1.0
            } else {
                0.0
            }
        });
        let w = roughness(&phi, fe.mass()).unwrap();
        let h = 0.1;
        assert!((w * w - (1.0 - 4.0 * h / 3.0)).abs() < 1e-13);
        let scaled = ScalarField::new(g, phi.values().iter().map(|v| -2.5 * v + 0.7).collect()).unwrap();
        let ws = roughness(&scaled, fe.mass()).unwrap();
        assert!((ws - 2.5 * w).abs() < 1e-13);
    }

    #[test]
    fn power_law_examples() {
        let times: Vec<f64> = (1..=40).map(|k| k as f64 * 0.05).collect();
        let exact = TimeSeries::from_parts("e", times.clone(), times.iter().map(|t| t.powf(-0.3)).collect()).unwrap();
        let (b, r2) = fit_power_law(&exact, None).unwrap();
        assert!((b + 0.3).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
        let flat = TimeSeries::from_parts("e", times.clone(), vec![2.0; 40]).unwrap();
        assert!(fit_power_law(&flat, Some(0..40)).unwrap().0.abs() < 1e-12);
        let noisy: Vec<f64> = times
            .iter()
            .enumerate()
            .map(|(i, t)| 5.0 * t.powf(-0.1) * (1.0 + 1e-6 * ((i * 7919 % 13) as f64 / 6.0 - 1.0)))
            .collect();
        let s = TimeSeries::from_parts("e", times.clone(), noisy).unwrap();
        assert!((fit_power_law(&s, Some(0..40)).unwrap().0 + 0.1).abs() < 1e-3);
        let mut bad = exact.clone();
        bad.values[35] = 0.0;
        assert!(matches!(fit_power_law(&bad, None), Err(Error::Domain(_))));
        assert!(fit_power_law(&exact, Some(0..2)).is_err());
    }

    #[test]
    fn series_rejects_unsorted_times() {
        assert!(TimeSeries::from_parts("x", vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(TimeSeries::from_parts("x", vec![0.0], vec![1.0, 1.0]).is_err());
    }
}
