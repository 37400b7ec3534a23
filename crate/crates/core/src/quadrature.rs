//! Grünwald–Letnikov convolution quadrature for the Caputo derivative.

use crate::error::{Error, Result};
use crate::exec::{self, Strategy};
use crate::grid::ScalarField;

/// Weights `b_0..b_N` of the first-order convolution quadrature.
#[derive(Clone, Debug, PartialEq)]
pub struct GlWeights {
    alpha: f64,
    dt: f64,
    weights: Vec<f64>,
}

impl GlWeights {
    pub fn new(alpha: f64, dt: f64, n_steps: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Parameter(format!("alpha must lie in (0, 1], got {alpha}")));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Parameter(format!("dt must be positive, got {dt}")));
        }
        if n_steps == 0 {
            return Err(Error::Parameter("n_steps must be at least 1".into()));
        }
        let mut weights = Vec::with_capacity(n_steps + 1);
        weights.push(1.0);
        for j in 1..=n_steps {
            let jf = j as f64;
            let prev = weights[j - 1];
            weights.push(-(alpha - jf + 1.0) / jf * prev);
        }
        Ok(Self { alpha, dt, weights })
    }

    /// Same weights with a different step size.
    pub fn with_dt(mut self, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Parameter(format!("dt must be positive, got {dt}")));
        }
        self.dt = dt;
        Ok(self)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Largest step index the weights support.
    pub fn n_steps(&self) -> usize {
        self.weights.len() - 1
    }

    /// `dt^{-alpha}`
    pub fn scale(&self) -> f64 {
        self.dt.powf(-self.alpha)
    }

    /// Coefficient of the unknown state in the discrete derivative.
    pub fn leading(&self) -> f64 {
        self.scale() * self.weights[0]
    }
}

/// Weights for unit step size.
pub fn gl_weights(alpha: f64, n_steps: usize) -> Result<GlWeights> {
    GlWeights::new(alpha, 1.0, n_steps)
}

/// Full solution history `φ_0, φ_1, …, φ_{n-1}` of one field.
#[derive(Clone, Debug)]
pub struct HistoryBuffer {
    initial: ScalarField,
    snapshots: Vec<Vec<f64>>,
}

impl HistoryBuffer {
    pub fn new(initial: ScalarField) -> Self {
        Self {
            initial,
            snapshots: Vec::new(),
        }
    }

    pub fn initial(&self) -> &ScalarField {
        &self.initial
    }

    /// Number of completed steps; the next step to compute is `len() + 1`.
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// Index of the step the history is waiting for.
    pub fn next_step(&self) -> usize {
        self.snapshots.len() + 1
    }

    /// `φ_k` for `k = 0..=len()`.
    pub fn state(&self, k: usize) -> &[f64] {
        if k == 0 {
            self.initial.values()
        } else {
            &self.snapshots[k - 1]
        }
    }

    pub fn latest(&self) -> &[f64] {
        self.state(self.len())
    }

    pub fn push(&mut self, field: &ScalarField) -> Result<()> {
        self.initial.ensure_same_grid(field)?;
        self.snapshots.push(field.values().to_vec());
        Ok(())
    }

    pub fn push_values(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.initial.len() {
            return Err(Error::Shape(format!(
                "snapshot has {} values, history holds {}",
                values.len(),
                self.initial.len()
            )));
        }
        self.snapshots.push(values);
        Ok(())
    }

    fn check_weights(&self, w: &GlWeights) -> Result<()> {
        if w.n_steps() < self.next_step() {
            return Err(Error::Parameter(format!(
                "weights cover {} steps, history needs {}",
                w.n_steps(),
                self.next_step()
            )));
        }
        Ok(())
    }
}

/// `dt^{-α} Σ_{j=1}^{n-1} b_j (φ_{n-j} − φ_0)` as a raw vector, with `n = history.next_step()`.
pub fn history_tail_values(history: &HistoryBuffer, w: &GlWeights) -> Result<Vec<f64>> {
    history.check_weights(w)?;
    Ok(history_tail_with(Strategy::current(), history, w))
}

pub fn history_tail_with(strategy: Strategy, history: &HistoryBuffer, w: &GlWeights) -> Vec<f64> {
    let n = history.next_step();
    let phi0 = history.initial.values();
    let b = w.weights();
    let s = w.scale();
    let mut out = vec![0.0; phi0.len()];
    exec::for_each_chunk_mut(strategy, &mut out, exec::CHUNK, |off, chunk| {
        let len = chunk.len();
        for j in 1..n {
            let prev = &history.state(n - j)[off..off + len];
            let base = &phi0[off..off + len];
            let bj = b[j];
            for ((acc, p), p0) in chunk.iter_mut().zip(prev).zip(base) {
                *acc += bj * (p - p0);
            }
        }
        for acc in chunk.iter_mut() {
            *acc *= s;
        }
    });
    out
}

pub fn history_tail(history: &HistoryBuffer, w: &GlWeights) -> Result<ScalarField> {
    let values = history_tail_values(history, w)?;
    ScalarField::new(*history.initial.grid(), values)
}

/// Discrete Caputo derivative at step `n = history.next_step()` with `φ_n = current`.
pub fn caputo_residual(history: &HistoryBuffer, current: &ScalarField, w: &GlWeights) -> Result<ScalarField> {
    history.initial.ensure_same_grid(current)?;
    let tail = history_tail_values(history, w)?;
    let phi0 = history.initial.values();
    let s = w.scale();
    let b0 = w.weights()[0];
    let values = current
        .values()
        .iter()
        .zip(phi0)
        .zip(&tail)
        .map(|((c, p0), t)| s * b0 * (c - p0) + t)
        .collect();
    ScalarField::new(*current.grid(), values)
}
