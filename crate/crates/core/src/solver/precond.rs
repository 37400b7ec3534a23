//! Preconditioner for the coupled `(φ, μ)` Newton systems on uniform grids.
//!
//! On a uniform tensor grid with natural boundary conditions the Q1 mass and
//! stiffness matrices share the cosine eigenbasis `V_{ik} = Π_a cos(π k_a i_a / n_a)`:
//! `M V = E V Λ_M` and `K V = E V Λ_K`, where `E` halves the rows of
//! boundary nodes per axis. A block operator with constant coefficients,
//!
//! ```text
//! P = [ a M             m K ]
//!     [ −(e K + w M)    M   ]
//! ```
//!
//! therefore decouples into one 2×2 system per cosine mode and is inverted
//! exactly with a DCT-I along every axis. Newton rows are scaled by the
//! lumped mass `D = (Π h) E`, so the scaled inverse is `(Π h) V B⁻¹ V⁻¹`.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::grid::StructuredGrid;
use crate::linalg::Preconditioner;

/// Grid-dependent part: eigenvalues per axis and FFT plans.
pub struct SpectralBasis {
    dim: usize,
    nodes: [usize; 3],
    lambda_m: Vec<Vec<f64>>,
    lambda_k: Vec<Vec<f64>>,
    plans: Vec<Arc<dyn Fft<f64>>>,
    cell_volume: f64,
}

impl std::fmt::Debug for SpectralBasis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralBasis")
            .field("dim", &self.dim)
            .field("nodes", &self.nodes)
            .finish()
    }
}

impl SpectralBasis {
    pub fn new(grid: &StructuredGrid) -> Self {
        let dim = grid.dim();
        let mut planner = FftPlanner::new();
        let mut nodes = [1; 3];
        let mut lambda_m = Vec::new();
        let mut lambda_k = Vec::new();
        let mut plans = Vec::new();
        for a in 0..dim {
            let n = grid.cells(a);
            let h = grid.spacing(a);
            nodes[a] = n + 1;
            let theta = |k: usize| std::f64::consts::PI * k as f64 / n as f64;
            lambda_m.push((0..=n).map(|k| h / 6.0 * (4.0 + 2.0 * theta(k).cos())).collect());
            lambda_k.push((0..=n).map(|k| (2.0 - 2.0 * theta(k).cos()) / h).collect());
            plans.push(planner.plan_fft_forward(2 * n));
        }
        let cell_volume = (0..dim).map(|a| grid.spacing(a)).product();
        Self {
            dim,
            nodes,
            lambda_m,
            lambda_k,
            plans,
            cell_volume,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.iter().product()
    }

    /// Mass and stiffness eigenvalues of mode `k` (lexicographic like the nodes).
    fn eigenvalues(&self, k: usize) -> (f64, f64) {
        let mut idx = [0; 3];
        let mut rest = k;
        for a in 0..self.dim {
            idx[a] = rest % self.nodes[a];
            rest /= self.nodes[a];
        }
        let mut lm = 1.0;
        for a in 0..self.dim {
            lm *= self.lambda_m[a][idx[a]];
        }
        let mut lk = 0.0;
        for a in 0..self.dim {
            let mut t = self.lambda_k[a][idx[a]];
            for b in 0..self.dim {
                if b != a {
                    t *= self.lambda_m[b][idx[b]];
                }
            }
            lk += t;
        }
        (lm, lk)
    }

    /// Unnormalized DCT-I along every axis:
    /// `y_k = x_0/2 + (−1)^k x_n/2 + Σ_{0<i<n} x_i cos(π k i / n)` per axis.
    fn dct1(&self, data: &mut [f64]) {
        let mut buf = Vec::new();
        let mut line = Vec::new();
        for a in 0..self.dim {
            let n1 = self.nodes[a];
            let n = n1 - 1;
            let stride: usize = self.nodes[..a].iter().product();
            let total = self.node_count();
            let outer = total / (n1 * stride);
            buf.resize(2 * n, Complex::new(0.0, 0.0));
            line.resize(n1, 0.0);
            for o in 0..outer {
                for s in 0..stride {
                    let base = o * n1 * stride + s;
                    for i in 0..n1 {
                        line[i] = data[base + i * stride];
                    }
                    buf[0] = Complex::new(line[0], 0.0);
                    for i in 1..n {
                        buf[i] = Complex::new(line[i], 0.0);
                        buf[2 * n - i] = buf[i];
                    }
                    buf[n] = Complex::new(line[n], 0.0);
                    self.plans[a].process(&mut buf);
                    for i in 0..n1 {
                        data[base + i * stride] = 0.5 * buf[i].re;
                    }
                }
            }
        }
    }

    /// `V⁻¹ x`
    fn analyse(&self, data: &mut [f64]) {
        self.dct1(data);
        for (k, v) in data.iter_mut().enumerate() {
            let mut rest = k;
            for a in 0..self.dim {
                let n1 = self.nodes[a];
                let i = rest % n1;
                rest /= n1;
                let n = (n1 - 1) as f64;
                *v /= if i == 0 || i == n1 - 1 { n } else { 0.5 * n };
            }
        }
    }

    /// `V y`
    fn synthesize(&self, data: &mut [f64]) {
        for (k, v) in data.iter_mut().enumerate() {
            let mut rest = k;
            for a in 0..self.dim {
                let n1 = self.nodes[a];
                let i = rest % n1;
                rest /= n1;
                if i == 0 || i == n1 - 1 {
                    *v *= 2.0;
                }
            }
        }
        self.dct1(data);
    }
}

/// Exact inverse of the constant-coefficient block operator in row-scaled form.
pub struct SpectralBlock {
    basis: Arc<SpectralBasis>,
    // inverse 2×2 blocks per mode, row major
    inv: Vec<[f64; 4]>,
}

impl SpectralBlock {
    /// `a`, `m`, `e`, `w` as in the module docs; `a > 0`, `m, e, w ≥ 0`.
    pub fn new(basis: Arc<SpectralBasis>, a: f64, m: f64, e: f64, w: f64) -> Self {
        let inv = (0..basis.node_count())
            .map(|k| {
                let (lm, lk) = basis.eigenvalues(k);
                let b11 = a * lm;
                let b12 = m * lk;
                let b21 = -(e * lk + w * lm);
                let b22 = lm;
                let det = b11 * b22 - b12 * b21;
                [b22 / det, -b12 / det, -b21 / det, b11 / det]
            })
            .collect();
        Self { basis, inv }
    }
}

impl Preconditioner for SpectralBlock {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        let n = self.basis.node_count();
        let (r1, r2) = r.split_at(n);
        let mut y1 = r1.to_vec();
        let mut y2 = r2.to_vec();
        self.basis.analyse(&mut y1);
        self.basis.analyse(&mut y2);
        for k in 0..n {
            let [i11, i12, i21, i22] = self.inv[k];
            let (u, v) = (y1[k], y2[k]);
            y1[k] = i11 * u + i12 * v;
            y2[k] = i21 * u + i22 * v;
        }
        self.basis.synthesize(&mut y1);
        self.basis.synthesize(&mut y2);
        let s = self.basis.cell_volume;
        let (z1, z2) = z.split_at_mut(n);
        for (zi, yi) in z1.iter_mut().zip(&y1) {
            *zi = s * yi;
        }
        for (zi, yi) in z2.iter_mut().zip(&y2) {
            *zi = s * yi;
        }
    }
}
