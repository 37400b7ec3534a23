//! Independent reference implementations used as test oracles.
//!
//! Nothing here calls into the library's assembly, quadrature weights or
//! solvers; matrices are built densely from element formulas.

#![allow(dead_code, clippy::needless_range_loop)]

use statrs::function::gamma::ln_gamma;

pub type Dense = Vec<Vec<f64>>;

/// Gaussian elimination with partial pivoting. Entries outside the band
/// `[-kl, kl + ku]` around the diagonal are assumed zero, so a banded
/// system costs `O(n (kl + ku) kl)`; pass `n` for both to solve densely.
pub fn solve_banded(mut a: Dense, mut b: Vec<f64>, kl: usize, ku: usize) -> Vec<f64> {
    let n = b.len();
    let upper = kl + ku;
    for k in 0..n {
        let last = (k + kl).min(n - 1);
        let p = (k..=last).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        assert!(a[p][k].abs() > 0.0, "singular matrix at column {k}");
        a.swap(k, p);
        b.swap(k, p);
        let cols = (k + upper).min(n - 1);
        for i in k + 1..=last {
            let f = a[i][k] / a[k][k];
            if f == 0.0 {
                continue;
            }
            for j in k..=cols {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let cols = (i + upper).min(n - 1);
        let s: f64 = (i + 1..=cols).map(|j| a[i][j] * x[j]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

pub fn dense_solve(a: Dense, b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    solve_banded(a, b, n, n)
}

pub fn matvec(a: &Dense, x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(b).max(1e-300)
}

fn ln_abs_gamma(z: f64) -> f64 {
    if z > 0.0 {
        ln_gamma(z)
    } else {
        // reflection: Γ(z)Γ(1−z) = π / sin(πz)
        (std::f64::consts::PI / (std::f64::consts::PI * z).sin().abs()).ln() - ln_gamma(1.0 - z)
    }
}

fn gamma_sign(z: f64) -> f64 {
    if z > 0.0 || (z.floor() as i64) % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// `ln Γ(x) − ln Γ(y)` for `x, y > 0`. Large arguments use the Stirling
/// series with the leading terms differenced through `ln_1p`, which keeps
/// the result accurate where the two log-gammas are large and nearly equal.
pub fn ln_gamma_ratio(x: f64, y: f64) -> f64 {
    if x.min(y) < 20.0 {
        return ln_gamma(x) - ln_gamma(y);
    }
    let tail = |z: f64| {
        let z2 = z * z;
        1.0 / (12.0 * z) - 1.0 / (360.0 * z * z2) + 1.0 / (1260.0 * z * z2 * z2) - 1.0 / (1680.0 * z * z2 * z2 * z2)
    };
    let d = x - y;
    (x - 0.5) * (d / y).ln_1p() + d * y.ln() - d + tail(x) - tail(y)
}

/// `(−1)^j C(a, j) = Γ(j − a) / (Γ(−a) Γ(j + 1))` from log-gamma values.
pub fn binomial_weight(a: f64, j: usize) -> f64 {
    if j == 0 {
        return 1.0;
    }
    if a.fract() == 0.0 && a >= 0.0 {
        // finite sum: the coefficient vanishes for j > a
        let k = a as usize;
        if j > k {
            return 0.0;
        }
        let c: f64 = (0..j).map(|i| (a - i as f64) / (i + 1) as f64).product();
        return if j.is_multiple_of(2) { c } else { -c };
    }
    let jf = j as f64;
    let mag = (ln_gamma_ratio(jf - a, jf + 1.0) - ln_abs_gamma(-a)).exp();
    gamma_sign(jf - a) * gamma_sign(-a) * mag
}

const G: f64 = 0.577_350_269_189_625_8; // 1/√3

/// Q1 on a uniform tensor grid of `cells` per axis over `[0, 1]^d`, d ≤ 2,
/// with lexicographic node order (first axis fastest).
pub struct RefMesh {
    pub dim: usize,
    pub n: usize,
    pub h: f64,
}

/// Quadrature point of an element: global node indices, shape values,
/// shape gradients and weight.
pub struct QPoint {
    pub nodes: Vec<usize>,
    pub shape: Vec<f64>,
    pub grad: Vec<[f64; 2]>,
    pub weight: f64,
}

impl RefMesh {
    pub fn new(dim: usize, n: usize) -> Self {
        assert!(dim == 1 || dim == 2);
        Self { dim, n, h: 1.0 / n as f64 }
    }

    pub fn nodes(&self) -> usize {
        (self.n + 1).pow(self.dim as u32)
    }

    pub fn coords(&self, i: usize) -> [f64; 2] {
        let n1 = self.n + 1;
        [(i % n1) as f64 * self.h, (i / n1) as f64 * self.h]
    }

    /// All 2^d Gauss points of all elements.
    pub fn qpoints(&self) -> Vec<QPoint> {
        let h = self.h;
        let xi = [0.5 * (1.0 - G), 0.5 * (1.0 + G)];
        let mut out = Vec::new();
        let ey = if self.dim == 2 { self.n } else { 1 };
        for j in 0..ey {
            for i in 0..self.n {
                if self.dim == 1 {
                    for &s in &xi {
                        out.push(QPoint {
                            nodes: vec![i, i + 1],
                            shape: vec![1.0 - s, s],
                            grad: vec![[-1.0 / h, 0.0], [1.0 / h, 0.0]],
                            weight: 0.5 * h,
                        });
                    }
                } else {
                    let n1 = self.n + 1;
                    let base = j * n1 + i;
                    for &t in &xi {
                        for &s in &xi {
                            out.push(QPoint {
                                nodes: vec![base, base + 1, base + n1, base + n1 + 1],
                                shape: vec![(1.0 - s) * (1.0 - t), s * (1.0 - t), (1.0 - s) * t, s * t],
                                grad: vec![
                                    [-(1.0 - t) / h, -(1.0 - s) / h],
                                    [(1.0 - t) / h, -s / h],
                                    [-t / h, (1.0 - s) / h],
                                    [t / h, s / h],
                                ],
                                weight: 0.25 * h * h,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    /// `∫ c(φ_h) h_i h_j` densely; `c ≡ 1` gives the mass matrix.
    pub fn weighted_mass(&self, phi: &[f64], c: impl Fn(f64) -> f64) -> Dense {
        let nn = self.nodes();
        let mut m = vec![vec![0.0; nn]; nn];
        for q in self.qpoints() {
            let v: f64 = q.nodes.iter().zip(&q.shape).map(|(&k, s)| phi[k] * s).sum();
            let w = q.weight * c(v);
            for (a, &i) in q.nodes.iter().enumerate() {
                for (b, &j) in q.nodes.iter().enumerate() {
                    m[i][j] += w * q.shape[a] * q.shape[b];
                }
            }
        }
        m
    }

    pub fn mass(&self) -> Dense {
        let zero = vec![0.0; self.nodes()];
        self.weighted_mass(&zero, |_| 1.0)
    }

    /// `∫ c(φ_h) ∇h_i·∇h_j`.
    pub fn weighted_stiffness(&self, phi: &[f64], c: impl Fn(f64) -> f64) -> Dense {
        let nn = self.nodes();
        let mut k = vec![vec![0.0; nn]; nn];
        for q in self.qpoints() {
            let v: f64 = q.nodes.iter().zip(&q.shape).map(|(&i, s)| phi[i] * s).sum();
            let w = q.weight * c(v);
            for (a, &i) in q.nodes.iter().enumerate() {
                for (b, &j) in q.nodes.iter().enumerate() {
                    k[i][j] += w * (q.grad[a][0] * q.grad[b][0] + q.grad[a][1] * q.grad[b][1]);
                }
            }
        }
        k
    }

    pub fn stiffness(&self) -> Dense {
        let zero = vec![0.0; self.nodes()];
        self.weighted_stiffness(&zero, |_| 1.0)
    }

    /// `∫ g(φ_h, ψ_h) h_i`.
    pub fn load2(&self, phi: &[f64], psi: &[f64], g: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let mut out = vec![0.0; self.nodes()];
        for q in self.qpoints() {
            let u: f64 = q.nodes.iter().zip(&q.shape).map(|(&k, s)| phi[k] * s).sum();
            let v: f64 = q.nodes.iter().zip(&q.shape).map(|(&k, s)| psi[k] * s).sum();
            let w = q.weight * g(u, v);
            for (a, &i) in q.nodes.iter().enumerate() {
                out[i] += w * q.shape[a];
            }
        }
        out
    }

    pub fn load(&self, phi: &[f64], g: impl Fn(f64) -> f64) -> Vec<f64> {
        self.load2(phi, phi, |u, _| g(u))
    }

    /// `∫ m(φ_h) ∇μ_h·∇h_i`.
    pub fn flux_load(&self, phi: &[f64], mu: &[f64], m: impl Fn(f64) -> f64) -> Vec<f64> {
        let mut out = vec![0.0; self.nodes()];
        for q in self.qpoints() {
            let u: f64 = q.nodes.iter().zip(&q.shape).map(|(&k, s)| phi[k] * s).sum();
            let mut gm = [0.0; 2];
            for (a, &k) in q.nodes.iter().enumerate() {
                gm[0] += mu[k] * q.grad[a][0];
                gm[1] += mu[k] * q.grad[a][1];
            }
            let w = q.weight * m(u);
            for (a, &i) in q.nodes.iter().enumerate() {
                out[i] += w * (gm[0] * q.grad[a][0] + gm[1] * q.grad[a][1]);
            }
        }
        out
    }

    /// Half-bandwidth of the node coupling.
    pub fn node_band(&self) -> usize {
        if self.dim == 1 {
            1
        } else {
            self.n + 2
        }
    }
}

/// Parameters of the reference time-fractional step.
#[derive(Clone)]
pub struct RefModel {
    pub alpha: f64,
    pub dt: f64,
    pub eps: f64,
    /// Landau coefficient.
    pub c: f64,
    pub mobility: fn(f64) -> f64,
    /// Effective Ohta–Kawasaki coefficient `M κ` and mean.
    pub kappa: f64,
    pub mean: f64,
    /// Tumor `(λ, δ, χ, D)`.
    pub tumor: Option<(f64, f64, f64, f64)>,
    /// Clamp `φ` to `[0, 1]` inside `φ(1 − φ)`.
    pub clip: bool,
}

impl RefModel {
    pub fn proliferation(&self, p: f64) -> f64 {
        let y = if self.clip { p.clamp(0.0, 1.0) } else { p };
        y * (1.0 - y)
    }
}

/// Newton on the stacked `(φ, μ)` step system with a central-difference
/// Jacobian and elimination on interleaved unknowns `[φ_0, μ_0, φ_1, …]`
/// (dense for small systems, banded otherwise).
/// `history` holds `φ_0 … φ_{n−1}`.
pub fn reference_step(mesh: &RefMesh, model: &RefModel, history: &[Vec<f64>], sigma_prev: Option<&[f64]>, mu_guess: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let nn = mesh.nodes();
    let n = history.len();
    let b: Vec<f64> = (0..=n).map(|j| binomial_weight(model.alpha, j)).collect();
    let s = model.dt.powf(-model.alpha);
    let m = mesh.mass();
    let k = mesh.stiffness();
    let phi0 = &history[0];
    let prev = &history[n - 1];
    // history part: Σ_{j=1}^{n−1} b_j (φ_{n−j} − φ_0)
    let mut hist = vec![0.0; nn];
    for j in 1..n {
        for i in 0..nn {
            hist[i] += b[j] * (history[n - j][i] - phi0[i]);
        }
    }
    let c = model.c;
    let expl = mesh.load(prev, |x| -4.0 * c * x);
    let ones = vec![1.0; nn];
    let m1 = matvec(&m, &ones);
    let (src, chi_ms) = match (model.tumor, sigma_prev) {
        (Some((lambda, _, chi, _)), Some(sig)) => {
            let src = mesh.load2(prev, sig, |p, sg| lambda * model.proliferation(p) * sg);
            let ms = matvec(&m, sig);
            (src, ms.into_iter().map(|v| chi * v).collect())
        }
        _ => (vec![0.0; nn], vec![0.0; nn]),
    };
    let delta = model.tumor.map_or(0.0, |t| t.1);
    let residual = |x: &[f64]| -> Vec<f64> {
        let phi: Vec<f64> = (0..nn).map(|i| x[2 * i]).collect();
        let mu: Vec<f64> = (0..nn).map(|i| x[2 * i + 1]).collect();
        let d: Vec<f64> = (0..nn).map(|i| b[0] * (phi[i] - phi0[i]) + hist[i]).collect();
        let md = matvec(&m, &d);
        let mphi = matvec(&m, &phi);
        let flux = mesh.flux_load(&phi, &mu, model.mobility);
        let mmu = matvec(&m, &mu);
        let kphi = matvec(&k, &phi);
        let impl_ = mesh.load(&phi, |x| 4.0 * c * x * x * x);
        let mut r = vec![0.0; 2 * nn];
        for i in 0..nn {
            r[2 * i] = s * md[i] + flux[i] + (model.kappa + delta) * mphi[i] - model.kappa * model.mean * m1[i] - src[i];
            r[2 * i + 1] = mmu[i] - model.eps * model.eps * kphi[i] - impl_[i] - expl[i] + chi_ms[i];
        }
        r
    };
    let mut x = vec![0.0; 2 * nn];
    for i in 0..nn {
        x[2 * i] = prev[i];
        x[2 * i + 1] = mu_guess[i];
    }
    let band = 2 * mesh.node_band() + 1;
    let r0 = norm(&residual(&x));
    for _ in 0..60 {
        let r = residual(&x);
        if norm(&r) <= 1e-14 * r0.max(1.0) {
            break;
        }
        let mut jac = vec![vec![0.0; 2 * nn]; 2 * nn];
        for col in 0..2 * nn {
            let h = 1e-7 * x[col].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[col] += h;
            xm[col] -= h;
            let (rp, rm) = (residual(&xp), residual(&xm));
            for row in 0..2 * nn {
                jac[row][col] = (rp[row] - rm[row]) / (2.0 * h);
            }
        }
        let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        let dx = if 2 * nn <= 400 { dense_solve(jac, rhs) } else { solve_banded(jac, rhs, band, band) };
        for (xi, d) in x.iter_mut().zip(&dx) {
            *xi += d;
        }
    }
    let phi = (0..nn).map(|i| x[2 * i]).collect();
    let mu = (0..nn).map(|i| x[2 * i + 1]).collect();
    (phi, mu)
}

/// Backward-Euler nutrient update with the same splitting as the library's tumor step.
pub fn reference_sigma(mesh: &RefMesh, model: &RefModel, sigma_prev: &[f64], phi: &[f64]) -> Vec<f64> {
    let (lambda, delta, chi, d) = model.tumor.expect("tumor model");
    let m = mesh.mass();
    let k = mesh.stiffness();
    let r = mesh.weighted_mass(phi, |p| lambda * model.proliferation(p));
    let nn = mesh.nodes();
    let a: Dense = (0..nn)
        .map(|i| (0..nn).map(|j| m[i][j] / model.dt + d * k[i][j] + r[i][j]).collect())
        .collect();
    let ms = matvec(&m, sigma_prev);
    let kp = matvec(&k, phi);
    let mp = matvec(&m, phi);
    let rhs = (0..nn).map(|i| ms[i] / model.dt + d * chi * kp[i] + delta * mp[i]).collect();
    dense_solve(a, rhs)
}

/// `μ` with `M μ = ε² K φ + ∫ Ψ'(φ_h) h − χ M σ`.
pub fn reference_mu(mesh: &RefMesh, model: &RefModel, phi: &[f64], sigma: Option<&[f64]>) -> Vec<f64> {
    let m = mesh.mass();
    let kp = matvec(&mesh.stiffness(), phi);
    let c = model.c;
    let dpsi = mesh.load(phi, |x| 4.0 * c * x * (x * x - 1.0));
    let chi = model.tumor.map_or(0.0, |t| t.2);
    let ms = sigma.map(|s| matvec(&m, s)).unwrap_or_else(|| vec![0.0; phi.len()]);
    let rhs = (0..phi.len()).map(|i| model.eps * model.eps * kp[i] + dpsi[i] - chi * ms[i]).collect();
    dense_solve(m, rhs)
}

/// One backward-Euler convex-splitting step for constant-mobility
/// Cahn–Hilliard with Landau potential:
/// `M(φ − φ_prev)/Δt + m K μ = 0`, `M μ = ε² K φ + ∫(4cφ³ − 4cφ_prev) h`.
/// Newton with the analytic Jacobian and banded elimination.
pub fn backward_euler_step(mesh: &RefMesh, dt: f64, eps: f64, c: f64, m: f64, prev: &[f64], tol: f64) -> Vec<f64> {
    let nn = mesh.nodes();
    let mm = mesh.mass();
    let kk = mesh.stiffness();
    let expl = mesh.load(prev, |x| -4.0 * c * x);
    let mut phi = prev.to_vec();
    let mut mu = vec![0.0; nn];
    let band = 2 * mesh.node_band() + 1;
    let mut first = None;
    for _ in 0..50 {
        let mp = matvec(&mm, &phi);
        let mprev = matvec(&mm, prev);
        let kmu = matvec(&kk, &mu);
        let mmu = matvec(&mm, &mu);
        let kphi = matvec(&kk, &phi);
        let cubic = mesh.load(&phi, |x| 4.0 * c * x * x * x);
        let mut r = vec![0.0; 2 * nn];
        for i in 0..nn {
            r[2 * i] = (mp[i] - mprev[i]) / dt + m * kmu[i];
            r[2 * i + 1] = mmu[i] - eps * eps * kphi[i] - cubic[i] - expl[i];
        }
        let rn = norm(&r);
        let r0 = *first.get_or_insert(rn);
        if rn <= tol * f64::max(r0, 1.0) {
            break;
        }
        let w = mesh.weighted_mass(&phi, |x| 12.0 * c * x * x);
        let mut jac = vec![vec![0.0; 2 * nn]; 2 * nn];
        for i in 0..nn {
            let lo = i.saturating_sub(mesh.node_band());
            let hi = (i + mesh.node_band()).min(nn - 1);
            for j in lo..=hi {
                jac[2 * i][2 * j] = mm[i][j] / dt;
                jac[2 * i][2 * j + 1] = m * kk[i][j];
                jac[2 * i + 1][2 * j] = -eps * eps * kk[i][j] - w[i][j];
                jac[2 * i + 1][2 * j + 1] = mm[i][j];
            }
        }
        let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        let dx = solve_banded(jac, rhs, band, band);
        for i in 0..nn {
            phi[i] += dx[2 * i];
            mu[i] += dx[2 * i + 1];
        }
    }
    phi
}
