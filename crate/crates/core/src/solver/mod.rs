//! Time stepping for the Cahn–Hilliard, Ohta–Kawasaki and tumor models.
//!
//! Each step solves the coupled `(φ_n, μ_n)` system
//!
//! ```text
//! c₀ M(φ_n − φ₀) + M·tail + K_{m(φ_n)} μ_n + (κ' + δ) M φ_n = M f + κ' m̄ M1 + S(φ_{n−1}, σ_{n−1})
//! M μ_n − ε² K φ_n − P(Ψ₂'(φ_n)) = P(Ψ₁'(φ_{n−1})) − χ M σ_{n−1}
//! ```
//!
//! by Newton's method, where `c₀ = b₀ Δt^{−α}`, `tail` is the convolution
//! history and `P(g)` is the load vector `∫ g h_i` of a quadrature-point
//! function. For the tumor model the nutrient `σ_n` is then advanced by one
//! backward-Euler solve.

mod precond;

use std::sync::Arc;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

pub use precond::{SpectralBasis, SpectralBlock};

use crate::error::{Error, Result};
use crate::exec;
use crate::grid::{FeSpace, ScalarField, StructuredGrid};
use crate::linalg::{self, BandLu, CsrMatrix, Jacobi, KrylovSettings, NewtonOutcome, NewtonProblem, NewtonSettings, Preconditioner};
use crate::observables::{self, ObservableSet, TimeSeries};
use crate::physics::{MobilityLaw, PotentialLaw};
use crate::quadrature::{self, GlWeights, HistoryBuffer};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelVariant {
    CahnHilliard,
    OhtaKawasaki {
        kappa: f64,
    },
    Tumor {
        lambda: f64,
        delta_apop: f64,
        chi: f64,
        diffusivity: f64,
    },
}

impl ModelVariant {
    pub fn name(&self) -> &'static str {
        match self {
            ModelVariant::CahnHilliard => "cahn_hilliard",
            ModelVariant::OhtaKawasaki { .. } => "ohta_kawasaki",
            ModelVariant::Tumor { .. } => "tumor",
        }
    }
}

/// How the Newton Jacobian treats the mobility `m(φ)` in `div(m(φ)∇μ)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MobilityJacobian {
    /// `m(φ)` frozen at the current iterate; the residual stays fully implicit.
    #[default]
    Lagged,
    /// Includes the `m'(φ) ∇μ` advection block.
    Full,
}

/// Preconditioner for the Krylov solves inside Newton.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreconditionerKind {
    /// Band LU in one dimension, cosine-spectral block solve otherwise.
    #[default]
    Auto,
    Jacobi,
    Spectral,
    Banded,
}

#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub variant: ModelVariant,
    pub alpha: f64,
    pub epsilon: f64,
    pub potential: PotentialLaw,
    pub mobility: MobilityLaw,
    pub source_f: Option<ScalarField>,
    pub grid: StructuredGrid,
    pub dt: f64,
    pub n_steps: usize,
    pub initial_phi: ScalarField,
    pub initial_sigma: Option<ScalarField>,
    /// Evaluate the proliferation factor `φ(1 − φ)` at `φ` clamped to `[0, 1]`.
    pub clip_proliferation: bool,
    pub newton: NewtonSettings,
    pub preconditioner: PreconditionerKind,
    pub mobility_jacobian: MobilityJacobian,
}

impl ModelSpec {
    /// Plain Cahn–Hilliard spec with default solver settings.
    pub fn cahn_hilliard(
        initial_phi: ScalarField,
        alpha: f64,
        epsilon: f64,
        potential: PotentialLaw,
        mobility: MobilityLaw,
        dt: f64,
        n_steps: usize,
    ) -> Self {
        Self {
            variant: ModelVariant::CahnHilliard,
            alpha,
            epsilon,
            potential,
            mobility,
            source_f: None,
            grid: *initial_phi.grid(),
            dt,
            n_steps,
            initial_phi,
            initial_sigma: None,
            clip_proliferation: false,
            newton: NewtonSettings::default(),
            preconditioner: PreconditionerKind::Auto,
            mobility_jacobian: MobilityJacobian::Lagged,
        }
    }

    pub fn final_time(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Parameter(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Parameter(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Parameter(format!("dt must be positive, got {}", self.dt)));
        }
        self.potential.validate()?;
        self.mobility.validate()?;
        if self.initial_phi.grid() != &self.grid {
            return Err(Error::Shape("initial phi lives on a different grid".into()));
        }
        if let Some(f) = &self.source_f {
            f.ensure_same_grid(&self.initial_phi)?;
        }
        match self.variant {
            ModelVariant::CahnHilliard => {
                if self.initial_sigma.is_some() {
                    return Err(Error::Parameter("initial sigma is only allowed for the tumor model".into()));
                }
            }
            ModelVariant::OhtaKawasaki { kappa } => {
                if !(kappa > 0.0 && kappa.is_finite()) {
                    return Err(Error::Parameter(format!("kappa must be positive, got {kappa}")));
                }
                if !self.mobility.is_constant() {
                    return Err(Error::Parameter("the Ohta-Kawasaki model requires a constant mobility".into()));
                }
                if self.initial_sigma.is_some() {
                    return Err(Error::Parameter("initial sigma is only allowed for the tumor model".into()));
                }
            }
            ModelVariant::Tumor {
                lambda,
                delta_apop,
                chi,
                diffusivity,
            } => {
                for (name, v) in [("lambda", lambda), ("delta_apop", delta_apop), ("chi", chi)] {
                    if !(v >= 0.0 && v.is_finite()) {
                        return Err(Error::Parameter(format!("{name} must be nonnegative, got {v}")));
                    }
                }
                if !(diffusivity > 0.0 && diffusivity.is_finite()) {
                    return Err(Error::Parameter(format!("diffusivity must be positive, got {diffusivity}")));
                }
                match &self.initial_sigma {
                    None => return Err(Error::Parameter("the tumor model requires an initial sigma".into())),
                    Some(s) => s.ensure_same_grid(&self.initial_phi)?,
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub phi: ScalarField,
    pub mu: ScalarField,
    pub sigma: Option<ScalarField>,
    pub newton_iters: usize,
    pub residual_norm: f64,
    pub krylov_iters: usize,
    /// Smallest nutrient value after the step, tumor model only.
    pub sigma_min: Option<f64>,
}

/// Per-step solver record; deterministic (no timings).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub time: f64,
    pub newton_iters: usize,
    pub residual_norm: f64,
    pub krylov_iters: usize,
    pub sigma_min: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Snapshot {
    pub step: usize,
    pub time: f64,
    pub phi: ScalarField,
    pub sigma: Option<ScalarField>,
}

#[derive(Clone, Debug)]
pub struct SimulationOutput {
    pub series: Vec<TimeSeries>,
    pub snapshots: Vec<Snapshot>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub final_phi: ScalarField,
    pub final_mu: ScalarField,
    pub final_sigma: Option<ScalarField>,
    pub wall_seconds: f64,
}

impl SimulationOutput {
    pub fn series(&self, label: &str) -> Option<&TimeSeries> {
        self.series.iter().find(|s| s.label == label)
    }
}

/// Proliferation factor `φ(1 − φ)`, optionally with `φ` clamped to `[0, 1]`.
fn proliferation(x: f64, clip: bool) -> f64 {
    let y = if clip { x.clamp(0.0, 1.0) } else { x };
    y * (1.0 - y)
}

/// Time-independent data shared by all steps of one spec.
struct Stepper {
    spec: ModelSpec,
    fe: FeSpace,
    inv_lumped: Vec<f64>,
    m_ones: Vec<f64>,
    m_f: Vec<f64>,
    mean_phi0: f64,
    kappa_eff: f64,
    delta_apop: f64,
    spectral: Option<Arc<SpectralBasis>>,
}

impl Stepper {
    fn new(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let fe = FeSpace::new(spec.grid);
        let inv_lumped = fe.lumped_mass().iter().map(|d| 1.0 / d).collect();
        let m_ones = fe.lumped_mass().to_vec();
        let m_f = match &spec.source_f {
            Some(f) => fe.mass().spmv(f.values())?,
            None => vec![0.0; fe.node_count()],
        };
        let mean_phi0 = observables::mass(&spec.initial_phi, fe.mass())? / spec.grid.volume();
        let kappa_eff = match spec.variant {
            ModelVariant::OhtaKawasaki { kappa } => spec.mobility.max_value() * kappa,
            _ => 0.0,
        };
        let delta_apop = match spec.variant {
            ModelVariant::Tumor { delta_apop, .. } => delta_apop,
            _ => 0.0,
        };
        let spectral = match spec.preconditioner {
            PreconditionerKind::Spectral => true,
            PreconditionerKind::Auto => spec.grid.dim() > 1,
            _ => false,
        }
        .then(|| Arc::new(SpectralBasis::new(&spec.grid)));
        Ok(Self {
            spec: spec.clone(),
            fe,
            inv_lumped,
            m_ones,
            m_f,
            mean_phi0,
            kappa_eff,
            delta_apop,
            spectral,
        })
    }

    fn n(&self) -> usize {
        self.fe.node_count()
    }

    fn weights(&self) -> Result<GlWeights> {
        GlWeights::new(self.spec.alpha, self.spec.dt, self.spec.n_steps.max(1))
    }

    fn chi(&self) -> f64 {
        match self.spec.variant {
            ModelVariant::Tumor { chi, .. } => chi,
            _ => 0.0,
        }
    }

    /// Chemical potential consistent with `phi`: `M μ = ε² K φ + P(Ψ'(φ)) − χ M σ`.
    fn initial_mu(&self, phi: &[f64], sigma: Option<&[f64]>) -> Result<Vec<f64>> {
        let eps2 = self.spec.epsilon * self.spec.epsilon;
        let kphi = self.fe.stiffness().spmv(phi)?;
        let dpsi: Vec<f64> = self.fe.interpolate(phi).into_iter().map(|x| self.spec.potential.psi_prime(x)).collect();
        let mut rhs = self.fe.load(&dpsi);
        for (r, k) in rhs.iter_mut().zip(&kphi) {
            *r += eps2 * k;
        }
        if let Some(s) = sigma {
            let ms = self.fe.mass().spmv(s)?;
            exec::axpy(-self.chi(), &ms, &mut rhs);
        }
        let settings = KrylovSettings {
            tol: 1e-13,
            max_iter: Some(1000),
        };
        let out = linalg::cg(self.fe.mass(), &rhs, None, &Jacobi::new(self.fe.mass()), settings)?;
        if !out.converged && out.relative_residual > 1e-10 {
            return Err(Error::Solver {
                method: "CG",
                iterations: out.iterations,
                residual: out.relative_residual,
            });
        }
        Ok(out.x)
    }

    /// Solves for `(φ_n, μ_n)` with `n = history.next_step()`.
    fn solve_phase(
        &self,
        history: &HistoryBuffer,
        w: &GlWeights,
        mu_guess: &[f64],
        sigma_prev: Option<&[f64]>,
    ) -> Result<(Vec<f64>, Vec<f64>, NewtonOutcome)> {
        let n = self.n();
        let spec = &self.spec;
        let fe = &self.fe;
        let phi0 = history.initial().values();
        let phi_prev = history.latest();
        let c0 = w.leading();
        let lin = self.kappa_eff + self.delta_apop;

        let tail = quadrature::history_tail_values(history, w)?;
        let m_tail = fe.mass().spmv(&tail)?;
        let m_phi0 = fe.mass().spmv(phi0)?;
        let mut rhs1 = vec![0.0; n];
        for i in 0..n {
            rhs1[i] = c0 * m_phi0[i] - m_tail[i] + self.m_f[i] + self.kappa_eff * self.mean_phi0 * self.m_ones[i];
        }
        let prev_q = fe.interpolate(phi_prev);
        let explicit: Vec<f64> = prev_q.iter().map(|&x| spec.potential.explicit_deriv(x)).collect();
        let mut rhs2 = fe.load(&explicit);
        if let (ModelVariant::Tumor { lambda, chi, .. }, Some(sigma)) = (spec.variant, sigma_prev) {
            let sigma_q = fe.interpolate(sigma);
            let source: Vec<f64> = prev_q
                .iter()
                .zip(&sigma_q)
                .map(|(&p, &s)| lambda * proliferation(p, spec.clip_proliferation) * s)
                .collect();
            let load = fe.load(&source);
            exec::axpy(1.0, &load, &mut rhs1);
            let ms = fe.mass().spmv(sigma)?;
            exec::axpy(-chi, &ms, &mut rhs2);
        }

        let mut problem = PhaseProblem {
            st: self,
            a: c0 + lin,
            rhs1,
            rhs2,
        };
        let mut x0 = Vec::with_capacity(2 * n);
        x0.extend_from_slice(phi_prev);
        x0.extend_from_slice(mu_guess);
        let out = linalg::newton(&mut problem, &x0, &spec.newton)?;
        let mu = out.x[n..].to_vec();
        let phi = out.x[..n].to_vec();
        Ok((phi, mu, out))
    }

    /// Backward-Euler nutrient update
    /// `(M/Δt + D K + R_λ(φ_n)) σ_n = M σ_{n−1}/Δt + D χ K φ_n + δ M φ_n`.
    fn solve_sigma(&self, sigma_prev: &[f64], phi: &[f64]) -> Result<(Vec<f64>, usize)> {
        let ModelVariant::Tumor {
            lambda,
            delta_apop,
            chi,
            diffusivity,
        } = self.spec.variant
        else {
            return Err(Error::Model("nutrient update requested for a model without nutrient".into()));
        };
        let fe = &self.fe;
        let dt = self.spec.dt;
        let clip = self.spec.clip_proliferation;
        let react: Vec<f64> = fe.interpolate(phi).into_iter().map(|x| lambda * proliferation(x, clip)).collect();
        let r = fe.weighted_mass(&react);
        let a = CsrMatrix::linear_combination(&[(1.0 / dt, fe.mass()), (diffusivity, fe.stiffness()), (1.0, &r)])?;
        let ms = fe.mass().spmv(sigma_prev)?;
        let kphi = fe.stiffness().spmv(phi)?;
        let mphi = fe.mass().spmv(phi)?;
        let rhs: Vec<f64> = (0..self.n())
            .map(|i| ms[i] / dt + diffusivity * chi * kphi[i] + delta_apop * mphi[i])
            .collect();
        let pc = Jacobi::new(&a);
        let settings = self.spec.newton.krylov;
        let out = linalg::cg(&a, &rhs, Some(sigma_prev), &pc, settings)?;
        if out.converged {
            return Ok((out.x, out.iterations));
        }
        debug!("nutrient CG stalled at {:.3e}, retrying with BiCGStab", out.relative_residual);
        let out2 = linalg::bicgstab(&a, &rhs, Some(sigma_prev), &pc, settings)?;
        if !out2.converged {
            return Err(Error::Solver {
                method: "BiCGStab",
                iterations: out.iterations + out2.iterations,
                residual: out2.relative_residual,
            });
        }
        Ok((out2.x, out.iterations + out2.iterations))
    }
}

/// The row-scaled residual `D⁻¹ R(φ, μ)` of one step.
struct PhaseProblem<'a> {
    st: &'a Stepper,
    a: f64,
    rhs1: Vec<f64>,
    rhs2: Vec<f64>,
}

impl PhaseProblem<'_> {
    fn assemble_jacobian(&self, x: &[f64], full: bool) -> Result<CsrMatrix> {
        let st = self.st;
        let fe = &st.fe;
        let spec = &st.spec;
        let (phi_q, grad_mu) = self.quad_state(x);
        let mob: Vec<f64> = phi_q.iter().map(|&p| spec.mobility.value(p)).collect();
        let k_m = fe.weighted_stiffness_q(&mob);
        let mut a11 = CsrMatrix::linear_combination(&[(self.a, fe.mass())])?;
        if full && !spec.mobility.is_constant() {
            let dmob: Vec<f64> = phi_q.iter().map(|&p| spec.mobility.derivative(p)).collect();
            let g = fe.weighted_advection(&dmob, &grad_mu);
            a11 = CsrMatrix::linear_combination(&[(1.0, &a11), (1.0, &g)])?;
        }
        let second: Vec<f64> = phi_q.iter().map(|&p| spec.potential.implicit_second(p)).collect();
        let w = fe.weighted_mass(&second);
        let eps2 = spec.epsilon * spec.epsilon;
        let a21 = CsrMatrix::linear_combination(&[(-eps2, fe.stiffness()), (-1.0, &w)])?;
        let mut j = CsrMatrix::block_2x2(&a11, &k_m, &a21, fe.mass())?;
        let d: Vec<f64> = st.inv_lumped.iter().chain(&st.inv_lumped).copied().collect();
        j.scale_rows(&d);
        Ok(j)
    }

    fn quad_state(&self, x: &[f64]) -> (Vec<f64>, Vec<[f64; 3]>) {
        let n = self.st.n();
        (self.st.fe.interpolate(&x[..n]), self.st.fe.gradient(&x[n..]))
    }
}

impl NewtonProblem for PhaseProblem<'_> {
    fn residual(&mut self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let st = self.st;
        let fe = &st.fe;
        let spec = &st.spec;
        let n = st.n();
        let (phi, mu) = x.split_at(n);
        let (phi_q, grad_mu) = self.quad_state(x);
        let flux: Vec<[f64; 3]> = phi_q
            .iter()
            .zip(&grad_mu)
            .map(|(&p, g)| {
                let m = spec.mobility.value(p);
                [m * g[0], m * g[1], m * g[2]]
            })
            .collect();
        let div = fe.gradient_load(&flux);
        let implicit: Vec<f64> = phi_q.iter().map(|&p| spec.potential.implicit_deriv(p)).collect();
        let p2 = fe.load(&implicit);
        let m_phi = fe.mass().spmv(phi)?;
        let m_mu = fe.mass().spmv(mu)?;
        let k_phi = fe.stiffness().spmv(phi)?;
        let eps2 = spec.epsilon * spec.epsilon;
        let (r1, r2) = out.split_at_mut(n);
        for i in 0..n {
            r1[i] = (self.a * m_phi[i] + div[i] - self.rhs1[i]) * st.inv_lumped[i];
            r2[i] = (m_mu[i] - eps2 * k_phi[i] - p2[i] - self.rhs2[i]) * st.inv_lumped[i];
        }
        Ok(())
    }

    fn jacobian(&mut self, x: &[f64]) -> Result<CsrMatrix> {
        self.assemble_jacobian(x, self.st.spec.mobility_jacobian == MobilityJacobian::Full)
    }

    fn fallback_jacobian(&mut self, x: &[f64]) -> Option<Result<CsrMatrix>> {
        let lagged = self.st.spec.mobility_jacobian == MobilityJacobian::Lagged;
        (lagged && !self.st.spec.mobility.is_constant()).then(|| self.assemble_jacobian(x, true))
    }

    fn preconditioner(&mut self, x: &[f64], jacobian: &CsrMatrix) -> Box<dyn Preconditioner> {
        let st = self.st;
        let spec = &st.spec;
        let kind = match spec.preconditioner {
            PreconditionerKind::Auto if spec.grid.dim() == 1 => PreconditionerKind::Banded,
            PreconditionerKind::Auto => PreconditionerKind::Spectral,
            k => k,
        };
        match kind {
            PreconditionerKind::Banded => {
                let n = st.n();
                let perm: Vec<usize> = (0..2 * n).map(|k| if k % 2 == 0 { k / 2 } else { n + k / 2 }).collect();
                match BandLu::new(jacobian, perm) {
                    Ok(lu) => Box::new(lu),
                    Err(e) => {
                        warn!("band factorization failed ({e}); falling back to Jacobi");
                        Box::new(Jacobi::new(jacobian))
                    }
                }
            }
            PreconditionerKind::Spectral => {
                let basis = st.spectral.clone().expect("spectral basis prepared");
                let phi_q = st.fe.interpolate(&x[..st.n()]);
                let volume = spec.grid.volume();
                let mob: Vec<f64> = phi_q.iter().map(|&p| spec.mobility.value(p)).collect();
                let second: Vec<f64> = phi_q.iter().map(|&p| spec.potential.implicit_second(p)).collect();
                let m_bar = st.fe.integrate(&mob) / volume;
                let w_bar = st.fe.integrate(&second) / volume;
                let eps2 = spec.epsilon * spec.epsilon;
                Box::new(SpectralBlock::new(basis, self.a, m_bar, eps2, w_bar))
            }
            _ => Box::new(linalg::PairJacobi::new(jacobian)),
        }
    }
}

fn field(grid: &StructuredGrid, values: Vec<f64>) -> Result<ScalarField> {
    ScalarField::new(*grid, values)
}

/// A running simulation: spec, discretization, history and current state.
pub struct Simulation {
    stepper: Stepper,
    weights: GlWeights,
    history: HistoryBuffer,
    mu: Vec<f64>,
    sigma: Option<Vec<f64>>,
}

impl Simulation {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        let stepper = Stepper::new(spec)?;
        let weights = stepper.weights()?;
        let sigma = spec.initial_sigma.as_ref().map(|s| s.values().to_vec());
        let mu = stepper.initial_mu(spec.initial_phi.values(), sigma.as_deref())?;
        Ok(Self {
            history: HistoryBuffer::new(spec.initial_phi.clone()),
            stepper,
            weights,
            mu,
            sigma,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.stepper.spec
    }

    pub fn fe(&self) -> &FeSpace {
        &self.stepper.fe
    }

    /// Number of completed steps.
    pub fn steps_done(&self) -> usize {
        self.history.len()
    }

    pub fn time(&self) -> f64 {
        self.history.len() as f64 * self.stepper.spec.dt
    }

    pub fn phi(&self) -> &[f64] {
        self.history.latest()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> Option<&[f64]> {
        self.sigma.as_deref()
    }

    /// Advances one step.
    pub fn step(&mut self) -> Result<StepResult> {
        let n = self.history.next_step();
        if n > self.weights.n_steps() {
            self.weights = GlWeights::new(self.stepper.spec.alpha, self.stepper.spec.dt, 2 * n)?;
        }
        let (phi, mu, out) = self
            .stepper
            .solve_phase(&self.history, &self.weights, &self.mu, self.sigma.as_deref())?;
        let mut krylov = out.krylov_iterations;
        let mut sigma_min = None;
        if let Some(sigma_prev) = &self.sigma {
            let (sigma, its) = self.stepper.solve_sigma(sigma_prev, &phi)?;
            krylov += its;
            let smin = sigma.iter().copied().fold(f64::INFINITY, f64::min);
            if !(smin > 0.0) {
                warn!("step {n}: nutrient has non-positive values (min {smin:.3e})");
            }
            sigma_min = Some(smin);
            self.sigma = Some(sigma);
        }
        let grid = self.stepper.spec.grid;
        self.history.push_values(phi.clone())?;
        self.mu = mu.clone();
        Ok(StepResult {
            phi: field(&grid, phi)?,
            mu: field(&grid, mu)?,
            sigma: self.sigma.clone().map(|s| field(&grid, s)).transpose()?,
            newton_iters: out.iterations,
            residual_norm: out.residual_norm,
            krylov_iters: krylov,
            sigma_min,
        })
    }
}

fn one_step(spec: &ModelSpec, history: &HistoryBuffer, w: &GlWeights, sigma_prev: Option<&ScalarField>) -> Result<StepResult> {
    let st = Stepper::new(spec)?;
    if history.initial() != &spec.initial_phi {
        return Err(Error::Parameter("history does not start at the spec's initial phi".into()));
    }
    if w.alpha() != spec.alpha || w.dt() != spec.dt {
        return Err(Error::Parameter("weights do not match the spec's alpha and dt".into()));
    }
    let sigma = sigma_prev.map(|s| s.values());
    let mu_guess = st.initial_mu(history.latest(), sigma)?;
    let (phi, mu, out) = st.solve_phase(history, w, &mu_guess, sigma)?;
    let mut krylov = out.krylov_iterations;
    let (sigma, sigma_min) = match sigma {
        Some(sp) => {
            let (s, its) = st.solve_sigma(sp, &phi)?;
            krylov += its;
            let smin = s.iter().copied().fold(f64::INFINITY, f64::min);
            if !(smin > 0.0) {
                warn!("nutrient has non-positive values (min {smin:.3e})");
            }
            (Some(field(&spec.grid, s)?), Some(smin))
        }
        None => (None, None),
    };
    Ok(StepResult {
        phi: field(&spec.grid, phi)?,
        mu: field(&spec.grid, mu)?,
        sigma,
        newton_iters: out.iterations,
        residual_norm: out.residual_norm,
        krylov_iters: krylov,
        sigma_min,
    })
}

/// One Cahn–Hilliard step from the given history.
pub fn step_ch(spec: &ModelSpec, history: &HistoryBuffer, w: &GlWeights) -> Result<StepResult> {
    if spec.variant != ModelVariant::CahnHilliard {
        return Err(Error::Parameter(format!("step_ch called with a {} spec", spec.variant.name())));
    }
    one_step(spec, history, w, None)
}

/// One Ohta–Kawasaki step; the mean mass is taken from the spec's initial phi.
pub fn step_ok(spec: &ModelSpec, history: &HistoryBuffer, w: &GlWeights) -> Result<StepResult> {
    if !matches!(spec.variant, ModelVariant::OhtaKawasaki { .. }) {
        return Err(Error::Parameter(format!("step_ok called with a {} spec", spec.variant.name())));
    }
    one_step(spec, history, w, None)
}

/// One split tumor step: `(φ, μ)` Newton solve, then the nutrient update.
pub fn step_tumor(spec: &ModelSpec, history: &HistoryBuffer, w: &GlWeights, sigma_prev: &ScalarField) -> Result<StepResult> {
    if !matches!(spec.variant, ModelVariant::Tumor { .. }) {
        return Err(Error::Parameter(format!("step_tumor called with a {} spec", spec.variant.name())));
    }
    sigma_prev.ensure_same_grid(&spec.initial_phi)?;
    one_step(spec, history, w, Some(sigma_prev))
}

struct Recorder<'a> {
    probes: &'a ObservableSet,
    series: Vec<TimeSeries>,
    snapshots: Vec<Snapshot>,
}

impl Recorder<'_> {
    fn record(&mut self, sim: &Simulation) -> Result<()> {
        let spec = sim.spec();
        let fe = sim.fe();
        let t = sim.time();
        let step = sim.steps_done();
        let phi = field(&spec.grid, sim.phi().to_vec())?;
        let mut k = 0;
        if self.probes.mass {
            self.series[k].push(t, observables::mass(&phi, fe.mass())?);
            k += 1;
        }
        if self.probes.energy {
            self.series[k].push(t, observables::energy(&phi, &spec.potential, spec.epsilon, fe)?);
            k += 1;
        }
        if self.probes.roughness {
            self.series[k].push(t, observables::roughness(&phi, fe.mass())?);
        }
        if self.probes.snapshot_steps.binary_search(&step).is_ok() {
            self.snapshots.push(Snapshot {
                step,
                time: t,
                phi,
                sigma: sim.sigma().map(|s| field(&spec.grid, s.to_vec())).transpose()?,
            });
        }
        Ok(())
    }
}

/// Runs all `spec.n_steps` steps, recording observables after every step.
pub fn run(spec: &ModelSpec, probes: &ObservableSet) -> Result<SimulationOutput> {
    run_with(spec, probes, |_, _| {})
}

/// As [`run`], calling `progress(step, result)` after every step.
pub fn run_with<F>(spec: &ModelSpec, probes: &ObservableSet, mut progress: F) -> Result<SimulationOutput>
where
    F: FnMut(usize, &StepResult),
{
    probes.validate(spec.n_steps)?;
    let start = std::time::Instant::now();
    let mut sim = Simulation::new(spec)?;
    let mut rec = Recorder {
        probes,
        series: probes.labels().into_iter().map(TimeSeries::new).collect(),
        snapshots: Vec::new(),
    };
    rec.record(&sim)?;
    let mut diagnostics = Vec::with_capacity(spec.n_steps);
    for n in 1..=spec.n_steps {
        let res = sim.step().map_err(|e| Error::Step {
            step: n,
            source: Box::new(e),
        })?;
        diagnostics.push(StepDiagnostics {
            step: n,
            time: sim.time(),
            newton_iters: res.newton_iters,
            residual_norm: res.residual_norm,
            krylov_iters: res.krylov_iters,
            sigma_min: res.sigma_min,
        });
        rec.record(&sim)?;
        progress(n, &res);
    }
    let grid = spec.grid;
    Ok(SimulationOutput {
        series: rec.series,
        snapshots: rec.snapshots,
        diagnostics,
        final_phi: field(&grid, sim.phi().to_vec())?,
        final_mu: field(&grid, sim.mu.clone())?,
        final_sigma: sim.sigma.clone().map(|s| field(&grid, s)).transpose()?,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}
