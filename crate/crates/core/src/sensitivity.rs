//! First-order Sobol indices by the A/B/C_i Monte Carlo matrix method.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::observables::ObservableSet;
use crate::physics::{MobilityLaw, PotentialLaw};
use crate::solver::{self, ModelSpec, ModelVariant};

/// Names of the tumor-model parameters in `θ` order.
pub const TUMOR_PARAMETERS: [&str; 8] = ["alpha", "M", "lambda", "delta", "C_psi", "epsilon", "chi", "D"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Uniform {
    pub lo: f64,
    pub hi: f64,
}

impl Uniform {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Independent uniform priors, one per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSet {
    pub names: Vec<String>,
    pub bounds: Vec<Uniform>,
}

impl Default for PriorSet {
    /// The tumor-model priors for `(α, M, λ, δ, C_Ψ, ε, χ, D)`.
    fn default() -> Self {
        let bounds = vec![
            Uniform::new(0.001, 1.0),
            Uniform::new(0.1, 1.0),
            Uniform::new(0.1, 1.0),
            Uniform::new(0.001, 0.01),
            Uniform::new(0.025, 2.5),
            Uniform::new(0.01, 0.1),
            Uniform::new(0.01, 0.5),
            Uniform::new(0.1, 1.0),
        ];
        Self {
            names: TUMOR_PARAMETERS.iter().map(|s| s.to_string()).collect(),
            bounds,
        }
    }
}

impl PriorSet {
    pub fn new(names: Vec<String>, bounds: Vec<Uniform>) -> Result<Self> {
        let p = Self { names, bounds };
        p.validate()?;
        Ok(p)
    }

    /// `k` parameters named `theta1..thetak`, all on `[lo, hi]`.
    pub fn uniform(k: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(
            (1..=k).map(|i| format!("theta{i}")).collect(),
            vec![Uniform::new(lo, hi); k],
        )
    }

    pub fn len(&self) -> usize {
        self.bounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bounds.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bounds.is_empty() || self.names.len() != self.bounds.len() {
            return Err(Error::Parameter(format!(
                "{} prior names for {} intervals",
                self.names.len(),
                self.bounds.len()
            )));
        }
        for (name, b) in self.names.iter().zip(&self.bounds) {
            if !(b.lo < b.hi && b.lo.is_finite() && b.hi.is_finite()) {
                return Err(Error::Parameter(format!(
                    "prior for {name} needs lo < hi, got [{}, {}]",
                    b.lo, b.hi
                )));
            }
        }
        Ok(())
    }

    /// Center of every interval.
    pub fn midpoint(&self) -> Vec<f64> {
        self.bounds.iter().map(|b| 0.5 * (b.lo + b.hi)).collect()
    }
}

/// Row-major sample matrix, `n` rows of `k` parameters.
pub type Matrix = Vec<Vec<f64>>;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMatrices {
    pub a: Matrix,
    pub b: Matrix,
    /// `c[i]` is `a` with column `i` taken from `b`.
    pub c: Vec<Matrix>,
}

/// Uniform in `[0, 1)` from an independent ChaCha8 position addressed by
/// `(seed, matrix, row, column)`.
fn unit_sample(seed: u64, matrix: u64, row: usize, col: usize, k: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(matrix);
    rng.set_word_pos(2 * (row as u128 * k as u128 + col as u128));
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn sample_matrices(priors: &PriorSet, n: usize, seed: u64) -> Result<SampleMatrices> {
    priors.validate()?;
    if n < 2 {
        return Err(Error::Parameter(format!("need at least 2 samples, got {n}")));
    }
    let k = priors.len();
    let draw = |matrix: u64| -> Matrix {
        (0..n)
            .map(|r| {
                priors
                    .bounds
                    .iter()
                    .enumerate()
                    .map(|(c, b)| b.lo + b.width() * unit_sample(seed, matrix, r, c, k))
                    .collect()
            })
            .collect()
    };
    let a = draw(0);
    let b = draw(1);
    let c = (0..k)
        .map(|i| {
            a.iter()
                .zip(&b)
                .map(|(ra, rb)| {
                    let mut row = ra.clone();
                    row[i] = rb[i];
                    row
                })
                .collect()
        })
        .collect();
    Ok(SampleMatrices { a, b, c })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SobolResult {
    pub names: Vec<String>,
    /// First-order index per parameter, averaged over QoI components.
    pub indices: Vec<f64>,
    /// Indices per QoI component, `per_component[t][i]`.
    pub per_component: Vec<Vec<f64>>,
    pub n_samples: usize,
    pub qoi_description: String,
    pub seed: u64,
}

/// First-order indices of a scalar QoI.
///
/// With `f₀` and `V` the mean and variance of the pooled `A ∪ B` outputs,
/// `S_i = (1/N) Σ_n (Q(B)_n − f₀)(Q(C_i)_n − f₀) / V`: rows of `B` and `C_i`
/// share only parameter `i`, so the numerator estimates `Var(E[Q | θ_i])`.
pub fn sobol_indices(qa: &[f64], qb: &[f64], qc: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = qa.len();
    if n < 2 || qb.len() != n || qc.iter().any(|c| c.len() != n) {
        return Err(Error::Shape(format!(
            "Sobol estimator needs equal-length outputs (>= 2), got A={}, B={}, C={:?}",
            n,
            qb.len(),
            qc.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    let nf = n as f64;
    let f0 = (qa.iter().sum::<f64>() + qb.iter().sum::<f64>()) / (2.0 * nf);
    let var = (qa.iter().chain(qb).map(|q| (q - f0) * (q - f0)).sum::<f64>()) / (2.0 * nf);
    if !(var > 1e-12 * f0 * f0) || var == 0.0 {
        return Err(Error::DegenerateVariance(format!(
            "output variance {var:.3e} is negligible against mean {f0:.3e}"
        )));
    }
    Ok(qc
        .iter()
        .map(|c| qb.iter().zip(c).map(|(b, ci)| (b - f0) * (ci - f0)).sum::<f64>() / nf / var)
        .collect())
}

/// Indices of a vector QoI: computed per component, then averaged uniformly.
/// `qa[n][t]` is component `t` of the output for sample row `n`.
pub fn sobol_indices_vector(
    names: &[String],
    qa: &[Vec<f64>],
    qb: &[Vec<f64>],
    qc: &[Vec<Vec<f64>>],
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let t_len = qa.first().map_or(0, Vec::len);
    if t_len == 0 || qc.len() != names.len() {
        return Err(Error::Shape("empty QoI or parameter count mismatch".into()));
    }
    let column = |m: &[Vec<f64>], t: usize| -> Result<Vec<f64>> {
        m.iter()
            .map(|row| {
                row.get(t)
                    .copied()
                    .ok_or_else(|| Error::Shape("QoI vectors differ in length".into()))
            })
            .collect()
    };
    let mut per = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let a = column(qa, t)?;
        let b = column(qb, t)?;
        let c = qc.iter().map(|m| column(m, t)).collect::<Result<Vec<_>>>()?;
        per.push(sobol_indices(&a, &b, &c)?);
    }
    let k = names.len();
    let avg = (0..k).map(|i| per.iter().map(|s| s[i]).sum::<f64>() / t_len as f64).collect();
    Ok((avg, per))
}

/// Runs `model` on every row of `A`, `B` and each `C_i` on a pool of
/// `workers` threads and returns the averaged indices.
pub fn run_sobol<F>(priors: &PriorSet, n: usize, seed: u64, workers: usize, description: &str, model: F) -> Result<SobolResult>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync + Send,
{
    let m = sample_matrices(priors, n, seed)?;
    let rows: Vec<&Vec<f64>> = m.a.iter().chain(&m.b).chain(m.c.iter().flatten()).collect();
    let outputs = exec::map_pool(workers, rows.len(), |r| {
        model(rows[r]).map_err(|e| Error::Sample {
            theta: rows[r].clone(),
            source: Box::new(e),
        })
    })?;
    let outputs = outputs.into_iter().collect::<Result<Vec<_>>>()?;
    let (qa, rest) = outputs.split_at(n);
    let (qb, rest) = rest.split_at(n);
    let qc: Vec<Vec<Vec<f64>>> = rest.chunks(n).map(<[Vec<f64>]>::to_vec).collect();
    let (indices, per_component) = sobol_indices_vector(&priors.names, qa, qb, &qc)?;
    Ok(SobolResult {
        names: priors.names.clone(),
        indices,
        per_component,
        n_samples: n,
        qoi_description: description.to_string(),
        seed,
    })
}

/// A tumor spec with QoI times; parameters are substituted per sample.
#[derive(Clone, Debug)]
pub struct TumorTemplate {
    pub spec: ModelSpec,
    /// Times at which the tumor mass is reported.
    pub times: Vec<f64>,
}

impl TumorTemplate {
    /// `count` equispaced times `T/count, 2T/count, …, T`.
    pub fn equispaced(spec: ModelSpec, count: usize) -> Self {
        let t_end = spec.final_time();
        let times = (1..=count).map(|k| t_end * k as f64 / count as f64).collect();
        Self { spec, times }
    }

    /// The template spec with `θ = (α, M, λ, δ, C_Ψ, ε, χ, D)` substituted.
    pub fn with_theta(&self, theta: &[f64]) -> Result<ModelSpec> {
        if theta.len() != 8 {
            return Err(Error::Shape(format!("theta needs 8 entries, got {}", theta.len())));
        }
        let mut spec = self.spec.clone();
        let ModelVariant::Tumor { .. } = spec.variant else {
            return Err(Error::Parameter("tumor template holds a non-tumor spec".into()));
        };
        spec.alpha = theta[0];
        spec.mobility = match spec.mobility {
            MobilityLaw::Constant { .. } => MobilityLaw::Constant { m: theta[1] },
            MobilityLaw::Degenerate { nu, delta, .. } => MobilityLaw::Degenerate { m: theta[1], nu, delta },
        };
        spec.variant = ModelVariant::Tumor {
            lambda: theta[2],
            delta_apop: theta[3],
            chi: theta[6],
            diffusivity: theta[7],
        };
        spec.potential = match spec.potential {
            PotentialLaw::Landau { .. } => PotentialLaw::Landau { c: theta[4] },
            other => other,
        };
        spec.epsilon = theta[5];
        Ok(spec)
    }
}

/// Tumor mass `∫ φ` at the template's QoI times.
pub fn qoi_tumor_mass(theta: &[f64], template: &TumorTemplate) -> Result<Vec<f64>> {
    let spec = template.with_theta(theta)?;
    let probes = ObservableSet {
        mass: true,
        energy: false,
        roughness: false,
        snapshot_steps: Vec::new(),
    };
    let out = solver::run(&spec, &probes)?;
    let mass = out.series("mass").expect("mass recorded");
    template
        .times
        .iter()
        .map(|&t| {
            mass.value_near(t)
                .ok_or_else(|| Error::Parameter("no samples recorded".into()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrices_are_built_column_by_column() {
        let p = PriorSet::default();
        let m = sample_matrices(&p, 50, 11).unwrap();
        for (i, c) in m.c.iter().enumerate() {
            for r in 0..50 {
                for j in 0..8 {
                    let expect = if j == i { m.b[r][j] } else { m.a[r][j] };
                    assert_eq!(c[r][j].to_bits(), expect.to_bits());
                }
            }
        }
        for row in m.a.iter().chain(&m.b) {
            for (v, b) in row.iter().zip(&p.bounds) {
                assert!(*v >= b.lo && *v < b.hi);
            }
        }
        assert_eq!(m, sample_matrices(&p, 50, 11).unwrap());
        assert_ne!(m.a, sample_matrices(&p, 50, 12).unwrap().a);
        assert_ne!(m.a, m.b);
    }

    #[test]
    fn sample_prefix_does_not_depend_on_n() {
        let p = PriorSet::default();
        let small = sample_matrices(&p, 10, 3).unwrap();
        let large = sample_matrices(&p, 40, 3).unwrap();
        assert_eq!(small.a[..], large.a[..10]);
        assert_eq!(small.b[..], large.b[..10]);
    }

    #[test]
    fn invalid_priors_and_sizes() {
        assert!(PriorSet::uniform(3, 1.0, 1.0).is_err());
        assert!(sample_matrices(&PriorSet::default(), 1, 0).is_err());
        let bad = PriorSet {
            names: vec!["a".into()],
            bounds: vec![],
        };
        assert!(sample_matrices(&bad, 5, 0).is_err());
    }

    fn evaluate(m: &SampleMatrices, f: impl Fn(&[f64]) -> f64) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
        let qa = m.a.iter().map(|r| f(r)).collect();
        let qb = m.b.iter().map(|r| f(r)).collect();
        let qc = m.c.iter().map(|c| c.iter().map(|r| f(r)).collect()).collect();
        (qa, qb, qc)
    }

    #[test]
    fn single_parameter_model() {
        let p = PriorSet::uniform(8, 0.0, 1.0).unwrap();
        let m = sample_matrices(&p, 10_000, 5).unwrap();
        let (qa, qb, qc) = evaluate(&m, |t| 3.0 * t[0] - 1.0);
        let s = sobol_indices(&qa, &qb, &qc).unwrap();
        assert!((s[0] - 1.0).abs() < 0.05, "{s:?}");
        assert!(s[1..].iter().all(|v| v.abs() < 0.05), "{s:?}");
    }

    #[test]
    fn affine_invariance() {
        let p = PriorSet::uniform(4, -1.0, 2.0).unwrap();
        let m = sample_matrices(&p, 500, 9).unwrap();
        let f = |t: &[f64]| t[0] * t[1] + (t[2] * 3.0).sin() + 0.2 * t[3];
        let (qa, qb, qc) = evaluate(&m, f);
        let (ra, rb, rc) = evaluate(&m, |t| -7.5 * f(t) + 120.0);
        let s = sobol_indices(&qa, &qb, &qc).unwrap();
        let r = sobol_indices(&ra, &rb, &rc).unwrap();
        for (a, b) in s.iter().zip(&r) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn symmetric_additive_model_gives_equal_indices() {
        let p = PriorSet::uniform(3, 0.0, 1.0).unwrap();
        let m = sample_matrices(&p, 10_000, 21).unwrap();
        let (qa, qb, qc) = evaluate(&m, |t| t[0] + t[1] + t[2]);
        let s = sobol_indices(&qa, &qb, &qc).unwrap();
        for v in &s {
            assert!((v - 1.0 / 3.0).abs() < 0.05, "{s:?}");
        }
    }

    #[test]
    fn constant_output_is_degenerate() {
        let q = vec![2.0; 10];
        let r = sobol_indices(&q, &q, &[q.clone(), q.clone()]);
        assert!(matches!(r, Err(Error::DegenerateVariance(_))));
        let z = vec![0.0; 10];
        assert!(matches!(sobol_indices(&z, &z, std::slice::from_ref(&z)), Err(Error::DegenerateVariance(_))));
    }

    #[test]
    fn vector_qoi_averages_components() {
        let p = PriorSet::uniform(2, 0.0, 1.0).unwrap();
        let out = run_sobol(&p, 2000, 1, 2, "test", |t| Ok(vec![t[0], t[1], t[0] + 1e-3 * t[1]])).unwrap();
        let per = &out.per_component;
        assert_eq!(per.len(), 3);
        for i in 0..2 {
            let avg = per.iter().map(|s| s[i]).sum::<f64>() / 3.0;
            assert!((avg - out.indices[i]).abs() < 1e-15);
        }
        assert!((per[0][0] - 1.0).abs() < 0.1 && (per[1][1] - 1.0).abs() < 0.1);
    }

    #[test]
    fn model_failures_name_the_sample() {
        let p = PriorSet::uniform(2, 0.0, 1.0).unwrap();
        let r = run_sobol(&p, 4, 0, 1, "fails", |t| {
            if t[0] > 0.0 {
                Err(Error::Model("boom".into()))
            } else {
                Ok(vec![1.0])
            }
        });
        match r {
            Err(Error::Sample { theta, .. }) => assert_eq!(theta.len(), 2),
            other => panic!("expected a sample error, got {other:?}"),
        }
    }
}
