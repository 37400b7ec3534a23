//! Double-well potentials, mobility laws and their regularizations.
//!
//! Every potential is split as `Ψ = Ψ_explicit + Ψ_implicit` where the
//! explicit part is concave (expansive) and evaluated at the previous time
//! level, and the implicit part is convex (contractive) and solved for.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialLaw {
    /// `c (1 − x²)²`
    Landau { c: f64 },
    /// Logarithmic potential with its convex part extended quadratically
    /// outside `[−1 + delta, 1 − delta]`.
    FloryHuggins { theta: f64, theta0: f64, delta: f64 },
}

impl PotentialLaw {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PotentialLaw::Landau { c } => {
                if !(c > 0.0 && c.is_finite()) {
                    return Err(Error::Parameter(format!("Landau coefficient must be positive, got {c}")));
                }
            }
            PotentialLaw::FloryHuggins { theta, theta0, delta } => {
                if !(theta > 0.0 && theta0 > theta && theta0.is_finite()) {
                    return Err(Error::Parameter(format!(
                        "Flory-Huggins requires 0 < theta < theta0, got theta={theta}, theta0={theta0}"
                    )));
                }
                if !(delta > 0.0 && delta < 1.0) {
                    return Err(Error::Parameter(format!(
                        "Flory-Huggins regularization delta must lie in (0,1), got {delta}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn psi(&self, x: f64) -> f64 {
        match *self {
            PotentialLaw::Landau { c } => c * (1.0 - x * x).powi(2),
            PotentialLaw::FloryHuggins { theta0, .. } => {
                self.log_part(x) + 0.5 * theta0 * (1.0 - x * x)
            }
        }
    }

    pub fn psi_prime(&self, x: f64) -> f64 {
        self.explicit_deriv(x) + self.implicit_deriv(x)
    }

    pub fn psi_second(&self, x: f64) -> f64 {
        self.explicit_second(x) + self.implicit_second(x)
    }

    /// Derivative of the concave part (treated explicitly).
    pub fn explicit_deriv(&self, x: f64) -> f64 {
        match *self {
            PotentialLaw::Landau { c } => -4.0 * c * x,
            PotentialLaw::FloryHuggins { theta0, .. } => -theta0 * x,
        }
    }

    pub fn explicit_second(&self, _x: f64) -> f64 {
        match *self {
            PotentialLaw::Landau { c } => -4.0 * c,
            PotentialLaw::FloryHuggins { theta0, .. } => -theta0,
        }
    }

    /// Derivative of the convex part (treated implicitly).
    pub fn implicit_deriv(&self, x: f64) -> f64 {
        match *self {
            PotentialLaw::Landau { c } => 4.0 * c * x * x * x,
            PotentialLaw::FloryHuggins { theta, delta, .. } => {
                let b = 1.0 - delta;
                let log_d1 = |y: f64| theta * y.atanh();
                let d2 = theta / (1.0 - b * b);
                if x > b {
                    log_d1(b) + d2 * (x - b)
                } else if x < -b {
                    -log_d1(b) + d2 * (x + b)
                } else {
                    log_d1(x)
                }
            }
        }
    }

    /// Second derivative of the convex part; never negative.
    pub fn implicit_second(&self, x: f64) -> f64 {
        match *self {
            PotentialLaw::Landau { c } => 12.0 * c * x * x,
            PotentialLaw::FloryHuggins { theta, delta, .. } => {
                let b = 1.0 - delta;
                let y = x.clamp(-b, b);
                theta / (1.0 - y * y)
            }
        }
    }

    /// `(Ψ_explicit'(x_prev), Ψ_implicit'(x_curr))`
    pub fn split(&self, x_prev: f64, x_curr: f64) -> (f64, f64) {
        (self.explicit_deriv(x_prev), self.implicit_deriv(x_curr))
    }

    /// Lower bound on `Ψ''`.
    pub fn semiconvexity_bound(&self) -> f64 {
        match *self {
            PotentialLaw::Landau { c } => 4.0 * c,
            PotentialLaw::FloryHuggins { theta0, .. } => theta0,
        }
    }

    // regularized logarithmic part, C² and convex on ℝ
    fn log_part(&self, x: f64) -> f64 {
        let PotentialLaw::FloryHuggins { theta, delta, .. } = *self else {
            return 0.0;
        };
        let raw = |y: f64| 0.5 * theta * ((1.0 + y) * (1.0 + y).ln() + (1.0 - y) * (1.0 - y).ln());
        let b = 1.0 - delta;
        let d1 = theta * b.atanh();
        let d2 = theta / (1.0 - b * b);
        if x > b {
            let s = x - b;
            raw(b) + d1 * s + 0.5 * d2 * s * s
        } else if x < -b {
            let s = x + b;
            raw(b) - d1 * s + 0.5 * d2 * s * s
        } else {
            raw(x)
        }
    }
}

/// Free function form of [`PotentialLaw::psi`].
pub fn psi(p: &PotentialLaw, x: f64) -> f64 {
    p.psi(x)
}

/// `(Ψ₁'(x_prev), Ψ₂'(x_curr))` with Ψ₁ the explicit concave part.
pub fn psi_split(p: &PotentialLaw, x_prev: f64, x_curr: f64) -> (f64, f64) {
    p.split(x_prev, x_curr)
}

pub fn psi2_second(p: &PotentialLaw, x: f64) -> f64 {
    p.implicit_second(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum MobilityLaw {
    Constant { m: f64 },
    /// `m |1 − x²|^nu` on `[−1, 1]`, zero outside; with `delta > 0` the
    /// argument is clamped to `[−1 + delta, 1 − delta]`.
    Degenerate { m: f64, nu: f64, delta: f64 },
}

impl MobilityLaw {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MobilityLaw::Constant { m } => {
                if !(m > 0.0 && m.is_finite()) {
                    return Err(Error::Parameter(format!("mobility must be positive, got {m}")));
                }
            }
            MobilityLaw::Degenerate { m, nu, delta } => {
                if !(m > 0.0 && m.is_finite()) {
                    return Err(Error::Parameter(format!("mobility must be positive, got {m}")));
                }
                if !(nu >= 1.0 && nu.is_finite()) {
                    return Err(Error::Parameter(format!("mobility exponent must be >= 1, got {nu}")));
                }
                if !(0.0..1.0).contains(&delta) {
                    return Err(Error::Parameter(format!(
                        "mobility regularization must lie in [0,1), got {delta}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, MobilityLaw::Constant { .. })
    }

    pub fn value(&self, x: f64) -> f64 {
        match *self {
            MobilityLaw::Constant { m } => m,
            MobilityLaw::Degenerate { m, nu, delta } => {
                let y = if delta > 0.0 { x.clamp(delta - 1.0, 1.0 - delta) } else { x };
                if y.abs() >= 1.0 {
                    0.0
                } else {
                    m * (1.0 - y * y).powf(nu)
                }
            }
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            MobilityLaw::Constant { .. } => 0.0,
            MobilityLaw::Degenerate { m, nu, delta } => {
                if delta > 0.0 && x.abs() > 1.0 - delta {
                    return 0.0;
                }
                if x.abs() >= 1.0 {
                    return 0.0;
                }
                -2.0 * x * m * nu * (1.0 - x * x).powf(nu - 1.0)
            }
        }
    }

    /// Largest value over ℝ.
    pub fn max_value(&self) -> f64 {
        match *self {
            MobilityLaw::Constant { m } | MobilityLaw::Degenerate { m, .. } => m,
        }
    }
}

pub fn mobility(m: &MobilityLaw, x: f64) -> f64 {
    m.value(x)
}

pub fn mobility_deriv(m: &MobilityLaw, x: f64) -> f64 {
    m.derivative(x)
}
