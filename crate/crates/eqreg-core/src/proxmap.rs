//! Activation functions realized as proximal maps of convex conjugates.
//!
//! Each activation here is `prox_{R*}` for some proper convex lsc `R`; the
//! Moreau decomposition `prox_R(w) + prox_{R*}(w) = w` pairs it with a
//! partner map implemented independently, which the tests exploit.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Elementwise activation, each a proximal map of a convex conjugate:
///
/// * `Identity` — `R = indicator of {0}`
/// * `Relu` — `R = indicator of (-inf, 0]^s`
/// * `Softshrink(eps)` — `R = indicator of the inf-norm ball of radius eps`
/// * `Clamp(eps)` — `R = eps * l1-norm`
/// * `Tanh` — conjugate built from `w * atanh(w)`; no closed-form partner
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Softshrink { eps: f64 },
    Clamp { eps: f64 },
    Tanh,
}

impl Activation {
    pub fn softshrink(eps: f64) -> Result<Self> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "softshrink threshold must be positive, got {eps}"
            )));
        }
        Ok(Activation::Softshrink { eps })
    }

    pub fn clamp(eps: f64) -> Result<Self> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "clamp threshold must be positive, got {eps}"
            )));
        }
        Ok(Activation::Clamp { eps })
    }

    /// Scalar map.
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Activation::Identity => x,
            Activation::Relu => {
                if x >= 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Softshrink { eps } => {
                if x > eps {
                    x - eps
                } else if x < -eps {
                    x + eps
                } else {
                    0.0
                }
            }
            Activation::Clamp { eps } => x.clamp(-eps, eps),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Elementwise a.e. derivative; the subgradient choice at kink points
    /// (0 for ReLU, +/-eps for the shrink/clamp pair) is 0, so dead units
    /// pass no gradient.
    pub fn eval_derivative(&self, x: f64) -> f64 {
        match *self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softshrink { eps } => {
                if x.abs() > eps {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Clamp { eps } => {
                if x.abs() < eps {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn apply(&self, x: &Array1<f64>) -> Array1<f64> {
        x.mapv(|v| self.eval(v))
    }

    pub fn apply_derivative(&self, x: &Array1<f64>) -> Array1<f64> {
        x.mapv(|v| self.eval_derivative(v))
    }

    /// The Moreau partner `prox_R` of this map (`prox_{R*}`), implemented
    /// with its own case formula so that `prox_R(w) + prox_{R*}(w) = w` is a
    /// testable identity rather than a definition.
    pub fn moreau_partner(&self) -> Result<PartnerProx> {
        match *self {
            Activation::Identity => Ok(PartnerProx::Zero),
            Activation::Relu => Ok(PartnerProx::MinWithZero),
            Activation::Softshrink { eps } => Ok(PartnerProx::Clamp { eps }),
            Activation::Clamp { eps } => Ok(PartnerProx::Softshrink { eps }),
            Activation::Tanh => Err(Error::Unsupported("Moreau partner of tanh")),
        }
    }

    /// Value of the Moreau envelope `env_R(w) = min_v 1/2||v - w||^2 + R(v)`
    /// for the `R` whose conjugate prox this activation is; evaluated through
    /// the partner prox. Not available for tanh.
    pub fn envelope_value(&self, w: &Array1<f64>) -> Result<f64> {
        let partner = self.moreau_partner()?;
        let mut acc = 0.0;
        for &wi in w.iter() {
            let p = partner.eval(wi);
            let d = wi - p;
            acc += 0.5 * d * d;
            // R at the prox point: zero for the indicator cases, eps*|v| for
            // the l1 case behind the clamp activation.
            if let Activation::Clamp { eps } = *self {
                acc += eps * p.abs();
            }
        }
        Ok(acc)
    }
}

/// Partner proximal maps produced by [`Activation::moreau_partner`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartnerProx {
    /// prox of the indicator of {0}.
    Zero,
    /// prox of the indicator of (-inf, 0]^s, i.e. `min(w, 0)`.
    MinWithZero,
    Clamp { eps: f64 },
    Softshrink { eps: f64 },
}

impl PartnerProx {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            PartnerProx::Zero => 0.0,
            PartnerProx::MinWithZero => x.min(0.0),
            PartnerProx::Clamp { eps } => x.clamp(-eps, eps),
            PartnerProx::Softshrink { eps } => {
                if x > eps {
                    x - eps
                } else if x < -eps {
                    x + eps
                } else {
                    0.0
                }
            }
        }
    }

    pub fn apply(&self, x: &Array1<f64>) -> Array1<f64> {
        x.mapv(|v| self.eval(v))
    }
}
