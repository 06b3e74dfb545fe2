//! The quantizer zoo.
//!
//! Scalar proximal quantizers (identity, sign, the piecewise-linear family,
//! and the BNN prox) plus forward-backward pairs: a forward map `F` used in
//! the forward pass and a backward multiplier `B` substituted for `F'` in the
//! chain rule. Pairs carry a single mutable smoothing parameter; for the
//! piecewise-linear family it plays the role of the discretization radius ρ,
//! for the swish/tanh family it is the sharpness μ.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Binarizing projector with the tie at zero sent to +1.
pub fn sign_q(w: f64) -> f64 {
    if w < 0.0 {
        -1.0
    } else {
        1.0
    }
}

pub fn hard_tanh(w: f64) -> f64 {
    w.clamp(-1.0, 1.0)
}

fn sech2(z: f64) -> f64 {
    let c = z.cosh();
    1.0 / (c * c)
}

/// Sign-Swish forward: `(μw/2)·sech²(μw/2) + tanh(μw/2)`.
pub fn ss_forward(w: f64, mu: f64) -> f64 {
    let z = mu * w / 2.0;
    z * sech2(z) + z.tanh()
}

/// `∇SS(w) = μ[1 − (μw/2)·tanh(μw/2)]·sech²(μw/2)`.
pub fn ss_backward(w: f64, mu: f64) -> f64 {
    let z = mu * w / 2.0;
    mu * (1.0 - z * z.tanh()) * sech2(z)
}

/// BNN proximal quantizer: `sign(w)` inside the unit interval, shrunk
/// identity outside.
pub fn bnn_prox(w: f64, mu: f64) -> f64 {
    debug_assert!(mu > 1.0);
    if w.abs() <= 1.0 {
        sign_q(w)
    } else {
        w / mu + sign_q(w) * (1.0 - 1.0 / mu)
    }
}

/// Piecewise-linear quantizer on Q = {−1, +1} with horizontal shift `rho`
/// and vertical shift `vrho`, saturating to ±1 outside [−1, 1].
///
/// Knots: q1⁺ = min(0, −1+ρ), q2⁻ = max(0, 1−ρ), p2^∓ = ∓ϱ clamped to
/// [−1, 1]; straight lines in between. At the (set-valued) vertical segment
/// w = 0 we return +p2⁺, consistent with the +1 tie-break of [`sign_q`].
pub fn linear_quantizer(w: f64, rho: f64, vrho: f64) -> f64 {
    debug_assert!(rho >= 0.0 && vrho >= 0.0);
    let q1p = (-1.0 + rho).min(0.0);
    let q2m = (1.0 - rho).max(0.0);
    let p2p = vrho.min(1.0);
    let p2m = (-vrho).max(-1.0);
    if w >= q2m {
        // covers saturation w ≥ 1 and, when ρ ≥ 1, everything down to 0
        1.0
    } else if w <= q1p {
        -1.0
    } else if w > 0.0 {
        p2p + w * (1.0 - p2p) / q2m
    } else if w < 0.0 {
        -1.0 + (w - q1p) * (p2m + 1.0) / (-q1p)
    } else {
        p2p
    }
}

/// Scalar proximal quantizer, selectable by kind.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProximalQuantizer {
    Identity,
    Sign,
    Linear { rho: f64, vrho: f64 },
    Bnn { mu: f64 },
}

impl ProximalQuantizer {
    pub fn evaluate(&self, w: f64) -> f64 {
        match *self {
            ProximalQuantizer::Identity => w,
            ProximalQuantizer::Sign => sign_q(w),
            ProximalQuantizer::Linear { rho, vrho } => linear_quantizer(w, rho, vrho),
            ProximalQuantizer::Bnn { mu } => bnn_prox(w, mu),
        }
    }
}

pub type ScalarFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Forward-backward quantizer pair with one mutable smoothing parameter.
#[derive(Clone)]
pub struct QuantizerPair {
    pub name: String,
    pub mu: f64,
    forward: ScalarFn,
    backward: ScalarFn,
}

impl std::fmt::Debug for QuantizerPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("QuantizerPair")
            .field("name", &self.name)
            .field("mu", &self.mu)
            .finish()
    }
}


impl QuantizerPair {
    /// Build a pair from raw closures of `(w, μ)`.
    pub fn from_closures(
        name: &str,
        mu: f64,
        forward: ScalarFn,
        backward: ScalarFn,
    ) -> Self {
        QuantizerPair { name: name.to_string(), mu, forward, backward }
    }

    fn new(
        name: &str,
        mu: f64,
        forward: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        backward: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        QuantizerPair {
            name: name.to_string(),
            mu,
            forward: Arc::new(forward),
            backward: Arc::new(backward),
        }
    }

    pub fn forward(&self, w: f64) -> f64 {
        (self.forward)(w, self.mu)
    }

    pub fn backward(&self, w: f64) -> f64 {
        (self.backward)(w, self.mu)
    }

    pub fn set_mu(&mut self, mu: f64) {
        self.mu = mu;
    }

    /// Full-precision passthrough: `(identity, 1)`.
    pub fn full_precision() -> Self {
        QuantizerPair::new("fp", 1.0, |w, _| w, |_, _| 1.0)
    }

    /// BinaryConnect: `(sign, 1)`.
    pub fn binary_connect() -> Self {
        QuantizerPair::new("bc", 1.0, |w, _| sign_q(w), |_, _| 1.0)
    }

    /// ProxConnect with the piecewise-linear quantizer: `(LQ_ρ, 1)`; the
    /// pair's parameter is ρ.
    pub fn prox_connect(rho: f64) -> Self {
        QuantizerPair::new("pc", rho, |w, rho| linear_quantizer(w, rho, 0.0), |_, _| 1.0)
    }

    /// BNN: `(sign, 1_{[−1,1]})`.
    pub fn bnn() -> Self {
        QuantizerPair::new(
            "bnn",
            1.0,
            |w, _| sign_q(w),
            |w, _| if w.abs() <= 1.0 { 1.0 } else { 0.0 },
        )
    }

    /// BNN+: `(sign, ∇SS)`.
    pub fn bnn_plus(mu: f64) -> Self {
        QuantizerPair::new("bnn+", mu, |w, _| sign_q(w), ss_backward)
    }

    /// BNN++: `(SS, ∇SS)`.
    pub fn bnn_plus_plus(mu: f64) -> Self {
        QuantizerPair::new("bnn++", mu, ss_forward, ss_backward)
    }

    /// Pairs from the folklore straight-through estimators; `name` is one of
    /// `bireal | rbnn | poly_plus | ede | ede_plus | react`.
    pub fn appendix(name: &str) -> Result<Self> {
        let pair = match name {
            "bireal" => QuantizerPair::new(
                "bireal",
                1.0,
                |w, _| sign_q(w),
                |w, _| if w.abs() <= 1.0 { 2.0 - 2.0 * w.abs() } else { 0.0 },
            ),
            "rbnn" => QuantizerPair::new(
                "rbnn",
                1.0,
                |w, _| sign_q(w),
                |w, _| {
                    let half = std::f64::consts::FRAC_1_SQRT_2;
                    if w.abs() <= half {
                        std::f64::consts::SQRT_2 - 2.0 * w.abs()
                    } else {
                        0.0
                    }
                },
            ),
            "poly_plus" | "poly+" => {
                QuantizerPair::new(
                    "poly+",
                    1.0,
                    |w, mu| poly_forward(mu * w),
                    |w, mu| mu * poly_slope(mu * w),
                )
            }
            "ede" => QuantizerPair::new(
                "ede",
                10.0,
                |w, _| sign_q(w),
                |w, mu| mu * (1.0 - (mu * w).tanh().powi(2)),
            ),
            "ede_plus" | "ede+" => QuantizerPair::new(
                "ede+",
                10.0,
                |w, mu| (mu * w).tanh(),
                |w, mu| mu * (1.0 - (mu * w).tanh().powi(2)),
            ),
            "react" => {
                let tau = 0.5;
                QuantizerPair::new(
                    "react",
                    1.0,
                    move |w, _| sign_q(w - tau),
                    move |w, _| if (w - tau).abs() <= 1.0 { 1.0 } else { 0.0 },
                )
            }
            other => {
                return Err(Error::Config(format!("unknown quantizer pair '{other}'")));
            }
        };
        Ok(pair)
    }

    /// Look up any pair by config name.
    pub fn by_name(name: &str) -> Result<Self> {
        Ok(match name {
            "fp" => QuantizerPair::full_precision(),
            "bc" => QuantizerPair::binary_connect(),
            "pc" => QuantizerPair::prox_connect(0.01),
            "bnn" => QuantizerPair::bnn(),
            "bnn_plus" | "bnn+" => QuantizerPair::bnn_plus(5.0),
            "bnn_plus_plus" | "bnn++" => QuantizerPair::bnn_plus_plus(5.0),
            other => QuantizerPair::appendix(other)?,
        })
    }

    /// Composition `(F∘P, B∘P)` with a proximal quantizer.
    pub fn compose_with_prox(&self, prox: ProximalQuantizer) -> Self {
        let f = self.forward.clone();
        let b = self.backward.clone();
        QuantizerPair {
            name: format!("{}_o_prox", self.name),
            mu: self.mu,
            forward: Arc::new(move |w, mu| f(prox.evaluate(w), mu)),
            backward: Arc::new(move |w, mu| b(prox.evaluate(w), mu)),
        }
    }
}

/// Bi-Real style polynomial: `2w − w²` on [0,1], `2w + w²` on [−1,0], ±1
/// outside.
pub fn poly_forward(w: f64) -> f64 {
    if w >= 1.0 {
        1.0
    } else if w <= -1.0 {
        -1.0
    } else if w >= 0.0 {
        2.0 * w - w * w
    } else {
        2.0 * w + w * w
    }
}

pub fn poly_slope(w: f64) -> f64 {
    if w.abs() <= 1.0 {
        2.0 - 2.0 * w.abs()
    } else {
        0.0
    }
}
