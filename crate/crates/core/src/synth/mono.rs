//! Hidden warps that turn ground-truth depth into "monocular" predictions.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rasters::{DepthKind, DepthMap};

use super::{stream, SynthError, STREAM_MONO};

fn default_exponent() -> f64 {
    0.9
}

/// Depth-to-mono warp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Warp {
    /// m = (alpha z + beta) / (gamma z + delta)
    Rational {
        alpha: f64,
        beta: f64,
        gamma: f64,
        delta: f64,
    },
    /// m = scale z^exponent + offset; outside the rational family.
    Power {
        scale: f64,
        offset: f64,
        #[serde(default = "default_exponent")]
        exponent: f64,
    },
}

impl Warp {
    pub const IDENTITY: Warp = Warp::Rational {
        alpha: 1.0,
        beta: 0.0,
        gamma: 0.0,
        delta: 1.0,
    };

    pub fn apply(&self, z: f64) -> f64 {
        match *self {
            Warp::Rational { alpha, beta, gamma, delta } => (alpha * z + beta) / (gamma * z + delta),
            Warp::Power { scale, offset, exponent } => scale * z.powf(exponent) + offset,
        }
    }

    pub fn derivative(&self, z: f64) -> f64 {
        match *self {
            Warp::Rational { alpha, beta, gamma, delta } => {
                let den = gamma * z + delta;
                (alpha * delta - beta * gamma) / (den * den)
            }
            Warp::Power { scale, exponent, .. } => scale * exponent * z.powf(exponent - 1.0),
        }
    }

    /// Depth mapped to `m`, when defined.
    pub fn invert(&self, m: f64) -> Option<f64> {
        let z = match *self {
            Warp::Rational { alpha, beta, gamma, delta } => (delta * m - beta) / (alpha - gamma * m),
            Warp::Power { scale, offset, exponent } => ((m - offset) / scale).powf(1.0 / exponent),
        };
        z.is_finite().then_some(z)
    }

    pub fn pole(&self) -> Option<f64> {
        match *self {
            Warp::Rational { gamma, delta, .. } if gamma != 0.0 => Some(-delta / gamma),
            _ => None,
        }
    }

    /// Kind implied by the warp's orientation at depth `z`.
    pub fn natural_kind(&self, z: f64) -> DepthKind {
        if self.derivative(z) < 0.0 {
            DepthKind::Disparity
        } else {
            DepthKind::Relative
        }
    }

    /// Checks the warp is finite, monotone and pole-free over `[lo, hi]`.
    pub fn check(&self, lo: f64, hi: f64) -> Result<(), SynthError> {
        match *self {
            Warp::Rational { alpha, beta, gamma, delta } => {
                if ![alpha, beta, gamma, delta].iter().all(|v| v.is_finite()) {
                    return Err(SynthError::InvalidWarp("non-finite coefficients".into()));
                }
                let det = alpha * delta - beta * gamma;
                let scale = (alpha.abs() + beta.abs()) * (gamma.abs() + delta.abs());
                if !(det.abs() > 1e-12 * scale) {
                    return Err(SynthError::InvalidWarp(
                        "alpha*delta - beta*gamma = 0 gives a constant warp".into(),
                    ));
                }
                if let Some(p) = self.pole() {
                    if p >= lo && p <= hi {
                        return Err(SynthError::PoleInRange { pole: p, lo, hi });
                    }
                }
            }
            Warp::Power { scale, offset, exponent } => {
                if ![scale, offset, exponent].iter().all(|v| v.is_finite()) {
                    return Err(SynthError::InvalidWarp("non-finite coefficients".into()));
                }
                if scale == 0.0 || exponent == 0.0 {
                    return Err(SynthError::InvalidWarp("power warp is constant".into()));
                }
                if lo <= 0.0 {
                    return Err(SynthError::InvalidWarp("power warp needs positive depths".into()));
                }
            }
        }
        Ok(())
    }

    /// Random in-family warp that is monotone with its pole well outside
    /// `[lo, hi]`; decreasing when `kind` is disparity.
    pub fn random_rational(rng: &mut impl Rng, lo: f64, hi: f64, kind: DepthKind) -> Warp {
        let span = (hi - lo).max(1e-6);
        let z0 = lo - 0.25 * span;
        let d = 1.5 * span;
        let r = rng.gen_range(-0.5..=1.5);
        let s_abs = rng.gen_range(2.0..=10.0);
        let (m0, s) = if kind == DepthKind::Disparity {
            (0.2 + s_abs / (1.0 + r), -s_abs)
        } else {
            (rng.gen_range(0.2..=2.0), s_abs)
        };
        // m = (m0 + (m0 r + s) u) / (1 + r u), u = (z - z0) / d
        let alpha = m0 * r + s;
        Warp::Rational {
            alpha,
            beta: m0 * d - alpha * z0,
            gamma: r,
            delta: d - r * z0,
        }
    }

    pub fn random_power(rng: &mut impl Rng) -> Warp {
        Warp::Power {
            scale: rng.gen_range(0.01..=0.05),
            offset: rng.gen_range(-1.0..=1.0),
            exponent: default_exponent(),
        }
    }
}

/// Mono-space noise sigma whose effect on depth near `z_ref` is `sigma_z` meters.
pub fn mono_sigma_for_depth(warp: &Warp, sigma_z: f64, z_ref: f64) -> f64 {
    sigma_z * warp.derivative(z_ref).abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonoDegradeSpec {
    pub warp: Warp,
    pub kind: DepthKind,
    /// Additive Gaussian noise, mono units.
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Applies the hidden warp plus seeded noise to every valid pixel.
pub fn degrade_to_mono(
    gt: &DepthMap,
    spec: &MonoDegradeSpec,
    image_id: u32,
) -> Result<DepthMap, SynthError> {
    if spec.kind == DepthKind::Metric {
        return Err(SynthError::InvalidWarp("mono output cannot be tagged metric".into()));
    }
    if !(spec.noise_sigma >= 0.0) || !spec.noise_sigma.is_finite() {
        return Err(SynthError::InvalidWarp("noise sigma must be non-negative".into()));
    }
    let Some((lo, hi)) = gt.valid_range() else {
        return Ok(DepthMap::new(
            gt.width(),
            gt.height(),
            gt.values().to_vec(),
            gt.mask().to_vec(),
            spec.kind,
        )?);
    };
    spec.warp.check(lo, hi)?;
    let mut rng = stream(spec.seed, STREAM_MONO, image_id as u64);
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("checked sigma"));
    let values = gt
        .values()
        .iter()
        .zip(gt.mask())
        .map(|(&z, &ok)| {
            if !ok {
                return 0.0;
            }
            let m = spec.warp.apply(z);
            match &noise {
                Some(n) => m + n.sample(&mut rng),
                None => m,
            }
        })
        .collect();
    Ok(DepthMap::new(gt.width(), gt.height(), values, gt.mask().to_vec(), spec.kind)?)
}
