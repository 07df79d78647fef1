//! The first-order rational depth model `f(m) = (a m + b) / (c m + d)`.

use serde::{Deserialize, Serialize};

use crate::rasters::{DepthKind, DepthMap};

use super::RecoveryError;

/// Fractional widening of the fitted mono range accepted at apply time.
pub const DEFAULT_RANGE_INFLATION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Ok,
    RejectedPole,
    RejectedInsufficient,
    Degraded,
}

impl std::fmt::Display for FitStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FitStatus::Ok => "ok",
            FitStatus::RejectedPole => "rejected_pole",
            FitStatus::RejectedInsufficient => "rejected_insufficient",
            FitStatus::Degraded => "degraded",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Monotonicity {
    Increasing,
    Decreasing,
}

/// Canonical representative of the projective class of `theta`: unit norm,
/// `d >= 0`, and `c >= 0` when `d == 0`. Returns `None` for the zero vector
/// or non-finite input.
pub fn normalize(theta: [f64; 4]) -> Option<[f64; 4]> {
    let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return None;
    }
    let [a, b, c, d] = theta;
    let flip = d < 0.0 || (d == 0.0 && (c < 0.0 || (c == 0.0 && (b < 0.0 || (b == 0.0 && a < 0.0)))));
    let s = if flip { -1.0 / norm } else { 1.0 / norm };
    Some([a * s, b * s, c * s, d * s])
}

/// Smallest admissible `|c m + d|` for a mono range.
pub fn denominator_floor(mono_range: [f64; 2]) -> f64 {
    1e-9 * mono_range[0].abs().max(mono_range[1].abs()).max(1.0)
}

pub fn inflate_range(mono_range: [f64; 2], inflation: f64) -> [f64; 2] {
    let span = mono_range[1] - mono_range[0];
    let pad = if span > 0.0 {
        inflation * span
    } else {
        inflation * mono_range[0].abs()
    };
    [mono_range[0] - pad, mono_range[1] + pad]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RationalModel {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    /// Mono values seen while fitting, `[min, max]`.
    pub mono_range: [f64; 2],
}

impl RationalModel {
    pub fn new(theta: [f64; 4], mono_range: [f64; 2]) -> Result<Self, RecoveryError> {
        let [a, b, c, d] = normalize(theta).ok_or(RecoveryError::ZeroCoefficients)?;
        if !(mono_range[0].is_finite() && mono_range[1].is_finite() && mono_range[0] <= mono_range[1]) {
            return Err(RecoveryError::InvalidRange(mono_range));
        }
        Ok(Self { a, b, c, d, mono_range })
    }

    pub fn identity(mono_range: [f64; 2]) -> Self {
        Self::new([1.0, 0.0, 0.0, 1.0], mono_range).expect("identity is valid")
    }

    pub fn coefficients(&self) -> [f64; 4] {
        [self.a, self.b, self.c, self.d]
    }

    pub fn numerator(&self, m: f64) -> f64 {
        self.a * m + self.b
    }

    pub fn denominator(&self, m: f64) -> f64 {
        self.c * m + self.d
    }

    pub fn eval(&self, m: f64) -> f64 {
        self.numerator(m) / self.denominator(m)
    }

    /// `ad - bc`; its sign is the sign of `f'` wherever `f` is defined.
    pub fn determinant(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    pub fn monotonicity(&self) -> Option<Monotonicity> {
        let det = self.determinant();
        if det > 0.0 {
            Some(Monotonicity::Increasing)
        } else if det < 0.0 {
            Some(Monotonicity::Decreasing)
        } else {
            None
        }
    }
}

/// Pole check over `mono_range` widened by the default inflation.
pub fn validate_model(model: &RationalModel, mono_range: [f64; 2]) -> FitStatus {
    validate_model_with(model, mono_range, DEFAULT_RANGE_INFLATION, None)
}

/// Pole and orientation check. A denominator that changes sign or comes
/// within the floor of zero on the inflated range is a pole; a constant
/// model, or one whose monotonicity disagrees with `expected`, is degraded.
pub fn validate_model_with(
    model: &RationalModel,
    mono_range: [f64; 2],
    inflation: f64,
    expected: Option<Monotonicity>,
) -> FitStatus {
    let [lo, hi] = inflate_range(mono_range, inflation);
    let floor = denominator_floor(mono_range);
    let (dl, dh) = (model.denominator(lo), model.denominator(hi));
    // linear in m, so the endpoints bound |D| when the sign holds
    if !(dl.is_finite() && dh.is_finite()) || dl.signum() != dh.signum() || dl.abs().min(dh.abs()) < floor {
        return FitStatus::RejectedPole;
    }
    match (model.monotonicity(), expected) {
        (None, _) => FitStatus::Degraded,
        (Some(got), Some(want)) if got != want => FitStatus::Degraded,
        _ => FitStatus::Ok,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplyStats {
    pub converted: usize,
    pub out_of_range: usize,
    pub near_pole: usize,
    pub non_positive: usize,
}

impl ApplyStats {
    pub fn invalidated(&self) -> usize {
        self.out_of_range + self.near_pole + self.non_positive
    }
}

/// Maps a relative or disparity map to metric depth. Pixels outside the
/// inflated fitting range, near the pole, or mapping to a non-positive or
/// non-finite depth become invalid.
pub fn apply_model(
    model: &RationalModel,
    mono: &DepthMap,
    inflation: f64,
) -> Result<(DepthMap, ApplyStats), RecoveryError> {
    if mono.kind() == DepthKind::Metric {
        return Err(RecoveryError::KindMismatch(mono.kind()));
    }
    let [lo, hi] = inflate_range(model.mono_range, inflation);
    let floor = denominator_floor(model.mono_range);
    let mut stats = ApplyStats::default();
    let n = mono.width() * mono.height();
    let mut values = vec![0.0; n];
    let mut valid = vec![false; n];
    for (i, (&v, &ok)) in mono.values().iter().zip(mono.mask()).enumerate() {
        if !ok {
            continue;
        }
        if v < lo || v > hi {
            stats.out_of_range += 1;
            continue;
        }
        let den = model.denominator(v);
        if den.abs() < floor {
            stats.near_pole += 1;
            continue;
        }
        let z = model.numerator(v) / den;
        if !(z > 0.0 && z.is_finite()) {
            stats.non_positive += 1;
            continue;
        }
        values[i] = z;
        valid[i] = true;
        stats.converted += 1;
    }
    let out = DepthMap::new(mono.width(), mono.height(), values, valid, DepthKind::Metric)?;
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn validate_examples() {
        let id = RationalModel::identity([0.0, 1.0]);
        assert_eq!(validate_model(&id, [0.0, 1.0]), FitStatus::Ok);

        let pole = RationalModel::new([0.0, 1.0, 1.0, -0.5], [0.0, 1.0]).unwrap();
        assert_eq!(validate_model(&pole, [0.0, 1.0]), FitStatus::RejectedPole);

        let affine = RationalModel::new([2.0, 3.0, 0.0, 1.0], [-50.0, 80.0]).unwrap();
        assert_eq!(validate_model(&affine, [-50.0, 80.0]), FitStatus::Ok);
        assert_eq!(affine.monotonicity(), Some(Monotonicity::Increasing));
    }

    #[test]
    fn pole_just_outside_range_is_caught_by_inflation() {
        // pole at m = 1.05, inside [0, 1] widened by 10%
        let m = RationalModel::new([1.0, 0.0, -1.0, 1.05], [0.0, 1.0]).unwrap();
        assert_eq!(validate_model(&m, [0.0, 1.0]), FitStatus::RejectedPole);
        assert_eq!(validate_model_with(&m, [0.0, 1.0], 0.0, None), FitStatus::Ok);
    }

    #[test]
    fn orientation_mismatch_is_degraded() {
        let m = RationalModel::new([-1.0, 10.0, 0.0, 1.0], [0.0, 1.0]).unwrap();
        assert_eq!(
            validate_model_with(&m, [0.0, 1.0], 0.1, Some(Monotonicity::Increasing)),
            FitStatus::Degraded
        );
        let constant = RationalModel::new([0.0, 5.0, 0.0, 1.0], [0.0, 1.0]).unwrap();
        assert_eq!(validate_model(&constant, [0.0, 1.0]), FitStatus::Degraded);
    }

    #[test]
    fn apply_examples() {
        let map = DepthMap::from_values(3, 2, vec![0.5, 1.0, 2.0, 3.0, 4.0, 5.0], DepthKind::Relative).unwrap();
        let (out, stats) = apply_model(&RationalModel::identity([0.5, 5.0]), &map, 0.1).unwrap();
        assert_eq!(out.kind(), DepthKind::Metric);
        for (a, b) in out.values().iter().zip(map.values()) {
            assert!((a - b).abs() <= 1e-15 * b);
        }
        assert_eq!(stats.converted, 6);

        let five = DepthMap::filled(4, 4, 5.0, DepthKind::Disparity).unwrap();
        let m = RationalModel::new([2.0, 3.0, 0.0, 1.0], [5.0, 5.0]).unwrap();
        let (out, _) = apply_model(&m, &five, 0.1).unwrap();
        for &v in out.values() {
            assert!((v - 13.0).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_invalidates_pole_and_range() {
        // pole at m = 2
        let m = RationalModel::new([1.0, 0.0, -1.0, 2.0], [0.0, 20.0]).unwrap();
        let map = DepthMap::from_values(4, 1, vec![1.0, 2.0, 3.0, 40.0], DepthKind::Relative).unwrap();
        let (out, stats) = apply_model(&m, &map, 0.1).unwrap();
        assert!((out.get(0, 0).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(out.get(1, 0), None);
        assert_eq!(out.get(2, 0), None);
        assert_eq!(out.get(3, 0), None);
        assert_eq!(stats.near_pole, 1);
        assert_eq!(stats.non_positive, 1);
        assert_eq!(stats.out_of_range, 1);
    }

    #[test]
    fn metric_input_is_rejected() {
        let map = DepthMap::filled(2, 2, 5.0, DepthKind::Metric).unwrap();
        assert!(apply_model(&RationalModel::identity([0.0, 10.0]), &map, 0.1).is_err());
    }

    #[test]
    fn zero_coefficients_rejected() {
        assert!(RationalModel::new([0.0; 4], [0.0, 1.0]).is_err());
        assert_eq!(normalize([0.0, 0.0, 0.0, -2.0]), Some([0.0, 0.0, 0.0, 1.0]));
        assert_eq!(normalize([0.0, 0.0, -3.0, 0.0]), Some([0.0, 0.0, 1.0, 0.0]));
    }

    proptest! {
        #[test]
        fn normalize_is_gauge_invariant(
            theta in prop::array::uniform4(-10.0f64..10.0),
            lambda in prop_oneof![-1e3f64..-1e-3, 1e-3f64..1e3],
        ) {
            prop_assume!(theta.iter().any(|v| v.abs() > 1e-6));
            let n1 = normalize(theta).unwrap();
            let scaled = theta.map(|v| v * lambda);
            let n2 = normalize(scaled).unwrap();
            for i in 0..4 {
                prop_assert!((n1[i] - n2[i]).abs() < 1e-12);
            }
            let norm: f64 = n1.iter().map(|v| v * v).sum();
            prop_assert!((norm - 1.0).abs() < 1e-12);
            prop_assert!(n1[3] >= 0.0);
        }

        #[test]
        fn scaling_preserves_function(
            theta in prop::array::uniform4(-10.0f64..10.0),
            lambda in prop_oneof![-1e3f64..-1e-3, 1e-3f64..1e3],
            m in -100.0f64..100.0,
        ) {
            let den = theta[2] * m + theta[3];
            prop_assume!(den.abs() > 1e-3);
            let f = (theta[0] * m + theta[1]) / den;
            let model = RationalModel::new(theta.map(|v| v * lambda), [m, m]).unwrap();
            prop_assert!((model.eval(m) - f).abs() <= 1e-9 * f.abs().max(1.0));
        }

        #[test]
        fn apply_never_emits_bad_depths(
            theta in prop::array::uniform4(-5.0f64..5.0),
            values in prop::collection::vec(-20.0f64..20.0, 16),
        ) {
            prop_assume!(theta.iter().any(|v| v.abs() > 1e-6));
            let model = RationalModel::new(theta, [-20.0, 20.0]).unwrap();
            let map = DepthMap::from_values(4, 4, values, DepthKind::Relative).unwrap();
            let (out, stats) = apply_model(&model, &map, 0.1).unwrap();
            for (v, ok) in out.values().iter().zip(out.mask()) {
                if *ok {
                    prop_assert!(v.is_finite() && *v > 0.0);
                }
            }
            prop_assert_eq!(stats.converted + stats.invalidated(), 16);
        }
    }
}
