//! Pointwise regression losses and their sparse-pixel masked mean.

use ndarray::ArrayView2;
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::Target;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Huber,
    Mse,
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Huber threshold; ignored by the other kinds.
    pub delta: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            kind: LossKind::Huber,
            delta: 1.0,
        }
    }
}

impl LossSpec {
    pub fn huber(delta: f64) -> Self {
        Self {
            kind: LossKind::Huber,
            delta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::Config(format!(
                "loss delta must be positive, got {}",
                self.delta
            )));
        }
        Ok(())
    }

    /// Loss of residual `e = f - f_gt`.
    pub fn value(&self, e: f64) -> f64 {
        match self.kind {
            LossKind::Huber => {
                let a = e.abs();
                if a <= self.delta {
                    0.5 * e * e
                } else {
                    self.delta * (a - 0.5 * self.delta)
                }
            }
            LossKind::Mse => e * e,
            LossKind::L1 => e.abs(),
        }
    }

    /// Derivative of [`LossSpec::value`] with respect to the residual.
    pub fn derivative(&self, e: f64) -> f64 {
        let sign = if e > 0.0 {
            1.0
        } else if e < 0.0 {
            -1.0
        } else {
            0.0
        };
        match self.kind {
            LossKind::Huber => {
                if e.abs() <= self.delta {
                    e
                } else {
                    self.delta * sign
                }
            }
            LossKind::Mse => 2.0 * e,
            LossKind::L1 => sign,
        }
    }
}

pub fn pointwise_loss(f: f64, f_gt: f64, spec: &LossSpec) -> f64 {
    spec.value(f - f_gt)
}

/// Scale on which predictions and targets are compared during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScale {
    /// Model output against target / norm_max.
    #[default]
    Normalized,
    /// Model output × norm_max against the target in m³/s.
    Raw,
}

/// Mean loss over the target pixels of a normalized flow map together with
/// its gradient with respect to each target pixel. Every other pixel has
/// zero gradient.
pub fn masked_loss_with_grad<T: Float>(
    flow_map: ArrayView2<'_, T>,
    targets: &[Target],
    spec: &LossSpec,
    scale: LossScale,
) -> Result<(f64, Vec<((usize, usize), f64)>)> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument(
            "masked loss needs at least one target".into(),
        ));
    }
    let (h, w) = flow_map.dim();
    let n = targets.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(targets.len());
    for t in targets {
        let (r, c) = t.pixel;
        if r >= h || c >= w {
            return Err(Error::OutOfBounds(format!(
                "target pixel {:?} outside {h}x{w} flow map",
                t.pixel
            )));
        }
        let f = flow_map[(r, c)].to_f64().unwrap();
        let (e, de_df) = match scale {
            LossScale::Normalized => (f - t.normalized(), 1.0),
            LossScale::Raw => (f * t.norm_max - t.flow, t.norm_max),
        };
        total += spec.value(e);
        grads.push((t.pixel, spec.derivative(e) * de_df / n));
    }
    Ok((total / n, grads))
}

pub fn masked_loss<T: Float>(
    flow_map: ArrayView2<'_, T>,
    targets: &[Target],
    spec: &LossSpec,
    scale: LossScale,
) -> Result<f64> {
    masked_loss_with_grad(flow_map, targets, spec, scale).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn target(pixel: (usize, usize), flow: f64) -> Target {
        Target {
            pixel,
            flow,
            norm_max: 1.0,
        }
    }

    #[test]
    fn huber_branches() {
        let h = LossSpec::huber(1.0);
        assert_eq!(pointwise_loss(2.0, 0.0, &h), 1.5);
        assert_eq!(pointwise_loss(0.5, 0.0, &h), 0.125);
        for kind in [LossKind::Huber, LossKind::Mse, LossKind::L1] {
            let spec = LossSpec { kind, delta: 0.7 };
            assert_eq!(pointwise_loss(3.25, 3.25, &spec), 0.0);
        }
    }

    #[test]
    fn huber_is_c1_at_the_joint() {
        for delta in [0.8, 1.0, 1.1] {
            let h = LossSpec::huber(delta);
            for e in [delta, -delta] {
                let quad = 0.5 * e * e;
                let lin = delta * (f64::abs(e) - 0.5 * delta);
                assert!((quad - lin).abs() < 1e-15);
                let quad_slope = e;
                let lin_slope = delta * e.signum();
                assert!((quad_slope - lin_slope).abs() < 1e-15);
                assert_eq!(h.derivative(e), quad_slope);
            }
        }
    }

    #[test]
    fn masked_mean_and_sparsity() {
        let mut map = Array2::<f64>::zeros((4, 5));
        map[(1, 1)] = 0.5;
        map[(2, 3)] = 2.0;
        let spec = LossSpec::default();
        let exact = masked_loss(
            map.view(),
            &[target((1, 1), 0.5)],
            &spec,
            LossScale::Normalized,
        )
        .unwrap();
        assert_eq!(exact, 0.0);
        let two = [target((1, 1), 0.0), target((2, 3), 0.0)];
        let (loss, grads) =
            masked_loss_with_grad(map.view(), &two, &spec, LossScale::Normalized).unwrap();
        assert_eq!(loss, 0.8125);
        let touched: Vec<_> = grads.iter().map(|(p, _)| *p).collect();
        assert_eq!(touched, vec![(1, 1), (2, 3)]);
        assert!(masked_loss(map.view(), &[], &spec, LossScale::Normalized).is_err());
        assert!(masked_loss(
            map.view(),
            &[target((4, 0), 0.0)],
            &spec,
            LossScale::Normalized
        )
        .is_err());
    }

    #[test]
    fn raw_scale_multiplies_through() {
        let map = Array2::from_elem((1, 1), 0.5f64);
        let t = [Target {
            pixel: (0, 0),
            flow: 2.0,
            norm_max: 8.0,
        }];
        let spec = LossSpec {
            kind: LossKind::Mse,
            delta: 1.0,
        };
        let (raw, g_raw) = masked_loss_with_grad(map.view(), &t, &spec, LossScale::Raw).unwrap();
        assert_eq!(raw, 4.0);
        assert_eq!(g_raw[0].1, 2.0 * 2.0 * 8.0);
        let norm = masked_loss(map.view(), &t, &spec, LossScale::Normalized).unwrap();
        assert_eq!(norm, 0.0625);
    }

    proptest! {
        #[test]
        fn huber_below_half_square(e in -10.0f64..10.0, delta in 0.1f64..3.0) {
            let h = LossSpec::huber(delta).value(e);
            prop_assert!(h <= 0.5 * e * e + 1e-12);
            if e.abs() <= delta {
                prop_assert_eq!(h, 0.5 * e * e);
            } else {
                prop_assert!(h < 0.5 * e * e);
            }
        }

        #[test]
        fn derivative_matches_central_difference(e in -3.0f64..3.0, delta in 0.5f64..1.5) {
            let spec = LossSpec::huber(delta);
            let eps = 1e-6;
            prop_assume!((e.abs() - delta).abs() > 2.0 * eps);
            let fd = (spec.value(e + eps) - spec.value(e - eps)) / (2.0 * eps);
            prop_assert!((fd - spec.derivative(e)).abs() < 1e-8);
        }

        #[test]
        fn masked_loss_ignores_target_order(
            values in prop::collection::vec(-2.0f64..2.0, 2..8),
            rot in 0usize..8,
        ) {
            let n = values.len();
            let map = Array2::from_shape_fn((1, n), |(_, c)| c as f64 * 0.3);
            let targets: Vec<Target> = values.iter().enumerate().map(|(i, v)| target((0, i), *v)).collect();
            let mut shuffled = targets.clone();
            shuffled.rotate_left(rot % n);
            shuffled.reverse();
            let spec = LossSpec::default();
            let a = masked_loss(map.view(), &targets, &spec, LossScale::Normalized).unwrap();
            let b = masked_loss(map.view(), &shuffled, &spec, LossScale::Normalized).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
