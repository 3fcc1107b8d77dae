use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

/// First/second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState<R> {
    pub m: Vec<Tensor<R>>,
    pub v: Vec<Tensor<R>>,
    pub step: u64,
    pub config: AdamConfig,
}

impl<R: Real> AdamState<R> {
    pub fn new(params: &[Tensor<R>], config: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.rows, p.cols))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay.
/// Parameters whose gradient is `None` are left untouched.
pub fn adam_step<R: Real>(
    params: &mut [Tensor<R>],
    grads: &[Option<Tensor<R>>],
    state: &mut AdamState<R>,
    lr: f64,
    weight_decay: f64,
) -> Result<(), NnError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NnError::Shape {
            op: "adam_step",
            a: [params.len(), 1],
            b: [grads.len(), state.m.len()],
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if p.shape() != g.shape() {
                return Err(NnError::Shape {
                    op: "adam_step",
                    a: p.shape(),
                    b: g.shape(),
                });
            }
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (R::of(c.beta1), R::of(c.beta2));
    let (one_b1, one_b2) = (R::of(1.0 - c.beta1), R::of(1.0 - c.beta2));
    let step_size = R::of(lr / bc1);
    let inv_sqrt_bc2 = R::of(1.0 / bc2.sqrt());
    let eps = R::of(c.eps);
    let decay = R::of(1.0 - lr * weight_decay);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        let m = &mut state.m[k].data;
        let v = &mut state.v[k].data;
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m[i] = b1 * m[i] + one_b1 * gi;
            v[i] = b2 * v[i] + one_b2 * gi * gi;
            let denom = v[i].sqrt() * inv_sqrt_bc2 + eps;
            let mut x = p.data[i];
            if weight_decay != 0.0 {
                x = x * decay;
            }
            p.data[i] = x - step_size * m[i] / denom;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipOutcome {
    /// Global L2 norm before clipping.
    pub norm: f64,
    pub clipped: bool,
    /// False when any gradient entry is NaN or infinite; the caller should skip the step.
    pub finite: bool,
}

/// Rescale all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm<R: Real>(
    grads: &mut [Option<Tensor<R>>],
    max_norm: f64,
) -> Result<ClipOutcome, NnError> {
    if !(max_norm > 0.0) {
        return Err(NnError::InvalidArgument(format!(
            "max_norm must be positive, got {max_norm}"
        )));
    }
    let sq: f64 = grads.iter().flatten().map(|g| g.sum_squares()).sum();
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Ok(ClipOutcome {
            norm,
            clipped: false,
            finite: false,
        });
    }
    let clipped = norm > max_norm;
    if clipped {
        let s = R::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.scale_in_place(s);
        }
    }
    Ok(ClipOutcome {
        norm,
        clipped,
        finite: true,
    })
}

pub fn global_norm<R: Real>(grads: &[Option<Tensor<R>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.sum_squares())
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [3.0, -0.02] {
            let mut p = vec![Tensor::<f64>::scalar(1.0)];
            let mut st = AdamState::new(&p, AdamConfig::default());
            adam_step(&mut p, &[Some(Tensor::scalar(g))], &mut st, 0.01, 0.0).unwrap();
            let moved = p[0].item() - 1.0;
            assert!((moved + 0.01 * f64::signum(g)).abs() < 1e-8, "moved {moved}");
        }
    }

    #[test]
    fn zero_grads_leave_params() {
        let mut p = vec![Tensor::<f64>::from_f64(1, 3, &[1.0, -2.0, 3.0])];
        let before = p.clone();
        let mut st = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &[Some(Tensor::zeros(1, 3))], &mut st, 0.1, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient_signal() {
        let mut p = vec![Tensor::<f64>::scalar(2.0)];
        let mut st = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &[Some(Tensor::scalar(0.0))], &mut st, 0.1, 0.5).unwrap();
        assert!((p[0].item() - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn quadratic_loss_decreases() {
        // f(x) = 0.5 * a * (x - 3)^2
        let a = 4.0;
        let mut p = vec![Tensor::<f64>::scalar(-5.0)];
        let mut st = AdamState::new(&p, AdamConfig::default());
        let loss = |x: f64| 0.5 * a * (x - 3.0) * (x - 3.0);
        let mut prev = loss(p[0].item());
        for step in 0..100 {
            let g = a * (p[0].item() - 3.0);
            adam_step(&mut p, &[Some(Tensor::scalar(g))], &mut st, 0.05, 0.0).unwrap();
            let l = loss(p[0].item());
            if step >= 5 {
                assert!(l < prev, "step {step}: {l} >= {prev}");
            }
            prev = l;
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = vec![Tensor::<f32>::from_f64(1, 2, &[0.5, -0.5])];
            let mut st = AdamState::new(&p, AdamConfig::default());
            for i in 0..10 {
                let g = Tensor::from_f64(1, 2, &[i as f64 * 0.1, -0.3]);
                adam_step(&mut p, &[Some(g)], &mut st, 1e-2, 1e-3).unwrap();
            }
            (p, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping_cases() {
        let mut g = vec![Some(Tensor::<f64>::from_f64(1, 2, &[120.0, 160.0]))];
        let out = clip_global_norm(&mut g, 100.0).unwrap();
        assert!((out.norm - 200.0).abs() < 1e-12 && out.clipped);
        assert_eq!(g[0].as_ref().unwrap().data, vec![60.0, 80.0]);

        let mut g = vec![Some(Tensor::<f64>::from_f64(1, 2, &[0.3, 0.4]))];
        let out = clip_global_norm(&mut g, 1.0).unwrap();
        assert!(!out.clipped);
        assert_eq!(g[0].as_ref().unwrap().data, vec![0.3, 0.4]);

        let mut g = vec![Some(Tensor::<f64>::from_f64(1, 2, &[f64::NAN, 0.4]))];
        assert!(!clip_global_norm(&mut g, 1.0).unwrap().finite);
        assert!(clip_global_norm(&mut g, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn post_clip_norm_is_bounded(vals in proptest::collection::vec(-1e3f64..1e3, 1..40),
                                     max_norm in 1e-3f64..1e3) {
            let n = vals.len();
            let mut g = vec![Some(Tensor::<f64>::from_f64(1, n, &vals)), None];
            clip_global_norm(&mut g, max_norm).unwrap();
            prop_assert!(global_norm(&g) <= max_norm + 1e-9);
        }
    }
}
