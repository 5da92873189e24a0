//! SGD with momentum and learning-rate schedules.

use crate::error::{Error, Result};
use crate::graph::Param;
use crate::tensor::Scalar;

/// `base * (1 - iter / max_iter)^power`.
pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> Result<f64> {
    if iter > max_iter || max_iter == 0 {
        return Err(Error::invalid(
            "poly_lr",
            format!("iteration {iter} outside [0, {max_iter}]"),
        ));
    }
    Ok(base * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// `base * factor^k` where `k` counts milestones `<= epoch`.
pub fn step_lr(base: f64, epoch: usize, milestones: &[usize], factor: f64) -> Result<f64> {
    if milestones.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("step_lr", "milestones must be strictly increasing"));
    }
    let passed = milestones.iter().filter(|&&m| m <= epoch).count();
    Ok(base * factor.powi(passed as i32))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    Constant,
    Poly { power: f64, max_iter: usize },
    /// Milestones in epochs of `iters_per_epoch` iterations.
    Step {
        milestones: Vec<usize>,
        factor: f64,
        iters_per_epoch: usize,
    },
}

impl Schedule {
    pub fn lr(&self, base: f64, iter: usize) -> Result<f64> {
        match self {
            Schedule::Constant => Ok(base),
            Schedule::Poly { power, max_iter } => poly_lr(base, iter, *max_iter, *power),
            Schedule::Step {
                milestones,
                factor,
                iters_per_epoch,
            } => step_lr(base, iter / (*iters_per_epoch).max(1), milestones, *factor),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub schedule: Schedule,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            nesterov: false,
            schedule: Schedule::Poly {
                power: 0.9,
                max_iter: 1000,
            },
        }
    }
}

/// One update of a single tensor:
/// `v = momentum * v + (g + wd * p)`, `p -= lr * v` (or `lr * (g' + momentum * v)`
/// with Nesterov).
pub fn sgd_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    buf: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    nesterov: bool,
) {
    let (lr, m, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(buf.iter_mut()) {
        let d = g + wd * *p;
        *v = m * *v + d;
        let step = if nesterov { d + m * *v } else { *v };
        *p = *p - lr * step;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Scalar = f64> {
    pub config: SgdConfig,
    /// One buffer per parameter slot; empty for non-trainable slots.
    pub buffers: Vec<Vec<T>>,
    pub iter: usize,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: SgdConfig, params: &[Param<T>]) -> Self {
        let buffers = params
            .iter()
            .map(|p| {
                if p.kind.trainable() {
                    vec![T::zero(); p.value.len()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        OptimizerState {
            config,
            buffers,
            iter: 0,
        }
    }

    pub fn current_lr(&self) -> Result<f64> {
        self.config.schedule.lr(self.config.base_lr, self.iter)
    }

    /// Applies one step using each parameter's grad buffer, then advances the
    /// iteration counter. Parameters without a gradient are treated as having
    /// a zero gradient.
    pub fn step(&mut self, params: &mut [Param<T>]) -> Result<f64> {
        if params.len() != self.buffers.len() {
            return Err(Error::shape("sgd_step", "parameter list changed"));
        }
        let lr = self.current_lr()?;
        for (p, buf) in params.iter_mut().zip(self.buffers.iter_mut()) {
            if !p.kind.trainable() {
                continue;
            }
            if buf.len() != p.value.len() {
                return Err(Error::shape("sgd_step", format!("momentum buffer of {}", p.name)));
            }
            let grad = match p.value.grad() {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); p.value.len()],
            };
            if T::CHECKED && grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    op: format!("gradient of {}", p.name),
                });
            }
            let wd = if p.kind.decays() { self.config.weight_decay } else { 0.0 };
            sgd_update(
                p.value.data_mut(),
                &grad,
                buf,
                lr,
                self.config.momentum,
                wd,
                self.config.nesterov,
            );
        }
        self.iter += 1;
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ParamKind;
    use crate::tensor::{Shape4, Tensor};
    use proptest::prelude::*;

    #[test]
    fn poly_endpoints_and_midpoint() {
        assert_eq!(poly_lr(0.01, 0, 100, 0.9).unwrap(), 0.01);
        assert_eq!(poly_lr(0.01, 100, 100, 0.9).unwrap(), 0.0);
        assert_eq!(poly_lr(0.01, 50, 100, 0.9).unwrap(), 0.01 * 0.5f64.powf(0.9));
        assert!(poly_lr(0.01, 101, 100, 0.9).is_err());
    }

    #[test]
    fn step_schedule() {
        let ms = [30, 50];
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-18;
        assert!(close(step_lr(1e-4, 0, &ms, 0.1).unwrap(), 1e-4));
        assert!(close(step_lr(1e-4, 29, &ms, 0.1).unwrap(), 1e-4));
        assert!(close(step_lr(1e-4, 30, &ms, 0.1).unwrap(), 1e-5));
        assert!(close(step_lr(1e-4, 50, &ms, 0.1).unwrap(), 1e-6));
        assert!(step_lr(1e-4, 0, &[50, 30], 0.1).is_err());
    }

    fn one(v: f64, kind: ParamKind) -> Param<f64> {
        Param {
            name: "p".into(),
            kind,
            value: Tensor::full(Shape4::new(1, 1, 1, 1), v),
        }
    }

    fn plain(lr: f64, momentum: f64) -> SgdConfig {
        SgdConfig {
            base_lr: lr,
            momentum,
            weight_decay: 0.0,
            nesterov: false,
            schedule: Schedule::Constant,
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut ps = vec![one(1.5, ParamKind::Weight)];
        ps[0].value.grad_mut()[0] = 0.0;
        let mut st = OptimizerState::new(plain(0.1, 0.9), &ps);
        st.step(&mut ps).unwrap();
        assert_eq!(ps[0].value.data()[0], 1.5);
    }

    #[test]
    fn unit_step() {
        let mut ps = vec![one(1.5, ParamKind::Weight)];
        ps[0].value.grad_mut()[0] = 0.25;
        let mut st = OptimizerState::new(plain(1.0, 0.0), &ps);
        st.step(&mut ps).unwrap();
        assert_eq!(ps[0].value.data()[0], 1.25);
        assert_eq!(st.iter, 1);
    }

    fn bowl(nesterov: bool, steps: usize) -> f64 {
        let mut cfg = plain(0.1, 0.9);
        cfg.nesterov = nesterov;
        let mut ps = vec![one(1.0, ParamKind::Weight)];
        let mut st = OptimizerState::new(cfg, &ps);
        for _ in 0..steps {
            let x = ps[0].value.data()[0];
            ps[0].value.grad_mut()[0] = 2.0 * x;
            st.step(&mut ps).unwrap();
        }
        ps[0].value.data()[0]
    }

    #[test]
    fn quadratic_bowl_matches_scalar_simulation() {
        let (mut x, mut v) = (1.0f64, 0.0f64);
        for _ in 0..100 {
            v = 0.9 * v + 2.0 * x;
            x -= 0.1 * v;
        }
        assert_eq!(bowl(false, 100), x);
        // heavy ball contracts by sqrt(0.9) per step on this bowl
        assert!(x.abs() < 0.9f64.sqrt().powi(100), "{x}");
        assert!(bowl(false, 300).abs() < 1e-3);
    }

    #[test]
    fn quadratic_bowl_converges_in_100_steps() {
        let x = bowl(true, 100);
        assert!(x.abs() < 1e-3, "{x}");
    }

    #[test]
    fn decay_only_on_weights() {
        let mut cfg = plain(1.0, 0.0);
        cfg.weight_decay = 0.5;
        let mut ps = vec![one(2.0, ParamKind::Weight), one(2.0, ParamKind::BnScale), one(2.0, ParamKind::Bias)];
        let mut st = OptimizerState::new(cfg, &ps);
        st.step(&mut ps).unwrap();
        assert_eq!(ps[0].value.data()[0], 1.0);
        assert_eq!(ps[1].value.data()[0], 2.0);
        assert_eq!(ps[2].value.data()[0], 2.0);
    }

    #[test]
    fn nesterov_differs_from_classical() {
        let run = |nesterov| {
            let mut cfg = plain(0.1, 0.9);
            cfg.nesterov = nesterov;
            let mut ps = vec![one(1.0, ParamKind::Weight)];
            let mut st = OptimizerState::new(cfg, &ps);
            for _ in 0..2 {
                ps[0].value.grad_mut()[0] = 1.0;
                st.step(&mut ps).unwrap();
            }
            ps[0].value.data()[0]
        };
        // classical: v=1, 1.9 -> x = 1 - 0.1 - 0.19; nesterov: steps 1.9, 2.71
        assert!((run(false) - 0.71).abs() < 1e-12);
        assert!((run(true) - (1.0 - 0.19 - 0.271)).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_is_rejected_at_verify_precision() {
        let mut ps = vec![one(1.0, ParamKind::Weight)];
        ps[0].value.grad_mut()[0] = f64::NAN;
        let mut st = OptimizerState::new(plain(0.1, 0.0), &ps);
        assert!(matches!(st.step(&mut ps), Err(Error::NonFinite { .. })));
    }

    proptest! {
        #[test]
        fn poly_strictly_decreasing(max_iter in 2usize..5000, power in 0.05f64..3.0, frac in 0.0f64..0.99) {
            let i = ((max_iter - 1) as f64 * frac) as usize;
            let a = poly_lr(0.01, i, max_iter, power).unwrap();
            let b = poly_lr(0.01, i + 1, max_iter, power).unwrap();
            prop_assert!(b < a);
            prop_assert!(a > 0.0);
        }

        #[test]
        fn zero_lr_is_identity(p in proptest::collection::vec(-10.0f64..10.0, 1..20), m in 0.0f64..0.99, wd in 0.0f64..0.1) {
            let g: Vec<f64> = p.iter().map(|v| v * 0.3 - 1.0).collect();
            let mut q = p.clone();
            let mut buf = vec![0.5; p.len()];
            sgd_update(&mut q, &g, &mut buf, 0.0, m, wd, false);
            prop_assert_eq!(q, p);
        }
    }
}
