use std::f64::consts::PI;

use super::tensor::Param;
use crate::error::{Error, Result};

/// Learning-rate bounds of the one-cycle schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrBounds {
    pub max: f64,
    pub min: f64,
}

impl Default for LrBounds {
    fn default() -> Self {
        Self {
            max: 1e-2,
            min: 1e-4,
        }
    }
}

/// One-cycle schedule without warm-up: cosine decay from `max` at step 0
/// to `min` at `total_steps`.
pub fn onecycle_lr(step: usize, total_steps: usize, bounds: LrBounds) -> f64 {
    if total_steps == 0 {
        return bounds.max;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    bounds.min + 0.5 * (bounds.max - bounds.min) * (1.0 + (PI * t).cos())
}

/// Plain SGD update `p ← p − lr·g` over trainable parameters. Gradients are
/// checked for finiteness before anything is modified.
pub fn sgd_step(params: &mut [&mut Param], lr: f64) -> Result<()> {
    for (index, p) in params.iter().enumerate() {
        if p.trainable && p.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                index,
                name: p.name.to_string(),
            });
        }
    }
    for p in params.iter_mut().filter(|p| p.trainable) {
        for (v, g) in p.value.iter_mut().zip(&p.grad) {
            *v -= lr * g;
        }
    }
    Ok(())
}

/// Heavy-ball SGD: `v ← μ·v + g`, `p ← p − lr·v`, one velocity buffer per
/// trainable parameter. With `μ = 0` it matches [`sgd_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct SgdMomentum {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum {momentum} outside [0, 1)"
            )));
        }
        Ok(Self {
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn step(&mut self, params: &mut [&mut Param], lr: f64) -> Result<()> {
        for (index, p) in params.iter().enumerate() {
            if p.trainable && p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    index,
                    name: p.name.to_string(),
                });
            }
        }
        let trainable: Vec<&mut &mut Param> = params.iter_mut().filter(|p| p.trainable).collect();
        if self.velocity.is_empty() {
            self.velocity = trainable.iter().map(|p| vec![0.0; p.value.len()]).collect();
        }
        if self.velocity.len() != trainable.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} velocity buffers, got {} parameters",
                self.velocity.len(),
                trainable.len()
            )));
        }
        for (p, v) in trainable.into_iter().zip(&mut self.velocity) {
            if v.len() != p.value.len() {
                return Err(Error::Shape(format!(
                    "velocity of {} has the wrong length",
                    p.name
                )));
            }
            for ((x, g), vi) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + g;
                *x -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let b = LrBounds::default();
        assert_eq!(onecycle_lr(0, 100, b), 1e-2);
        assert!((onecycle_lr(100, 100, b) - 1e-4).abs() < 1e-18);
        assert!((onecycle_lr(50, 100, b) - 5.05e-3).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let lr = onecycle_lr(s, 100, b);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn sgd_examples() {
        let mut p = Param::new("p", vec![1.0]);
        p.grad = vec![2.0];
        sgd_step(&mut [&mut p], 0.0).unwrap();
        assert_eq!(p.value, vec![1.0]);
        sgd_step(&mut [&mut p], 0.1).unwrap();
        assert!((p.value[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut b = Param::buffer("running", vec![1.0]);
        b.grad = vec![5.0];
        sgd_step(&mut [&mut b], 0.1).unwrap();
        assert_eq!(b.value, vec![1.0]);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut a = Param::new("a", vec![1.0]);
        a.grad = vec![1.0];
        let mut b = Param::new("b", vec![1.0]);
        b.grad = vec![f64::NAN];
        let err = sgd_step(&mut [&mut a, &mut b], 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { index: 1, .. }));
        assert_eq!(a.value, vec![1.0]);
    }

    #[test]
    fn quadratic_converges_within_100_steps() {
        // f(p) = Σ (p_i - t_i)², gradient 2(p - t)
        let target = [3.0, -1.5, 0.25];
        let mut p = Param::new("p", vec![0.0; 3]);
        for _ in 0..100 {
            for i in 0..3 {
                p.grad[i] = 2.0 * (p.value[i] - target[i]);
            }
            sgd_step(&mut [&mut p], 0.1).unwrap();
        }
        for i in 0..3 {
            assert!((p.value[i] - target[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn momentum_accumulates() {
        let mut opt = SgdMomentum::new(0.5).unwrap();
        let mut p = Param::new("p", vec![0.0]);
        p.grad = vec![1.0];
        opt.step(&mut [&mut p], 0.1).unwrap();
        assert!((p.value[0] + 0.1).abs() < 1e-15);
        opt.step(&mut [&mut p], 0.1).unwrap();
        // v = 0.5·1 + 1 = 1.5
        assert!((p.value[0] + 0.25).abs() < 1e-15);
        assert!(SgdMomentum::new(1.0).is_err());
    }

    #[test]
    fn zero_momentum_matches_plain_sgd() {
        let mut opt = SgdMomentum::new(0.0).unwrap();
        let mut a = Param::new("a", vec![1.0, -2.0]);
        let mut b = a.clone();
        for g in [[0.3, -1.0], [2.0, 0.5], [-0.7, 0.1]] {
            a.grad = g.to_vec();
            b.grad = g.to_vec();
            opt.step(&mut [&mut a], 0.05).unwrap();
            sgd_step(&mut [&mut b], 0.05).unwrap();
        }
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn momentum_skips_buffers_and_checks_gradients() {
        let mut opt = SgdMomentum::new(0.9).unwrap();
        let mut w = Param::new("w", vec![1.0]);
        let mut run = Param::buffer("running", vec![1.0]);
        w.grad = vec![1.0];
        run.grad = vec![3.0];
        opt.step(&mut [&mut w, &mut run], 0.1).unwrap();
        assert_eq!(run.value, vec![1.0]);
        w.grad = vec![f64::INFINITY];
        let before = w.value.clone();
        assert!(opt.step(&mut [&mut w, &mut run], 0.1).is_err());
        assert_eq!(w.value, before);
    }
}
