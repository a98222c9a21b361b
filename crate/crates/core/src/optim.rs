use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;

/// Momentum SGD: `v <- momentum * v + g; w <- w - lr * v`, then clears the
/// gradient slots. Every parameter must carry a gradient.
pub fn sgd_momentum_step<S: Real>(store: &mut ParamStore<S>, lr: S, momentum: S) -> Result<()> {
    if let Some(p) = store.params().iter().find(|p| p.grad.is_none()) {
        return Err(Error::State(format!("parameter {} has no gradient", p.name)));
    }
    for p in store.params_mut() {
        let grad = p.grad.take().expect("checked above");
        let velocity = p
            .momentum
            .as_mut()
            .ok_or_else(|| Error::State(format!("parameter {} has no momentum buffer", p.name)))?;
        for ((w, v), g) in p.value.iter_mut().zip(velocity.iter_mut()).zip(grad) {
            *v = momentum * *v + g;
            *w -= lr * *v;
        }
    }
    Ok(())
}

/// Plain gradient descent `w <- w - lr * g` with explicit gradients; used
/// for architecture parameters.
pub fn gradient_step<S: Real>(store: &mut ParamStore<S>, grads: &[Vec<S>], lr: S) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::State(format!("{} gradients for {} parameters", grads.len(), store.len())));
    }
    for (p, g) in store.params_mut().iter_mut().zip(grads) {
        if g.len() != p.numel() {
            return Err(Error::dim("gradient_step", p.name.clone(), p.numel(), g.len()));
        }
        for (w, &gv) in p.value.iter_mut().zip(g) {
            *w -= lr * gv;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decay {
    /// Cosine annealing from the initial rate to `floor`.
    Cosine { floor: f64 },
    /// Multiply by `factor` every `every` periods.
    Step { every: usize, factor: f64 },
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    Epoch,
    Step,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: Decay,
    pub granularity: Granularity,
}

impl LrSchedule {
    pub fn cosine(initial: f64, floor: f64) -> Self {
        LrSchedule {
            initial,
            decay: Decay::Cosine { floor },
            granularity: Granularity::Epoch,
        }
    }

    /// Learning rate at `epoch` (with `step` of `steps_per_epoch` inside it)
    /// for a run of `epochs` epochs.
    pub fn rate(&self, epoch: usize, step: usize, epochs: usize, steps_per_epoch: usize) -> f64 {
        let (t, total) = match self.granularity {
            Granularity::Epoch => (epoch, epochs),
            Granularity::Step => (epoch * steps_per_epoch + step, epochs * steps_per_epoch),
        };
        match self.decay {
            Decay::Constant => self.initial,
            Decay::Cosine { floor } => {
                if total == 0 {
                    return self.initial;
                }
                let floor = floor.min(self.initial);
                let progress = t.min(total) as f64 / total as f64;
                floor + 0.5 * (self.initial - floor) * (1.0 + (PI * progress).cos())
            }
            Decay::Step { every, factor } => self.initial * factor.powi((t / every.max(1)) as i32),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Group;

    fn store(value: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new(Group::Weights);
        let id = s.add("w", &[1], vec![value]);
        s.get_mut(id).grad = Some(vec![grad]);
        s
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut s = store(1.0, 0.5);
        sgd_momentum_step(&mut s, 0.1, 0.0).unwrap();
        assert_eq!(s.params()[0].value[0], 1.0 - 0.1 * 0.5);
        assert!(s.params()[0].grad.is_none());
    }

    #[test]
    fn two_steps_with_momentum() {
        let g = 0.25;
        let mut s = store(0.0, g);
        sgd_momentum_step(&mut s, 1.0, 0.9).unwrap();
        s.params_mut()[0].grad = Some(vec![g]);
        sgd_momentum_step(&mut s, 1.0, 0.9).unwrap();
        assert!((s.params()[0].value[0] + g * (1.0 + 1.9)).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_weights() {
        let mut s = store(3.0, 7.0);
        sgd_momentum_step(&mut s, 0.0, 0.9).unwrap();
        assert_eq!(s.params()[0].value[0], 3.0);
    }

    #[test]
    fn cosine_from_zero_stays_zero() {
        let s = LrSchedule::cosine(0.0, 1e-4);
        assert!((0..5).all(|e| s.rate(e, 0, 5, 1) == 0.0));
    }

    #[test]
    fn missing_grad_is_state_error() {
        let mut s = store(3.0, 7.0);
        s.params_mut()[0].grad = None;
        assert!(matches!(sgd_momentum_step(&mut s, 0.1, 0.9), Err(Error::State(_))));
    }

    #[test]
    fn cosine_endpoints() {
        let sched = LrSchedule::cosine(0.025, 1e-4);
        assert_eq!(sched.rate(0, 0, 20, 5), 0.025);
        assert!((sched.rate(20, 0, 20, 5) - 1e-4).abs() < 1e-15);
        let mid = sched.rate(10, 0, 20, 5);
        assert!((mid - (1e-4 + 0.5 * (0.025 - 1e-4))).abs() < 1e-12);
        let step = LrSchedule {
            initial: 1.0,
            decay: Decay::Step { every: 2, factor: 0.5 },
            granularity: Granularity::Epoch,
        };
        assert_eq!(step.rate(3, 0, 10, 1), 0.5);
    }
}
