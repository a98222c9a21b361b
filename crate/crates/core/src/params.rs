//! Named, persistent parameters and the running statistics of batch norms.

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::shape::Shape;
use crate::tape::{StatUpdate, Tape, Var};

/// Which optimizer owns a parameter: network weights (momentum SGD) or
/// architecture logits (plain gradient descent).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Weights,
    Arch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub group: Group,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<S> {
    pub name: String,
    pub shape: Shape,
    pub value: Vec<S>,
    pub grad: Option<Vec<S>>,
    /// Present only for weight-optimized parameters.
    pub momentum: Option<Vec<S>>,
}

impl<S: Real> Parameter<S> {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<S> {
    pub name: String,
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

/// Exponential moving-average factor for running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatId(pub usize);

/// An ordered collection of parameters belonging to one [`Group`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    group: Group,
    params: Vec<Parameter<S>>,
    stats: Vec<RunningStats<S>>,
}

impl<S: Real> ParamStore<S> {
    pub fn new(group: Group) -> Self {
        ParamStore {
            group,
            params: Vec::new(),
            stats: Vec::new(),
        }
    }

    pub fn group(&self) -> Group {
        self.group
    }

    pub fn add(&mut self, name: impl Into<String>, dims: &[usize], value: Vec<S>) -> ParamId {
        let shape = Shape::from_dims(dims);
        assert_eq!(shape.numel(), value.len(), "parameter value length");
        let momentum = (self.group == Group::Weights).then(|| vec![S::zero(); value.len()]);
        self.params.push(Parameter {
            name: name.into(),
            shape,
            value,
            grad: None,
            momentum,
        });
        ParamId(self.params.len() - 1)
    }

    /// Zero-mean uniform initialization scaled by 1/sqrt(fan_in).
    pub fn add_uniform(&mut self, name: impl Into<String>, dims: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = dims.iter().product();
        let value = (0..n).map(|_| S::of(rng.gen_range(-bound..bound))).collect();
        self.add(name, dims, value)
    }

    pub fn add_filled(&mut self, name: impl Into<String>, dims: &[usize], fill: f64) -> ParamId {
        let n: usize = dims.iter().product();
        self.add(name, dims, vec![S::of(fill); n])
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatId {
        self.stats.push(RunningStats {
            name: name.into(),
            mean: vec![S::zero(); channels],
            var: vec![S::one(); channels],
        });
        StatId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Parameter<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<S>] {
        &mut self.params
    }

    pub fn stats(&self, id: StatId) -> &RunningStats<S> {
        &self.stats[id.0]
    }

    pub fn all_stats(&self) -> &[RunningStats<S>] {
        &self.stats
    }

    pub fn all_stats_mut(&mut self) -> &mut [RunningStats<S>] {
        &mut self.stats
    }

    /// Total number of trainable scalar elements.
    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn key(&self, id: ParamId) -> ParamKey {
        ParamKey {
            group: self.group,
            index: id.0,
        }
    }

    pub fn bind(&self, tape: &mut Tape<S>, id: ParamId) -> Var {
        tape.bind(self.key(id), self.get(id))
    }

    pub fn bind_with(&self, tape: &mut Tape<S>, id: ParamId, requires_grad: bool) -> Var {
        tape.bind_with(self.key(id), self.get(id), requires_grad)
    }

    /// Leaf gradients of this store's bound parameters, zero-filled where
    /// no gradient reached a parameter.
    pub fn gradients_from(&self, tape: &Tape<S>) -> Vec<Vec<S>> {
        let mut out: Vec<Vec<S>> = self.params.iter().map(|p| vec![S::zero(); p.numel()]).collect();
        for &(key, var) in tape.bindings() {
            if key.group != self.group {
                continue;
            }
            if let Some(g) = tape.grad(var) {
                for (o, &v) in out[key.index].iter_mut().zip(g) {
                    *o += v;
                }
            }
        }
        out
    }

    /// Adds `grads` into each parameter's gradient slot.
    pub fn accumulate_grads(&mut self, grads: &[Vec<S>]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::State(format!(
                "gradient list has {} entries for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            if g.len() != p.numel() {
                return Err(Error::dim("accumulate_grads", p.name.clone(), p.numel(), g.len()));
            }
            match &mut p.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(g.clone()),
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Folds observed batch statistics into the running averages.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate<S>]) {
        let m = S::of(BN_MOMENTUM);
        let keep = S::one() - m;
        for u in updates {
            let stats = &mut self.stats[u.stat];
            for (r, &v) in stats.mean.iter_mut().zip(&u.mean) {
                *r = keep * *r + m * v;
            }
            for (r, &v) in stats.var.iter_mut().zip(&u.var) {
                *r = keep * *r + m * v;
            }
        }
    }

    /// Flat concatenation of all parameter values.
    pub fn flat_values(&self) -> Vec<S> {
        self.params.iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    /// Returns a copy with every value moved by `scale * direction`. The
    /// copy carries no gradients or momentum buffers.
    pub fn offset(&self, direction: &[Vec<S>], scale: S) -> Self {
        let params = self
            .params
            .iter()
            .zip(direction)
            .map(|(p, d)| Parameter {
                name: p.name.clone(),
                shape: p.shape.clone(),
                value: p.value.iter().zip(d).map(|(&v, &dv)| v + scale * dv).collect(),
                grad: None,
                momentum: None,
            })
            .collect();
        ParamStore {
            group: self.group,
            params,
            stats: self.stats.clone(),
        }
    }
}

/// Euclidean norm of a list of gradient buffers.
pub fn global_norm<S: Real>(grads: &[Vec<S>]) -> S {
    grads.iter().flat_map(|g| g.iter()).map(|&v| v * v).sum::<S>().sqrt()
}

pub fn all_finite<S: Real>(grads: &[Vec<S>]) -> bool {
    grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_buffers_only_for_weights() {
        let mut w = ParamStore::<f32>::new(Group::Weights);
        let id = w.add_filled("w", &[2, 3], 0.5);
        assert_eq!(w.get(id).momentum.as_ref().unwrap(), &vec![0.0; 6]);
        let mut a = ParamStore::<f32>::new(Group::Arch);
        let id = a.add_filled("alpha", &[14, 8], 0.0);
        assert!(a.get(id).momentum.is_none());
    }

    #[test]
    fn gradients_harvested_by_group() {
        let mut w = ParamStore::<f64>::new(Group::Weights);
        let wid = w.add_filled("w", &[2], 1.0);
        let mut a = ParamStore::<f64>::new(Group::Arch);
        let aid = a.add_filled("a", &[2], 2.0);
        let mut tape = Tape::new();
        let wv = w.bind(&mut tape, wid);
        let av = a.bind(&mut tape, aid);
        let p = tape.mul(wv, av).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(w.gradients_from(&tape), vec![vec![2.0, 2.0]]);
        assert_eq!(a.gradients_from(&tape), vec![vec![1.0, 1.0]]);
    }

    #[test]
    fn running_stats_ema() {
        let mut w = ParamStore::<f64>::new(Group::Weights);
        let id = w.add_stats("bn", 1);
        w.apply_stat_updates(&[StatUpdate {
            stat: id.0,
            mean: vec![1.0],
            var: vec![3.0],
        }]);
        assert!((w.stats(id).mean[0] - 0.1).abs() < 1e-15);
        assert!((w.stats(id).var[0] - 1.2).abs() < 1e-15);
    }
}
