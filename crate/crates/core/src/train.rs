//! Training and evaluation of a discrete network.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::metrics::Tally;
use crate::network::DiscreteNet;
use crate::ops::Session;
use crate::optim::{sgd_momentum_step, Decay, Granularity, LrSchedule};
use crate::params::{all_finite, ParamStore};
use crate::rng::derive_seed;
use crate::supernet::NetConfig;
use crate::Shape;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay: Decay,
    pub granularity: Granularity,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(net: NetConfig) -> Self {
        TrainConfig {
            net,
            epochs: 350,
            batch_size: 16,
            lr: 0.01,
            decay: Decay::Cosine { floor: 1e-4 },
            granularity: Granularity::Epoch,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        for (name, v) in [("lr", self.lr), ("momentum", self.momentum), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

pub const TRAIN_CSV_HEADER: &str = "epoch,train_loss,train_top1,val_loss,val_top1,val_top5,lr";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val_loss: f64,
    pub val_top1: f64,
    pub val_top5: f64,
    pub lr: f64,
}

impl TrainEpoch {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6e}",
            self.epoch, self.train_loss, self.train_top1, self.val_loss, self.val_top1, self.val_top5, self.lr
        )
    }
}

pub fn write_train_csv(path: &Path, rows: &[TrainEpoch]) -> Result<()> {
    let mut out = String::from(TRAIN_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub struct TrainOutcome {
    pub net: DiscreteNet,
    pub weights: ParamStore<f32>,
    /// Weights of the epoch with the best validation top-1 (the final
    /// weights when no validation set is given).
    pub best: ParamStore<f32>,
    pub best_epoch: usize,
    pub metrics: Vec<TrainEpoch>,
    /// Training-set loss before the first and after the last epoch, from a
    /// pass with batch statistics over one fixed shuffled batching.
    pub loss_before: f64,
    pub loss_after: f64,
}

impl TrainOutcome {
    /// Set when training did not lower the training-set loss.
    pub fn stall_warning(&self) -> Option<String> {
        (self.loss_after >= self.loss_before).then(|| {
            format!(
                "train loss did not decrease: {:.6} before, {:.6} after {} epochs",
                self.loss_before,
                self.loss_after,
                self.metrics.len()
            )
        })
    }
}

fn to_batch(data: &Dataset, indices: &[usize]) -> Result<(Batch<f32>, Shape)> {
    let batch: Batch<f32> = data.batch(indices)?;
    let shape = Shape::new(batch.dims)?;
    Ok((batch, shape))
}

/// Inference-mode pass over `data` in its stored order.
pub fn evaluate_network(net: &DiscreteNet, weights: &ParamStore<f32>, data: &Dataset, batch_size: usize) -> Result<Tally> {
    let order: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    pass(net, weights, data, &chunks, false)
}

fn pass(net: &DiscreteNet, weights: &ParamStore<f32>, data: &Dataset, chunks: &[Vec<usize>], batch_stats: bool) -> Result<Tally> {
    let mut tally = Tally::default();
    for chunk in chunks {
        let (batch, shape) = to_batch(data, chunk)?;
        let mut s = Session::new(weights, batch_stats);
        let x = s.tape.constant(batch.x, shape)?;
        let logits = net.forward(&mut s, x)?;
        let loss = s.tape.cross_entropy(logits, &batch.labels)?;
        let loss_value = s.tape.value(loss)[0] as f64;
        tally.record(s.tape.value(logits), &batch.labels, loss_value);
    }
    Ok(tally)
}

/// Builds the network for `genotype` and trains it with momentum SGD.
pub fn train_network(
    config: &TrainConfig,
    genotype: &Genotype,
    train: &Dataset,
    val: Option<&Dataset>,
    mut observe: impl FnMut(&TrainEpoch),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let (net, mut weights) = DiscreteNet::build::<f32>(genotype, config.net, derive_seed(config.seed, 5, 0))?;
    let schedule = LrSchedule {
        initial: config.lr,
        decay: config.decay,
        granularity: config.granularity,
    };
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let mut metrics = Vec::with_capacity(config.epochs);
    let probe = train.batch_indices(config.batch_size, derive_seed(config.seed, 7, 0));
    let loss_before = pass(&net, &weights, train, &probe, true)?.mean_loss();
    let mut best = (weights.clone(), 0usize, f64::NEG_INFINITY, f64::INFINITY);
    for epoch in 0..config.epochs {
        let order = train.batch_indices(config.batch_size, derive_seed(config.seed, 6, epoch as u64));
        let mut tally = Tally::default();
        let mut lr = config.lr;
        for (i, chunk) in order.iter().enumerate() {
            lr = schedule.rate(epoch, i, config.epochs, steps_per_epoch);
            let (batch, shape) = to_batch(train, chunk)?;
            let (grads, updates) = {
                let mut s = Session::new(&weights, true);
                let x = s.tape.constant(batch.x, shape)?;
                let logits = net.forward(&mut s, x).map_err(|e| tag(e, epoch + 1, i))?;
                let loss = s.tape.cross_entropy(logits, &batch.labels)?;
                let loss_value = s.tape.value(loss)[0] as f64;
                tally.record(s.tape.value(logits), &batch.labels, loss_value);
                s.tape.backward(loss)?;
                (weights.gradients_from(&s.tape), s.tape.take_stat_updates())
            };
            if !all_finite(&grads) {
                return Err(Error::Numeric {
                    location: format!("epoch {} step {i}: non-finite gradient", epoch + 1),
                });
            }
            let grads = if config.weight_decay > 0.0 {
                let wd = config.weight_decay as f32;
                grads
                    .into_iter()
                    .zip(weights.params())
                    .map(|(g, p)| g.iter().zip(&p.value).map(|(&gv, &pv)| gv + wd * pv).collect())
                    .collect()
            } else {
                grads
            };
            weights.zero_grads();
            weights.accumulate_grads(&grads)?;
            sgd_momentum_step(&mut weights, lr as f32, config.momentum as f32)?;
            weights.apply_stat_updates(&updates);
        }
        let v = match val {
            Some(d) if !d.is_empty() => Some(evaluate_network(&net, &weights, d, config.batch_size)?),
            _ => None,
        };
        let m = TrainEpoch {
            epoch: epoch + 1,
            train_loss: tally.mean_loss(),
            train_top1: tally.top1_rate(),
            val_loss: v.map_or(f64::NAN, |t| t.mean_loss()),
            val_top1: v.map_or(f64::NAN, |t| t.top1_rate()),
            val_top5: v.map_or(f64::NAN, |t| t.top5_rate()),
            lr,
        };
        observe(&m);
        let better = match v {
            Some(_) => m.val_top1 > best.2 || (m.val_top1 == best.2 && m.val_loss < best.3),
            None => true,
        };
        if better {
            best = (weights.clone(), m.epoch, m.val_top1, m.val_loss);
        }
        metrics.push(m);
    }
    let loss_after = pass(&net, &weights, train, &probe, true)?.mean_loss();
    Ok(TrainOutcome {
        loss_before,
        loss_after,
        net,
        weights,
        best: best.0,
        best_epoch: best.1,
        metrics,
    })
}

fn tag(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Numeric { location } => Error::Numeric {
            location: format!("epoch {epoch} step {step}: {location}"),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};
    use crate::genotype::random_genotype;

    #[test]
    fn zero_lr_is_flagged_and_keeps_weights() {
        let data = synth_generate(&SynthConfig::new(2, 4, 8, 1)).unwrap();
        let mut cfg = TrainConfig::new(NetConfig::new(3, 4, 2));
        cfg.epochs = 3;
        cfg.lr = 0.0;
        cfg.decay = Decay::Constant;
        cfg.batch_size = 4;
        let out = train_network(&cfg, &random_genotype(0), &data, None, |_| {}).unwrap();
        let (_, init) = DiscreteNet::build::<f32>(&random_genotype(0), cfg.net, derive_seed(0, 5, 0)).unwrap();
        for (a, b) in out.weights.params().iter().zip(init.params()) {
            assert_eq!(a.value, b.value);
        }
        assert!(out.stall_warning().is_some());
        assert_eq!(out.metrics.len(), 3);
    }

    #[test]
    fn deterministic() {
        let data = synth_generate(&SynthConfig::new(2, 4, 8, 1)).unwrap();
        let mut cfg = TrainConfig::new(NetConfig::new(3, 4, 2));
        cfg.epochs = 2;
        cfg.batch_size = 4;
        let a = train_network(&cfg, &random_genotype(1), &data, Some(&data), |_| {}).unwrap();
        let b = train_network(&cfg, &random_genotype(1), &data, Some(&data), |_| {}).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.best, b.best);
    }
}
