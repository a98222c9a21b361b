//! Alternating optimization of network weights and architecture logits.
//!
//! Each search step first moves the architecture logits against the
//! validation loss measured after a virtual weight step, using a
//! finite-difference Hessian-vector product for the second-order term, and
//! then takes one momentum-SGD step on the weights against the training
//! loss.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::metrics::Tally;
use crate::ops::Session;
use crate::optim::{gradient_step, sgd_momentum_step, Decay, Granularity, LrSchedule};
use crate::params::{all_finite, global_norm, ParamStore};
use crate::real::Real;
use crate::rng::derive_seed;
use crate::supernet::{AlphaParams, CellType, NetConfig, SuperNet};
use crate::tape::StatUpdate;

/// Radius `r` of the finite-difference probe, `h = r / |v|`.
pub const FD_RADIUS: f64 = 0.01;

/// Loss and gradients of one model evaluation.
#[derive(Clone, Debug)]
pub struct Evaluation<S> {
    pub loss: f64,
    pub tally: Tally,
    pub weight_grads: Vec<Vec<S>>,
    pub arch_grads: Vec<Vec<S>>,
    pub stat_updates: Vec<StatUpdate<S>>,
}

/// Which gradients an evaluation must produce; the others may be left
/// zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Need {
    pub weights: bool,
    pub arch: bool,
}

impl Need {
    pub const BOTH: Need = Need { weights: true, arch: true };
    pub const WEIGHTS: Need = Need { weights: true, arch: false };
    pub const ARCH: Need = Need { weights: false, arch: true };
}

/// A differentiable objective over (weights, architecture) pairs.
pub trait SearchModel<S: Real> {
    type Batch;

    fn evaluate(
        &self,
        weights: &ParamStore<S>,
        arch: &ParamStore<S>,
        batch: &Self::Batch,
        need: Need,
    ) -> Result<Evaluation<S>>;
}

fn checked<S: Real>(eval: Evaluation<S>, what: &str) -> Result<Evaluation<S>> {
    if !eval.loss.is_finite() {
        return Err(Error::Numeric {
            location: format!("{what}: loss is {}", eval.loss),
        });
    }
    if !all_finite(&eval.weight_grads) || !all_finite(&eval.arch_grads) {
        return Err(Error::Numeric {
            location: format!("{what}: non-finite gradient"),
        });
    }
    Ok(eval)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchState<S> {
    pub weights: ParamStore<S>,
    pub arch: ParamStore<S>,
    /// Inner step size of the virtual step; zero selects first order.
    pub epsilon: S,
    /// Architecture learning rate.
    pub gamma: S,
    /// Current weight learning rate.
    pub lr: S,
    pub momentum: S,
    pub alpha_weight_decay: S,
    pub step: usize,
}

impl<S: Real> SearchState<S> {
    pub fn new(weights: ParamStore<S>, arch: ParamStore<S>) -> Self {
        SearchState {
            weights,
            arch,
            epsilon: S::zero(),
            gamma: S::zero(),
            lr: S::zero(),
            momentum: S::zero(),
            alpha_weight_decay: S::zero(),
            step: 0,
        }
    }
}

/// `w - epsilon * grad_w L_train(w, alpha)`, a plain gradient step on a
/// detached copy.
pub fn virtual_step<S: Real, M: SearchModel<S>>(
    model: &M,
    state: &SearchState<S>,
    train: &M::Batch,
) -> Result<ParamStore<S>> {
    let eval = checked(model.evaluate(&state.weights, &state.arch, train, Need::WEIGHTS)?, "virtual step")?;
    Ok(state.weights.offset(&eval.weight_grads, -state.epsilon))
}

/// `[grad_a L_train(w + h v) - grad_a L_train(w - h v)] / (2h)` with
/// `h = FD_RADIUS / |v|`; zero when `v` vanishes.
pub fn hessian_vector_term<S: Real, M: SearchModel<S>>(
    model: &M,
    weights: &ParamStore<S>,
    arch: &ParamStore<S>,
    train: &M::Batch,
    v: &[Vec<S>],
) -> Result<Vec<Vec<S>>> {
    let norm = global_norm(v);
    let zeros = || arch.params().iter().map(|p| vec![S::zero(); p.numel()]).collect();
    if norm == S::zero() {
        return Ok(zeros());
    }
    let h = S::of(FD_RADIUS) / norm;
    let plus = checked(model.evaluate(&weights.offset(v, h), arch, train, Need::ARCH)?, "hessian probe (+)")?;
    let minus = checked(model.evaluate(&weights.offset(v, -h), arch, train, Need::ARCH)?, "hessian probe (-)")?;
    let two_h = h + h;
    Ok(plus
        .arch_grads
        .iter()
        .zip(&minus.arch_grads)
        .map(|(p, m)| p.iter().zip(m).map(|(&a, &b)| (a - b) / two_h).collect())
        .collect())
}

#[derive(Clone, Debug)]
pub struct Hypergradient<S> {
    pub grads: Vec<Vec<S>>,
    /// Validation loss and accuracy at the virtual weights.
    pub val: Tally,
}

/// Architecture gradient of the validation loss through one virtual weight
/// step. With `epsilon == 0` this is exactly `grad_a L_val(w, alpha)`.
pub fn alpha_hypergradient<S: Real, M: SearchModel<S>>(
    model: &M,
    state: &SearchState<S>,
    train: &M::Batch,
    val: &M::Batch,
) -> Result<Hypergradient<S>> {
    if state.epsilon == S::zero() {
        let eval = checked(model.evaluate(&state.weights, &state.arch, val, Need::ARCH)?, "validation")?;
        return Ok(Hypergradient {
            grads: eval.arch_grads,
            val: eval.tally,
        });
    }
    let virtual_weights = virtual_step(model, state, train)?;
    let eval = checked(model.evaluate(&virtual_weights, &state.arch, val, Need::BOTH)?, "validation")?;
    let term = hessian_vector_term(model, &state.weights, &state.arch, train, &eval.weight_grads)?;
    let grads = eval
        .arch_grads
        .iter()
        .zip(&term)
        .map(|(g, t)| g.iter().zip(t).map(|(&a, &b)| a - state.epsilon * b).collect())
        .collect();
    Ok(Hypergradient { grads, val: eval.tally })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub train: Tally,
    pub val: Tally,
}

/// One architecture update followed by one weight update.
pub fn search_step<S: Real, M: SearchModel<S>>(
    model: &M,
    state: &mut SearchState<S>,
    train: &M::Batch,
    val: &M::Batch,
) -> Result<StepReport> {
    let mut hyper = alpha_hypergradient(model, state, train, val)?;
    if state.alpha_weight_decay != S::zero() {
        for (g, p) in hyper.grads.iter_mut().zip(state.arch.params()) {
            for (gv, &pv) in g.iter_mut().zip(&p.value) {
                *gv += state.alpha_weight_decay * pv;
            }
        }
    }
    gradient_step(&mut state.arch, &hyper.grads, state.gamma)?;

    let eval = checked(model.evaluate(&state.weights, &state.arch, train, Need::WEIGHTS)?, "weight step")?;
    state.weights.zero_grads();
    state.weights.accumulate_grads(&eval.weight_grads)?;
    sgd_momentum_step(&mut state.weights, state.lr, state.momentum)?;
    state.weights.apply_stat_updates(&eval.stat_updates);
    state.step += 1;
    Ok(StepReport {
        train: eval.tally,
        val: hyper.val,
    })
}

/// The relaxed network as a search objective: mean cross-entropy with
/// batch-statistics normalization.
pub struct SupernetModel<'a> {
    pub net: &'a SuperNet,
}

impl<'a, S: Real> SearchModel<S> for SupernetModel<'a> {
    type Batch = Batch<S>;

    fn evaluate(&self, weights: &ParamStore<S>, arch: &ParamStore<S>, batch: &Batch<S>, need: Need) -> Result<Evaluation<S>> {
        let mut s = Session::new(weights, true);
        s.weight_grads = need.weights;
        let x = s.tape.constant(batch.x.clone(), crate::Shape::new(batch.dims)?)?;
        let logits = self.net.forward_arch_with(&mut s, arch, x, need.arch)?;
        let loss = s.tape.cross_entropy(logits, &batch.labels)?;
        let loss_value = s.tape.value(loss)[0].as_f64();
        let mut tally = Tally::default();
        tally.record(s.tape.value(logits), &batch.labels, loss_value);
        s.tape.backward(loss)?;
        Ok(Evaluation {
            loss: loss_value,
            tally,
            weight_grads: weights.gradients_from(&s.tape),
            arch_grads: arch.gradients_from(&s.tape),
            stat_updates: s.tape.take_stat_updates(),
        })
    }
}

/// Inference-mode pass of the relaxed network over a dataset.
pub fn evaluate_supernet<S: Real>(
    net: &SuperNet,
    weights: &ParamStore<S>,
    arch: &ParamStore<S>,
    data: &Dataset,
    batch_size: usize,
) -> Result<Tally> {
    let mut tally = Tally::default();
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let batch: Batch<S> = data.batch(chunk)?;
        let mut s = Session::new(weights, false);
        let x = s.tape.constant(batch.x, crate::Shape::new(batch.dims)?)?;
        let logits = net.forward_arch(&mut s, arch, x)?;
        let loss = s.tape.cross_entropy(logits, &batch.labels)?;
        let loss_value = s.tape.value(loss)[0].as_f64();
        tally.record(s.tape.value(logits), &batch.labels, loss_value);
    }
    Ok(tally)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    First,
    Second,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub net: NetConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_omega: f64,
    pub decay: Decay,
    pub granularity: Granularity,
    pub lr_alpha: f64,
    pub momentum: f64,
    pub alpha_weight_decay: f64,
    pub alpha_noise: f64,
    pub order: Order,
    pub seed: u64,
}

impl SearchConfig {
    pub fn new(net: NetConfig) -> Self {
        SearchConfig {
            net,
            epochs: 20,
            batch_size: 8,
            lr_omega: 0.025,
            decay: Decay::Cosine { floor: 1e-4 },
            granularity: Granularity::Epoch,
            lr_alpha: 3e-4,
            momentum: 0.9,
            alpha_weight_decay: 0.0,
            alpha_noise: 1e-3,
            order: Order::Second,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        for (name, v) in [
            ("lr_omega", self.lr_omega),
            ("lr_alpha", self.lr_alpha),
            ("momentum", self.momentum),
            ("alpha_weight_decay", self.alpha_weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }

    fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.lr_omega,
            decay: self.decay,
            granularity: self.granularity,
        }
    }
}

pub const SEARCH_CSV_HEADER: &str =
    "epoch,step,train_loss,val_loss,val_top1,mean_edge_entropy_normal,mean_edge_entropy_reduce,lr_omega,lr_alpha";

/// One row of search metrics. Epoch 0 describes the initialization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_top1: f64,
    pub entropy_normal: f64,
    pub entropy_reduce: f64,
    pub lr_omega: f64,
    pub lr_alpha: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6e},{:.6e}",
            self.epoch,
            self.step,
            self.train_loss,
            self.val_loss,
            self.val_top1,
            self.entropy_normal,
            self.entropy_reduce,
            self.lr_omega,
            self.lr_alpha
        )
    }
}

pub fn write_search_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut out = String::from(SEARCH_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub struct SearchOutcome {
    pub net: SuperNet,
    pub weights: ParamStore<f32>,
    /// Architecture after each epoch, starting with the initialization.
    pub history: Vec<AlphaParams<f32>>,
    /// Snapshot with the best validation top-1 (lower loss, then earlier
    /// epoch, on ties).
    pub best: AlphaParams<f32>,
    pub metrics: Vec<EpochMetrics>,
}

impl SearchOutcome {
    pub fn final_alpha(&self) -> &AlphaParams<f32> {
        self.history.last().expect("history holds the initialization")
    }
}

fn tag_epoch(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Numeric { location } => Error::Numeric {
            location: format!("epoch {epoch} step {step}: {location}"),
        },
        other => other,
    }
}

/// Runs the full search; `observe` sees each metrics row as it is produced.
pub fn run_search(
    config: &SearchConfig,
    train: &Dataset,
    val: &Dataset,
    mut observe: impl FnMut(&EpochMetrics),
) -> Result<SearchOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "search needs nonempty splits, got {} train and {} validation samples",
            train.len(),
            val.len()
        )));
    }
    let (net, weights) = SuperNet::build::<f32>(config.net, derive_seed(config.seed, 1, 0))?;
    let alpha = AlphaParams::<f32>::init(derive_seed(config.seed, 2, 0), config.alpha_noise)?;
    let model = SupernetModel { net: &net };
    let mut state = SearchState::new(weights, alpha.into_store());
    state.gamma = config.lr_alpha as f32;
    state.momentum = config.momentum as f32;
    state.alpha_weight_decay = config.alpha_weight_decay as f32;

    let schedule = config.schedule();
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let snapshot = |state: &SearchState<f32>| AlphaParams::from_store(state.arch.clone());
    let row = |epoch, step, train_loss, val: &Tally, alpha: &AlphaParams<f32>, lr| EpochMetrics {
        epoch,
        step,
        train_loss,
        val_loss: val.mean_loss(),
        val_top1: val.top1_rate(),
        entropy_normal: alpha.mean_edge_entropy(CellType::Normal),
        entropy_reduce: alpha.mean_edge_entropy(CellType::Reduce),
        lr_omega: lr,
        lr_alpha: config.lr_alpha,
    };

    let initial = snapshot(&state)?;
    let train0 = evaluate_supernet(&net, &state.weights, &state.arch, train, config.batch_size)?;
    let val0 = evaluate_supernet(&net, &state.weights, &state.arch, val, config.batch_size)?;
    let first = row(0, 0, train0.mean_loss(), &val0, &initial, schedule.rate(0, 0, config.epochs, steps_per_epoch));
    observe(&first);
    let mut metrics = vec![first];
    let mut history = vec![initial.clone()];
    let mut best = (initial, first);

    for epoch in 0..config.epochs {
        let train_order = train.batch_indices(config.batch_size, derive_seed(config.seed, 3, epoch as u64));
        let val_order = val.batch_indices(config.batch_size, derive_seed(config.seed, 4, epoch as u64));
        let mut train_tally = Tally::default();
        let mut lr = 0.0;
        for (i, chunk) in train_order.iter().enumerate() {
            lr = schedule.rate(epoch, i, config.epochs, steps_per_epoch);
            state.lr = lr as f32;
            state.epsilon = match config.order {
                Order::First => 0.0,
                Order::Second => lr as f32,
            };
            let tb: Batch<f32> = train.batch(chunk)?;
            let vb: Batch<f32> = val.batch(&val_order[i % val_order.len()])?;
            let report = search_step(&model, &mut state, &tb, &vb).map_err(|e| tag_epoch(e, epoch + 1, i))?;
            train_tally.merge(&report.train);
        }
        let alpha = snapshot(&state)?;
        let val_tally = evaluate_supernet(&net, &state.weights, &state.arch, val, config.batch_size)
            .map_err(|e| tag_epoch(e, epoch + 1, state.step))?;
        let m = row(epoch + 1, state.step, train_tally.mean_loss(), &val_tally, &alpha, lr);
        observe(&m);
        let better = m.val_top1 > best.1.val_top1 || (m.val_top1 == best.1.val_top1 && m.val_loss < best.1.val_loss);
        if better {
            best = (alpha.clone(), m);
        }
        metrics.push(m);
        history.push(alpha);
    }
    Ok(SearchOutcome {
        net,
        weights: state.weights,
        history,
        best: best.0,
        metrics,
    })
}

/// Closed-form bilevel toy: `L_train = w^2/2 - a w`, `L_val = (w - 1)^2/2`.
/// The hypergradient through one virtual step is `epsilon (w' - 1)`.
pub mod toy {
    use super::*;
    use crate::params::Group;

    #[derive(Clone, Copy, Debug, PartialEq, Eq)]
    pub enum Split {
        Train,
        Val,
    }

    pub struct Quadratic;

    pub fn state<S: Real>(w: f64, a: f64) -> SearchState<S> {
        let mut weights = ParamStore::new(Group::Weights);
        weights.add("w", &[1], vec![S::of(w)]);
        let mut arch = ParamStore::new(Group::Arch);
        arch.add("a", &[1], vec![S::of(a)]);
        SearchState::new(weights, arch)
    }

    /// Exact hypergradient of the toy problem.
    pub fn analytic(w: f64, a: f64, epsilon: f64) -> f64 {
        let w_virtual = w - epsilon * (w - a);
        epsilon * (w_virtual - 1.0)
    }

    impl<S: Real> SearchModel<S> for Quadratic {
        type Batch = Split;

        fn evaluate(&self, weights: &ParamStore<S>, arch: &ParamStore<S>, batch: &Split, _: Need) -> Result<Evaluation<S>> {
            let w = weights.params()[0].value[0];
            let a = arch.params()[0].value[0];
            let half = S::of(0.5);
            let (loss, gw, ga) = match batch {
                Split::Train => (half * w * w - a * w, w - a, -w),
                Split::Val => (half * (w - S::one()) * (w - S::one()), w - S::one(), S::zero()),
            };
            Ok(Evaluation {
                loss: loss.as_f64(),
                tally: Tally::default(),
                weight_grads: vec![vec![gw]],
                arch_grads: vec![vec![ga]],
                stat_updates: Vec::new(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::toy::{analytic, state, Quadratic, Split};
    use super::*;
    use crate::params::Group;

    /// L = (w - 2)^2, no architecture dependence.
    struct Bowl;

    impl SearchModel<f64> for Bowl {
        type Batch = ();

        fn evaluate(&self, weights: &ParamStore<f64>, arch: &ParamStore<f64>, _: &(), _: Need) -> Result<Evaluation<f64>> {
            let w = weights.params()[0].value[0];
            Ok(Evaluation {
                loss: (w - 2.0).powi(2),
                tally: Tally::default(),
                weight_grads: vec![vec![2.0 * (w - 2.0)]],
                arch_grads: arch.params().iter().map(|p| vec![0.0; p.numel()]).collect(),
                stat_updates: Vec::new(),
            })
        }
    }

    #[test]
    fn virtual_step_on_bowl() {
        let mut st = state::<f64>(0.0, 0.0);
        st.epsilon = 0.1;
        let w = virtual_step(&Bowl, &st, &()).unwrap();
        assert!((w.params()[0].value[0] - 0.4).abs() < 1e-15);
        assert_eq!(st.weights.params()[0].value[0], 0.0);
        assert!(w.params()[0].momentum.is_none());
        st.epsilon = 0.0;
        let w = virtual_step(&Bowl, &st, &()).unwrap();
        assert_eq!(w.params()[0].value[0].to_bits(), 0.0f64.to_bits());
    }

    #[test]
    fn toy_hypergradient_matches_closed_form() {
        for (w, a, eps) in [(0.3, -0.2, 0.1), (2.0, 1.0, 0.5), (-1.0, 0.7, 0.01)] {
            let mut st = state::<f64>(w, a);
            st.epsilon = eps;
            let g = alpha_hypergradient(&Quadratic, &st, &Split::Train, &Split::Val).unwrap();
            let want = analytic(w, a, eps);
            assert!((g.grads[0][0] - want).abs() <= 1e-8 * want.abs().max(1e-3), "{w} {a} {eps}");
        }
    }

    #[test]
    fn zero_direction_gives_zero_term() {
        let st = state::<f64>(1.0, 0.0);
        let t = hessian_vector_term(&Quadratic, &st.weights, &st.arch, &Split::Train, &[vec![0.0]]).unwrap();
        assert_eq!(t, vec![vec![0.0]]);
    }

    #[test]
    fn step_order_and_zero_gamma() {
        let mut st = state::<f64>(0.5, 0.25);
        st.epsilon = 0.1;
        st.lr = 0.1;
        st.momentum = 0.9;
        search_step(&Quadratic, &mut st, &Split::Train, &Split::Val).unwrap();
        assert_eq!(st.arch.params()[0].value[0], 0.25);
        // weight step uses the (unchanged) alpha: g = w - a = 0.25
        assert!((st.weights.params()[0].value[0] - (0.5 - 0.1 * 0.25)).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn arch_store_is_not_weights() {
        let st = state::<f64>(0.0, 0.0);
        assert_eq!(st.weights.group(), Group::Weights);
        assert_eq!(st.arch.group(), Group::Arch);
    }
}
