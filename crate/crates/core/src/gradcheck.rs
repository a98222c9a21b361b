//! Central finite-difference checks of the reverse-mode gradients.
//!
//! Every case projects its output onto a fixed random tensor to get a
//! scalar, then compares the analytic gradient of that scalar with
//! `(f(x + h) - f(x - h)) / 2h` on every input and parameter coordinate (a
//! seeded sample of them for large tensors).

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::genotype::random_genotype;
use crate::kernels::{ConvGeom, PoolMode};
use crate::network::DiscreteCell;
use crate::ops::{Builder, NUM_OPS, FactorizedReduce, Linear, OpInstance, OpKind, OpOptions, ReluConvBn, Session, SqueezeExcite};
use crate::params::{Group, ParamId, ParamStore};
use crate::rng::derive_seed;
use crate::shape::Shape;
use crate::supernet::{mixed_op_forward, plan_cells, CellType, NetConfig, Preprocess, SearchCell, SuperNet, NUM_EDGES};
use crate::tape::{BnMode, Var};

/// Tolerance on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Tolerance for cases that run batch norm on batch statistics.
pub const TOLERANCE_TRAIN_BN: f64 = 1e-3;

const STEP: f64 = 1e-6;

/// Outcome of one gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Number of coordinates compared.
    pub coordinates: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

type Forward = Box<dyn Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var>>;

/// One differentiable function of some input tensors and a parameter store.
pub struct Case {
    pub name: String,
    pub train: bool,
    pub tolerance: f64,
    store: ParamStore<f64>,
    inputs: Vec<(Vec<f64>, Shape)>,
    forward: Forward,
    /// Coordinates sampled per tensor.
    sample: usize,
}

impl Case {
    fn evaluate(&self, store: &ParamStore<f64>, inputs: &[(Vec<f64>, Shape)], proj: Option<&[f64]>) -> Result<Eval> {
        let mut s = Session::new(store, self.train);
        let vars = inputs
            .iter()
            .map(|(v, sh)| s.tape.leaf(v.clone(), sh.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let out = (self.forward)(&mut s, &vars)?;
        let shape = s.tape.shape(out).clone();
        let proj = match proj {
            Some(p) => p.to_vec(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0x9c, shape.numel() as u64, 0));
                (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()
            }
        };
        let p = s.tape.constant(proj.clone(), shape)?;
        let prod = s.tape.mul(out, p)?;
        let loss = s.tape.sum(prod);
        let value = s.tape.value(loss)[0];
        s.tape.backward(loss)?;
        let input_grads = vars
            .iter()
            .zip(inputs)
            .map(|(&v, (x, _))| s.tape.grad(v).map_or(vec![0.0; x.len()], <[f64]>::to_vec))
            .collect();
        let param_grads = store.gradients_from(&s.tape);
        Ok(Eval {
            value,
            proj,
            input_grads,
            param_grads,
        })
    }

    /// Compares analytic and numeric gradients.
    pub fn run(&self, seed: u64) -> Result<CheckReport> {
        let base = self.evaluate(&self.store, &self.inputs, None)?;
        let proj = base.proj.as_slice();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::new();
        for (t, (x, _)) in self.inputs.iter().enumerate() {
            for j in pick(&mut rng, x.len(), self.sample) {
                let numeric = self.central(proj, |inputs, _, d| inputs[t].0[j] += d)?;
                pairs.push((base.input_grads[t][j], numeric));
            }
        }
        for (t, p) in self.store.params().iter().enumerate() {
            for j in pick(&mut rng, p.value.len(), self.sample) {
                let numeric = self.central(proj, |_, store, d| store.get_mut(ParamId(t)).value[j] += d)?;
                pairs.push((base.param_grads[t][j], numeric));
            }
        }
        Ok(CheckReport {
            name: self.name.clone(),
            max_rel_error: max_relative_error(&pairs),
            tolerance: self.tolerance,
            coordinates: pairs.len(),
        })
    }

    fn central(
        &self,
        proj: &[f64],
        perturb: impl Fn(&mut Vec<(Vec<f64>, Shape)>, &mut ParamStore<f64>, f64),
    ) -> Result<f64> {
        let at = |d: f64| -> Result<f64> {
            let mut inputs = self.inputs.clone();
            let mut store = self.store.clone();
            perturb(&mut inputs, &mut store, d);
            Ok(self.evaluate(&store, &inputs, Some(proj))?.value)
        };
        Ok((at(STEP)? - at(-STEP)?) / (2.0 * STEP))
    }
}

struct Eval {
    value: f64,
    proj: Vec<f64>,
    input_grads: Vec<Vec<f64>>,
    param_grads: Vec<Vec<f64>>,
}

fn pick(rng: &mut ChaCha8Rng, len: usize, sample: usize) -> Vec<usize> {
    if len <= sample {
        (0..len).collect()
    } else {
        let mut v = index::sample(rng, len, sample).into_vec();
        v.sort_unstable();
        v
    }
}

/// Largest `|a - n| / max(|a|, |n|, floor)` over (analytic, numeric)
/// pairs, where `floor` is 1e-3 of the largest analytic magnitude so that
/// coordinates with vanishing gradient are judged on an absolute scale.
pub fn max_relative_error(pairs: &[(f64, f64)]) -> f64 {
    let scale = pairs.iter().fold(0.0f64, |m, &(a, _)| m.max(a.abs()));
    let floor = (1e-3 * scale).max(1e-10);
    pairs
        .iter()
        .map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

struct CaseBuilder {
    rng: ChaCha8Rng,
}

impl CaseBuilder {
    fn tensor(&mut self, dims: &[usize]) -> (Vec<f64>, Shape) {
        let shape = Shape::from_dims(dims);
        let v = (0..shape.numel()).map(|_| self.rng.gen_range(-1.0..1.0)).collect();
        (v, shape)
    }

    fn case(&mut self, name: impl Into<String>, inputs: &[&[usize]], f: impl Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var> + 'static) -> Case {
        let inputs = inputs.iter().map(|d| self.tensor(d)).collect();
        Case {
            name: name.into(),
            train: false,
            tolerance: TOLERANCE,
            store: ParamStore::new(Group::Weights),
            inputs,
            forward: Box::new(f),
            sample: usize::MAX,
        }
    }

    /// A case whose parameters are registered by `build`, with a fresh
    /// random store; batch-norm affine parameters are randomized so they
    /// are not at their trivial initial values.
    fn module<T: 'static>(
        &mut self,
        name: impl Into<String>,
        train: bool,
        inputs: &[&[usize]],
        sample: usize,
        build: impl FnOnce(&mut Builder<'_, f64, ChaCha8Rng>) -> Result<T>,
        f: impl Fn(&T, &mut Session<'_, f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Result<Case> {
        let mut store = ParamStore::new(Group::Weights);
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng.gen());
        let module = build(&mut Builder::new(&mut store, &mut rng))?;
        for p in store.params_mut() {
            if p.name.ends_with(".scale") || p.name.ends_with(".shift") {
                for v in &mut p.value {
                    *v += rng.gen_range(-0.3..0.3);
                }
            }
        }
        let inputs = inputs.iter().map(|d| self.tensor(d)).collect();
        let tolerance = if train && !store.all_stats().is_empty() {
            TOLERANCE_TRAIN_BN
        } else {
            TOLERANCE
        };
        Ok(Case {
            name: name.into(),
            train,
            tolerance,
            store,
            inputs,
            forward: Box::new(move |s, x| f(&module, s, x)),
            sample,
        })
    }
}

fn mode_name(train: bool) -> &'static str {
    if train {
        "train"
    } else {
        "eval"
    }
}

/// Single primitives of the tape.
pub fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut b = CaseBuilder {
        rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, 0)),
    };
    let mut cases = Vec::new();
    let convs: [(&str, [usize; 4], [usize; 4], ConvGeom); 5] = [
        ("conv2d 3x3", [2, 3, 5, 6], [4, 3, 3, 3], ConvGeom::new(1, 1, 1, 1)),
        ("conv2d 3x3 stride 2", [2, 2, 5, 6], [3, 2, 3, 3], ConvGeom::new(2, 1, 1, 1)),
        ("conv2d depthwise dilated", [1, 4, 6, 6], [4, 1, 3, 3], ConvGeom::new(1, 2, 2, 4)),
        ("conv2d grouped", [2, 4, 4, 5], [6, 2, 3, 3], ConvGeom::new(1, 1, 1, 2)),
        ("conv2d 1x1 stride 2", [2, 3, 5, 5], [2, 3, 1, 1], ConvGeom::new(2, 0, 1, 1)),
    ];
    for (name, x, w, geom) in convs {
        cases.push(b.case(name, &[&x, &w], move |s, v| s.tape.conv2d(v[0], v[1], geom)));
    }
    for (mode, label) in [(PoolMode::Max, "max"), (PoolMode::Average, "avg")] {
        for stride in [1, 2] {
            cases.push(b.case(format!("{label}_pool stride {stride}"), &[&[2, 3, 5, 6]], move |s, v| {
                s.tape.pool2d(v[0], mode, 3, stride, 1)
            }));
        }
    }
    let mut bn_train = b.case("batchnorm train", &[&[3, 4, 3, 2], &[4], &[4]], |s, v| {
        s.tape.batchnorm(v[0], v[1], v[2], BnMode::Train { stat: None })
    });
    bn_train.train = true;
    bn_train.tolerance = TOLERANCE_TRAIN_BN;
    cases.push(bn_train);
    let mean: Vec<f64> = (0..4).map(|_| b.rng.gen_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..4).map(|_| b.rng.gen_range(0.5..2.0)).collect();
    cases.push(b.case("batchnorm eval", &[&[2, 4, 3, 3], &[4], &[4]], move |s, v| {
        s.tape.batchnorm(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var })
    }));
    cases.push(b.case("relu", &[&[2, 3, 4, 4]], |s, v| Ok(s.tape.relu(v[0]))));
    cases.push(b.case("sigmoid", &[&[2, 3, 4, 4]], |s, v| Ok(s.tape.sigmoid(v[0]))));
    cases.push(b.case("linear", &[&[3, 5], &[4, 5], &[4]], |s, v| s.tape.linear(v[0], v[1], v[2])));
    cases.push(b.case("global_avg", &[&[2, 3, 4, 5]], |s, v| s.tape.global_avg(v[0])));
    cases.push(b.case("concat", &[&[2, 2, 3, 4], &[2, 3, 3, 4]], |s, v| s.tape.concat(&[v[0], v[1]])));
    cases.push(b.case("add", &[&[2, 3, 3, 3], &[2, 3, 3, 3], &[2, 3, 3, 3]], |s, v| s.tape.add(v)));
    cases.push(b.case("mul", &[&[2, 3, 3, 3], &[2, 3, 3, 3]], |s, v| s.tape.mul(v[0], v[1])));
    cases.push(b.case("scale", &[&[2, 3, 3, 3]], |s, v| Ok(s.tape.scale(v[0], -1.7))));
    cases.push(b.case("sum", &[&[2, 3, 3, 3]], |s, v| Ok(s.tape.sum(v[0]))));
    cases.push(b.case("softmax_row", &[&[4, 6]], |s, v| s.tape.softmax_row(v[0], 2)));
    cases.push(b.case("weighted_sum", &[&[5], &[2, 3, 3, 3], &[2, 3, 3, 3], &[2, 3, 3, 3]], |s, v| {
        s.tape.weighted_sum(v[0], &[(0, v[1]), (2, v[2]), (4, v[3])])
    }));
    cases.push(b.case("channel_scale", &[&[2, 3, 4, 4], &[2, 3]], |s, v| s.tape.channel_scale(v[0], v[1])));
    cases.push(b.case("shift_crop", &[&[2, 3, 4, 5]], |s, v| s.tape.shift_crop(v[0])));
    cases.push(b.case("zero", &[&[2, 3, 4, 4]], |s, v| {
        Ok(s.tape.zero_like(v[0], Shape::from_dims(&[2, 3, 2, 2])))
    }));
    cases.push(b.case("cross_entropy", &[&[4, 5]], |s, v| s.tape.cross_entropy(v[0], &[0, 3, 4, 3])));
    cases
}

/// The candidate operators and the blocks and cells assembled from them.
pub fn composition_cases(seed: u64) -> Result<Vec<Case>> {
    let mut b = CaseBuilder {
        rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 2, 0)),
    };
    let options = OpOptions::default();
    let c = 4;
    let x: &[usize] = &[2, c, 5, 6];
    let mut cases = Vec::new();
    for kind in OpKind::ALL {
        for stride in [1, 2] {
            for train in [true, false] {
                cases.push(b.module(
                    format!("{kind} stride {stride} {}", mode_name(train)),
                    train,
                    &[x],
                    usize::MAX,
                    |bb| OpInstance::build(bb, "op", kind, c, stride, &options),
                    |op, s, v| op.forward(s, v[0]),
                )?);
            }
        }
    }
    {
        let dilation_repeats = 2;
        let options = OpOptions {
            dil_conv_repeats: dilation_repeats,
            ..options
        };
        cases.push(b.module(
            "DilConv3 repeated train",
            true,
            &[x],
            usize::MAX,
            |bb| OpInstance::build(bb, "op", OpKind::DilConv3, c, 1, &options),
            |op, s, v| op.forward(s, v[0]),
        )?);
    }
    for train in [true, false] {
        let m = mode_name(train);
        cases.push(b.module(format!("relu-conv-bn {m}"), train, &[x], usize::MAX, |bb| {
            Ok(ReluConvBn::build(bb, "rcb", true, c, 6, 3, 1, 1))
        }, |m, s, v| m.forward(s, v[0]))?);
        cases.push(b.module(format!("factorized reduce {m}"), train, &[x], usize::MAX, |bb| {
            FactorizedReduce::build(bb, "fr", c, 6)
        }, |m, s, v| m.forward(s, v[0]))?);
        cases.push(b.module(format!("squeeze-excite {m}"), train, &[x], usize::MAX, |bb| {
            Ok(SqueezeExcite::build(bb, "se", c, 2))
        }, |m, s, v| m.forward(s, v[0]))?);
        cases.push(b.module(format!("linear head {m}"), train, &[&[3, 6]], usize::MAX, |bb| {
            Ok(Linear::build(bb, "fc", 6, 3))
        }, |m, s, v| m.forward(s, v[0]))?);
        cases.push(b.module(format!("preprocess conv {m}"), train, &[&[2, 6, 4, 4]], usize::MAX, |bb| {
            Preprocess::build(bb, "pre", 6, c, false)
        }, |m, s, v| m.forward(s, v[0]))?);
        cases.push(b.module(format!("preprocess reduce {m}"), train, &[&[2, 6, 4, 4]], usize::MAX, |bb| {
            Preprocess::build(bb, "pre", 6, c, true)
        }, |m, s, v| m.forward(s, v[0]))?);
    }
    for stride in [1, 2] {
        for train in [true, false] {
            cases.push(b.module(
                format!("mixed op stride {stride} {}", mode_name(train)),
                train,
                &[x, &[NUM_EDGES, NUM_OPS]],
                12,
                |bb| {
                    OpKind::ALL
                        .iter()
                        .map(|&k| OpInstance::build(bb, &format!("{k}"), k, c, stride, &options))
                        .collect::<Result<Vec<_>>>()
                },
                |ops, s, v| mixed_op_forward(s, v[0], v[1], 5, ops),
            )?);
        }
    }
    let cc = 2;
    for (cell_type, reduction_prev) in [(CellType::Normal, false), (CellType::Normal, true), (CellType::Reduce, false)] {
        let pp: &[usize] = if reduction_prev { &[2, 4, 6, 6] } else { &[2, 4, 3, 3] };
        cases.push(b.module(
            format!("search cell {} (reduction_prev={reduction_prev}) train", cell_type.name()),
            true,
            &[pp, &[2, 4, 3, 3], &[NUM_EDGES, NUM_OPS]],
            3,
            |bb| SearchCell::build(bb, "cell", cell_type, reduction_prev, 4, 4, cc, &options),
            |cell, s, v| cell.forward(s, v[0], v[1], v[2]),
        )?);
    }
    let genotype = random_genotype(derive_seed(seed, 3, 0));
    let config = NetConfig::new(3, 2, 3);
    for (i, plan) in plan_cells(&config)?.into_iter().enumerate() {
        let g = genotype;
        let pp = if plan.reduction_prev { 2 } else { 1 };
        cases.push(b.module(
            format!("discrete cell {i} {} train", plan.cell_type.name()),
            true,
            &[&[2, plan.c_prev_prev, 3 * pp, 3 * pp], &[2, plan.c_prev, 3, 3]],
            4,
            |bb| DiscreteCell::build(bb, "cell", &plan, g.cell(plan.cell_type), &config),
            |cell, s, v| cell.forward(s, v[0], v[1]),
        )?);
    }
    cases.push(b.module(
        "supernet with loss train",
        true,
        &[&[2, 3, 4, 4], &[NUM_EDGES, NUM_OPS], &[NUM_EDGES, NUM_OPS]],
        2,
        |bb| supernet_modules(bb, &config),
        |net, s, v| {
            let stem = net.stem.forward(s, v[0])?;
            let (mut pp, mut p) = (stem, stem);
            for cell in &net.cells {
                let alpha = if cell.cell_type == CellType::Normal { v[1] } else { v[2] };
                let out = cell.forward(s, pp, p, alpha)?;
                pp = p;
                p = out;
            }
            let pooled = s.tape.global_avg(p)?;
            let logits = net.classifier.forward(s, pooled)?;
            s.tape.cross_entropy(logits, &[1, 2])
        },
    )?);
    Ok(cases)
}

fn supernet_modules(b: &mut Builder<'_, f64, ChaCha8Rng>, config: &NetConfig) -> Result<SuperNet> {
    let plans = plan_cells(config)?;
    let stem = ReluConvBn::build(b, "stem", false, config.in_channels, config.c_init, 3, 1, 1);
    let cells = plans
        .iter()
        .enumerate()
        .map(|(i, p)| {
            SearchCell::build(
                b,
                &format!("cells.{i}"),
                p.cell_type,
                p.reduction_prev,
                p.c_prev_prev,
                p.c_prev,
                p.channels,
                &config.options,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let last = plans.last().map_or(0, |p| p.channels) * crate::supernet::NUM_NODES;
    let classifier = Linear::build(b, "classifier", last, config.classes);
    Ok(SuperNet {
        config: *config,
        stem,
        cells,
        classifier,
    })
}

/// Runs every primitive and composition case.
pub fn run_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut cases = primitive_cases(seed);
    cases.extend(composition_cases(seed)?);
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| c.run(derive_seed(seed, 4, i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(max_relative_error(&[(1.0, 1.0), (0.0, 0.0)]), 0.0);
        assert!((max_relative_error(&[(2.0, 2.002)]) - 0.002 / 2.002).abs() < 1e-12);
        assert!(max_relative_error(&[(1.0, 1.0), (0.0, 1e-9)]) < 1e-5);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut b = CaseBuilder {
            rng: ChaCha8Rng::seed_from_u64(0),
        };
        let case = b.case("double", &[&[3]], |s, v| {
            let y = s.tape.scale(v[0], 2.0);
            let z = s.tape.constant(s.tape.value(y).to_vec(), s.tape.shape(y).clone())?;
            s.tape.add(&[v[0], z])
        });
        let r = case.run(0).unwrap();
        assert!(!r.passed(), "{r:?}");
    }

    #[test]
    fn primitives_pass() {
        for case in primitive_cases(11) {
            let r = case.run(1).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }
}
