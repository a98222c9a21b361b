//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value. Nodes are
//! appended in evaluation order, so walking the tape backwards is a valid
//! reverse topological traversal.

use crate::error::{Error, Result};
use crate::kernels::{self, BnSaved, ConvDims, ConvGeom, PoolDims, PoolMode};
use crate::params::{ParamKey, Parameter};
use crate::real::Real;
use crate::shape::{window_out_len, Shape};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BN_EPS: f64 = 1e-5;

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, S> {
    /// Normalize by batch statistics; the batch mean and unbiased variance
    /// are recorded under `stat` so the caller can fold them into running
    /// averages.
    Train { stat: Option<usize> },
    Eval { mean: &'a [S], var: &'a [S] },
}

/// Batch statistics observed by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatUpdate<S> {
    pub stat: usize,
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

enum Op<S> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
        dims: ConvDims,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    AvgPool {
        input: Var,
        dims: PoolDims,
    },
    BatchNormTrain {
        input: Var,
        scale: Var,
        shift: Var,
        saved: BnSaved<S>,
    },
    BatchNormEval {
        input: Var,
        scale: Var,
        shift: Var,
        mean: Vec<S>,
        inv_std: Vec<S>,
    },
    Relu(Var),
    Sigmoid(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    GlobalAvg(Var),
    Concat(Vec<Var>),
    Add(Vec<Var>),
    Mul(Var, Var),
    Scale(Var, S),
    Sum(Var),
    SoftmaxRow {
        matrix: Var,
        row: usize,
    },
    WeightedSum {
        weights: Var,
        terms: Vec<(usize, Var)>,
    },
    ChannelScale {
        input: Var,
        gate: Var,
    },
    ShiftCrop(Var),
    Zero,
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
}

struct Node<S> {
    shape: Shape,
    value: Vec<S>,
    requires_grad: bool,
    op: Op<S>,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    leaf_grads: Vec<Option<Vec<S>>>,
    bindings: Vec<(ParamKey, Var)>,
    stat_updates: Vec<StatUpdate<S>>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            bindings: Vec::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Shape, value: Vec<S>, requires_grad: bool, op: Op<S>) -> Var {
        debug_assert_eq!(shape.numel(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<S> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &Shape {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn bindings(&self) -> &[(ParamKey, Var)] {
        &self.bindings
    }

    pub fn stat_updates(&self) -> &[StatUpdate<S>] {
        &self.stat_updates
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<S>> {
        std::mem::take(&mut self.stat_updates)
    }

    pub fn leaf(&mut self, values: Vec<S>, shape: Shape, requires_grad: bool) -> Result<Var> {
        if values.len() != shape.numel() {
            return Err(Error::dim("leaf", "numel", shape.numel(), values.len()));
        }
        Ok(self.push(shape, values, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, values: Vec<S>, shape: Shape) -> Result<Var> {
        self.leaf(values, shape, false)
    }

    /// Places a copy of a parameter on the tape as a differentiable leaf.
    pub fn bind(&mut self, key: ParamKey, param: &Parameter<S>) -> Var {
        self.bind_with(key, param, true)
    }

    /// Binds a parameter; with `requires_grad == false` no gradient is
    /// computed for it (it reads as zero through the store).
    pub fn bind_with(&mut self, key: ParamKey, param: &Parameter<S>, requires_grad: bool) -> Var {
        let v = self.push(param.shape.clone(), param.value.clone(), requires_grad, Op::Leaf);
        self.bindings.push((key, v));
        v
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, geom: ConvGeom) -> Result<Var> {
        const OP: &str = "conv2d";
        let [b, cin, t, n] = self.shape(input).bctn(OP)?;
        let ws = self.shape(weight).bctn(OP)?;
        let [cout, cin_g, kh, kw] = ws;
        if geom.groups == 0 || cin % geom.groups != 0 || cout % geom.groups != 0 {
            return Err(Error::Config(format!(
                "conv2d: groups {} must divide input channels {cin} and output channels {cout}",
                geom.groups
            )));
        }
        if cin_g != cin / geom.groups {
            return Err(Error::dim(OP, "weight in-channels", cin / geom.groups, cin_g));
        }
        let to = window_out_len(t, kh, geom.stride.0, geom.padding.0, geom.dilation.0)
            .ok_or_else(|| Error::dim(OP, "frames", geom.dilation.0 * (kh - 1) + 1, t + 2 * geom.padding.0))?;
        let no = window_out_len(n, kw, geom.stride.1, geom.padding.1, geom.dilation.1)
            .ok_or_else(|| Error::dim(OP, "joints", geom.dilation.1 * (kw - 1) + 1, n + 2 * geom.padding.1))?;
        let dims = ConvDims {
            batch: b,
            cin,
            cout,
            t,
            n,
            kh,
            kw,
            to,
            no,
        };
        let out = kernels::conv2d_forward(self.value(input), self.value(weight), &dims, &geom);
        let rg = self.rg(&[input, weight]);
        Ok(self.push(
            Shape::from_dims(&[b, cout, to, no]),
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                geom,
                dims,
            },
        ))
    }

    pub fn pool2d(&mut self, input: Var, mode: PoolMode, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "pool2d";
        let [b, c, t, n] = self.shape(input).bctn(OP)?;
        if !(1..=2).contains(&stride) {
            return Err(Error::Config(format!("pool2d: stride {stride} not in {{1,2}}")));
        }
        let to = window_out_len(t, kernel, stride, pad, 1).ok_or_else(|| Error::dim(OP, "frames", kernel, t + 2 * pad))?;
        let no = window_out_len(n, kernel, stride, pad, 1).ok_or_else(|| Error::dim(OP, "joints", kernel, n + 2 * pad))?;
        if pad >= kernel {
            return Err(Error::Config(format!("pool2d: padding {pad} must be smaller than kernel {kernel}")));
        }
        let dims = PoolDims {
            planes: b * c,
            t,
            n,
            k: kernel,
            stride,
            pad,
            to,
            no,
        };
        let rg = self.rg(&[input]);
        let shape = Shape::from_dims(&[b, c, to, no]);
        Ok(match mode {
            PoolMode::Max => {
                let (out, argmax) = kernels::max_pool_forward(self.value(input), &dims);
                self.push(shape, out, rg, Op::MaxPool { input, argmax })
            }
            PoolMode::Average => {
                let out = kernels::avg_pool_forward(self.value(input), &dims);
                self.push(shape, out, rg, Op::AvgPool { input, dims })
            }
        })
    }

    pub fn batchnorm(&mut self, input: Var, scale: Var, shift: Var, mode: BnMode<'_, S>) -> Result<Var> {
        const OP: &str = "batchnorm2d";
        let dims = self.shape(input).bctn(OP)?;
        let c = dims[1];
        for (p, name) in [(scale, "scale"), (shift, "shift")] {
            if self.shape(p).numel() != c {
                return Err(Error::dim(OP, name, c, self.shape(p).numel()));
            }
        }
        let rg = self.rg(&[input, scale, shift]);
        let shape = self.shape(input).clone();
        let eps = S::of(BN_EPS);
        match mode {
            BnMode::Train { stat } => {
                let count = dims[0] * dims[2] * dims[3];
                if count < 2 {
                    return Err(Error::DegenerateBatch { op: OP, count });
                }
                let (out, saved, var) =
                    kernels::batchnorm_train_forward(self.value(input), dims, self.value(scale), self.value(shift), eps);
                if let Some(stat) = stat {
                    let unbias = S::of(count as f64 / (count - 1) as f64);
                    self.stat_updates.push(StatUpdate {
                        stat,
                        mean: saved.mean.clone(),
                        var: var.iter().map(|&v| v * unbias).collect(),
                    });
                }
                Ok(self.push(
                    shape,
                    out,
                    rg,
                    Op::BatchNormTrain {
                        input,
                        scale,
                        shift,
                        saved,
                    },
                ))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim(OP, "running stats", c, mean.len().min(var.len())));
                }
                let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
                let plane = dims[2] * dims[3];
                let (x, g, s) = (self.value(input), self.value(scale), self.value(shift));
                let mut out = vec![S::zero(); x.len()];
                for (i, (o, &v)) in out.iter_mut().zip(x).enumerate() {
                    let ch = (i / plane) % c;
                    *o = g[ch] * (v - mean[ch]) * inv_std[ch] + s[ch];
                }
                Ok(self.push(
                    shape,
                    out,
                    rg,
                    Op::BatchNormEval {
                        input,
                        scale,
                        shift,
                        mean: mean.to_vec(),
                        inv_std,
                    },
                ))
            }
        }
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
        let (shape, rg) = (self.shape(input).clone(), self.rg(&[input]));
        self.push(shape, out, rg, Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = self.value(input).iter().map(|&v| S::one() / (S::one() + (-v).exp())).collect();
        let (shape, rg) = (self.shape(input).clone(), self.rg(&[input]));
        self.push(shape, out, rg, Op::Sigmoid(input))
    }

    /// Affine map `x W^T + b` for x of shape (B, F), W of shape (G, F).
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "linear";
        let (b, f) = match self.shape(input).dims() {
            &[b, f] => (b, f),
            d => return Err(Error::dim(OP, "input rank", 2, d.len())),
        };
        let (g, wf) = match self.shape(weight).dims() {
            &[g, wf] => (g, wf),
            d => return Err(Error::dim(OP, "weight rank", 2, d.len())),
        };
        if wf != f {
            return Err(Error::dim(OP, "features", wf, f));
        }
        if self.shape(bias).numel() != g {
            return Err(Error::dim(OP, "bias", g, self.shape(bias).numel()));
        }
        let (x, w, bv) = (self.value(input), self.value(weight), self.value(bias));
        let mut out = Vec::with_capacity(b * g);
        for row in x.chunks_exact(f) {
            for (wrow, &bias) in w.chunks_exact(f).zip(bv) {
                out.push(row.iter().zip(wrow).map(|(&a, &c)| a * c).sum::<S>() + bias);
            }
        }
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(Shape::from_dims(&[b, g]), out, rg, Op::Linear { input, weight, bias }))
    }

    /// Mean over (frames, joints): (B, C, T, N) -> (B, C).
    pub fn global_avg(&mut self, input: Var) -> Result<Var> {
        let [b, c, t, n] = self.shape(input).bctn("global_avg")?;
        let plane = t * n;
        let inv = S::of(1.0 / plane as f64);
        let out = self.value(input).chunks_exact(plane).map(|p| p.iter().copied().sum::<S>() * inv).collect();
        let rg = self.rg(&[input]);
        Ok(self.push(Shape::from_dims(&[b, c]), out, rg, Op::GlobalAvg(input)))
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        const OP: &str = "channel_concat";
        let first = *inputs.first().ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let [b, _, t, n] = self.shape(first).bctn(OP)?;
        let mut total_c = 0;
        for &v in inputs {
            let [vb, vc, vt, vn] = self.shape(v).bctn(OP)?;
            for (axis, want, got) in [("batch", b, vb), ("frames", t, vt), ("joints", n, vn)] {
                if want != got {
                    return Err(Error::dim(OP, axis, want, got));
                }
            }
            total_c += vc;
        }
        let plane = t * n;
        let mut out = Vec::with_capacity(b * total_c * plane);
        for bi in 0..b {
            for &v in inputs {
                let c = self.shape(v).dim(1);
                out.extend_from_slice(&self.value(v)[bi * c * plane..(bi + 1) * c * plane]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(Shape::from_dims(&[b, total_c, t, n]), out, rg, Op::Concat(inputs.to_vec())))
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::Usage("add of zero tensors".into()))?;
        let shape = self.shape(first).clone();
        let mut out = self.value(first).to_vec();
        for &v in &inputs[1..] {
            self.check_same("add", &shape, v)?;
            for (o, &x) in out.iter_mut().zip(self.value(v)) {
                *o += x;
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(shape, out, rg, Op::Add(inputs.to_vec())))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).clone();
        self.check_same("mul", &shape, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, input: Var, factor: S) -> Var {
        let out = self.value(input).iter().map(|&v| v * factor).collect();
        let (shape, rg) = (self.shape(input).clone(), self.rg(&[input]));
        self.push(shape, out, rg, Op::Scale(input, factor))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).iter().copied().sum::<S>();
        let rg = self.rg(&[input]);
        self.push(Shape::scalar(), vec![s], rg, Op::Sum(input))
    }

    /// Softmax of one row of a rank-2 matrix.
    pub fn softmax_row(&mut self, matrix: Var, row: usize) -> Result<Var> {
        let (rows, cols) = match self.shape(matrix).dims() {
            &[r, c] => (r, c),
            d => return Err(Error::dim("softmax_row", "rank", 2, d.len())),
        };
        if row >= rows {
            return Err(Error::Input(format!("softmax_row: row {row} out of range for {rows} rows")));
        }
        let out = softmax(&self.value(matrix)[row * cols..(row + 1) * cols]);
        let rg = self.rg(&[matrix]);
        Ok(self.push(Shape::from_dims(&[cols]), out, rg, Op::SoftmaxRow { matrix, row }))
    }

    /// `Σ weights[k] · x_k` over the listed (k, x_k) terms; all terms share
    /// one shape.
    pub fn weighted_sum(&mut self, weights: Var, terms: &[(usize, Var)]) -> Result<Var> {
        let &(_, first) = terms.first().ok_or_else(|| Error::Usage("weighted_sum of zero terms".into()))?;
        let shape = self.shape(first).clone();
        let nw = self.shape(weights).numel();
        let mut out = vec![S::zero(); shape.numel()];
        for &(k, v) in terms {
            if k >= nw {
                return Err(Error::Input(format!("weighted_sum: weight index {k} out of range {nw}")));
            }
            self.check_same("mixed_op", &shape, v)?;
            let w = self.value(weights)[k];
            for (o, &x) in out.iter_mut().zip(self.value(v)) {
                *o += w * x;
            }
        }
        let mut deps: Vec<Var> = terms.iter().map(|t| t.1).collect();
        deps.push(weights);
        let rg = self.rg(&deps);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::WeightedSum {
                weights,
                terms: terms.to_vec(),
            },
        ))
    }

    /// Multiplies every (b, c) plane of `input` by `gate[b, c]`.
    pub fn channel_scale(&mut self, input: Var, gate: Var) -> Result<Var> {
        let [b, c, t, n] = self.shape(input).bctn("channel_scale")?;
        if self.shape(gate).dims() != [b, c] {
            return Err(Error::dim("channel_scale", "gate", b * c, self.shape(gate).numel()));
        }
        let plane = t * n;
        let g = self.value(gate);
        let out = self
            .value(input)
            .chunks_exact(plane)
            .zip(g)
            .flat_map(|(p, &gv)| p.iter().map(move |&v| v * gv))
            .collect();
        let (shape, rg) = (self.shape(input).clone(), self.rg(&[input, gate]));
        Ok(self.push(shape, out, rg, Op::ChannelScale { input, gate }))
    }

    /// Shifts content by one cell toward the origin on both spatial axes,
    /// filling the vacated last row and column with zeros.
    pub fn shift_crop(&mut self, input: Var) -> Result<Var> {
        let [_, _, t, n] = self.shape(input).bctn("shift_crop")?;
        let plane = t * n;
        let mut out = vec![S::zero(); self.shape(input).numel()];
        for (o, x) in out.chunks_exact_mut(plane).zip(self.value(input).chunks_exact(plane)) {
            for ti in 0..t.saturating_sub(1) {
                o[ti * n..ti * n + n - 1].copy_from_slice(&x[(ti + 1) * n + 1..(ti + 2) * n]);
            }
        }
        let (shape, rg) = (self.shape(input).clone(), self.rg(&[input]));
        Ok(self.push(shape, out, rg, Op::ShiftCrop(input)))
    }

    /// All-zero output of `shape` that depends on `input` but passes it no
    /// gradient.
    pub fn zero_like(&mut self, input: Var, shape: Shape) -> Var {
        let rg = self.rg(&[input]);
        self.push(shape.clone(), vec![S::zero(); shape.numel()], rg, Op::Zero)
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = match self.shape(logits).dims() {
            &[b, k] => (b, k),
            d => return Err(Error::dim("cross_entropy", "rank", 2, d.len())),
        };
        if labels.len() != b {
            return Err(Error::dim("cross_entropy", "labels", b, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = Vec::with_capacity(b * k);
        let mut loss = S::zero();
        for (row, &label) in self.value(logits).chunks_exact(k).zip(labels) {
            let (arg, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, S::neg_infinity()), |best, (j, v)| if v > best.1 { (j, v) } else { best });
            let rest: S = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != arg)
                .map(|(_, &v)| (v - max).exp())
                .sum();
            let lse = rest.ln_1p();
            loss += lse - (row[label] - max);
            probs.extend(row.iter().map(|&v| (v - max - lse).exp()));
        }
        loss /= S::of(b as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Shape::scalar(),
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Class probabilities saved by a [`Tape::cross_entropy`] node.
    pub fn probabilities(&self, loss: Var) -> Option<&[S]> {
        match &self.node(loss).op {
            Op::CrossEntropy { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn check_same(&self, op: &'static str, shape: &Shape, v: Var) -> Result<()> {
        let other = self.shape(v);
        if other.rank() != shape.rank() {
            return Err(Error::dim(op, "rank", shape.rank(), other.rank()));
        }
        for (axis, (&a, &b)) in shape.dims().iter().zip(other.dims()).enumerate() {
            if a != b {
                return Err(Error::dim(op, format!("{axis}"), a, b));
            }
        }
        Ok(())
    }

    /// Propagates d(root)/d(node) to every reachable leaf that requires a
    /// gradient. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.node(root).shape.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {}",
                self.node(root).shape
            )));
        }
        if !self.node(root).requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![S::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => match &mut self.leaf_grads[i] {
                    Some(acc) => {
                        for (a, &v) in acc.iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(g),
                },
                op => self.propagate(op, &node.value, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op<S>, out: &[S], g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: Vec<S>| accumulate(grads, v, contrib);
        match op {
            Op::Leaf => unreachable!(),
            Op::Conv2d {
                input,
                weight,
                geom,
                dims,
            } => {
                let (gi, gw) = kernels::conv2d_backward(
                    &nodes[input.0].value,
                    &nodes[weight.0].value,
                    g,
                    dims,
                    geom,
                    needs(*input),
                    needs(*weight),
                );
                if let Some(gi) = gi {
                    acc(*input, gi);
                }
                if let Some(gw) = gw {
                    acc(*weight, gw);
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut gi = vec![S::zero(); nodes[input.0].value.len()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    gi[idx as usize] += gv;
                }
                acc(*input, gi);
            }
            Op::AvgPool { input, dims } => acc(*input, kernels::avg_pool_backward(g, dims)),
            Op::BatchNormTrain {
                input,
                scale,
                shift,
                saved,
            } => {
                let dims = nodes[input.0].shape.bctn("batchnorm2d").expect("checked in forward");
                let (gi, gs, gb) =
                    kernels::batchnorm_train_backward(&nodes[input.0].value, dims, &nodes[scale.0].value, saved, g);
                if needs(*input) {
                    acc(*input, gi);
                }
                if needs(*scale) {
                    acc(*scale, gs);
                }
                if needs(*shift) {
                    acc(*shift, gb);
                }
            }
            Op::BatchNormEval {
                input,
                scale,
                shift,
                mean,
                inv_std,
            } => {
                let [_, c, t, n] = nodes[input.0].shape.bctn("batchnorm2d").expect("checked in forward");
                let plane = t * n;
                let x = &nodes[input.0].value;
                let sc = &nodes[scale.0].value;
                let mut gi = vec![S::zero(); x.len()];
                let mut gs = vec![S::zero(); c];
                let mut gb = vec![S::zero(); c];
                for (i, (&gv, &xv)) in g.iter().zip(x).enumerate() {
                    let ch = (i / plane) % c;
                    gi[i] = gv * sc[ch] * inv_std[ch];
                    gs[ch] += gv * (xv - mean[ch]) * inv_std[ch];
                    gb[ch] += gv;
                }
                if needs(*input) {
                    acc(*input, gi);
                }
                if needs(*scale) {
                    acc(*scale, gs);
                }
                if needs(*shift) {
                    acc(*shift, gb);
                }
            }
            Op::Relu(input) => {
                let x = &nodes[input.0].value;
                acc(*input, g.iter().zip(x).map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() }).collect());
            }
            Op::Sigmoid(input) => {
                acc(*input, g.iter().zip(out).map(|(&gv, &y)| gv * y * (S::one() - y)).collect());
            }
            Op::Linear { input, weight, bias } => {
                let x = &nodes[input.0].value;
                let w = &nodes[weight.0].value;
                let gcount = nodes[bias.0].value.len();
                let f = w.len() / gcount;
                if needs(*input) {
                    let mut gi = vec![S::zero(); x.len()];
                    for (gi_row, g_row) in gi.chunks_exact_mut(f).zip(g.chunks_exact(gcount)) {
                        for (&gv, w_row) in g_row.iter().zip(w.chunks_exact(f)) {
                            for (a, &wv) in gi_row.iter_mut().zip(w_row) {
                                *a += gv * wv;
                            }
                        }
                    }
                    acc(*input, gi);
                }
                if needs(*weight) {
                    let mut gw = vec![S::zero(); w.len()];
                    for (x_row, g_row) in x.chunks_exact(f).zip(g.chunks_exact(gcount)) {
                        for (&gv, gw_row) in g_row.iter().zip(gw.chunks_exact_mut(f)) {
                            for (a, &xv) in gw_row.iter_mut().zip(x_row) {
                                *a += gv * xv;
                            }
                        }
                    }
                    acc(*weight, gw);
                }
                if needs(*bias) {
                    let mut gb = vec![S::zero(); gcount];
                    for g_row in g.chunks_exact(gcount) {
                        for (a, &gv) in gb.iter_mut().zip(g_row) {
                            *a += gv;
                        }
                    }
                    acc(*bias, gb);
                }
            }
            Op::GlobalAvg(input) => {
                let n = nodes[input.0].value.len();
                let plane = n / g.len();
                let inv = S::of(1.0 / plane as f64);
                acc(*input, g.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, plane)).collect());
            }
            Op::Concat(inputs) => {
                let [b, total_c, t, n] = nodes[inputs[0].0].shape.bctn("concat").map(|mut d| {
                    d[1] = g.len() / (d[0] * d[2] * d[3]);
                    d
                }).expect("checked in forward");
                let plane = t * n;
                let mut offset = 0;
                for &v in inputs {
                    let c = nodes[v.0].shape.dim(1);
                    if needs(v) {
                        let mut gi = Vec::with_capacity(b * c * plane);
                        for bi in 0..b {
                            let start = (bi * total_c + offset) * plane;
                            gi.extend_from_slice(&g[start..start + c * plane]);
                        }
                        acc(v, gi);
                    }
                    offset += c;
                }
            }
            Op::Add(inputs) => {
                for &v in inputs {
                    if needs(v) {
                        acc(v, g.to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.iter().zip(&nodes[b.0].value).map(|(&gv, &y)| gv * y).collect());
                }
                if needs(*b) {
                    acc(*b, g.iter().zip(&nodes[a.0].value).map(|(&gv, &x)| gv * x).collect());
                }
            }
            Op::Scale(input, factor) => acc(*input, g.iter().map(|&gv| gv * *factor).collect()),
            Op::Sum(input) => acc(*input, vec![g[0]; nodes[input.0].value.len()]),
            Op::SoftmaxRow { matrix, row } => {
                let cols = out.len();
                let dot: S = g.iter().zip(out).map(|(&gv, &p)| gv * p).sum();
                let mut gm = vec![S::zero(); nodes[matrix.0].value.len()];
                for (j, slot) in gm[row * cols..(row + 1) * cols].iter_mut().enumerate() {
                    *slot = out[j] * (g[j] - dot);
                }
                acc(*matrix, gm);
            }
            Op::WeightedSum { weights, terms } => {
                let w = &nodes[weights.0].value;
                if needs(*weights) {
                    let mut gw = vec![S::zero(); w.len()];
                    for &(k, v) in terms {
                        gw[k] += g.iter().zip(&nodes[v.0].value).map(|(&gv, &x)| gv * x).sum::<S>();
                    }
                    acc(*weights, gw);
                }
                for &(k, v) in terms {
                    if needs(v) {
                        acc(v, g.iter().map(|&gv| gv * w[k]).collect());
                    }
                }
            }
            Op::ChannelScale { input, gate } => {
                let x = &nodes[input.0].value;
                let gate_v = &nodes[gate.0].value;
                let plane = x.len() / gate_v.len();
                if needs(*input) {
                    let gi = g
                        .chunks_exact(plane)
                        .zip(gate_v)
                        .flat_map(|(p, &gv)| p.iter().map(move |&v| v * gv))
                        .collect();
                    acc(*input, gi);
                }
                if needs(*gate) {
                    let gg = g
                        .chunks_exact(plane)
                        .zip(x.chunks_exact(plane))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum::<S>())
                        .collect();
                    acc(*gate, gg);
                }
            }
            Op::ShiftCrop(input) => {
                let [_, _, t, n] = nodes[input.0].shape.bctn("shift_crop").expect("checked in forward");
                let plane = t * n;
                let mut gi = vec![S::zero(); g.len()];
                for (gi_p, g_p) in gi.chunks_exact_mut(plane).zip(g.chunks_exact(plane)) {
                    for ti in 0..t.saturating_sub(1) {
                        gi_p[(ti + 1) * n + 1..(ti + 2) * n].copy_from_slice(&g_p[ti * n..ti * n + n - 1]);
                    }
                }
                acc(*input, gi);
            }
            Op::Zero => {}
            Op::CrossEntropy { logits, labels, probs } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / S::of(labels.len() as f64);
                let mut gl: Vec<S> = probs.iter().map(|&p| p * scale).collect();
                for (row, &label) in labels.iter().enumerate() {
                    gl[row * k + label] -= scale;
                }
                acc(*logits, gl);
            }
        }
    }
}

fn accumulate<S: Real>(grads: &mut [Option<Vec<S>>], v: Var, contrib: Vec<S>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax<S: Real>(row: &[S]) -> Vec<S> {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = row.iter().map(|&v| (v - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}
