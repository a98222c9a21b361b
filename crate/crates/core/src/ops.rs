//! The eight candidate operators and the blocks they are assembled from.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{ConvGeom, PoolMode};
use crate::params::{ParamId, ParamStore, StatId};
use crate::real::Real;
use crate::shape::Shape;
use crate::tape::{BnMode, Tape, Var};

/// Candidate operators, in the fixed order that indexes architecture
/// parameter columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Conv3,
    SpeConv3,
    DilConv3,
    MaxPool3,
    AvgPool3,
    SkipConnect,
    SeConnect,
    Zero,
}

pub const NUM_OPS: usize = 8;

impl OpKind {
    pub const ALL: [OpKind; NUM_OPS] = [
        OpKind::Conv3,
        OpKind::SpeConv3,
        OpKind::DilConv3,
        OpKind::MaxPool3,
        OpKind::AvgPool3,
        OpKind::SkipConnect,
        OpKind::SeConnect,
        OpKind::Zero,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<OpKind> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv3 => "Conv3",
            OpKind::SpeConv3 => "SpeConv3",
            OpKind::DilConv3 => "DilConv3",
            OpKind::MaxPool3 => "MaxPool3",
            OpKind::AvgPool3 => "AvgPool3",
            OpKind::SkipConnect => "SkipConnect",
            OpKind::SeConnect => "SeConnect",
            OpKind::Zero => "Zero",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown operator '{s}'"))
    }
}

/// Construction knobs for the operators whose structure is a free choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpOptions {
    /// Number of stacked ReLU-depthwise-pointwise-BN blocks in `DilConv3`.
    pub dil_conv_repeats: usize,
    /// Bottleneck ratio of the squeeze-and-excitation gate.
    pub se_ratio: usize,
}

impl Default for OpOptions {
    fn default() -> Self {
        OpOptions {
            dil_conv_repeats: 1,
            se_ratio: 4,
        }
    }
}

impl OpOptions {
    pub fn se_hidden(&self, channels: usize) -> usize {
        (channels / self.se_ratio.max(1)).max(1)
    }
}

/// Forward-pass context: the tape being recorded, the weights it reads and
/// whether batch norms use batch statistics.
pub struct Session<'a, S> {
    pub tape: Tape<S>,
    pub weights: &'a ParamStore<S>,
    pub train: bool,
    /// Whether weight gradients are wanted.
    pub weight_grads: bool,
}

impl<'a, S: Real> Session<'a, S> {
    pub fn new(weights: &'a ParamStore<S>, train: bool) -> Self {
        Session {
            tape: Tape::new(),
            weights,
            train,
            weight_grads: true,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.weights.bind_with(&mut self.tape, id, self.weight_grads)
    }
}

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, S, R> {
    pub store: &'a mut ParamStore<S>,
    pub rng: &'a mut R,
}

impl<'a, S: Real, R: Rng> Builder<'a, S, R> {
    pub fn new(store: &'a mut ParamStore<S>, rng: &'a mut R) -> Self {
        Builder { store, rng }
    }

    fn conv_weight(&mut self, name: &str, cout: usize, cin_g: usize, k: usize) -> ParamId {
        self.store.add_uniform(name, &[cout, cin_g, k, k], cin_g * k * k, self.rng)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub stats: StatId,
}

impl BatchNorm {
    pub fn build<S: Real, R: Rng>(b: &mut Builder<'_, S, R>, name: &str, channels: usize) -> Self {
        BatchNorm {
            scale: b.store.add_filled(format!("{name}.scale"), &[channels], 1.0),
            shift: b.store.add_filled(format!("{name}.shift"), &[channels], 0.0),
            stats: b.store.add_stats(name, channels),
        }
    }

    pub fn forward<S: Real>(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let scale = s.param(self.scale);
        let shift = s.param(self.shift);
        if s.train {
            s.tape.batchnorm(x, scale, shift, BnMode::Train { stat: Some(self.stats.0) })
        } else {
            let st = s.weights.stats(self.stats);
            s.tape.batchnorm(
                x,
                scale,
                shift,
                BnMode::Eval {
                    mean: &st.mean,
                    var: &st.var,
                },
            )
        }
    }
}

/// Optional ReLU, a convolution, then batch norm.
#[derive(Clone, Debug)]
pub struct ReluConvBn {
    pub relu: bool,
    pub weight: ParamId,
    pub geom: ConvGeom,
    pub bn: BatchNorm,
}

impl ReluConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn build<S: Real, R: Rng>(
        b: &mut Builder<'_, S, R>,
        name: &str,
        relu: bool,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        ReluConvBn {
            relu,
            weight: b.conv_weight(&format!("{name}.conv.weight"), cout, cin, kernel),
            geom: ConvGeom::new(stride, padding, 1, 1),
            bn: BatchNorm::build(b, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward<S: Real>(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let h = if self.relu { s.tape.relu(x) } else { x };
        let w = s.param(self.weight);
        let h = s.tape.conv2d(h, w, self.geom)?;
        self.bn.forward(s, h)
    }
}

/// ReLU, 3x3 depthwise convolution, 1x1 pointwise convolution, batch norm.
#[derive(Clone, Debug)]
pub struct SepBlock {
    pub depthwise: ParamId,
    pub pointwise: ParamId,
    pub dw_geom: ConvGeom,
    pub bn: BatchNorm,
}

impl SepBlock {
    pub fn build<S: Real, R: Rng>(b: &mut Builder<'_, S, R>, name: &str, c: usize, stride: usize, dilation: usize) -> Self {
        SepBlock {
            depthwise: b.conv_weight(&format!("{name}.depthwise"), c, 1, 3),
            pointwise: b.conv_weight(&format!("{name}.pointwise"), c, c, 1),
            dw_geom: ConvGeom::new(stride, dilation, dilation, c),
            bn: BatchNorm::build(b, &format!("{name}.bn"), c),
        }
    }

    pub fn forward<S: Real>(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let h = s.tape.relu(x);
        let dw = s.param(self.depthwise);
        let h = s.tape.conv2d(h, dw, self.dw_geom)?;
        let pw = s.param(self.pointwise);
        let h = s.tape.conv2d(h, pw, ConvGeom::new(1, 0, 1, 1))?;
        self.bn.forward(s, h)
    }
}

/// Stride-2 channel-preserving downsampling: two 1x1 stride-2 convolutions,
/// the second on the input shifted by one cell, concatenated on channels.
#[derive(Clone, Debug)]
pub struct FactorizedReduce {
    pub conv_a: ParamId,
    pub conv_b: ParamId,
    pub bn: BatchNorm,
}

impl FactorizedReduce {
    pub fn build<S: Real, R: Rng>(b: &mut Builder<'_, S, R>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        if !cout.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "{name}: factorized reduce needs an even channel count, got {cout}"
            )));
        }
        Ok(FactorizedReduce {
            conv_a: b.conv_weight(&format!("{name}.conv_a"), cout / 2, cin, 1),
            conv_b: b.conv_weight(&format!("{name}.conv_b"), cout / 2, cin, 1),
            bn: BatchNorm::build(b, &format!("{name}.bn"), cout),
        })
    }

    pub fn forward<S: Real>(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let h = s.tape.relu(x);
        let geom = ConvGeom::new(2, 0, 1, 1);
        let wa = s.param(self.conv_a);
        let a = s.tape.conv2d(h, wa, geom)?;
        let shifted = s.tape.shift_crop(h)?;
        let wb = s.param(self.conv_b);
        let b = s.tape.conv2d(shifted, wb, geom)?;
        let cat = s.tape.concat(&[a, b])?;
        self.bn.forward(s, cat)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn build<S: Real, R: Rng>(b: &mut Builder<'_, S, R>, name: &str, fin: usize, fout: usize) -> Self {
        Linear {
            weight: b.store.add_uniform(format!("{name}.weight"), &[fout, fin], fin, b.rng),
            bias: b.store.add_uniform(format!("{name}.bias"), &[fout], fin, b.rng),
        }
    }

    pub fn forward<S: Real>(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.tape.linear(x, w, b)
    }
}

/// Channel attention: global average, bottleneck, sigmoid gate, rescale.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub squeeze: Linear,
    pub excite: Linear,
}

impl SqueezeExcite {
    pub fn build<S: Real, R: Rng>(b: &mut Builder<'_, S, R>, name: &str, c: usize, hidden: usize) -> Self {
        SqueezeExcite {
            squeeze: Linear::build(b, &format!("{name}.squeeze"), c, hidden),
            excite: Linear::build(b, &format!("{name}.excite"), hidden, c),
        }
    }

    pub fn forward<S: Real>(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let pooled = s.tape.global_avg(x)?;
        let h = self.squeeze.forward(s, pooled)?;
        let h = s.tape.relu(h);
        let h = self.excite.forward(s, h)?;
        let gate = s.tape.sigmoid(h);
        s.tape.channel_scale(x, gate)
    }
}

#[derive(Clone, Debug)]
enum Body {
    Conv(ReluConvBn),
    Sep(Vec<SepBlock>),
    Pool(PoolMode),
    Identity,
    Reduce(FactorizedReduce),
    Se {
        reduce: Option<FactorizedReduce>,
        se: SqueezeExcite,
    },
    Zero,
}

/// One instantiated candidate operator on a `channels -> channels` edge.
#[derive(Clone, Debug)]
pub struct OpInstance {
    pub kind: OpKind,
    pub stride: usize,
    pub channels: usize,
    params: Vec<ParamId>,
    body: Body,
}

impl OpInstance {
    pub fn build<S: Real, R: Rng>(
        b: &mut Builder<'_, S, R>,
        name: &str,
        kind: OpKind,
        channels: usize,
        stride: usize,
        options: &OpOptions,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config(format!("{name}: operator needs at least one channel")));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::Config(format!("{name}: stride {stride} not in {{1,2}}")));
        }
        let c = channels;
        let first = b.store.len();
        let body = match kind {
            OpKind::Conv3 => Body::Conv(ReluConvBn::build(b, name, true, c, c, 3, stride, 1)),
            OpKind::SpeConv3 => Body::Sep(vec![
                SepBlock::build(b, &format!("{name}.0"), c, stride, 1),
                SepBlock::build(b, &format!("{name}.1"), c, 1, 1),
            ]),
            OpKind::DilConv3 => Body::Sep(
                (0..options.dil_conv_repeats.max(1))
                    .map(|i| SepBlock::build(b, &format!("{name}.{i}"), c, if i == 0 { stride } else { 1 }, 2))
                    .collect(),
            ),
            OpKind::MaxPool3 => Body::Pool(PoolMode::Max),
            OpKind::AvgPool3 => Body::Pool(PoolMode::Average),
            OpKind::SkipConnect if stride == 1 => Body::Identity,
            OpKind::SkipConnect => Body::Reduce(FactorizedReduce::build(b, &format!("{name}.reduce"), c, c)?),
            OpKind::SeConnect => {
                let reduce = if stride == 2 {
                    Some(FactorizedReduce::build(b, &format!("{name}.reduce"), c, c)?)
                } else {
                    None
                };
                Body::Se {
                    reduce,
                    se: SqueezeExcite::build(b, &format!("{name}.se"), c, options.se_hidden(c)),
                }
            }
            OpKind::Zero => Body::Zero,
        };
        Ok(OpInstance {
            kind,
            stride,
            channels,
            params: (first..b.store.len()).map(ParamId).collect(),
            body,
        })
    }

    /// Parameters owned by this operator, in registration order.
    pub fn param_ids(&self) -> &[ParamId] {
        &self.params
    }

    pub fn forward<S: Real>(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let [_, c, _, _] = s.tape.shape(x).bctn(self.kind.name())?;
        if c != self.channels {
            return Err(Error::dim(self.kind.name(), "channels", self.channels, c));
        }
        match &self.body {
            Body::Conv(block) => block.forward(s, x),
            Body::Sep(blocks) => blocks.iter().try_fold(x, |h, blk| blk.forward(s, h)),
            Body::Pool(mode) => s.tape.pool2d(x, *mode, 3, self.stride, 1),
            Body::Identity => Ok(x),
            Body::Reduce(fr) => fr.forward(s, x),
            Body::Se { reduce, se } => {
                let h = match reduce {
                    Some(fr) => fr.forward(s, x)?,
                    None => x,
                };
                se.forward(s, h)
            }
            Body::Zero => {
                let [b, c, t, n] = s.tape.shape(x).bctn("Zero")?;
                let shape = if self.stride == 1 {
                    Shape::from_dims(&[b, c, t, n])
                } else {
                    Shape::from_dims(&[b, c, t.div_ceil(2), n.div_ceil(2)])
                };
                Ok(s.tape.zero_like(x, shape))
            }
        }
    }
}

/// Closed-form trainable element count of an operator.
pub fn op_param_count(kind: OpKind, channels: usize, stride: usize) -> usize {
    op_param_count_with(kind, channels, stride, &OpOptions::default())
}

pub fn op_param_count_with(kind: OpKind, c: usize, stride: usize, options: &OpOptions) -> usize {
    let bn = 2 * c;
    let sep = 9 * c + c * c + bn;
    let reduce = 2 * (c / 2) * c + bn;
    match kind {
        OpKind::Conv3 => 9 * c * c + bn,
        OpKind::SpeConv3 => 2 * sep,
        OpKind::DilConv3 => options.dil_conv_repeats.max(1) * sep,
        OpKind::MaxPool3 | OpKind::AvgPool3 | OpKind::Zero => 0,
        OpKind::SkipConnect => {
            if stride == 1 {
                0
            } else {
                reduce
            }
        }
        OpKind::SeConnect => {
            let h = options.se_hidden(c);
            let se = c * h + h + h * c + c;
            if stride == 1 {
                se
            } else {
                se + reduce
            }
        }
    }
}
