//! The relaxed search network: every cell edge carries all eight candidate
//! operators mixed by a softmax over architecture parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::{Builder, FactorizedReduce, Linear, OpInstance, OpKind, OpOptions, ReluConvBn, Session, NUM_OPS};
use crate::params::{Group, ParamId, ParamStore};
use crate::real::Real;
use crate::tape::{softmax, Var};

pub const NUM_INPUTS: usize = 2;
pub const NUM_NODES: usize = 4;
pub const NUM_EDGES: usize = 14;

/// One directed connection inside a cell. Sources index the canonical
/// order `input0, input1, n0, n1, n2, n3`; `node` indexes the four
/// intermediate nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub src: usize,
    pub node: usize,
}

impl Edge {
    /// Canonical position of the destination node.
    pub fn dst(&self) -> usize {
        NUM_INPUTS + self.node
    }
}

/// All edges of a cell, grouped by destination node in increasing order.
pub fn cell_edges() -> Vec<Edge> {
    (0..NUM_NODES)
        .flat_map(|node| (0..NUM_INPUTS + node).map(move |src| Edge { src, node }))
        .collect()
}

/// Index of the first edge entering intermediate node `node`.
pub fn first_edge(node: usize) -> usize {
    (0..node).map(|j| NUM_INPUTS + j).sum()
}

pub fn node_name(index: usize) -> String {
    if index < NUM_INPUTS {
        format!("input{index}")
    } else {
        format!("n{}", index - NUM_INPUTS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellType {
    Normal,
    Reduce,
}

impl CellType {
    pub fn name(self) -> &'static str {
        match self {
            CellType::Normal => "normal",
            CellType::Reduce => "reduce",
        }
    }
}

/// Zero-based positions of the two reduction cells in an `layers`-cell
/// stack: the cells at one-based depths floor(L/3) and floor(2L/3).
pub fn reduction_positions(layers: usize) -> Result<[usize; 2]> {
    if layers < 3 {
        return Err(Error::Config(format!("need at least 3 cells, got {layers}")));
    }
    Ok([layers / 3 - 1, 2 * layers / 3 - 1])
}

pub fn cell_types(layers: usize) -> Result<Vec<CellType>> {
    let red = reduction_positions(layers)?;
    Ok((0..layers)
        .map(|i| if red.contains(&i) { CellType::Reduce } else { CellType::Normal })
        .collect())
}

/// Continuous architecture parameters: one 14x8 logit matrix per cell type,
/// shared by every cell of that type.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaParams<S> {
    store: ParamStore<S>,
}

impl<S: Real> AlphaParams<S> {
    const NORMAL: ParamId = ParamId(0);
    const REDUCE: ParamId = ParamId(1);

    /// Entries drawn from N(0, noise_scale^2); scale 0 gives exactly
    /// uniform mixtures.
    pub fn init(seed: u64, noise_scale: f64) -> Result<Self> {
        if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
            return Err(Error::Config(format!("alpha noise scale must be >= 0, got {noise_scale}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<S> {
            if noise_scale == 0.0 {
                return vec![S::zero(); n];
            }
            let normal = Normal::new(0.0, noise_scale).expect("valid std");
            (0..n).map(|_| S::of(normal.sample(&mut rng))).collect()
        };
        let normal = draw(NUM_EDGES * NUM_OPS);
        let reduce = draw(NUM_EDGES * NUM_OPS);
        Self::from_matrices(normal, reduce)
    }

    pub fn from_matrices(normal: Vec<S>, reduce: Vec<S>) -> Result<Self> {
        for (m, name) in [(&normal, "alpha_normal"), (&reduce, "alpha_reduce")] {
            if m.len() != NUM_EDGES * NUM_OPS {
                return Err(Error::dim("alpha", name, NUM_EDGES * NUM_OPS, m.len()));
            }
        }
        let mut store = ParamStore::new(Group::Arch);
        store.add("alpha_normal", &[NUM_EDGES, NUM_OPS], normal);
        store.add("alpha_reduce", &[NUM_EDGES, NUM_OPS], reduce);
        Ok(AlphaParams { store })
    }

    pub fn from_store(store: ParamStore<S>) -> Result<Self> {
        let ok = store.group() == Group::Arch
            && store.len() == 2
            && store.params().iter().all(|p| p.shape.dims() == [NUM_EDGES, NUM_OPS]);
        if !ok {
            return Err(Error::Config("architecture store must hold two 14x8 matrices".into()));
        }
        Ok(AlphaParams { store })
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore<S> {
        self.store
    }

    pub fn matrix(&self, cell: CellType) -> &[S] {
        match cell {
            CellType::Normal => &self.store.get(Self::NORMAL).value,
            CellType::Reduce => &self.store.get(Self::REDUCE).value,
        }
    }

    pub fn matrix_mut(&mut self, cell: CellType) -> &mut [S] {
        match cell {
            CellType::Normal => &mut self.store.get_mut(Self::NORMAL).value,
            CellType::Reduce => &mut self.store.get_mut(Self::REDUCE).value,
        }
    }

    /// Softmax weights of every edge, row-major 14x8.
    pub fn weights(&self, cell: CellType) -> Vec<S> {
        self.matrix(cell).chunks_exact(NUM_OPS).flat_map(softmax).collect()
    }

    /// Mean Shannon entropy (nats) of the per-edge operator distributions.
    pub fn mean_edge_entropy(&self, cell: CellType) -> f64 {
        let w = self.weights(cell);
        let total: f64 = w
            .chunks_exact(NUM_OPS)
            .map(|row| {
                row.iter()
                    .map(|p| p.as_f64())
                    .filter(|&p| p > 0.0)
                    .map(|p| -p * p.ln())
                    .sum::<f64>()
            })
            .sum();
        total / NUM_EDGES as f64
    }

    pub fn bind(&self, s: &mut Session<'_, S>) -> (Var, Var) {
        (
            self.store.bind(&mut s.tape, Self::NORMAL),
            self.store.bind(&mut s.tape, Self::REDUCE),
        )
    }
}

/// Softmax-weighted sum of every candidate operator's output on one edge.
pub fn mixed_op_forward<S: Real>(
    s: &mut Session<'_, S>,
    x: Var,
    alpha: Var,
    row: usize,
    ops: &[OpInstance],
) -> Result<Var> {
    let weights = s.tape.softmax_row(alpha, row)?;
    if s.tape.shape(weights).numel() != ops.len() {
        return Err(Error::dim("mixed_op", "operators", s.tape.shape(weights).numel(), ops.len()));
    }
    let mut terms = Vec::with_capacity(ops.len());
    for (k, op) in ops.iter().enumerate() {
        if op.kind == OpKind::Zero {
            continue;
        }
        terms.push((k, op.forward(s, x)?));
    }
    s.tape.weighted_sum(weights, &terms)
}

/// Input preprocessing of a cell.
#[derive(Clone, Debug)]
pub enum Preprocess {
    Conv(ReluConvBn),
    Reduce(FactorizedReduce),
}

impl Preprocess {
    pub fn build<S: Real, R: Rng>(
        b: &mut Builder<'_, S, R>,
        name: &str,
        cin: usize,
        cout: usize,
        reduce: bool,
    ) -> Result<Self> {
        Ok(if reduce {
            Preprocess::Reduce(FactorizedReduce::build(b, name, cin, cout)?)
        } else {
            Preprocess::Conv(ReluConvBn::build(b, name, true, cin, cout, 1, 1, 0))
        })
    }

    pub fn forward<S: Real>(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        match self {
            Preprocess::Conv(c) => c.forward(s, x),
            Preprocess::Reduce(r) => r.forward(s, x),
        }
    }
}

/// A search cell: two preprocessed inputs, 14 mixed edges, four
/// intermediate nodes concatenated into the output.
#[derive(Clone, Debug)]
pub struct SearchCell {
    pub cell_type: CellType,
    pub channels: usize,
    pub pre0: Preprocess,
    pub pre1: Preprocess,
    /// The eight operator instances of every edge, in edge order.
    pub edges: Vec<Vec<OpInstance>>,
}

impl SearchCell {
    #[allow(clippy::too_many_arguments)]
    pub fn build<S: Real, R: Rng>(
        b: &mut Builder<'_, S, R>,
        name: &str,
        cell_type: CellType,
        reduction_prev: bool,
        c_prev_prev: usize,
        c_prev: usize,
        channels: usize,
        options: &OpOptions,
    ) -> Result<Self> {
        let pre0 = Preprocess::build(b, &format!("{name}.pre0"), c_prev_prev, channels, reduction_prev)?;
        let pre1 = Preprocess::build(b, &format!("{name}.pre1"), c_prev, channels, false)?;
        let mut edges = Vec::with_capacity(NUM_EDGES);
        for (e, edge) in cell_edges().iter().enumerate() {
            let stride = edge_stride(cell_type, edge.src);
            let ops = OpKind::ALL
                .iter()
                .map(|&kind| OpInstance::build(b, &format!("{name}.edge{e}.{kind}"), kind, channels, stride, options))
                .collect::<Result<Vec<_>>>()?;
            edges.push(ops);
        }
        Ok(SearchCell {
            cell_type,
            channels,
            pre0,
            pre1,
            edges,
        })
    }

    pub fn forward<S: Real>(&self, s: &mut Session<'_, S>, prev_prev: Var, prev: Var, alpha: Var) -> Result<Var> {
        let s0 = self.pre0.forward(s, prev_prev)?;
        let s1 = self.pre1.forward(s, prev)?;
        for (v, name) in [(s0, "input0"), (s1, "input1")] {
            let c = s.tape.shape(v).dim(1);
            if c != self.channels {
                return Err(Error::dim("cell", format!("{name} channels"), self.channels, c));
            }
        }
        let mut states = vec![s0, s1];
        let edges = cell_edges();
        for node in 0..NUM_NODES {
            let mut inputs = Vec::with_capacity(NUM_INPUTS + node);
            for e in first_edge(node)..first_edge(node) + NUM_INPUTS + node {
                let src = states[edges[e].src];
                inputs.push(mixed_op_forward(s, src, alpha, e, &self.edges[e])?);
            }
            states.push(s.tape.add(&inputs)?);
        }
        s.tape.concat(&states[NUM_INPUTS..])
    }
}

/// Stride of an edge: reduction cells downsample on input-adjacent edges.
pub fn edge_stride(cell_type: CellType, src: usize) -> usize {
    if cell_type == CellType::Reduce && src < NUM_INPUTS {
        2
    } else {
        1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub layers: usize,
    pub c_init: usize,
    pub classes: usize,
    pub in_channels: usize,
    pub options: OpOptions,
}

impl NetConfig {
    pub fn new(layers: usize, c_init: usize, classes: usize) -> Self {
        NetConfig {
            layers,
            c_init,
            classes,
            in_channels: 3,
            options: OpOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        reduction_positions(self.layers)?;
        if self.c_init == 0 || !self.c_init.is_multiple_of(2) {
            return Err(Error::Config(format!("initial channels must be even and positive, got {}", self.c_init)));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        Ok(())
    }
}

/// Channel bookkeeping shared by the search and discrete networks.
#[derive(Clone, Copy, Debug)]
pub struct CellPlan {
    pub cell_type: CellType,
    pub reduction_prev: bool,
    pub c_prev_prev: usize,
    pub c_prev: usize,
    pub channels: usize,
}

pub fn plan_cells(config: &NetConfig) -> Result<Vec<CellPlan>> {
    config.validate()?;
    let types = cell_types(config.layers)?;
    let (mut c_pp, mut c_p, mut c) = (config.c_init, config.c_init, config.c_init);
    let mut reduction_prev = false;
    let mut plans = Vec::with_capacity(types.len());
    for cell_type in types {
        if cell_type == CellType::Reduce {
            c *= 2;
        }
        plans.push(CellPlan {
            cell_type,
            reduction_prev,
            c_prev_prev: c_pp,
            c_prev: c_p,
            channels: c,
        });
        reduction_prev = cell_type == CellType::Reduce;
        c_pp = c_p;
        c_p = NUM_NODES * c;
    }
    Ok(plans)
}

/// Check that every activation of `v` is finite.
pub(crate) fn ensure_finite<S: Real>(s: &Session<'_, S>, v: Var, location: impl FnOnce() -> String) -> Result<()> {
    if s.tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { location: location() })
    }
}

#[derive(Clone, Debug)]
pub struct SuperNet {
    pub config: NetConfig,
    pub stem: ReluConvBn,
    pub cells: Vec<SearchCell>,
    pub classifier: Linear,
}

impl SuperNet {
    pub fn build<S: Real>(config: NetConfig, seed: u64) -> Result<(Self, ParamStore<S>)> {
        let mut store = ParamStore::new(Group::Weights);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let stem = ReluConvBn::build(&mut b, "stem", false, config.in_channels, config.c_init, 3, 1, 1);
        let mut cells = Vec::new();
        let plans = plan_cells(&config)?;
        for (i, p) in plans.iter().enumerate() {
            cells.push(SearchCell::build(
                &mut b,
                &format!("cells.{i}"),
                p.cell_type,
                p.reduction_prev,
                p.c_prev_prev,
                p.c_prev,
                p.channels,
                &config.options,
            )?);
        }
        let c_out = NUM_NODES * plans.last().expect("at least 3 cells").channels;
        let classifier = Linear::build(&mut b, "classifier", c_out, config.classes);
        Ok((
            SuperNet {
                config,
                stem,
                cells,
                classifier,
            },
            store,
        ))
    }

    /// Logits of shape (B, classes) for a (B, 3, T, N) input.
    pub fn forward<S: Real>(&self, s: &mut Session<'_, S>, alpha: &AlphaParams<S>, x: Var) -> Result<Var> {
        self.forward_arch(s, alpha.store(), x)
    }

    /// As [`SuperNet::forward`], reading the architecture logits from a raw
    /// store laid out like [`AlphaParams`].
    pub fn forward_arch<S: Real>(&self, s: &mut Session<'_, S>, arch: &ParamStore<S>, x: Var) -> Result<Var> {
        let [_, c, _, _] = s.tape.shape(x).bctn("supernet")?;
        if c != self.config.in_channels {
            return Err(Error::dim("supernet", "input channels", self.config.in_channels, c));
        }
        self.forward_arch_with(s, arch, x, true)
    }

    /// As [`SuperNet::forward_arch`]; `arch_grads == false` leaves the
    /// architecture logits out of differentiation.
    pub fn forward_arch_with<S: Real>(
        &self,
        s: &mut Session<'_, S>,
        arch: &ParamStore<S>,
        x: Var,
        arch_grads: bool,
    ) -> Result<Var> {
        let a_normal = arch.bind_with(&mut s.tape, AlphaParams::<S>::NORMAL, arch_grads);
        let a_reduce = arch.bind_with(&mut s.tape, AlphaParams::<S>::REDUCE, arch_grads);
        let stem = self.stem.forward(s, x)?;
        ensure_finite(s, stem, || "stem".into())?;
        let (mut prev_prev, mut prev) = (stem, stem);
        for (i, cell) in self.cells.iter().enumerate() {
            let a = match cell.cell_type {
                CellType::Normal => a_normal,
                CellType::Reduce => a_reduce,
            };
            let out = cell.forward(s, prev_prev, prev, a)?;
            ensure_finite(s, out, || format!("cell {i} ({})", cell.cell_type.name()))?;
            prev_prev = prev;
            prev = out;
        }
        let pooled = s.tape.global_avg(prev)?;
        let logits = self.classifier.forward(s, pooled)?;
        ensure_finite(s, logits, || "classifier".into())?;
        Ok(logits)
    }
}

/// Graphviz rendering of one relaxed cell: each of the 14 edges labeled
/// with its strongest operator and that operator's softmax weight.
pub fn relaxed_dot<S: Real>(alpha: &AlphaParams<S>, cell: CellType) -> String {
    let weights = alpha.weights(cell);
    let mut out = format!("digraph {} {{\n  rankdir=LR;\n", cell.name());
    for i in 0..NUM_INPUTS + NUM_NODES {
        out.push_str(&format!("  {};\n", node_name(i)));
    }
    out.push_str("  out;\n");
    for (e, edge) in cell_edges().iter().enumerate() {
        let row = &weights[e * NUM_OPS..(e + 1) * NUM_OPS];
        let (best, w) = row
            .iter()
            .enumerate()
            .fold((0, S::neg_infinity()), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
        out.push_str(&format!(
            "  {} -> {} [label=\"{} {:.3}\"];\n",
            node_name(edge.src),
            node_name(edge.dst()),
            OpKind::ALL[best],
            w.as_f64()
        ));
    }
    for j in 0..NUM_NODES {
        out.push_str(&format!("  {} -> out [style=dashed];\n", node_name(NUM_INPUTS + j)));
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape::Shape;

    #[test]
    fn topology() {
        let edges = cell_edges();
        assert_eq!(edges.len(), NUM_EDGES);
        assert!(edges.iter().all(|e| e.src < e.dst()));
        assert_eq!(first_edge(3), 9);
        assert_eq!(edges[9], Edge { src: 0, node: 3 });
    }

    #[test]
    fn reduction_layout() {
        assert_eq!(reduction_positions(9).unwrap(), [2, 5]);
        assert_eq!(reduction_positions(6).unwrap(), [1, 3]);
        assert_eq!(reduction_positions(4).unwrap(), [0, 1]);
        assert!(reduction_positions(2).is_err());
        let types = cell_types(6).unwrap();
        assert_eq!(types.iter().filter(|&&t| t == CellType::Normal).count(), 4);
    }

    #[test]
    fn alpha_init() {
        let a = AlphaParams::<f64>::init(1, 0.0).unwrap();
        assert!(a.weights(CellType::Normal).iter().all(|&w| w == 0.125));
        let b = AlphaParams::<f32>::init(7, 1e-3).unwrap();
        let c = AlphaParams::<f32>::init(7, 1e-3).unwrap();
        assert_eq!(b, c);
        let dev = b
            .weights(CellType::Reduce)
            .iter()
            .map(|&w| (w as f64 - 0.125).abs())
            .fold(0.0, f64::max);
        assert!(dev < 1e-3, "{dev}");
        assert!(AlphaParams::<f32>::init(0, -1.0).is_err());
    }

    #[test]
    fn cell_shapes() {
        for (cell_type, want) in [(CellType::Normal, [1, 64, 8, 6]), (CellType::Reduce, [1, 64, 4, 3])] {
            let mut store = ParamStore::<f32>::new(Group::Weights);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let cell = SearchCell::build(
                &mut Builder::new(&mut store, &mut rng),
                "c",
                cell_type,
                false,
                16,
                16,
                16,
                &OpOptions::default(),
            )
            .unwrap();
            assert_eq!(cell.edges.len(), NUM_EDGES);
            let alpha = AlphaParams::<f32>::init(0, 1e-3).unwrap();
            let mut s = Session::new(&store, true);
            let (an, ar) = alpha.bind(&mut s);
            let x = s.tape.constant(vec![0.5; 16 * 48], Shape::new(vec![1, 16, 8, 6]).unwrap()).unwrap();
            let a = if cell_type == CellType::Normal { an } else { ar };
            let y = cell.forward(&mut s, x, x, a).unwrap();
            assert_eq!(s.tape.shape(y).dims(), want);
        }
    }

    #[test]
    fn desk_supernet_logits() {
        let (net, store) = SuperNet::build::<f32>(NetConfig::new(4, 8, 3), 1).unwrap();
        let alpha = AlphaParams::init(2, 1e-3).unwrap();
        let mut s = Session::new(&store, true);
        let x = s
            .tape
            .constant((0..2 * 3 * 16 * 12).map(|i| (i as f32 * 0.37).sin()).collect(), Shape::new(vec![2, 3, 16, 12]).unwrap())
            .unwrap();
        let logits = net.forward(&mut s, &alpha, x).unwrap();
        assert_eq!(s.tape.shape(logits).dims(), &[2, 3]);
    }

    #[test]
    fn dot_has_fourteen_labeled_edges() {
        let a = AlphaParams::<f32>::init(3, 1e-3).unwrap();
        let dot = relaxed_dot(&a, CellType::Normal);
        assert_eq!(dot.matches("label=").count(), 14);
        assert_eq!(dot, relaxed_dot(&a, CellType::Normal));
    }
}
