//! The trainable network assembled from a genotype.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::genotype::{CellGenotype, Genotype};
use crate::ops::{op_param_count_with, Builder, Linear, OpInstance, OpKind, ReluConvBn, Session};
use crate::params::{Group, ParamStore};
use crate::real::Real;
use crate::supernet::{
    cell_edges, edge_stride, ensure_finite, plan_cells, CellPlan, CellType, NetConfig, Preprocess, NUM_INPUTS,
    NUM_NODES,
};
use crate::tape::Var;

/// A cell realizing only its genotype's eight connections; each node sums
/// its two operator outputs.
#[derive(Clone, Debug)]
pub struct DiscreteCell {
    pub cell_type: CellType,
    pub channels: usize,
    pub pre0: Preprocess,
    pub pre1: Preprocess,
    pub nodes: Vec<[(usize, OpInstance); 2]>,
}

impl DiscreteCell {
    pub fn build<S: Real, R: Rng>(
        b: &mut Builder<'_, S, R>,
        name: &str,
        plan: &CellPlan,
        genotype: &CellGenotype,
        config: &NetConfig,
    ) -> Result<Self> {
        let c = plan.channels;
        let pre0 = Preprocess::build(b, &format!("{name}.pre0"), plan.c_prev_prev, c, plan.reduction_prev)?;
        let pre1 = Preprocess::build(b, &format!("{name}.pre1"), plan.c_prev, c, false)?;
        let mut nodes = Vec::with_capacity(NUM_NODES);
        for (k, pair) in genotype.nodes.iter().enumerate() {
            let mut build = |slot: usize| -> Result<(usize, OpInstance)> {
                let conn = pair[slot];
                let stride = edge_stride(plan.cell_type, conn.src);
                let op = OpInstance::build(b, &format!("{name}.n{k}.{slot}.{}", conn.op), conn.op, c, stride, &config.options)?;
                Ok((conn.src, op))
            };
            nodes.push([build(0)?, build(1)?]);
        }
        Ok(DiscreteCell {
            cell_type: plan.cell_type,
            channels: c,
            pre0,
            pre1,
            nodes,
        })
    }

    pub fn forward<S: Real>(&self, s: &mut Session<'_, S>, prev_prev: Var, prev: Var) -> Result<Var> {
        let s0 = self.pre0.forward(s, prev_prev)?;
        let s1 = self.pre1.forward(s, prev)?;
        let mut states = vec![s0, s1];
        for pair in &self.nodes {
            let a = pair[0].1.forward(s, states[pair[0].0])?;
            let b = pair[1].1.forward(s, states[pair[1].0])?;
            states.push(s.tape.add(&[a, b])?);
        }
        s.tape.concat(&states[NUM_INPUTS..])
    }
}

#[derive(Clone, Debug)]
pub struct DiscreteNet {
    pub config: NetConfig,
    pub genotype: Genotype,
    pub stem: ReluConvBn,
    pub cells: Vec<DiscreteCell>,
    pub classifier: Linear,
}

impl DiscreteNet {
    pub fn build<S: Real>(genotype: &Genotype, config: NetConfig, seed: u64) -> Result<(Self, ParamStore<S>)> {
        genotype.validate()?;
        let plans = plan_cells(&config)?;
        let mut store = ParamStore::new(Group::Weights);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let stem = ReluConvBn::build(&mut b, "stem", false, config.in_channels, config.c_init, 3, 1, 1);
        let cells = plans
            .iter()
            .enumerate()
            .map(|(i, p)| DiscreteCell::build(&mut b, &format!("cells.{i}"), p, genotype.cell(p.cell_type), &config))
            .collect::<Result<Vec<_>>>()?;
        let c_out = NUM_NODES * plans.last().expect("at least 3 cells").channels;
        let classifier = Linear::build(&mut b, "classifier", c_out, config.classes);
        Ok((
            DiscreteNet {
                config,
                genotype: *genotype,
                stem,
                cells,
                classifier,
            },
            store,
        ))
    }

    /// Logits of shape (B, classes) for a (B, 3, T, N) input.
    pub fn forward<S: Real>(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let [_, c, _, _] = s.tape.shape(x).bctn("network")?;
        if c != self.config.in_channels {
            return Err(Error::dim("network", "input channels", self.config.in_channels, c));
        }
        let stem = self.stem.forward(s, x)?;
        ensure_finite(s, stem, || "stem".into())?;
        let (mut prev_prev, mut prev) = (stem, stem);
        for (i, cell) in self.cells.iter().enumerate() {
            let out = cell.forward(s, prev_prev, prev)?;
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

fn bn(c: usize) -> usize {
    2 * c
}

fn preprocess_count(cin: usize, cout: usize, reduce: bool) -> usize {
    if reduce {
        2 * (cout / 2) * cin + bn(cout)
    } else {
        cin * cout + bn(cout)
    }
}

fn scaffold_count(config: &NetConfig, plans: &[CellPlan]) -> usize {
    let stem = config.in_channels * config.c_init * 9 + bn(config.c_init);
    let pre: usize = plans
        .iter()
        .map(|p| preprocess_count(p.c_prev_prev, p.channels, p.reduction_prev) + preprocess_count(p.c_prev, p.channels, false))
        .sum();
    let c_out = NUM_NODES * plans.last().map_or(0, |p| p.channels);
    stem + pre + c_out * config.classes + config.classes
}

/// Closed-form trainable element count of a discrete network.
pub fn discrete_param_count(genotype: &Genotype, config: &NetConfig) -> Result<usize> {
    genotype.validate()?;
    let plans = plan_cells(config)?;
    let cells: usize = plans
        .iter()
        .map(|p| {
            genotype
                .cell(p.cell_type)
                .connections()
                .map(|(_, c)| op_param_count_with(c.op, p.channels, edge_stride(p.cell_type, c.src), &config.options))
                .sum::<usize>()
        })
        .sum();
    Ok(scaffold_count(config, &plans) + cells)
}

/// Closed-form trainable element count of the relaxed network.
pub fn supernet_param_count(config: &NetConfig) -> Result<usize> {
    let plans = plan_cells(config)?;
    let cells: usize = plans
        .iter()
        .map(|p| {
            cell_edges()
                .iter()
                .map(|e| {
                    OpKind::ALL
                        .iter()
                        .map(|&k| op_param_count_with(k, p.channels, edge_stride(p.cell_type, e.src), &config.options))
                        .sum::<usize>()
                })
                .sum::<usize>()
        })
        .sum();
    Ok(scaffold_count(config, &plans) + cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genotype::random_genotype;
    use crate::supernet::SuperNet;
    use crate::Shape;

    #[test]
    fn counts_match_allocation() {
        for seed in 0..4 {
            let g = random_genotype(seed);
            let config = NetConfig::new(4, 8, 3);
            let (_, store) = DiscreteNet::build::<f32>(&g, config, 0).unwrap();
            assert_eq!(store.element_count(), discrete_param_count(&g, &config).unwrap());
        }
        let config = NetConfig::new(4, 8, 3);
        let (_, store) = SuperNet::build::<f32>(config, 0).unwrap();
        assert_eq!(store.element_count(), supernet_param_count(&config).unwrap());
    }

    #[test]
    fn desk_forward_shape() {
        let g = random_genotype(5);
        let (net, store) = DiscreteNet::build::<f32>(&g, NetConfig::new(4, 8, 3), 1).unwrap();
        let mut s = Session::new(&store, true);
        let x = s
            .tape
            .constant((0..2 * 3 * 16 * 12).map(|v| (v as f32 * 0.37).sin()).collect(), Shape::new([2, 3, 16, 12]).unwrap())
            .unwrap();
        let logits = net.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.shape(logits).dims(), &[2, 3]);
    }

    #[test]
    fn reduce_cells_halve() {
        let g = random_genotype(2);
        let (net, store) = DiscreteNet::build::<f32>(&g, NetConfig::new(3, 4, 2), 1).unwrap();
        assert_eq!(
            net.cells.iter().map(|c| c.cell_type).collect::<Vec<_>>(),
            vec![CellType::Reduce, CellType::Reduce, CellType::Normal]
        );
        let mut s = Session::new(&store, true);
        let x = s.tape.constant(vec![0.5; 3 * 8 * 6], Shape::new([1, 3, 8, 6]).unwrap()).unwrap();
        let stem = net.stem.forward(&mut s, x).unwrap();
        let c0 = net.cells[0].forward(&mut s, stem, stem).unwrap();
        assert_eq!(s.tape.shape(c0).dims(), &[1, 32, 4, 3]);
    }
}
