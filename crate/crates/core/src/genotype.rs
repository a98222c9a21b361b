//! Discrete architectures distilled from the architecture logits.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{OpKind, NUM_OPS};
use crate::real::Real;
use crate::supernet::{first_edge, node_name, AlphaParams, CellType, NUM_INPUTS, NUM_NODES};

pub const GENOTYPE_MAGIC: &str = "SARNAS-GENO v1";

/// One retained connection: an operator applied to a source state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Connection {
    pub op: OpKind,
    pub src: usize,
}

/// The two connections feeding each intermediate node, strongest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CellGenotype {
    pub nodes: [[Connection; 2]; NUM_NODES],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Genotype {
    pub normal: CellGenotype,
    pub reduce: CellGenotype,
}

impl CellGenotype {
    pub fn validate(&self) -> Result<()> {
        for (k, pair) in self.nodes.iter().enumerate() {
            for c in pair {
                if c.op == OpKind::Zero {
                    return Err(Error::Config(format!("node n{k}: Zero cannot be retained")));
                }
                if c.src >= NUM_INPUTS + k {
                    return Err(Error::Config(format!(
                        "node n{k}: source {} does not precede the node",
                        node_name(c.src)
                    )));
                }
            }
            if pair[0].src == pair[1].src {
                return Err(Error::Config(format!(
                    "node n{k}: both connections read {}",
                    node_name(pair[0].src)
                )));
            }
        }
        Ok(())
    }

    /// All eight connections with their destination node.
    pub fn connections(&self) -> impl Iterator<Item = (usize, Connection)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .flat_map(|(k, pair)| pair.iter().map(move |&c| (k, c)))
    }
}

impl Genotype {
    pub fn validate(&self) -> Result<()> {
        self.normal.validate()?;
        self.reduce.validate()
    }

    pub fn cell(&self, cell: CellType) -> &CellGenotype {
        match cell {
            CellType::Normal => &self.normal,
            CellType::Reduce => &self.reduce,
        }
    }
}

/// Keeps, per node, the two incoming edges whose strongest non-Zero
/// operator weighs most, with that operator. Ties go to the lower edge
/// index, then the lower operator index.
pub fn derive_cell<S: Real>(weights: &[S]) -> CellGenotype {
    let zero = OpKind::Zero.index();
    let mut nodes = [[Connection {
        op: OpKind::Conv3,
        src: 0,
    }; 2]; NUM_NODES];
    for (k, slot) in nodes.iter_mut().enumerate() {
        let first = first_edge(k);
        let mut scored: Vec<(usize, usize, S)> = (0..NUM_INPUTS + k)
            .map(|src| {
                let row = &weights[(first + src) * NUM_OPS..(first + src + 1) * NUM_OPS];
                let (op, w) = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != zero)
                    .fold((usize::MAX, S::neg_infinity()), |best, (j, &w)| if w > best.1 { (j, w) } else { best });
                (src, op, w)
            })
            .collect();
        scored.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
        for (c, &(src, op, _)) in slot.iter_mut().zip(&scored) {
            *c = Connection {
                op: OpKind::from_index(op).expect("operator index in range"),
                src,
            };
        }
    }
    CellGenotype { nodes }
}

pub fn derive_genotype<S: Real>(alpha: &AlphaParams<S>) -> Genotype {
    Genotype {
        normal: derive_cell(&alpha.weights(CellType::Normal)),
        reduce: derive_cell(&alpha.weights(CellType::Reduce)),
    }
}

/// A uniformly random valid genotype: two distinct sources per node and a
/// non-Zero operator on each.
pub fn random_genotype(seed: u64) -> Genotype {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = |rng: &mut ChaCha8Rng| {
        let mut nodes = [[Connection {
            op: OpKind::Conv3,
            src: 0,
        }; 2]; NUM_NODES];
        for (k, pair) in nodes.iter_mut().enumerate() {
            let srcs = sample(rng, NUM_INPUTS + k, 2);
            for (c, src) in pair.iter_mut().zip(srcs.iter()) {
                *c = Connection {
                    op: OpKind::from_index(rng.gen_range(0..NUM_OPS - 1)).expect("non-Zero operator"),
                    src,
                };
            }
        }
        CellGenotype { nodes }
    };
    let normal = cell(&mut rng);
    let reduce = cell(&mut rng);
    Genotype { normal, reduce }
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{GENOTYPE_MAGIC}")?;
        for cell in [CellType::Normal, CellType::Reduce] {
            for (k, pair) in self.cell(cell).nodes.iter().enumerate() {
                writeln!(
                    f,
                    "{} n{k}: {}<-{}, {}<-{}",
                    cell.name(),
                    pair[0].op,
                    node_name(pair[0].src),
                    pair[1].op,
                    node_name(pair[1].src)
                )?;
            }
        }
        Ok(())
    }
}

pub fn serialize_genotype(g: &Genotype) -> String {
    g.to_string()
}

fn parse_src(s: &str) -> Option<usize> {
    match s {
        "input0" => Some(0),
        "input1" => Some(1),
        _ => s
            .strip_prefix('n')
            .and_then(|k| k.parse::<usize>().ok())
            .filter(|&k| k < NUM_NODES)
            .map(|k| k + NUM_INPUTS),
    }
}

pub fn parse_genotype(text: &str) -> Result<Genotype> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, l)) if l.trim() == GENOTYPE_MAGIC => {}
        Some((i, l)) => {
            return Err(Error::ParseLine {
                line: i + 1,
                message: format!("expected header '{GENOTYPE_MAGIC}', found '{}'", l.trim()),
            })
        }
        None => {
            return Err(Error::ParseLine {
                line: 1,
                message: "empty genotype file".into(),
            })
        }
    }
    let mut slots: [[Option<[Connection; 2]>; NUM_NODES]; 2] = [[None; NUM_NODES]; 2];
    let mut last_line = 1;
    for (i, line) in lines {
        let line_no = i + 1;
        last_line = line_no;
        let err = |message: String| Error::ParseLine { line: line_no, message };
        let (head, body) = line
            .split_once(':')
            .ok_or_else(|| err("expected '<normal|reduce> n<k>: <Op><-<src>, <Op><-<src>'".into()))?;
        let mut head_parts = head.split_whitespace();
        let cell = match head_parts.next() {
            Some("normal") => 0,
            Some("reduce") => 1,
            other => return Err(err(format!("unknown cell type '{}'", other.unwrap_or("")))),
        };
        let node = head_parts
            .next()
            .and_then(parse_src)
            .filter(|&s| s >= NUM_INPUTS)
            .map(|s| s - NUM_INPUTS)
            .ok_or_else(|| err(format!("bad node in '{}'", head.trim())))?;
        if head_parts.next().is_some() {
            return Err(err(format!("unexpected text in '{}'", head.trim())));
        }
        let parts: Vec<&str> = body.split(',').map(str::trim).collect();
        if parts.len() != 2 {
            return Err(err(format!("node n{node} needs exactly 2 connections, found {}", parts.len())));
        }
        let mut pair = [Connection {
            op: OpKind::Conv3,
            src: 0,
        }; 2];
        for (c, part) in pair.iter_mut().zip(&parts) {
            let (op, src) = part
                .split_once("<-")
                .ok_or_else(|| err(format!("expected '<Op><-<src>', found '{part}'")))?;
            let op: OpKind = op.trim().parse().map_err(|_| err(format!("unknown operator '{}'", op.trim())))?;
            if op == OpKind::Zero {
                return Err(err("Zero cannot be a retained operator".into()));
            }
            let src = parse_src(src.trim()).ok_or_else(|| err(format!("unknown source '{}'", src.trim())))?;
            if src >= NUM_INPUTS + node {
                return Err(err(format!("source {} does not precede n{node}", node_name(src))));
            }
            *c = Connection { op, src };
        }
        if pair[0].src == pair[1].src {
            return Err(err(format!("duplicate source {}", node_name(pair[0].src))));
        }
        if slots[cell][node].replace(pair).is_some() {
            return Err(err(format!("node n{node} listed twice")));
        }
    }
    let mut cells = [CellGenotype {
        nodes: [[Connection {
            op: OpKind::Conv3,
            src: 0,
        }; 2]; NUM_NODES],
    }; 2];
    for (c, cell) in cells.iter_mut().enumerate() {
        for (k, slot) in slots[c].iter().enumerate() {
            cell.nodes[k] = slot.ok_or_else(|| Error::ParseLine {
                line: last_line,
                message: format!("missing {} n{k}", ["normal", "reduce"][c]),
            })?;
        }
    }
    Ok(Genotype {
        normal: cells[0],
        reduce: cells[1],
    })
}

/// Graphviz rendering of one discrete cell: only retained connections.
pub fn genotype_dot(g: &Genotype, cell: CellType) -> String {
    let mut out = format!("digraph {} {{\n  rankdir=LR;\n", cell.name());
    for i in 0..NUM_INPUTS + NUM_NODES {
        out.push_str(&format!("  {};\n", node_name(i)));
    }
    out.push_str("  out;\n");
    for (k, c) in g.cell(cell).connections() {
        out.push_str(&format!(
            "  {} -> {} [label=\"{}\"];\n",
            node_name(c.src),
            node_name(k + NUM_INPUTS),
            c.op
        ));
    }
    for k in 0..NUM_NODES {
        out.push_str(&format!("  {} -> out [style=dashed];\n", node_name(k + NUM_INPUTS)));
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supernet::NUM_EDGES;

    #[test]
    fn uniform_alpha_gives_tie_break_genotype() {
        let g = derive_genotype(&AlphaParams::<f32>::init(0, 0.0).unwrap());
        for cell in [g.normal, g.reduce] {
            for pair in cell.nodes {
                assert_eq!(pair, [Connection { op: OpKind::Conv3, src: 0 }, Connection { op: OpKind::Conv3, src: 1 }]);
            }
        }
    }

    #[test]
    fn spiked_node() {
        let mut normal = vec![0.0f64; NUM_EDGES * NUM_OPS];
        // edge 1 (input1 -> n0) strongest with SpeConv3, edge 0 second with MaxPool3
        normal[NUM_OPS + OpKind::SpeConv3.index()] = 5.0;
        normal[OpKind::MaxPool3.index()] = 3.0;
        normal[OpKind::Zero.index()] = 10.0;
        let a = AlphaParams::from_matrices(normal, vec![0.0; NUM_EDGES * NUM_OPS]).unwrap();
        let g = derive_genotype(&a);
        assert_eq!(
            g.normal.nodes[0],
            [Connection { op: OpKind::SpeConv3, src: 1 }, Connection { op: OpKind::MaxPool3, src: 0 }]
        );
    }

    #[test]
    fn round_trip_text() {
        for seed in 0..20 {
            let g = random_genotype(seed);
            g.validate().unwrap();
            let text = serialize_genotype(&g);
            assert_eq!(parse_genotype(&text).unwrap(), g);
            assert_eq!(serialize_genotype(&parse_genotype(&text).unwrap()), text);
        }
    }

    #[test]
    fn grammar_instance() {
        let mut text = String::from("SARNAS-GENO v1\n");
        for cell in ["normal", "reduce"] {
            text.push_str(&format!("{cell} n0: Conv3<-input0, SpeConv3<-input1\n"));
            for k in 1..4 {
                text.push_str(&format!("{cell} n{k}: AvgPool3<-n{}, SeConnect<-input0\n", k - 1));
            }
        }
        let g = parse_genotype(&text).unwrap();
        assert_eq!(
            g.normal.nodes[0],
            [Connection { op: OpKind::Conv3, src: 0 }, Connection { op: OpKind::SpeConv3, src: 1 }]
        );
        assert_eq!(g.reduce.nodes[3][0], Connection { op: OpKind::AvgPool3, src: 4 });
    }

    fn with_line(line: &str) -> String {
        let base = serialize_genotype(&random_genotype(1));
        let mut lines: Vec<String> = base.lines().map(str::to_string).collect();
        lines[1] = line.to_string();
        lines.join("\n")
    }

    #[test]
    fn rejects_bad_lines() {
        let cases = [
            "normal n0: Zero<-input0, Conv3<-input1",
            "normal n0: Conv7<-input0, Conv3<-input1",
            "normal n0: Conv3<-n0, Conv3<-input1",
            "normal n0: Conv3<-input1, Conv3<-input1",
            "normal n0: Conv3<-input0",
            "normal n9: Conv3<-input0, Conv3<-input1",
        ];
        for case in cases {
            match parse_genotype(&with_line(case)) {
                Err(Error::ParseLine { line, .. }) => assert_eq!(line, 2, "{case}"),
                other => panic!("{case}: {other:?}"),
            }
        }
        assert!(parse_genotype("SARNAS-GENO v2\n").is_err());
    }

    #[test]
    fn dot_has_eight_operator_edges() {
        let dot = genotype_dot(&random_genotype(3), CellType::Reduce);
        assert_eq!(dot.matches("label=").count(), 8);
        assert!(dot.starts_with("digraph reduce {"));
    }
}
