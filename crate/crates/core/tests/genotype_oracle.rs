use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sarnas_core::genotype::{
    derive_genotype, genotype_dot, parse_genotype, random_genotype, serialize_genotype, CellGenotype, Connection, Genotype,
};
use sarnas_core::supernet::{AlphaParams, CellType};
use sarnas_core::OpKind;

const OPS: usize = 8;
const ZERO: usize = 7;

fn softmax_rows(m: &[f64]) -> Vec<f64> {
    m.chunks(OPS)
        .flat_map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |v| v / s)
        })
        .collect()
}

/// Exhaustive search over every (edge, op, edge, op) choice per node for
/// the pair with the largest total weight; entries are then ordered by
/// weight.
fn brute_force(logits: &[f64]) -> CellGenotype {
    let w = softmax_rows(logits);
    let mut nodes = Vec::new();
    let mut first = 0;
    for node in 0..4 {
        let inputs = node + 2;
        let mut best: Option<(f64, [(usize, usize, f64); 2])> = None;
        for e1 in 0..inputs {
            for e2 in 0..inputs {
                if e1 == e2 {
                    continue;
                }
                for o1 in (0..OPS).filter(|&o| o != ZERO) {
                    for o2 in (0..OPS).filter(|&o| o != ZERO) {
                        let a = w[(first + e1) * OPS + o1];
                        let b = w[(first + e2) * OPS + o2];
                        if a < b {
                            continue;
                        }
                        let total = a + b;
                        if best.as_ref().is_none_or(|(t, _)| total > *t) {
                            best = Some((total, [(e1, o1, a), (e2, o2, b)]));
                        }
                    }
                }
            }
        }
        let (_, pair) = best.unwrap();
        nodes.push(pair.map(|(src, op, _)| Connection {
            op: OpKind::from_index(op).unwrap(),
            src,
        }));
        first += inputs;
    }
    CellGenotype {
        nodes: nodes.try_into().unwrap(),
    }
}

fn random_alpha(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = [0.01, 0.3, 1.0, 5.0][seed as usize % 4];
    let mut draw = || (0..14 * OPS).map(|_| rng.gen_range(-scale..scale)).collect::<Vec<f64>>();
    (draw(), draw())
}

#[test]
fn derive_matches_brute_force_on_1000_alphas() {
    for seed in 0..1000 {
        let (n, r) = random_alpha(seed);
        let alpha = AlphaParams::from_matrices(n.clone(), r.clone()).unwrap();
        let g = derive_genotype(&alpha);
        assert_eq!(g.normal, brute_force(&n), "seed {seed} normal");
        assert_eq!(g.reduce, brute_force(&r), "seed {seed} reduce");
    }
}

#[test]
fn derivation_is_invariant_to_row_shifts() {
    let (n, r) = random_alpha(17);
    let base = derive_genotype(&AlphaParams::from_matrices(n.clone(), r.clone()).unwrap());
    let shifted: Vec<f64> = n.iter().enumerate().map(|(i, v)| v + (i / OPS) as f64 * 3.0).collect();
    assert_eq!(derive_genotype(&AlphaParams::from_matrices(shifted, r).unwrap()), base);
}

#[test]
fn zero_is_never_chosen_even_when_dominant() {
    let mut n = vec![0.0; 14 * OPS];
    for row in n.chunks_mut(OPS) {
        row[ZERO] = 10.0;
    }
    let g = derive_genotype(&AlphaParams::from_matrices(n, vec![0.0; 14 * OPS]).unwrap());
    assert!(g.normal.connections().all(|(_, c)| c.op != OpKind::Zero));
}

#[test]
fn serialize_parse_identity_on_derived_genotypes() {
    for seed in 0..200 {
        let (n, r) = random_alpha(seed);
        let g = derive_genotype(&AlphaParams::from_matrices(n, r).unwrap());
        let text = serialize_genotype(&g);
        assert_eq!(parse_genotype(&text).unwrap(), g);
        assert_eq!(serialize_genotype(&parse_genotype(&text).unwrap()), text);
    }
}

fn dot_edges(dot: &str) -> usize {
    dot.lines().filter(|l| l.contains("->") && l.contains("label=")).count()
}

proptest! {
    #[test]
    fn random_genotypes_round_trip(seed in any::<u64>()) {
        let g: Genotype = random_genotype(seed);
        g.validate().unwrap();
        prop_assert_eq!(parse_genotype(&serialize_genotype(&g)).unwrap(), g);
        for cell in [CellType::Normal, CellType::Reduce] {
            let dot = genotype_dot(&g, cell);
            prop_assert_eq!(dot_edges(&dot), 8);
            prop_assert_eq!(&dot, &genotype_dot(&g, cell));
        }
    }

    #[test]
    fn derived_sources_are_distinct_and_earlier(values in proptest::collection::vec(-4.0f64..4.0, 14 * OPS)) {
        let alpha = AlphaParams::from_matrices(values.clone(), values).unwrap();
        let g = derive_genotype(&alpha);
        for (node, pair) in g.normal.nodes.iter().enumerate() {
            prop_assert!(pair[0].src != pair[1].src);
            prop_assert!(pair.iter().all(|c| c.src < node + 2 && c.op != OpKind::Zero));
        }
    }
}
