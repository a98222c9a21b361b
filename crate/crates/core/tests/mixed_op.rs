use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sarnas_core::ops::{Builder, OpInstance, NUM_OPS};
use sarnas_core::supernet::{mixed_op_forward, NUM_EDGES};
use sarnas_core::{Group, OpKind, OpOptions, ParamStore, Session, Shape};

struct Edge {
    store: ParamStore<f32>,
    ops: Vec<OpInstance>,
    x: Vec<f32>,
}

fn edge(stride: usize, seed: u64) -> Edge {
    let mut store = ParamStore::new(Group::Weights);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ops = {
        let mut b = Builder::new(&mut store, &mut rng);
        OpKind::ALL
            .iter()
            .map(|&k| OpInstance::build(&mut b, &format!("{k}"), k, 4, stride, &OpOptions::default()).unwrap())
            .collect()
    };
    let x = (0..2 * 4 * 6 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Edge { store, ops, x }
}

/// Mixed output for `alpha` and each operator's own output, all on one tape.
fn outputs(e: &Edge, alpha: Vec<f32>, row: usize) -> (Vec<f32>, Vec<Vec<f32>>) {
    let mut s = Session::new(&e.store, true);
    let x = s.tape.constant(e.x.clone(), Shape::new([2, 4, 6, 6]).unwrap()).unwrap();
    let a = s.tape.constant(alpha, Shape::new([NUM_EDGES, NUM_OPS]).unwrap()).unwrap();
    let mixed = mixed_op_forward(&mut s, x, a, row, &e.ops).unwrap();
    let single = e
        .ops
        .iter()
        .map(|op| {
            let y = op.forward(&mut s, x).unwrap();
            s.tape.value(y).to_vec()
        })
        .collect();
    (s.tape.value(mixed).to_vec(), single)
}

fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

#[test]
fn spike_selects_that_operator() {
    for stride in [1, 2] {
        let e = edge(stride, 3 + stride as u64);
        let row = 6;
        for k in 0..NUM_OPS {
            let mut alpha = vec![0.0f32; NUM_EDGES * NUM_OPS];
            alpha[row * NUM_OPS + k] = 40.0;
            let (mixed, single) = outputs(&e, alpha, row);
            let want: Vec<f64> = single[k].iter().map(|&v| v as f64).collect();
            let err = max_abs_diff(&mixed, &want);
            assert!(err <= 1e-5, "stride {stride} op {k}: {err}");
        }
    }
}

#[test]
fn uniform_alpha_is_the_mean() {
    for stride in [1, 2] {
        let e = edge(stride, 11);
        let (mixed, single) = outputs(&e, vec![0.0; NUM_EDGES * NUM_OPS], 0);
        let mean: Vec<f64> = (0..mixed.len())
            .map(|i| single.iter().map(|o| o[i] as f64).sum::<f64>() / NUM_OPS as f64)
            .collect();
        let err = max_abs_diff(&mixed, &mean);
        assert!(err <= 1e-6, "stride {stride}: {err}");
    }
}

#[test]
fn other_rows_do_not_leak_in() {
    let e = edge(1, 5);
    let mut alpha = vec![0.0f32; NUM_EDGES * NUM_OPS];
    alpha[2 * NUM_OPS] = 40.0;
    let (mixed, _) = outputs(&e, alpha.clone(), 3);
    let (uniform, _) = outputs(&e, vec![0.0; NUM_EDGES * NUM_OPS], 3);
    assert_eq!(mixed, uniform);
}
