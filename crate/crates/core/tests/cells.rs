use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sarnas_core::ops::Builder;
use sarnas_core::supernet::{
    cell_edges, cell_types, AlphaParams, CellType, NetConfig, SearchCell, SuperNet, NUM_EDGES,
};
use sarnas_core::{Group, OpOptions, ParamStore, Session, Shape};

fn cell(cell_type: CellType, reduction_prev: bool) -> (SearchCell, ParamStore<f32>) {
    let mut store = ParamStore::new(Group::Weights);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = SearchCell::build(
        &mut Builder::new(&mut store, &mut rng),
        "cell",
        cell_type,
        reduction_prev,
        6,
        6,
        4,
        &OpOptions::default(),
    )
    .unwrap();
    (c, store)
}

fn run(cell: &SearchCell, store: &ParamStore<f32>, pp: [usize; 4], p: [usize; 4]) -> Vec<usize> {
    let alpha = AlphaParams::<f32>::init(0, 1e-3).unwrap();
    let mut s = Session::new(store, true);
    let a = s.tape.constant(vec![0.25; pp.iter().product()], Shape::new(pp).unwrap()).unwrap();
    let b = s.tape.constant(vec![-0.5; p.iter().product()], Shape::new(p).unwrap()).unwrap();
    let (normal, reduce) = alpha.bind(&mut s);
    let arch = if cell.cell_type == CellType::Normal { normal } else { reduce };
    let out = cell.forward(&mut s, a, b, arch).unwrap();
    s.tape.shape(out).dims().to_vec()
}

#[test]
fn fourteen_edges_over_four_nodes() {
    assert_eq!(cell_edges().len(), NUM_EDGES);
    let (c, _) = cell(CellType::Normal, false);
    assert_eq!(c.edges.len(), 14);
    assert!(c.edges.iter().all(|ops| ops.len() == 8));
    let mut per_node = [0; 4];
    for e in cell_edges() {
        per_node[e.node] += 1;
    }
    assert_eq!(per_node, [2, 3, 4, 5]);
}

#[test]
fn normal_cells_preserve_and_reduction_cells_halve() {
    let (c, store) = cell(CellType::Normal, false);
    assert_eq!(run(&c, &store, [2, 6, 6, 5], [2, 6, 6, 5]), vec![2, 16, 6, 5]);
    let (c, store) = cell(CellType::Normal, true);
    assert_eq!(run(&c, &store, [2, 6, 6, 6], [2, 6, 3, 3]), vec![2, 16, 3, 3]);
    let (c, store) = cell(CellType::Reduce, false);
    assert_eq!(run(&c, &store, [2, 6, 6, 4], [2, 6, 6, 4]), vec![2, 16, 3, 2]);
    assert_eq!(run(&c, &store, [2, 6, 5, 3], [2, 6, 5, 3]), vec![2, 16, 3, 2]);
}

#[test]
fn six_cell_supernet_on_the_full_input_shape() {
    let k = 60;
    let config = NetConfig::new(6, 16, k);
    assert_eq!(cell_types(6).unwrap().iter().filter(|&&t| t == CellType::Reduce).count(), 2);
    let (net, weights) = SuperNet::build::<f32>(config, 0).unwrap();
    let alpha = AlphaParams::<f32>::init(0, 1e-3).unwrap();
    let mut s = Session::new(&weights, false);
    s.weight_grads = false;
    let n = 2 * 3 * 112 * 50;
    let x = s
        .tape
        .constant((0..n).map(|i| ((i % 97) as f32 / 97.0) - 0.5).collect(), Shape::new([2, 3, 112, 50]).unwrap())
        .unwrap();
    let logits = net.forward_arch_with(&mut s, alpha.store(), x, false).unwrap();
    assert_eq!(s.tape.shape(logits).dims(), &[2, k]);
    assert!(s.tape.value(logits).iter().all(|v| v.is_finite()));
}
