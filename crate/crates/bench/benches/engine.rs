use criterion::{black_box, criterion_group, criterion_main, Criterion};
use sarnas_bench::desk_batch;
use sarnas_core::bilevel::{Need, SearchModel, SupernetModel};
use sarnas_core::genotype::{derive_genotype, random_genotype};
use sarnas_core::kernels::ConvGeom;
use sarnas_core::network::DiscreteNet;
use sarnas_core::supernet::{AlphaParams, NetConfig, SuperNet};
use sarnas_core::{Session, Shape, Tape};

fn conv(c: &mut Criterion) {
    let x: Vec<f32> = (0..8 * 16 * 16 * 12).map(|i| (i as f32 * 0.01).sin()).collect();
    let w: Vec<f32> = (0..16 * 16 * 9).map(|i| (i as f32 * 0.7).cos() * 0.1).collect();
    c.bench_function("conv2d 3x3 16ch forward+backward", |b| {
        b.iter(|| {
            let mut t = Tape::<f32>::new();
            let xv = t.leaf(x.clone(), Shape::new([8, 16, 16, 12]).unwrap(), true).unwrap();
            let wv = t.leaf(w.clone(), Shape::new([16, 16, 3, 3]).unwrap(), true).unwrap();
            let y = t.conv2d(xv, wv, ConvGeom::new(1, 1, 1, 1)).unwrap();
            let s = t.sum(y);
            t.backward(s).unwrap();
            black_box(t.grad(wv).map(|g| g[0]))
        })
    });
}

fn supernet(c: &mut Criterion) {
    let (net, weights) = SuperNet::build::<f32>(NetConfig::new(4, 8, 3), 1).unwrap();
    let alpha = AlphaParams::<f32>::init(2, 1e-3).unwrap();
    let model = SupernetModel { net: &net };
    let batch = desk_batch(8);
    let mut g = c.benchmark_group("supernet L4 C8 batch8");
    g.sample_size(10);
    g.bench_function("arch gradient", |b| {
        b.iter(|| black_box(model.evaluate(&weights, alpha.store(), &batch, Need::ARCH).unwrap().loss))
    });
    g.bench_function("weight and arch gradient", |b| {
        b.iter(|| black_box(model.evaluate(&weights, alpha.store(), &batch, Need::BOTH).unwrap().loss))
    });
    g.finish();
}

fn discrete(c: &mut Criterion) {
    let (net, weights) = DiscreteNet::build::<f32>(&random_genotype(3), NetConfig::new(4, 8, 3), 1).unwrap();
    let batch = desk_batch(16);
    c.bench_function("discrete L4 C8 batch16 train step", |b| {
        b.iter(|| {
            let mut s = Session::new(&weights, true);
            let x = s.tape.constant(batch.x.clone(), Shape::new(batch.dims).unwrap()).unwrap();
            let logits = net.forward(&mut s, x).unwrap();
            let loss = s.tape.cross_entropy(logits, &batch.labels).unwrap();
            s.tape.backward(loss).unwrap();
            black_box(weights.gradients_from(&s.tape).len())
        })
    });
}

fn genotype(c: &mut Criterion) {
    let alpha = AlphaParams::<f32>::init(9, 1.0).unwrap();
    c.bench_function("derive genotype", |b| b.iter(|| black_box(derive_genotype(&alpha))));
}

criterion_group!(benches, conv, supernet, discrete, genotype);
criterion_main!(benches);
