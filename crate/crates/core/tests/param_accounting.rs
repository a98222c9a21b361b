use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sarnas_core::genotype::random_genotype;
use sarnas_core::network::{discrete_param_count, supernet_param_count, DiscreteNet};
use sarnas_core::ops::{op_param_count, op_param_count_with, Builder, OpInstance};
use sarnas_core::supernet::{NetConfig, SuperNet};
use sarnas_core::{Group, OpKind, OpOptions, ParamStore};

fn allocated(kind: OpKind, c: usize, stride: usize, options: &OpOptions) -> usize {
    let mut store = ParamStore::<f32>::new(Group::Weights);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let op = OpInstance::build(&mut Builder::new(&mut store, &mut rng), "op", kind, c, stride, options).unwrap();
    let owned: usize = op.param_ids().iter().map(|&id| store.get(id).value.len()).sum();
    assert_eq!(owned, store.element_count());
    owned
}

#[test]
fn closed_form_matches_allocation() {
    for kind in OpKind::ALL {
        for c in [8, 16] {
            for stride in [1, 2] {
                assert_eq!(op_param_count(kind, c, stride), allocated(kind, c, stride, &OpOptions::default()), "{kind} C={c} s={stride}");
            }
        }
    }
}

#[test]
fn closed_form_follows_options() {
    for options in [OpOptions { dil_conv_repeats: 2, se_ratio: 4 }, OpOptions { dil_conv_repeats: 1, se_ratio: 2 }] {
        for kind in [OpKind::DilConv3, OpKind::SeConnect] {
            for stride in [1, 2] {
                assert_eq!(op_param_count_with(kind, 16, stride, &options), allocated(kind, 16, stride, &options));
            }
        }
    }
}

#[test]
fn hand_counted_examples() {
    assert_eq!(op_param_count(OpKind::Conv3, 16, 1), 9 * 16 * 16 + 32);
    assert_eq!(op_param_count(OpKind::SpeConv3, 16, 1), 2 * (9 * 16 + 16 * 16 + 32));
    assert_eq!(op_param_count(OpKind::DilConv3, 16, 2), 9 * 16 + 16 * 16 + 32);
    for kind in [OpKind::MaxPool3, OpKind::AvgPool3, OpKind::Zero] {
        assert_eq!(op_param_count(kind, 16, 2), 0);
    }
    assert_eq!(op_param_count(OpKind::SkipConnect, 16, 1), 0);
    assert_eq!(op_param_count(OpKind::SkipConnect, 16, 2), 2 * 8 * 16 + 32);
}

#[test]
fn discrete_below_supernet() {
    for (layers, c) in [(4, 8), (5, 8), (6, 16)] {
        let config = NetConfig::new(layers, c, 3);
        let sup = supernet_param_count(&config).unwrap();
        let (_, store) = SuperNet::build::<f32>(config, 0).unwrap();
        assert_eq!(store.element_count(), sup);
        for seed in 0..5 {
            let g = random_genotype(seed);
            let d = discrete_param_count(&g, &config).unwrap();
            let (_, store) = DiscreteNet::build::<f32>(&g, config, 0).unwrap();
            assert_eq!(store.element_count(), d);
            assert!(d < sup, "L={layers} C={c} seed {seed}: {d} >= {sup}");
        }
    }
}
