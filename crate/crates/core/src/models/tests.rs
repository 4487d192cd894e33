use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::normlayers::NormState;
use crate::numcore::{gelu, grad_check, AdamConfig};

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("s{i:02}")).collect()
}

fn tiny_config(variant: Variant, kind: NormKind, domains: usize) -> ModelConfig {
    let widths: &[usize] = match variant {
        Variant::ResNet1D8 => &[4, 6, 8],
        Variant::ResNet1D18 => &[4, 6, 8, 8],
    };
    ModelConfig::with_widths(variant, 2, widths, 3, 2, 0.0, kind, 2, domains)
}

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let v = (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn randomize_states(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in model.norm_layers_mut() {
        for s in layer.states_mut() {
            for v in s.running_mean.iter_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
            for v in s.running_var.iter_mut() {
                *v = rng.random_range(0.5..2.0);
            }
            for g in s.gamma.value.data_mut() {
                *g = rng.random_range(0.5..1.5);
            }
            for b in s.beta.value.data_mut() {
                *b = rng.random_range(-0.3..0.3);
            }
        }
    }
}

#[test]
fn variant_block_counts() {
    for kind in NormKind::ALL {
        let m = build_model(&tiny_config(Variant::ResNet1D8, kind, 2), &ids(2), 0).unwrap();
        assert_eq!(m.blocks.len(), 3);
        let m = build_model(&tiny_config(Variant::ResNet1D18, kind, 2), &ids(2), 0).unwrap();
        assert_eq!(m.blocks.len(), 4);
    }
    let mut bad = tiny_config(Variant::ResNet1D8, NormKind::Bn, 1);
    bad.block_configs.pop();
    assert!(matches!(build_model(&bad, &ids(1), 0), Err(Error::Configuration(_))));
    assert!(matches!("resnet1d34".parse::<Variant>(), Err(Error::Configuration(_))));
}

#[test]
fn even_kernel_is_rejected() {
    let cfg = ModelConfig::with_widths(Variant::ResNet1D8, 2, &[4, 4, 4], 4, 2, 0.0, NormKind::Bn, 2, 1);
    assert!(matches!(build_model(&cfg, &ids(1), 0), Err(Error::Configuration(_))));
}

#[test]
fn bank_cardinality() {
    let cfg = ModelConfig::new(Variant::ResNet1D8, 2, 2, NormKind::Dsbn, 10);
    let m = build_model(&cfg, &ids(10), 1).unwrap();
    let layers = m.norm_layers();
    assert_eq!(layers.len(), cfg.norm_layer_count());
    for l in layers {
        assert_eq!(l.bank().unwrap().len(), 10);
    }
}

#[test]
fn construction_is_deterministic() {
    let cfg = tiny_config(Variant::ResNet1D8, NormKind::Dson, 3);
    let a = build_model(&cfg, &ids(3), 42).unwrap();
    let b = build_model(&cfg, &ids(3), 42).unwrap();
    let c = build_model(&cfg, &ids(3), 43).unwrap();
    let bits = |m: &Model| -> Vec<u64> {
        m.params().iter().flat_map(|p| p.value.data().iter().map(|x| x.to_bits())).collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn deeper_variant_has_more_parameters() {
    let widths = [8, 16, 32, 32];
    for kind in NormKind::ALL {
        let small = ModelConfig::with_widths(Variant::ResNet1D8, 2, &widths[..3], 5, 2, 0.1, kind, 2, 2);
        let big = ModelConfig::with_widths(Variant::ResNet1D18, 2, &widths, 5, 2, 0.1, kind, 2, 2);
        let s = build_model(&small, &ids(2), 0).unwrap().num_parameters();
        let b = build_model(&big, &ids(2), 0).unwrap().num_parameters();
        assert!(b > s, "{kind}: {b} <= {s}");
    }
}

fn block(ci: usize, co: usize, stride: usize, kind: NormKind) -> ResidualBlock {
    let cfg = ResidualBlockConfig {
        in_channels: ci,
        out_channels: co,
        kernel_size: 5,
        stride,
        dropout_rate: 0.2,
        norm_kind: kind,
        padding_mode: DEFAULT_PADDING,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    ResidualBlock::new(&mut ParamIds::new(), &mut rng, cfg, &ids(2)).unwrap()
}

#[test]
fn zero_main_path_gives_gelu_of_input() {
    let mut b = block(3, 3, 1, NormKind::Bn);
    assert!(b.skip.is_none());
    b.conv2.weight.value.data_mut().iter_mut().for_each(|w| *w = 0.0);
    b.conv2.bias.value.data_mut().iter_mut().for_each(|w| *w = 0.0);
    let x = random(&[2, 3, 10], 1, 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // Eval mode with default running stats (mean 0, var 1) and beta 0 maps a
    // zero main path to zero.
    let y = b.forward_tensor(&x, None, false, &mut rng).unwrap();
    assert!(y.max_abs_diff(&gelu(&x)) <= 1e-12);
}

#[test]
fn identity_skip_has_no_parameters() {
    let b = block(4, 4, 1, NormKind::Bn);
    let convs = 2 * (4 * 4 * 5 + 4);
    let norms = 2 * (2 * 4);
    assert_eq!(b.num_parameters(), convs + norms);
    let p = block(4, 6, 1, NormKind::Bn);
    assert!(p.skip.is_some());
    assert!(block(4, 4, 2, NormKind::Bn).skip.is_some());
}

#[test]
fn block_output_shape_follows_conv_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (&(ci, co, s), t) in [(2, 4, 1), (2, 4, 2), (4, 4, 3), (3, 5, 2)].iter().zip([9, 16, 17, 30]) {
        for kind in [NormKind::Bn, NormKind::Ibn, NormKind::Dsbn] {
            let b = block(ci, co, s, kind);
            let x = random(&[2, ci, t], t as u64, 1.0);
            let branch = kind.is_domain_specific().then_some(1);
            let y = b.forward_tensor(&x, branch, true, &mut rng).unwrap();
            let expect = (t + 2 * 2 - 5) / s + 1;
            assert_eq!(y.shape(), &[2, co, expect]);
            assert_eq!(b.config.output_len(t), expect);
        }
    }
}

#[test]
fn domain_specific_block_needs_a_branch() {
    let b = block(2, 2, 1, NormKind::Dsbn);
    let x = random(&[2, 2, 8], 0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        b.forward_tensor(&x, None, true, &mut rng),
        Err(Error::Routing(_))
    ));
}

#[test]
fn logits_shape_and_eval_determinism() {
    for kind in NormKind::ALL {
        let m = build_model(&tiny_config(Variant::ResNet1D8, kind, 2), &ids(2), 5).unwrap();
        let x = random(&[3, 2, 20], 2, 1.0);
        let route = if kind.is_domain_specific() { Route::Domain("s01") } else { Route::Shared };
        let a = m.logits(&x, route).unwrap();
        let b = m.logits(&x, route).unwrap();
        assert_eq!(a.shape(), &[3, 2]);
        assert_eq!(a, b);
    }
}

#[test]
fn routing_errors() {
    let m = build_model(&tiny_config(Variant::ResNet1D8, NormKind::Dsin, 2), &ids(2), 5).unwrap();
    let x = random(&[1, 2, 20], 2, 1.0);
    assert!(matches!(m.logits(&x, Route::Shared), Err(Error::Routing(_))));
    assert!(matches!(m.logits(&x, Route::Domain("zz")), Err(Error::Routing(_))));
    assert!(matches!(m.logits(&x, Route::Branch(2)), Err(Error::Routing(_))));
    let bn = build_model(&tiny_config(Variant::ResNet1D8, NormKind::Bn, 0), &[], 5).unwrap();
    assert!(matches!(bn.forward_all_branches(&x), Err(Error::Configuration(_))));
}

#[test]
fn trace_has_one_entry_per_norm_layer() {
    for variant in [Variant::ResNet1D8, Variant::ResNet1D18] {
        let cfg = tiny_config(variant, NormKind::Dsbn, 2);
        let m = build_model(&cfg, &ids(2), 5).unwrap();
        let x = random(&[1, 2, 20], 2, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = m.forward(&x, Route::Branch(0), false, true, &mut rng).unwrap();
        assert_eq!(t.per_layer_instance_stats.len(), cfg.norm_layer_count());
        assert_eq!(t.branches, vec![0; cfg.norm_layer_count()]);
        let xb = random(&[2, 2, 20], 2, 1.0);
        assert!(matches!(
            m.forward(&xb, Route::Branch(0), false, true, &mut rng),
            Err(Error::Contract(_))
        ));
    }
}

#[test]
fn branch_outputs_single_and_symmetric() {
    let x = random(&[1, 2, 20], 8, 1.0);
    let m1 = build_model(&tiny_config(Variant::ResNet1D8, NormKind::Dsbn, 1), &ids(1), 5).unwrap();
    let o = m1.forward_all_branches(&x).unwrap();
    assert_eq!(o.num_branches(), 1);
    assert_eq!(o.logits()[0], m1.logits(&x, Route::Branch(0)).unwrap().into_data());

    for kind in [NormKind::Dsbn, NormKind::Dsin, NormKind::Dson] {
        let m = build_model(&tiny_config(Variant::ResNet1D8, kind, 4), &ids(4), 6).unwrap();
        let o = m.forward_all_branches(&x).unwrap();
        assert_eq!(o.num_branches(), 4);
        for i in 1..4 {
            assert_eq!(o.logits()[i], o.logits()[0]);
        }
        for p in o.probs() {
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn dsbn_branch_with_shared_state_matches_bn_model() {
    let seed = 11;
    let mut bn = build_model(&tiny_config(Variant::ResNet1D8, NormKind::Bn, 3), &ids(3), seed).unwrap();
    randomize_states(&mut bn, 99);
    let mut ds = build_model(&tiny_config(Variant::ResNet1D8, NormKind::Dsbn, 3), &ids(3), seed).unwrap();
    let shared: Vec<NormState> = bn.norm_layers().iter().map(|l| l.states()[0].clone()).collect();
    for (layer, s) in ds.norm_layers_mut().into_iter().zip(&shared) {
        let bank = layer.bank_mut().unwrap();
        for b in bank.branches.iter_mut() {
            let id_g = b.gamma.id;
            let id_b = b.beta.id;
            *b = s.clone();
            b.gamma.id = id_g;
            b.beta.id = id_b;
        }
    }
    let x = random(&[1, 2, 20], 4, 1.5);
    let reference = bn.logits(&x, Route::Shared).unwrap();
    let o = ds.forward_all_branches(&x).unwrap();
    for l in o.logits() {
        for (a, b) in l.iter().zip(reference.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn large_inputs_give_finite_logits() {
    for kind in NormKind::ALL {
        let m = build_model(&tiny_config(Variant::ResNet1D8, kind, 2), &ids(2), 2).unwrap();
        let x = random(&[2, 2, 24], 3, 1e3);
        let route = if kind.is_domain_specific() { Route::Branch(1) } else { Route::Shared };
        assert!(m.logits(&x, route).unwrap().is_finite());
    }
}

#[test]
fn end_to_end_gradient_check() {
    for kind in NormKind::ALL {
        let m = build_model(&tiny_config(Variant::ResNet1D8, kind, 2), &ids(2), 21).unwrap();
        let x = random(&[2, 2, 16], 5, 1.0);
        let labels = [0usize, 1];
        let f = |tape: &mut Tape, xv: Var| -> Result<Var> {
            let choice = if kind.is_domain_specific() {
                BranchChoice::Fixed(1)
            } else {
                BranchChoice::Shared
            };
            let mut pass = Pass {
                choice,
                training: true,
                tracing: false,
                rng: &mut NoRng,
            };
            let (logits, _) = m.forward_tape(tape, xv, &mut pass)?;
            tape.cross_entropy(logits, &labels)
        };
        let err = grad_check(f, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "{kind}: {err}");
    }
}

#[test]
fn train_step_lowers_loss_and_freezes_unused_branches() {
    let cfg = tiny_config(Variant::ResNet1D8, NormKind::Dsbn, 2);
    let mut m = build_model(&cfg, &ids(2), 3).unwrap();
    let x = random(&[4, 2, 16], 6, 1.0);
    let labels = [0, 1, 0, 1];
    let frozen_before: Vec<Vec<f64>> = m
        .norm_layers()
        .iter()
        .map(|l| l.bank().unwrap().branches[1].gamma.value.data().to_vec())
        .collect();
    let mut opt = Adam::new(AdamConfig { lr: 1e-2, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let first = m.train_step(&x, &labels, &["s00"; 4], &mut opt, &mut rng).unwrap();
    let mut last = first;
    for _ in 0..30 {
        last = m.train_step(&x, &labels, &["s00"; 4], &mut opt, &mut rng).unwrap();
    }
    assert!(last < first, "{last} >= {first}");
    for (l, before) in m.norm_layers().iter().zip(&frozen_before) {
        let b = &l.bank().unwrap().branches;
        assert_eq!(b[1].gamma.value.data(), &before[..]);
        assert_eq!(b[1].batches_seen, 0);
        assert_eq!(b[0].batches_seen, 31);
    }
    assert!(matches!(
        m.train_step(&x, &labels, &["s00", "s01", "s00", "s00"], &mut opt, &mut rng),
        Err(Error::Contract(_))
    ));
}
