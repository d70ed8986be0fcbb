mod common;

use common::{build, random_batch, rng, tiny_config};
use forgeloc::attention::ForgeryAttentionModule;
use forgeloc::layers::{Conv, DilatedModule};
use forgeloc::network::{ModelConfig, NoiseFront};
use forgeloc::train::{gradient_step, model_loss, TrainState};
use forgeloc_autograd::{Graph, ParamStore, Shape, Tensor};
use rand::RngExt;

fn conv(i: usize, o: usize, k: usize) -> usize {
    o * i * k * k + o
}

fn block(i: usize, o: usize, depth: usize) -> usize {
    conv(i, o, 3) + (depth - 1) * conv(o, o, 3)
}

/// Closed-form count of the implemented topology.
fn expected_params(cfg: &ModelConfig) -> usize {
    let n = cfg.nbf;
    let d = cfg.convs_per_block;
    let front = |f: NoiseFront, c: usize| match f {
        NoiseFront::Rgb => c,
        NoiseFront::Hpf => 3,
        NoiseFront::CwHpf => 3 * c,
    };
    let backbone = |f: usize, attention: bool| {
        let enc = block(f, 2 * n, d) + block(2 * n, 4 * n, d) + block(4 * n, 8 * n, d);
        let bridge = 4 * conv(8 * n, 8 * n, 3);
        let dec = block(8 * n, 2 * n, d) + block(6 * n, n, d);
        let c = 8 * n;
        let att = if attention {
            2 * conv(3 * c, c, 1) + 3 * conv(c, c, 1) + conv(c, c, 1) + 2
        } else {
            0
        };
        enc + bridge + dec + att
    };
    let mask_head = conv(3 * n, 1, 7);
    let (coarse, refined_in) = if cfg.coarse_to_fine {
        (
            backbone(front(cfg.coarse_front, 3), false) + mask_head + conv(3 * n, cfg.k, 1),
            front(cfg.refined_front, cfg.k),
        )
    } else {
        (0, front(cfg.refined_front, 3))
    };
    coarse + backbone(refined_in, cfg.attention) + mask_head
}

#[test]
fn parameter_count_matches_closed_form() {
    for cfg in [
        ModelConfig::default(),
        ModelConfig::with_nbf(8),
        tiny_config(16),
        ModelConfig {
            attention: false,
            coarse_to_fine: false,
            refined_front: NoiseFront::Rgb,
            ..tiny_config(16)
        },
        ModelConfig {
            coarse_front: NoiseFront::Hpf,
            refined_front: NoiseFront::Hpf,
            convs_per_block: 2,
            ..ModelConfig::with_nbf(6)
        },
    ] {
        let (model, store) = build(cfg.clone(), 0);
        assert_eq!(model.param_count(), expected_params(&cfg), "{cfg:?}");
        assert_eq!(store.num_elements(), model.param_count());
    }
}

#[test]
fn narrow_model_is_under_a_tenth_of_default() {
    let small = build(ModelConfig::with_nbf(8), 0).0.param_count();
    let full = build(ModelConfig::default(), 0).0.param_count();
    assert!(small * 10 < full, "{small} vs {full}");
}

#[test]
fn coarse_and_refined_shapes() {
    let cfg = ModelConfig::with_nbf(8);
    assert_eq!(cfg.k, 16);
    let (model, store) = build(cfg, 1);
    let (images, _) = random_batch::<f32>(1, 64, 64, 2);
    let mut g = Graph::frozen();
    let x = g.constant(images);
    let out = model.forward(&mut g, &store, x).unwrap();
    let coarse = out.coarse_mask.unwrap();
    assert_eq!(g.shape(coarse), Shape::new(1, 1, 64, 64));
    assert_eq!(g.shape(out.features.unwrap()), Shape::new(1, 16, 64, 64));
    assert_eq!(g.shape(out.refined_mask), Shape::new(1, 1, 64, 64));
    for v in [coarse, out.refined_mask] {
        assert!(g.value(v).data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    let mut g = Graph::frozen();
    let feat = g.constant(Tensor::from_fn(Shape::new(1, 16, 64, 64), |[_, c, y, x]| {
        ((c * 7 + y * 3 + x) % 13) as f32 / 13.0
    }));
    let (refined, _) = model.refined_forward(&mut g, &store, feat).unwrap();
    assert_eq!(g.shape(refined), Shape::new(1, 1, 64, 64));
}

#[test]
fn constant_gray_input_gives_finite_outputs_and_forward_is_deterministic() {
    let (model, store) = build(tiny_config(32), 3);
    let run = || {
        let mut g = Graph::frozen();
        let x = g.constant(Tensor::full(Shape::new(1, 3, 32, 32), 0.5f32));
        let out = model.forward(&mut g, &store, x).unwrap();
        g.value(out.refined_mask).clone()
    };
    let a = run();
    assert!(a.all_finite());
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&run()));
}

#[test]
fn input_size_must_be_divisible_by_four() {
    let (model, store) = build(tiny_config(16), 0);
    let mut g = Graph::frozen();
    let x = g.constant(Tensor::zeros(Shape::new(1, 3, 18, 16)));
    assert!(model.forward(&mut g, &store, x).is_err());
}

#[test]
fn attention_branches_are_identities_at_initialisation() {
    let mut store = ParamStore::new();
    let att = ForgeryAttentionModule::new(&mut store, &mut rng(4), "att", 8);
    let mut r = rng(5);
    let f = Tensor::from_fn(Shape::new(1, 8, 4, 4), |_| r.random_range(-1.0f32..1.0));
    let mut g = Graph::new();
    let x = g.constant(f.clone());
    let trace = att.forward(&mut g, &store, x).unwrap();
    for v in [trace.saf, trace.caf] {
        for (a, b) in g.value(v).data().iter().zip(f.data()) {
            assert!((a - b).abs() <= 1e-7);
        }
    }
    assert_eq!(g.shape(trace.sam), Shape::new(1, 1, 16, 16));
    assert_eq!(g.shape(trace.cam), Shape::new(1, 1, 8, 8));
    for v in [trace.sam, trace.cam] {
        assert!(g.value(v).data().iter().all(|&p| p > 0.0 && p < 1.0));
    }
    assert_eq!(g.shape(trace.faf), f.shape());

    att.set_fuse_to_half_identity(&mut store);
    let mut g = Graph::new();
    let x = g.constant(f.clone());
    let trace = att.forward(&mut g, &store, x).unwrap();
    for (a, b) in g.value(trace.faf).data().iter().zip(f.data()) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn both_attention_scales_receive_gradient() {
    let mut store = ParamStore::new();
    let att = ForgeryAttentionModule::new(&mut store, &mut rng(6), "att", 8);
    let mut r = rng(7);
    let f = Tensor::from_fn(Shape::new(1, 8, 4, 4), |_| r.random_range(-1.0f32..1.0));
    let mut g = Graph::new();
    let x = g.constant(f);
    let trace = att.forward(&mut g, &store, x).unwrap();
    let loss = g.sum(trace.faf);
    let grads = g.backward(loss).unwrap().for_params(&store);
    for id in att.scales() {
        assert!(grads[id.index()].data()[0] != 0.0, "{}", store.get(id).name);
    }
}

#[test]
fn sam_ignores_constant_shift_of_features() {
    let mut store = ParamStore::new();
    let att = ForgeryAttentionModule::new(&mut store, &mut rng(8), "att", 4);
    let mut r = rng(9);
    let f = Tensor::from_fn(Shape::new(1, 4, 4, 4), |_| r.random_range(0.0f64..1.0));
    let shifted = f.map(|v| v + 0.75);
    let store = store.cast::<f64>();
    let sam = |t: Tensor<f64>| {
        let mut g = Graph::frozen();
        let x = g.constant(t);
        let trace = att.forward(&mut g, &store, x).unwrap();
        g.value(trace.sam).clone()
    };
    for (a, b) in sam(f).data().iter().zip(sam(shifted).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn disabled_attention_reproduces_plain_refined_net() {
    let base = tiny_config(16);
    let (plain, plain_store) = build(
        ModelConfig {
            attention: false,
            ..base.clone()
        },
        10,
    );
    let (with_att, mut att_store) = build(base, 11);
    let copied = att_store.copy_matching_from(&plain_store);
    assert_eq!(copied, plain_store.len());
    with_att.attention().unwrap().set_fuse_to_half_identity(&mut att_store);

    let (images, _) = random_batch::<f32>(2, 16, 16, 12);
    let run = |model: &forgeloc::network::CoarseToFineModel, store: &ParamStore<f32>| {
        let mut g = Graph::frozen();
        let x = g.constant(images.clone());
        let out = model.forward(&mut g, store, x).unwrap();
        g.value(out.refined_mask).clone()
    };
    let a = run(&plain, &plain_store);
    let b = run(&with_att, &att_store);
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= 1e-5, "{x} vs {y}");
    }
}

/// Width of the nonzero support of the centre row after an impulse.
fn support_width(
    convs: impl Fn(&mut Graph<f64>, &ParamStore<f64>, forgeloc_autograd::Var) -> forgeloc_autograd::Var,
    store: &ParamStore<f64>,
) -> usize {
    let size = 97;
    let mut impulse = Tensor::zeros(Shape::new(1, 1, size, size));
    impulse.set([0, 0, size / 2, size / 2], 1.0);
    let mut g = Graph::frozen();
    let x = g.constant(impulse);
    let y = convs(&mut g, store, x);
    let out = g.value(y);
    let row: Vec<usize> = (0..size).filter(|&x| out.at([0, 0, size / 2, x]) != 0.0).collect();
    row.last().unwrap() - row.first().unwrap() + 1
}

fn ones(store: &mut ParamStore<f32>) {
    for id in store.ids().collect::<Vec<_>>() {
        let p = store.get_mut(id);
        let shape = p.value.shape();
        p.value = if p.name.ends_with(".bias") {
            Tensor::zeros(shape)
        } else {
            Tensor::full(shape, 1.0)
        };
    }
}

#[test]
fn dilated_bridge_receptive_field_exceeds_plain_stack() {
    let mut store = ParamStore::new();
    let bridge = DilatedModule::new(&mut store, &mut rng(0), "bridge", 1);
    ones(&mut store);
    let bridge_store = store.cast::<f64>();
    let dilated = support_width(|g, s, x| bridge.forward(g, s, x).unwrap(), &bridge_store);

    let mut store = ParamStore::new();
    let plain: Vec<Conv> = (0..4)
        .map(|i| Conv::same(&mut store, &mut rng(1), &format!("plain{i}"), 1, 1, 3, 1))
        .collect();
    ones(&mut store);
    let plain_store = store.cast::<f64>();
    let stacked = support_width(
        |g, s, mut x| {
            for c in &plain {
                let y = c.forward(g, s, x).unwrap();
                x = g.relu(y);
            }
            x
        },
        &plain_store,
    );
    assert_eq!(stacked, 9);
    assert!(dilated >= 61, "dilated support {dilated}");
}

#[test]
fn gradient_reaches_nearly_every_parameter() {
    // At 128x128 the bridge runs on 32x32 maps, so even the rate-16 taps
    // land inside the image; on smaller inputs they only ever see padding.
    let (model, store) = build(tiny_config(128), 13);
    // One warm-up step moves both attention scales off zero; at exactly zero
    // they block every gradient into the attention convolutions.
    let mut state = TrainState::new(store, 0.002);
    let (images, masks) = random_batch::<f32>(2, 128, 128, 14);
    gradient_step(&model, &mut state, &images, &masks, 1).unwrap();

    let (images, masks) = random_batch::<f32>(2, 128, 128, 15);
    let mut g = Graph::new();
    let x = g.constant(images);
    let loss = model_loss(&model, &mut g, &state.params, x, &masks).unwrap();
    let grads = g.backward(loss).unwrap().for_params(&state.params);
    assert_eq!(grads.len(), state.params.len());
    for id in model.attention().unwrap().scales() {
        assert!(grads[id.index()].data()[0] != 0.0);
    }
    let dead: Vec<&str> = state
        .params
        .iter()
        .filter(|(id, _)| grads[id.index()].data().iter().all(|v| *v == 0.0))
        .map(|(_, p)| p.name.as_str())
        .collect();
    let share = 1.0 - dead.len() as f64 / grads.len() as f64;
    assert!(share >= 0.99, "parameters without gradient: {dead:?}");

    let total: usize = grads.iter().map(|t| t.len()).sum();
    let nonzero: usize = grads
        .iter()
        .map(|t| t.data().iter().filter(|v| **v != 0.0).count())
        .sum();
    println!("nonzero gradient entries: {nonzero} of {total}");
}
