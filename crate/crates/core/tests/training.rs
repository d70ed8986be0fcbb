mod common;

use common::{build, param_hash, random_batch, rng, tiny_config};
use forgeloc::checkpoint::Checkpoint;
use forgeloc::data::forge::generate_sample;
use forgeloc::data::{ForgeryKind, ForgerySample};
use forgeloc::hpf::{cw_hpf, HpfKernelBank};
use forgeloc::predict::predict;
use forgeloc::train::{
    evaluate_loss, fgsm, fgsm_perturbation, input_gradient, sample_eps, stack_samples, train, SatConfig, TrainState,
};
use forgeloc_autograd::{Shape, Tensor};

fn samples(n: usize, size: usize, seed: u64) -> Vec<ForgerySample> {
    (0..n)
        .map(|i| generate_sample(ForgeryKind::Splice, size, size, seed * 1000 + i as u64).unwrap())
        .collect()
}

fn sat(iterations: u64, batch_size: usize, seed: u64) -> SatConfig {
    SatConfig {
        iterations,
        batch_size,
        rng_seed: seed,
        ..SatConfig::default()
    }
}

/// One ulp at 1.0: how far below the budget a full step may land once the
/// sum `I + eps` is rounded into single precision.
const F32_ULP: f64 = f32::EPSILON as f64;

#[test]
fn fgsm_contract_on_random_triples() {
    let (model, store) = build(tiny_config(16), 1);
    let before = param_hash(&store);
    let mut r = rng(2);
    for trial in 0..100 {
        let (images, masks) = random_batch::<f32>(1, 16, 16, 100 + trial);
        let eps = sample_eps(&mut r, 0.01);
        assert!(eps > 0.0 && eps <= 0.01);
        let (grad, _) = input_gradient(&model, &store, &images, &masks).unwrap();
        let step = fgsm_perturbation(&grad, &[eps]).unwrap();
        let e = eps as f32;
        assert!(step.data().iter().all(|&s| s == e || s == -e || s == 0.0));

        let adv = fgsm(&model, &store, &images, &masks, &[eps]).unwrap();
        for ((a, i), (s, g)) in adv
            .data()
            .iter()
            .zip(images.data())
            .zip(step.data().iter().zip(grad.data()))
        {
            let delta = (f64::from(*a) - f64::from(*i)).abs();
            assert!(delta <= eps, "trial {trial}: {delta} > {eps}");
            assert!((0.0..=1.0).contains(a));
            let clipped = f64::from(*i) + f64::from(*s) > 1.0 || f64::from(*i) + f64::from(*s) < 0.0;
            if *g != 0.0 && !clipped {
                assert!(delta >= eps - F32_ULP);
            }
        }
    }
    assert_eq!(param_hash(&store), before);
}

#[test]
fn vanishing_budget_leaves_image_unchanged() {
    let (model, store) = build(tiny_config(16), 3);
    let (images, masks) = random_batch::<f32>(2, 16, 16, 4);
    let adv = fgsm(&model, &store, &images, &masks, &[0.0]).unwrap();
    assert_eq!(adv, images);
}

#[test]
fn fgsm_raises_loss_of_trained_model() {
    let (model, store) = build(tiny_config(16), 5);
    let mut state = TrainState::new(store, 0.002);
    let train_set = samples(8, 16, 6);
    let cfg = SatConfig {
        sat_enabled: false,
        ..sat(40, 4, 6)
    };
    train(&model, &mut state, &cfg, &train_set, |_| {}).unwrap();

    let trials = samples(20, 16, 7);
    let mut raised = 0;
    for s in &trials {
        let (images, masks) = stack_samples([s]).unwrap();
        let clean = evaluate_loss(&model, &state.params, &images, &masks).unwrap();
        let adv = fgsm(&model, &state.params, &images, &masks, &[0.01]).unwrap();
        if evaluate_loss(&model, &state.params, &adv, &masks).unwrap() >= clean {
            raised += 1;
        }
    }
    assert!(raised >= 18, "FGSM raised the loss on only {raised} of 20 samples");
}

#[test]
fn one_adam_step_per_phase() {
    let train_set = samples(4, 16, 8);
    for (sat_enabled, steps) in [(false, 5), (true, 10)] {
        let (model, store) = build(tiny_config(16), 9);
        let mut state = TrainState::new(store, 0.002);
        let cfg = SatConfig {
            sat_enabled,
            ..sat(5, 2, 9)
        };
        let mut lines = 0;
        train(&model, &mut state, &cfg, &train_set, |_| lines += 1).unwrap();
        assert_eq!(state.adam.step_count, steps);
        assert_eq!(lines, steps as usize);
        assert_eq!(
            state.history.iter().filter(|r| r.phase == 2).count(),
            steps as usize - 5
        );
    }
}

#[test]
fn recorded_budgets_are_uniform() {
    let (model, store) = build(tiny_config(8), 10);
    let mut state = TrainState::new(store, 0.002);
    let train_set = samples(4, 8, 11);
    train(&model, &mut state, &sat(1000, 1, 12), &train_set, |_| {}).unwrap();
    let mut eps: Vec<f64> = state.history.iter().flat_map(|r| r.eps.iter().copied()).collect();
    assert_eq!(eps.len(), 1000);
    assert!(eps.iter().all(|&e| e > 0.0 && e <= 0.01));
    eps.sort_by(f64::total_cmp);
    let n = eps.len() as f64;
    let ks = eps
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let cdf = e / 0.01;
            (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.05, "Kolmogorov-Smirnov statistic {ks}");
}

#[test]
fn kernels_survive_training_unchanged() {
    let (model, store) = build(tiny_config(8), 13);
    let bank_before = model.kernel_bank().clone();
    assert_eq!(bank_before, HpfKernelBank::srm());
    let probe = Tensor::from_fn(Shape::new(1, 3, 8, 8), |[_, c, y, x]| {
        ((c + 2 * y + 3 * x) % 5) as f32 * 0.2
    });
    let response_before = cw_hpf(model.kernel_bank(), &probe);
    let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();

    let mut state = TrainState::new(store, 0.002);
    train(&model, &mut state, &sat(50, 2, 14), &samples(4, 8, 14), |_| {}).unwrap();
    assert_eq!(state.adam.step_count, 100);
    assert_eq!(model.kernel_bank(), &bank_before);
    assert_eq!(cw_hpf(model.kernel_bank(), &probe), response_before);
    assert!(names.iter().all(|n| !n.contains("hpf")));
    let ck = Checkpoint::decode(&Checkpoint::from_state(&model, &state, 0).encode()).unwrap();
    assert_eq!(ck.kernels, bank_before);
}

#[test]
fn resumed_training_replays_uninterrupted_run() {
    let train_set = samples(6, 16, 15);
    let cfg = SatConfig {
        flip_rotate_enabled: true,
        ..sat(6, 2, 16)
    };
    let (model, store) = build(tiny_config(16), 17);

    let mut full = TrainState::new(store.clone(), cfg.lr);
    train(&model, &mut full, &cfg, &train_set, |_| {}).unwrap();

    let mut first = TrainState::new(store.clone(), cfg.lr);
    train(
        &model,
        &mut first,
        &SatConfig {
            iterations: 3,
            ..cfg.clone()
        },
        &train_set,
        |_| {},
    )
    .unwrap();
    let bytes = Checkpoint::from_state(&model, &first, cfg.rng_seed).encode();
    let (model2, mut resumed) = Checkpoint::decode(&bytes).unwrap().into_model().unwrap();
    assert_eq!(resumed.iteration, 3);
    train(&model2, &mut resumed, &cfg, &train_set, |_| {}).unwrap();

    assert_eq!(resumed.history, full.history);
    assert_eq!(param_hash(&resumed.params), param_hash(&full.params));

    let mut again = TrainState::new(store, cfg.lr);
    train(&model, &mut again, &cfg, &train_set, |_| {}).unwrap();
    assert_eq!(param_hash(&again.params), param_hash(&full.params));
}

#[test]
fn saved_checkpoint_predicts_identically() {
    let (model, store) = build(tiny_config(16), 18);
    let mut state = TrainState::new(store, 0.002);
    train(&model, &mut state, &sat(2, 2, 18), &samples(2, 16, 18), |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    Checkpoint::from_state(&model, &state, 18).save(&path).unwrap();
    let (loaded, restored) = Checkpoint::load(&path).unwrap().into_model().unwrap();

    let image = samples(1, 16, 19).remove(0).image;
    let a = predict(&model, &state.params, &image).unwrap();
    let b = predict(&loaded, &restored.params, &image).unwrap();
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.refined), bits(&b.refined));
    assert_eq!(restored.adam, state.adam);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[..8].copy_from_slice(b"NOTACKPT");
    std::fs::write(&path, &bytes).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}
