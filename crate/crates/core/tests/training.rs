use spcl::dataio::{gen_synthetic, load_checkpoint, SyntheticConfig};
use spcl::numeric::Gradients;
use spcl::partition::sample_partition;
use spcl::rng::StreamRng;
use spcl::trainer::{
    adamw_update, batch_gradients, checkpoint_path, decays, fresh_state, lr_at, pretrain, train_step, AdamHyper,
    PretrainOptions, TrainState, METRICS_FILE,
};
use spcl::{Encoder, EncoderConfig, Error, TrainConfig};

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        depth: 1,
        dim: 16,
        heads: 2,
        mlp_ratio: 2,
        patch: 4,
        image: 16,
        ..EncoderConfig::default()
    }
}

fn tiny_train(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        lr_peak: 1e-3,
        seed,
        ..TrainConfig::default()
    }
}

fn images(n: usize) -> Vec<spcl::ImageGray> {
    let cfg = SyntheticConfig { size: 16, ..SyntheticConfig::default() };
    gen_synthetic(&cfg, 0, n).unwrap().into_iter().map(|(i, _)| i).collect()
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let data = images(16);
    let run = || {
        let state = fresh_state(tiny_encoder(), tiny_train(5), data.len()).unwrap();
        pretrain(state, &data, &PretrainOptions::default()).unwrap().metrics
    };
    let (a, b) = (run(), run());
    assert!(a.len() >= 10);
    let lines = |m: &[spcl::trainer::StepReport]| m.iter().map(|r| r.metrics_line()).collect::<Vec<_>>();
    assert_eq!(lines(&a), lines(&b));

    let other = pretrain(fresh_state(tiny_encoder(), tiny_train(6), 16).unwrap(), &data, &PretrainOptions::default())
        .unwrap()
        .metrics;
    assert_ne!(lines(&a), lines(&other));
}

#[test]
fn accumulation_equals_averaged_micro_batch_gradients() {
    let data = images(8);
    let (b1, b2): (Vec<_>, Vec<_>) = (data[..4].iter().collect(), data[4..].iter().collect());
    let cfg = TrainConfig { accum_steps: 2, ..tiny_train(3) };
    let start = fresh_state(tiny_encoder(), cfg, 8).unwrap();
    let cfg = start.train.clone();
    let encoder = Encoder::new(tiny_encoder()).unwrap();

    let mut accumulated = start.clone();
    train_step(&encoder, &mut accumulated, &[b1.clone(), b2.clone()]).unwrap();

    // Same partitions, each micro-batch's loss differentiated alone, then
    // averaged and applied in one update.
    let mut manual = start.clone();
    let mut rng = StreamRng::from_state(manual.partition_rng);
    let mut grads = Gradients::default();
    for batch in [&b1, &b2] {
        let plans: Vec<_> = batch.iter().map(|_| sample_partition(tiny_encoder().num_patches(), cfg.mask_ratio, &mut rng).unwrap()).collect();
        let (_, g) = batch_gradients(&encoder, &manual.params, &manual.loss, batch, &plans, false).unwrap();
        grads.merge(&g);
    }
    grads.scale(0.5);
    let lr = lr_at(1, &cfg).unwrap();
    let hp = AdamHyper::from(&cfg);
    let theta_slot = manual.params.tensors().len();
    for (slot, p) in manual.params.tensors_mut().iter_mut().enumerate() {
        let g = grads.get(slot).map_or(vec![0.0; p.len()], <[f32]>::to_vec);
        let decay = decays(p);
        adamw_update(p, &g, &mut manual.opt.m[slot], &mut manual.opt.v[slot], 1, lr, &hp, decay).unwrap();
    }
    let g = grads.get(theta_slot).unwrap().to_vec();
    let (m, v) = (&mut manual.opt.m[theta_slot], &mut manual.opt.v[theta_slot]);
    adamw_update(&mut manual.loss.theta_tau, &g, m, v, 1, lr, &hp, false).unwrap();

    for (a, b) in accumulated.params.tensors().iter().zip(manual.params.tensors()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
    }
    assert!((accumulated.loss.theta_tau.item() - manual.loss.theta_tau.item()).abs() <= 1e-6);
}

#[test]
fn single_image_batch_has_zero_loss_and_gradient() {
    let data = images(1);
    let cfg = TrainConfig { batch_size: 2, ..tiny_train(0) };
    let mut state = fresh_state(tiny_encoder(), cfg, 2).unwrap();
    let before = state.params.clone();
    let encoder = Encoder::new(tiny_encoder()).unwrap();
    let report = train_step(&encoder, &mut state, &[vec![&data[0]]]).unwrap();
    assert!(report.loss.abs() < 1e-7);
    // zero gradient: with zero moments Adam moves nothing except weight decay
    for (a, b) in before.tensors().iter().zip(state.params.tensors()) {
        if !decays(a) {
            assert_eq!(a, b);
        }
    }
}

#[test]
fn empty_dataset_is_rejected_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let state = TrainState::init(tiny_encoder(), TrainConfig { total_steps: 10, warmup_steps: 1, ..tiny_train(0) }).unwrap();
    let err = pretrain(state, &[], &PretrainOptions { out_dir: Some(out.clone()), stop_after: None }).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(!out.exists());
    assert!(fresh_state(tiny_encoder(), tiny_train(0), 0).is_err());
}

#[test]
fn resumed_run_follows_the_uninterrupted_trajectory() {
    let data = images(16);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { checkpoint_every: 5, ..tiny_train(11) };
    let full = pretrain(fresh_state(tiny_encoder(), cfg.clone(), 16).unwrap(), &data, &PretrainOptions::default()).unwrap();

    let opts = PretrainOptions { out_dir: Some(dir.path().to_path_buf()), stop_after: Some(5) };
    let first = pretrain(fresh_state(tiny_encoder(), cfg, 16).unwrap(), &data, &opts).unwrap();
    assert_eq!(first.metrics.len(), 5);
    let resumed_state = load_checkpoint(&checkpoint_path(dir.path(), 5)).unwrap();
    let opts = PretrainOptions { stop_after: None, ..opts };
    let rest = pretrain(resumed_state, &data, &opts).unwrap();

    assert_eq!(first.metrics.len() + rest.metrics.len(), full.metrics.len());
    for (a, b) in full.metrics.iter().zip(first.metrics.iter().chain(&rest.metrics)) {
        assert_eq!(a.step, b.step);
        assert!((a.loss - b.loss).abs() <= 1e-6, "step {}: {} vs {}", a.step, a.loss, b.loss);
    }
    assert_eq!(full.state.params, rest.state.params);

    let log = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(log.lines().count(), 1 + full.metrics.len());
}

#[test]
fn temperature_and_parameter_count_stay_fixed() {
    let data = images(16);
    let cfg = TrainConfig { lr_peak: 0.5, tau_init: 95.0, ..tiny_train(2) };
    let state = fresh_state(tiny_encoder(), cfg, 16).unwrap();
    let count = state.trainable_count();
    let out = pretrain(state, &data, &PretrainOptions::default()).unwrap();
    for r in &out.metrics {
        assert!((1.0..=100.0).contains(&r.tau), "{}", r.tau);
        assert!(r.loss.is_finite());
    }
    assert!((1.0..=100.0).contains(&out.state.loss.tau()));
    assert_eq!(out.state.trainable_count(), count);
    assert_eq!(out.state.params.tensors().len(), fresh_state(tiny_encoder(), tiny_train(2), 16).unwrap().params.tensors().len());
}
