use std::path::Path;

use capsroute::data::{batches, load_mnist_split, BatchStream, DatasetSplit, Source, SplitName};
use capsroute::model::{CapsNetParams, ModelConfig};
use capsroute::rng::SeedStream;
use capsroute::routing::RoutingMode;
use capsroute::train::{
    evaluate, model_for, routing_step, train, train_step, weight_step, TrainConfig, TrainState,
};
use capsroute::Error;

fn mnist(name: SplitName, n: usize) -> DatasetSplit {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    load_mnist_split(&dir, name, Source::Mnist)
        .unwrap()
        .truncate(n)
        .unwrap()
}

fn small(mode: RoutingMode) -> TrainConfig {
    let mut cfg = TrainConfig {
        model: ModelConfig {
            conv1_channels: 8,
            primary_types: 4,
            recon_hidden: [32, 64],
            ..ModelConfig::default()
        },
        batch_size: 8,
        iterations: 6,
        eval_interval: 3,
        lr: 0.01,
        ..TrainConfig::default()
    };
    cfg.routing.mode = mode;
    cfg
}

fn weights_bytes(p: &CapsNetParams<f32>) -> Vec<u32> {
    p.weight_tensors()
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
        .collect()
}

fn b_bytes(p: &CapsNetParams<f32>) -> Vec<u32> {
    p.coefficients
        .as_ref()
        .unwrap()
        .tensor()
        .data()
        .iter()
        .map(|v| v.to_bits())
        .collect()
}

#[test]
fn alternation_isolates_weights_and_coefficients() {
    let split = mnist(SplitName::Train, 64);
    for mode in [RoutingMode::L2, RoutingMode::L1] {
        let cfg = small(mode);
        let model = model_for(&cfg, &split);
        let mut state = TrainState::new(&cfg, &model).unwrap();
        let batch = batches(&split, 8, 0).unwrap().next().unwrap();

        let b_before = b_bytes(&state.params);
        let w_before = weights_bytes(&state.params);
        weight_step(&mut state, &batch, &cfg, &model).unwrap();
        assert_eq!(
            b_bytes(&state.params),
            b_before,
            "{mode}: B moved during the weight step"
        );
        let w_mid = weights_bytes(&state.params);
        assert_ne!(w_mid, w_before);

        routing_step(&mut state, &batch, &cfg, &model).unwrap();
        assert_eq!(
            weights_bytes(&state.params),
            w_mid,
            "{mode}: weights moved during the routing step"
        );
        assert_ne!(b_bytes(&state.params), b_before);
    }
}

#[test]
fn coefficients_persist_across_iterations_and_epochs() {
    // 16 images at batch 8: iterations 3 to 6 run in later epochs
    let split = mnist(SplitName::Train, 16);
    let mut cfg = small(RoutingMode::L2);
    cfg.checkpoint_interval = 1;
    let mut seen = Vec::new();
    train(
        &cfg,
        &split,
        &mnist(SplitName::Test, 8),
        |_| Ok(()),
        |s| {
            seen.push(b_bytes(&s.params));
            Ok(())
        },
    )
    .unwrap();

    let model = model_for(&cfg, &split);
    let mut state = TrainState::new(&cfg, &model).unwrap();
    let stream = BatchStream::new(
        &split,
        cfg.batch_size,
        SeedStream::new(cfg.seed).split("batches"),
    )
    .unwrap();
    let mut replay = Vec::new();
    for batch in stream.take(cfg.iterations) {
        train_step(&mut state, &batch, &cfg, &model).unwrap();
        replay.push(b_bytes(&state.params));
    }
    assert_eq!(seen, replay);
    assert!(seen.windows(2).all(|w| w[0] != w[1]));
}

#[test]
fn zero_rates_leave_everything_unchanged() {
    let split = mnist(SplitName::Train, 16);
    let mut cfg = small(RoutingMode::L2);
    cfg.lr = 0.0;
    cfg.routing.steps = 0;
    let model = model_for(&cfg, &split);
    let mut state = TrainState::new(&cfg, &model).unwrap();
    let before = state.params.clone();
    let batch = batches(&split, 8, 0).unwrap().next().unwrap();
    let loss = train_step(&mut state, &batch, &cfg, &model).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    assert_eq!(state.params, before);
}

#[test]
fn untrained_model_is_at_chance() {
    let test = mnist(SplitName::Test, 1000);
    let cfg = small(RoutingMode::L2);
    let model = model_for(&cfg, &test);
    let mut errors = Vec::new();
    for seed in 0..3 {
        let params = CapsNetParams::init(&model, true, SeedStream::new(seed)).unwrap();
        errors.push(evaluate(&params, &model, &cfg.routing, &test, 100).unwrap());
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    assert!((85.0..=95.0).contains(&mean), "{errors:?}");
}

#[test]
fn dynamic_mode_has_no_coefficients() {
    let split = mnist(SplitName::Train, 16);
    let cfg = small(RoutingMode::Dynamic);
    let out = train(
        &cfg,
        &split,
        &mnist(SplitName::Test, 16),
        |_| Ok(()),
        |_| Ok(()),
    )
    .unwrap();
    assert!(out.state.params.coefficients.is_none());
    assert!(out.rows.iter().all(|r| r.b_sparsity.is_none()));
    assert_eq!(
        out.rows.iter().map(|r| r.iteration).collect::<Vec<_>>(),
        vec![3, 6]
    );
}

#[test]
fn runaway_coefficients_abort_with_divergence() {
    let split = mnist(SplitName::Train, 64);
    let mut cfg = small(RoutingMode::L2);
    cfg.routing.gamma = 10.0;
    cfg.routing.lambda = 0.0;
    cfg.iterations = 50;
    let err = train(
        &cfg,
        &split,
        &mnist(SplitName::Test, 16),
        |_| Ok(()),
        |_| Ok(()),
    )
    .err()
    .expect("γ = 10 must blow up");
    assert!(
        matches!(err, Error::Divergence(_) | Error::NonFinite(_)),
        "{err}"
    );
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn seeded_runs_are_bit_identical() {
    let split = mnist(SplitName::Train, 32);
    let test = mnist(SplitName::Test, 16);
    let mut cfg = small(RoutingMode::L1);
    cfg.deterministic = true;
    let run = || {
        let out = train(&cfg, &split, &test, |_| Ok(()), |_| Ok(())).unwrap();
        (
            out.rows.iter().map(|r| r.csv()).collect::<Vec<_>>(),
            weights_bytes(&out.state.params),
        )
    };
    assert_eq!(run(), run());
}
