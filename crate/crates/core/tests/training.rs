use mvl_core::augmentation::{combinations, AugKind, AugPolicy};
use mvl_core::data::{generate_synthetic, MultiViewDataset, SyntheticConfig};
use mvl_core::encoders::EncoderConfig;
use mvl_core::fusion::{FusionConfig, FusionKind};
use mvl_core::model::{Batch, Level, Model, ModelSpec};
use mvl_core::nn::Ctx;
use mvl_core::optim::AdamState;
use mvl_core::params::Session;
use mvl_core::rng::stream;
use mvl_core::training::{combo_loss, loss_rows, train, Augmenter, TrainConfig};
use mvl_core::Tensor;

fn dataset(samples: usize, seed: u64) -> MultiViewDataset {
    generate_synthetic(
        &SyntheticConfig {
            samples,
            ..SyntheticConfig::default()
        },
        seed,
    )
    .unwrap()
}

/// No dropout anywhere, so training-mode passes are deterministic functions.
fn spec(ds: &MultiViewDataset, kind: FusionKind, level: Level) -> ModelSpec {
    ModelSpec {
        encoder: EncoderConfig {
            latent_dim: 8,
            dropout: 0.0,
            ..EncoderConfig::default()
        },
        fusion: FusionConfig {
            heads: 2,
            dropout: 0.0,
            ..FusionConfig::with_kind(kind)
        },
        level,
        task: ds.targets().task(),
        outputs: ds.targets().output_dim(),
    }
}

fn max_grad_gap(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

#[test]
fn shared_encoding_matches_naive_re_encoding() {
    let ds = dataset(20, 1);
    let rows: Vec<usize> = (0..8).collect();
    let batch = Batch::gather(&ds, &rows).unwrap();
    let targets = ds.targets().subset(&rows);
    let combos = combinations(3).unwrap();
    let weights = [0.7, 1.1, 1.2];
    for kind in [
        FusionKind::Average,
        FusionKind::Gated,
        FusionKind::Cross,
        FusionKind::Memory,
        FusionKind::Concat,
    ] {
        let model = Model::new(ds.views().clone(), spec(&ds, kind, Level::Feature), 3).unwrap();

        let mut s = Session::new(model.store());
        let mut ctx = Ctx::train(stream(3, "aug"));
        let (loss, _) = combo_loss(&model, &mut s, &batch, &targets, &combos, Some(&weights), &mut ctx).unwrap();
        let shared_loss = s.value(loss).data()[0];
        let shared = s.param_grads(loss).unwrap();

        // every combination encodes the batch from scratch
        let mut s = Session::new(model.store());
        let mut ctx = Ctx::train(stream(3, "aug"));
        let mut total = None;
        for &mask in &combos {
            let out = model
                .forward(&mut s, &batch, &vec![mask; rows.len()], &mut ctx)
                .unwrap();
            let per_row = loss_rows(&mut s, out, &targets, Some(&weights)).unwrap();
            let mean = s.graph.mean_all(per_row).unwrap();
            total = Some(match total {
                None => mean,
                Some(t) => s.graph.add(t, mean).unwrap(),
            });
        }
        let naive = s.graph.scale(total.unwrap(), 1.0 / combos.len() as f64).unwrap();
        let naive_loss = s.value(naive).data()[0];
        let naive = s.param_grads(naive).unwrap();

        assert!((shared_loss - naive_loss).abs() < 1e-12, "{kind:?}");
        let gap = max_grad_gap(&shared, &naive);
        assert!(gap <= 1e-10, "{kind:?}: {gap:e}");
    }
}

#[test]
fn unaugmented_step_is_a_plain_step() {
    let ds = dataset(20, 2);
    let rows: Vec<usize> = (0..10).collect();
    let targets = ds.targets().subset(&rows);
    for level in [Level::Feature, Level::Input] {
        let mut model = Model::new(ds.views().clone(), spec(&ds, FusionKind::Gated, level), 2).unwrap();
        let mut reference = Model::new(ds.views().clone(), spec(&ds, FusionKind::Gated, level), 2).unwrap();
        let aug = Augmenter::new(&AugPolicy::default(), 3).unwrap();
        assert_eq!(aug.combos().len(), 1);
        let mut ctx = Ctx::train(stream(2, "aug"));
        let batch = aug.batch(&ds, &rows, &mut ctx).unwrap();
        let mut adam = AdamState::new(1e-3);
        let outcome = aug
            .step(&mut model, &mut adam, &batch, &targets, None, &mut ctx)
            .unwrap();

        let (direct_loss, grads) = {
            let mut s = Session::new(reference.store());
            let out = reference
                .forward(
                    &mut s,
                    &batch,
                    &vec![ds.views().full_mask(); rows.len()],
                    &mut Ctx::eval(),
                )
                .unwrap();
            let per_row = loss_rows(&mut s, out, &targets, None).unwrap();
            let loss = s.graph.mean_all(per_row).unwrap();
            (s.value(loss).data()[0], s.param_grads(loss).unwrap())
        };
        AdamState::new(1e-3)
            .step(reference.store_mut().values_mut(), &grads)
            .unwrap();

        assert!((outcome.loss - direct_loss).abs() <= 1e-12, "{level:?}");
        assert_eq!(outcome.combo_losses.len(), 1);
        assert!(max_grad_gap(model.store().values(), reference.store().values()) <= 1e-12);
    }
}

#[test]
fn combo_counts_per_step() {
    let ds = dataset(30, 4);
    let rows: Vec<usize> = (0..5).collect();
    let targets = ds.targets().subset(&rows);
    let cases = [
        (AugKind::Com, 3 * 5, 7 * 5),
        (AugKind::None, 3 * 5, 5),
        (AugKind::Sensd, 3 * 5, 5),
    ];
    for (kind, encoder, head) in cases {
        let mut model = Model::new(ds.views().clone(), spec(&ds, FusionKind::Average, Level::Feature), 4).unwrap();
        let policy = AugPolicy {
            kind,
            ..AugPolicy::default()
        };
        let aug = Augmenter::new(&policy, 3).unwrap();
        let mut ctx = Ctx::train(stream(4, "aug"));
        let batch = aug.batch(&ds, &rows, &mut ctx).unwrap();
        model.counters().reset();
        aug.step(&mut model, &mut AdamState::new(1e-3), &batch, &targets, None, &mut ctx)
            .unwrap();
        assert_eq!(model.counters().encoder_samples(), encoder, "{kind:?}");
        assert_eq!(model.counters().head_samples(), head, "{kind:?}");
    }
}

fn train_cfg(max_epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        max_epochs,
        lr,
        patience: 5,
        batch_size: 64,
        ..TrainConfig::default()
    }
}

#[test]
fn decreasing_validation_loss_runs_every_epoch() {
    let ds = dataset(64, 5);
    let mut model = Model::new(ds.views().clone(), spec(&ds, FusionKind::Average, Level::Feature), 5).unwrap();
    // full batch, validation on the training data itself: each Adam step lowers the loss
    let log = train(&mut model, &ds, &ds, &train_cfg(20, 1e-3), &AugPolicy::default(), 5).unwrap();
    assert_eq!(log.epochs.len(), 20);
    assert!(log.epochs.windows(2).all(|w| w[1].val_loss < w[0].val_loss));
    assert_eq!(log.best_epoch, 20);
}

#[test]
fn constant_validation_loss_stops_after_patience() {
    let ds = dataset(64, 6);
    let mut model = Model::new(ds.views().clone(), spec(&ds, FusionKind::Average, Level::Feature), 6).unwrap();
    // steps far below the parameters' resolution
    let log = train(&mut model, &ds, &ds, &train_cfg(50, 1e-300), &AugPolicy::default(), 6).unwrap();
    assert_eq!(log.epochs.len(), 6);
    assert_eq!(log.best_epoch, 1);
}

#[test]
fn best_parameters_are_restored() {
    let ds = dataset(120, 7);
    let (tr, val) = (
        ds.subset(&(0..90).collect::<Vec<_>>()),
        ds.subset(&(90..120).collect::<Vec<_>>()),
    );
    let mut model = Model::new(ds.views().clone(), spec(&ds, FusionKind::Gated, Level::Feature), 7).unwrap();
    let log = train(&mut model, &tr, &val, &train_cfg(30, 1e-2), &AugPolicy::default(), 7).unwrap();
    let best = log.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    let full = [ds.views().full_mask()];
    let restored = mvl_core::training::evaluate_losses(&model, &val, &full).unwrap()[0];
    assert!((restored - best).abs() < 1e-12);
    assert_eq!(log.epochs[log.best_epoch - 1].val_loss, best);
}

#[test]
fn training_is_deterministic() {
    let ds = dataset(80, 8);
    let (tr, val) = (
        ds.subset(&(0..60).collect::<Vec<_>>()),
        ds.subset(&(60..80).collect::<Vec<_>>()),
    );
    for kind in [AugKind::Com, AugKind::Sensd, AugKind::Tempd] {
        let policy = AugPolicy {
            kind,
            ..AugPolicy::default()
        };
        let run = || {
            let mut model = Model::new(ds.views().clone(), spec(&ds, FusionKind::Memory, Level::Feature), 8).unwrap();
            let log = train(&mut model, &tr, &val, &train_cfg(3, 1e-3), &policy, 8).unwrap();
            (model.store().values().to_vec(), log)
        };
        let (a, log_a) = run();
        let (b, log_b) = run();
        assert_eq!(a, b, "{kind:?}");
        assert_eq!(log_a, log_b);
    }
}

#[test]
fn com_logs_every_combination() {
    let ds = dataset(60, 9);
    let (tr, val) = (
        ds.subset(&(0..45).collect::<Vec<_>>()),
        ds.subset(&(45..60).collect::<Vec<_>>()),
    );
    let mut model = Model::new(ds.views().clone(), spec(&ds, FusionKind::Average, Level::Feature), 9).unwrap();
    let policy = AugPolicy {
        kind: AugKind::Com,
        ..AugPolicy::default()
    };
    let log = train(&mut model, &tr, &val, &train_cfg(2, 1e-3), &policy, 9).unwrap();
    let first = &log.epochs[0];
    assert_eq!(first.combo_val_losses.len(), 7);
    assert_eq!(first.combo_val_losses[0].loss, first.val_loss);
    let mut buf = Vec::new();
    log.write_jsonl(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), log.epochs.len());
}
