use permll::data::{make_blobs, BlobSpec, Dataset};
use permll::losses::LossKind;
use permll::model::Arch;
use permll::noise::{self, NoiseKind, NoiseSpec};
use permll::permlayer::AlphaTable;
use permll::trainer::{
    accuracy, batch_loss_and_grads, train, Checkpoint, TrainConfig, TrainData, Trainer, Variant,
};

fn blobs(per_class: usize, seed: u64) -> Dataset {
    make_blobs(&BlobSpec {
        classes: 3,
        per_class,
        dim: 2,
        separation: 3.0,
        std: 1.0,
        seed,
    })
    .unwrap()
}

fn data(per_class: usize) -> TrainData {
    let spec = NoiseSpec {
        kind: NoiseKind::Symmetric,
        rate: 0.4,
        seed: 9,
        ..Default::default()
    };
    TrainData {
        train: noise::apply(&spec, &blobs(per_class, 0)).unwrap(),
        validation: Some(noise::apply(&spec, &blobs(20, 5)).unwrap()),
        test: blobs(100, 1),
    }
}

fn config() -> TrainConfig {
    TrainConfig {
        variant: Variant::PermutePrediction,
        loss: LossKind::CrossEntropy,
        epochs: 6,
        batch_size: 32,
        lr: 0.1,
        milestones: vec![4],
        lr_decay: 0.1,
        momentum: 0.9,
        weight_decay: 5e-4,
        eta_alpha: 30.0,
        i_alpha: 0.6,
        seed: 2,
        couple_alpha_schedule: false,
    }
}

#[test]
fn both_updates_use_pre_step_parameters() {
    let data = data(50);
    let n = data.train.len();
    let cfg = TrainConfig {
        batch_size: n,
        epochs: 1,
        momentum: 0.0,
        ..config()
    };
    let mut trainer = Trainer::new(cfg.clone(), Arch::Mlp { hidden_width: 6 }, &data).unwrap();
    let model0 = trainer.model().clone();
    let alpha0 = trainer.alpha().clone();
    let all: Vec<usize> = (0..n).collect();
    let g = batch_loss_and_grads(
        cfg.variant,
        cfg.loss,
        &model0,
        &alpha0,
        &data.train.data,
        &all,
    )
    .unwrap();
    trainer.run_epoch().unwrap();
    for (i, gi) in &g.alpha {
        for (j, v) in gi.iter().enumerate() {
            let expected = alpha0.row(*i)[j] - cfg.eta_alpha * v;
            assert!((trainer.alpha().row(*i)[j] - expected).abs() <= 1e-12);
        }
    }
    let theta0 = model0.flatten();
    let mut weight_mask = Vec::new();
    for layer in &model0.layers {
        weight_mask.extend(std::iter::repeat_n(true, layer.weight.len()));
        weight_mask.extend(std::iter::repeat_n(false, layer.bias.len()));
    }
    for (k, (after, (before, grad))) in trainer
        .model()
        .flatten()
        .iter()
        .zip(theta0.iter().zip(g.model.flatten()))
        .enumerate()
    {
        let decay = if weight_mask[k] {
            cfg.weight_decay * before
        } else {
            0.0
        };
        let expected = before - cfg.lr * (grad + decay);
        assert!((after - expected).abs() <= 1e-12, "parameter {k}");
    }
}

#[test]
fn evaluation_ignores_the_permutation_layer() {
    let data = data(40);
    let mut trainer = Trainer::new(config(), Arch::Linear, &data).unwrap();
    trainer.run_epoch().unwrap();
    let reference = accuracy(trainer.model(), &data.test, &data.test.labels).unwrap();
    let ckpt = trainer.checkpoint();
    let mut scrambled = ckpt.clone();
    scrambled.alpha = AlphaTable::init(&vec![2; data.train.len()], 0.99, 3).unwrap();
    let restored = Trainer::resume(config(), Arch::Linear, &data, scrambled).unwrap();
    assert_eq!(
        accuracy(restored.model(), &data.test, &data.test.labels).unwrap(),
        reference
    );
    let record = trainer.run_epoch().unwrap();
    assert!(record.validation_accuracy.is_some());
}

#[test]
fn identical_configs_give_identical_reports() {
    let data = data(40);
    let arch = Arch::Mlp { hidden_width: 8 };
    let a = train(&config(), arch, &data).unwrap();
    let b = train(&config(), arch, &data).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_json(), b.to_json());
    let c = train(
        &TrainConfig {
            seed: 3,
            ..config()
        },
        arch,
        &data,
    )
    .unwrap();
    assert_ne!(a, c);
}

#[test]
fn checkpoint_resume_is_bitwise() {
    let data = data(40);
    let arch = Arch::Mlp { hidden_width: 8 };
    let full = train(&config(), arch, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt");
    {
        let mut t = Trainer::new(config(), arch, &data).unwrap();
        for _ in 0..3 {
            t.run_epoch().unwrap();
        }
        t.checkpoint().save(&path).unwrap();
    }
    let resumed = Trainer::resume(config(), arch, &data, Checkpoint::load(&path).unwrap())
        .unwrap()
        .run()
        .unwrap();
    assert_eq!(resumed.to_json(), full.to_json());
}

#[test]
fn per_sample_gradient_bound_holds_in_training() {
    let data = data(60);
    for loss in LossKind::ALL {
        let report = train(
            &TrainConfig { loss, ..config() },
            Arch::Mlp { hidden_width: 8 },
            &data,
        )
        .unwrap();
        let checked: usize = report.epochs.iter().map(|r| r.bound_checked).sum();
        let violations: usize = report.epochs.iter().map(|r| r.bound_violations).sum();
        assert_eq!(violations, 0, "{loss}");
        // the first epochs start from near-uniform predictions
        assert!(checked > 0, "{loss}: no low-confidence samples seen");
        assert!(report
            .epochs
            .iter()
            .all(|r| r.bound_max_ratio <= 1.0 + 1e-9));
    }
}

#[test]
fn huge_alpha_rate_loses_correct_permutations() {
    let data = data(100);
    let cfg = TrainConfig {
        eta_alpha: 1e7,
        i_alpha: 0.34,
        epochs: 20,
        ..config()
    };
    let report = train(&cfg, Arch::Mlp { hidden_width: 16 }, &data).unwrap();
    assert!(
        report.final_permutation_accuracy() < report.initial_permutation_accuracy,
        "{} vs {}",
        report.final_permutation_accuracy(),
        report.initial_permutation_accuracy
    );
}

#[test]
fn permutation_accuracy_rises_with_a_moderate_rate() {
    let data = data(100);
    let report = train(
        &TrainConfig {
            epochs: 20,
            ..config()
        },
        Arch::Mlp { hidden_width: 16 },
        &data,
    )
    .unwrap();
    assert!(report.final_permutation_accuracy() > report.initial_permutation_accuracy + 10.0);
}
