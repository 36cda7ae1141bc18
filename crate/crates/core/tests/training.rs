mod common;

use common::*;
use seesaw::train::{
    augment_with, evaluate, load_cifar, lr_at, parse_cifar, sgd_step, softmax_cross_entropy, CifarKind, Dataset, Schedule,
    Sgd, Split, TrainConfig, Trainer, CHECKPOINT_FILE, METRICS_FILE,
};
use seesaw::{build_model, BlockKind, BnMode, Depth, InputLayout, Model, ModelSpec, Param, Shape, Tensor};

fn tiny() -> ModelSpec {
    let mut spec = ModelSpec::new(BlockKind::SeesawShuffle, Depth::Half, InputLayout::Cifar32, 10).with_width(0.25);
    spec.head_channels = 24;
    spec
}

fn fixture(per_file: usize, seed: u64) -> (tempfile::TempDir, Dataset, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    write_cifar10_fixture(dir.path(), per_file, seed);
    let train = load_cifar(dir.path(), Split::Train, CifarKind::Cifar10).unwrap();
    let test = load_cifar(dir.path(), Split::Test, CifarKind::Cifar10).unwrap();
    (dir, train, test)
}

fn param(values: &[f64], grad: &[f64], decay: bool) -> Param<f64> {
    let shape = Shape::new(values.len(), 1, 1, 1);
    let mut p = Param::new("p", vec![values.len()], Tensor::new(shape, values.to_vec()).unwrap(), decay);
    p.grad = Tensor::new(shape, grad.to_vec()).unwrap();
    p
}

#[test]
fn schedules_match_their_closed_forms() {
    let cifar = TrainConfig::cifar();
    for (epoch, lr) in [(0, 0.1), (199, 0.1), (200, 0.01), (299, 0.01), (300, 0.001), (350, 0.0001), (399, 0.0001)] {
        assert!((lr_at(&cifar, epoch) - lr).abs() <= f64::EPSILON * lr, "epoch {epoch}");
    }
    let imagenet = TrainConfig::imagenet();
    assert_eq!(lr_at(&imagenet, 0), 0.045);
    assert_eq!(lr_at(&imagenet, 1), 0.045 * 0.98);
    assert!((lr_at(&imagenet, 1) - 0.0441).abs() < 1e-15);
    assert!((lr_at(&imagenet, 10) - 0.045 * 0.98f64.powi(10)).abs() < 1e-15);
    let constant = TrainConfig::constant(0.05);
    assert!((0..500).all(|e| lr_at(&constant, e) == 0.05));
    assert_eq!((imagenet.batch_size, imagenet.weight_decay), (96, 4e-5));
    assert_eq!((cifar.batch_size, cifar.weight_decay, cifar.momentum), (64, 1e-4, 0.9));
    assert_eq!("imagenet_exp".parse::<Schedule>().unwrap(), Schedule::ImagenetExp);
}

#[test]
fn sgd_matches_hand_unrolled_updates() {
    let (p0, g) = ([1.0, -2.0, 0.5], [0.3, 0.1, -0.7]);
    // No momentum, no decay: plain gradient descent.
    let mut p = param(&p0, &g, true);
    let mut v = Tensor::zeros(p.value.shape());
    sgd_step(&mut p, &mut v, 0.1, 0.0, 0.0).unwrap();
    for i in 0..3 {
        assert_eq!(p.value.data()[i], p0[i] - 0.1 * g[i]);
    }
    // Zero gradient, zero velocity: nothing moves.
    let mut p = param(&p0, &[0.0; 3], true);
    let mut v = Tensor::zeros(p.value.shape());
    sgd_step(&mut p, &mut v, 0.1, 0.9, 0.0).unwrap();
    assert_eq!(p.value.data(), &p0);
    // Two momentum steps on a fixed gradient: the second moves by lr·1.9·g.
    let mut p = param(&p0, &g, true);
    let mut v = Tensor::zeros(p.value.shape());
    sgd_step(&mut p, &mut v, 0.1, 0.9, 0.0).unwrap();
    let after_one = p.value.data().to_vec();
    sgd_step(&mut p, &mut v, 0.1, 0.9, 0.0).unwrap();
    for i in 0..3 {
        let delta = p.value.data()[i] - after_one[i];
        assert!((delta + 0.1 * 1.9 * g[i]).abs() < 1e-15, "{delta}");
    }
    // Weight decay enters the velocity.
    let mut p = param(&[2.0], &[0.0], true);
    let mut v = Tensor::zeros(p.value.shape());
    sgd_step(&mut p, &mut v, 0.5, 0.0, 0.1).unwrap();
    assert_eq!(p.value.data(), &[2.0 - 0.5 * 0.1 * 2.0]);
}

#[test]
fn sgd_rejects_bad_steps() {
    let mut p = param(&[1.0, 2.0], &[f64::NAN, 0.0], true);
    let mut v = Tensor::zeros(p.value.shape());
    assert!(sgd_step(&mut p, &mut v, 0.1, 0.9, 0.0).is_err());
    assert_eq!(p.value.data(), &[1.0, 2.0]);
    let mut short = Tensor::zeros(Shape::new(1, 1, 1, 1));
    let mut p = param(&[1.0, 2.0], &[0.0, 0.0], true);
    assert!(sgd_step(&mut p, &mut short, 0.1, 0.9, 0.0).is_err());
}

#[test]
fn batch_norm_and_bias_are_exempt_from_decay() {
    let mut model = build_model::<f64>(&tiny(), 0).unwrap();
    let before = model.graph.clone();
    model.graph.zero_grad();
    let mut sgd = Sgd::new(&model.graph, 0.9, 0.1);
    sgd.step(&mut model.graph, 0.5).unwrap();
    let mut old = Vec::new();
    before.visit_params(&mut |p| old.push(p.value.clone()));
    let mut i = 0;
    let mut decayed = 0;
    model.visit_params(&mut |p| {
        let exempt = p.name.ends_with(".gamma") || p.name.ends_with(".beta") || p.name.ends_with(".bias");
        assert_eq!(p.decay, !exempt, "{}", p.name);
        if exempt {
            assert_eq!(p.value, old[i], "{}", p.name);
        } else if p.value != old[i] {
            decayed += 1;
        }
        i += 1;
    });
    assert!(decayed > 0);
}

#[test]
fn untrained_loss_is_near_log_classes() {
    let (_dir, train, _) = fixture(40, 1);
    let stats = train.channel_stats();
    for classes in [10, 100] {
        let mut spec = tiny();
        spec.num_classes = classes;
        let mut model = build_model::<f64>(&spec, 3).unwrap();
        let idx: Vec<usize> = (0..64).collect();
        let (x, labels) = train.batch::<f64>(&idx, &stats, |b| b.to_vec());
        let logits = model.forward(&x, BnMode::Train).unwrap();
        let (loss, _, _) = softmax_cross_entropy(&logits, &labels).unwrap();
        let ln_k = (classes as f64).ln();
        assert!((loss / ln_k - 1.0).abs() < 0.1, "{classes}: loss {loss} vs ln k {ln_k}");
    }
}

#[test]
fn fixed_batch_is_overfit() {
    let (_dir, train, _) = fixture(64, 2);
    let data = train.subset(64);
    let stats = data.channel_stats();
    let mut cfg = TrainConfig::constant(0.05);
    cfg.batch_size = 64;
    cfg.augment = false;
    cfg.shuffle = false;
    let mut trainer = Trainer::new(build_model::<f32>(&tiny(), 0).unwrap(), cfg, stats).unwrap();
    let idx: Vec<usize> = (0..64).collect();
    let (x, labels) = data.batch::<f32>(&idx, &stats, |b| b.to_vec());
    let mut losses = Vec::new();
    let mut solved_at = None;
    for step in 0..500 {
        let s = trainer.train_step(&x, &labels, 0.05).unwrap();
        losses.push(s.loss);
        if s.correct == 64 {
            solved_at = Some(step);
            break;
        }
    }
    assert!(losses.len() <= 20 || losses[20] < losses[0], "{:?}", &losses[..21]);
    assert!(solved_at.is_some(), "final loss {}", losses.last().unwrap());
}

#[test]
fn loss_falls_over_the_first_twenty_steps() {
    let (_dir, train, _) = fixture(64, 4);
    let data = train.subset(64);
    let stats = data.channel_stats();
    let mut cfg = TrainConfig::constant(0.05);
    cfg.batch_size = 64;
    let mut trainer = Trainer::new(build_model::<f32>(&tiny(), 1).unwrap(), cfg, stats).unwrap();
    let idx: Vec<usize> = (0..64).collect();
    let (x, labels) = data.batch::<f32>(&idx, &stats, |b| b.to_vec());
    let losses: Vec<f64> = (0..=20).map(|_| trainer.train_step(&x, &labels, 0.05).unwrap().loss).collect();
    assert!(losses[20] < losses[0], "{losses:?}");
}

fn short_run(dir: Option<&std::path::Path>, train: &Dataset, test: &Dataset, epochs: usize) -> Trainer<f32> {
    let mut cfg = TrainConfig::constant(0.05);
    cfg.batch_size = 32;
    cfg.total_epochs = epochs;
    cfg.seed = 5;
    let mut t = Trainer::new(build_model::<f32>(&tiny(), 5).unwrap(), cfg, train.channel_stats()).unwrap();
    t.run(train, Some(test), dir).unwrap();
    t
}

#[test]
fn identical_seeds_give_identical_epochs() {
    let (_dir, train, test) = fixture(20, 6);
    let mut cfg = TrainConfig::constant(0.05);
    cfg.batch_size = 16;
    cfg.seed = 9;
    let run = || {
        let mut t = Trainer::new(build_model::<f32>(&tiny(), 9).unwrap(), cfg.clone(), train.channel_stats()).unwrap();
        let mut m = t.train_epoch(&train).unwrap();
        m.test_acc = Some(evaluate(&mut t.model, &test, &t.stats, 64).unwrap());
        (m, t.checkpoint_bytes())
    };
    let ((a, ca), (b, cb)) = (run(), run());
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert_eq!(a, b);
    assert_eq!(ca, cb);
}

#[test]
fn resumed_run_continues_exactly() {
    let (_dir, train, test) = fixture(20, 7);
    let full_dir = tempfile::tempdir().unwrap();
    let full = short_run(Some(full_dir.path()), &train, &test, 3);

    // Stop after two epochs, then resume from the checkpoint on disk.
    let part_dir = tempfile::tempdir().unwrap();
    short_run(Some(part_dir.path()), &train, &test, 2);
    let mut cfg = full.cfg.clone();
    cfg.total_epochs = 3;
    let mut resumed = Trainer::<f32>::load_checkpoint(&tiny(), cfg, &part_dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(resumed.epoch, 2);
    resumed.run(&train, Some(&test), Some(part_dir.path())).unwrap();

    assert_eq!(resumed.checkpoint_bytes(), full.checkpoint_bytes());
    let a = std::fs::read_to_string(full_dir.path().join(METRICS_FILE)).unwrap();
    let b = std::fs::read_to_string(part_dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 4);
}

#[test]
fn evaluation_survives_a_checkpoint_round_trip() {
    let (_dir, train, test) = fixture(20, 8);
    let mut t = short_run(None, &train, &test, 1);
    let acc = evaluate(&mut t.model, &test, &t.stats, 7).unwrap();
    let (mut model, stats) = seesaw::train::model_from_checkpoint::<f32>(&tiny(), &t.checkpoint_bytes()).unwrap();
    assert_eq!(stats, t.stats);
    assert_eq!(evaluate(&mut model, &test, &stats, 64).unwrap(), acc);
    let mut wrong = tiny();
    wrong.arch = BlockKind::Igcv3;
    wrong.stages.iter_mut().for_each(|s| s.kind = BlockKind::Igcv3);
    assert!(seesaw::train::model_from_checkpoint::<f32>(&wrong, &t.checkpoint_bytes()).is_err());
}

#[test]
fn fresh_model_scores_near_chance() {
    let (_dir, _, test) = fixture(1000, 10);
    let spec = tiny();
    let mut model: Model<f32> = build_model(&spec, 11).unwrap();
    let stats = test.channel_stats();
    // Warm the running statistics so inference sees normalized activations.
    let idx: Vec<usize> = (0..256).collect();
    let (x, _) = test.batch::<f32>(&idx, &stats, |b| b.to_vec());
    for _ in 0..10 {
        model.forward(&x, BnMode::Train).unwrap();
    }
    let acc = evaluate(&mut model, &test, &stats, 250).unwrap();
    assert!((acc - 0.1).abs() <= 0.05, "{acc}");
}

#[test]
fn fixture_records_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    write_cifar10_fixture(dir.path(), 5, 12);
    let bytes = std::fs::read(dir.path().join("data_batch_1.bin")).unwrap();
    let d = parse_cifar(&bytes, CifarKind::Cifar10).unwrap();
    assert_eq!(d.len(), 5);
    assert_eq!(d.labels[0], bytes[0] as usize);
    assert_eq!(d.image(0), &bytes[1..3073]);
    let all = load_cifar(dir.path(), Split::Train, CifarKind::Cifar10).unwrap();
    assert_eq!(all.len(), 25);
    assert!(parse_cifar(&bytes[..3000], CifarKind::Cifar10).is_err());
    let mut bad = bytes.clone();
    bad[0] = 10;
    assert!(parse_cifar(&bad, CifarKind::Cifar10).is_err());
    assert!(load_cifar(&dir.path().join("missing"), Split::Test, CifarKind::Cifar10).is_err());
}

#[test]
fn augmentation_keeps_shape_and_label() {
    let mut r = rng(13);
    for label in 0..10u8 {
        let img = synthetic_image(label, &mut r);
        for (dy, dx, flip) in [(0, 0, false), (8, 8, true), (4, 4, false), (3, 6, true)] {
            let out = augment_with(&img, 32, dy, dx, flip);
            assert_eq!(out.len(), img.len());
        }
        assert_eq!(augment_with(&img, 32, 4, 4, false), img);
        let twice = augment_with(&augment_with(&img, 32, 4, 4, true), 32, 4, 4, true);
        assert_eq!(twice, img);
    }
    let d = Dataset::new(vec![7; 3072 * 2], vec![3, 9], 10, 32).unwrap();
    let (x, labels) = d.batch::<f32>(&[1, 0], &seesaw::train::ChannelStats::IDENTITY, |b| augment_with(b, 32, 0, 0, false));
    assert_eq!(labels, vec![9, 3]);
    assert_eq!(x.shape(), Shape::new(2, 3, 32, 32));
    // Top-left corner comes from the padding.
    assert_eq!(x.plane(0, 0)[0], 0.0);
    assert_eq!(x.plane(0, 0)[5 * 32 + 5], 7.0);
}
