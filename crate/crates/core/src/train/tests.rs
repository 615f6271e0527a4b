use super::*;
use crate::model::tests::{tiny_config, tiny_spec};
use crate::tensor::Tensor;

fn tiny_train() -> TrainConfig {
    TrainConfig {
        seed: 9,
        epochs: 3,
        scenes: 2,
        warmup_steps: 2,
        peak_lr: 1e-3,
        min_lr: 1e-6,
        model: tiny_config(),
        scene: tiny_spec(),
        ..TrainConfig::default()
    }
}

#[test]
fn default_config_round_trips_through_toml() {
    let mut cfg = TrainConfig::default();
    cfg.model.head.top_k = 300;
    let back: TrainConfig = toml::from_str(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(cfg.model.head.layers, 6);
    assert_eq!(cfg.model.head.queries, 900);
    assert_eq!(cfg.model.head.hidden, 256);
    assert_eq!((cfg.peak_lr, cfg.min_lr, cfg.warmup_steps, cfg.weight_decay), (2e-4, 2e-7, 2000, 1e-2));
    cfg.validate().unwrap();
}

#[test]
fn unknown_keys_are_rejected() {
    let err = TrainConfig::from_toml("epochs = 2\nlearning_rate = 0.1\n").unwrap_err();
    assert!(matches!(err, Error::Input(_)));
    let err = TrainConfig::from_toml("[model.head]\nlayerz = 2\n").unwrap_err();
    assert!(matches!(err, Error::Input(_)));
    assert_eq!(TrainConfig::from_toml("epochs = 30\n").unwrap().epochs, 30);
}

#[test]
fn schedule_length_and_validation() {
    let cfg = TrainConfig {
        scenes: 7,
        batch_size: 2,
        epochs: 1000,
        ..TrainConfig::default()
    };
    assert_eq!(cfg.total_steps(), 4000);
    let short = TrainConfig {
        scenes: 10,
        epochs: 24,
        ..TrainConfig::default()
    };
    assert!(matches!(short.validate(), Err(Error::Contract(_))));
    let mut cams = tiny_train();
    cams.scene.rig.cameras = 2;
    assert!(cams.validate().is_err());
}

#[test]
fn zero_steps_checkpoint_is_the_initialization() {
    let cfg = tiny_train();
    let t = Trainer::new(cfg.clone()).unwrap();
    let init = Detector::new(&cfg.model, cfg.seed).unwrap();
    let ck = t.checkpoint();
    assert_eq!(ck.step, 0);
    let expect: Vec<_> = init.store.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect();
    assert_eq!(ck.params, expect);
}

#[test]
fn one_step_matches_a_replayed_update() {
    let cfg = tiny_train();
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let before = t.detector.store.clone();
    let (grads, _) = t.gradients(t.batch(0)).unwrap();
    let norm = global_norm(&grads);
    let clip = if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
    t.step().unwrap();
    let lr = cfg.peak_lr * 1.0 / 2.0;
    let wd = cfg.weight_decay;
    let mut changed = 0;
    for ((p0, p1), g) in before.iter().zip(t.detector.store.iter()).zip(&grads) {
        for ((&w0, &w1), &gr) in p0.tensor.data().iter().zip(p1.tensor.data()).zip(g.data()) {
            let g = if clip < 1.0 { gr * clip } else { gr };
            // First update: m̂ = g, v̂ = g².
            let m = 0.9 * 0.0 + (1.0 - 0.9) * g;
            let v = 0.999 * 0.0 + (1.0 - 0.999) * g * g;
            let step = (m / (1.0 - 0.9)) / ((v / (1.0 - 0.999)).sqrt() + 1e-8);
            let expect = w0 * (1.0 - lr * wd) - lr * step;
            assert!((w1 - expect).abs() <= 1e-15 * (1.0 + expect.abs()), "{}: {w1} vs {expect}", p0.name);
            changed += usize::from(w1 != w0);
        }
    }
    assert!(changed > 0);
}

#[test]
fn every_step_logs_all_layers() {
    let mut t = Trainer::new(tiny_train()).unwrap();
    let mut logs = Vec::new();
    t.run(|_, l| {
        logs.push(l.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(logs.len(), 6);
    for (i, l) in logs.iter().enumerate() {
        assert_eq!(l.step, i + 1);
        assert_eq!(l.layers.len(), 2);
        assert!(l.loss.is_finite());
        let sum: f64 = l.layers.iter().map(|[c, b]| 2.0 * c + 0.25 * b).sum();
        assert!((sum - l.loss).abs() < 1e-9);
    }
    assert_eq!(logs.last().unwrap().lr, 1e-6);
}

#[test]
fn training_is_deterministic_and_resumable() {
    let cfg = tiny_train();
    let mut a = Trainer::new(cfg.clone()).unwrap();
    let mut b = Trainer::new(cfg.clone()).unwrap();
    for _ in 0..3 {
        assert_eq!(a.step().unwrap(), b.step().unwrap());
    }
    assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes());

    let bytes = a.checkpoint().to_bytes();
    let mut resumed = Trainer::resume(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(resumed.checkpoint().to_bytes(), bytes);
    assert_eq!(resumed.step().unwrap(), a.step().unwrap());
    assert_eq!(resumed.checkpoint().to_bytes(), a.checkpoint().to_bytes());
}

#[test]
fn reloaded_model_reproduces_outputs_bitwise() {
    let mut t = Trainer::new(tiny_train()).unwrap();
    t.step().unwrap();
    let scenes: Vec<Scene> = t.scenes().cloned().collect();
    let before = infer(&t.detector, &scenes).unwrap();
    let ck = Checkpoint::from_bytes(&t.checkpoint().to_bytes()).unwrap();
    let (_, det) = load_model(&ck).unwrap();
    assert_eq!(infer(&det, &scenes).unwrap(), before);
}

#[test]
fn non_finite_parameters_abort_with_the_layer() {
    let mut t = Trainer::new(tiny_train()).unwrap();
    let id = t.detector.head.blocks[1].reg.out.bias;
    t.detector.store.tensor_mut(id).data_mut()[0] = f64::NAN;
    let err = t.step().unwrap_err();
    assert!(matches!(&err, Error::Numeric(m) if m.contains("layer 1 box")), "{err}");
    assert_eq!(err.exit_code(), crate::error::ExitCode::NumericFailure);
}

#[test]
fn infer_edge_cases() {
    let cfg = tiny_train();
    let det = Detector::new(&cfg.model, 1).unwrap();
    assert!(infer(&det, &[]).unwrap().is_empty());
    let scenes = cfg.training_scenes().unwrap();
    let a = infer(&det, &scenes).unwrap();
    assert_eq!(a, infer(&det, &scenes).unwrap());
    assert_eq!(a.len(), 2 * cfg.model.head.top_k);
    let mut all = cfg.model.clone();
    all.head.top_k = all.head.queries;
    let det = Detector::from_tensors(&all, det.store.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect()).unwrap();
    assert_eq!(infer(&det, &scenes[..1]).unwrap().len(), all.head.queries);
}

#[test]
fn mismatched_config_is_refused_with_a_diff() {
    let a = tiny_config();
    let mut b = a.clone();
    b.head.hidden = 16;
    let err = check_model_config(&a, &b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("- hidden = 8") && msg.contains("+ hidden = 16"), "{msg}");
    assert_eq!(err.exit_code(), crate::error::ExitCode::ContractViolation);
    check_model_config(&a, &a.clone()).unwrap();
}

#[test]
fn zero_scalar_helpers() {
    assert_eq!(global_norm(&[Tensor::zeros(&[3])]), 0.0);
}
