use jezsl_core::pipeline::init_heads;
use jezsl_core::synth::{generate, SynthConfig};
use jezsl_core::train::{sgd_step, train_from, train_joint, TrainConfig, TrainData, TrainerState};
use jezsl_core::{EmbeddingHead, Error, LossConfig, Matrix};

struct Fixture {
    visual: Matrix,
    sentences: Matrix,
    groups: Vec<u32>,
    head_v: EmbeddingHead,
    head_s: EmbeddingHead,
}

fn separable(seed: u64) -> Fixture {
    let ds = generate(&SynthConfig::separable(seed)).unwrap().dataset;
    let (head_v, head_s) = init_heads(ds.visual.cols(), ds.sentences.cols(), 8, None, seed).unwrap();
    Fixture {
        visual: ds.visual,
        sentences: ds.sentences,
        groups: ds.labels,
        head_v,
        head_s,
    }
}

fn train(f: &Fixture, cfg: &TrainConfig) -> (EmbeddingHead, EmbeddingHead, Vec<f64>) {
    let (v, s, log) = train_joint(
        &f.visual,
        &f.sentences,
        &f.groups,
        f.head_v.clone(),
        f.head_s.clone(),
        &LossConfig::default(),
        cfg,
    )
    .unwrap();
    (v, s, log.mean_loss)
}

#[test]
fn zero_epochs_returns_heads_unchanged() {
    let f = separable(0);
    let (v, s, log) = train(&f, &TrainConfig { epochs: 0, ..Default::default() });
    assert_eq!(v, f.head_v);
    assert_eq!(s, f.head_s);
    assert!(log.is_empty());
}

#[test]
fn zero_learning_rate_only_moves_batchnorm_statistics() {
    let f = separable(1);
    let (v, s, log) = train(&f, &TrainConfig { epochs: 3, learning_rate: 0.0, ..Default::default() });
    assert_eq!(log.len(), 3);
    for (after, before) in [(&v, &f.head_v), (&s, &f.head_s)] {
        assert_eq!(after.params(), before.params());
        assert_ne!(after.bn_running_mean, before.bn_running_mean);
    }
}

#[test]
fn loss_falls_below_a_tenth_of_the_first_epoch() {
    for seed in 0..5 {
        let f = separable(seed);
        let (_, _, log) = train(&f, &TrainConfig { seed, ..Default::default() });
        assert_eq!(log.len(), 50);
        let ratio = log[49] / log[0];
        assert!(ratio <= 0.1, "seed {seed}: ratio {ratio}");
    }
}

#[test]
fn training_is_deterministic() {
    let f = separable(3);
    let cfg = TrainConfig { epochs: 5, seed: 11, ..Default::default() };
    let a = train(&f, &cfg);
    let b = train(&f, &cfg);
    assert_eq!(a.0.to_bytes(), b.0.to_bytes());
    assert_eq!(a.1.to_bytes(), b.1.to_bytes());
    assert_eq!(a.2, b.2);
}

#[test]
fn resuming_from_a_saved_state_is_bit_identical() {
    let f = separable(2);
    let data = TrainData {
        visual: &f.visual,
        sentences: &f.sentences,
        groups: &f.groups,
    };
    let loss = LossConfig::default();
    for balanced_batches in [false, true] {
        let full_cfg = TrainConfig { epochs: 6, seed: 5, balanced_batches, ..Default::default() };
        let start = TrainerState::new(f.head_v.clone(), f.head_s.clone());
        let (full, full_log) = train_from(start.clone(), data, &loss, &full_cfg, |_, _| Ok(())).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.jet");
        let half_cfg = TrainConfig { epochs: 4, ..full_cfg };
        let (mid, first) = train_from(start, data, &loss, &half_cfg, |_, _| Ok(())).unwrap();
        mid.save(&path).unwrap();
        let (resumed, rest) = train_from(TrainerState::load(&path).unwrap(), data, &loss, &full_cfg, |_, _| Ok(())).unwrap();

        assert_eq!(resumed.to_bytes(), full.to_bytes());
        let mut joined = first.mean_loss.clone();
        joined.extend(rest.mean_loss);
        assert_eq!(joined, full_log.mean_loss);
    }
}

#[test]
fn divergence_aborts_with_location() {
    let f = separable(0);
    let err = train_joint(
        &f.visual,
        &f.sentences,
        &f.groups,
        f.head_v.clone(),
        f.head_s.clone(),
        &LossConfig::default(),
        &TrainConfig { epochs: 3, learning_rate: 1e306, ..Default::default() },
    )
    .unwrap_err();
    match err {
        Error::NonFinite { context } => assert!(context.contains("epoch"), "{context}"),
        other => panic!("expected a non-finite abort, got {other}"),
    }
}

#[test]
fn shape_mismatch_is_reported() {
    let f = separable(0);
    let short: Vec<u32> = f.groups[1..].to_vec();
    let r = train_joint(
        &f.visual,
        &f.sentences,
        &short,
        f.head_v.clone(),
        f.head_s.clone(),
        &LossConfig::default(),
        &TrainConfig::default(),
    );
    assert!(matches!(r, Err(Error::DimensionMismatch { .. })));
}

#[test]
fn momentum_recurrence_over_two_steps() {
    let (lr, mu) = (0.1, 0.9);
    let (g1, g2) = ([0.5, -1.0], [0.25, 2.0]);
    let mut p = vec![1.0, 2.0];
    let mut v = vec![0.0, 0.0];
    sgd_step(&mut p, &g1, &mut v, lr, mu).unwrap();
    sgd_step(&mut p, &g2, &mut v, lr, mu).unwrap();
    for i in 0..2 {
        let v1 = -lr * g1[i];
        let v2 = mu * v1 - lr * g2[i];
        let expected = [1.0, 2.0][i] + v1 + v2;
        assert!((p[i] - expected).abs() <= 1e-12);
        assert!((v[i] - v2).abs() <= 1e-12);
    }
}
