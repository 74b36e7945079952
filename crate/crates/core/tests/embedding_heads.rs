use jezsl_core::{EmbeddingHead, HeadConfig, Matrix, Mode, Rng};
use proptest::prelude::*;

fn objective(head: &EmbeddingHead, x: &Matrix, r: &Matrix) -> f64 {
    let (e, _) = head.clone().forward_train(x).unwrap();
    e.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn random_head(rng: &mut Rng, d_in: usize, d_hidden: usize, d_out: usize) -> EmbeddingHead {
    let mut head = EmbeddingHead::new(HeadConfig::new(d_in, d_out).with_hidden(d_hidden), rng).unwrap();
    // Move away from the identity batch-norm so every parameter matters.
    for v in head.bn_gamma.iter_mut().chain(head.bn_beta.iter_mut()).chain(head.b2.iter_mut()) {
        *v += 0.5 * rng.normal();
    }
    head
}

#[test]
fn parameter_gradients_match_central_differences() {
    let mut rng = Rng::new(31);
    let h = 1e-5;
    let mut configs = 0;
    let mut worst: f64 = 0.0;
    while configs < 24 {
        let (d_in, d_hidden, d_out) = (2 + rng.below(7), 2 + rng.below(7), 2 + rng.below(7));
        let n = 2 + rng.below(4);
        let head = random_head(&mut rng, d_in, d_hidden, d_out);
        let x = rng.normal_matrix(n, d_in, 1.0);
        let r = rng.normal_matrix(n, d_out, 1.0);
        let (_, trace) = head.clone().forward_train(&x).unwrap();
        // Finite differences are meaningless across a ReLU kink.
        if trace.hidden_pre.data().iter().any(|v| v.abs() < 1e-3) {
            continue;
        }
        let (grads, d_input) = head.backward(&trace, &r).unwrap();
        let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
        for (p, slice) in analytic.iter().enumerate() {
            for (idx, &a) in slice.iter().enumerate() {
                let mut plus = head.clone();
                plus.params_mut()[p][idx] += h;
                let mut minus = head.clone();
                minus.params_mut()[p][idx] -= h;
                let numeric = (objective(&plus, &x, &r) - objective(&minus, &x, &r)) / (2.0 * h);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
                worst = worst.max(rel);
            }
        }
        for i in 0..n {
            for c in 0..d_in {
                let mut xp = x.clone();
                xp.set(i, c, x.get(i, c) + h);
                let mut xm = x.clone();
                xm.set(i, c, x.get(i, c) - h);
                let numeric = (objective(&head, &xp, &r) - objective(&head, &xm, &r)) / (2.0 * h);
                let a = d_input.get(i, c);
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5));
            }
        }
        configs += 1;
    }
    assert!(worst <= 1e-4, "worst relative error {worst:e}");
}

#[test]
fn running_stats_follow_the_momentum_rule_exactly() {
    let mut rng = Rng::new(4);
    let mut head = random_head(&mut rng, 5, 4, 3);
    head.bn_running_mean = vec![0.3, -0.2, 1.0];
    let old_mean = head.bn_running_mean.clone();
    let old_var = head.bn_running_var.clone();
    let x = rng.normal_matrix(6, 5, 1.0);
    let (_, trace) = head.forward_train(&x).unwrap();
    let n = 6.0;
    for c in 0..3 {
        let mom = head.bn_momentum;
        assert_eq!(head.bn_running_mean[c], (1.0 - mom) * old_mean[c] + mom * trace.batch_mean[c]);
        let unbiased = trace.batch_var[c] * n / (n - 1.0);
        assert_eq!(head.bn_running_var[c], (1.0 - mom) * old_var[c] + mom * unbiased);
    }
}

#[test]
fn eval_forward_is_pure() {
    let mut rng = Rng::new(8);
    let head = random_head(&mut rng, 4, 6, 3);
    let x = rng.normal_matrix(5, 4, 1.0);
    let before = head.clone();
    let (a, _) = head.forward_eval(&x).unwrap();
    let (b, _) = head.forward_eval(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(head, before);
    let mut m = head.clone();
    let (c, _) = m.forward(&x, Mode::Eval).unwrap();
    assert_eq!(a, c);
    assert_eq!(m, before);
}

#[test]
fn checkpoint_layout_and_round_trip() {
    let mut rng = Rng::new(12);
    let head = random_head(&mut rng, 7, 5, 3);
    let bytes = head.to_bytes();
    assert_eq!(&bytes[..4], b"JEH1");
    assert_eq!(bytes[4], 1);
    let dims: Vec<u32> = (0..3)
        .map(|i| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()))
        .collect();
    assert_eq!(dims, vec![7, 5, 3]);
    let n_params = 5 * 7 + 5 + 3 * 5 + 3 * 5;
    assert_eq!(bytes.len(), 4 + 1 + 12 + 16 + 8 * n_params);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.jeh");
    head.save(&path).unwrap();
    let back = EmbeddingHead::load(&path).unwrap();
    assert_eq!(back, head);
    assert_eq!(back.to_bytes(), bytes);
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(EmbeddingHead::load(&path).is_err());
}

#[test]
fn batch_of_one_is_rejected_in_train_mode() {
    let mut rng = Rng::new(2);
    let mut head = random_head(&mut rng, 3, 3, 3);
    assert!(head.forward_train(&rng.normal_matrix(1, 3, 1.0)).is_err());
    assert!(head.forward_eval(&rng.normal_matrix(1, 3, 1.0)).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn outputs_are_unit_norm_in_both_modes(seed in any::<u64>(), n in 2usize..10, d_in in 1usize..9, d_out in 1usize..9) {
        let mut rng = Rng::new(seed);
        let mut head = EmbeddingHead::new(HeadConfig::new(d_in, d_out).with_hidden(16), &mut rng).unwrap();
        let x = rng.normal_matrix(n, d_in, 1.0);
        for mode in [Mode::Train, Mode::Eval] {
            if let Ok((e, _)) = head.forward(&x, mode) {
                for row in e.iter_rows() {
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    prop_assert!((norm - 1.0).abs() <= 1e-9);
                }
            }
        }
    }
}
