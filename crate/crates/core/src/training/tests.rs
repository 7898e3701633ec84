use super::*;
use crate::backends::{toy_lm, LanguageModel, ToyLm};
use ndarray::Array2;
use proptest::prelude::*;

fn example(seed: u64, width: usize) -> PreparedUtterance {
    let mut r = SeededRng::new(seed);
    PreparedUtterance {
        id: format!("x{seed}"),
        stacked: Array2::from_shape_simple_fn((3, width), || r.normal()),
        prompt_ids: vec![3, 4, 5],
        transcript_ids: Some(vec![6, 7, 8, 9]),
    }
}

fn lm() -> ToyLm {
    toy_lm(40, 12, 2, 0).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Up to `n` evenly spread indices whose gradient is large enough for a
/// central difference to resolve to 1e-4.
fn informative(grad: &[f64], n: usize) -> Vec<usize> {
    let live: Vec<usize> = (0..grad.len()).filter(|&i| grad[i].abs() > 1e-5).collect();
    let stride = (live.len() / n).max(1);
    live.into_iter().step_by(stride).take(n).collect()
}

fn cfg(warmup: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        lr_max: lr,
        warmup_steps: warmup,
        ..TrainConfig::default()
    }
}

#[test]
fn lr_examples() {
    let c = TrainConfig::default();
    assert_eq!(lr_at(0, &c), 0.0);
    assert!((lr_at(500, &c) - 5.0e-5).abs() < 1e-18);
    assert_eq!(lr_at(1000, &c), 1e-4);
    assert_eq!(lr_at(50_000, &c), 1e-4);
    assert_eq!(lr_at(0, &cfg(0, 3e-4)), 3e-4);
}

proptest! {
    #[test]
    fn lr_is_monotone_and_flat_after_warmup(warmup in 1usize..3000, lr in 1e-6f64..1e-2, a in 0usize..6000, b in 0usize..6000) {
        let c = cfg(warmup, lr);
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(lr_at(lo, &c) <= lr_at(hi, &c));
        if lo >= warmup {
            prop_assert_eq!(lr_at(lo, &c), lr);
        }
        // Continuity at the boundary: one step short is within one increment.
        prop_assert!(lr - lr_at(warmup - 1, &c) <= lr / warmup as f64 * (1.0 + 1e-9));
    }
}

#[test]
fn projector_gradient_matches_finite_differences() {
    let lm = lm();
    let p = Projector::init(4, 2, 6, lm.d_model(), 5).unwrap();
    let ex = example(1, 8);
    let g = item_grads(&lm, &p, None, None, &ex, 1.0).unwrap();
    let loss = |q: &Projector| item_grads(&lm, q, None, None, &ex, 1.0).unwrap().nll;
    let eps = 1e-5;
    let mut checked = 0;
    for (t, grad) in g.projector.tensors().into_iter().enumerate() {
        for idx in informative(grad, 8) {
            let mut hi = p.clone();
            hi.tensors_mut()[t][idx] += eps;
            let mut lo = p.clone();
            lo.tensors_mut()[t][idx] -= eps;
            let fd = (loss(&hi) - loss(&lo)) / (2.0 * eps);
            assert!(
                rel_err(fd, grad[idx]) < 1e-4,
                "tensor {t}[{idx}]: fd {fd} vs {}",
                grad[idx]
            );
            checked += 1;
        }
    }
    assert!(checked >= 20, "only {checked} parameters checked");
}

#[test]
fn lora_gradient_matches_finite_differences() {
    let lm = lm();
    let geometry = lm.attention_geometry().unwrap();
    let mut lora = LoraAdapters::init(&geometry, &LoraConfig::default(), 2).unwrap();
    // B starts at zero, which would hide A's gradient.
    let mut r = SeededRng::new(9);
    for t in lora.tensors_mut() {
        t.iter_mut().for_each(|v| *v += 0.05 * r.normal());
    }
    let p = Projector::init(4, 2, 6, lm.d_model(), 5).unwrap();
    let ex = example(3, 8);
    let g = item_grads(&lm, &p, Some(&lora), None, &ex, 1.0).unwrap();
    let lg = g.lora.unwrap();
    let loss = |l: &LoraAdapters| item_grads(&lm, &p, Some(l), None, &ex, 1.0).unwrap().nll;
    let eps = 1e-5;
    let mut checked = 0;
    for (t, grad) in lg.tensors().into_iter().enumerate() {
        for idx in informative(grad, 3) {
            let mut hi = lora.clone();
            hi.tensors_mut()[t][idx] += eps;
            let mut lo = lora.clone();
            lo.tensors_mut()[t][idx] -= eps;
            let fd = (loss(&hi) - loss(&lo)) / (2.0 * eps);
            assert!(
                rel_err(fd, grad[idx]) < 1e-4,
                "adapter tensor {t}[{idx}]: fd {fd} vs {}",
                grad[idx]
            );
            checked += 1;
        }
    }
    assert!(checked >= 20, "only {checked} adapter parameters checked");
}

#[test]
fn item_loss_is_mean_consistent_with_dataset_loss() {
    let lm = lm();
    let p = Projector::init(4, 2, 6, lm.d_model(), 5).unwrap();
    let exs = [example(1, 8), example(2, 8)];
    let total: f64 = exs
        .iter()
        .map(|e| item_grads(&lm, &p, None, None, e, 1.0).unwrap().nll)
        .sum();
    let n: usize = exs.iter().map(supervised_count).sum();
    let mean = dataset_loss(&lm, &p, None, &exs).unwrap();
    assert!((mean - total / n as f64).abs() < 1e-12);
}

#[test]
fn zero_steps_returns_the_starting_weights() {
    let lm = lm();
    let mut p = Projector::init(4, 2, 6, lm.d_model(), 5).unwrap();
    p.round_to_f32();
    let exs = [example(1, 8)];
    let c = TrainConfig {
        max_steps: 0,
        warmup_steps: 0,
        ..TrainConfig::default()
    };
    let out = train_prepared(p.clone(), None, &lm, &exs, &exs, &c).unwrap();
    assert_eq!(out.steps_run, 0);
    assert_eq!(out.projector, p);
    assert_eq!(out.history.val().count(), 1);
}

#[test]
fn non_finite_loss_reports_step_and_batch() {
    let lm = lm();
    let mut p = Projector::init(4, 2, 6, lm.d_model(), 5).unwrap();
    p.b2.fill(f64::NAN);
    let exs = [example(1, 8)];
    // Validation at step 0 already sees the NaN; training must refuse too.
    let c = TrainConfig {
        max_steps: 1,
        warmup_steps: 0,
        ..TrainConfig::default()
    };
    let err = train_prepared(p, None, &lm, &exs, &exs, &c).unwrap_err();
    assert!(
        matches!(err, Error::NonFiniteLoss { step: 0, ref batch_ids } if batch_ids == &vec!["x1".to_string()]),
        "{err:?}"
    );
}
