//! Supervised source training and clean-set evaluation.

use crate::error::{Error, Result};
use crate::objective::cross_entropy;
use crate::rng::StreamRng;
use crate::tensor::{AdamState, Graph};
use crate::vit::{DropoutMode, Vit};
use crate::Tensor;

pub const PRETRAIN_BATCH: usize = 16;

/// Optimizer steps spent ramping the learning rate up from zero. Short
/// transformers spend their first ~100 steps breaking attention symmetry;
/// ramping avoids overshooting during that phase.
pub const WARMUP_STEPS: usize = 75;

/// Fraction of the peak learning rate still applied by the final step.
const LR_FLOOR: f64 = 0.1;

/// Warmup-then-cosine learning-rate schedule. `step` counts completed
/// optimizer steps; `total` is the run-length in steps; `peak` is the
/// configured learning rate.
pub fn lr_at(step: usize, total: usize, peak: f64) -> f64 {
    if step < WARMUP_STEPS && total > WARMUP_STEPS {
        return peak * (step + 1) as f64 / WARMUP_STEPS as f64;
    }
    let span = total.saturating_sub(WARMUP_STEPS).max(1) as f64;
    let p = (step.saturating_sub(WARMUP_STEPS) as f64 / span).min(1.0);
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
    peak * (LR_FLOOR + (1.0 - LR_FLOOR) * cos)
}

/// Stacks `[3,S,S]` images into one `[B,3,S,S]` batch tensor.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::InvalidArg {
            op: "stack_images",
            msg: "empty batch".into(),
        });
    }
    let shape = images[0].shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].len());
    for img in images {
        if img.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "stack_images",
                lhs: shape,
                rhs: img.shape().to_vec(),
            });
        }
        data.extend_from_slice(img.data());
    }
    let mut batched = vec![images.len()];
    batched.extend_from_slice(&shape);
    Tensor::new(batched, data)
}

/// Argmax prediction for each image in a labeled set; returns accuracy.
pub fn evaluate_accuracy(model: &Vit, set: &[(Tensor, usize)]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::InvalidArg {
            op: "evaluate_accuracy",
            msg: "empty evaluation set".into(),
        });
    }
    let mut hits = 0usize;
    for chunk in set.chunks(PRETRAIN_BATCH) {
        let refs: Vec<&Tensor> = chunk.iter().map(|(img, _)| img).collect();
        let batch = stack_images(&refs)?;
        let mut g = Graph::inference();
        let tokens = model.embed(&mut g, &batch)?;
        let out = model.forward(&mut g, &tokens, DropoutMode::Off)?;
        let c = out.logits.shape()[1];
        for (row, (_, label)) in chunk.iter().enumerate() {
            let logits = &out.logits.data()[row * c..(row + 1) * c];
            let pred = argmax(logits);
            if pred == *label {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / set.len() as f64)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Minibatch cross-entropy training with Adam over all parameters under a
/// warmup-then-cosine learning-rate schedule peaking at `lr`.
/// Epoch order is reshuffled from the seed; a non-finite loss aborts with
/// the failing epoch and batch. Returns clean accuracy on `holdout`.
pub fn pretrain(
    model: &mut Vit,
    train: &[(Tensor, usize)],
    holdout: &[(Tensor, usize)],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::InvalidArg {
            op: "pretrain",
            msg: "empty training set".into(),
        });
    }
    let mut adam = AdamState::new(model.params());
    let total_steps = epochs * train.len().div_ceil(PRETRAIN_BATCH);
    let mut step = 0usize;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        StreamRng::new(seed, "pretrain-shuffle", epoch as u64).shuffle(&mut order);
        for (batch_idx, chunk) in order.chunks(PRETRAIN_BATCH).enumerate() {
            let refs: Vec<&Tensor> = chunk.iter().map(|&i| &train[i].0).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].1).collect();
            let batch = stack_images(&refs)?;
            let diverged = |_| Error::PretrainDiverged {
                epoch,
                batch: batch_idx,
            };
            let mut g = Graph::recording();
            let tokens = model.embed(&mut g, &batch).map_err(diverged)?;
            let out = model
                .forward(&mut g, &tokens, DropoutMode::Off)
                .map_err(diverged)?;
            let loss = cross_entropy(&mut g, &out.logits, &labels).map_err(diverged)?;
            g.backward(&loss).map_err(diverged)?;
            let grads = g.grads_for(model.params());
            adam.step(model.params_mut(), &grads, lr_at(step, total_steps, lr))?;
            step += 1;
        }
    }
    evaluate_accuracy(model, holdout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{gen_source, ToySpec};
    use crate::rng::derive_seed;
    use crate::vit::VitConfig;

    fn tiny_sets(seed: u64, n_train: usize, n_holdout: usize) -> (Vec<(Tensor, usize)>, Vec<(Tensor, usize)>) {
        let spec = ToySpec::default();
        let train = gen_source(&spec, n_train, derive_seed(seed, "train", 0)).unwrap();
        let holdout = gen_source(&spec, n_holdout, derive_seed(seed, "holdout", 0)).unwrap();
        (train, holdout)
    }

    #[test]
    fn zero_epochs_leave_the_model_unchanged_at_chance() {
        let (train, holdout) = tiny_sets(0, 16, 80);
        let mut model = Vit::new(VitConfig::default(), 1).unwrap();
        let before: Vec<Tensor> = model.params().iter().map(|p| p.value().clone()).collect();
        let acc = pretrain(&mut model, &train, &holdout, 0, 1e-3, 0).unwrap();
        for (p, b) in model.params().iter().zip(&before) {
            assert!(p.value() == b);
        }
        assert!(
            (acc - 0.25).abs() <= 0.15,
            "untrained accuracy {acc} should sit near chance"
        );
    }

    #[test]
    fn short_training_is_deterministic_and_improves_loss_direction() {
        let (train, holdout) = tiny_sets(1, 32, 16);
        let run = || {
            let mut model = Vit::new(VitConfig::default(), 2).unwrap();
            let acc = pretrain(&mut model, &train, &holdout, 2, 1e-3, 7).unwrap();
            (model, acc)
        };
        let (ma, acca) = run();
        let (mb, accb) = run();
        assert_eq!(acca, accb);
        for (pa, pb) in ma.params().iter().zip(mb.params().iter()) {
            assert!(pa.value() == pb.value(), "{} drifted", pa.name());
        }
        // weights must actually move
        let fresh = Vit::new(VitConfig::default(), 2).unwrap();
        let moved = ma
            .params()
            .iter()
            .zip(fresh.params().iter())
            .any(|(a, b)| a.value() != b.value());
        assert!(moved);
    }

    #[test]
    fn stacking_checks_shapes() {
        let a = Tensor::zeros(&[3, 8, 8]);
        let b = Tensor::zeros(&[3, 4, 4]);
        assert!(stack_images(&[&a, &b]).is_err());
        assert!(stack_images(&[]).is_err());
        assert_eq!(stack_images(&[&a, &a]).unwrap().shape(), &[2, 3, 8, 8]);
    }

    #[test]
    fn argmax_breaks_ties_toward_first() {
        assert_eq!(argmax(&[0.2, 0.9, 0.9]), 1);
        assert_eq!(argmax(&[1.0]), 0);
    }

    #[test]
    fn learning_rate_ramps_up_then_decays_to_the_floor() {
        let total = 600;
        let peak = 3e-3;
        assert!(lr_at(0, total, peak) > 0.0);
        for s in 1..WARMUP_STEPS {
            assert!(lr_at(s, total, peak) > lr_at(s - 1, total, peak));
        }
        let at_peak = lr_at(WARMUP_STEPS, total, peak);
        assert!((at_peak - peak).abs() < 1e-12);
        for s in WARMUP_STEPS + 1..total {
            assert!(lr_at(s, total, peak) <= lr_at(s - 1, total, peak));
        }
        let last = lr_at(total - 1, total, peak);
        assert!(last >= 0.1 * peak - 1e-12 && last < 0.15 * peak);
        // runs shorter than the warmup never exceed the peak
        for s in 0..40 {
            assert!(lr_at(s, 40, peak) <= peak + 1e-12);
        }
    }
}
