//! Adaptation losses.
//!
//! Consistency pulls the masked-view prediction toward the full-view
//! prediction; reconstruction pulls decoded masked-token features toward
//! their targets; the joint objective is their weighted sum. An entropy
//! loss drives the LayerNorm-only baseline. All losses are built from
//! graph ops so gradients come from the tape.

use crate::error::{Error, Result};
use crate::tensor::Graph;
use crate::Tensor;

/// Additive clamp inside every log so vertex predictions stay finite.
pub const LOG_EPS: f64 = 1e-12;
/// Default weight of the reconstruction term in the joint objective.
pub const DEFAULT_LAMBDA: f64 = 0.5;
/// The full-view probabilities are treated as a fixed soft target unless
/// a caller explicitly opts into letting gradient flow through them.
pub const DEFAULT_STOP_TARGET_GRAD: bool = true;

/// Scalar view of one adaptation step's losses, for traces and reports.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub l_con: f64,
    pub l_rec: f64,
    pub l_total: f64,
    pub lambda: f64,
    /// True when no tokens were masked, so `l_rec` is a hard zero.
    pub rec_degenerate: bool,
}

fn check_probabilities(op: &'static str, t: &Tensor) -> Result<()> {
    let s = t.shape();
    if s.len() != 2 || s[0] == 0 || s[1] < 2 {
        return Err(Error::BadShape {
            op,
            expected: "[B >= 1, C >= 2] probabilities".into(),
            shape: s.to_vec(),
        });
    }
    let c = s[1];
    for (row, chunk) in t.data().chunks(c).enumerate() {
        if chunk.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidArg {
                op,
                msg: format!("row {row} has a negative probability"),
            });
        }
        let sum: f64 = chunk.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArg {
                op,
                msg: format!("row {row} sums to {sum}, not 1"),
            });
        }
    }
    Ok(())
}

/// Mean over images of `-(1/C) * sum_c y(c) * log(yhat(c) + eps)`.
/// `y` comes from the full view, `yhat` from the masked view; by default
/// `y` is detached so only the masked branch is trained.
pub fn consistency_loss(
    g: &mut Graph,
    y: &Tensor,
    yhat: &Tensor,
    stop_target_grad: bool,
) -> Result<Tensor> {
    check_probabilities("consistency_loss", y)?;
    check_probabilities("consistency_loss", yhat)?;
    if y.shape() != yhat.shape() {
        return Err(Error::ShapeMismatch {
            op: "consistency_loss",
            lhs: y.shape().to_vec(),
            rhs: yhat.shape().to_vec(),
        });
    }
    let target = if stop_target_grad { g.detach(y) } else { y.clone() };
    let shifted = g.add_scalar(yhat, LOG_EPS)?;
    let logp = g.log(&shifted)?;
    let weighted = g.mul(&target, &logp)?;
    let mean = g.mean_all(&weighted)?;
    g.scale(&mean, -1.0)
}

/// Mean squared difference over every masked token and target channel.
/// With no masked tokens (`M == 0`) there is nothing to reconstruct: the
/// loss is a constant zero and the degenerate flag is raised.
pub fn reconstruction_loss(
    g: &mut Graph,
    prediction: &Tensor,
    target: &Tensor,
) -> Result<(Tensor, bool)> {
    let (ps, ts) = (prediction.shape(), target.shape());
    if ps.len() != 2 || ts.len() != 2 || ps != ts {
        return Err(Error::ShapeMismatch {
            op: "reconstruction_loss",
            lhs: ps.to_vec(),
            rhs: ts.to_vec(),
        });
    }
    if ps[0] == 0 {
        return Ok((Tensor::scalar(0.0), true));
    }
    let fixed = g.detach(target);
    let diff = g.sub(prediction, &fixed)?;
    let sq = g.square(&diff)?;
    Ok((g.mean_all(&sq)?, false))
}

/// `l_con + lambda * l_rec`.
pub fn total_loss(g: &mut Graph, l_con: &Tensor, l_rec: &Tensor, lambda: f64) -> Result<Tensor> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidArg {
            op: "total_loss",
            msg: format!("lambda {lambda} must be finite and >= 0"),
        });
    }
    let scaled = g.scale(l_rec, lambda)?;
    g.add(l_con, &scaled)
}

/// Mean over images of `-sum_c p(c) * log(p(c) + eps)`.
pub fn entropy_loss(g: &mut Graph, probs: &Tensor) -> Result<Tensor> {
    check_probabilities("entropy_loss", probs)?;
    let c = probs.shape()[1] as f64;
    let shifted = g.add_scalar(probs, LOG_EPS)?;
    let logp = g.log(&shifted)?;
    let weighted = g.mul(probs, &logp)?;
    let mean = g.mean_all(&weighted)?;
    g.scale(&mean, -c)
}

/// Label cross-entropy over logits, for pretraining: softmax, then mean
/// over images of `-log(p(label) + eps)`.
pub fn cross_entropy(g: &mut Graph, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 || s[0] == 0 || s[1] < 2 {
        return Err(Error::BadShape {
            op: "cross_entropy",
            expected: "[B >= 1, C >= 2] logits".into(),
            shape: s.to_vec(),
        });
    }
    let (b, c) = (s[0], s[1]);
    if labels.len() != b {
        return Err(Error::InvalidArg {
            op: "cross_entropy",
            msg: format!("{} labels for a batch of {b}", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArg {
            op: "cross_entropy",
            msg: format!("label {bad} out of range for {c} classes"),
        });
    }
    let onehot = Tensor::from_fn(&[b, c], |i| {
        if i % c == labels[i / c] { 1.0 } else { 0.0 }
    });
    let probs = g.softmax(logits)?;
    let shifted = g.add_scalar(&probs, LOG_EPS)?;
    let logp = g.log(&shifted)?;
    let picked = g.mul(&logp, &onehot)?;
    let mean = g.mean_all(&picked)?;
    g.scale(&mean, -(c as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(data: &[&[f64]]) -> Tensor {
        let c = data[0].len();
        let flat: Vec<f64> = data.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![data.len(), c], flat).unwrap()
    }

    #[test]
    fn rejects_non_probability_rows() {
        let mut g = Graph::inference();
        let good = rows(&[&[0.25, 0.75]]);
        let negative = Tensor::new(vec![1, 2], vec![-0.1, 1.1]).unwrap();
        let off_sum = Tensor::new(vec![1, 2], vec![0.6, 0.6]).unwrap();
        assert!(consistency_loss(&mut g, &negative, &good, true).is_err());
        assert!(consistency_loss(&mut g, &good, &off_sum, true).is_err());
        assert!(entropy_loss(&mut g, &off_sum).is_err());
    }

    #[test]
    fn consistency_of_identical_inputs_is_scaled_self_entropy() {
        let mut g = Graph::inference();
        let p = rows(&[&[0.7, 0.2, 0.1]]);
        let con = consistency_loss(&mut g, &p, &p, true).unwrap().item().unwrap();
        let ent = entropy_loss(&mut g, &p).unwrap().item().unwrap();
        assert!((con - ent / 3.0).abs() < 1e-15);
    }

    #[test]
    fn batch_mean_averages_per_image_losses() {
        let mut g = Graph::inference();
        let a = rows(&[&[0.7, 0.3]]);
        let b = rows(&[&[0.2, 0.8]]);
        let both = rows(&[&[0.7, 0.3], &[0.2, 0.8]]);
        let la = consistency_loss(&mut g, &a, &a, true).unwrap().item().unwrap();
        let lb = consistency_loss(&mut g, &b, &b, true).unwrap().item().unwrap();
        let lab = consistency_loss(&mut g, &both, &both, true).unwrap().item().unwrap();
        assert!((lab - 0.5 * (la + lb)).abs() < 1e-12);
    }

    #[test]
    fn stop_gradient_switch_controls_target_flow() {
        for (stop, expect_grad) in [(true, false), (false, true)] {
            let mut g = Graph::recording();
            let raw = Tensor::new(vec![1, 3], vec![0.2, 0.5, 0.3]).unwrap();
            // run the target through a graph op so it has a producer
            let y = g.add_scalar(&raw, 0.0).unwrap();
            let yhat = rows(&[&[0.3, 0.4, 0.3]]);
            let yhat = g.add_scalar(&yhat, 0.0).unwrap();
            let loss = consistency_loss(&mut g, &y, &yhat, stop).unwrap();
            g.backward(&loss).unwrap();
            // a detached target never receives gradient, so grad_of is None
            let has = g
                .grad_of(&y)
                .is_some_and(|t| t.data().iter().any(|&v| v != 0.0));
            assert_eq!(has, expect_grad, "stop={stop}");
            let masked_grad = g.grad_of(&yhat).unwrap();
            assert!(masked_grad.data().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn reconstruction_degenerate_when_nothing_masked() {
        let mut g = Graph::recording();
        let empty = Tensor::zeros(&[0, 27]);
        let (loss, degenerate) = reconstruction_loss(&mut g, &empty, &empty).unwrap();
        assert!(degenerate);
        assert_eq!(loss.item().unwrap(), 0.0);
    }

    #[test]
    fn reconstruction_rejects_shape_mismatch() {
        let mut g = Graph::inference();
        let a = Tensor::zeros(&[4, 27]);
        let b = Tensor::zeros(&[4, 26]);
        assert!(reconstruction_loss(&mut g, &a, &b).is_err());
    }

    #[test]
    fn reconstruction_target_gets_no_gradient() {
        let mut g = Graph::recording();
        let pred = g.add_scalar(&Tensor::full(&[2, 3], 0.4), 0.0).unwrap();
        let target = g.add_scalar(&Tensor::full(&[2, 3], 0.9), 0.0).unwrap();
        let (loss, degenerate) = reconstruction_loss(&mut g, &pred, &target).unwrap();
        assert!(!degenerate);
        g.backward(&loss).unwrap();
        let target_touched = g
            .grad_of(&target)
            .is_some_and(|t| t.data().iter().any(|&v| v != 0.0));
        assert!(!target_touched);
        assert!(g.grad_of(&pred).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn total_is_exactly_the_weighted_sum() {
        let mut g = Graph::inference();
        for (lc, lr, lam) in [(0.4, 0.2, 0.5), (1.3, 0.7, 0.0), (0.05, 2.5, 1.75)] {
            let a = Tensor::scalar(lc);
            let b = Tensor::scalar(lr);
            let total = total_loss(&mut g, &a, &b, lam).unwrap().item().unwrap();
            assert_eq!(total, lc + lam * lr);
        }
        assert!(total_loss(&mut g, &Tensor::scalar(0.1), &Tensor::scalar(0.1), -0.5).is_err());
    }

    #[test]
    fn cross_entropy_prefers_the_right_label() {
        let mut g = Graph::inference();
        let logits = rows(&[&[4.0, 0.0, 0.0, 0.0]]);
        let right = cross_entropy(&mut g, &logits, &[0]).unwrap().item().unwrap();
        let wrong = cross_entropy(&mut g, &logits, &[2]).unwrap().item().unwrap();
        assert!(right < wrong);
        assert!(cross_entropy(&mut g, &logits, &[4]).is_err());
        assert!(cross_entropy(&mut g, &logits, &[0, 1]).is_err());
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_c() {
        let mut g = Graph::inference();
        let logits = Tensor::zeros(&[3, 4]);
        let loss = cross_entropy(&mut g, &logits, &[0, 1, 3]).unwrap().item().unwrap();
        assert!((loss - (4.0f64).ln()).abs() < 1e-9);
    }
}
