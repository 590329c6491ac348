//! The online adaptation loop: predict first, then (maybe) update.

use super::methods::{AdaptMethod, MethodKind};
use super::pretrain::argmax;
use crate::dam::{select_mask, token_uncertainty, MaskPlan, MaskStrategy};
use crate::domains::DomainStream;
use crate::error::{Error, Result};
use crate::hog::target_tokens;
use crate::objective::{
    consistency_loss, entropy_loss, reconstruction_loss, total_loss, LossBreakdown,
};
use crate::rng::derive_seed;
use crate::tensor::{AdamState, Graph};
use crate::vit::{DropoutMode, Vit};
use crate::Tensor;
use std::time::Instant;

/// Everything one online step exposes to the caller. The prediction is
/// computed from the pre-update weights by construction.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub prediction: usize,
    pub probabilities: Vec<f64>,
    pub losses: LossBreakdown,
    /// Mean over tokens and dims of the prediction forward's final
    /// features; the divergence analysis histograms these.
    pub pooled_feature: f64,
    pub mask_plan: Option<MaskPlan>,
}

/// Seed for online step `index` of a run — one stream of randomness per
/// sample, shared by every consumer inside the step.
pub fn step_seed(run_seed: u64, index: usize) -> u64 {
    derive_seed(run_seed, "adapt-step", index as u64)
}

fn pooled_scalar(features: &Tensor) -> f64 {
    features.data().iter().sum::<f64>() / features.len() as f64
}

/// One online sample: forward, record the prediction, then update per the
/// method. Ordered contract:
/// 1. deterministic full forward of the image; prediction recorded here;
/// 2. masking methods pick token indices (uncertainty probes for dam,
///    uniform for random);
/// 3. masked forward and, for reconstruction methods, decoding of masked
///    features against targets computed from the same image;
/// 4. joint loss;
/// 5. one optimizer step over the method's scope.
/// source-only stops after 1; entropy-ln substitutes entropy of the full
/// forward for 2-4.
pub fn adapt_step(
    model: &mut Vit,
    adam: &mut AdamState,
    image: &Tensor,
    method: &AdaptMethod,
    step_seed: u64,
) -> Result<StepOutcome> {
    method.validate()?;
    let mut g = if method.updates_model() {
        Graph::recording()
    } else {
        Graph::inference()
    };

    // (1) prediction from current weights
    let batch = model.embed_one(&mut g, image)?;
    let out = model.forward(&mut g, &batch, DropoutMode::Off)?;
    let y = g.softmax(&out.logits)?;
    let prediction = argmax(y.data());
    let probabilities = y.data().to_vec();
    let pooled_feature = pooled_scalar(&out.token_features);

    let zero_losses = |l: f64| LossBreakdown {
        l_con: l,
        l_rec: 0.0,
        l_total: l,
        lambda: method.lambda,
        rec_degenerate: false,
    };

    let (losses, mask_plan) = match method.kind {
        MethodKind::SourceOnly => (zero_losses(0.0), None),
        MethodKind::EntropyLn => {
            let loss = entropy_loss(&mut g, &y)?;
            let value = loss.item()?;
            g.backward(&loss)?;
            let grads = g.grads_for(model.params());
            adam.step(model.params_mut(), &grads, method.lr)?;
            (zero_losses(value), None)
        }
        _ => {
            // (2) choose what to hide
            let strategy = method
                .strategy()
                .expect("masking kinds always carry a strategy");
            let uncertainty = match strategy {
                MaskStrategy::Dam => {
                    token_uncertainty(model, &batch, method.mc_passes, step_seed)?
                }
                MaskStrategy::Random => vec![0.0; model.config().tokens()],
            };
            let plan = select_mask(
                &uncertainty,
                method.mask_ratio,
                strategy,
                derive_seed(step_seed, "mask-select", 0),
            )?;

            // (3) masked view
            let masked = model.apply_mask(&mut g, &batch, &plan.selected)?;
            let masked_out = model.forward(&mut g, &masked, DropoutMode::Off)?;
            let yhat = g.softmax(&masked_out.logits)?;

            // (4) losses
            let l_con = consistency_loss(&mut g, &y, &yhat, method.stop_target_grad)?;
            let (l_rec, rec_degenerate) = if method.uses_reconstruction() {
                let k = method.target.dim(model.config().patch_size);
                if plan.selected.is_empty() {
                    reconstruction_loss(
                        &mut g,
                        &Tensor::zeros(&[0, k]),
                        &Tensor::zeros(&[0, k]),
                    )?
                } else {
                    let n = model.config().tokens();
                    let d = model.config().embed_dim;
                    let flat = g.reshape(&masked_out.token_features, &[n, d])?;
                    let picked = g.gather_rows(&flat, &plan.selected)?;
                    let decoded = model.decode(&mut g, &picked)?;
                    let all_targets =
                        target_tokens(method.target, image, model.config().patch_size)?;
                    let rows: Vec<f64> = plan
                        .selected
                        .iter()
                        .flat_map(|&t| all_targets.data()[t * k..(t + 1) * k].to_vec())
                        .collect();
                    let target = Tensor::new(vec![plan.selected.len(), k], rows)?;
                    reconstruction_loss(&mut g, &decoded, &target)?
                }
            } else {
                (Tensor::scalar(0.0), false)
            };
            let l_all = total_loss(&mut g, &l_con, &l_rec, method.lambda)?;
            let losses = LossBreakdown {
                l_con: l_con.item()?,
                l_rec: l_rec.item()?,
                l_total: l_all.item()?,
                lambda: method.lambda,
                rec_degenerate,
            };

            // (5) update
            g.backward(&l_all)?;
            let grads = g.grads_for(model.params());
            adam.step(model.params_mut(), &grads, method.lr)?;
            (losses, Some(plan))
        }
    };

    Ok(StepOutcome {
        prediction,
        probabilities,
        losses,
        pooled_feature,
        mask_plan,
    })
}

/// Per-domain slice of an online run.
#[derive(Debug, Clone)]
pub struct DomainSummary {
    pub name: String,
    pub mistakes: usize,
    pub count: usize,
    pub error_rate: f64,
}

#[derive(Debug, Clone)]
pub struct AdaptationReport {
    pub method: String,
    pub seed: u64,
    pub domains: Vec<DomainSummary>,
    /// Arithmetic mean of the per-domain error rates.
    pub mean_error: f64,
    pub losses: Vec<LossBreakdown>,
    /// Pooled-feature samples per domain, aligned with `domains`.
    pub domain_features: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub wall_seconds: f64,
    pub config: String,
}

/// Fresh optimizer for a method's update scope.
pub fn optimizer_for(model: &Vit, method: &AdaptMethod) -> AdamState {
    let scope = method.update_scope;
    AdamState::with_scope(model.params(), |name| scope.admits(name))
}

/// Consumes a stream once, adapting online. Every sample is predicted
/// before the weights see it.
pub fn run_ctta(
    model: &mut Vit,
    mut stream: DomainStream,
    method: &AdaptMethod,
    seed: u64,
) -> Result<AdaptationReport> {
    method.validate()?;
    let started = Instant::now();
    let order = stream.domain_order();
    let total = stream.total_len();
    if stream.remaining() != total {
        return Err(Error::InvalidArg {
            op: "run_ctta",
            msg: "stream already partially consumed; online runs need a fresh one".into(),
        });
    }
    let mut adam = optimizer_for(model, method);
    let mut domains: Vec<DomainSummary> = order
        .iter()
        .map(|d| DomainSummary {
            name: d.name(),
            mistakes: 0,
            count: 0,
            error_rate: 0.0,
        })
        .collect();
    let mut domain_features: Vec<Vec<f64>> = vec![Vec::new(); order.len()];
    let mut losses = Vec::with_capacity(total);
    let mut predictions = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);

    for index in 0..total {
        let sample = stream.next_sample()?;
        let slot = order
            .iter()
            .position(|d| *d == sample.domain)
            .expect("stream yields only scheduled domains");
        let outcome = adapt_step(model, &mut adam, &sample.image, method, step_seed(seed, index))?;
        domains[slot].count += 1;
        if outcome.prediction != sample.label {
            domains[slot].mistakes += 1;
        }
        domain_features[slot].push(outcome.pooled_feature);
        losses.push(outcome.losses);
        predictions.push(outcome.prediction);
        labels.push(sample.label);
    }

    for d in &mut domains {
        d.error_rate = d.mistakes as f64 / d.count.max(1) as f64;
    }
    let mean_error = domains.iter().map(|d| d.error_rate).sum::<f64>() / domains.len() as f64;
    Ok(AdaptationReport {
        method: method.label(),
        seed,
        domains,
        mean_error,
        losses,
        domain_features,
        predictions,
        labels,
        wall_seconds: started.elapsed().as_secs_f64(),
        config: format!(
            "method={} ratio={} lambda={} target={} lr={} seed={seed}",
            method.label(),
            method.mask_ratio,
            method.lambda,
            method.target.name(),
            method.lr
        ),
    })
}
