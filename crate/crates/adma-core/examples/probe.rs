//! Scratch calibration probe: per-epoch holdout accuracy across learning
//! rates. Not part of the lab's surface; used for picking defaults.

use adma_core::domains::{gen_source, ToySpec};
use adma_core::harness::{evaluate_accuracy, stack_images, PRETRAIN_BATCH};
use adma_core::objective::cross_entropy;
use adma_core::rng::{derive_seed, StreamRng};
use adma_core::tensor::{AdamState, Graph};
use adma_core::vit::{DropoutMode, Vit, VitConfig};
use adma_core::Tensor;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let lr: f64 = args.first().map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(20);
    let count: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(400);
    let seed: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0);
    let amp: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.15);

    let mut spec = ToySpec::default();
    spec.texture_amplitude = amp;
    let mut cfg = VitConfig::default();
    if let Some(depth) = args.get(7).map(|s| s.parse::<usize>().unwrap()) {
        cfg.depth = depth;
    }
    let mut model = Vit::new(cfg, derive_seed(seed, "model-init", 0)).unwrap();
    let train = gen_source(&spec, count, derive_seed(seed, "pretrain-data", 0)).unwrap();
    let holdout = gen_source(&spec, 80, derive_seed(seed, "holdout-data", 0)).unwrap();
    let pseed = derive_seed(seed, "pretrain", 0);

    // Raw-pixel nearest-centroid baseline: a quick task-separability signal.
    let dim = train[0].0.len();
    let classes = spec.num_classes;
    let mut centroids = vec![vec![0.0f64; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (img, label) in &train {
        counts[*label] += 1;
        for (a, &v) in centroids[*label].iter_mut().zip(img.data()) {
            *a += v;
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        for v in c.iter_mut() {
            *v /= *n as f64;
        }
    }
    let centroid_acc = holdout
        .iter()
        .filter(|(img, label)| {
            let best = (0..classes)
                .min_by(|&a, &b| {
                    let da: f64 = centroids[a]
                        .iter()
                        .zip(img.data())
                        .map(|(c, v)| (c - v) * (c - v))
                        .sum();
                    let db: f64 = centroids[b]
                        .iter()
                        .zip(img.data())
                        .map(|(c, v)| (c - v) * (c - v))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            best == *label
        })
        .count() as f64
        / holdout.len() as f64;

    // optional positional-embedding rescale experiment
    if let Some(scale) = args.get(5).map(|s| s.parse::<f64>().unwrap()) {
        let pos = model.params().by_name("pos_embed").unwrap().value().clone();
        let scaled: Vec<f64> = pos.data().iter().map(|v| v * scale).collect();
        let t = Tensor::new(pos.shape().to_vec(), scaled).unwrap();
        model.params_mut().set_by_name("pos_embed", t).unwrap();
        println!("pos_embed rescaled by {scale}");
    }

    // How much do logits vary across inputs vs their own magnitude?
    {
        let refs: Vec<&Tensor> = holdout.iter().take(32).map(|(img, _)| img).collect();
        let batch = stack_images(&refs).unwrap();
        let mut g = Graph::inference();
        let tokens = model.embed(&mut g, &batch).unwrap();
        let out = model.forward(&mut g, &tokens, DropoutMode::Off).unwrap();
        let ld = out.logits.data();
        let (b, c) = (refs.len(), out.logits.shape()[1]);
        let mut mean_abs = 0.0;
        let mut var_across = 0.0;
        for j in 0..c {
            let col: Vec<f64> = (0..b).map(|i| ld[i * c + j]).collect();
            let mu = col.iter().sum::<f64>() / b as f64;
            var_across += col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / b as f64;
            mean_abs += col.iter().map(|v| v.abs()).sum::<f64>() / b as f64;
        }
        println!(
            "init logits: mean |logit| {:.4}, std across inputs {:.4}",
            mean_abs / c as f64,
            (var_across / c as f64).sqrt()
        );
    }

    let sgd = args.get(6).map(|s| s == "sgd").unwrap_or(false);
    let warmup: u64 = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(0);
    let bsz: usize = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(PRETRAIN_BATCH);
    let mut step_count = 0u64;
    let mut adam = AdamState::new(model.params());
    println!(
        "lr={lr} epochs={epochs} images={count} seed={seed} amp={amp} opt={}",
        if sgd { "sgd" } else { "adam" }
    );
    println!("nearest-centroid holdout accuracy: {centroid_acc:.3}");
    for epoch in 0..epochs {
        let t0 = std::time::Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        StreamRng::new(pseed, "pretrain-shuffle", epoch as u64).shuffle(&mut order);
        let mut losses = Vec::new();
        for chunk in order.chunks(bsz) {
            let refs: Vec<&Tensor> = chunk.iter().map(|&i| &train[i].0).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].1).collect();
            let batch = stack_images(&refs).unwrap();
            let mut g = Graph::recording();
            let tokens = model.embed(&mut g, &batch).unwrap();
            let out = model.forward(&mut g, &tokens, DropoutMode::Off).unwrap();
            let loss = cross_entropy(&mut g, &out.logits, &labels).unwrap();
            losses.push(loss.item().unwrap());
            g.backward(&loss).unwrap();
            let grads = g.grads_for(model.params());
            if sgd {
                let names: Vec<String> = model
                    .params()
                    .iter()
                    .map(|p| p.name().to_string())
                    .collect();
                for (name, grad) in names.iter().zip(&grads) {
                    let old = model.params().by_name(name).unwrap().value().clone();
                    let updated: Vec<f64> = old
                        .data()
                        .iter()
                        .zip(grad.data())
                        .map(|(w, g)| w - lr * g)
                        .collect();
                    let t = Tensor::new(old.shape().to_vec(), updated).unwrap();
                    model.params_mut().set_by_name(name, t).unwrap();
                }
            } else {
                step_count += 1;
                let total = (epochs as usize * train.len().div_ceil(bsz)) as f64;
                let scale = if warmup > 0 && step_count < warmup {
                    step_count as f64 / warmup as f64
                } else {
                    let p = (step_count as f64 - warmup as f64) / (total - warmup as f64);
                    0.1 + 0.45 * (1.0 + (std::f64::consts::PI * p.min(1.0)).cos())
                };
                adam.step(model.params_mut(), &grads, lr * scale).unwrap();
            }
        }
        let train_acc = evaluate_accuracy(&model, &train).unwrap();
        let hold_acc = evaluate_accuracy(&model, &holdout).unwrap();
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        println!(
            "epoch {epoch:>3}  loss {mean_loss:<8.4}  train {train_acc:.3}  holdout {hold_acc:.3}  ({:.1}s)",
            t0.elapsed().as_secs_f64()
        );
    }
}
