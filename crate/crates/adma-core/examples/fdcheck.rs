//! Scratch diagnostic: central finite differences through the ENTIRE
//! pretraining loss (embed -> forward -> cross-entropy) for a sample of
//! parameter coordinates in every parameter tensor.

use adma_core::domains::{gen_source, ToySpec};
use adma_core::harness::stack_images;
use adma_core::objective::cross_entropy;
use adma_core::tensor::Graph;
use adma_core::vit::{DropoutMode, Vit, VitConfig};
use adma_core::Tensor;

fn loss_value(model: &Vit, batch: &Tensor, labels: &[usize]) -> f64 {
    let mut g = Graph::inference();
    let tokens = model.embed(&mut g, batch).unwrap();
    let out = model.forward(&mut g, &tokens, DropoutMode::Off).unwrap();
    cross_entropy(&mut g, &out.logits, labels)
        .unwrap()
        .item()
        .unwrap()
}

fn main() {
    let spec = ToySpec::default();
    let mut model = Vit::new(VitConfig::default(), 11).unwrap();
    let data = gen_source(&spec, 4, 99).unwrap();
    let refs: Vec<&Tensor> = data.iter().map(|(img, _)| img).collect();
    let labels: Vec<usize> = data.iter().map(|(_, l)| *l).collect();
    let batch = stack_images(&refs).unwrap();

    // analytic gradients
    let mut g = Graph::recording();
    let tokens = model.embed(&mut g, &batch).unwrap();
    let out = model.forward(&mut g, &tokens, DropoutMode::Off).unwrap();
    let loss = cross_entropy(&mut g, &out.logits, &labels).unwrap();
    g.backward(&loss).unwrap();
    let grads = g.grads_for(model.params());
    let names: Vec<String> = model
        .params()
        .iter()
        .map(|p| p.name().to_string())
        .collect();

    let h = 1e-5;
    let mut worst: (f64, String) = (0.0, String::new());
    for (pi, name) in names.iter().enumerate() {
        let len = model.params().by_name(name).unwrap().value().len();
        // probe 3 coordinates spread through the tensor
        for k in 0..3usize {
            let idx = (k * len / 3).min(len - 1);
            let orig = model.params().by_name(name).unwrap().value().clone();
            let mut plus = orig.data().to_vec();
            plus[idx] += h;
            let t_plus = Tensor::new(orig.shape().to_vec(), plus).unwrap();
            let mut minus = orig.data().to_vec();
            minus[idx] -= h;
            let t_minus = Tensor::new(orig.shape().to_vec(), minus).unwrap();

            model.params_mut().set_by_name(name, t_plus).unwrap();
            let up = loss_value(&model, &batch, &labels);
            model.params_mut().set_by_name(name, t_minus).unwrap();
            let down = loss_value(&model, &batch, &labels);
            model.params_mut().set_by_name(name, orig).unwrap();

            let fd = (up - down) / (2.0 * h);
            let an = grads[pi].data()[idx];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            let rel = (fd - an).abs() / denom;
            if rel > worst.0 {
                worst = (rel, format!("{name}[{idx}] fd={fd:.6e} an={an:.6e}"));
            }
            if rel > 1e-3 {
                println!("MISMATCH {name}[{idx}]: fd={fd:.6e} analytic={an:.6e} rel={rel:.2e}");
            }
        }
    }
    println!("worst relative error: {:.3e} at {}", worst.0, worst.1);
}
