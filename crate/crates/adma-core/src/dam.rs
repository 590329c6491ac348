//! Distribution-aware masking.
//!
//! Token uncertainty is estimated with MC dropout: several stochastic
//! block-1 probes of the same embedded tokens, each with dropout active in
//! block 1's FFN hidden layer under a distinct derived seed. Each probe
//! reduces to one scalar per token (the mean over feature dimensions), and
//! the per-token spread of those scalars across probes is the uncertainty.
//! The mask keeps the most uncertain tokens' indices; a uniform-random
//! selector with the same cardinality serves as the control.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, StreamRng};
use crate::tensor::Graph;
use crate::vit::{DropoutMode, TokenBatch, Vit};

pub const DEFAULT_MC_PASSES: usize = 10;
pub const DEFAULT_MASK_RATIO: u32 = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskStrategy {
    /// Highest-uncertainty tokens first; ties prefer the lower index.
    Dam,
    /// Uniform without replacement, same cardinality.
    Random,
}

impl MaskStrategy {
    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::Dam => "dam",
            MaskStrategy::Random => "random",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MaskPlan {
    pub uncertainty: Vec<f64>,
    /// Strictly ascending token indices chosen for masking.
    pub selected: Vec<usize>,
    pub ratio: u32,
    pub strategy: MaskStrategy,
}

/// Number of tokens to mask: `n * ratio%`, rounded half up.
/// Exact in integer arithmetic, so 4.8 -> 5 and 2.5 -> 3 without
/// floating-point edge cases.
pub fn mask_cardinality(n_tokens: usize, ratio: u32) -> Result<usize> {
    if ratio > 100 {
        return Err(Error::InvalidArg {
            op: "mask_cardinality",
            msg: format!("mask ratio {ratio} must lie in [0, 100]"),
        });
    }
    Ok((n_tokens * ratio as usize + 50) / 100)
}

/// Per-token spread of per-pass scalars: the (biased, divide-by-m)
/// standard deviation across passes.
pub fn uncertainty_from_passes(passes: &[Vec<f64>]) -> Result<Vec<f64>> {
    let m = passes.len();
    if m < 2 {
        return Err(Error::InvalidArg {
            op: "uncertainty_from_passes",
            msg: format!("need at least 2 stochastic passes, got {m}"),
        });
    }
    let n = passes[0].len();
    if n == 0 || passes.iter().any(|p| p.len() != n) {
        return Err(Error::InvalidArg {
            op: "uncertainty_from_passes",
            msg: "passes must share one nonzero token count".into(),
        });
    }
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let mean = passes.iter().map(|p| p[j]).sum::<f64>() / m as f64;
        let var = passes.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / m as f64;
        out.push(var.sqrt());
    }
    Ok(out)
}

/// Runs `passes` stochastic block-1 probes of a single embedded image and
/// reduces them to one uncertainty score per token. Gradient-free: each
/// probe lives in its own inference graph.
pub fn token_uncertainty(
    model: &Vit,
    batch: &TokenBatch,
    passes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if batch.batch() != 1 {
        return Err(Error::InvalidArg {
            op: "token_uncertainty",
            msg: format!("expected a single-image batch, got {}", batch.batch()),
        });
    }
    if passes < 2 {
        return Err(Error::InvalidArg {
            op: "token_uncertainty",
            msg: format!("need at least 2 stochastic passes, got {passes}"),
        });
    }
    let n = model.config().tokens();
    let d = model.config().embed_dim;
    let mut per_pass = Vec::with_capacity(passes);
    for i in 0..passes {
        let mut g = Graph::inference();
        let dropout = DropoutMode::Active {
            seed: derive_seed(seed, "uncertainty-pass", i as u64),
        };
        let feats = model.forward_block1(&mut g, batch, dropout)?;
        let data = feats.data();
        let mut scalars = Vec::with_capacity(n);
        for t in 0..n {
            let row = &data[t * d..(t + 1) * d];
            scalars.push(row.iter().sum::<f64>() / d as f64);
        }
        per_pass.push(scalars);
    }
    uncertainty_from_passes(&per_pass)
}

/// Chooses which token indices to mask. `seed` only matters for the
/// random strategy.
pub fn select_mask(
    uncertainty: &[f64],
    ratio: u32,
    strategy: MaskStrategy,
    seed: u64,
) -> Result<MaskPlan> {
    let n = uncertainty.len();
    if n == 0 {
        return Err(Error::InvalidArg {
            op: "select_mask",
            msg: "uncertainty vector is empty".into(),
        });
    }
    if uncertainty.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "select_mask" });
    }
    let count = mask_cardinality(n, ratio)?;
    let mut selected = match strategy {
        MaskStrategy::Dam => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                uncertainty[b]
                    .partial_cmp(&uncertainty[a])
                    .expect("finiteness checked above")
                    .then(a.cmp(&b))
            });
            order.truncate(count);
            order
        }
        MaskStrategy::Random => {
            let mut rng = StreamRng::new(seed, "random-mask", 0);
            rng.choose_indices(n, count)
        }
    };
    selected.sort_unstable();
    Ok(MaskPlan {
        uncertainty: uncertainty.to_vec(),
        selected,
        ratio,
        strategy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::VitConfig;
    use proptest::prelude::*;

    #[test]
    fn cardinality_grid_rounds_half_up() {
        let cases: &[(usize, u32, usize)] = &[
            (4, 0, 0),
            (16, 0, 0),
            (64, 0, 0),
            (4, 30, 1),
            (16, 30, 5),
            (64, 30, 19),
            (4, 50, 2),
            (16, 50, 8),
            (64, 50, 32),
            (4, 80, 3),
            (16, 80, 13),
            (64, 80, 51),
            (10, 25, 3), // exactly 2.5 rounds up
            (16, 100, 16),
        ];
        for &(n, p, want) in cases {
            assert_eq!(mask_cardinality(n, p).unwrap(), want, "n={n} p={p}");
        }
        assert!(mask_cardinality(16, 101).is_err());
    }

    #[test]
    fn spread_of_two_passes_is_half_gap() {
        let u = uncertainty_from_passes(&[vec![1.0, 4.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(u, vec![1.0, 0.0]);
        assert!(uncertainty_from_passes(&[vec![1.0]]).is_err());
        assert!(uncertainty_from_passes(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn equal_scores_fall_back_to_low_indices() {
        let plan = select_mask(&[0.5; 16], 50, MaskStrategy::Dam, 0).unwrap();
        assert_eq!(plan.selected, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn top_half_of_four_scores() {
        let plan = select_mask(&[0.0, 9.0, 1.0, 8.0], 50, MaskStrategy::Dam, 0).unwrap();
        assert_eq!(plan.selected, vec![1, 3]);
    }

    #[test]
    fn ratio_extremes() {
        let u = vec![0.3, 0.1, 0.2];
        assert!(select_mask(&u, 0, MaskStrategy::Dam, 0).unwrap().selected.is_empty());
        assert_eq!(
            select_mask(&u, 100, MaskStrategy::Dam, 0).unwrap().selected,
            vec![0, 1, 2]
        );
    }

    #[test]
    fn random_selection_is_seeded_and_ascending() {
        let u = vec![0.0; 16];
        let a = select_mask(&u, 50, MaskStrategy::Random, 11).unwrap();
        let b = select_mask(&u, 50, MaskStrategy::Random, 11).unwrap();
        assert_eq!(a.selected, b.selected);
        assert_eq!(a.selected.len(), 8);
        assert!(a.selected.windows(2).all(|w| w[0] < w[1]));
        let c = select_mask(&u, 50, MaskStrategy::Random, 12).unwrap();
        assert_ne!(a.selected, c.selected, "different seeds should differ here");
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(select_mask(&[], 50, MaskStrategy::Dam, 0).is_err());
        assert!(select_mask(&[0.1, f64::NAN], 50, MaskStrategy::Dam, 0).is_err());
    }

    #[test]
    fn model_uncertainty_is_deterministic_and_positive_somewhere() {
        let model = Vit::new(VitConfig::default(), 3).unwrap();
        let mut rng = StreamRng::new(5, "dam-test-image", 0);
        let img = crate::Tensor::from_fn(&[3, 32, 32], |_| rng.next_f64());
        let mut g = Graph::inference();
        let batch = model.embed_one(&mut g, &img).unwrap();
        let a = token_uncertainty(&model, &batch, DEFAULT_MC_PASSES, 21).unwrap();
        let b = token_uncertainty(&model, &batch, DEFAULT_MC_PASSES, 21).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v.is_finite() && v >= 0.0));
        assert!(a.iter().any(|&v| v > 0.0), "dropout must create spread");
        assert!(token_uncertainty(&model, &batch, 1, 21).is_err());
    }

    proptest! {
        /// Order statistics drive the mask, so any strictly increasing
        /// transform of the scores must keep the plan unchanged. Scores
        /// and coefficients come from coarse dyadic grids so the affine
        /// map is exact and preserves ties bit-for-bit.
        #[test]
        fn dam_selection_survives_monotone_transforms(
            raw in prop::collection::vec(0u32..512, 1..64),
            a in 1u32..32,
            b in 0u32..64,
            ratio in 0u32..=100,
        ) {
            let scores: Vec<f64> = raw.iter().map(|&v| v as f64 / 64.0).collect();
            let mapped: Vec<f64> = scores
                .iter()
                .map(|&v| (a as f64 / 2.0) * v + (b as f64 / 8.0))
                .collect();
            let base = select_mask(&scores, ratio, MaskStrategy::Dam, 0).unwrap();
            let trans = select_mask(&mapped, ratio, MaskStrategy::Dam, 0).unwrap();
            prop_assert_eq!(base.selected, trans.selected);
        }

        #[test]
        fn selection_is_ascending_with_exact_cardinality(
            raw in prop::collection::vec(0u32..512, 1..64),
            ratio in 0u32..=100,
            seed in 0u64..1000,
        ) {
            let scores: Vec<f64> = raw.iter().map(|&v| v as f64 / 64.0).collect();
            for strategy in [MaskStrategy::Dam, MaskStrategy::Random] {
                let plan = select_mask(&scores, ratio, strategy, seed).unwrap();
                prop_assert_eq!(plan.selected.len(), mask_cardinality(scores.len(), ratio).unwrap());
                prop_assert!(plan.selected.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(plan.selected.iter().all(|&i| i < scores.len()));
            }
        }
    }
}
