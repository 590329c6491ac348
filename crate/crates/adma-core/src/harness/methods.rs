//! Adaptation method descriptors: which masking strategy, which losses,
//! which parameters get updated.

use crate::dam::{MaskStrategy, DEFAULT_MC_PASSES};
use crate::error::{Error, Result};
use crate::hog::TargetKind;
use crate::objective::DEFAULT_LAMBDA;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodKind {
    /// Frozen pretrained model; predicts and never updates.
    SourceOnly,
    /// Entropy minimization updating LayerNorm parameters only.
    EntropyLn,
    /// Masked-view consistency with uniform-random masking.
    ConsistencyRandom,
    /// Masked-view consistency with uncertainty-driven masking.
    ConsistencyDam,
    /// Consistency plus reconstruction, random masking.
    AdmaRandomHog,
    /// The full method: consistency plus reconstruction, uncertainty masking.
    AdmaDamHog,
}

pub const METHOD_KINDS: [MethodKind; 6] = [
    MethodKind::SourceOnly,
    MethodKind::EntropyLn,
    MethodKind::ConsistencyRandom,
    MethodKind::ConsistencyDam,
    MethodKind::AdmaRandomHog,
    MethodKind::AdmaDamHog,
];

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::SourceOnly => "source-only",
            MethodKind::EntropyLn => "entropy-ln",
            MethodKind::ConsistencyRandom => "consistency-random",
            MethodKind::ConsistencyDam => "consistency-dam",
            MethodKind::AdmaRandomHog => "adma-random-hog",
            MethodKind::AdmaDamHog => "adma-dam-hog",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        METHOD_KINDS
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArg {
                op: "method_kind",
                msg: format!("unknown adaptation method {s:?}"),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateScope {
    AllParams,
    LayerNormOnly,
}

impl UpdateScope {
    /// Parameter-name filter for optimizer construction.
    pub fn admits(self, name: &str) -> bool {
        match self {
            UpdateScope::AllParams => true,
            UpdateScope::LayerNormOnly => name.contains(".ln"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdaptMethod {
    pub kind: MethodKind,
    pub mask_ratio: u32,
    pub lambda: f64,
    pub target: TargetKind,
    pub lr: f64,
    pub update_scope: UpdateScope,
    /// Treat the full-view probabilities as a fixed soft target.
    pub stop_target_grad: bool,
    /// Stochastic forward passes per uncertainty estimate (dam strategies).
    pub mc_passes: usize,
}

impl AdaptMethod {
    pub fn new(kind: MethodKind, lr: f64) -> Self {
        let masks = !matches!(kind, MethodKind::SourceOnly | MethodKind::EntropyLn);
        Self {
            kind,
            mask_ratio: if masks { 50 } else { 0 },
            lambda: match kind {
                MethodKind::AdmaRandomHog | MethodKind::AdmaDamHog => DEFAULT_LAMBDA,
                _ => 0.0,
            },
            target: TargetKind::Hog,
            lr,
            update_scope: if kind == MethodKind::EntropyLn {
                UpdateScope::LayerNormOnly
            } else {
                UpdateScope::AllParams
            },
            stop_target_grad: true,
            mc_passes: DEFAULT_MC_PASSES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::InvalidArg { op: "adapt_method", msg };
        if self.kind == MethodKind::EntropyLn && self.update_scope != UpdateScope::LayerNormOnly {
            return Err(bad(
                "entropy-ln requires the layernorm-only update scope".into(),
            ));
        }
        if self.mask_ratio > 100 {
            return Err(bad(format!(
                "mask ratio {} must lie in [0, 100]",
                self.mask_ratio
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(bad(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad(format!("learning rate {} must be positive", self.lr)));
        }
        if self.strategy() == Some(MaskStrategy::Dam) && self.mc_passes < 2 {
            return Err(bad(format!(
                "mc_passes {} must be >= 2 for uncertainty-driven masking",
                self.mc_passes
            )));
        }
        Ok(())
    }

    pub fn strategy(&self) -> Option<MaskStrategy> {
        match self.kind {
            MethodKind::ConsistencyRandom | MethodKind::AdmaRandomHog => {
                Some(MaskStrategy::Random)
            }
            MethodKind::ConsistencyDam | MethodKind::AdmaDamHog => Some(MaskStrategy::Dam),
            MethodKind::SourceOnly | MethodKind::EntropyLn => None,
        }
    }

    pub fn uses_reconstruction(&self) -> bool {
        matches!(self.kind, MethodKind::AdmaRandomHog | MethodKind::AdmaDamHog)
    }

    pub fn updates_model(&self) -> bool {
        self.kind != MethodKind::SourceOnly
    }

    /// Row label: the kind name, with the reconstruction-target suffix
    /// swapped when an adma kind runs a non-default target.
    pub fn label(&self) -> String {
        if self.uses_reconstruction() && self.target != TargetKind::Hog {
            let base = self.kind.name();
            let stem = base.strip_suffix("-hog").unwrap_or(base);
            format!("{stem}-{}", self.target.name())
        } else {
            self.kind.name().to_string()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for kind in METHOD_KINDS {
            assert_eq!(MethodKind::parse(kind.name()).unwrap(), kind);
        }
        assert!(MethodKind::parse("tent").is_err());
    }

    #[test]
    fn entropy_is_layernorm_scoped_by_construction() {
        let m = AdaptMethod::new(MethodKind::EntropyLn, 1e-4);
        assert_eq!(m.update_scope, UpdateScope::LayerNormOnly);
        m.validate().unwrap();
        let mut broken = m.clone();
        broken.update_scope = UpdateScope::AllParams;
        assert!(broken.validate().is_err());
    }

    #[test]
    fn scope_filter_matches_layernorm_names() {
        let ln = UpdateScope::LayerNormOnly;
        assert!(ln.admits("block0.ln1.gain"));
        assert!(ln.admits("block3.ln2.bias"));
        assert!(!ln.admits("block0.attn.q.weight"));
        assert!(!ln.admits("head.weight"));
        assert!(UpdateScope::AllParams.admits("head.weight"));
    }

    #[test]
    fn strategies_and_losses_per_kind() {
        let lr = 1e-4;
        let by = |k| AdaptMethod::new(k, lr);
        assert_eq!(by(MethodKind::SourceOnly).strategy(), None);
        assert_eq!(by(MethodKind::EntropyLn).strategy(), None);
        assert_eq!(
            by(MethodKind::ConsistencyRandom).strategy(),
            Some(MaskStrategy::Random)
        );
        assert_eq!(
            by(MethodKind::AdmaDamHog).strategy(),
            Some(MaskStrategy::Dam)
        );
        assert!(!by(MethodKind::ConsistencyDam).uses_reconstruction());
        assert!(by(MethodKind::AdmaRandomHog).uses_reconstruction());
        assert_eq!(by(MethodKind::ConsistencyDam).lambda, 0.0);
        assert!(!by(MethodKind::SourceOnly).updates_model());
    }

    #[test]
    fn labels_reflect_reconstruction_target() {
        let mut m = AdaptMethod::new(MethodKind::AdmaDamHog, 1e-4);
        assert_eq!(m.label(), "adma-dam-hog");
        m.target = TargetKind::Rgb;
        assert_eq!(m.label(), "adma-dam-rgb");
        m.target = TargetKind::Sobel;
        assert_eq!(m.label(), "adma-dam-sobel");
        let mut c = AdaptMethod::new(MethodKind::ConsistencyDam, 1e-4);
        c.target = TargetKind::Rgb; // irrelevant without reconstruction
        assert_eq!(c.label(), "consistency-dam");
    }
}
