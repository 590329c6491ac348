//! Experiment grids: the method ablation, the mask-ratio sweep, and their
//! CSV renderings.

use super::adapt::{run_ctta, AdaptationReport};
use super::divergence::DivergenceTable;
use super::methods::{AdaptMethod, MethodKind, METHOD_KINDS};
use super::pretrain::pretrain;
use crate::domains::{build_stream, default_corruption_order, gen_source, Corruption, ToySpec};
use crate::error::{Error, Result};
use crate::hog::TargetKind;
use crate::rng::derive_seed;
use crate::vit::{Vit, VitConfig};
use crate::Tensor;

/// Everything a full experiment needs: data shape, model shape, stream
/// layout, training recipe, and adaptation hyperparameters.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub spec: ToySpec,
    pub vit: VitConfig,
    pub order: Vec<Corruption>,
    pub per_domain: usize,
    pub rounds: usize,
    pub pretrain_count: usize,
    pub holdout_count: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub adapt_lr: f64,
    pub mask_ratio: u32,
    pub lambda: f64,
    pub stop_target_grad: bool,
    pub mc_passes: usize,
    pub seeds: Vec<u64>,
    /// Reconstruction targets beyond the default, each added as an extra
    /// adma-dam grid column.
    pub extra_targets: Vec<TargetKind>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            spec: ToySpec::default(),
            vit: VitConfig::default(),
            order: default_corruption_order(5).expect("severity 5 is valid"),
            per_domain: 50,
            rounds: 1,
            pretrain_count: 400,
            holdout_count: 80,
            pretrain_epochs: 26,
            pretrain_lr: 3e-3,
            adapt_lr: 3e-5,
            mask_ratio: 50,
            lambda: 0.5,
            stop_target_grad: true,
            mc_passes: crate::dam::DEFAULT_MC_PASSES,
            seeds: vec![0, 1, 2, 3, 4],
            extra_targets: vec![TargetKind::Rgb, TargetKind::Sobel],
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.vit.validate()?;
        let bad = |msg: String| Error::InvalidArg { op: "experiment_plan", msg };
        if self.vit.image_size != self.spec.image_size {
            return Err(bad(format!(
                "model image size {} differs from data image size {}",
                self.vit.image_size, self.spec.image_size
            )));
        }
        if self.vit.num_classes != self.spec.num_classes {
            return Err(bad(format!(
                "model classes {} differ from data classes {}",
                self.vit.num_classes, self.spec.num_classes
            )));
        }
        if self.vit.decoder_dim != TargetKind::Hog.dim(self.vit.patch_size) {
            return Err(bad(
                "base model decoder width must match the default reconstruction target".into(),
            ));
        }
        if self.order.is_empty() || self.per_domain == 0 || self.rounds == 0 {
            return Err(bad("stream layout must be nonempty".into()));
        }
        if self.seeds.is_empty() {
            return Err(bad("need at least one seed".into()));
        }
        if self.mask_ratio > 100 {
            return Err(bad(format!("mask ratio {} out of range", self.mask_ratio)));
        }
        if self.mc_passes < 2 {
            return Err(bad(format!(
                "mc_passes {} must be >= 2 for uncertainty estimates",
                self.mc_passes
            )));
        }
        Ok(())
    }

    pub fn method(&self, kind: MethodKind) -> AdaptMethod {
        let mut m = AdaptMethod::new(kind, self.adapt_lr);
        if m.strategy().is_some() {
            m.mask_ratio = self.mask_ratio;
        }
        if m.uses_reconstruction() {
            m.lambda = self.lambda;
        }
        m.stop_target_grad = self.stop_target_grad;
        m.mc_passes = self.mc_passes;
        m
    }

    /// The ablation grid: all six kinds, then adma-dam with each extra
    /// reconstruction target.
    pub fn grid(&self) -> Vec<AdaptMethod> {
        let mut grid: Vec<AdaptMethod> =
            METHOD_KINDS.iter().map(|&k| self.method(k)).collect();
        for &target in &self.extra_targets {
            if target == TargetKind::Hog {
                continue;
            }
            let mut m = self.method(MethodKind::AdmaDamHog);
            m.target = target;
            grid.push(m);
        }
        grid
    }

    pub fn stream_for_seed(&self, seed: u64) -> Result<crate::domains::DomainStream> {
        build_stream(
            &self.spec,
            &self.order,
            self.per_domain,
            self.rounds,
            derive_seed(seed, "stream", 0),
        )
    }
}

/// Snapshot of a pretrained source model plus its clean accuracy.
#[derive(Debug, Clone)]
pub struct PretrainedSource {
    pub seed: u64,
    pub accuracy: f64,
    pub records: Vec<(String, Tensor)>,
}

/// Pretrains one source model for `seed` and snapshots its weights.
pub fn prepare_pretrained(plan: &ExperimentPlan, seed: u64) -> Result<PretrainedSource> {
    plan.validate()?;
    let mut model = Vit::new(plan.vit.clone(), derive_seed(seed, "model-init", 0))?;
    let train = gen_source(&plan.spec, plan.pretrain_count, derive_seed(seed, "pretrain-data", 0))?;
    let holdout = gen_source(&plan.spec, plan.holdout_count, derive_seed(seed, "holdout-data", 0))?;
    let accuracy = pretrain(
        &mut model,
        &train,
        &holdout,
        plan.pretrain_epochs,
        plan.pretrain_lr,
        derive_seed(seed, "pretrain", 0),
    )?;
    let records = model
        .params()
        .iter()
        .map(|p| (p.name().to_string(), p.value().clone()))
        .collect();
    Ok(PretrainedSource {
        seed,
        accuracy,
        records,
    })
}

/// Fresh model carrying the pretrained weights, with a decoder sized for
/// `target` (freshly initialized when the width differs from the source).
pub fn model_for_target(
    plan: &ExperimentPlan,
    source: &PretrainedSource,
    target: TargetKind,
) -> Result<Vit> {
    let mut cfg = plan.vit.clone();
    cfg.decoder_dim = target.dim(cfg.patch_size);
    let mut model = Vit::new(cfg, derive_seed(source.seed, "target-model-init", target.dim(plan.vit.patch_size) as u64))?;
    model.adopt_weights(&source.records)?;
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub method: String,
    pub seed: u64,
    pub domain: String,
    pub error: f64,
    /// Mean error of this (method, seed) run across its domains.
    pub mean: f64,
    /// source-only mean minus this method's mean, same seed.
    pub gain: f64,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub reports: Vec<AdaptationReport>,
    /// Clean holdout accuracy per seed after pretraining.
    pub accuracies: Vec<(u64, f64)>,
}

impl AblationResult {
    pub fn mean_error(&self, method: &str, seed: u64) -> Option<f64> {
        self.reports
            .iter()
            .find(|r| r.method == method && r.seed == seed)
            .map(|r| r.mean_error)
    }

    pub fn report(&self, method: &str, seed: u64) -> Option<&AdaptationReport> {
        self.reports
            .iter()
            .find(|r| r.method == method && r.seed == seed)
    }

    /// Mean error averaged over seeds for one method label.
    pub fn seed_average(&self, method: &str) -> Option<f64> {
        let means: Vec<f64> = self
            .reports
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.mean_error)
            .collect();
        if means.is_empty() {
            None
        } else {
            Some(means.iter().sum::<f64>() / means.len() as f64)
        }
    }
}

/// Runs the full method grid on identical streams for every seed.
/// `log` receives one line per completed run.
pub fn run_ablation(
    plan: &ExperimentPlan,
    mut log: impl FnMut(&str),
) -> Result<AblationResult> {
    plan.validate()?;
    let grid = plan.grid();
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut accuracies = Vec::new();

    for &seed in &plan.seeds {
        let source = prepare_pretrained(plan, seed)?;
        log(&format!(
            "seed {seed}: pretrained, clean holdout accuracy {:.3}",
            source.accuracy
        ));
        accuracies.push((seed, source.accuracy));

        let mut source_mean = None;
        for method in &grid {
            let mut model = model_for_target(plan, &source, method.target)?;
            let stream = plan.stream_for_seed(seed)?;
            let report = run_ctta(&mut model, stream, method, seed)?;
            if method.kind == MethodKind::SourceOnly && method.target == TargetKind::Hog {
                source_mean = Some(report.mean_error);
            }
            let base = source_mean.expect("source-only runs first in the grid");
            log(&format!(
                "seed {seed}: {} mean error {:.4} ({:.1}s)",
                report.method, report.mean_error, report.wall_seconds
            ));
            for d in &report.domains {
                rows.push(AblationRow {
                    method: report.method.clone(),
                    seed,
                    domain: d.name.clone(),
                    error: d.error_rate,
                    mean: report.mean_error,
                    gain: base - report.mean_error,
                });
            }
            reports.push(report);
        }
    }
    Ok(AblationResult {
        rows,
        reports,
        accuracies,
    })
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub ratio: u32,
    pub seed: u64,
    pub mean_error: f64,
}

/// Runs adma-dam-hog at each mask ratio, per seed, on identical streams.
pub fn sweep_mask_ratio(
    plan: &ExperimentPlan,
    ratios: &[u32],
    mut log: impl FnMut(&str),
) -> Result<Vec<SweepRow>> {
    plan.validate()?;
    if ratios.is_empty() {
        return Err(Error::InvalidArg {
            op: "sweep_mask_ratio",
            msg: "empty ratio grid".into(),
        });
    }
    if let Some(&bad) = ratios.iter().find(|&&r| r > 100) {
        return Err(Error::InvalidArg {
            op: "sweep_mask_ratio",
            msg: format!("ratio {bad} out of [0, 100]"),
        });
    }
    let mut rows = Vec::new();
    for &seed in &plan.seeds {
        let source = prepare_pretrained(plan, seed)?;
        log(&format!(
            "seed {seed}: pretrained, clean holdout accuracy {:.3}",
            source.accuracy
        ));
        for &ratio in ratios {
            let mut method = plan.method(MethodKind::AdmaDamHog);
            method.mask_ratio = ratio;
            let mut model = model_for_target(plan, &source, method.target)?;
            let stream = plan.stream_for_seed(seed)?;
            let report = run_ctta(&mut model, stream, &method, seed)?;
            log(&format!(
                "seed {seed}: ratio {ratio}% mean error {:.4}",
                report.mean_error
            ));
            rows.push(SweepRow {
                ratio,
                seed,
                mean_error: report.mean_error,
            });
        }
    }
    Ok(rows)
}

pub const DEFAULT_SWEEP_RATIOS: [u32; 6] = [30, 40, 50, 60, 70, 80];

// --- CSV renderings ------------------------------------------------------

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("method,seed,domain,error,mean,gain\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method, r.seed, r.domain, r.error, r.mean, r.gain
        ));
    }
    out
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("ratio,seed,mean_error\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.ratio, r.seed, r.mean_error));
    }
    out
}

pub fn divergence_csv(tables: &[DivergenceTable]) -> String {
    let mut out = String::from("method,pair,js\n");
    for t in tables {
        for (a, b, v) in &t.pairs {
            out.push_str(&format!("{},{a}->{b},{v}\n", t.method));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::CorruptionKind;

    /// Small enough to run in test time: two domains, tiny stream, no
    /// pretraining epochs.
    fn tiny_plan() -> ExperimentPlan {
        let mut plan = ExperimentPlan::default();
        plan.order = vec![
            Corruption::new(CorruptionKind::GaussianNoise, 5).unwrap(),
            Corruption::new(CorruptionKind::Brightness, 5).unwrap(),
        ];
        plan.per_domain = 2;
        plan.pretrain_count = 8;
        plan.holdout_count = 4;
        plan.pretrain_epochs = 0;
        plan.seeds = vec![0];
        plan
    }

    #[test]
    fn plan_validation_catches_mismatches() {
        let mut plan = tiny_plan();
        plan.vit.image_size = 16;
        assert!(plan.validate().is_err());
        let mut plan = tiny_plan();
        plan.seeds.clear();
        assert!(plan.validate().is_err());
        tiny_plan().validate().unwrap();
    }

    #[test]
    fn grid_has_six_kinds_plus_extra_targets() {
        let plan = tiny_plan();
        let labels: Vec<String> = plan.grid().iter().map(|m| m.label()).collect();
        assert_eq!(
            labels,
            vec![
                "source-only",
                "entropy-ln",
                "consistency-random",
                "consistency-dam",
                "adma-random-hog",
                "adma-dam-hog",
                "adma-dam-rgb",
                "adma-dam-sobel",
            ]
        );
    }

    #[test]
    fn ablation_rows_and_gains_are_consistent() {
        let plan = tiny_plan();
        let result = run_ablation(&plan, |_| {}).unwrap();
        // 8 methods x 1 seed x 2 domains
        assert_eq!(result.rows.len(), 16);
        assert_eq!(result.reports.len(), 8);
        assert_eq!(result.accuracies.len(), 1);

        for row in &result.rows {
            if row.method == "source-only" {
                assert_eq!(row.gain, 0.0, "source-only gain must be zero");
            }
            let expect_gain =
                result.mean_error("source-only", row.seed).unwrap() - row.mean;
            assert!((row.gain - expect_gain).abs() < 1e-15);
            assert!((0.0..=1.0).contains(&row.error));
        }
        let csv = ablation_csv(&result.rows);
        assert!(csv.starts_with("method,seed,domain,error,mean,gain\n"));
        assert_eq!(csv.lines().count(), 17);
    }

    #[test]
    fn ablation_is_deterministic() {
        let plan = tiny_plan();
        let a = ablation_csv(&run_ablation(&plan, |_| {}).unwrap().rows);
        let b = ablation_csv(&run_ablation(&plan, |_| {}).unwrap().rows);
        assert_eq!(a, b);
    }

    #[test]
    fn sweep_rows_cover_the_ratio_grid() {
        let mut plan = tiny_plan();
        plan.order.truncate(1);
        let rows = sweep_mask_ratio(&plan, &[0, 50], |_| {}).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].ratio, 0);
        assert_eq!(rows[1].ratio, 50);
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with("ratio,seed,mean_error\n"));
        assert_eq!(csv.lines().count(), 3);
        assert!(sweep_mask_ratio(&plan, &[], |_| {}).is_err());
        assert!(sweep_mask_ratio(&plan, &[101], |_| {}).is_err());
    }
}
