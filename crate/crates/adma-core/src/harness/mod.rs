//! Experiment orchestration: source pretraining, the online adaptation
//! loop, the method-ablation grid, mask-ratio sweeps, and inter-domain
//! divergence analytics.

mod ablation;
mod adapt;
mod divergence;
mod methods;
mod pretrain;

pub use ablation::{
    ablation_csv, divergence_csv, model_for_target, prepare_pretrained, run_ablation,
    sweep_csv, sweep_mask_ratio, AblationResult, AblationRow, ExperimentPlan,
    PretrainedSource, SweepRow, DEFAULT_SWEEP_RATIOS,
};
pub use adapt::{
    adapt_step, optimizer_for, run_ctta, step_seed, AdaptationReport, DomainSummary,
    StepOutcome,
};
pub use divergence::{divergence_table, histogram, js, kl, DivergenceTable, DIVERGENCE_BINS};
pub use methods::{AdaptMethod, MethodKind, UpdateScope, METHOD_KINDS};
pub use pretrain::{argmax, evaluate_accuracy, pretrain, stack_images, PRETRAIN_BATCH};
