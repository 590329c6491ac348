//! Run configuration: one flat `key = value` namespace shared by the config
//! file and the command-line flags. Every tunable of the lab lives here with
//! a default, so an empty config is a complete, valid run description.

use adma_core::domains::{Corruption, CorruptionKind, ToySpec, CORRUPTION_KINDS};
use adma_core::harness::{AdaptMethod, ExperimentPlan, MethodKind};
use adma_core::hog::TargetKind;
use adma_core::vit::VitConfig;
use anyhow::{anyhow, bail, Context, Result};
use std::fmt::Write as _;
use std::path::Path;

/// Fully-resolved configuration for any command. Field order here is the
/// order keys appear in the snapshot file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // data
    pub image_size: usize,
    pub num_classes: usize,
    pub texture_amplitude: f64,
    pub corruptions: Vec<CorruptionKind>,
    pub severity: u8,
    pub per_domain: usize,
    pub rounds: usize,
    pub pretrain_count: usize,
    pub holdout_count: usize,
    // model
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub mc_dropout_p: f64,
    // adaptation
    pub method: MethodKind,
    pub target: TargetKind,
    pub mc_passes: usize,
    pub mask_ratio: u32,
    pub lambda: f64,
    pub stop_target_grad: bool,
    pub adapt_lr: f64,
    // pretraining
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    // run layout
    pub seeds: Vec<u64>,
    pub sweep_ratios: Vec<u32>,
    pub extra_targets: Vec<TargetKind>,
    pub out_dir: String,
    pub checkpoint: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            num_classes: 4,
            texture_amplitude: 0.15,
            corruptions: CORRUPTION_KINDS.to_vec(),
            severity: 5,
            per_domain: 50,
            rounds: 1,
            pretrain_count: 400,
            holdout_count: 80,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            ffn_mult: 4,
            mc_dropout_p: 0.1,
            method: MethodKind::AdmaDamHog,
            target: TargetKind::Hog,
            mc_passes: 10,
            mask_ratio: 50,
            lambda: 0.5,
            stop_target_grad: true,
            adapt_lr: 3e-5,
            pretrain_epochs: 26,
            pretrain_lr: 3e-3,
            seeds: vec![0, 1, 2, 3, 4],
            sweep_ratios: vec![30, 40, 50, 60, 70, 80],
            extra_targets: vec![TargetKind::Rgb, TargetKind::Sobel],
            out_dir: "runs".into(),
            checkpoint: None,
        }
    }
}

/// All recognized keys, in snapshot order.
pub const CONFIG_KEYS: [&str; 29] = [
    "image_size",
    "num_classes",
    "texture_amplitude",
    "corruptions",
    "severity",
    "per_domain",
    "rounds",
    "pretrain_count",
    "holdout_count",
    "patch_size",
    "embed_dim",
    "depth",
    "heads",
    "ffn_mult",
    "mc_dropout_p",
    "method",
    "target",
    "mc_passes",
    "mask_ratio",
    "lambda",
    "stop_target_grad",
    "adapt_lr",
    "pretrain_epochs",
    "pretrain_lr",
    "seeds",
    "sweep_ratios",
    "extra_targets",
    "out_dir",
    "checkpoint",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, kind: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| anyhow!("key {key}: cannot parse {value:?} as {kind}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => bail!("key {key}: expected true or false, got {other:?}"),
    }
}

fn split_list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Applies one `key = value` assignment. Unknown keys and out-of-range
    /// values are rejected with a message naming the key and constraint.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "image_size" => self.image_size = parse_num(key, value, "an integer")?,
            "num_classes" => self.num_classes = parse_num(key, value, "an integer")?,
            "texture_amplitude" => {
                self.texture_amplitude = parse_num(key, value, "a number")?
            }
            "corruptions" => {
                let kinds: Vec<CorruptionKind> = split_list(value)
                    .map(|n| {
                        CorruptionKind::parse(n).map_err(|_| {
                            anyhow!(
                                "key corruptions: unknown kind {n:?}; known kinds are {}",
                                join(&CORRUPTION_KINDS.map(|k| k.name()))
                            )
                        })
                    })
                    .collect::<Result<_>>()?;
                if kinds.is_empty() {
                    bail!("key corruptions: needs at least one corruption kind");
                }
                self.corruptions = kinds;
            }
            "severity" => {
                let s: u8 = parse_num(key, value, "an integer")?;
                if s > 5 {
                    bail!("key severity: must lie in [0, 5], got {s}");
                }
                self.severity = s;
            }
            "per_domain" => self.per_domain = parse_num(key, value, "an integer")?,
            "rounds" => self.rounds = parse_num(key, value, "an integer")?,
            "pretrain_count" => self.pretrain_count = parse_num(key, value, "an integer")?,
            "holdout_count" => self.holdout_count = parse_num(key, value, "an integer")?,
            "patch_size" => self.patch_size = parse_num(key, value, "an integer")?,
            "embed_dim" => self.embed_dim = parse_num(key, value, "an integer")?,
            "depth" => self.depth = parse_num(key, value, "an integer")?,
            "heads" => self.heads = parse_num(key, value, "an integer")?,
            "ffn_mult" => self.ffn_mult = parse_num(key, value, "an integer")?,
            "mc_dropout_p" => self.mc_dropout_p = parse_num(key, value, "a number")?,
            "method" => {
                self.method = MethodKind::parse(value.trim())
                    .map_err(|e| anyhow!("key method: {e}"))?
            }
            "target" => {
                self.target = TargetKind::parse(value.trim())
                    .map_err(|e| anyhow!("key target: {e}"))?
            }
            "mc_passes" => self.mc_passes = parse_num(key, value, "an integer")?,
            "mask_ratio" => {
                let r: u32 = parse_num(key, value, "an integer")?;
                if r > 100 {
                    bail!("key mask_ratio: must lie in [0, 100], got {r}");
                }
                self.mask_ratio = r;
            }
            "lambda" => self.lambda = parse_num(key, value, "a number")?,
            "stop_target_grad" => self.stop_target_grad = parse_bool(key, value)?,
            "adapt_lr" => self.adapt_lr = parse_num(key, value, "a number")?,
            "pretrain_epochs" => self.pretrain_epochs = parse_num(key, value, "an integer")?,
            "pretrain_lr" => self.pretrain_lr = parse_num(key, value, "a number")?,
            "seeds" => {
                let seeds: Vec<u64> = split_list(value)
                    .map(|s| parse_num("seeds", s, "an integer"))
                    .collect::<Result<_>>()?;
                if seeds.is_empty() {
                    bail!("key seeds: needs at least one seed");
                }
                self.seeds = seeds;
            }
            "sweep_ratios" => {
                let ratios: Vec<u32> = split_list(value)
                    .map(|s| parse_num("sweep_ratios", s, "an integer"))
                    .collect::<Result<_>>()?;
                if ratios.is_empty() {
                    bail!("key sweep_ratios: needs at least one ratio");
                }
                if let Some(bad) = ratios.iter().find(|&&r| r > 100) {
                    bail!("key sweep_ratios: ratio must lie in [0, 100], got {bad}");
                }
                self.sweep_ratios = ratios;
            }
            "extra_targets" => {
                self.extra_targets = split_list(value)
                    .map(|n| {
                        TargetKind::parse(n).map_err(|e| anyhow!("key extra_targets: {e}"))
                    })
                    .collect::<Result<_>>()?;
            }
            "out_dir" => {
                let dir = value.trim();
                if dir.is_empty() {
                    bail!("key out_dir: needs a non-empty path");
                }
                self.out_dir = dir.to_string();
            }
            "checkpoint" => {
                let p = value.trim();
                self.checkpoint = if p.is_empty() { None } else { Some(p.to_string()) };
            }
            other => bail!(
                "unknown key {other:?}; known keys are {}",
                CONFIG_KEYS.join(", ")
            ),
        }
        Ok(())
    }

    /// Parses a config file: one `key = value` per line, `#` starts a
    /// comment, blank lines ignored.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                anyhow!(
                    "{}:{}: expected `key = value`, got {raw:?}",
                    path.display(),
                    lineno + 1
                )
            })?;
            self.apply(key.trim(), value.trim())
                .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        }
        Ok(())
    }

    /// Builds the final configuration: defaults, then the file (if any),
    /// then flag overrides in order. Cross-field validation runs last.
    pub fn from_sources(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        for (key, value) in overrides {
            cfg.apply(key, value)
                .with_context(|| format!("flag --{key}"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field validation via the experiment plan and method builders.
    pub fn validate(&self) -> Result<()> {
        let plan = self.plan()?;
        self.adapt_method(&plan)?;
        Ok(())
    }

    /// The corruption sequence at the configured severity.
    pub fn order(&self) -> Result<Vec<Corruption>> {
        self.corruptions
            .iter()
            .map(|&k| Corruption::new(k, self.severity).map_err(|e| anyhow!("{e}")))
            .collect()
    }

    /// Maps the flat key namespace onto the experiment plan.
    pub fn plan(&self) -> Result<ExperimentPlan> {
        let spec = ToySpec {
            num_classes: self.num_classes,
            image_size: self.image_size,
            texture_amplitude: self.texture_amplitude,
        };
        let vit = VitConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            num_classes: self.num_classes,
            mc_dropout_p: self.mc_dropout_p,
            decoder_dim: TargetKind::Hog.dim(self.patch_size),
        };
        let plan = ExperimentPlan {
            spec,
            vit,
            order: self.order()?,
            per_domain: self.per_domain,
            rounds: self.rounds,
            pretrain_count: self.pretrain_count,
            holdout_count: self.holdout_count,
            pretrain_epochs: self.pretrain_epochs,
            pretrain_lr: self.pretrain_lr,
            adapt_lr: self.adapt_lr,
            mask_ratio: self.mask_ratio,
            lambda: self.lambda,
            stop_target_grad: self.stop_target_grad,
            mc_passes: self.mc_passes,
            seeds: self.seeds.clone(),
            extra_targets: self.extra_targets.clone(),
        };
        plan.validate().map_err(|e| anyhow!("{e}"))?;
        Ok(plan)
    }

    /// The adaptation method for single-run commands: the configured kind
    /// with the configured reconstruction target.
    pub fn adapt_method(&self, plan: &ExperimentPlan) -> Result<AdaptMethod> {
        let mut method = plan.method(self.method);
        method.target = self.target;
        method.validate().map_err(|e| anyhow!("{e}"))?;
        Ok(method)
    }

    /// First seed; single-model commands (pretrain, adapt, hog-dump,
    /// gen-data) run under this one.
    pub fn primary_seed(&self) -> u64 {
        self.seeds[0]
    }

    /// The fully-resolved configuration as a config file. Parsing the
    /// snapshot reproduces this configuration exactly.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# resolved run configuration");
        let _ = writeln!(out, "image_size = {}", self.image_size);
        let _ = writeln!(out, "num_classes = {}", self.num_classes);
        let _ = writeln!(out, "texture_amplitude = {}", self.texture_amplitude);
        let _ = writeln!(
            out,
            "corruptions = {}",
            join(&self.corruptions.iter().map(|k| k.name()).collect::<Vec<_>>())
        );
        let _ = writeln!(out, "severity = {}", self.severity);
        let _ = writeln!(out, "per_domain = {}", self.per_domain);
        let _ = writeln!(out, "rounds = {}", self.rounds);
        let _ = writeln!(out, "pretrain_count = {}", self.pretrain_count);
        let _ = writeln!(out, "holdout_count = {}", self.holdout_count);
        let _ = writeln!(out, "patch_size = {}", self.patch_size);
        let _ = writeln!(out, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(out, "depth = {}", self.depth);
        let _ = writeln!(out, "heads = {}", self.heads);
        let _ = writeln!(out, "ffn_mult = {}", self.ffn_mult);
        let _ = writeln!(out, "mc_dropout_p = {}", self.mc_dropout_p);
        let _ = writeln!(out, "method = {}", self.method.name());
        let _ = writeln!(out, "target = {}", self.target.name());
        let _ = writeln!(out, "mc_passes = {}", self.mc_passes);
        let _ = writeln!(out, "mask_ratio = {}", self.mask_ratio);
        let _ = writeln!(out, "lambda = {}", self.lambda);
        let _ = writeln!(out, "stop_target_grad = {}", self.stop_target_grad);
        let _ = writeln!(out, "adapt_lr = {}", self.adapt_lr);
        let _ = writeln!(out, "pretrain_epochs = {}", self.pretrain_epochs);
        let _ = writeln!(out, "pretrain_lr = {}", self.pretrain_lr);
        let _ = writeln!(out, "seeds = {}", join(&self.seeds));
        let _ = writeln!(out, "sweep_ratios = {}", join(&self.sweep_ratios));
        let _ = writeln!(
            out,
            "extra_targets = {}",
            join(&self.extra_targets.iter().map(|t| t.name()).collect::<Vec<_>>())
        );
        let _ = writeln!(out, "out_dir = {}", self.out_dir);
        let _ = writeln!(out, "checkpoint = {}", self.checkpoint.as_deref().unwrap_or(""));
        out
    }
}
