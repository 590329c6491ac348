//! `adma` — a desk-scale continual test-time adaptation lab.
//!
//! A tiny vision transformer adapts online, one sample at a time, to a
//! stream of corrupted toy images: uncertainty-driven token masking, a
//! masked-versus-original consistency loss, and gradient-histogram
//! reconstruction. Subcommands cover source pretraining, single online
//! runs, the method-ablation grid, mask-ratio sweeps, inter-domain
//! divergence analytics, and raw-data dumps.

mod commands;
mod config;

use anyhow::{bail, Result};
use config::RunConfig;
use std::path::Path;

const USAGE: &str = "\
adma — continual test-time adaptation lab

usage: adma <command> [--config FILE] [--key value ...]

commands:
  pretrain          train the source model; writes model.ckpt + pretrain.csv
  adapt             one online adaptation run; writes report.csv + losses.csv
  ablate            full method grid across seeds; writes ablation.csv
  sweep-mask-ratio  adma-dam-hog across mask ratios; writes sweep.csv
  divergence        adjacent-domain JS, source vs adapted; writes divergence.csv
  hog-dump          per-cell HOG descriptor of one generated image; writes hog.csv
  gen-data          dump the corruption stream as PPM images + manifest.csv

configuration:
  --config FILE     load `key = value` lines (# comments) before the flags
  --key value       override any config key; unknown keys are rejected

  every run writes a resolved config.snapshot into out_dir, and the
  snapshot re-runs the experiment bit-identically.

keys and defaults:
";

fn usage() -> String {
    let defaults = RunConfig::default().snapshot();
    let indented: String = defaults
        .lines()
        .skip(1) // the "# resolved" comment
        .map(|l| format!("  {l}\n"))
        .collect();
    format!("{USAGE}{indented}")
}

fn run() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = args.first() else {
        print!("{}", usage());
        bail!("missing command");
    };
    if command == "-h" || command == "--help" || command == "help" {
        print!("{}", usage());
        return Ok(());
    }

    let mut config_path: Option<String> = None;
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut i = 1;
    while i < args.len() {
        let Some(key) = args[i].strip_prefix("--") else {
            bail!("expected a --key, got {:?}", args[i]);
        };
        if key == "help" || key == "h" {
            print!("{}", usage());
            return Ok(());
        }
        let Some(value) = args.get(i + 1) else {
            bail!("flag --{key} needs a value");
        };
        if key == "config" {
            config_path = Some(value.clone());
        } else {
            overrides.push((key.to_string(), value.clone()));
        }
        i += 2;
    }

    let cfg = RunConfig::from_sources(config_path.as_deref().map(Path::new), &overrides)?;

    match command.as_str() {
        "pretrain" => commands::pretrain(&cfg),
        "adapt" => commands::adapt(&cfg),
        "ablate" => commands::ablate(&cfg),
        "sweep-mask-ratio" => commands::sweep(&cfg),
        "divergence" => commands::divergence(&cfg),
        "hog-dump" => commands::hog_dump(&cfg),
        "gen-data" => commands::gen_data(&cfg),
        other => bail!(
            "unknown command {other:?}; expected pretrain | adapt | ablate | \
             sweep-mask-ratio | divergence | hog-dump | gen-data"
        ),
    }
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
