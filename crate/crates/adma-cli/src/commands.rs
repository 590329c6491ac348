//! The seven subcommands. Each validates its configuration, runs one lab
//! operation, writes its artifacts (plus a resolved config snapshot) under
//! `out_dir`, and mirrors every CSV with a table on stdout.

use crate::config::RunConfig;
use adma_core::domains::{image_to_rgb8, CLASS_NAMES};
use adma_core::harness::{
    ablation_csv, divergence_csv, divergence_table, model_for_target, prepare_pretrained,
    run_ablation, run_ctta, sweep_csv, sweep_mask_ratio, AdaptationReport, DivergenceTable,
    MethodKind, DIVERGENCE_BINS,
};
use adma_core::hog::{hog_field, TargetKind};
use adma_core::rng::derive_seed;
use adma_core::vit::Vit;
use anyhow::{anyhow, Context, Result};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

// --- shared plumbing -------------------------------------------------------

/// Creates the output directory and drops the resolved config snapshot in
/// it, making every run directory self-describing.
fn prepare_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))?;
    write_text(&dir.join("config.snapshot"), &cfg.snapshot())?;
    Ok(dir)
}

fn write_text(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents)
        .with_context(|| format!("cannot write {}", path.display()))
}

/// Binary PPM (P6): a standard, viewer-friendly dump for 8-bit RGB.
fn write_ppm(path: &Path, width: u32, height: u32, rgb: &[u8]) -> Result<()> {
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(rgb);
    std::fs::write(path, bytes)
        .with_context(|| format!("cannot write {}", path.display()))
}

/// Plain-text table: header row, aligned columns, first column
/// left-aligned, the rest right-aligned.
fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let emit = |out: &mut String, cells: &[String]| {
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            if i == 0 {
                let _ = write!(out, "{cell:<width$}", width = widths[i]);
            } else {
                let _ = write!(out, "{cell:>width$}", width = widths[i]);
            }
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    };
    emit(
        &mut out,
        &headers.iter().map(|h| h.to_string()).collect::<Vec<_>>(),
    );
    let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1)));
    for row in rows {
        emit(&mut out, row);
    }
    out
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

// --- pretrain --------------------------------------------------------------

pub fn pretrain(cfg: &RunConfig) -> Result<()> {
    let plan = cfg.plan()?;
    let seed = cfg.primary_seed();
    let dir = prepare_out_dir(cfg)?;

    println!("pretraining seed {seed}: {} images, {} epochs", plan.pretrain_count, plan.pretrain_epochs);
    let source = prepare_pretrained(&plan, seed)?;
    let model = model_for_target(&plan, &source, TargetKind::Hog)?;

    let ckpt = dir.join("model.ckpt");
    model.save(&ckpt).map_err(|e| anyhow!("{e}"))?;
    let csv = format!("seed,holdout_accuracy\n{seed},{}\n", source.accuracy);
    write_text(&dir.join("pretrain.csv"), &csv)?;

    println!();
    print!(
        "{}",
        render_table(
            &["seed", "holdout_accuracy"],
            &[vec![seed.to_string(), fmt4(source.accuracy)]],
        )
    );
    println!("\ncheckpoint: {}", ckpt.display());
    Ok(())
}

// --- adapt -----------------------------------------------------------------

/// A model ready for adaptation: loaded from the configured checkpoint, or
/// pretrained on the spot when no checkpoint is given.
fn source_model(cfg: &RunConfig, plan: &adma_core::harness::ExperimentPlan, target: TargetKind, seed: u64) -> Result<Vit> {
    match &cfg.checkpoint {
        Some(path) => {
            let path = Path::new(path);
            let mut vit_cfg = plan.vit.clone();
            vit_cfg.decoder_dim = target.dim(vit_cfg.patch_size);
            let mut model = Vit::new(
                vit_cfg,
                derive_seed(seed, "target-model-init", target.dim(plan.vit.patch_size) as u64),
            )
            .map_err(|e| anyhow!("{e}"))?;
            model
                .load(path)
                .map_err(|e| anyhow!("{e}"))
                .with_context(|| format!("cannot load checkpoint {}", path.display()))?;
            Ok(model)
        }
        None => {
            println!("no checkpoint configured; pretraining seed {seed} first");
            let source = prepare_pretrained(plan, seed)?;
            println!("clean holdout accuracy {:.4}", source.accuracy);
            Ok(model_for_target(plan, &source, target)?)
        }
    }
}

fn report_csv(report: &AdaptationReport) -> String {
    let mut out = String::from("method,seed,domain,count,mistakes,error,mean\n");
    for d in &report.domains {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            report.method, report.seed, d.name, d.count, d.mistakes, d.error_rate,
            report.mean_error
        );
    }
    out
}

fn losses_csv(report: &AdaptationReport) -> String {
    let mut out = String::from("step,l_con,l_rec,l_total\n");
    for (i, l) in report.losses.iter().enumerate() {
        let _ = writeln!(out, "{},{},{},{}", i, l.l_con, l.l_rec, l.l_total);
    }
    out
}

pub fn adapt(cfg: &RunConfig) -> Result<()> {
    let plan = cfg.plan()?;
    let method = cfg.adapt_method(&plan)?;
    let seed = cfg.primary_seed();
    let dir = prepare_out_dir(cfg)?;

    let mut model = source_model(cfg, &plan, method.target, seed)?;
    let stream = plan.stream_for_seed(seed)?;
    println!(
        "adapting online: method {}, {} samples across {} domains",
        method.label(),
        stream.total_len(),
        plan.order.len() * plan.rounds
    );
    let report = run_ctta(&mut model, stream, &method, seed)?;

    write_text(&dir.join("report.csv"), &report_csv(&report))?;
    write_text(&dir.join("losses.csv"), &losses_csv(&report))?;

    let rows: Vec<Vec<String>> = report
        .domains
        .iter()
        .map(|d| {
            vec![
                d.name.clone(),
                d.count.to_string(),
                d.mistakes.to_string(),
                fmt4(d.error_rate),
            ]
        })
        .collect();
    println!();
    print!(
        "{}",
        render_table(&["domain", "count", "mistakes", "error"], &rows)
    );
    println!(
        "\nmethod {}  seed {}  mean error {:.4}  ({:.1}s)",
        report.method, report.seed, report.mean_error, report.wall_seconds
    );
    Ok(())
}

// --- ablate ----------------------------------------------------------------

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let plan = cfg.plan()?;
    let dir = prepare_out_dir(cfg)?;

    let result = run_ablation(&plan, |line| println!("{line}"))?;

    write_text(&dir.join("ablation.csv"), &ablation_csv(&result.rows))?;
    let mut acc = String::from("seed,holdout_accuracy\n");
    for (seed, a) in &result.accuracies {
        let _ = writeln!(acc, "{seed},{a}");
    }
    write_text(&dir.join("pretrain.csv"), &acc)?;

    let labels: Vec<String> = plan.grid().iter().map(|m| m.label()).collect();
    let source_avg = result
        .seed_average("source-only")
        .ok_or_else(|| anyhow!("ablation produced no source-only runs"))?;
    let rows: Vec<Vec<String>> = labels
        .iter()
        .map(|label| {
            let mean = result.seed_average(label).unwrap_or(f64::NAN);
            vec![label.clone(), fmt4(mean), fmt4(source_avg - mean)]
        })
        .collect();
    println!();
    print!(
        "{}",
        render_table(
            &["method", "mean_error(seed avg)", "gain vs source-only"],
            &rows
        )
    );
    println!("\nwrote {}", dir.join("ablation.csv").display());
    Ok(())
}

// --- sweep-mask-ratio ------------------------------------------------------

pub fn sweep(cfg: &RunConfig) -> Result<()> {
    let plan = cfg.plan()?;
    let dir = prepare_out_dir(cfg)?;

    let rows = sweep_mask_ratio(&plan, &cfg.sweep_ratios, |line| println!("{line}"))?;
    write_text(&dir.join("sweep.csv"), &sweep_csv(&rows))?;

    let table: Vec<Vec<String>> = cfg
        .sweep_ratios
        .iter()
        .map(|&ratio| {
            let means: Vec<f64> = rows
                .iter()
                .filter(|r| r.ratio == ratio)
                .map(|r| r.mean_error)
                .collect();
            let avg = means.iter().sum::<f64>() / means.len() as f64;
            vec![format!("{ratio}%"), fmt4(avg)]
        })
        .collect();
    println!();
    print!(
        "{}",
        render_table(&["mask_ratio", "mean_error(seed avg)"], &table)
    );
    println!("\nwrote {}", dir.join("sweep.csv").display());
    Ok(())
}

// --- divergence ------------------------------------------------------------

/// Seed-averaged adjacent-domain JS tables for the frozen source model and
/// the configured adaptation method.
pub fn divergence(cfg: &RunConfig) -> Result<()> {
    let plan = cfg.plan()?;
    let dir = prepare_out_dir(cfg)?;

    let mut methods = vec![plan.method(MethodKind::SourceOnly)];
    let configured = cfg.adapt_method(&plan)?;
    if configured.label() != methods[0].label() {
        methods.push(configured);
    }

    // tables[m][s] = table for method m under seed s
    let mut tables: Vec<Vec<DivergenceTable>> = vec![Vec::new(); methods.len()];
    for &seed in &plan.seeds {
        let source = prepare_pretrained(&plan, seed)?;
        println!(
            "seed {seed}: pretrained, clean holdout accuracy {:.3}",
            source.accuracy
        );
        for (mi, method) in methods.iter().enumerate() {
            let mut model = model_for_target(&plan, &source, method.target)?;
            let stream = plan.stream_for_seed(seed)?;
            let report = run_ctta(&mut model, stream, method, seed)?;
            let table = divergence_table(&report, DIVERGENCE_BINS)?;
            println!(
                "seed {seed}: {} mean adjacent JS {:.4}",
                method.label(),
                table.mean_js()
            );
            tables[mi].push(table);
        }
    }

    // Average each adjacent pair across seeds; the pair list is identical
    // for every seed because all runs share one domain order.
    let averaged: Vec<DivergenceTable> = tables
        .iter()
        .map(|per_seed| {
            let first = &per_seed[0];
            let pairs = first
                .pairs
                .iter()
                .enumerate()
                .map(|(i, (a, b, _))| {
                    let mean = per_seed.iter().map(|t| t.pairs[i].2).sum::<f64>()
                        / per_seed.len() as f64;
                    (a.clone(), b.clone(), mean)
                })
                .collect();
            DivergenceTable {
                method: first.method.clone(),
                seed: 0,
                pairs,
                lo: first.lo,
                hi: first.hi,
                bins: first.bins,
            }
        })
        .collect();

    write_text(&dir.join("divergence.csv"), &divergence_csv(&averaged))?;

    for table in &averaged {
        let rows: Vec<Vec<String>> = table
            .pairs
            .iter()
            .map(|(a, b, v)| vec![format!("{a}->{b}"), fmt4(*v)])
            .collect();
        println!("\nmethod {} (seed-averaged)", table.method);
        print!("{}", render_table(&["pair", "js"], &rows));
        println!("mean adjacent JS: {:.4}", table.mean_js());
    }
    println!("\nwrote {}", dir.join("divergence.csv").display());
    Ok(())
}

// --- hog-dump --------------------------------------------------------------

pub fn hog_dump(cfg: &RunConfig) -> Result<()> {
    let plan = cfg.plan()?;
    let seed = cfg.primary_seed();
    let dir = prepare_out_dir(cfg)?;

    let images = adma_core::domains::gen_source(&plan.spec, plan.spec.num_classes, seed)?;
    let (image, label) = &images[0];
    let field = hog_field(image)?;
    let shape = field.shape().to_vec(); // [3, bins, cells_y, cells_x]
    let (bins, cy, cx) = (shape[1], shape[2], shape[3]);

    let mut csv = String::from("channel,cell_row,cell_col");
    for b in 0..bins {
        let _ = write!(csv, ",bin{b}");
    }
    csv.push('\n');
    let mut rows = Vec::new();
    let data = field.data();
    for c in 0..3 {
        for iy in 0..cy {
            for ix in 0..cx {
                let mut row = vec![c.to_string(), iy.to_string(), ix.to_string()];
                let _ = write!(csv, "{c},{iy},{ix}");
                for b in 0..bins {
                    let v = data[((c * bins + b) * cy + iy) * cx + ix];
                    let _ = write!(csv, ",{v}");
                    row.push(fmt4(v));
                }
                csv.push('\n');
                rows.push(row);
            }
        }
    }
    write_text(&dir.join("hog.csv"), &csv)?;

    let (w, h, rgb) = image_to_rgb8(image)?;
    write_ppm(&dir.join("image.ppm"), w, h, &rgb)?;

    println!(
        "image: {}x{} {} (class {label}), descriptor shape [3, {bins}, {cy}, {cx}], {} cell rows",
        plan.spec.image_size,
        plan.spec.image_size,
        CLASS_NAMES[*label],
        3 * cy * cx
    );
    println!();
    let mut headers = vec!["channel", "cell_row", "cell_col"];
    let bin_names: Vec<String> = (0..bins).map(|b| format!("bin{b}")).collect();
    headers.extend(bin_names.iter().map(String::as_str));
    print!("{}", render_table(&headers, &rows));
    println!("\nwrote {}", dir.join("hog.csv").display());
    Ok(())
}

// --- gen-data --------------------------------------------------------------

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let plan = cfg.plan()?;
    let seed = cfg.primary_seed();
    let dir = prepare_out_dir(cfg)?;
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir)
        .with_context(|| format!("cannot create {}", img_dir.display()))?;

    let mut stream = plan.stream_for_seed(seed)?;
    let total = stream.total_len();
    let mut manifest = String::from("index,label,class,domain\n");
    let mut per_domain: Vec<(String, usize)> = Vec::new();
    for i in 0..total {
        let sample = stream.next_sample()?;
        let (w, h, rgb) = image_to_rgb8(&sample.image)?;
        write_ppm(&img_dir.join(format!("img_{i:05}.ppm")), w, h, &rgb)?;
        let domain = sample.domain.name();
        let _ = writeln!(
            manifest,
            "{i},{},{},{domain}",
            sample.label, CLASS_NAMES[sample.label]
        );
        match per_domain.last_mut() {
            Some((name, n)) if *name == domain => *n += 1,
            _ => per_domain.push((domain, 1)),
        }
    }
    write_text(&dir.join("manifest.csv"), &manifest)?;

    let rows: Vec<Vec<String>> = per_domain
        .iter()
        .map(|(name, n)| vec![name.clone(), n.to_string()])
        .collect();
    print!("{}", render_table(&["domain", "images"], &rows));
    println!(
        "\nwrote {total} images under {} and {}",
        img_dir.display(),
        dir.join("manifest.csv").display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tables_align_columns() {
        let out = render_table(
            &["name", "value"],
            &[
                vec!["a".into(), "1".into()],
                vec!["longer".into(), "2.5".into()],
            ],
        );
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("name"));
        assert!(lines[2].starts_with("a"));
        assert!(lines[3].starts_with("longer"));
        // right-aligned numeric column ends at a common boundary
        assert_eq!(lines[2].len(), lines[3].len());
    }

    #[test]
    fn ppm_header_is_standard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        write_ppm(&path, 2, 1, &[255, 0, 0, 0, 255, 0]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(bytes.len(), 11 + 6);
    }
}
