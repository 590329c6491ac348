//! Feature-distribution divergence between adjacent domains.
//!
//! Pooled feature scalars from each domain are histogrammed over shared
//! bin edges; adjacent domains are compared with Jensen-Shannon divergence
//! (symmetric, bounded by ln 2).

use super::adapt::AdaptationReport;
use crate::error::{Error, Result};

pub const DIVERGENCE_BINS: usize = 64;
const SMOOTHING: f64 = 1e-10;

/// Histogram counts of `samples` over `bins` uniform cells spanning
/// `[lo, hi]`; out-of-range values clamp into the edge cells.
pub fn histogram(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Vec<f64>> {
    if samples.is_empty() || bins == 0 || !(hi > lo) {
        return Err(Error::InvalidArg {
            op: "histogram",
            msg: "need samples, at least one bin, and hi > lo".into(),
        });
    }
    let mut counts = vec![0.0; bins];
    let scale = bins as f64 / (hi - lo);
    for &v in samples {
        let cell = (((v - lo) * scale).floor() as isize).clamp(0, bins as isize - 1);
        counts[cell as usize] += 1.0;
    }
    Ok(counts)
}

fn smooth(h: &[f64]) -> Vec<f64> {
    let shifted: Vec<f64> = h.iter().map(|&v| v + SMOOTHING).collect();
    let total: f64 = shifted.iter().sum();
    shifted.iter().map(|v| v / total).collect()
}

/// `sum_i P(i) * ln(P(i) / Q(i))` after per-bin smoothing and
/// renormalization. Histograms may be raw counts.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.is_empty() || p.len() != q.len() {
        return Err(Error::InvalidArg {
            op: "kl",
            msg: format!("histogram lengths {} vs {}", p.len(), q.len()),
        });
    }
    if p.iter().chain(q).any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::InvalidArg {
            op: "kl",
            msg: "histograms must be finite and nonnegative".into(),
        });
    }
    let ps = smooth(p);
    let qs = smooth(q);
    Ok(ps
        .iter()
        .zip(&qs)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum())
}

/// Jensen-Shannon divergence: `KL(P||M)/2 + KL(Q||M)/2` with `M` the
/// midpoint. Symmetric; always in `[0, ln 2]`.
pub fn js(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidArg {
            op: "js",
            msg: format!("histogram lengths {} vs {}", p.len(), q.len()),
        });
    }
    // normalize first so differently-sized sample sets mix evenly
    let ps = smooth(p);
    let qs = smooth(q);
    let m: Vec<f64> = ps.iter().zip(&qs).map(|(&a, &b)| 0.5 * (a + b)).collect();
    Ok(0.5 * kl(&ps, &m)? + 0.5 * kl(&qs, &m)?)
}

#[derive(Debug, Clone)]
pub struct DivergenceTable {
    pub method: String,
    pub seed: u64,
    /// (left domain, right domain, JS) for each adjacent pair.
    pub pairs: Vec<(String, String, f64)>,
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl DivergenceTable {
    pub fn mean_js(&self) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        self.pairs.iter().map(|(_, _, v)| v).sum::<f64>() / self.pairs.len() as f64
    }
}

/// JS divergence between each pair of adjacent domains in a report, over
/// bin edges shared by every compared domain.
pub fn divergence_table(report: &AdaptationReport, bins: usize) -> Result<DivergenceTable> {
    if report.domain_features.iter().any(|f| f.is_empty()) {
        return Err(Error::InvalidArg {
            op: "divergence_table",
            msg: "a domain has no feature samples".into(),
        });
    }
    let all: Vec<f64> = report.domain_features.iter().flatten().copied().collect();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in &all {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        // all features identical; widen so the histogram is well-formed
        lo -= 0.5;
        hi += 0.5;
    }
    let mut pairs = Vec::new();
    for w in report.domains.windows(2).zip(report.domain_features.windows(2)) {
        let (doms, feats) = w;
        let hp = histogram(&feats[0], lo, hi, bins)?;
        let hq = histogram(&feats[1], lo, hi, bins)?;
        pairs.push((doms[0].name.clone(), doms[1].name.clone(), js(&hp, &hq)?));
    }
    Ok(DivergenceTable {
        method: report.method.clone(),
        seed: report.seed,
        pairs,
        lo,
        hi,
        bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::adapt::DomainSummary;
    use crate::rng::StreamRng;

    #[test]
    fn kl_of_identical_histograms_is_zero() {
        let p = [0.5, 0.5];
        assert!(kl(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_closed_forms_and_asymmetry() {
        let p = [0.5, 0.5];
        let q = [0.25, 0.75];
        let forward = kl(&p, &q).unwrap();
        let backward = kl(&q, &p).unwrap();
        let want_f = 0.5 * (2.0f64).ln() + 0.5 * (2.0f64 / 3.0).ln();
        let want_b = 0.25 * (1.0f64 / 2.0).ln() + 0.75 * (3.0f64 / 2.0).ln();
        assert!((forward - want_f).abs() < 1e-6, "{forward} vs {want_f}");
        assert!((backward - want_b).abs() < 1e-6);
        assert!((forward - backward).abs() > 1e-3, "asymmetry witness");
    }

    #[test]
    fn kl_is_nonnegative_on_random_histograms() {
        let mut rng = StreamRng::new(0, "kl-gibbs", 0);
        for _ in 0..200 {
            let p: Vec<f64> = (0..16).map(|_| rng.next_f64()).collect();
            let q: Vec<f64> = (0..16).map(|_| rng.next_f64()).collect();
            assert!(kl(&p, &q).unwrap() >= 0.0);
        }
    }

    #[test]
    fn js_bounds_symmetry_and_disjoint_support() {
        assert!(js(&[3.0, 1.0], &[3.0, 1.0]).unwrap().abs() < 1e-9);
        let full = js(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((full - (2.0f64).ln()).abs() < 1e-6);

        let mut rng = StreamRng::new(1, "js-sym", 0);
        for _ in 0..100 {
            let p: Vec<f64> = (0..8).map(|_| rng.next_f64()).collect();
            let q: Vec<f64> = (0..8).map(|_| rng.next_f64()).collect();
            let a = js(&p, &q).unwrap();
            let b = js(&q, &p).unwrap();
            assert!((a - b).abs() < 1e-12);
            assert!((0.0..=(2.0f64).ln() + 1e-12).contains(&a));
        }
        assert!(js(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn unequal_sample_counts_do_not_fake_divergence() {
        // same distribution, different totals: JS must stay near zero
        let p = [10.0, 30.0, 60.0];
        let q = [1.0, 3.0, 6.0];
        assert!(js(&p, &q).unwrap() < 1e-9);
    }

    #[test]
    fn histogram_places_and_clamps() {
        let h = histogram(&[0.0, 0.49, 0.51, 1.0, 2.0, -1.0], 0.0, 1.0, 2).unwrap();
        assert_eq!(h, vec![3.0, 3.0]);
        assert!(histogram(&[], 0.0, 1.0, 2).is_err());
        assert!(histogram(&[0.1], 1.0, 0.0, 2).is_err());
    }

    fn fake_report(features: Vec<Vec<f64>>) -> AdaptationReport {
        let domains = (0..features.len())
            .map(|i| DomainSummary {
                name: format!("d{i}"),
                mistakes: 0,
                count: features[i].len(),
                error_rate: 0.0,
            })
            .collect();
        AdaptationReport {
            method: "test".into(),
            seed: 0,
            domains,
            mean_error: 0.0,
            losses: Vec::new(),
            domain_features: features,
            predictions: Vec::new(),
            labels: Vec::new(),
            wall_seconds: 0.0,
            config: String::new(),
        }
    }

    #[test]
    fn duplicated_domain_scores_zero_pairwise_js() {
        let samples = vec![0.1, 0.4, 0.4, 0.9];
        let report = fake_report(vec![samples.clone(), samples]);
        let table = divergence_table(&report, DIVERGENCE_BINS).unwrap();
        assert_eq!(table.pairs.len(), 1);
        assert!(table.pairs[0].2.abs() < 1e-9);
    }

    #[test]
    fn shifted_features_show_positive_js_within_bound() {
        let mut rng = StreamRng::new(2, "div-shift", 0);
        let a: Vec<f64> = (0..200).map(|_| rng.next_f64()).collect();
        let b: Vec<f64> = (0..200).map(|_| rng.next_f64() + 2.0).collect();
        let c: Vec<f64> = (0..200).map(|_| rng.next_f64() + 2.1).collect();
        let report = fake_report(vec![a, b, c]);
        let table = divergence_table(&report, DIVERGENCE_BINS).unwrap();
        assert_eq!(table.pairs.len(), 2);
        let ln2 = (2.0f64).ln();
        for (_, _, v) in &table.pairs {
            assert!((0.0..=ln2 + 1e-12).contains(v));
        }
        // disjoint ranges diverge harder than overlapping ones
        assert!(table.pairs[0].2 > table.pairs[1].2);
        assert!(table.mean_js() > 0.0);
    }

    #[test]
    fn constant_features_and_empty_domains() {
        let report = fake_report(vec![vec![1.0; 5], vec![1.0; 5]]);
        let table = divergence_table(&report, DIVERGENCE_BINS).unwrap();
        assert!(table.pairs[0].2.abs() < 1e-9);

        let broken = fake_report(vec![vec![1.0], Vec::new()]);
        assert!(divergence_table(&broken, DIVERGENCE_BINS).is_err());
    }
}
