//! Toy data and continually-changing corruption domains.
//!
//! Source images are procedurally rendered shapes (circle, square,
//! triangle, cross) on textured backgrounds. Ten parameterized corruption
//! kinds with five severities each turn clean images into target domains;
//! a `DomainStream` serves (image, label, domain) triples in a fixed
//! domain order, each element exactly once.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, StreamRng};
use crate::Tensor;

pub const CLASS_NAMES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const MIN_IMAGE_SIZE: usize = 16;

#[derive(Debug, Clone)]
pub struct ToySpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub texture_amplitude: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            image_size: 32,
            texture_amplitude: 0.15,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::InvalidArg { op: "toy_spec", msg };
        if self.num_classes < 2 || self.num_classes > CLASS_NAMES.len() {
            return Err(bad(format!(
                "num_classes {} must lie in [2, {}]",
                self.num_classes,
                CLASS_NAMES.len()
            )));
        }
        if self.image_size < MIN_IMAGE_SIZE {
            return Err(bad(format!(
                "image_size {} is too small to render a fully visible shape (min {MIN_IMAGE_SIZE})",
                self.image_size
            )));
        }
        if !(0.0..=0.5).contains(&self.texture_amplitude) {
            return Err(bad(format!(
                "texture_amplitude {} must lie in [0, 0.5]",
                self.texture_amplitude
            )));
        }
        Ok(())
    }
}

// --- corruptions ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    BoxBlur,
    MotionBlur,
    Brightness,
    Contrast,
    Fog,
    Pixelate,
    Quantize,
}

pub const CORRUPTION_KINDS: [CorruptionKind; 10] = [
    CorruptionKind::GaussianNoise,
    CorruptionKind::ShotNoise,
    CorruptionKind::ImpulseNoise,
    CorruptionKind::BoxBlur,
    CorruptionKind::MotionBlur,
    CorruptionKind::Brightness,
    CorruptionKind::Contrast,
    CorruptionKind::Fog,
    CorruptionKind::Pixelate,
    CorruptionKind::Quantize,
];

// Severity parameter tables, index = severity - 1. Each table is strictly
// monotone in distortion strength.
const GAUSS_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
const SHOT_LAMBDA: [f64; 5] = [250.0, 120.0, 60.0, 30.0, 15.0];
const IMPULSE_P: [f64; 5] = [0.01, 0.03, 0.06, 0.10, 0.17];
const BLUR_RADIUS: [usize; 5] = [1, 2, 3, 4, 5];
const MOTION_LEN: [usize; 5] = [3, 5, 7, 9, 11];
const BRIGHT_DELTA: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
const CONTRAST_K: [f64; 5] = [0.75, 0.6, 0.45, 0.3, 0.15];
const FOG_T: [f64; 5] = [0.15, 0.25, 0.35, 0.45, 0.55];
const PIXELATE_F: [usize; 5] = [2, 3, 4, 6, 8];
const QUANT_LEVELS: [usize; 5] = [12, 8, 6, 4, 3];

impl CorruptionKind {
    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::ShotNoise => "shot-noise",
            CorruptionKind::ImpulseNoise => "impulse-noise",
            CorruptionKind::BoxBlur => "box-blur",
            CorruptionKind::MotionBlur => "motion-blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Fog => "fog",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::Quantize => "quantize",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        CORRUPTION_KINDS
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArg {
                op: "corruption_kind",
                msg: format!("unknown corruption kind {s:?}"),
            })
    }
}

/// A corruption kind at a severity. Severity 0 is the identity extension;
/// 1..=5 index the monotone parameter tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl Corruption {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if severity > 5 {
            return Err(Error::InvalidArg {
                op: "corruption",
                msg: format!("severity {severity} must lie in [0, 5]"),
            });
        }
        Ok(Self { kind, severity })
    }

    pub fn name(&self) -> String {
        format!("{}-s{}", self.kind.name(), self.severity)
    }
}

/// All ten kinds at one severity, in canonical order.
pub fn default_corruption_order(severity: u8) -> Result<Vec<Corruption>> {
    CORRUPTION_KINDS
        .iter()
        .map(|&k| Corruption::new(k, severity))
        .collect()
}

fn check_image(op: &'static str, image: &Tensor) -> Result<(usize, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || s[1] == 0 || s[2] == 0 {
        return Err(Error::BadShape {
            op,
            expected: "[3, H, W] image".into(),
            shape: s.to_vec(),
        });
    }
    Ok((s[1], s[2]))
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Separable mean filter with replicate borders, one axis at a time.
fn box_blur(data: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let k = (2 * radius + 1) as f64;
    let mut mid = vec![0.0; data.len()];
    for c in 0..3 {
        let plane = &data[c * h * w..(c + 1) * h * w];
        let out = &mut mid[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dx in -(radius as isize)..=(radius as isize) {
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    acc += plane[y * w + xx];
                }
                out[y * w + x] = acc / k;
            }
        }
    }
    let mut fin = vec![0.0; data.len()];
    for c in 0..3 {
        let plane = &mid[c * h * w..(c + 1) * h * w];
        let out = &mut fin[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -(radius as isize)..=(radius as isize) {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    acc += plane[yy * w + x];
                }
                out[y * w + x] = acc / k;
            }
        }
    }
    fin
}

/// Applies one corruption. Stochastic kinds draw from a stream keyed by
/// `seed` and the kind name; deterministic kinds ignore the seed.
pub fn corrupt(image: &Tensor, c: Corruption, seed: u64) -> Result<Tensor> {
    let (h, w) = check_image("corrupt", image)?;
    if c.severity == 0 {
        return Ok(image.constant());
    }
    let i = (c.severity - 1) as usize;
    let src = image.data();
    let mut rng = StreamRng::new(seed, c.kind.name(), 0);
    let out: Vec<f64> = match c.kind {
        CorruptionKind::GaussianNoise => {
            let sigma = GAUSS_SIGMA[i];
            src.iter().map(|&v| clamp01(v + sigma * rng.normal())).collect()
        }
        CorruptionKind::ShotNoise => {
            // normal approximation of Poisson photon counts at rate v*lambda
            let lambda = SHOT_LAMBDA[i];
            src.iter()
                .map(|&v| clamp01(v + (v / lambda).sqrt() * rng.normal()))
                .collect()
        }
        CorruptionKind::ImpulseNoise => {
            let p = IMPULSE_P[i];
            src.iter()
                .map(|&v| {
                    if rng.next_f64() < p {
                        if rng.next_f64() < 0.5 {
                            0.0
                        } else {
                            1.0
                        }
                    } else {
                        v
                    }
                })
                .collect()
        }
        CorruptionKind::BoxBlur => box_blur(src, h, w, BLUR_RADIUS[i]),
        CorruptionKind::MotionBlur => {
            let len = MOTION_LEN[i];
            let half = (len / 2) as isize;
            let mut out = vec![0.0; src.len()];
            for c_ in 0..3 {
                let plane = &src[c_ * h * w..(c_ + 1) * h * w];
                let dst = &mut out[c_ * h * w..(c_ + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for dx in -half..=half {
                            let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                            acc += plane[y * w + xx];
                        }
                        dst[y * w + x] = acc / len as f64;
                    }
                }
            }
            out
        }
        CorruptionKind::Brightness => {
            let d = BRIGHT_DELTA[i];
            src.iter().map(|&v| clamp01(v + d)).collect()
        }
        CorruptionKind::Contrast => {
            let k = CONTRAST_K[i];
            src.iter().map(|&v| clamp01(0.5 + k * (v - 0.5))).collect()
        }
        CorruptionKind::Fog => {
            let t = FOG_T[i];
            let fx = 1.0 + rng.below(2) as f64;
            let fy = 1.0 + rng.below(2) as f64;
            let p1 = rng.next_f64();
            let p2 = rng.next_f64();
            let tau = std::f64::consts::TAU;
            let mut out = vec![0.0; src.len()];
            for y in 0..h {
                for x in 0..w {
                    let haze = 0.85
                        + 0.15
                            * (tau * (fx * x as f64 / w as f64 + p1)).sin()
                            * (tau * (fy * y as f64 / h as f64 + p2)).cos();
                    for c_ in 0..3 {
                        let v = src[c_ * h * w + y * w + x];
                        out[c_ * h * w + y * w + x] = clamp01((1.0 - t) * v + t * haze);
                    }
                }
            }
            out
        }
        CorruptionKind::Pixelate => {
            let f = PIXELATE_F[i];
            let mut out = vec![0.0; src.len()];
            for c_ in 0..3 {
                let plane = &src[c_ * h * w..(c_ + 1) * h * w];
                let dst = &mut out[c_ * h * w..(c_ + 1) * h * w];
                let mut by = 0;
                while by < h {
                    let y1 = (by + f).min(h);
                    let mut bx = 0;
                    while bx < w {
                        let x1 = (bx + f).min(w);
                        let mut acc = 0.0;
                        for y in by..y1 {
                            for x in bx..x1 {
                                acc += plane[y * w + x];
                            }
                        }
                        let mean = acc / ((y1 - by) * (x1 - bx)) as f64;
                        for y in by..y1 {
                            for x in bx..x1 {
                                dst[y * w + x] = mean;
                            }
                        }
                        bx = x1;
                    }
                    by = y1;
                }
            }
            out
        }
        CorruptionKind::Quantize => {
            let levels = (QUANT_LEVELS[i] - 1) as f64;
            src.iter().map(|&v| (v * levels).round() / levels).collect()
        }
    };
    Tensor::new(vec![3, h, w], out)
}

// --- source rendering ----------------------------------------------------

fn inside_shape(label: usize, x: f64, y: f64, cx: f64, cy: f64, r: f64) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    match label {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        2 => {
            let a = (cx, cy - r);
            let b = (cx - 0.9 * r, cy + 0.7 * r);
            let c = (cx + 0.9 * r, cy + 0.7 * r);
            let sign = |p: (f64, f64), q: (f64, f64), t: (f64, f64)| {
                (q.0 - p.0) * (t.1 - p.1) - (q.1 - p.1) * (t.0 - p.0)
            };
            let d1 = sign(a, b, (x, y));
            let d2 = sign(b, c, (x, y));
            let d3 = sign(c, a, (x, y));
            let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
            let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
            !(neg && pos)
        }
        3 => (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r),
        _ => unreachable!("labels validated upstream"),
    }
}

fn render_shape(spec: &ToySpec, label: usize, rng: &mut StreamRng) -> Tensor {
    let s = spec.image_size;
    let sf = s as f64;
    let amp = spec.texture_amplitude;

    let fx = 1.0 + rng.below(2) as f64;
    let fy = 1.0 + rng.below(2) as f64;
    let phase1 = rng.next_f64();
    let phase2 = rng.next_f64();
    let fg: Vec<f64> = (0..3).map(|_| 0.78 + 0.17 * rng.next_f64()).collect();

    let r_min = sf / 3.2;
    let r_max = sf / 2.5;
    let r = r_min + rng.next_f64() * (r_max - r_min);
    let lo = r + 2.0;
    let hi = sf - 3.0 - r;
    let cx = lo + rng.next_f64() * (hi - lo);
    let cy = lo + rng.next_f64() * (hi - lo);

    let tau = std::f64::consts::TAU;
    let mut data = vec![0.0; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let pattern = (tau * (fx * x as f64 / sf + phase1)).sin()
                * (tau * (fy * y as f64 / sf + phase2)).cos();
            let inside = inside_shape(label, x as f64, y as f64, cx, cy, r);
            for c in 0..3 {
                let speckle = amp * 0.12 * (2.0 * rng.next_f64() - 1.0);
                let v = if inside {
                    fg[c] - 0.05 * amp + speckle * 0.5
                } else {
                    0.35 + amp * pattern + speckle
                };
                data[c * s * s + y * s + x] = clamp01(v);
            }
        }
    }
    Tensor::new(vec![3, s, s], data).expect("rendered pixels are finite")
}

/// Class-balanced labeled clean images, deterministic from the seed.
pub fn gen_source(spec: &ToySpec, count: usize, seed: u64) -> Result<Vec<(Tensor, usize)>> {
    spec.validate()?;
    if count < spec.num_classes {
        return Err(Error::InvalidArg {
            op: "gen_source",
            msg: format!(
                "count {count} cannot balance {} classes",
                spec.num_classes
            ),
        });
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % spec.num_classes;
        let mut rng = StreamRng::new(seed, "source-image", i as u64);
        out.push((render_shape(spec, label, &mut rng), label));
    }
    Ok(out)
}

// --- streams -------------------------------------------------------------

/// Identifies which corrupted segment a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DomainId {
    pub round: usize,
    pub corruption: Corruption,
}

impl DomainId {
    pub fn name(&self) -> String {
        format!("{}-r{}", self.corruption.name(), self.round + 1)
    }
}

#[derive(Debug, Clone)]
pub struct StreamSample {
    pub image: Tensor,
    pub label: usize,
    pub domain: DomainId,
    pub index: usize,
}

/// One-pass stream over corrupted domains. Samples are generated lazily on
/// demand; a consumed element is never re-served, and drawing past the end
/// is an error.
#[derive(Debug, Clone)]
pub struct DomainStream {
    spec: ToySpec,
    order: Vec<Corruption>,
    per_domain: usize,
    rounds: usize,
    seed: u64,
    cursor: usize,
}

impl DomainStream {
    pub fn total_len(&self) -> usize {
        self.rounds * self.order.len() * self.per_domain
    }

    pub fn remaining(&self) -> usize {
        self.total_len() - self.cursor
    }

    pub fn domain_order(&self) -> Vec<DomainId> {
        let mut out = Vec::with_capacity(self.rounds * self.order.len());
        for round in 0..self.rounds {
            for &corruption in &self.order {
                out.push(DomainId { round, corruption });
            }
        }
        out
    }

    pub fn next_sample(&mut self) -> Result<StreamSample> {
        if self.cursor >= self.total_len() {
            return Err(Error::StreamExhausted);
        }
        let index = self.cursor;
        self.cursor += 1;

        let per_round = self.order.len() * self.per_domain;
        let round = index / per_round;
        let within = index % per_round;
        let domain_idx = within / self.per_domain;
        let offset = within % self.per_domain;
        let corruption = self.order[domain_idx];

        // balanced labels within each domain segment, shuffled per segment
        let segment = (round * self.order.len() + domain_idx) as u64;
        let mut labels: Vec<usize> =
            (0..self.per_domain).map(|j| j % self.spec.num_classes).collect();
        StreamRng::new(self.seed, "stream-labels", segment).shuffle(&mut labels);
        let label = labels[offset];

        let mut rng = StreamRng::new(self.seed, "stream-image", index as u64);
        let clean = render_shape(&self.spec, label, &mut rng);
        let image = corrupt(&clean, corruption, derive_seed(self.seed, "stream-corrupt", index as u64))?;
        Ok(StreamSample {
            image,
            label,
            domain: DomainId { round, corruption },
            index,
        })
    }
}

pub fn build_stream(
    spec: &ToySpec,
    order: &[Corruption],
    per_domain: usize,
    rounds: usize,
    seed: u64,
) -> Result<DomainStream> {
    spec.validate()?;
    if order.is_empty() {
        return Err(Error::InvalidArg {
            op: "build_stream",
            msg: "corruption order is empty".into(),
        });
    }
    if per_domain == 0 || rounds == 0 {
        return Err(Error::InvalidArg {
            op: "build_stream",
            msg: "per_domain and rounds must be at least 1".into(),
        });
    }
    Ok(DomainStream {
        spec: spec.clone(),
        order: order.to_vec(),
        per_domain,
        rounds,
        seed,
        cursor: 0,
    })
}

/// 8-bit RGB interleaved view of an image, for dump files.
pub fn image_to_rgb8(image: &Tensor) -> Result<(u32, u32, Vec<u8>)> {
    let (h, w) = check_image("image_to_rgb8", image)?;
    let data = image.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = clamp01(data[c * h * w + y * w + x]);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok((w as u32, h as u32, out))
}
