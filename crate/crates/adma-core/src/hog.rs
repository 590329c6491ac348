//! Reconstruction targets computed from the input image.
//!
//! The main target is a histogram-of-oriented-gradients field: centered
//! differences with replicated borders, unsigned orientation spread over
//! nine circular bins (centers at k*pi/9), accumulated into 8x8 cells and
//! L2-normalized per cell and channel. Two cheaper targets — raw pixels and
//! Sobel edge magnitudes — share the same per-patch token layout so the
//! decoder only ever sees a `[tokens, dim]` matrix.

use crate::error::{Error, Result};
use crate::Tensor;
use std::f64::consts::PI;

pub const HOG_BINS: usize = 9;
pub const HOG_CELL: usize = 8;
pub const HOG_NORM_EPS: f64 = 1e-5;

/// Which signal the masked tokens are asked to reconstruct.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    Hog,
    Rgb,
    Sobel,
}

impl TargetKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hog" => Ok(Self::Hog),
            "rgb" => Ok(Self::Rgb),
            "sobel" => Ok(Self::Sobel),
            other => Err(Error::Config(format!(
                "unknown reconstruction target {other:?} (expected hog, rgb, or sobel)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Hog => "hog",
            Self::Rgb => "rgb",
            Self::Sobel => "sobel",
        }
    }

    /// Per-token target width for a given patch size.
    pub fn dim(self, patch: usize) -> usize {
        match self {
            Self::Hog => 3 * HOG_BINS * (patch / HOG_CELL) * (patch / HOG_CELL),
            Self::Rgb | Self::Sobel => 3 * patch * patch,
        }
    }
}

fn check_image(op: &'static str, image: &Tensor, unit: usize) -> Result<(usize, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::BadShape {
            op,
            expected: "[3, H, W] image".into(),
            shape: s.to_vec(),
        });
    }
    let (h, w) = (s[1], s[2]);
    if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
        return Err(Error::BadShape {
            op,
            expected: format!("height and width divisible by {unit}"),
            shape: s.to_vec(),
        });
    }
    Ok((h, w))
}

/// Oriented-gradient field `[3, 9, H/8, W/8]`.
pub fn hog_field(image: &Tensor) -> Result<Tensor> {
    let (h, w) = check_image("hog_field", image, HOG_CELL)?;
    let (cy, cx) = (h / HOG_CELL, w / HOG_CELL);
    let cells = cy * cx;
    let bin_width = PI / HOG_BINS as f64;
    let mut field = vec![0.0; 3 * HOG_BINS * cells];
    for c in 0..3 {
        let plane = &image.data()[c * h * w..(c + 1) * h * w];
        let ch_base = c * HOG_BINS * cells;
        for y in 0..h {
            let up = y.saturating_sub(1) * w;
            let down = (y + 1).min(h - 1) * w;
            let row = y * w;
            for x in 0..w {
                let left = x.saturating_sub(1);
                let right = (x + 1).min(w - 1);
                let gx = plane[row + right] - plane[row + left];
                let gy = plane[down + x] - plane[up + x];
                let mag = (gx * gx + gy * gy).sqrt();
                if mag == 0.0 {
                    continue;
                }
                let mut theta = gy.atan2(gx);
                if theta < 0.0 {
                    theta += PI;
                }
                if theta >= PI {
                    theta = 0.0;
                }
                let t = theta / bin_width;
                let k0 = (t as usize).min(HOG_BINS - 1);
                let frac = t - k0 as f64;
                let k1 = (k0 + 1) % HOG_BINS;
                let cell = (y / HOG_CELL) * cx + x / HOG_CELL;
                field[ch_base + k0 * cells + cell] += (1.0 - frac) * mag;
                field[ch_base + k1 * cells + cell] += frac * mag;
            }
        }
        for cell in 0..cells {
            let mut ss = 0.0;
            for b in 0..HOG_BINS {
                let v = field[ch_base + b * cells + cell];
                ss += v * v;
            }
            let inv = 1.0 / (ss + HOG_NORM_EPS * HOG_NORM_EPS).sqrt();
            for b in 0..HOG_BINS {
                field[ch_base + b * cells + cell] *= inv;
            }
        }
    }
    Tensor::new(vec![3, HOG_BINS, cy, cx], field)
}

/// Regroups a field into per-patch tokens `[N, K]`, K = 3*9*(patch/8)^2.
/// Within a token the layout is (channel, bin, cell-row, cell-col); tokens
/// run over patches in row-major order.
pub fn hog_tokens(field: &Tensor, patch: usize) -> Result<Tensor> {
    let s = field.shape();
    if s.len() != 4 || s[0] != 3 || s[1] != HOG_BINS {
        return Err(Error::BadShape {
            op: "hog_tokens",
            expected: "[3, 9, cells_y, cells_x] field".into(),
            shape: s.to_vec(),
        });
    }
    if patch == 0 || patch % HOG_CELL != 0 {
        return Err(Error::InvalidArg {
            op: "hog_tokens",
            msg: format!("patch {patch} must be a positive multiple of {HOG_CELL}"),
        });
    }
    let (cy, cx) = (s[2], s[3]);
    let pc = patch / HOG_CELL;
    if cy % pc != 0 || cx % pc != 0 {
        return Err(Error::BadShape {
            op: "hog_tokens",
            expected: format!("cell grid divisible by {pc} per side"),
            shape: s.to_vec(),
        });
    }
    let (ty, tx) = (cy / pc, cx / pc);
    let k = 3 * HOG_BINS * pc * pc;
    let mut out = Vec::with_capacity(ty * tx * k);
    for tr in 0..ty {
        for tc in 0..tx {
            for c in 0..3 {
                for b in 0..HOG_BINS {
                    for dy in 0..pc {
                        for dx in 0..pc {
                            out.push(field.at(&[c, b, tr * pc + dy, tc * pc + dx]));
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![ty * tx, k], out)
}

/// Raw pixels per patch, `[N, 3*p^2]`, laid out (channel, row, col) within
/// each patch. This is both the `rgb` reconstruction target and the patch
/// extraction used by the encoder's embedding.
pub fn rgb_tokens(image: &Tensor, patch: usize) -> Result<Tensor> {
    if patch == 0 {
        return Err(Error::InvalidArg {
            op: "rgb_tokens",
            msg: "patch must be positive".into(),
        });
    }
    let (h, w) = check_image("rgb_tokens", image, patch)?;
    let (ty, tx) = (h / patch, w / patch);
    let k = 3 * patch * patch;
    let mut out = Vec::with_capacity(ty * tx * k);
    let data = image.data();
    for tr in 0..ty {
        for tc in 0..tx {
            for c in 0..3 {
                for py in 0..patch {
                    let row = (c * h + tr * patch + py) * w + tc * patch;
                    out.extend_from_slice(&data[row..row + patch]);
                }
            }
        }
    }
    Tensor::new(vec![ty * tx, k], out)
}

/// Sobel edge magnitudes per patch, `[N, 3*p^2]`, each token L2-normalized
/// with the same eps guard as the HOG cells.
pub fn sobel_tokens(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (h, w) = check_image("sobel_tokens", image, patch.max(1))?;
    let mut mags = vec![0.0; 3 * h * w];
    for c in 0..3 {
        let plane = &image.data()[c * h * w..(c + 1) * h * w];
        let px = |y: isize, x: isize| -> f64 {
            let y = y.clamp(0, h as isize - 1) as usize;
            let x = x.clamp(0, w as isize - 1) as usize;
            plane[y * w + x]
        };
        for y in 0..h as isize {
            for x in 0..w as isize {
                // paired differences cancel exactly on flat regions
                let gx = (px(y - 1, x + 1) - px(y - 1, x - 1))
                    + 2.0 * (px(y, x + 1) - px(y, x - 1))
                    + (px(y + 1, x + 1) - px(y + 1, x - 1));
                let gy = (px(y + 1, x - 1) - px(y - 1, x - 1))
                    + 2.0 * (px(y + 1, x) - px(y - 1, x))
                    + (px(y + 1, x + 1) - px(y - 1, x + 1));
                mags[(c * h as usize + y as usize) * w + x as usize] =
                    (gx * gx + gy * gy).sqrt();
            }
        }
    }
    let mag_img = Tensor::new(vec![3, h, w], mags)?;
    let raw = rgb_tokens(&mag_img, patch)?;
    let (n, k) = (raw.shape()[0], raw.shape()[1]);
    let mut out = raw.data().to_vec();
    for t in 0..n {
        let row = &mut out[t * k..(t + 1) * k];
        let ss: f64 = row.iter().map(|v| v * v).sum();
        let inv = 1.0 / (ss + HOG_NORM_EPS * HOG_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Tensor::new(vec![n, k], out)
}

/// Target tokens for an image under the chosen kind.
pub fn target_tokens(kind: TargetKind, image: &Tensor, patch: usize) -> Result<Tensor> {
    match kind {
        TargetKind::Hog => {
            let field = hog_field(image)?;
            hog_tokens(&field, patch)
        }
        TargetKind::Rgb => rgb_tokens(image, patch),
        TargetKind::Sobel => sobel_tokens(image, patch),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_zero_field() {
        let img = Tensor::full(&[3, 16, 16], 0.6);
        let field = hog_field(&img).unwrap();
        assert!(field.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn field_shape_for_32x32() {
        let img = Tensor::zeros(&[3, 32, 32]);
        assert_eq!(hog_field(&img).unwrap().shape(), &[3, 9, 4, 4]);
    }

    #[test]
    fn vertical_step_edge_lands_entirely_in_bin_zero() {
        // left half dark, right half bright: gradient is horizontal, so the
        // unsigned orientation is 0 and bin 0 takes all the mass
        let img = Tensor::from_fn(&[3, 16, 16], |i| if i % 16 < 8 { 0.0 } else { 1.0 });
        let field = hog_field(&img).unwrap();
        for c in 0..3 {
            for cell_y in 0..2 {
                for cell_x in 0..2 {
                    for b in 1..HOG_BINS {
                        assert_eq!(field.at(&[c, b, cell_y, cell_x]), 0.0, "bin {b}");
                    }
                }
                assert!(field.at(&[c, 0, cell_y, 0]) > 0.0);
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(hog_field(&Tensor::zeros(&[1, 16, 16])).is_err());
        assert!(hog_field(&Tensor::zeros(&[3, 12, 16])).is_err());
        assert!(hog_tokens(&Tensor::zeros(&[3, 9, 4, 4]), 12).is_err());
        assert!(rgb_tokens(&Tensor::zeros(&[3, 16, 16]), 5).is_err());
    }

    #[test]
    fn target_dims_follow_patch_size() {
        assert_eq!(TargetKind::Hog.dim(8), 27);
        assert_eq!(TargetKind::Hog.dim(16), 108);
        assert_eq!(TargetKind::Rgb.dim(8), 192);
        assert_eq!(TargetKind::Sobel.dim(8), 192);
    }

    #[test]
    fn rgb_tokens_are_raw_patch_pixels() {
        let img = Tensor::from_fn(&[3, 16, 16], |i| i as f64);
        let toks = rgb_tokens(&img, 8).unwrap();
        assert_eq!(toks.shape(), &[4, 192]);
        assert_eq!(toks.at(&[0, 0]), img.at(&[0, 0, 0]));
        assert_eq!(toks.at(&[0, 1]), img.at(&[0, 0, 1]));
        assert_eq!(toks.at(&[0, 8]), img.at(&[0, 1, 0]));
        assert_eq!(toks.at(&[0, 64]), img.at(&[1, 0, 0]));
        assert_eq!(toks.at(&[1, 0]), img.at(&[0, 0, 8]));
        assert_eq!(toks.at(&[2, 0]), img.at(&[0, 8, 0]));
        let zero = rgb_tokens(&Tensor::zeros(&[3, 16, 16]), 8).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sobel_of_constant_image_is_zero_and_tokens_normalized() {
        let flat = sobel_tokens(&Tensor::full(&[3, 16, 16], 0.3), 8).unwrap();
        assert!(flat.data().iter().all(|&v| v == 0.0));

        let img = Tensor::from_fn(&[3, 16, 16], |i| ((i * 37) % 11) as f64 / 11.0);
        let toks = sobel_tokens(&img, 8).unwrap();
        assert_eq!(toks.shape(), &[4, 192]);
        for t in 0..4 {
            let ss: f64 = (0..192).map(|j| toks.at(&[t, j]).powi(2)).sum();
            assert!(ss <= 1.0 + 1e-12);
            assert!(ss > 0.5, "expected near-unit norm, got {ss}");
        }
    }
}
