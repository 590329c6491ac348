//! Independent reference for the HOG descriptor.
//!
//! `reference_field` below is written straight from the descriptor's
//! definition — per-pixel loops, no shared helpers with the library — so the
//! two implementations can only agree if both encode the same math:
//! centered differences with replicated borders, unsigned orientation split
//! across the two nearest of nine bin centers (k*pi/9, circular), 8x8 cell
//! accumulation, and per-cell-per-channel L2 normalization with eps = 1e-5.

use adma_core::hog;
use adma_core::rng::StreamRng;
use adma_core::Tensor;
use std::f64::consts::PI;

const CELL: usize = 8;
const BINS: usize = 9;
const EPS: f64 = 1e-5;

fn reference_field(image: &Tensor) -> Vec<f64> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (cy, cx) = (h / CELL, w / CELL);
    let mut field = vec![0.0; 3 * BINS * cy * cx];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let px = |yy: isize, xx: isize| -> f64 {
                    let yy = yy.clamp(0, h as isize - 1) as usize;
                    let xx = xx.clamp(0, w as isize - 1) as usize;
                    image.at(&[c, yy, xx])
                };
                let gx = px(y as isize, x as isize + 1) - px(y as isize, x as isize - 1);
                let gy = px(y as isize + 1, x as isize) - px(y as isize - 1, x as isize);
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
                let t = theta / (PI / BINS as f64);
                let k0 = (t.floor() as usize).min(BINS - 1);
                let frac = t - k0 as f64;
                let k1 = (k0 + 1) % BINS;
                let cell = (y / CELL) * cx + x / CELL;
                field[(c * BINS + k0) * cy * cx + cell] += (1.0 - frac) * mag;
                field[(c * BINS + k1) * cy * cx + cell] += frac * mag;
            }
        }
    }
    for c in 0..3 {
        for cell in 0..cy * cx {
            let mut ss = 0.0;
            for b in 0..BINS {
                let v = field[(c * BINS + b) * cy * cx + cell];
                ss += v * v;
            }
            let inv = 1.0 / (ss + EPS * EPS).sqrt();
            for b in 0..BINS {
                field[(c * BINS + b) * cy * cx + cell] *= inv;
            }
        }
    }
    field
}

fn random_image(rng: &mut StreamRng, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[3, h, w], |_| rng.next_f64())
}

/// Pixels on a 1/256 grid; sums and differences of such values are exact in
/// f64, which is what makes bitwise brightness invariance testable.
fn quantized_image(rng: &mut StreamRng, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[3, h, w], |_| (rng.below(200) as f64) / 256.0)
}

#[test]
fn field_matches_reference_on_100_random_images() {
    let mut rng = StreamRng::new(2024, "hog-oracle", 0);
    let sizes = [(16, 16), (16, 24), (32, 32), (24, 40)];
    for i in 0..100 {
        let (h, w) = sizes[i % sizes.len()];
        let img = random_image(&mut rng, h, w);
        let got = hog::hog_field(&img).unwrap();
        let want = reference_field(&img);
        assert_eq!(got.shape(), &[3, BINS, h / CELL, w / CELL]);
        let max_diff = got
            .data()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-10, "image {i}: max abs diff {max_diff}");
    }
}

#[test]
fn diagonal_ramp_splits_between_bins_two_and_three() {
    // I(y, x) = (x + y) * s has interior gradient (2s, 2s): orientation
    // pi/4, which sits a quarter of the way from center 2 to center 3.
    let s = 0.01;
    let img = Tensor::from_fn(&[3, 24, 24], |i| {
        let x = i % 24;
        let y = (i / 24) % 24;
        (x + y) as f64 * s
    });
    let field = hog::hog_field(&img).unwrap();
    // middle cell (1,1) sees only interior pixels
    for c in 0..3 {
        let b2 = field.at(&[c, 2, 1, 1]);
        let b3 = field.at(&[c, 3, 1, 1]);
        assert!(b2 > 0.0 && b3 > 0.0);
        assert!((b2 / b3 - 3.0).abs() < 1e-9, "want 3:1 split, got {b2}/{b3}");
        for b in 0..BINS {
            if b != 2 && b != 3 {
                assert_eq!(field.at(&[c, b, 1, 1]), 0.0);
            }
        }
    }
}

#[test]
fn brightness_shift_leaves_descriptor_bitwise_unchanged() {
    let mut rng = StreamRng::new(7, "hog-brightness", 0);
    for _ in 0..20 {
        let img = quantized_image(&mut rng, 16, 16);
        let shift = (rng.below(50) as f64) / 256.0;
        let shifted = Tensor::from_fn(&[3, 16, 16], |i| img.data()[i] + shift);
        let a = hog::hog_field(&img).unwrap();
        let b = hog::hog_field(&shifted).unwrap();
        assert!(a == b, "descriptor changed under constant brightness shift");
    }
}

#[test]
fn cells_are_nonnegative_with_norm_at_most_one() {
    let mut rng = StreamRng::new(99, "hog-bounds", 0);
    for _ in 0..30 {
        let img = random_image(&mut rng, 16, 16);
        let field = hog::hog_field(&img).unwrap();
        assert!(field.data().iter().all(|&v| v >= 0.0));
        for c in 0..3 {
            for cy in 0..2 {
                for cx in 0..2 {
                    let ss: f64 = (0..BINS).map(|b| field.at(&[c, b, cy, cx]).powi(2)).sum();
                    assert!(ss <= 1.0 + 1e-12, "cell norm^2 {ss} exceeds 1");
                }
            }
        }
    }
}

#[test]
fn near_zero_gradients_stay_finite_under_eps_guard() {
    let mut rng = StreamRng::new(5, "hog-eps", 0);
    let img = Tensor::from_fn(&[3, 16, 16], |_| rng.next_f64() * 1e-5);
    let field = hog::hog_field(&img).unwrap();
    assert!(field.data().iter().all(|v| v.is_finite()));
    let flat = Tensor::full(&[3, 16, 16], 0.25);
    let zero_field = hog::hog_field(&flat).unwrap();
    assert!(zero_field.data().iter().all(|&v| v == 0.0));
}

#[test]
fn tokens_regroup_cells_in_channel_bin_cell_order() {
    let mut rng = StreamRng::new(31, "hog-tokens", 0);
    let img = random_image(&mut rng, 32, 32);
    let field = hog::hog_field(&img).unwrap();

    let tokens8 = hog::hog_tokens(&field, 8).unwrap();
    assert_eq!(tokens8.shape(), &[16, 27]);
    // patch == cell: token (0) is exactly cell (0,0), laid out (channel, bin)
    for c in 0..3 {
        for b in 0..BINS {
            assert_eq!(tokens8.at(&[0, c * BINS + b]), field.at(&[c, b, 0, 0]));
        }
    }
    // second token in row-major patch order is cell (0,1)
    for c in 0..3 {
        for b in 0..BINS {
            assert_eq!(tokens8.at(&[1, c * BINS + b]), field.at(&[c, b, 0, 1]));
        }
    }

    let tokens16 = hog::hog_tokens(&field, 16).unwrap();
    assert_eq!(tokens16.shape(), &[4, 108]);
    // within a 16px patch the four cells follow (cell-row, cell-col) after
    // (channel, bin)
    let f = |c: usize, b: usize, cy: usize, cx: usize| field.at(&[c, b, cy, cx]);
    let tok = |t: usize, j: usize| tokens16.at(&[t, j]);
    for c in 0..3 {
        for b in 0..BINS {
            let base = (c * BINS + b) * 4;
            assert_eq!(tok(0, base), f(c, b, 0, 0));
            assert_eq!(tok(0, base + 1), f(c, b, 0, 1));
            assert_eq!(tok(0, base + 2), f(c, b, 1, 0));
            assert_eq!(tok(0, base + 3), f(c, b, 1, 1));
            // token 1 is the patch one step right: cells (0,2..3)
            assert_eq!(tok(1, base), f(c, b, 0, 2));
        }
    }
}
