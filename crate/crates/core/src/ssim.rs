//! Structural similarity (SSIM) over sliding windows, channel-averaged.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_WINDOW: usize = 8;

/// Mean SSIM between two `[C, H, W]` images with data range 1.0: uniform
/// `window` x `window` statistics at every stride-1 position, averaged over
/// windows and channels. The window shrinks to the image if it is smaller.
pub fn ssim(a: &Tensor, b: &Tensor, window: usize) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if a.rank() != 3 {
        return Err(Error::ShapeMismatch {
            op: "ssim (expects [C,H,W])",
            lhs: a.shape().to_vec(),
            rhs: vec![],
        });
    }
    if window == 0 {
        return Err(Error::Config("ssim window must be positive".into()));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let win = window.min(h).min(w);
    let n = (win * win) as f64;

    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..=(h - win) {
            for ox in 0..=(w - win) {
                let (mut sa, mut sb) = (0.0, 0.0);
                for y in oy..oy + win {
                    for x in ox..ox + win {
                        sa += pa[y * w + x];
                        sb += pb[y * w + x];
                    }
                }
                let (mu_a, mu_b) = (sa / n, sb / n);
                // centered second pass avoids cancellation for near-constant
                // windows
                let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
                for y in oy..oy + win {
                    for x in ox..ox + win {
                        let da = pa[y * w + x] - mu_a;
                        let db = pb[y * w + x] - mu_b;
                        var_a += da * da;
                        var_b += db * db;
                        cov += da * db;
                    }
                }
                var_a /= n;
                var_b /= n;
                cov /= n;
                total += ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_score_one() {
        let mut rng = crate::data::sample_rng(1, 0);
        let x = Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let s = ssim(&x, &x, SSIM_WINDOW).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "ssim(x,x) = {s}");
    }

    #[test]
    fn symmetric() {
        let mut rng = crate::data::sample_rng(2, 0);
        for _ in 0..5 {
            let a = Tensor::rand_uniform(&[1, 12, 12], 0.0, 1.0, &mut rng);
            let b = Tensor::rand_uniform(&[1, 12, 12], 0.0, 1.0, &mut rng);
            let ab = ssim(&a, &b, 8).unwrap();
            let ba = ssim(&b, &a, 8).unwrap();
            assert!((ab - ba).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_images_closed_form() {
        let a = Tensor::filled(&[1, 10, 10], 0.5);
        let b = Tensor::filled(&[1, 10, 10], 0.6);
        // sigma terms vanish: ((2*0.5*0.6 + C1) / (0.25 + 0.36 + C1)) * (C2/C2)
        let want = (2.0 * 0.5 * 0.6 + SSIM_C1) / (0.25 + 0.36 + SSIM_C1);
        let got = ssim(&a, &b, 8).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!((got - 0.9836).abs() < 1e-4);
    }

    #[test]
    fn bounded_by_one_with_equality_iff_identical() {
        let mut rng = crate::data::sample_rng(3, 0);
        for i in 0..20 {
            let a = Tensor::rand_uniform(&[2, 9, 9], 0.0, 1.0, &mut rng);
            let mut b = a.clone();
            if i % 2 == 0 {
                let idx = i * 3 % b.len();
                b.data_mut()[idx] = (b.data()[idx] + 0.31) % 1.0;
            }
            let s = ssim(&a, &b, 8).unwrap();
            assert!(s <= 1.0 + 1e-12);
            if a.data() == b.data() {
                assert!((s - 1.0).abs() < 1e-9);
            } else {
                assert!(s < 1.0 - 1e-12, "perturbed image must score below 1, got {s}");
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Tensor::zeros(&[1, 8, 8]);
        let b = Tensor::zeros(&[1, 8, 9]);
        assert!(ssim(&a, &b, 8).is_err());
    }
}
