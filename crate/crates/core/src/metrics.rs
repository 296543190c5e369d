//! Fidelity metrics over images with values in `[0, 1]`.
//!
//! All arithmetic is done in f64 regardless of the sample type.

use crate::error::{ensure, Result};
use crate::tensor::{Shape, Tensor};

/// Returned for identical images instead of infinity.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Peak signal-to-noise ratio for peak 1.0, over every sample.
pub fn psnr_slices<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Result<f64> {
    ensure!(a.len() == b.len(), Shape, "psnr: {} vs {} samples", a.len(), b.len());
    ensure!(!a.is_empty(), Shape, "psnr: empty images");
    let sse: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.into() - y.into();
            d * d
        })
        .sum();
    let mse = sse / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    ensure!(a.shape() == b.shape(), Shape, "psnr: shapes {} and {} differ", a.shape(), b.shape());
    psnr_slices(a.data(), b.data())
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let centre = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - centre;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Valid-mode separable filtering of a `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of one plane over all valid window positions.
pub fn ssim_plane<T: Copy + Into<f64>>(a: &[T], b: &[T], height: usize, width: usize) -> Result<f64> {
    ensure!(
        a.len() == height * width && b.len() == a.len(),
        Shape,
        "ssim: planes of {} and {} samples for {height}x{width}",
        a.len(),
        b.len()
    );
    ensure!(
        height >= SSIM_WINDOW && width >= SSIM_WINDOW,
        Shape,
        "ssim: image {height}x{width} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
    );
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let taps = gaussian_taps();
    let x: Vec<f64> = a.iter().map(|&v| v.into()).collect();
    let y: Vec<f64> = b.iter().map(|&v| v.into()).collect();
    let product = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mu_x = filter_valid(&x, height, width, &taps);
    let mu_y = filter_valid(&y, height, width, &taps);
    let xx = filter_valid(&product(&x, &x), height, width, &taps);
    let yy = filter_valid(&product(&y, &y), height, width, &taps);
    let xy = filter_valid(&product(&x, &y), height, width, &taps);
    let total: f64 = (0..mu_x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let var_x = xx[i] - mx * mx;
            let var_y = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (var_x + var_y + c2))
        })
        .sum();
    Ok(total / mu_x.len() as f64)
}

/// SSIM averaged over every `(batch, channel)` plane.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ensure!(a.shape() == b.shape(), Shape, "ssim: shapes {} and {} differ", a.shape(), b.shape());
    let s = a.shape();
    let planes = s.batch * s.channels;
    let mut total = 0.0;
    for n in 0..s.batch {
        for c in 0..s.channels {
            let pa = plane(a, n, c);
            let pb = plane(b, n, c);
            total += ssim_plane(&pa, &pb, s.height, s.width)?;
        }
    }
    Ok(total / planes as f64)
}

fn plane(t: &Tensor, n: usize, c: usize) -> Vec<f32> {
    let Shape { height, width, .. } = t.shape();
    (0..height * width).map(|i| t.get(n, i / width, i % width, c)).collect()
}

pub fn evaluate(output: &Tensor, reference: &Tensor) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr_db: psnr(output, reference)?,
        ssim: ssim(output, reference)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct per-window SSIM with an explicitly built 2-D window.
    fn naive_ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
        let r = (SSIM_WINDOW / 2) as f64;
        let mut win = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
        for i in 0..SSIM_WINDOW {
            for j in 0..SSIM_WINDOW {
                let (di, dj) = (i as f64 - r, j as f64 - r);
                win[i * SSIM_WINDOW + j] = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            }
        }
        let norm: f64 = win.iter().sum();
        win.iter_mut().for_each(|v| *v /= norm);
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut sum = 0.0;
        let mut count = 0;
        for y in 0..=h - SSIM_WINDOW {
            for x in 0..=w - SSIM_WINDOW {
                let at = |img: &[f64], i: usize, j: usize| img[(y + i) * w + x + j];
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        mx += win[i * SSIM_WINDOW + j] * at(a, i, j);
                        my += win[i * SSIM_WINDOW + j] * at(b, i, j);
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let k = win[i * SSIM_WINDOW + j];
                        let (dx, dy) = (at(a, i, j) - mx, at(b, i, j) - my);
                        vx += k * dx * dx;
                        vy += k * dy * dy;
                        cxy += k * dx * dy;
                    }
                }
                sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        sum / count as f64
    }

    fn random_plane(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen()).collect()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = vec![0.25f64; 64];
        assert_eq!(psnr_slices(&a, &a).unwrap(), PSNR_CAP_DB);
        let b: Vec<f64> = vec![0.35f64; 64];
        let c: Vec<f64> = b.iter().map(|v| v - 0.1).collect();
        assert!((psnr_slices(&b, &c).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr_slices(&a, &b[..10]).is_err());
    }

    #[test]
    fn ssim_matches_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let a = random_plane(&mut rng, 32 * 32);
            let b = random_plane(&mut rng, 32 * 32);
            let fast = ssim_plane(&a, &b, 32, 32).unwrap();
            assert!((fast - naive_ssim(&a, &b, 32, 32)).abs() < 1e-9);
        }
    }

    #[test]
    fn ssim_constants() {
        let (p, q) = (0.3f64, 0.7f64);
        let c1 = SSIM_K1 * SSIM_K1;
        let want = (2.0 * p * q + c1) / (p * p + q * q + c1);
        let got = ssim_plane(&[p; 144], &[q; 144], 12, 12).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn ssim_needs_a_full_window() {
        assert!(ssim_plane(&[0.0f64; 100], &[0.0f64; 100], 10, 10).is_err());
    }

    #[test]
    fn ssim_of_tensor_averages_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Shape::new(1, 16, 16, 3).unwrap();
        let a = Tensor::from_fn(s, |_, _, _, _| rng.gen());
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let b = Tensor::from_fn(s, |_, y, x, c| a.get(0, y, x, c) * 0.5);
        let per: f64 = (0..3).map(|c| ssim_plane(&plane(&a, 0, c), &plane(&b, 0, c), 16, 16).unwrap()).sum::<f64>() / 3.0;
        assert!((ssim(&a, &b).unwrap() - per).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_plane(&mut rng, 144);
            let b = random_plane(&mut rng, 144);
            prop_assert_eq!(psnr_slices(&a, &b).unwrap(), psnr_slices(&b, &a).unwrap());
            let (ab, ba) = (ssim_plane(&a, &b, 12, 12).unwrap(), ssim_plane(&b, &a, 12, 12).unwrap());
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn psnr_falls_with_noise_amplitude(seed in any::<u64>(), lo in 0.01f64..0.19, step in 0.001f64..0.01) {
            let hi = (lo + step).min(0.2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base: Vec<f64> = (0..256).map(|_| rng.gen_range(0.3..0.7)).collect();
            let signs: Vec<f64> = (0..256).map(|_| if rng.gen() { 1.0 } else { -1.0 }).collect();
            let noisy = |amp: f64| -> Vec<f64> { base.iter().zip(&signs).map(|(v, s)| v + s * amp).collect() };
            prop_assert!(psnr_slices(&base, &noisy(hi)).unwrap() < psnr_slices(&base, &noisy(lo)).unwrap());
        }
    }
}
