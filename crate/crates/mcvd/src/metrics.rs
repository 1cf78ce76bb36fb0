//! Frame- and video-level fidelity metrics: MSE, PSNR, SSIM, and best-of-n
//! trajectory aggregation.

use ndarray::{Array4, ArrayView2, ArrayView3};

use crate::error::{McvdError, Result};

/// PSNR reported for identical inputs instead of infinity.
pub const PSNR_CAP_DB: f64 = 99.0;

/// How a set of per-trajectory metrics is collapsed into one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Mean,
    BestOfN,
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Aggregation::Mean => write!(f, "mean"),
            Aggregation::BestOfN => write!(f, "best_of_n"),
        }
    }
}

/// Per-video metric values plus the aggregation they were produced with.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub video_id: String,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub aggregation: Aggregation,
    pub trajectories: usize,
}

pub fn mse(a: &Array4<f32>, b: &Array4<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(McvdError::shape(format!(
            "mse: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.len();
    if n == 0 {
        return Err(McvdError::shape("mse of empty tensors"));
    }
    let sum: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / n as f64)
}

/// Peak signal-to-noise ratio in dB: 10 log10(peak^2 / MSE), capped at 99 dB
/// for identical inputs.
pub fn psnr(a: &Array4<f32>, b: &Array4<f32>, peak: f64) -> Result<f64> {
    if peak <= 0.0 {
        return Err(McvdError::Range {
            name: "peak",
            value: peak,
            expected: "peak > 0",
        });
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB))
}

#[derive(Debug, Clone, Copy)]
pub struct SsimConfig {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
    /// Uniform window by default; Gaussian weights optional.
    pub gaussian: bool,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 7,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
            gaussian: false,
        }
    }
}

fn window_weights(cfg: &SsimConfig) -> Vec<f64> {
    let n = cfg.window;
    if !cfg.gaussian {
        return vec![1.0 / (n * n) as f64; n * n];
    }
    let sigma = 1.5;
    let half = (n as f64 - 1.0) / 2.0;
    let mut w = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dy = i as f64 - half;
            let dx = j as f64 - half;
            w.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

fn ssim_channel(a: ArrayView2<f32>, b: ArrayView2<f32>, cfg: &SsimConfig) -> f64 {
    let (h, w) = a.dim();
    let win = cfg.window;
    let weights = window_weights(cfg);
    let c1 = (cfg.k1 * cfg.peak).powi(2);
    let c2 = (cfg.k2 * cfg.peak).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=(h - win) {
        for x in 0..=(w - win) {
            let (mut ma, mut mb) = (0.0f64, 0.0f64);
            for i in 0..win {
                for j in 0..win {
                    let wt = weights[i * win + j];
                    ma += wt * a[(y + i, x + j)] as f64;
                    mb += wt * b[(y + i, x + j)] as f64;
                }
            }
            let (mut va, mut vb, mut cov) = (0.0f64, 0.0f64, 0.0f64);
            for i in 0..win {
                for j in 0..win {
                    let wt = weights[i * win + j];
                    let da = a[(y + i, x + j)] as f64 - ma;
                    let db = b[(y + i, x + j)] as f64 - mb;
                    va += wt * da * da;
                    vb += wt * db * db;
                    cov += wt * da * db;
                }
            }
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Structural similarity of two frames (height, width, channels), averaged
/// over channels and window positions.
pub fn ssim_frame(a: ArrayView3<f32>, b: ArrayView3<f32>, cfg: &SsimConfig) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(McvdError::shape(format!(
            "ssim: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (h, w, c) = a.dim();
    if h < cfg.window || w < cfg.window {
        return Err(McvdError::shape(format!(
            "frame {h}x{w} smaller than ssim window {}",
            cfg.window
        )));
    }
    let mut acc = 0.0;
    for ch in 0..c {
        acc += ssim_channel(
            a.index_axis(ndarray::Axis(2), ch),
            b.index_axis(ndarray::Axis(2), ch),
            cfg,
        );
    }
    Ok(acc / c as f64)
}

/// Video SSIM: mean frame SSIM.
pub fn ssim_video(a: &Array4<f32>, b: &Array4<f32>, cfg: &SsimConfig) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(McvdError::shape(format!(
            "ssim: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.shape()[0];
    if n == 0 {
        return Err(McvdError::shape("ssim of empty video"));
    }
    let mut acc = 0.0;
    for f in 0..n {
        acc += ssim_frame(
            a.index_axis(ndarray::Axis(0), f),
            b.index_axis(ndarray::Axis(0), f),
            cfg,
        )?;
    }
    Ok(acc / n as f64)
}

/// Best-of-n aggregation: the maximum metric value over trajectories (for
/// similarity metrics where larger is better), alongside the mean.
pub fn best_of_n<F>(trajectories: &[Array4<f32>], reference: &Array4<f32>, metric: F) -> Result<(f64, f64)>
where
    F: Fn(&Array4<f32>, &Array4<f32>) -> Result<f64>,
{
    if trajectories.is_empty() {
        return Err(McvdError::config("best_of_n needs at least one trajectory"));
    }
    let mut best = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for t in trajectories {
        let v = metric(t, reference)?;
        best = best.max(v);
        sum += v;
    }
    Ok((best, sum / trajectories.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_video(seed: u64, shape: (usize, usize, usize, usize)) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.random::<f32>())
    }

    #[test]
    fn psnr_identity_zeros_ones_and_formula() {
        let a = rand_video(0, (2, 8, 8, 1));
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
        let z = Array4::zeros((1, 4, 4, 1));
        let o = Array4::from_elem((1, 4, 4, 1), 1.0f32);
        assert!((psnr(&z, &o, 1.0).unwrap() - 0.0).abs() < 1e-12);
        // MSE 0.01 with peak 1 -> 20 dB.
        let b = z.mapv(|_| 0.1f32);
        assert!((psnr(&z, &b, 1.0).unwrap() - 20.0).abs() < 1e-4);
    }

    #[test]
    fn psnr_symmetry_and_monotonicity() {
        let a = rand_video(1, (2, 8, 8, 1));
        let mut prev = f64::INFINITY;
        for amp in [0.01f32, 0.05, 0.1, 0.2, 0.4] {
            let noisy = &a + &rand_video(2, (2, 8, 8, 1)).mapv(|v| (v - 0.5) * amp);
            let p1 = psnr(&a, &noisy, 1.0).unwrap();
            let p2 = psnr(&noisy, &a, 1.0).unwrap();
            assert!((p1 - p2).abs() < 1e-12);
            assert!(p1 < prev, "psnr should fall as noise grows");
            prev = p1;
        }
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = rand_video(3, (1, 8, 8, 1));
        let b = rand_video(4, (1, 8, 8, 1));
        let cfg = SsimConfig::default();
        assert_eq!(ssim_video(&a, &a, &cfg).unwrap(), 1.0);
        let s1 = ssim_video(&a, &b, &cfg).unwrap();
        let s2 = ssim_video(&b, &a, &cfg).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&s1));
    }

    #[test]
    fn ssim_inverted_high_variance_frame_scores_low() {
        // Independent scalar oracle on a fixed 8x8 checker pattern: for
        // a vs 1-a the window stats are ma=mb=0.5, va=vb=0.25, cov=-0.25.
        let a = Array4::from_shape_fn((1, 8, 8, 1), |(_, y, x, _)| ((x + y) % 2) as f32);
        let b = a.mapv(|v| 1.0 - v);
        let cfg = SsimConfig::default();
        let c1 = 0.01f64.powi(2);
        let c2 = 0.03f64.powi(2);
        let oracle = ((2.0 * 0.25 + c1) * (2.0 * -0.25 + c2)) / ((2.0 * 0.25 + c1) * (0.5 + c2));
        let got = ssim_video(&a, &b, &cfg).unwrap();
        assert!((got - oracle).abs() < 2e-3, "got {got}, oracle {oracle}");
        assert!(got < 0.2);
    }

    #[test]
    fn ssim_constant_frames_reduce_to_luminance_term() {
        let a = Array4::from_elem((1, 8, 8, 1), 0.3f32);
        let b = Array4::from_elem((1, 8, 8, 1), 0.7f32);
        let cfg = SsimConfig::default();
        let c1 = 0.01f64.powi(2);
        let lum = (2.0 * 0.3 * 0.7 + c1) / (0.3f64 * 0.3 + 0.7 * 0.7 + c1);
        let got = ssim_video(&a, &b, &cfg).unwrap();
        assert!((got - lum).abs() < 1e-6, "got {got}, want {lum}");
    }

    #[test]
    fn ssim_rejects_small_frames() {
        let a = Array4::zeros((1, 4, 4, 1));
        assert!(ssim_video(&a, &a, &SsimConfig::default()).is_err());
    }

    #[test]
    fn best_of_n_cases() {
        let r = rand_video(5, (1, 8, 8, 1));
        let t1 = rand_video(6, (1, 8, 8, 1));
        let m = |a: &Array4<f32>, b: &Array4<f32>| psnr(a, b, 1.0);
        // n = 1 equals the plain metric.
        let (best, mean) = best_of_n(std::slice::from_ref(&t1), &r, m).unwrap();
        assert_eq!(best, m(&t1, &r).unwrap());
        assert_eq!(mean, best);
        // Containing the reference hits the cap.
        let (best, _) = best_of_n(&[t1.clone(), r.clone()], &r, m).unwrap();
        assert_eq!(best, PSNR_CAP_DB);
        // Monotone in nested sets.
        let t2 = rand_video(7, (1, 8, 8, 1));
        let (b1, _) = best_of_n(std::slice::from_ref(&t1), &r, m).unwrap();
        let (b2, _) = best_of_n(&[t1.clone(), t2.clone()], &r, m).unwrap();
        assert!(b2 >= b1);
        assert!(best_of_n(&[], &r, m).is_err());
    }
}
