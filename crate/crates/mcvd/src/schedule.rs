//! Closed-form diffusion process math: noise schedules, forward corruption,
//! reverse posterior parameters, and the conversions among eps, x0 and the
//! score.
//!
//! All schedule quantities are computed and stored in f64 so the cumulative
//! product identity holds to 1e-12 relative error; frame-level operations are
//! generic over the element type.

use ndarray::{Array, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{McvdError, Result};
use crate::real::Real;

/// How the beta sequence is laid out over the T steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = McvdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(McvdError::config(format!("unknown schedule kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScheduleKind::Linear => write!(f, "linear"),
        }
    }
}

/// Diffusion noise schedule: per-step noise rates and their running products.
///
/// Index convention: steps are 1-based, `t` in `1..=T`. `alpha_bar(0)` is
/// defined as 1 (empty product) so the posterior is well defined at `t = 1`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Coefficients of the reverse-process posterior q(x_{t-1} | x_t, x_0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorParams {
    /// Weight of x_0 in the posterior mean.
    pub mean_coef_x0: f64,
    /// Weight of x_t in the posterior mean.
    pub mean_coef_xt: f64,
    /// Posterior variance (0 at t = 1).
    pub var: f64,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit beta values.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(McvdError::Range {
                name: "T",
                value: 0.0,
                expected: "T >= 1",
            });
        }
        for &b in &betas {
            if !(b > 0.0 && b < 1.0) {
                return Err(McvdError::Range {
                    name: "beta",
                    value: b,
                    expected: "0 < beta < 1",
                });
            }
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0f64;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// beta_t for t in 1..=T.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// alpha_t for t in 1..=T.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Running product of alphas up to t, with the empty-product convention
    /// `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.num_steps() {
            return Err(McvdError::Range {
                name: "t",
                value: t as f64,
                expected: "1 <= t <= T",
            });
        }
        Ok(())
    }
}

/// Constructs a noise schedule with T steps.
///
/// The linear kind interpolates beta evenly from `beta_start` to `beta_end`
/// (inclusive at both ends; `T = 1` uses `beta_start`).
pub fn build_schedule(
    t_steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if t_steps < 1 {
        return Err(McvdError::Range {
            name: "T",
            value: t_steps as f64,
            expected: "T >= 1",
        });
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(McvdError::Range {
            name: "beta range",
            value: beta_start,
            expected: "0 < beta_start <= beta_end < 1",
        });
    }
    let betas = match kind {
        ScheduleKind::Linear => {
            if t_steps == 1 {
                vec![beta_start]
            } else {
                let step = (beta_end - beta_start) / (t_steps - 1) as f64;
                (0..t_steps).map(|i| beta_start + step * i as f64).collect()
            }
        }
    };
    NoiseSchedule::from_betas(betas)
}

/// Forward corruption: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.
pub fn q_sample<T: Real, D: Dimension>(
    x0: &Array<T, D>,
    t: usize,
    eps: &Array<T, D>,
    sched: &NoiseSchedule,
) -> Result<Array<T, D>> {
    sched.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(McvdError::shape(format!(
            "x0 shape {:?} != eps shape {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let ab = sched.alpha_bar(t);
    let c0 = T::from_f64(ab.sqrt());
    let ce = T::from_f64((1.0 - ab).sqrt());
    Ok(x0.mapv(|v| v * c0) + eps.mapv(|v| v * ce))
}

/// Coefficients of the reverse posterior at step t (Eq. 3 form, valid for
/// adjacent steps).
pub fn posterior_params(t: usize, sched: &NoiseSchedule) -> Result<PosteriorParams> {
    sched.check_t(t)?;
    Ok(posterior_params_between(t, t - 1, sched))
}

/// Posterior coefficients between an ordered pair of schedule points,
/// treating the marginal at `t_prev` as the target. With `t_prev = t - 1`
/// this reduces to the single-step posterior; larger gaps correspond to the
/// accumulated kernel over the strided subsequence.
pub fn posterior_params_between(t: usize, t_prev: usize, sched: &NoiseSchedule) -> PosteriorParams {
    debug_assert!(t_prev < t);
    let ab_t = sched.alpha_bar(t);
    let ab_p = sched.alpha_bar(t_prev);
    let alpha_eff = ab_t / ab_p;
    let beta_eff = 1.0 - alpha_eff;
    let one_minus_ab_t = 1.0 - ab_t;
    PosteriorParams {
        mean_coef_x0: ab_p.sqrt() * beta_eff / one_minus_ab_t,
        mean_coef_xt: alpha_eff.sqrt() * (1.0 - ab_p) / one_minus_ab_t,
        var: (1.0 - ab_p) / one_minus_ab_t * beta_eff,
    }
}

/// Inverts the accumulated forward kernel: x0_hat = (x_t - sqrt(1-abar_t) eps) / sqrt(abar_t).
pub fn predict_x0_from_eps<T: Real, D: Dimension>(
    xt: &Array<T, D>,
    eps_hat: &Array<T, D>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Array<T, D>> {
    sched.check_t(t)?;
    if xt.shape() != eps_hat.shape() {
        return Err(McvdError::shape(format!(
            "xt shape {:?} != eps_hat shape {:?}",
            xt.shape(),
            eps_hat.shape()
        )));
    }
    let ab = sched.alpha_bar(t);
    if ab <= 0.0 {
        return Err(McvdError::numeric(format!(
            "alpha_bar({t}) = {ab}; x0 reconstruction undefined"
        )));
    }
    let inv = T::from_f64(1.0 / ab.sqrt());
    let ce = T::from_f64((1.0 - ab).sqrt());
    Ok((xt - &eps_hat.mapv(|v| v * ce)).mapv(|v| v * inv))
}

/// Score of the accumulated kernel expressed through eps: -eps / sqrt(1 - abar_t).
pub fn score_from_eps<T: Real, D: Dimension>(
    eps_hat: &Array<T, D>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Array<T, D>> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    if ab >= 1.0 {
        return Err(McvdError::numeric(format!(
            "alpha_bar({t}) = {ab}; score undefined at zero noise"
        )));
    }
    let c = T::from_f64(-1.0 / (1.0 - ab).sqrt());
    Ok(eps_hat.mapv(|v| v * c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn linear_schedule_matches_cumprod_oracle() {
        // Independent oracle: direct cumulative product.
        let sched = build_schedule(4, 0.1, 0.1, ScheduleKind::Linear).unwrap();
        let expect = [0.9, 0.81, 0.729, 0.6561];
        for (t, &e) in expect.iter().enumerate() {
            assert!((sched.alpha_bar(t + 1) - e).abs() < 1e-12);
        }
    }

    #[test]
    fn near_zero_beta_keeps_alpha_bar_near_one() {
        let sched = build_schedule(3, 1e-12, 1e-12, ScheduleKind::Linear).unwrap();
        for t in 1..=3 {
            assert!((sched.alpha_bar(t) - 1.0).abs() < 1e-11);
        }
    }

    #[test]
    fn default_1000_step_schedule_product_identity() {
        let sched = build_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        // Independent route: exp of summed logs.
        let log_sum: f64 = sched.alphas().iter().map(|a| a.ln()).sum();
        let oracle = log_sum.exp();
        let got = sched.alpha_bar(1000);
        assert!(((got - oracle) / oracle).abs() < 1e-12);
        // Strictly decreasing.
        for t in 2..=1000 {
            assert!(sched.alpha_bar(t) < sched.alpha_bar(t - 1));
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(build_schedule(0, 1e-4, 0.02, ScheduleKind::Linear).is_err());
        assert!(build_schedule(10, 0.0, 0.02, ScheduleKind::Linear).is_err());
        assert!(build_schedule(10, 0.1, 1.0, ScheduleKind::Linear).is_err());
        assert!(build_schedule(10, 0.5, 0.1, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn q_sample_zero_noise_scales_by_sqrt_alpha_bar() {
        let sched = build_schedule(10, 0.1, 0.2, ScheduleKind::Linear).unwrap();
        let x0: Array1<f64> = arr1(&[1.0, -2.0, 0.5]);
        let eps = Array1::zeros(3);
        let xt = q_sample(&x0, 4, &eps, &sched).unwrap();
        let c = sched.alpha_bar(4).sqrt();
        for (a, b) in xt.iter().zip(x0.iter()) {
            assert!((a - b * c).abs() < 1e-15);
        }
    }

    #[test]
    fn q_sample_rejects_shape_mismatch_and_bad_t() {
        let sched = build_schedule(10, 0.1, 0.2, ScheduleKind::Linear).unwrap();
        let x0: Array1<f64> = Array1::zeros(3);
        let eps: Array1<f64> = Array1::zeros(4);
        assert!(matches!(
            q_sample(&x0, 1, &eps, &sched),
            Err(McvdError::Shape(_))
        ));
        let eps3: Array1<f64> = Array1::zeros(3);
        assert!(q_sample(&x0, 0, &eps3, &sched).is_err());
        assert!(q_sample(&x0, 11, &eps3, &sched).is_err());
    }

    #[test]
    fn q_sample_monte_carlo_moments() {
        // x0 = 0: per-element variance of x_t must be 1 - abar_t.
        let sched = build_schedule(100, 1e-3, 0.05, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = 40;
        let n = 100_000;
        let x0: Array1<f64> = Array1::zeros(1);
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let eps = arr1(&[rng.sample::<f64, _>(StandardNormal)]);
            let v = q_sample(&x0, t, &eps, &sched).unwrap()[0];
            sum += v;
            sum2 += v * v;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        let want = 1.0 - sched.alpha_bar(t);
        let se_var = want * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((var - want).abs() < 3.0 * se_var, "var {var} want {want}");
    }

    #[test]
    fn posterior_hand_values() {
        let sched = NoiseSchedule::from_betas(vec![0.1, 0.1]).unwrap();
        let p = posterior_params(2, &sched).unwrap();
        assert!((p.mean_coef_x0 - 0.499307).abs() < 1e-6);
        assert!((p.mean_coef_xt - 0.499307).abs() < 1e-6);
        assert!((p.var - 0.0526316).abs() < 1e-7);
    }

    #[test]
    fn posterior_degenerate_at_t1_and_bounded_var() {
        let sched = build_schedule(50, 1e-3, 0.3, ScheduleKind::Linear).unwrap();
        let p1 = posterior_params(1, &sched).unwrap();
        assert_eq!(p1.var, 0.0);
        assert!((p1.mean_coef_x0 - 1.0).abs() < 1e-12);
        assert!(p1.mean_coef_xt.abs() < 1e-12);
        for t in 1..=50 {
            let p = posterior_params(t, &sched).unwrap();
            assert!(p.var >= 0.0);
            assert!(p.var <= sched.beta(t) + 1e-15);
        }
    }

    #[test]
    fn x0_roundtrip_is_algebraic_inverse() {
        let sched = build_schedule(30, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0: Array1<f64> =
            Array1::from_iter((0..16).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let eps: Array1<f64> =
            Array1::from_iter((0..16).map(|_| rng.sample::<f64, _>(StandardNormal)));
        for t in [1, 7, 30] {
            let xt = q_sample(&x0, t, &eps, &sched).unwrap();
            let back = predict_x0_from_eps(&xt, &eps, t, &sched).unwrap();
            for (a, b) in back.iter().zip(x0.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn predict_x0_substitution_value() {
        // abar = 0.75, xt = 1, eps = 1 -> (1 - 0.5) / 0.866025 = 0.57735
        let sched = NoiseSchedule::from_betas(vec![0.25]).unwrap();
        assert!((sched.alpha_bar(1) - 0.75).abs() < 1e-15);
        let xt = arr1(&[1.0f64]);
        let eps = arr1(&[1.0f64]);
        let x0 = predict_x0_from_eps(&xt, &eps, 1, &sched).unwrap();
        assert!((x0[0] - 0.577_350_269).abs() < 1e-6);
    }

    #[test]
    fn score_values_and_finite_difference_oracle() {
        let sched = NoiseSchedule::from_betas(vec![0.25]).unwrap();
        let z = arr1(&[0.0f64]);
        assert_eq!(score_from_eps(&z, 1, &sched).unwrap()[0], 0.0);
        let one = arr1(&[1.0f64]);
        assert!((score_from_eps(&one, 1, &sched).unwrap()[0] + 2.0).abs() < 1e-12);

        // Scalar finite-difference check of the Gaussian log-density gradient.
        let x0 = 0.3f64;
        let t = 1;
        let ab = sched.alpha_bar(t);
        let xt = 0.9f64;
        let log_q = |x: f64| {
            let var = 1.0 - ab;
            let d = x - ab.sqrt() * x0;
            -0.5 * d * d / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
        };
        let h = 1e-4;
        let fd = (log_q(xt + h) - log_q(xt - h)) / (2.0 * h);
        let true_eps = (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt();
        let score = score_from_eps(&arr1(&[true_eps]), t, &sched).unwrap()[0];
        assert!((score - fd).abs() < 1e-5, "score {score} fd {fd}");
    }

    #[test]
    fn strided_posterior_reduces_to_adjacent() {
        let sched = build_schedule(20, 1e-3, 0.1, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let t = rng.random_range(1..=20usize);
            let a = posterior_params(t, &sched).unwrap();
            let b = posterior_params_between(t, t - 1, &sched);
            assert!((a.mean_coef_x0 - b.mean_coef_x0).abs() < 1e-15);
            assert!((a.mean_coef_xt - b.mean_coef_xt).abs() < 1e-15);
            assert!((a.var - b.var).abs() < 1e-15);
        }
    }
}
