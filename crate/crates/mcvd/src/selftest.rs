//! Runtime invariant suites behind the `selftest` CLI subcommand: quick
//! re-checks of the schedule identities, mask statistics, embedding norms,
//! gradient correctness and container round-trip on a fresh build.

use ndarray::{arr1, Array1, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainSection;
use crate::data::VideoBlock;
use crate::denoiser::{noise_embedding, ConditioningMode, DenoiserConfig, UNet};
use crate::error::{McvdError, Result};
use crate::masking::{sample_masks, BlockLayout, MaskingRegime};
use crate::nn::ParamStore;
use crate::schedule::{
    build_schedule, posterior_params, predict_x0_from_eps, q_sample, score_from_eps, ScheduleKind,
};
use crate::trainer::grad_check;

fn ensure(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(McvdError::numeric(msg.to_string()))
    }
}

fn schedule_identities() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA11CE);
    for _ in 0..20 {
        let t = rng.random_range(2..=1000usize);
        let b0 = rng.random::<f64>() * 1e-3 + 1e-6;
        let b1 = b0 + rng.random::<f64>() * 0.1;
        let sched = build_schedule(t, b0, b1, ScheduleKind::Linear)?;
        let log_sum: f64 = sched.alphas().iter().map(|a| a.ln()).sum();
        let oracle = log_sum.exp();
        ensure(
            ((sched.alpha_bar(t) - oracle) / oracle).abs() < 1e-12,
            "cumulative product identity",
        )?;
        for s in 2..=t {
            ensure(sched.alpha_bar(s) < sched.alpha_bar(s - 1), "abar monotone")?;
        }
        ensure(posterior_params(1, &sched)?.var == 0.0, "beta_tilde_1 = 0")?;
        for s in 1..=t {
            let pp = posterior_params(s, &sched)?;
            ensure(pp.var <= sched.beta(s) + 1e-15, "beta_tilde <= beta")?;
        }
    }
    Ok(())
}

fn forward_moments() -> Result<()> {
    let sched = build_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xBEEF);
    let n = 20_000;
    for t in [1, 250, 500, 750, 1000] {
        let x0: Array1<f64> = arr1(&[0.0]);
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let eps = arr1(&[rng.sample::<f64, _>(rand_distr::StandardNormal)]);
            let v = q_sample(&x0, t, &eps, &sched)?[0];
            sum += v;
            sum2 += v * v;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        let want_var = 1.0 - sched.alpha_bar(t);
        let se_mean = want_var.sqrt() / (n as f64).sqrt();
        let se_var = want_var * (2.0 / (n as f64 - 1.0)).sqrt();
        ensure(mean.abs() < 3.0 * se_mean, "q_sample mean within 3 se")?;
        ensure(
            (var - want_var).abs() < 3.0 * se_var,
            "q_sample variance within 3 se",
        )?;
    }
    Ok(())
}

fn algebraic_inverses() -> Result<()> {
    let sched = build_schedule(100, 1e-3, 0.05, ScheduleKind::Linear)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xCAFE);
    for t in [1, 50, 100] {
        let x0: Array1<f64> =
            Array1::from_iter((0..8).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)));
        let eps: Array1<f64> =
            Array1::from_iter((0..8).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)));
        let xt = q_sample(&x0, t, &eps, &sched)?;
        let back = predict_x0_from_eps(&xt, &eps, t, &sched)?;
        for (a, b) in back.iter().zip(x0.iter()) {
            ensure((a - b).abs() < 1e-6, "x0 roundtrip within 1e-6")?;
        }
        // Score against the analytic Gaussian log-density gradient.
        let ab = sched.alpha_bar(t);
        let x0s = 0.4;
        let xts = 0.9;
        let true_eps = (xts - ab.sqrt() * x0s) / (1.0 - ab).sqrt();
        let score = score_from_eps(&arr1(&[true_eps]), t, &sched)?[0];
        let h = 1e-4;
        let log_q = |x: f64| {
            let var = 1.0 - ab;
            let d = x - ab.sqrt() * x0s;
            -0.5 * d * d / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
        };
        let fd = (log_q(xts + h) - log_q(xts - h)) / (2.0 * h);
        ensure((score - fd).abs() < 1e-5, "score matches fd gradient")?;
    }
    Ok(())
}

fn mask_statistics() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xD1CE);
    let n = 10_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let m = sample_masks(0.5, &mut rng)?;
        counts[(m.keep_past as usize) * 2 + m.keep_future as usize] += 1;
    }
    let expected = n as f64 / 4.0;
    let chi2: f64 = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    ensure(chi2 < 11.345, "mask chi-square below critical value")?;
    for _ in 0..100 {
        let m0 = sample_masks(0.0, &mut rng)?;
        ensure(m0.keep_past && m0.keep_future, "p_mask = 0 keeps everything")?;
        let m1 = sample_masks(1.0, &mut rng)?;
        ensure(!m1.keep_past && !m1.keep_future, "p_mask = 1 masks everything")?;
    }
    Ok(())
}

fn embedding_norms() -> Result<()> {
    let mut t = 0.31f64;
    for _ in 0..100 {
        t = (t * 77.77).fract();
        let e = noise_embedding(t, 128, 10_000.0)?;
        ensure(
            (e.squared_norm() - 64.0).abs() < 1e-9,
            "embedding norm D/2 invariant",
        )?;
    }
    Ok(())
}

fn gradient_check() -> Result<()> {
    let cfg = DenoiserConfig {
        conditioning: ConditioningMode::Concat,
        base_width: 2,
        channel_multipliers: vec![1, 2],
        attention_resolutions: vec![4],
        num_res_blocks: 1,
        embedding_dim: 4,
        embedding_constant: 10_000.0,
        groups: 2,
        heads: 2,
        cond_width: 2,
        layout: BlockLayout::new(1, 1, 1, 8, 8, 1)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let net = UNet::new(cfg.clone(), &mut store, &mut rng)?;
    for (_, tensor) in store.iter_mut() {
        tensor.mapv_inplace(|v| v + 0.05 * rng.sample::<f64, _>(rand_distr::StandardNormal));
    }
    ensure(store.num_scalars() <= 5000, "tiny net within budget")?;
    let batch: Vec<VideoBlock<f64>> = (0..2)
        .map(|i| VideoBlock {
            past: Array4::from_shape_fn((1, 8, 8, 1), |_| {
                ((i + 1) as f64 * 0.1).sin().abs()
            }),
            current: Array4::from_shape_fn((1, 8, 8, 1), |(_, y, x, _)| {
                ((y * 8 + x) as f64 * 0.37 + i as f64).sin() * 0.5 + 0.5
            }),
            future: Array4::from_shape_fn((1, 8, 8, 1), |_| 0.25),
        })
        .collect();
    let sched = build_schedule(50, 1e-3, 0.1, ScheduleKind::Linear)?;
    let tcfg = TrainSection {
        regime: MaskingRegime::PastFuture,
        ..Default::default()
    };
    let err = grad_check(&net, &store, &batch, &sched, &tcfg, 220, 1e-3, 7)?;
    ensure(err < 1e-3, "gradient check under 1e-3")?;
    Ok(())
}

fn container_roundtrip() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF00D);
    let v = Array4::from_shape_fn((3, 6, 5, 1), |_| rng.random::<f32>());
    let dir = std::env::temp_dir().join(format!("mcvd-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let p = dir.join("roundtrip.vid");
    crate::data::write_video(&p, &v)?;
    let back = crate::data::read_video(&p)?;
    let ok = back == v;
    let _ = std::fs::remove_file(&p);
    let _ = std::fs::remove_dir(&dir);
    ensure(ok, "container round trip bitwise identical")
}

/// Runs every suite, returning (name, result) pairs in order.
pub fn run_all() -> Vec<(&'static str, Result<()>)> {
    vec![
        ("schedule-identities", schedule_identities()),
        ("forward-moments", forward_moments()),
        ("algebraic-inverses", algebraic_inverses()),
        ("mask-statistics", mask_statistics()),
        ("embedding-norms", embedding_norms()),
        ("gradient-check", gradient_check()),
        ("container-roundtrip", container_roundtrip()),
    ]
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_suites_pass() {
        for (name, result) in super::run_all() {
            assert!(result.is_ok(), "{name}: {:?}", result.err());
        }
    }
}
