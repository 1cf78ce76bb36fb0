//! Masked conditional training: the eps-prediction objective with random
//! blockwise masks, an adaptive-moment optimizer with global-norm clipping
//! and parameter EMA, deterministic checkpoint/resume, and finite-difference
//! gradient verification.

mod checkpoint;

pub use checkpoint::CheckpointState;

use ndarray::{Array1, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use std::path::Path;

use crate::config::{RunConfig, TrainSection};
use crate::data::{Video, VideoBlock};
use crate::denoiser::{stack_frames, EpsModel, UNet};
use crate::error::{McvdError, Result};
use crate::masking::{apply_mask, BlockLayout, MaskPair, MaskingRegime};
use crate::nn::{GradStore, ParamStore};
use crate::real::Real;
use crate::schedule::{q_sample, NoiseSchedule};

/// In-memory training set: pre-extracted windows over the source videos.
#[derive(Debug, Clone)]
pub struct Dataset {
    blocks: Vec<VideoBlock<f32>>,
}

impl Dataset {
    pub fn from_videos(videos: &[Video], layout: &BlockLayout, stride: usize) -> Result<Self> {
        let mut blocks = Vec::new();
        for v in videos {
            blocks.extend(crate::data::extract_blocks(v, layout, stride)?);
        }
        if blocks.is_empty() {
            return Err(McvdError::config("dataset has no usable windows"));
        }
        Ok(Dataset { blocks })
    }

    pub fn from_blocks(blocks: Vec<VideoBlock<f32>>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(McvdError::config("dataset has no usable windows"));
        }
        Ok(Dataset { blocks })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block(&self, i: usize) -> &VideoBlock<f32> {
        &self.blocks[i]
    }
}

/// Per-sample randomness for one loss evaluation, drawn ahead of the batch
/// computation so parallel evaluation stays deterministic.
#[derive(Debug, Clone)]
pub struct SampleDraw<T> {
    pub t: usize,
    pub eps: Array4<T>,
    pub masks: MaskPair,
}

/// Draw order per sample: t, then the noise tensor, then the two mask bits.
/// Masks are drawn for every regime (and overridden where the regime fixes
/// them) so the rng stream is regime-independent.
pub fn draw_batch<T: Real, R: Rng>(
    batch: &[VideoBlock<T>],
    sched: &NoiseSchedule,
    cfg: &TrainSection,
    rng: &mut R,
) -> Result<Vec<SampleDraw<T>>> {
    let mut draws = Vec::with_capacity(batch.len());
    for item in batch {
        let t = rng.random_range(1..=sched.num_steps());
        let n = item.current.len();
        let noise: Vec<T> = (0..n)
            .map(|_| T::from_f64(StandardNormal.sample(rng)))
            .collect();
        let eps = Array4::from_shape_vec(item.current.raw_dim(), noise).expect("noise shape");
        let drawn = crate::masking::sample_masks(cfg.p_mask, rng)?;
        let masks = match cfg.regime {
            MaskingRegime::None => MaskPair {
                keep_past: true,
                keep_future: true,
            },
            MaskingRegime::PastOnly => MaskPair {
                keep_past: drawn.keep_past,
                keep_future: true,
            },
            MaskingRegime::PastFuture => drawn,
        };
        draws.push(SampleDraw { t, eps, masks });
    }
    Ok(draws)
}

#[allow(clippy::type_complexity)]
fn item_forward<T: Real, M: EpsModel<T>>(
    model: &M,
    store: &ParamStore<T>,
    item: &VideoBlock<T>,
    draw: &SampleDraw<T>,
    sched: &NoiseSchedule,
) -> Result<(f64, Array3<T>, Array3<T>, M::Tape)> {
    let xt = q_sample(&item.current, draw.t, &draw.eps, sched)?;
    let past = apply_mask(&item.past, draw.masks.keep_past);
    let future = apply_mask(&item.future, draw.masks.keep_future);
    let t_level = draw.t as f64 / sched.num_steps() as f64;
    let (eps_hat, tape) = model.forward_eps(
        store,
        &stack_frames(&xt),
        &stack_frames(&past),
        &stack_frames(&future),
        t_level,
    );
    let eps_st = stack_frames(&draw.eps);
    let n = eps_st.len() as f64;
    let mut residual = eps_hat;
    residual.zip_mut_with(&eps_st, |a, &b| *a = *a - b);
    let loss = residual.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / n;
    Ok((loss, residual, eps_st, tape))
}

/// Mean eps-prediction error over the batch with the given pre-drawn
/// randomness: (1/B) sum_i mean_j (eps_ij - eps_hat_ij)^2.
pub fn loss_given_draws<T: Real, M: EpsModel<T> + Sync>(
    model: &M,
    store: &ParamStore<T>,
    batch: &[VideoBlock<T>],
    draws: &[SampleDraw<T>],
    sched: &NoiseSchedule,
) -> Result<f64> {
    let per_item: Vec<Result<f64>> = batch
        .par_iter()
        .zip(draws.par_iter())
        .map(|(item, draw)| item_forward(model, store, item, draw, sched).map(|r| r.0))
        .collect();
    let mut total = 0.0;
    for r in per_item {
        total += r?;
    }
    Ok(total / batch.len() as f64)
}

/// Loss plus parameter gradients of the batch-mean objective. Per-item
/// gradients are computed in parallel and reduced in batch order, so the
/// result is bit-deterministic.
pub fn loss_and_grads<T: Real, M: EpsModel<T> + Sync>(
    model: &M,
    store: &ParamStore<T>,
    batch: &[VideoBlock<T>],
    draws: &[SampleDraw<T>],
    sched: &NoiseSchedule,
) -> Result<(f64, GradStore<T>, Vec<f64>)> {
    let b = batch.len() as f64;
    let per_item: Vec<Result<(f64, GradStore<T>)>> = batch
        .par_iter()
        .zip(draws.par_iter())
        .map(|(item, draw)| {
            let (loss, residual, _eps, tape) = item_forward(model, store, item, draw, sched)?;
            let n = residual.len() as f64;
            let scale = T::from_f64(2.0 / (n * b));
            let d_eps = residual.mapv(|v| v * scale);
            let mut grads = GradStore::new();
            model.backward_eps(store, &tape, &d_eps, &mut grads);
            Ok((loss, grads))
        })
        .collect();
    let mut total = GradStore::zeros_like(store);
    let mut losses = Vec::with_capacity(batch.len());
    let mut sum = 0.0;
    for r in per_item {
        let (loss, g) = r?;
        losses.push(loss);
        sum += loss;
        total.add_assign(&g);
    }
    Ok((sum / b, total, losses))
}

/// One training-objective evaluation: draws t, eps and masks per sample from
/// the rng, then returns the batch-mean loss. Deterministic given the seed.
pub fn loss_step<T: Real, M: EpsModel<T> + Sync, R: Rng>(
    model: &M,
    store: &ParamStore<T>,
    batch: &[VideoBlock<T>],
    sched: &NoiseSchedule,
    cfg: &TrainSection,
    rng: &mut R,
) -> Result<f64> {
    let draws = draw_batch(batch, sched, cfg, rng)?;
    let loss = loss_given_draws(model, store, batch, &draws, sched)?;
    if !loss.is_finite() {
        let losses: Vec<f64> = batch
            .iter()
            .zip(&draws)
            .map(|(item, draw)| {
                item_forward(model, store, item, draw, sched)
                    .map(|r| r.0)
                    .unwrap_or(f64::NAN)
            })
            .collect();
        let bad = losses.iter().position(|l| !l.is_finite()).unwrap_or(0);
        return Err(McvdError::numeric(format!(
            "non-finite loss at batch index {bad}"
        )));
    }
    Ok(loss)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn adam_update(
    params: &mut ParamStore<f32>,
    grads: &GradStore<f32>,
    m: &mut ParamStore<f32>,
    v: &mut ParamStore<f32>,
    lr: f64,
    step: usize,
) {
    let b1 = ADAM_BETA1 as f32;
    let b2 = ADAM_BETA2 as f32;
    let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
    let keys: Vec<String> = params.keys().cloned().collect();
    for key in keys {
        let g = match grads.get(&key) {
            Some(g) => g,
            None => continue,
        };
        let mk = m.get_mut(&key);
        mk.zip_mut_with(g, |a, &b| *a = b1 * *a + (1.0 - b1) * b);
        let mk = mk.clone();
        let vk = v.get_mut(&key);
        vk.zip_mut_with(g, |a, &b| *a = b2 * *a + (1.0 - b2) * b * b);
        let vk = vk.clone();
        let p = params.get_mut(&key);
        ndarray::Zip::from(p)
            .and(&mk)
            .and(&vk)
            .for_each(|p, &mi, &vi| {
                let mhat = mi as f64 / bc1;
                let vhat = vi as f64 / bc2;
                *p -= (lr * mhat / (vhat.sqrt() + ADAM_EPS)) as f32;
            });
    }
}

fn ema_update(ema: &mut ParamStore<f32>, params: &ParamStore<f32>, decay: f64) {
    let d = decay as f32;
    let keys: Vec<String> = params.keys().cloned().collect();
    for key in keys {
        let p = params.get(&key).clone();
        ema.get_mut(&key)
            .zip_mut_with(&p, |e, &pv| *e = d * *e + (1.0 - d) * pv);
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Fresh step-0 state for a run: initialized parameters, zeroed optimizer
/// moments, EMA mirror, and the training rng at its starting position.
pub fn init_state(run: &RunConfig) -> Result<CheckpointState> {
    run.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
    let mut params = ParamStore::<f32>::new();
    UNet::new(run.denoiser_config(), &mut params, &mut rng)?;
    let opt_m = zeros_like_store(&params);
    let opt_v = zeros_like_store(&params);
    let ema = run.train.ema.then(|| params.clone());
    Ok(CheckpointState {
        step: 0,
        run: run.clone(),
        params,
        opt_m,
        opt_v,
        ema,
        rng_seed: rng.get_seed(),
        rng_word_pos: rng.get_word_pos(),
    })
}

fn zeros_like_store(params: &ParamStore<f32>) -> ParamStore<f32> {
    let mut out = ParamStore::new();
    for (k, t) in params.iter() {
        out.insert(k.clone(), ndarray::ArrayD::zeros(t.raw_dim()));
    }
    out
}

/// Rebuilds the network descriptor for a state and checks the stored tensors
/// against the freshly derived shapes.
pub fn rebuild_net(state: &CheckpointState) -> Result<UNet> {
    let mut scratch = ParamStore::<f32>::new();
    let mut dummy = ChaCha8Rng::seed_from_u64(0);
    let net = UNet::new(state.run.denoiser_config(), &mut scratch, &mut dummy)?;
    for (k, t) in scratch.iter() {
        if !state.params.contains(k) || state.params.get(k).shape() != t.shape() {
            return Err(McvdError::config(format!(
                "checkpoint parameters do not match the configured architecture (at {k})"
            )));
        }
    }
    if scratch.len() != state.params.len() {
        return Err(McvdError::config(
            "checkpoint has extra parameters for this architecture",
        ));
    }
    Ok(net)
}

/// Divergence watchdog threshold: consecutive steps with loss above 10x the
/// initial loss of this run segment.
const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 100;

/// Runs training from the state's step up to `run.train.steps`, writing a
/// checkpoint every `checkpoint_interval` steps when a directory is given.
/// Resuming from a saved state reproduces an uninterrupted run bit-exactly.
pub fn train_from(
    mut state: CheckpointState,
    data: &Dataset,
    ckpt_dir: Option<&Path>,
    mut progress: Option<&mut dyn FnMut(usize, f64)>,
) -> Result<CheckpointState> {
    let run = state.run.clone();
    run.validate()?;
    let sched = run.schedule.build()?;
    let net = rebuild_net(&state)?;
    let mut rng = ChaCha8Rng::from_seed(state.rng_seed);
    rng.set_word_pos(state.rng_word_pos);

    let mut initial_loss: Option<f64> = None;
    let mut high_loss_streak = 0usize;

    for step in state.step..run.train.steps {
        let batch: Vec<VideoBlock<f32>> = (0..run.train.batch_size)
            .map(|_| data.block(rng.random_range(0..data.len())).clone())
            .collect();
        let draws = draw_batch(&batch, &sched, &run.train, &mut rng)?;
        let (loss, mut grads, item_losses) =
            loss_and_grads(&net, &state.params, &batch, &draws, &sched)?;
        if !loss.is_finite() {
            let bad = item_losses.iter().position(|l| !l.is_finite()).unwrap_or(0);
            return Err(McvdError::numeric(format!(
                "non-finite loss at step {step}, batch index {bad}"
            )));
        }
        let init = *initial_loss.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * init {
            high_loss_streak += 1;
            if high_loss_streak >= DIVERGENCE_PATIENCE {
                return Err(McvdError::numeric(format!(
                    "divergence: loss {loss:.6} above {DIVERGENCE_FACTOR}x initial \
                     {init:.6} for {DIVERGENCE_PATIENCE} consecutive steps (step {step})"
                )));
            }
        } else {
            high_loss_streak = 0;
        }

        if run.train.clip_norm > 0.0 {
            let norm = grads.global_norm();
            if norm > run.train.clip_norm {
                grads.scale((run.train.clip_norm / norm) as f32);
            }
        }
        adam_update(
            &mut state.params,
            &grads,
            &mut state.opt_m,
            &mut state.opt_v,
            run.train.lr,
            step + 1,
        );
        if let Some(ema) = &mut state.ema {
            ema_update(ema, &state.params, run.train.ema_decay);
        }
        state.step = step + 1;
        state.rng_seed = rng.get_seed();
        state.rng_word_pos = rng.get_word_pos();
        if let Some(cb) = progress.as_deref_mut() {
            cb(state.step, loss);
        }
        if let Some(dir) = ckpt_dir {
            if run.train.checkpoint_interval > 0 && state.step.is_multiple_of(run.train.checkpoint_interval)
            {
                state.save(&dir.join(format!("ckpt-{:06}.ckpt", state.step)))?;
            }
        }
    }
    Ok(state)
}

/// Full training run from scratch.
pub fn train(
    data: &Dataset,
    run: &RunConfig,
    ckpt_dir: Option<&Path>,
    progress: Option<&mut dyn FnMut(usize, f64)>,
) -> Result<CheckpointState> {
    train_from(init_state(run)?, data, ckpt_dir, progress)
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

/// Compares analytic gradients against central finite differences
/// (step `h`, 64-bit) on `coords` coordinates sampled uniformly across the
/// flattened parameter space. Returns the max relative error.
#[allow(clippy::too_many_arguments)]
pub fn grad_check<M: EpsModel<f64> + Sync>(
    model: &M,
    store: &ParamStore<f64>,
    batch: &[VideoBlock<f64>],
    sched: &NoiseSchedule,
    cfg: &TrainSection,
    coords: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    let mut draw_rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = draw_batch(batch, sched, cfg, &mut draw_rng)?;
    let (_, grads, _) = loss_and_grads(model, store, batch, &draws, sched)?;

    let keys: Vec<String> = store.keys().cloned().collect();
    let sizes: Vec<usize> = keys.iter().map(|k| store.get(k).len()).collect();
    let total: usize = sizes.iter().sum();
    let mut coord_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut max_rel = 0.0f64;
    for _ in 0..coords {
        let mut flat = coord_rng.random_range(0..total);
        let mut ki = 0;
        while flat >= sizes[ki] {
            flat -= sizes[ki];
            ki += 1;
        }
        let key = &keys[ki];
        let mut plus = store.clone();
        plus.get_mut(key).as_slice_mut().unwrap()[flat] += h;
        let mut minus = store.clone();
        minus.get_mut(key).as_slice_mut().unwrap()[flat] -= h;
        let lp = loss_given_draws(model, &plus, batch, &draws, sched)?;
        let lm = loss_given_draws(model, &minus, batch, &draws, sched)?;
        let fd = (lp - lm) / (2.0 * h);
        let an = grads
            .get(key)
            .map(|g| g.as_slice().unwrap()[flat])
            .unwrap_or(0.0);
        let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

// ---------------------------------------------------------------------------
// Linear toy denoiser (closed-form gradient oracle target)
// ---------------------------------------------------------------------------

/// eps_hat = W vec(x_t) + b, ignoring conditioning and noise level. Its loss
/// gradient has a hand-derivable closed form, which pins the gradient-check
/// machinery itself.
pub struct LinearDenoiser {
    pub dim: usize,
    shape: (usize, usize, usize),
}

impl LinearDenoiser {
    pub fn new<T: Real, R: Rng>(
        shape: (usize, usize, usize),
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let dim = shape.0 * shape.1 * shape.2;
        store.insert_gaussian("linear.weight", &[dim, dim], (1.0 / dim as f64).sqrt(), rng);
        store.insert_const("linear.bias", &[dim], 0.0);
        LinearDenoiser { dim, shape }
    }
}

impl<T: Real> EpsModel<T> for LinearDenoiser {
    type Tape = Array1<T>;

    fn forward_eps(
        &self,
        store: &ParamStore<T>,
        current: &Array3<T>,
        _past: &Array3<T>,
        _future: &Array3<T>,
        _t_level: f64,
    ) -> (Array3<T>, Self::Tape) {
        let x = Array1::from_iter(current.iter().cloned());
        let w = store
            .get("linear.weight")
            .view()
            .into_shape_with_order((self.dim, self.dim))
            .unwrap();
        let b = store
            .get("linear.bias")
            .view()
            .into_shape_with_order(self.dim)
            .unwrap();
        let y = w.dot(&x) + b;
        (
            Array3::from_shape_vec(self.shape, y.to_vec()).unwrap(),
            x,
        )
    }

    fn backward_eps(
        &self,
        _store: &ParamStore<T>,
        x: &Self::Tape,
        d_eps: &Array3<T>,
        grads: &mut GradStore<T>,
    ) {
        let dy = Array1::from_iter(d_eps.iter().cloned());
        let dw = ndarray::Array2::from_shape_fn((self.dim, self.dim), |(i, j)| dy[i] * x[j]);
        grads.accumulate(
            "linear.weight",
            dw.into_dyn(),
        );
        grads.accumulate(
            "linear.bias",
            ndarray::ArrayD::from_shape_vec(vec![self.dim], dy.to_vec()).unwrap(),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_moving_shapes, SyntheticSpec};
    use crate::denoiser::{ConditioningMode, DenoiserConfig};
    use crate::schedule::{build_schedule, ScheduleKind};

    fn small_sched() -> NoiseSchedule {
        build_schedule(10, 0.01, 0.2, ScheduleKind::Linear).unwrap()
    }

    fn tiny_batch<T: Real>(n: usize, layout: &BlockLayout, seed: u64) -> Vec<VideoBlock<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| VideoBlock {
                past: Array4::from_shape_fn(
                    (layout.past, layout.height, layout.width, layout.channels),
                    |_| T::from_f64(rng.random::<f64>()),
                ),
                current: Array4::from_shape_fn(
                    (layout.current, layout.height, layout.width, layout.channels),
                    |_| T::from_f64(rng.random::<f64>()),
                ),
                future: Array4::from_shape_fn(
                    (layout.future, layout.height, layout.width, layout.channels),
                    |_| T::from_f64(rng.random::<f64>()),
                ),
            })
            .collect()
    }

    struct OracleModel;

    /// Returns exactly the drawn eps: only possible because the test feeds
    /// x_t = q_sample(x0, eps) and knows the schedule, so it reconstructs eps
    /// from x_t alone when x0 = 0.
    impl EpsModel<f64> for OracleModel {
        type Tape = ();
        fn forward_eps(
            &self,
            _store: &ParamStore<f64>,
            current: &Array3<f64>,
            _past: &Array3<f64>,
            _future: &Array3<f64>,
            t_level: f64,
        ) -> (Array3<f64>, ()) {
            // x0 = 0 implies x_t = sqrt(1 - abar_t) eps.
            let sched = small_sched();
            let t = (t_level * sched.num_steps() as f64).round() as usize;
            let ab = sched.alpha_bar(t);
            (current.mapv(|v| v / (1.0 - ab).sqrt()), ())
        }
        fn backward_eps(
            &self,
            _store: &ParamStore<f64>,
            _tape: &(),
            _d: &Array3<f64>,
            _g: &mut GradStore<f64>,
        ) {
        }
    }

    #[test]
    fn oracle_model_gives_zero_loss() {
        let layout = BlockLayout::new(0, 1, 0, 4, 4, 1).unwrap();
        let mut batch = tiny_batch::<f64>(3, &layout, 0);
        for b in &mut batch {
            b.current.fill(0.0);
        }
        let sched = small_sched();
        let cfg = TrainSection {
            regime: MaskingRegime::None,
            ..Default::default()
        };
        let store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let loss = loss_step(&OracleModel, &store, &batch, &sched, &cfg, &mut rng).unwrap();
        assert!(loss < 1e-12, "oracle loss {loss}");
    }

    struct ZeroModel;
    impl EpsModel<f64> for ZeroModel {
        type Tape = ();
        fn forward_eps(
            &self,
            _s: &ParamStore<f64>,
            current: &Array3<f64>,
            _p: &Array3<f64>,
            _f: &Array3<f64>,
            _t: f64,
        ) -> (Array3<f64>, ()) {
            (Array3::zeros(current.raw_dim()), ())
        }
        fn backward_eps(
            &self,
            _s: &ParamStore<f64>,
            _t: &(),
            _d: &Array3<f64>,
            _g: &mut GradStore<f64>,
        ) {
        }
    }

    #[test]
    fn zero_model_loss_concentrates_at_one() {
        // Mean of eps^2 over ~1e5 elements: 1.0 within 3 standard errors.
        let layout = BlockLayout::new(0, 4, 0, 16, 16, 1).unwrap();
        let batch = tiny_batch::<f64>(100, &layout, 3);
        let n_total = 100 * 4 * 16 * 16;
        let sched = small_sched();
        let cfg = TrainSection {
            regime: MaskingRegime::None,
            ..Default::default()
        };
        let store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let loss = loss_step(&ZeroModel, &store, &batch, &sched, &cfg, &mut rng).unwrap();
        let se = (2.0f64 / n_total as f64).sqrt();
        assert!(
            (loss - 1.0).abs() < 3.0 * se,
            "loss {loss}, se {se} (n = {n_total})"
        );
    }

    #[test]
    fn regime_none_equals_past_future_with_zero_p_mask() {
        let layout = BlockLayout::new(1, 2, 1, 8, 8, 1).unwrap();
        let batch = tiny_batch::<f64>(4, &layout, 7);
        let sched = small_sched();
        let model = ZeroModel;
        let store = ParamStore::<f64>::new();
        let a = {
            let cfg = TrainSection {
                regime: MaskingRegime::None,
                p_mask: 0.0,
                ..Default::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            loss_step(&model, &store, &batch, &sched, &cfg, &mut rng).unwrap()
        };
        let b = {
            let cfg = TrainSection {
                regime: MaskingRegime::PastFuture,
                p_mask: 0.0,
                ..Default::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            loss_step(&model, &store, &batch, &sched, &cfg, &mut rng).unwrap()
        };
        assert_eq!(a, b);
    }

    #[allow(clippy::field_reassign_with_default)]
fn tiny_run_config() -> RunConfig {
        let mut run = RunConfig::default();
        run.data = SyntheticSpec {
            height: 8,
            width: 8,
            video_len: 8,
            seed: 1,
            ..Default::default()
        };
        run.data.shape_size = 3;
        run.layout = BlockLayout::new(1, 2, 0, 8, 8, 1).unwrap();
        run.model.base_width = 2;
        run.model.channel_multipliers = vec![1, 2];
        run.model.attention_resolutions = vec![4];
        run.model.embedding_dim = 4;
        run.model.groups = 2;
        run.model.heads = 2;
        run.model.cond_width = 2;
        run.train.regime = MaskingRegime::PastOnly;
        run.train.batch_size = 2;
        run.train.steps = 4;
        run.train.checkpoint_interval = 2;
        run.sample.steps = 5;
        run
    }

    fn tiny_dataset(run: &RunConfig) -> Dataset {
        let videos: Vec<Video> = (0..2)
            .map(|i| {
                gen_moving_shapes(&SyntheticSpec {
                    seed: i,
                    ..run.data.clone()
                })
                .unwrap()
            })
            .collect();
        Dataset::from_videos(&videos, &run.layout, run.train.stride).unwrap()
    }

    #[test]
    fn realized_task_mix_is_uniform_at_half_p_mask() {
        // Chi-square over the four tasks realized by training draws,
        // alpha = 0.01, df = 3.
        let layout = BlockLayout::new(1, 1, 1, 4, 4, 1).unwrap();
        let batch = tiny_batch::<f64>(1, &layout, 0);
        let sched = small_sched();
        let cfg = TrainSection {
            regime: MaskingRegime::PastFuture,
            p_mask: 0.5,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut counts = [0usize; 4];
        let n = 10_000;
        for _ in 0..n {
            let draws = draw_batch(&batch, &sched, &cfg, &mut rng).unwrap();
            let m = draws[0].masks;
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
        assert!(chi2 < 11.345, "chi2 {chi2} over {counts:?}");
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let mut run = tiny_run_config();
        run.train.steps = 0;
        let data = tiny_dataset(&run);
        let init = init_state(&run).unwrap();
        let initial = init.params.clone();
        let out = train_from(init, &data, None, None).unwrap();
        assert_eq!(out.step, 0);
        for (k, t) in initial.iter() {
            assert_eq!(out.params.get(k), t);
        }
    }

    #[test]
    fn training_reduces_held_out_loss_and_resume_is_bit_exact() {
        let run = tiny_run_config();
        let data = tiny_dataset(&run);
        let sched = run.schedule.build().unwrap();

        let init = init_state(&run).unwrap();
        let net = rebuild_net(&init).unwrap();
        let eval_batch: Vec<VideoBlock<f32>> =
            (0..4).map(|i| data.block(i % data.len()).clone()).collect();
        let eval = |params: &ParamStore<f32>| {
            let mut rng = ChaCha8Rng::seed_from_u64(123);
            loss_step(&net, params, &eval_batch, &sched, &run.train, &mut rng).unwrap()
        };
        let before = eval(&init.params);

        // Longer run for the loss-decrease check.
        let mut run_long = run.clone();
        run_long.train.steps = 30;
        run_long.train.lr = 1e-2;
        let trained = train(&data, &run_long, None, None).unwrap();
        let after = eval(&trained.params);
        assert!(after < before, "loss should drop: {before} -> {after}");

        // Resume equivalence: 4 steps straight vs 2 + reload + 2.
        let full = train(&data, &run, None, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let _ = train(&data, &run, Some(dir.path()), None).unwrap();
        let mid = CheckpointState::load(&dir.path().join("ckpt-000002.ckpt")).unwrap();
        assert_eq!(mid.step, 2);
        let resumed = train_from(mid, &data, None, None).unwrap();
        assert_eq!(resumed.step, full.step);
        for (k, t) in full.params.iter() {
            assert_eq!(resumed.params.get(k), t, "param {k} differs after resume");
        }
        assert_eq!(resumed.ema.is_some(), full.ema.is_some());
        if let (Some(a), Some(b)) = (&resumed.ema, &full.ema) {
            for (k, t) in a.iter() {
                assert_eq!(b.get(k), t, "ema {k} differs after resume");
            }
        }
    }

    #[test]
    fn grad_check_linear_toy_is_tight() {
        let layout = BlockLayout::new(0, 1, 0, 4, 4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let model = LinearDenoiser::new((1, 4, 4), &mut store, &mut rng);
        let batch = tiny_batch::<f64>(2, &layout, 4);
        let sched = small_sched();
        let cfg = TrainSection {
            regime: MaskingRegime::None,
            ..Default::default()
        };
        let err = grad_check(&model, &store, &batch, &sched, &cfg, 200, 1e-3, 31).unwrap();
        assert!(err < 1e-6, "linear toy rel error {err}");

        // Closed form: dL/dW = (2 / (N B)) sum_b r_b x_b^T.
        let mut draw_rng = ChaCha8Rng::seed_from_u64(31);
        let draws = draw_batch(&batch, &sched, &cfg, &mut draw_rng).unwrap();
        let (_, grads, _) = loss_and_grads(&model, &store, &batch, &draws, &sched).unwrap();
        let dim = model.dim;
        let mut dw_oracle = ndarray::Array2::<f64>::zeros((dim, dim));
        let n = dim as f64;
        let b_count = batch.len() as f64;
        for (item, draw) in batch.iter().zip(&draws) {
            let xt = q_sample(&item.current, draw.t, &draw.eps, &sched).unwrap();
            let x = Array1::from_iter(stack_frames(&xt).iter().cloned());
            let w = store
                .get("linear.weight")
                .view()
                .into_shape_with_order((dim, dim))
                .unwrap();
            let bias = store
                .get("linear.bias")
                .view()
                .into_shape_with_order(dim)
                .unwrap();
            let eps = Array1::from_iter(stack_frames(&draw.eps).iter().cloned());
            let r = w.dot(&x) + bias - eps;
            for i in 0..dim {
                for j in 0..dim {
                    dw_oracle[(i, j)] += 2.0 / (n * b_count) * r[i] * x[j];
                }
            }
        }
        let got = grads.get("linear.weight").unwrap();
        for (a, b) in got.iter().zip(dw_oracle.iter()) {
            assert!((a - b).abs() < 1e-12, "closed form mismatch {a} vs {b}");
        }
    }

    #[test]
    fn grad_check_tiny_unet_under_tolerance() {
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
            layout: BlockLayout::new(1, 1, 1, 8, 8, 1).unwrap(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let net = UNet::new(cfg.clone(), &mut store, &mut rng).unwrap();
        for (_, tensor) in store.iter_mut() {
            tensor.mapv_inplace(|v| v + 0.05 * rng.sample::<f64, _>(StandardNormal));
        }
        assert!(store.num_scalars() <= 5000);
        let batch = tiny_batch::<f64>(2, &cfg.layout, 6);
        let sched = small_sched();
        let tcfg = TrainSection {
            regime: MaskingRegime::PastFuture,
            ..Default::default()
        };
        let err = grad_check(&net, &store, &batch, &sched, &tcfg, 220, 1e-3, 17).unwrap();
        assert!(err < 1e-3, "tiny unet rel error {err}");
    }
}
