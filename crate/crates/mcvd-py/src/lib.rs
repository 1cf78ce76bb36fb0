//! Python bindings. Tensors cross the boundary as (shape, flat f32 list)
//! pairs in frame-major order, matching the on-disk container layout.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyType;

use ndarray::{Array1, Array4};
use std::path::Path;

use mcvd::config::RunConfig;
use mcvd::data::{gen_moving_shapes, SyntheticSpec};
use mcvd::error::McvdError;
use mcvd::masking::{self, MaskPair, TaskKind};
use mcvd::metrics::SsimConfig;
use mcvd::sampler::{self, SamplerConfig, SamplerKind, UNetPredictor};
use mcvd::schedule::{self, ScheduleKind};
use mcvd::trainer::{rebuild_net, CheckpointState};

fn err(e: McvdError) -> PyErr {
    match e {
        McvdError::Io(_) | McvdError::BadMagic { .. } | McvdError::Truncated { .. } => {
            PyIOError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

type Shape4 = (usize, usize, usize, usize);

fn to_array(shape: Shape4, data: Vec<f32>) -> PyResult<Array4<f32>> {
    Array4::from_shape_vec(shape, data)
        .map_err(|e| PyValueError::new_err(format!("shape/data mismatch: {e}")))
}

fn from_array(a: Array4<f32>) -> (Shape4, Vec<f32>) {
    let d = a.dim();
    ((d.0, d.1, d.2, d.3), a.into_raw_vec_and_offset().0)
}

/// Diffusion noise schedule with a linear beta ramp.
#[pyclass(name = "NoiseSchedule")]
struct PySchedule {
    inner: schedule::NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    fn new(t_steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        let inner = schedule::build_schedule(t_steps, beta_start, beta_end, ScheduleKind::Linear)
            .map_err(err)?;
        Ok(PySchedule { inner })
    }

    fn num_steps(&self) -> usize {
        self.inner.num_steps()
    }

    fn betas(&self) -> Vec<f64> {
        self.inner.betas().to_vec()
    }

    fn alpha_bar(&self, t: usize) -> f64 {
        self.inner.alpha_bar(t)
    }

    /// (mean_coef_x0, mean_coef_xt, var) of the reverse posterior at t.
    fn posterior_params(&self, t: usize) -> PyResult<(f64, f64, f64)> {
        let p = schedule::posterior_params(t, &self.inner).map_err(err)?;
        Ok((p.mean_coef_x0, p.mean_coef_xt, p.var))
    }

    fn q_sample(&self, x0: Vec<f64>, t: usize, eps: Vec<f64>) -> PyResult<Vec<f64>> {
        let x0 = Array1::from_vec(x0);
        let eps = Array1::from_vec(eps);
        let xt = schedule::q_sample(&x0, t, &eps, &self.inner).map_err(err)?;
        Ok(xt.to_vec())
    }

    fn predict_x0_from_eps(&self, xt: Vec<f64>, eps: Vec<f64>, t: usize) -> PyResult<Vec<f64>> {
        let xt = Array1::from_vec(xt);
        let eps = Array1::from_vec(eps);
        let x0 = schedule::predict_x0_from_eps(&xt, &eps, t, &self.inner).map_err(err)?;
        Ok(x0.to_vec())
    }

    fn score_from_eps(&self, eps: Vec<f64>, t: usize) -> PyResult<Vec<f64>> {
        let eps = Array1::from_vec(eps);
        let s = schedule::score_from_eps(&eps, t, &self.inner).map_err(err)?;
        Ok(s.to_vec())
    }
}

/// Two independent Bernoulli mask draws with keep-probability 1 - p_mask.
#[pyfunction]
fn sample_masks(p_mask: f64, seed: u64) -> PyResult<(bool, bool)> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let m = masking::sample_masks(p_mask, &mut rng).map_err(err)?;
    Ok((m.keep_past, m.keep_future))
}

/// Task selected by a (keep_past, keep_future) mask pair.
#[pyfunction]
fn task_of_masks(keep_past: bool, keep_future: bool) -> String {
    masking::task_of_masks(MaskPair {
        keep_past,
        keep_future,
    })
    .to_string()
}

/// Sinusoidal noise-level embedding of length dim.
#[pyfunction]
#[pyo3(signature = (t, dim, constant = 10_000.0))]
fn noise_embedding(t: f64, dim: usize, constant: f64) -> PyResult<Vec<f64>> {
    Ok(mcvd::denoiser::noise_embedding(t, dim, constant)
        .map_err(err)?
        .0
        .to_vec())
}

/// Stochastic bouncing-shapes video. Returns ((frames, h, w, c), flat data).
#[pyfunction]
#[pyo3(signature = (height = 16, width = 16, channels = 1, num_shapes = 1, shape_size = 5,
                    min_speed = 1.0, max_speed = 2.0, bounce_prob = 0.2, video_len = 20,
                    seed = 0))]
#[allow(clippy::too_many_arguments)]
fn moving_shapes_video(
    height: usize,
    width: usize,
    channels: usize,
    num_shapes: usize,
    shape_size: usize,
    min_speed: f64,
    max_speed: f64,
    bounce_prob: f64,
    video_len: usize,
    seed: u64,
) -> PyResult<(Shape4, Vec<f32>)> {
    let spec = SyntheticSpec {
        height,
        width,
        channels,
        num_shapes,
        shape_size,
        min_speed,
        max_speed,
        bounce_prob,
        video_len,
        seed,
        ..Default::default()
    };
    Ok(from_array(gen_moving_shapes(&spec).map_err(err)?))
}

#[pyfunction]
fn write_video(path: String, shape: Shape4, data: Vec<f32>) -> PyResult<()> {
    let v = to_array(shape, data)?;
    mcvd::data::write_video(Path::new(&path), &v).map_err(err)
}

#[pyfunction]
fn read_video(path: String) -> PyResult<(Shape4, Vec<f32>)> {
    Ok(from_array(
        mcvd::data::read_video(Path::new(&path)).map_err(err)?,
    ))
}

#[pyfunction]
#[pyo3(signature = (shape, a, b, peak = 1.0))]
fn psnr(shape: Shape4, a: Vec<f32>, b: Vec<f32>, peak: f64) -> PyResult<f64> {
    mcvd::metrics::psnr(&to_array(shape, a)?, &to_array(shape, b)?, peak).map_err(err)
}

#[pyfunction]
fn ssim(shape: Shape4, a: Vec<f32>, b: Vec<f32>) -> PyResult<f64> {
    mcvd::metrics::ssim_video(
        &to_array(shape, a)?,
        &to_array(shape, b)?,
        &SsimConfig::default(),
    )
    .map_err(err)
}

/// A trained model checkpoint.
#[pyclass(name = "Checkpoint")]
struct PyCheckpoint {
    state: CheckpointState,
}

#[pymethods]
impl PyCheckpoint {
    #[classmethod]
    fn load(_cls: &Bound<'_, PyType>, path: String) -> PyResult<Self> {
        Ok(PyCheckpoint {
            state: CheckpointState::load(Path::new(&path)).map_err(err)?,
        })
    }

    #[getter]
    fn step(&self) -> usize {
        self.state.step
    }

    #[getter]
    fn config_text(&self) -> String {
        self.state.run.to_flat_text()
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.state.run.fingerprint()
    }

    fn supported_tasks(&self) -> Vec<String> {
        self.state
            .run
            .train
            .regime
            .supported_tasks(&self.state.run.layout)
            .iter()
            .map(|t| t.to_string())
            .collect()
    }

    /// Sample frames. `context` is an optional ((frames, h, w, c), data)
    /// video providing conditioning frames; its first p frames feed
    /// `predict`, its last f frames feed `retrodict`, both feed
    /// `interpolate`.
    #[pyo3(signature = (task, steps = 100, sampler = "ddpm", seed = 0, blocks = 1, context = None))]
    fn sample(
        &self,
        task: &str,
        steps: usize,
        sampler: &str,
        seed: u64,
        blocks: usize,
        context: Option<(Shape4, Vec<f32>)>,
    ) -> PyResult<(Shape4, Vec<f32>)> {
        let task: TaskKind = task.parse().map_err(err)?;
        let kind: SamplerKind = sampler.parse().map_err(err)?;
        let run = &self.state.run;
        let layout = run.layout;
        let supported = run.train.regime.supported_tasks(&layout);
        if !supported.contains(&task) {
            return Err(PyValueError::new_err(format!(
                "task {task} unsupported by this checkpoint (regime {})",
                run.train.regime
            )));
        }
        let net = rebuild_net(&self.state).map_err(err)?;
        let predictor = UNetPredictor {
            net: &net,
            store: self.state.sampling_params(),
            t_total: run.schedule.steps,
        };
        let sched = run.schedule.build().map_err(err)?;
        let scfg = SamplerConfig {
            kind,
            num_steps: steps,
            seed,
            task,
            blocks,
        };
        let ctx = context
            .map(|(shape, data)| to_array(shape, data))
            .transpose()?;
        let masks = task.masks();
        let past = match (&ctx, masks.keep_past) {
            (Some(c), true) => {
                if c.shape()[0] < layout.past {
                    return Err(PyValueError::new_err("context shorter than layout.past"));
                }
                Some(
                    c.slice_axis(ndarray::Axis(0), (0..layout.past).into())
                        .to_owned(),
                )
            }
            _ => None,
        };
        let future = match (&ctx, masks.keep_future) {
            (Some(c), true) => {
                let n = c.shape()[0];
                if n < layout.future {
                    return Err(PyValueError::new_err("context shorter than layout.future"));
                }
                Some(
                    c.slice_axis(ndarray::Axis(0), (n - layout.future..n).into())
                        .to_owned(),
                )
            }
            _ => None,
        };
        let out = if task == TaskKind::FuturePrediction && blocks > 1 {
            let init = past
                .as_ref()
                .ok_or_else(|| PyValueError::new_err("blockwise prediction needs context"))?;
            sampler::blockwise_autoregressive(&predictor, init, &sched, &scfg, &layout)
                .map_err(err)?
                .frames()
        } else {
            sampler::sample_block(
                &predictor,
                past.as_ref(),
                future.as_ref(),
                task,
                &sched,
                &scfg,
                &layout,
            )
            .map_err(err)?
        };
        Ok(from_array(out))
    }
}

/// Parses flat dotted-key config text and returns the canonical form.
#[pyfunction]
fn canonical_config(text: String) -> PyResult<String> {
    Ok(RunConfig::from_flat_text(&text).map_err(err)?.to_flat_text())
}

/// Runs the built-in invariant suites; returns (name, error-or-None) pairs.
#[pyfunction]
fn selftest() -> Vec<(String, Option<String>)> {
    mcvd::selftest::run_all()
        .into_iter()
        .map(|(name, r)| (name.to_string(), r.err().map(|e| e.to_string())))
        .collect()
}

#[pymodule]
fn mcvd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(sample_masks, m)?)?;
    m.add_function(wrap_pyfunction!(task_of_masks, m)?)?;
    m.add_function(wrap_pyfunction!(noise_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(moving_shapes_video, m)?)?;
    m.add_function(wrap_pyfunction!(write_video, m)?)?;
    m.add_function(wrap_pyfunction!(read_video, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(canonical_config, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
