//! Blockwise past/future masking: two independent Bernoulli draws select one
//! of the four tasks (future prediction, past prediction, unconditional
//! generation, interpolation). Masking zeroes a whole conditioning block,
//! never individual frames, and is used only during training; samplers fix
//! the masks from the requested task.

use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{McvdError, Result};
use crate::real::Real;

/// Frame-count and frame-geometry layout of one training block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    /// Past conditioning frames.
    pub past: usize,
    /// Current (generated) frames.
    pub current: usize,
    /// Future conditioning frames.
    pub future: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl BlockLayout {
    pub fn new(
        past: usize,
        current: usize,
        future: usize,
        height: usize,
        width: usize,
        channels: usize,
    ) -> Result<Self> {
        if current < 1 {
            return Err(McvdError::Range {
                name: "current",
                value: current as f64,
                expected: "k >= 1",
            });
        }
        if height == 0 || width == 0 || channels == 0 {
            return Err(McvdError::config("frame dimensions must be positive"));
        }
        Ok(BlockLayout {
            past,
            current,
            future,
            height,
            width,
            channels,
        })
    }

    /// Total frames in one block window.
    pub fn window(&self) -> usize {
        self.past + self.current + self.future
    }
}

/// One binary mask per conditioning block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskPair {
    /// true keeps the past block, false zeroes it.
    pub keep_past: bool,
    /// true keeps the future block, false zeroes it.
    pub keep_future: bool,
}

/// The four tasks expressible by a (past, future) mask combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    FuturePrediction,
    PastPrediction,
    Unconditional,
    Interpolation,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::FuturePrediction,
        TaskKind::PastPrediction,
        TaskKind::Unconditional,
        TaskKind::Interpolation,
    ];

    /// The mask combination that realizes this task at sampling time.
    pub fn masks(self) -> MaskPair {
        match self {
            TaskKind::FuturePrediction => MaskPair {
                keep_past: true,
                keep_future: false,
            },
            TaskKind::PastPrediction => MaskPair {
                keep_past: false,
                keep_future: true,
            },
            TaskKind::Unconditional => MaskPair {
                keep_past: false,
                keep_future: false,
            },
            TaskKind::Interpolation => MaskPair {
                keep_past: true,
                keep_future: true,
            },
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = McvdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predict" => Ok(TaskKind::FuturePrediction),
            "retrodict" => Ok(TaskKind::PastPrediction),
            "generate" => Ok(TaskKind::Unconditional),
            "interpolate" => Ok(TaskKind::Interpolation),
            other => Err(McvdError::config(format!(
                "unknown task {other:?} (expected predict|retrodict|generate|interpolate)"
            ))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TaskKind::FuturePrediction => "predict",
            TaskKind::PastPrediction => "retrodict",
            TaskKind::Unconditional => "generate",
            TaskKind::Interpolation => "interpolate",
        };
        write!(f, "{s}")
    }
}

/// Which conditioning blocks the training loop may randomly mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingRegime {
    /// Both masks fixed to keep: pure conditional training.
    None,
    /// Random past mask, no future conditioning (layout.future must be 0).
    PastOnly,
    /// Independent random past and future masks: all four tasks.
    PastFuture,
}

impl MaskingRegime {
    /// Tasks a checkpoint trained under this regime can express at sampling
    /// time, given its layout.
    pub fn supported_tasks(self, layout: &BlockLayout) -> Vec<TaskKind> {
        match self {
            MaskingRegime::None => {
                if layout.past > 0 && layout.future > 0 {
                    vec![TaskKind::Interpolation]
                } else if layout.past > 0 {
                    vec![TaskKind::FuturePrediction]
                } else {
                    vec![TaskKind::Unconditional]
                }
            }
            MaskingRegime::PastOnly => {
                vec![TaskKind::FuturePrediction, TaskKind::Unconditional]
            }
            MaskingRegime::PastFuture => {
                let mut tasks = vec![TaskKind::Unconditional];
                if layout.past > 0 {
                    tasks.push(TaskKind::FuturePrediction);
                }
                if layout.future > 0 {
                    tasks.push(TaskKind::PastPrediction);
                }
                if layout.past > 0 && layout.future > 0 {
                    tasks.push(TaskKind::Interpolation);
                }
                tasks
            }
        }
    }
}

impl std::str::FromStr for MaskingRegime {
    type Err = McvdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MaskingRegime::None),
            "past" => Ok(MaskingRegime::PastOnly),
            "past_future" => Ok(MaskingRegime::PastFuture),
            other => Err(McvdError::config(format!(
                "unknown masking regime {other:?} (expected none|past|past_future)"
            ))),
        }
    }
}

impl std::fmt::Display for MaskingRegime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MaskingRegime::None => "none",
            MaskingRegime::PastOnly => "past",
            MaskingRegime::PastFuture => "past_future",
        };
        write!(f, "{s}")
    }
}

/// Draws the two independent block masks. Each mask keeps its block with
/// probability `1 - p_mask`. The past mask is always drawn first.
pub fn sample_masks<R: Rng>(p_mask: f64, rng: &mut R) -> Result<MaskPair> {
    if !(0.0..=1.0).contains(&p_mask) {
        return Err(McvdError::Range {
            name: "p_mask",
            value: p_mask,
            expected: "0 <= p_mask <= 1",
        });
    }
    let keep_past = rng.random::<f64>() >= p_mask;
    let keep_future = rng.random::<f64>() >= p_mask;
    Ok(MaskPair {
        keep_past,
        keep_future,
    })
}

/// Applies one blockwise mask: identity when kept, all-zeros otherwise.
pub fn apply_mask<T: Real>(frames: &Array4<T>, keep: bool) -> Array4<T> {
    if keep {
        frames.clone()
    } else {
        Array4::zeros(frames.raw_dim())
    }
}

/// Maps a mask combination to the task it realizes.
pub fn task_of_masks(m: MaskPair) -> TaskKind {
    match (m.keep_past, m.keep_future) {
        (true, false) => TaskKind::FuturePrediction,
        (false, true) => TaskKind::PastPrediction,
        (false, false) => TaskKind::Unconditional,
        (true, true) => TaskKind::Interpolation,
    }
}
