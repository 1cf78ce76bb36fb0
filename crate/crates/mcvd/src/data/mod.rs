//! Synthetic video data: stochastic bouncing-shape generator, sliding-window
//! block extraction, and the binary video container.

mod container;
mod synth;

pub use container::{export_png_strip, read_video, write_video, VIDEO_MAGIC};
pub use synth::{gen_moving_shapes, reflect_trajectory, ShapeKind, SyntheticSpec};

use ndarray::{Array4, Axis};

use crate::error::{McvdError, Result};
use crate::masking::BlockLayout;
use crate::real::Real;

/// A video: (frames, height, width, channels), values in [0, 1].
pub type Video = Array4<f32>;

/// One training window split into its past / current / future blocks.
/// Frames are contiguous and in temporal order: past precedes current
/// precedes future.
#[derive(Debug, Clone)]
pub struct VideoBlock<T> {
    pub past: Array4<T>,
    pub current: Array4<T>,
    pub future: Array4<T>,
}

impl<T: Real> VideoBlock<T> {
    pub fn cast<U: Real>(&self) -> VideoBlock<U> {
        VideoBlock {
            past: self.past.mapv(|v| U::from_f64(v.as_f64())),
            current: self.current.mapv(|v| U::from_f64(v.as_f64())),
            future: self.future.mapv(|v| U::from_f64(v.as_f64())),
        }
    }
}

/// Cuts sliding windows of `p + k + f` frames at the given stride.
/// Window count: floor((len - (p+k+f)) / stride) + 1.
pub fn extract_blocks(
    video: &Video,
    layout: &BlockLayout,
    stride: usize,
) -> Result<Vec<VideoBlock<f32>>> {
    if stride == 0 {
        return Err(McvdError::config("stride must be >= 1"));
    }
    let len = video.shape()[0];
    let window = layout.window();
    if len < window {
        return Err(McvdError::shape(format!(
            "video has {len} frames; layout needs at least {window}"
        )));
    }
    let (h, w, c) = (video.shape()[1], video.shape()[2], video.shape()[3]);
    if (h, w, c) != (layout.height, layout.width, layout.channels) {
        return Err(McvdError::shape(format!(
            "video frames {h}x{w}x{c} do not match layout {}x{}x{}",
            layout.height, layout.width, layout.channels
        )));
    }
    let count = (len - window) / stride + 1;
    let mut blocks = Vec::with_capacity(count);
    for i in 0..count {
        let s = i * stride;
        let past = video
            .slice_axis(Axis(0), (s..s + layout.past).into())
            .to_owned();
        let current = video
            .slice_axis(Axis(0), (s + layout.past..s + layout.past + layout.current).into())
            .to_owned();
        let future = video
            .slice_axis(
                Axis(0),
                (s + layout.past + layout.current..s + window).into(),
            )
            .to_owned();
        blocks.push(VideoBlock {
            past,
            current,
            future,
        });
    }
    Ok(blocks)
}
