//! Transformer-style sinusoidal embedding of the noise level.

use ndarray::Array1;

use crate::error::{McvdError, Result};

/// Sinusoidal noise-level embedding: interleaved pairs
/// [cos(t w_d), sin(t w_d)] with w_d = c^(-2d/D) for d = 1..D/2.
/// Every pair contributes cos^2 + sin^2 = 1, so the squared norm is D/2.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseEmbedding(pub Array1<f64>);

pub fn noise_embedding(t: f64, dim: usize, constant: f64) -> Result<NoiseEmbedding> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(McvdError::Range {
            name: "embedding_dim",
            value: dim as f64,
            expected: "even and >= 2",
        });
    }
    let half = dim / 2;
    let mut e = Array1::zeros(dim);
    for d in 1..=half {
        let freq = constant.powf(-2.0 * d as f64 / dim as f64);
        e[2 * (d - 1)] = (t * freq).cos();
        e[2 * (d - 1) + 1] = (t * freq).sin();
    }
    Ok(NoiseEmbedding(e))
}

impl NoiseEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn squared_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }
}
