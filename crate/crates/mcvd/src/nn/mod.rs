//! Minimal neural-network toolkit with hand-written backward passes.
//!
//! Every layer is a thin descriptor that reads its tensors from a named
//! [`ParamStore`]; forward passes return a cache with exactly what the
//! backward pass needs. All kernels are single-threaded and deterministic so
//! whole-model evaluations are bit-reproducible.

mod attention;
mod conv;
mod linear;
mod norm;
mod param;

pub use attention::{Attention, AttentionCache};
pub use conv::{Conv2d, Conv2dCache};
pub use linear::{Linear, LinearCache};
pub use norm::{GroupNorm, GroupNormCache};
pub use param::{GradStore, ParamStore};

use ndarray::{Array1, Array3};

use crate::real::Real;

/// x * sigmoid(x), the activation used throughout.
pub fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

/// Derivative of silu at x.
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

pub fn silu_map<T: Real>(x: &Array3<T>) -> Array3<T> {
    x.mapv(silu)
}

pub fn silu_backward<T: Real>(x: &Array3<T>, dy: &Array3<T>) -> Array3<T> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| *d = *d * silu_grad(v));
    dx
}

pub fn silu_vec<T: Real>(x: &Array1<T>) -> Array1<T> {
    x.mapv(silu)
}

pub fn silu_vec_backward<T: Real>(x: &Array1<T>, dy: &Array1<T>) -> Array1<T> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| *d = *d * silu_grad(v));
    dx
}

/// Nearest-neighbour 2x upsample of (C, H, W).
pub fn upsample2<T: Real>(x: &Array3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h * 2, w * 2), |(ch, y, xx)| x[(ch, y / 2, xx / 2)])
}

/// Backward of nearest 2x upsample: sum the 2x2 fan-out.
pub fn upsample2_backward<T: Real>(dy: &Array3<T>) -> Array3<T> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                dx[(ch, y / 2, x / 2)] = dx[(ch, y / 2, x / 2)] + dy[(ch, y, x)];
            }
        }
    }
    dx
}

/// 2x2 average pool of (C, H, W), H and W even.
pub fn avgpool2<T: Real>(x: &Array3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    let quarter = T::from_f64(0.25);
    Array3::from_shape_fn((c, h / 2, w / 2), |(ch, y, xx)| {
        (x[(ch, 2 * y, 2 * xx)]
            + x[(ch, 2 * y, 2 * xx + 1)]
            + x[(ch, 2 * y + 1, 2 * xx)]
            + x[(ch, 2 * y + 1, 2 * xx + 1)])
            * quarter
    })
}

/// Backward of 2x2 average pool.
pub fn avgpool2_backward<T: Real>(dy: &Array3<T>) -> Array3<T> {
    let (c, h, w) = dy.dim();
    let quarter = T::from_f64(0.25);
    let mut dx = Array3::zeros((c, h * 2, w * 2));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let g = dy[(ch, y, x)] * quarter;
                dx[(ch, 2 * y, 2 * x)] = g;
                dx[(ch, 2 * y, 2 * x + 1)] = g;
                dx[(ch, 2 * y + 1, 2 * x)] = g;
                dx[(ch, 2 * y + 1, 2 * x + 1)] = g;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn silu_grad_matches_finite_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((silu_grad(x) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn upsample_and_pool_are_adjoint_shapes() {
        let x = Array3::from_shape_fn((2, 4, 4), |(c, y, xx)| (c * 16 + y * 4 + xx) as f64);
        let up = upsample2(&x);
        assert_eq!(up.dim(), (2, 8, 8));
        assert_eq!(up[(1, 5, 3)], x[(1, 2, 1)]);
        let back = upsample2_backward(&up);
        // Each cell fans out to 4 copies; summing them returns 4x.
        assert_eq!(back[(0, 0, 0)], 4.0 * x[(0, 0, 0)]);

        let pooled = avgpool2(&x);
        assert_eq!(pooled.dim(), (2, 2, 2));
        assert_eq!(pooled[(0, 0, 0)], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        let dp = avgpool2_backward(&pooled);
        assert_eq!(dp.dim(), (2, 4, 4));
        assert_eq!(dp[(0, 0, 0)], pooled[(0, 0, 0)] / 4.0);
    }
}
