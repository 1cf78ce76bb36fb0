use ndarray::{s, Array2, Array3};
use rand::Rng;

use crate::real::Real;

use super::conv::{Conv2d, Conv2dCache};
use super::norm::{GroupNorm, GroupNormCache};
use super::param::{GradStore, ParamStore};

/// Multi-head self-attention over spatial positions with a residual
/// connection: y = x + proj(attend(norm(x))).
#[derive(Debug, Clone)]
pub struct Attention {
    pub channels: usize,
    pub heads: usize,
    norm: GroupNorm,
    qkv: Conv2d,
    proj: Conv2d,
}

/// Per head: (q, k, v) as (len, head_dim) and the softmaxed weights (len, len).
type HeadCache<T> = (Array2<T>, Array2<T>, Array2<T>, Array2<T>);

pub struct AttentionCache<T> {
    norm: GroupNormCache<T>,
    qkv_cache: Conv2dCache<T>,
    proj_cache: Conv2dCache<T>,
    per_head: Vec<HeadCache<T>>,
    hw: (usize, usize),
}

impl Attention {
    pub fn new<T: Real, R: Rng>(
        path: impl Into<String>,
        channels: usize,
        heads: usize,
        groups: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let path = path.into();
        assert!(
            channels.is_multiple_of(heads),
            "channels {channels} not divisible by heads {heads}"
        );
        let norm = GroupNorm::new(format!("{path}.norm"), channels, groups, store);
        let qkv = Conv2d::new(
            format!("{path}.qkv"),
            channels,
            channels * 3,
            1,
            1,
            0,
            false,
            store,
            rng,
        );
        let proj = Conv2d::new(
            format!("{path}.proj"),
            channels,
            channels,
            1,
            1,
            0,
            true,
            store,
            rng,
        );
        Attention {
            channels,
            heads,
            norm,
            qkv,
            proj,
        }
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Array3<T>,
    ) -> (Array3<T>, AttentionCache<T>) {
        let (c, h, w) = x.dim();
        let len = h * w;
        let dh = c / self.heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let (normed, norm_cache) = self.norm.forward(store, x);
        let (qkv, qkv_cache) = self.qkv.forward(store, &normed);

        let mut out = Array3::<T>::zeros((c, h, w));
        let mut per_head = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let ch0 = head * dh;
            // (len, dh) matrices.
            let gather = |block: usize| -> Array2<T> {
                let mut m = Array2::zeros((len, dh));
                for d in 0..dh {
                    let plane = qkv.slice(s![block * c + ch0 + d, .., ..]);
                    for (i, v) in plane.iter().enumerate() {
                        m[(i, d)] = *v;
                    }
                }
                m
            };
            let q = gather(0);
            let k = gather(1);
            let v = gather(2);
            let mut scores = q.dot(&k.t());
            scores.mapv_inplace(|s| s * scale);
            // Row-wise softmax with max subtraction.
            let mut attn = scores;
            for mut row in attn.rows_mut() {
                let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
                row.mapv_inplace(|v| (v - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|v| v / sum);
            }
            let o = attn.dot(&v); // (len, dh)
            for d in 0..dh {
                for i in 0..len {
                    out[(ch0 + d, i / w, i % w)] = o[(i, d)];
                }
            }
            per_head.push((q, k, v, attn));
        }
        let (proj_out, proj_cache) = self.proj.forward(store, &out);
        (
            proj_out + x,
            AttentionCache {
                norm: norm_cache,
                qkv_cache,
                proj_cache,
                per_head,
                hw: (h, w),
            },
        )
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &AttentionCache<T>,
        dy: &Array3<T>,
        grads: &mut GradStore<T>,
    ) -> Array3<T> {
        let (h, w) = cache.hw;
        let c = self.channels;
        let len = h * w;
        let dh = c / self.heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let d_out = self.proj.backward(store, &cache.proj_cache, dy, grads);

        let mut d_qkv = Array3::<T>::zeros((3 * c, h, w));
        for head in 0..self.heads {
            let ch0 = head * dh;
            let (q, k, v, attn) = &cache.per_head[head];
            let mut d_o = Array2::<T>::zeros((len, dh));
            for d in 0..dh {
                for i in 0..len {
                    d_o[(i, d)] = d_out[(ch0 + d, i / w, i % w)];
                }
            }
            let d_attn = d_o.dot(&v.t()); // (len, len)
            let d_v = attn.t().dot(&d_o); // (len, dh)
            // Softmax backward per row: ds = a * (da - sum(da * a)).
            let mut d_scores = Array2::<T>::zeros((len, len));
            for i in 0..len {
                let mut dot = T::zero();
                for j in 0..len {
                    dot = dot + d_attn[(i, j)] * attn[(i, j)];
                }
                for j in 0..len {
                    d_scores[(i, j)] = attn[(i, j)] * (d_attn[(i, j)] - dot) * scale;
                }
            }
            let d_q = d_scores.dot(k); // (len, dh)
            let d_k = d_scores.t().dot(q); // (len, dh)
            for (block, dm) in [(0, &d_q), (1, &d_k), (2, &d_v)] {
                for d in 0..dh {
                    for i in 0..len {
                        d_qkv[(block * c + ch0 + d, i / w, i % w)] = dm[(i, d)];
                    }
                }
            }
        }
        let d_normed = self.qkv.backward(store, &cache.qkv_cache, &d_qkv, grads);
        let dx_norm = self.norm.backward(store, &cache.norm, &d_normed, grads);
        dx_norm + dy
    }
}
