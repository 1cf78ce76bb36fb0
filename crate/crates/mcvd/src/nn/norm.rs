use ndarray::{Array3, ArrayD};

use crate::real::Real;

use super::param::{GradStore, ParamStore};

const EPS: f64 = 1e-5;

/// Group normalization over (C, H, W) with per-channel affine parameters.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    path: String,
    pub channels: usize,
    pub groups: usize,
}

#[derive(Debug)]
pub struct GroupNormCache<T> {
    normalized: Array3<T>,
    inv_std: Vec<T>,
}

impl GroupNorm {
    pub fn new<T: Real>(
        path: impl Into<String>,
        channels: usize,
        groups: usize,
        store: &mut ParamStore<T>,
    ) -> Self {
        assert!(
            channels.is_multiple_of(groups),
            "channels {channels} not divisible by groups {groups}"
        );
        let path = path.into();
        store.insert_const(format!("{path}.weight"), &[channels], 1.0);
        store.insert_const(format!("{path}.bias"), &[channels], 0.0);
        GroupNorm {
            path,
            channels,
            groups,
        }
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Array3<T>,
    ) -> (Array3<T>, GroupNormCache<T>) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.channels);
        let per = c / self.groups;
        let group_len = (per * h * w) as f64;
        let mut normalized = Array3::zeros((c, h, w));
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let chs = g * per..(g + 1) * per;
            let mut sum = 0.0f64;
            let mut sum2 = 0.0f64;
            for ch in chs.clone() {
                for y in 0..h {
                    for xx in 0..w {
                        let v = x[(ch, y, xx)].as_f64();
                        sum += v;
                        sum2 += v * v;
                    }
                }
            }
            let mean = sum / group_len;
            let var = (sum2 / group_len - mean * mean).max(0.0);
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std.push(T::from_f64(istd));
            for ch in chs {
                for y in 0..h {
                    for xx in 0..w {
                        normalized[(ch, y, xx)] =
                            T::from_f64((x[(ch, y, xx)].as_f64() - mean) * istd);
                    }
                }
            }
        }
        let weight = store.get(&format!("{}.weight", self.path));
        let bias = store.get(&format!("{}.bias", self.path));
        let mut y = normalized.clone();
        for ch in 0..c {
            let (wc, bc) = (weight[[ch]], bias[[ch]]);
            y.index_axis_mut(ndarray::Axis(0), ch)
                .mapv_inplace(|v| v * wc + bc);
        }
        (
            y,
            GroupNormCache {
                normalized,
                inv_std,
            },
        )
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &GroupNormCache<T>,
        dy: &Array3<T>,
        grads: &mut GradStore<T>,
    ) -> Array3<T> {
        let (c, h, w) = dy.dim();
        let per = c / self.groups;
        let group_len = T::from_f64((per * h * w) as f64);
        let weight = store.get(&format!("{}.weight", self.path));

        let mut dweight = vec![T::zero(); c];
        let mut dbias = vec![T::zero(); c];
        for ch in 0..c {
            let mut dw = T::zero();
            let mut db = T::zero();
            for y in 0..h {
                for xx in 0..w {
                    dw = dw + dy[(ch, y, xx)] * cache.normalized[(ch, y, xx)];
                    db = db + dy[(ch, y, xx)];
                }
            }
            dweight[ch] = dw;
            dbias[ch] = db;
        }
        grads.accumulate(
            &format!("{}.weight", self.path),
            ArrayD::from_shape_vec(vec![c], dweight).unwrap(),
        );
        grads.accumulate(
            &format!("{}.bias", self.path),
            ArrayD::from_shape_vec(vec![c], dbias).unwrap(),
        );

        let mut dx = Array3::zeros((c, h, w));
        for g in 0..self.groups {
            let chs = g * per..(g + 1) * per;
            // dxhat, and the two means over the group needed by the closed form.
            let mut mean_dxhat = T::zero();
            let mut mean_dxhat_xhat = T::zero();
            for ch in chs.clone() {
                let wc = weight[[ch]];
                for y in 0..h {
                    for xx in 0..w {
                        let dxh = dy[(ch, y, xx)] * wc;
                        mean_dxhat = mean_dxhat + dxh;
                        mean_dxhat_xhat = mean_dxhat_xhat + dxh * cache.normalized[(ch, y, xx)];
                    }
                }
            }
            mean_dxhat = mean_dxhat / group_len;
            mean_dxhat_xhat = mean_dxhat_xhat / group_len;
            let istd = cache.inv_std[g];
            for ch in chs {
                let wc = weight[[ch]];
                for y in 0..h {
                    for xx in 0..w {
                        let dxh = dy[(ch, y, xx)] * wc;
                        dx[(ch, y, xx)] = istd
                            * (dxh
                                - mean_dxhat
                                - cache.normalized[(ch, y, xx)] * mean_dxhat_xhat);
                    }
                }
            }
        }
        dx
    }
}
