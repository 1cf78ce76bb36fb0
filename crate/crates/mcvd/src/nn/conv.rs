use ndarray::{Array2, Array3, ArrayD};
use rand::Rng;

use crate::real::Real;

use super::param::{GradStore, ParamStore};

/// 2D convolution on (C, H, W) tensors, square kernel, symmetric zero
/// padding. Forward and backward are im2col/col2im plus GEMM.
#[derive(Debug, Clone)]
pub struct Conv2d {
    path: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
pub struct Conv2dCache<T> {
    cols: Array2<T>,
    in_hw: (usize, usize),
}

impl Conv2d {
    /// Registers weight (fan-in scaled Gaussian, or zeros) and bias (zeros).
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        path: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        zero_init: bool,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let path = path.into();
        let shape = [out_ch, in_ch, kernel, kernel];
        if zero_init {
            store.insert_const(format!("{path}.weight"), &shape, 0.0);
        } else {
            let fan_in = (in_ch * kernel * kernel) as f64;
            store.insert_gaussian(format!("{path}.weight"), &shape, (1.0 / fan_in).sqrt(), rng);
        }
        store.insert_const(format!("{path}.bias"), &[out_ch], 0.0);
        Conv2d {
            path,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col<T: Real>(&self, x: &Array3<T>) -> Array2<T> {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.out_size(h, w);
        let k = self.kernel;
        let xs = x.as_slice().expect("conv input contiguous");
        let mut cols = Array2::<T>::zeros((c * k * k, oh * ow));
        let cs = cols.as_slice_mut().expect("cols contiguous");
        for ch in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ch * k * k + ki * k + kj;
                    let row_base = row * oh * ow;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_base = ch * h * w + iy as usize * w;
                        let dst_base = row_base + oy * ow;
                        if self.stride == 1 {
                            // Contiguous run: ix = ox + kj - pad within [0, w).
                            let ox_lo = self.pad.saturating_sub(kj);
                            let ox_hi = (w + self.pad - kj).min(ow);
                            if ox_lo < ox_hi {
                                let ix_lo = ox_lo + kj - self.pad;
                                cs[dst_base + ox_lo..dst_base + ox_hi].copy_from_slice(
                                    &xs[src_base + ix_lo..src_base + ix_lo + (ox_hi - ox_lo)],
                                );
                            }
                        } else {
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                cs[dst_base + ox] = xs[src_base + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, dcols: &Array2<T>, h: usize, w: usize) -> Array3<T> {
        let (oh, ow) = self.out_size(h, w);
        let k = self.kernel;
        let c = self.in_ch;
        let ds = dcols.as_slice().expect("dcols contiguous");
        let mut dx = Array3::<T>::zeros((c, h, w));
        let dxs = dx.as_slice_mut().expect("dx contiguous");
        for ch in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ch * k * k + ki * k + kj;
                    let row_base = row * oh * ow;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_base = ch * h * w + iy as usize * w;
                        let src_base = row_base + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let d = &mut dxs[dst_base + ix as usize];
                            *d = *d + ds[src_base + ox];
                        }
                    }
                }
            }
        }
        dx
    }

    fn weight_mat<'a, T: Real>(&self, store: &'a ParamStore<T>) -> ndarray::ArrayView2<'a, T> {
        let w = store.get(&format!("{}.weight", self.path));
        w.view()
            .into_shape_with_order((self.out_ch, self.in_ch * self.kernel * self.kernel))
            .expect("conv weights are contiguous")
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Array3<T>,
    ) -> (Array3<T>, Conv2dCache<T>) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv {} input channels", self.path);
        let (oh, ow) = self.out_size(h, w);
        let cols = self.im2col(x);
        let y_mat = self.weight_mat(store).dot(&cols);
        let bias = store.get(&format!("{}.bias", self.path));
        let mut y = y_mat
            .into_shape_with_order((self.out_ch, oh, ow))
            .expect("conv output reshape");
        for (mut row, &b) in y.outer_iter_mut().zip(bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        (
            y,
            Conv2dCache {
                cols,
                in_hw: (h, w),
            },
        )
    }

    /// Returns dx; accumulates dweight/dbias into `grads`.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &Conv2dCache<T>,
        dy: &Array3<T>,
        grads: &mut GradStore<T>,
    ) -> Array3<T> {
        let (h, w) = cache.in_hw;
        let (oh, ow) = self.out_size(h, w);
        let dy_mat = dy
            .view()
            .into_shape_with_order((self.out_ch, oh * ow))
            .expect("dy reshape");
        let dw = dy_mat.dot(&cache.cols.t());
        let db: Vec<T> = dy_mat.rows().into_iter().map(|r| r.sum()).collect();
        grads.accumulate(
            &format!("{}.weight", self.path),
            ArrayD::from_shape_vec(
                vec![self.out_ch, self.in_ch, self.kernel, self.kernel],
                dw.into_raw_vec_and_offset().0,
            )
            .unwrap(),
        );
        grads.accumulate(
            &format!("{}.bias", self.path),
            ArrayD::from_shape_vec(vec![self.out_ch], db).unwrap(),
        );
        let dcols = self.weight_mat(store).t().dot(&dy_mat);
        self.col2im(&dcols, h, w)
    }
}
