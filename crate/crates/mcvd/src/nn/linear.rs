use ndarray::{Array1, Array2, ArrayD};
use rand::Rng;

use crate::real::Real;

use super::param::{GradStore, ParamStore};

/// Fully connected layer on vectors: y = W x + b.
#[derive(Debug, Clone)]
pub struct Linear {
    path: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug)]
pub struct LinearCache<T> {
    input: Array1<T>,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        path: impl Into<String>,
        in_dim: usize,
        out_dim: usize,
        zero_init: bool,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let path = path.into();
        if zero_init {
            store.insert_const(format!("{path}.weight"), &[out_dim, in_dim], 0.0);
        } else {
            store.insert_gaussian(
                format!("{path}.weight"),
                &[out_dim, in_dim],
                (1.0 / in_dim as f64).sqrt(),
                rng,
            );
        }
        store.insert_const(format!("{path}.bias"), &[out_dim], 0.0);
        Linear {
            path,
            in_dim,
            out_dim,
        }
    }

    fn weight<'a, T: Real>(&self, store: &'a ParamStore<T>) -> ndarray::ArrayView2<'a, T> {
        store
            .get(&format!("{}.weight", self.path))
            .view()
            .into_shape_with_order((self.out_dim, self.in_dim))
            .expect("linear weight view")
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Array1<T>,
    ) -> (Array1<T>, LinearCache<T>) {
        assert_eq!(x.len(), self.in_dim, "linear {} input dim", self.path);
        let bias = store.get(&format!("{}.bias", self.path));
        let y = self.weight(store).dot(x)
            + bias
                .view()
                .into_shape_with_order(self.out_dim)
                .expect("bias view");
        (y, LinearCache { input: x.clone() })
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &LinearCache<T>,
        dy: &Array1<T>,
        grads: &mut GradStore<T>,
    ) -> Array1<T> {
        let dw = Array2::from_shape_fn((self.out_dim, self.in_dim), |(i, j)| {
            dy[i] * cache.input[j]
        });
        grads.accumulate(
            &format!("{}.weight", self.path),
            ArrayD::from_shape_vec(
                vec![self.out_dim, self.in_dim],
                dw.into_raw_vec_and_offset().0,
            )
            .unwrap(),
        );
        grads.accumulate(
            &format!("{}.bias", self.path),
            ArrayD::from_shape_vec(vec![self.out_dim], dy.to_vec()).unwrap(),
        );
        self.weight(store).t().dot(dy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new("l", 4, 3, false, &mut store, &mut rng);
        let x = Array1::from_iter((0..4).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let (y, cache) = lin.forward(&store, &x);
        let dy = y.mapv(|v| 2.0 * v);
        let mut grads = GradStore::new();
        let dx = lin.backward(&store, &cache, &dy, &mut grads);

        let loss = |store: &ParamStore<f64>, x: &Array1<f64>| {
            let (y, _) = lin.forward(store, x);
            y.iter().map(|v| v * v).sum::<f64>()
        };
        let h = 1e-6;
        let g = grads.get("l.weight").unwrap();
        for idx in [[0usize, 0usize], [2, 3]] {
            let mut sp = store.clone();
            sp.get_mut("l.weight")[idx.as_slice()] += h;
            let mut sm = store.clone();
            sm.get_mut("l.weight")[idx.as_slice()] -= h;
            let fd = (loss(&sp, &x) - loss(&sm, &x)) / (2.0 * h);
            assert!((fd - g[idx.as_slice()]).abs() < 1e-6);
        }
        for i in 0..4 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&store, &xp) - loss(&store, &xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6);
        }
    }
}
