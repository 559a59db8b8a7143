use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;

use crate::params::{fan_in_uniform, Grads, ParamId, ParamStore};

/// Affine map `y = W x + b` with `W` stored row-major as `out x in`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            vec![out_dim, in_dim],
            fan_in_uniform(rng, out_dim * in_dim, in_dim),
        );
        let bias = store.add(format!("{name}.bias"), vec![out_dim], vec![0.0; out_dim]);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn weight_view<'a>(&self, store: &'a ParamStore) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.out_dim, self.in_dim), store.get(self.weight))
            .expect("weight shape")
    }

    pub fn bias_view<'a>(&self, store: &'a ParamStore) -> ArrayView1<'a, f64> {
        ArrayView1::from(store.get(self.bias))
    }

    /// Row-wise forward: `x` is `n x in`, result is `n x out`.
    pub fn forward(&self, store: &ParamStore, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight_view(store).t());
        y += &self.bias_view(store);
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx` when requested.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        grads: &mut Grads,
        want_input_grad: bool,
    ) -> Option<Array2<f64>> {
        {
            let mut dw =
                ArrayViewMut2::from_shape((self.out_dim, self.in_dim), grads.get_mut(self.weight))
                    .expect("weight grad shape");
            general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut dw);
        }
        {
            let mut db = ArrayViewMut1::from(grads.get_mut(self.bias));
            db += &dy.sum_axis(Axis(0));
        }
        want_input_grad.then(|| dy.dot(&self.weight_view(store)))
    }
}
