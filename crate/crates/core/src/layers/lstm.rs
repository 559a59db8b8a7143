use ndarray::linalg::general_mat_mul;
use ndarray::{
    concatenate, s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis,
};
use rand::Rng;

use super::sigmoid;
use crate::params::{fan_in_uniform, Grads, ParamId, ParamStore};

/// One LSTM direction. Gate blocks in the stacked `4U` pre-activation are
/// ordered input, forget, candidate, output.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

/// Per-step activations of one direction, indexed by original time step.
#[derive(Debug, Clone)]
pub struct LstmDirectionCache {
    input: Array2<f64>,
    /// Post-activation gates `[i, f, g, o]`, `T x 4U`.
    gates: Array2<f64>,
    cell: Array2<f64>,
    hidden: Array2<f64>,
    reverse: bool,
}

impl LstmDirectionCache {
    pub fn gates(&self) -> ArrayView2<'_, f64> {
        self.gates.view()
    }

    pub fn cell(&self) -> ArrayView2<'_, f64> {
        self.cell.view()
    }

    pub fn hidden(&self) -> ArrayView2<'_, f64> {
        self.hidden.view()
    }
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let w_ih = store.add(
            format!("{name}.w_ih"),
            vec![4 * hidden, in_dim],
            fan_in_uniform(rng, 4 * hidden * in_dim, hidden),
        );
        let w_hh = store.add(
            format!("{name}.w_hh"),
            vec![4 * hidden, hidden],
            fan_in_uniform(rng, 4 * hidden * hidden, hidden),
        );
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].fill(1.0);
        let bias = store.add(format!("{name}.bias"), vec![4 * hidden], b);
        Self {
            w_ih,
            w_hh,
            bias,
            in_dim,
            hidden,
        }
    }

    fn w_ih<'a>(&self, store: &'a ParamStore) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((4 * self.hidden, self.in_dim), store.get(self.w_ih))
            .expect("w_ih shape")
    }

    fn w_hh<'a>(&self, store: &'a ParamStore) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((4 * self.hidden, self.hidden), store.get(self.w_hh))
            .expect("w_hh shape")
    }

    fn order(len: usize, reverse: bool) -> Box<dyn Iterator<Item = usize>> {
        if reverse {
            Box::new((0..len).rev())
        } else {
            Box::new(0..len)
        }
    }

    /// Runs the recurrence over `input` (`T x in_dim`) from zero state,
    /// front-to-back or back-to-front. Hidden states are returned in the
    /// original time order.
    pub fn forward(
        &self,
        store: &ParamStore,
        input: ArrayView2<f64>,
        reverse: bool,
    ) -> (Array2<f64>, LstmDirectionCache) {
        let steps = input.nrows();
        let u = self.hidden;
        let mut pre = input.dot(&self.w_ih(store).t());
        pre += &ArrayView1::from(store.get(self.bias));
        let w_hh = self.w_hh(store);
        let mut gates = Array2::zeros((steps, 4 * u));
        let mut cell = Array2::zeros((steps, u));
        let mut hidden = Array2::zeros((steps, u));
        let mut h_prev = Array1::<f64>::zeros(u);
        let mut c_prev = Array1::<f64>::zeros(u);
        for t in Self::order(steps, reverse) {
            let z = &pre.row(t) + &w_hh.dot(&h_prev);
            let mut g = gates.row_mut(t);
            for j in 0..u {
                g[j] = sigmoid(z[j]);
                g[u + j] = sigmoid(z[u + j]);
                g[2 * u + j] = z[2 * u + j].tanh();
                g[3 * u + j] = sigmoid(z[3 * u + j]);
            }
            for j in 0..u {
                let c = g[u + j] * c_prev[j] + g[j] * g[2 * u + j];
                cell[[t, j]] = c;
                hidden[[t, j]] = g[3 * u + j] * c.tanh();
            }
            h_prev.assign(&hidden.row(t));
            c_prev.assign(&cell.row(t));
        }
        let cache = LstmDirectionCache {
            input: input.to_owned(),
            gates,
            cell,
            hidden: hidden.clone(),
            reverse,
        };
        (hidden, cache)
    }

    /// Backpropagation through time. `grad_hidden` is `dL/dh_t` for every
    /// step in original order; returns `dL/dx_t` when requested.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &LstmDirectionCache,
        grad_hidden: ArrayView2<f64>,
        grads: &mut Grads,
        want_input_grad: bool,
    ) -> Option<Array2<f64>> {
        let steps = cache.input.nrows();
        let u = self.hidden;
        let w_hh = self.w_hh(store);
        let mut dz = Array2::<f64>::zeros((steps, 4 * u));
        let mut h_prev_rows = Array2::<f64>::zeros((steps, u));
        let mut dh_next = Array1::<f64>::zeros(u);
        let mut dc_next = Array1::<f64>::zeros(u);

        let forward_order: Vec<usize> = Self::order(steps, cache.reverse).collect();
        for (pos, &t) in forward_order.iter().enumerate().rev() {
            let prev = pos.checked_sub(1).map(|p| forward_order[p]);
            let g = cache.gates.row(t);
            let mut dzt = dz.row_mut(t);
            for j in 0..u {
                let (i, f, cand, o) = (g[j], g[u + j], g[2 * u + j], g[3 * u + j]);
                let c = cache.cell[[t, j]];
                let c_prev = prev.map_or(0.0, |p| cache.cell[[p, j]]);
                let tc = c.tanh();
                let dh = grad_hidden[[t, j]] + dh_next[j];
                let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
                dzt[j] = dc * cand * i * (1.0 - i);
                dzt[u + j] = dc * c_prev * f * (1.0 - f);
                dzt[2 * u + j] = dc * i * (1.0 - cand * cand);
                dzt[3 * u + j] = dh * tc * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            dh_next = w_hh.t().dot(&dzt);
            if let Some(p) = prev {
                h_prev_rows.row_mut(t).assign(&cache.hidden.row(p));
            }
        }

        {
            let mut d_ih =
                ArrayViewMut2::from_shape((4 * u, self.in_dim), grads.get_mut(self.w_ih))
                    .expect("w_ih grad shape");
            general_mat_mul(1.0, &dz.t(), &cache.input, 1.0, &mut d_ih);
        }
        {
            let mut d_hh = ArrayViewMut2::from_shape((4 * u, u), grads.get_mut(self.w_hh))
                .expect("w_hh grad shape");
            general_mat_mul(1.0, &dz.t(), &h_prev_rows, 1.0, &mut d_hh);
        }
        {
            let mut db = ArrayViewMut1::from(grads.get_mut(self.bias));
            db += &dz.sum_axis(Axis(0));
        }
        want_input_grad.then(|| dz.dot(&self.w_ih(store)))
    }
}

/// Stacked bidirectional LSTM. Each layer emits `[h_fwd_t, h_bwd_t]` per step.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub layers: Vec<(LstmCell, LstmCell)>,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct BiLstmCache {
    pub layers: Vec<(LstmDirectionCache, LstmDirectionCache)>,
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|l| {
                let d = if l == 0 { in_dim } else { 2 * hidden };
                let fwd = LstmCell::new(store, &format!("{name}.l{l}.fwd"), d, hidden, rng);
                let bwd = LstmCell::new(store, &format!("{name}.l{l}.bwd"), d, hidden, rng);
                (fwd, bwd)
            })
            .collect();
        Self { layers, hidden }
    }

    /// `input` is `T x in_dim`; output is `T x 2U`.
    pub fn forward(
        &self,
        store: &ParamStore,
        input: ArrayView2<f64>,
    ) -> (Array2<f64>, BiLstmCache) {
        let mut x = input.to_owned();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (fwd, bwd) in &self.layers {
            let (hf, cf) = fwd.forward(store, x.view(), false);
            let (hb, cb) = bwd.forward(store, x.view(), true);
            x = concatenate![Axis(1), hf, hb];
            caches.push((cf, cb));
        }
        (x, BiLstmCache { layers: caches })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &BiLstmCache,
        grad_output: ArrayView2<f64>,
        grads: &mut Grads,
        want_input_grad: bool,
    ) -> Option<Array2<f64>> {
        let u = self.hidden;
        let mut dout = grad_output.to_owned();
        for (l, ((fwd, bwd), (cf, cb))) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let need = l > 0 || want_input_grad;
            let dxf = fwd.backward(store, cf, dout.slice(s![.., ..u]), grads, need);
            let dxb = bwd.backward(store, cb, dout.slice(s![.., u..]), grads, need);
            match (dxf, dxb) {
                (Some(a), Some(b)) => dout = a + b,
                _ => return None,
            }
        }
        Some(dout)
    }
}
