//! Differentiable building blocks with explicit forward caches and backward passes.

mod conv;
mod linear;
mod lstm;

pub use conv::{Conv2d, ConvCache};
pub use linear::Linear;
pub use lstm::{BiLstm, BiLstmCache, LstmCell, LstmDirectionCache};

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
