//! Part-based identification branch: row-pooled slices of `f_b` are read
//! head-to-foot by a stacked BLSTM, each step is projected to `U` values, and
//! the concatenation `f_p` feeds an identity classifier.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use super::config::ModelConfig;
use super::features::PartSequence;
use crate::error::{Error, Result};
use crate::layers::{BiLstm, BiLstmCache, Linear};
use crate::params::{Grads, ParamStore};

#[derive(Debug, Clone)]
pub enum PartEncoder {
    /// BLSTM over the slices; `[h_fwd_t, h_bwd_t]` is projected `2U -> U`
    /// by one projection shared across steps.
    Recurrent { lstm: BiLstm, projection: Linear },
    /// No recurrence: an independent `C -> U` layer per slice.
    PerSlice { projections: Vec<Linear> },
}

#[derive(Debug, Clone)]
pub struct PartBranch {
    pub encoder: PartEncoder,
    pub classifier: Linear,
    steps: usize,
    hidden: usize,
}

#[derive(Debug, Clone)]
pub struct PartCache {
    sequence: Array2<f64>,
    lstm: Option<(BiLstmCache, Array2<f64>)>,
    f_p: Array1<f64>,
}

impl PartCache {
    pub fn f_p(&self) -> &Array1<f64> {
        &self.f_p
    }
}

impl PartBranch {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &ModelConfig, rng: &mut R) -> Self {
        let steps = config.feature_height();
        let u = config.hidden;
        let encoder = if config.part_uses_lstm {
            let lstm = BiLstm::new(
                store,
                "part.blstm",
                config.channels,
                u,
                config.lstm_layers,
                rng,
            );
            let projection = Linear::new(store, "part.projection", 2 * u, u, rng);
            PartEncoder::Recurrent { lstm, projection }
        } else {
            let projections = (0..steps)
                .map(|t| Linear::new(store, &format!("part.slice{t}"), config.channels, u, rng))
                .collect();
            PartEncoder::PerSlice { projections }
        };
        let classifier = Linear::new(store, "part.classifier", steps * u, config.num_classes, rng);
        Self {
            encoder,
            classifier,
            steps,
            hidden: u,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Encodes the part sequence into `f_p = [O_1, ..., O_H]`.
    pub fn encode(
        &self,
        store: &ParamStore,
        seq: &PartSequence,
    ) -> Result<(Array1<f64>, PartCache)> {
        if seq.len() != self.steps {
            return Err(Error::shape("part sequence length", self.steps, seq.len()));
        }
        let (outputs, lstm) = match &self.encoder {
            PartEncoder::Recurrent { lstm, projection } => {
                let (h, cache) = lstm.forward(store, seq.view());
                (projection.forward(store, h.view()), Some((cache, h)))
            }
            PartEncoder::PerSlice { projections } => {
                let mut out = Array2::zeros((self.steps, self.hidden));
                for (t, proj) in projections.iter().enumerate() {
                    let row = seq.view().slice(s![t..t + 1, ..]).to_owned();
                    out.row_mut(t)
                        .assign(&proj.forward(store, row.view()).row(0));
                }
                (out, None)
            }
        };
        let f_p = outputs
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(self.steps * self.hidden)
            .expect("flatten steps");
        let cache = PartCache {
            sequence: seq.0.clone(),
            lstm,
            f_p: f_p.clone(),
        };
        Ok((f_p, cache))
    }

    pub fn classify(&self, store: &ParamStore, f_p: &Array1<f64>) -> Array1<f64> {
        self.classifier
            .forward(store, f_p.view().insert_axis(Axis(0)))
            .index_axis_move(Axis(0), 0)
    }

    /// Backpropagates gradients on the logits and/or directly on `f_p`;
    /// returns `dL/dS` (`H x C`).
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &PartCache,
        grad_logits: Option<&Array1<f64>>,
        grad_f_p: Option<&Array1<f64>>,
        grads: &mut Grads,
    ) -> Array2<f64> {
        let mut d_fp = grad_f_p
            .cloned()
            .unwrap_or_else(|| Array1::zeros(cache.f_p.len()));
        if let Some(dl) = grad_logits {
            let dx = self
                .classifier
                .backward(
                    store,
                    cache.f_p.view().insert_axis(Axis(0)),
                    dl.view().insert_axis(Axis(0)),
                    grads,
                    true,
                )
                .expect("input grad requested");
            d_fp += &dx.row(0);
        }
        let d_out = d_fp
            .into_shape_with_order((self.steps, self.hidden))
            .expect("unflatten steps");
        match &self.encoder {
            PartEncoder::Recurrent { lstm, projection } => {
                let (lstm_cache, h) = cache.lstm.as_ref().expect("recurrent cache");
                let dh = projection
                    .backward(store, h.view(), d_out.view(), grads, true)
                    .expect("input grad requested");
                lstm.backward(store, lstm_cache, dh.view(), grads, true)
                    .expect("input grad requested")
            }
            PartEncoder::PerSlice { projections } => {
                let mut dseq = Array2::zeros(cache.sequence.dim());
                for (t, proj) in projections.iter().enumerate() {
                    let dx = proj
                        .backward(
                            store,
                            cache.sequence.slice(s![t..t + 1, ..]),
                            d_out.slice(s![t..t + 1, ..]),
                            grads,
                            true,
                        )
                        .expect("input grad requested");
                    dseq.row_mut(t).assign(&dx.row(0));
                }
                dseq
            }
        }
    }
}
