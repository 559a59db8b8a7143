use ndarray::{Array1, Axis};
use rand::Rng;

use super::config::ModelConfig;
use crate::layers::Linear;
use crate::params::{Grads, ParamStore};

/// Global identification branch: pooled `f_b` -> FC -> `f_g` -> classifier.
#[derive(Debug, Clone)]
pub struct GlobalBranch {
    pub fc: Linear,
    pub classifier: Linear,
}

impl GlobalBranch {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &ModelConfig, rng: &mut R) -> Self {
        let fc = Linear::new(
            store,
            "global.fc",
            config.channels,
            config.global_fc_dim,
            rng,
        );
        let classifier = Linear::new(
            store,
            "global.classifier",
            config.global_fc_dim,
            config.num_classes,
            rng,
        );
        Self { fc, classifier }
    }

    /// `f_g` from the globally pooled feature vector.
    pub fn describe(&self, store: &ParamStore, pooled: &Array1<f64>) -> Array1<f64> {
        self.fc
            .forward(store, pooled.view().insert_axis(Axis(0)))
            .index_axis_move(Axis(0), 0)
    }

    pub fn classify(&self, store: &ParamStore, f_g: &Array1<f64>) -> Array1<f64> {
        self.classifier
            .forward(store, f_g.view().insert_axis(Axis(0)))
            .index_axis_move(Axis(0), 0)
    }

    /// Returns `dL/dpooled`.
    pub fn backward(
        &self,
        store: &ParamStore,
        pooled: &Array1<f64>,
        f_g: &Array1<f64>,
        grad_logits: &Array1<f64>,
        grads: &mut Grads,
    ) -> Array1<f64> {
        let d_fg = self
            .classifier
            .backward(
                store,
                f_g.view().insert_axis(Axis(0)),
                grad_logits.view().insert_axis(Axis(0)),
                grads,
                true,
            )
            .expect("input grad requested");
        self.fc
            .backward(
                store,
                pooled.view().insert_axis(Axis(0)),
                d_fg.view(),
                grads,
                true,
            )
            .expect("input grad requested")
            .index_axis_move(Axis(0), 0)
    }
}
