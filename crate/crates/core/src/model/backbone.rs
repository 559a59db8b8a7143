//! Shared feature extractor producing `f_b`.
//!
//! [`Backbone`] is the boundary for plugging in other extractors (for
//! instance an adapter around externally trained residual-network weights).
//! [`ConvBackbone`] is the built-in from-scratch stack.

use ndarray::{Array3, ArrayView3, Zip};
use rand::Rng;

use super::config::ModelConfig;
use super::features::FeatureMap;
use crate::error::{Error, Result};
use crate::layers::{Conv2d, ConvCache};
use crate::params::{Grads, ParamStore};

/// Leak of the activation after every convolution. Keeping it non-zero stops
/// units from dying, which otherwise lets batch-hard mining collapse `f_m`
/// early in training.
pub const NEGATIVE_SLOPE: f64 = 0.1;

pub trait Backbone {
    type Cache;

    /// `(H, W, C)` of the produced feature map.
    fn feature_dims(&self) -> (usize, usize, usize);

    /// `(height, width)` of accepted input images.
    fn input_dims(&self) -> (usize, usize);

    fn forward(
        &self,
        params: &ParamStore,
        image: ArrayView3<f64>,
    ) -> Result<(FeatureMap, Self::Cache)>;

    /// Accumulates parameter gradients given `dL/df_b`, optionally returning `dL/dimage`.
    fn backward(
        &self,
        params: &ParamStore,
        cache: &Self::Cache,
        grad: ArrayView3<f64>,
        grads: &mut Grads,
        want_input_grad: bool,
    ) -> Option<Array3<f64>>;
}

/// `depth` stages of `stage_convs` 3x3 convolutions, each followed by a leaky ReLU.
/// The first convolution of every stage has stride 2.
#[derive(Debug, Clone)]
pub struct ConvBackbone {
    layers: Vec<Conv2d>,
    input_dims: (usize, usize),
    feature_dims: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct ConvBackboneCache {
    layers: Vec<(ConvCache, Array3<f64>)>,
}

impl ConvBackbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &ModelConfig, rng: &mut R) -> Self {
        let mut in_ch = 3;
        let mut layers = Vec::new();
        for (i, out_ch) in config.stage_widths().into_iter().enumerate() {
            for j in 0..config.stage_convs {
                let name = if j == 0 {
                    format!("backbone.stage{i}")
                } else {
                    format!("backbone.stage{i}.conv{j}")
                };
                let stride = if j == 0 { 2 } else { 1 };
                layers.push(Conv2d::new(store, &name, in_ch, out_ch, 3, stride, 1, rng));
                in_ch = out_ch;
            }
        }
        Self {
            layers,
            input_dims: (config.input_height, config.input_width),
            feature_dims: (
                config.feature_height(),
                config.feature_width(),
                config.channels,
            ),
        }
    }

    pub fn layers(&self) -> &[Conv2d] {
        &self.layers
    }
}

impl Backbone for ConvBackbone {
    type Cache = ConvBackboneCache;

    fn feature_dims(&self) -> (usize, usize, usize) {
        self.feature_dims
    }

    fn input_dims(&self) -> (usize, usize) {
        self.input_dims
    }

    fn forward(
        &self,
        params: &ParamStore,
        image: ArrayView3<f64>,
    ) -> Result<(FeatureMap, Self::Cache)> {
        let (h, w) = self.input_dims;
        if image.dim() != (h, w, 3) {
            return Err(Error::shape("backbone input", (h, w, 3), image.dim()));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = image.to_owned();
        for conv in &self.layers {
            let (mut y, cache) = conv.forward(params, x.view());
            y.mapv_inplace(|v| if v > 0.0 { v } else { NEGATIVE_SLOPE * v });
            caches.push((cache, y.clone()));
            x = y;
        }
        Ok((FeatureMap::new(x)?, ConvBackboneCache { layers: caches }))
    }

    fn backward(
        &self,
        params: &ParamStore,
        cache: &Self::Cache,
        grad: ArrayView3<f64>,
        grads: &mut Grads,
        want_input_grad: bool,
    ) -> Option<Array3<f64>> {
        let mut g = grad.to_owned();
        for (i, (conv, (conv_cache, activated))) in
            self.layers.iter().zip(&cache.layers).enumerate().rev()
        {
            Zip::from(&mut g).and(activated).for_each(|g, &a| {
                if a <= 0.0 {
                    *g *= NEGATIVE_SLOPE;
                }
            });
            let need = i > 0 || want_input_grad;
            g = conv.backward(params, conv_cache, g.view(), grads, need)?;
        }
        Some(g)
    }
}
