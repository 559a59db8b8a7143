use ndarray::{concatenate, Array1, Array3, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, ConvBackbone};
use super::config::ModelConfig;
use super::features::{global_average_pool_backward, row_average_pool_backward, FeatureMap};
use super::global::GlobalBranch;
use super::part::{PartBranch, PartCache};
use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};

/// Descriptor used for retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Descriptor {
    /// Pooled backbone feature `f_m`.
    #[serde(rename = "f_m")]
    Pooled,
    /// Concatenation `[f_g, f_p]` of the two identification features.
    #[serde(rename = "f_c")]
    Fused,
}

impl std::str::FromStr for Descriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f_m" | "fm" => Ok(Descriptor::Pooled),
            "f_c" | "fc" => Ok(Descriptor::Fused),
            other => Err(Error::Config(format!(
                "unknown descriptor `{other}` (expected f_m or f_c)"
            ))),
        }
    }
}

impl std::fmt::Display for Descriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Descriptor::Pooled => "f_m",
            Descriptor::Fused => "f_c",
        })
    }
}

/// Every feature of one forward pass. Fields of disabled branches are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs {
    pub f_b: FeatureMap,
    /// Pooled `f_b`; needs no parameters so it is always present.
    pub f_m: Array1<f64>,
    pub f_g: Option<Array1<f64>>,
    pub f_p: Option<Array1<f64>>,
    pub logits_p: Option<Array1<f64>>,
    pub logits_g: Option<Array1<f64>>,
    pub f_c: Option<Array1<f64>>,
}

impl ModelOutputs {
    pub fn part_feature(&self) -> Result<&Array1<f64>> {
        self.f_p.as_ref().ok_or(Error::BranchDisabled("part"))
    }

    pub fn global_feature(&self) -> Result<&Array1<f64>> {
        self.f_g.as_ref().ok_or(Error::BranchDisabled("global"))
    }

    pub fn part_logits(&self) -> Result<&Array1<f64>> {
        self.logits_p.as_ref().ok_or(Error::BranchDisabled("part"))
    }

    pub fn global_logits(&self) -> Result<&Array1<f64>> {
        self.logits_g
            .as_ref()
            .ok_or(Error::BranchDisabled("global"))
    }

    pub fn descriptor(&self, which: Descriptor) -> Result<&Array1<f64>> {
        match which {
            Descriptor::Pooled => Ok(&self.f_m),
            Descriptor::Fused => self
                .f_c
                .as_ref()
                .ok_or(Error::BranchDisabled("part+global (f_c)")),
        }
    }
}

/// Upstream gradients flowing into the network outputs.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    pub f_m: Option<Array1<f64>>,
    pub logits_p: Option<Array1<f64>>,
    pub logits_g: Option<Array1<f64>>,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    dims: (usize, usize, usize),
    part: Option<PartCache>,
    pooled: Array1<f64>,
    f_g: Option<Array1<f64>>,
}

pub struct ForwardCache<C> {
    backbone: C,
    heads: HeadCache,
}

/// The three-branch network over a shared backbone.
#[derive(Debug, Clone)]
pub struct DeepPerson<B: Backbone = ConvBackbone> {
    config: ModelConfig,
    params: ParamStore,
    backbone: B,
    part: Option<PartBranch>,
    global: Option<GlobalBranch>,
}

const BACKBONE_STREAM: u64 = 1;
const PART_STREAM: u64 = 2;
const GLOBAL_STREAM: u64 = 3;

fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl DeepPerson<ConvBackbone> {
    /// Builds a freshly initialized network. Each component draws from its
    /// own random stream, so toggling a branch leaves the others unchanged.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_backbone(config, seed, |store, cfg, rng| {
            Ok(ConvBackbone::new(store, cfg, rng))
        })
    }
}

impl<B: Backbone> DeepPerson<B> {
    pub fn with_backbone<F>(config: ModelConfig, seed: u64, build: F) -> Result<Self>
    where
        F: FnOnce(&mut ParamStore, &ModelConfig, &mut ChaCha8Rng) -> Result<B>,
    {
        config.validate()?;
        let mut params = ParamStore::new();
        let backbone = build(&mut params, &config, &mut init_rng(seed, BACKBONE_STREAM))?;
        let expected = (
            config.feature_height(),
            config.feature_width(),
            config.channels,
        );
        if backbone.feature_dims() != expected {
            return Err(Error::shape(
                "backbone feature map",
                expected,
                backbone.feature_dims(),
            ));
        }
        let part = config
            .branches
            .part
            .then(|| PartBranch::new(&mut params, &config, &mut init_rng(seed, PART_STREAM)));
        let global = config
            .branches
            .global
            .then(|| GlobalBranch::new(&mut params, &config, &mut init_rng(seed, GLOBAL_STREAM)));
        Ok(Self {
            config,
            params,
            backbone,
            part,
            global,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn backbone(&self) -> &B {
        &self.backbone
    }

    pub fn part_branch(&self) -> Option<&PartBranch> {
        self.part.as_ref()
    }

    pub fn global_branch(&self) -> Option<&GlobalBranch> {
        self.global.as_ref()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads::zeros_like(&self.params)
    }

    pub fn backbone_forward(&self, image: ArrayView3<f64>) -> Result<FeatureMap> {
        Ok(self.backbone.forward(&self.params, image)?.0)
    }

    pub fn forward(&self, image: ArrayView3<f64>) -> Result<ModelOutputs> {
        Ok(self.forward_cached(image)?.0)
    }

    pub fn forward_cached(
        &self,
        image: ArrayView3<f64>,
    ) -> Result<(ModelOutputs, ForwardCache<B::Cache>)> {
        let (f_b, backbone) = self.backbone.forward(&self.params, image)?;
        let (outputs, heads) = self.heads(f_b)?;
        Ok((outputs, ForwardCache { backbone, heads }))
    }

    /// Runs every enabled branch on an already computed feature map.
    pub fn heads(&self, f_b: FeatureMap) -> Result<(ModelOutputs, HeadCache)> {
        let dims = f_b.dims();
        let expected = self.backbone.feature_dims();
        if dims != expected {
            return Err(Error::shape("feature map", expected, dims));
        }
        let pooled = f_b.global_average_pool();
        let (f_p, logits_p, part_cache) = match &self.part {
            Some(part) => {
                let (f_p, cache) = part.encode(&self.params, &f_b.row_average_pool())?;
                let logits = part.classify(&self.params, &f_p);
                (Some(f_p), Some(logits), Some(cache))
            }
            None => (None, None, None),
        };
        let (f_g, logits_g) = match &self.global {
            Some(global) => {
                let f_g = global.describe(&self.params, &pooled);
                let logits = global.classify(&self.params, &f_g);
                (Some(f_g), Some(logits))
            }
            None => (None, None),
        };
        let f_c = match (&f_g, &f_p) {
            (Some(g), Some(p)) => Some(concatenate![Axis(0), g.view(), p.view()]),
            _ => None,
        };
        let cache = HeadCache {
            dims,
            part: part_cache,
            pooled: pooled.clone(),
            f_g: f_g.clone(),
        };
        let outputs = ModelOutputs {
            f_b,
            f_m: pooled,
            f_g,
            f_p,
            logits_p,
            logits_g,
            f_c,
        };
        Ok((outputs, cache))
    }

    /// Gradient with respect to `f_b` from the branch heads.
    pub fn heads_backward(
        &self,
        cache: &HeadCache,
        upstream: &OutputGrads,
        grads: &mut Grads,
    ) -> Array3<f64> {
        let mut d_fb = Array3::zeros(cache.dims);
        let mut d_pooled: Option<Array1<f64>> = upstream.f_m.clone();
        if let (Some(global), Some(dl), Some(f_g)) = (&self.global, &upstream.logits_g, &cache.f_g)
        {
            let d = global.backward(&self.params, &cache.pooled, f_g, dl, grads);
            d_pooled = Some(match d_pooled {
                Some(acc) => acc + d,
                None => d,
            });
        }
        if let Some(d) = d_pooled {
            global_average_pool_backward(&d, cache.dims, &mut d_fb);
        }
        if let (Some(part), Some(dl), Some(pc)) = (&self.part, &upstream.logits_p, &cache.part) {
            let dseq = part.backward(&self.params, pc, Some(dl), None, grads);
            row_average_pool_backward(dseq.view(), cache.dims, &mut d_fb);
        }
        d_fb
    }

    /// Full backward pass; returns `dL/dimage` when requested.
    pub fn backward(
        &self,
        cache: &ForwardCache<B::Cache>,
        upstream: &OutputGrads,
        grads: &mut Grads,
        want_image_grad: bool,
    ) -> Option<Array3<f64>> {
        let d_fb = self.heads_backward(&cache.heads, upstream, grads);
        self.backbone.backward(
            &self.params,
            &cache.backbone,
            d_fb.view(),
            grads,
            want_image_grad,
        )
    }
}
