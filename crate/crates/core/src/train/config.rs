use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ImagePipeline, Normalization};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, TripletConfig};

/// Learning-rate shape after `decay_epoch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    /// `base * 0.001^((e - decay) / (total - decay))`.
    Exponential,
    /// `base * factor` from `decay_epoch` on.
    Step { factor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub p: usize,
    pub k: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub decay_epoch: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    /// Global gradient-norm ceiling; `f64::INFINITY` disables clipping.
    #[serde(with = "float_or_inf")]
    pub grad_clip: f64,
    pub weights: LossWeights,
    pub triplet: TripletConfig,
    pub seed: u64,
    /// Evaluate on query/gallery every this many epochs; 0 never evaluates.
    pub eval_every: usize,
    pub pipeline: ImagePipeline,
    /// Random crop and flip on training images.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p: 32,
            k: 4,
            epochs: 150,
            base_lr: 3e-4,
            decay_epoch: 100,
            schedule: LrSchedule::Exponential,
            adam: AdamConfig::default(),
            grad_clip: 10.0,
            weights: LossWeights::default(),
            triplet: TripletConfig::default(),
            seed: 0,
            eval_every: 1,
            pipeline: ImagePipeline::default(),
            augment: true,
        }
    }
}

impl TrainConfig {
    /// Settings for small synthetic runs on one CPU core.
    pub fn desk_scale() -> Self {
        Self {
            p: 4,
            k: 4,
            epochs: 30,
            base_lr: 3e-3,
            decay_epoch: 20,
            pipeline: ImagePipeline::with_size(256, 128, Normalization::SYMMETRIC),
            augment: false,
            ..Self::default()
        }
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.p == 0 {
            return fail("trainer.p must be at least 1".into());
        }
        if self.k < 2 {
            return fail(format!("trainer.k must be at least 2, got {}", self.k));
        }
        if self.epochs == 0 {
            return fail("trainer.epochs must be positive".into());
        }
        if self.decay_epoch >= self.epochs {
            return fail(format!(
                "trainer.decay_epoch ({}) must be below trainer.epochs ({})",
                self.decay_epoch, self.epochs
            ));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return fail(format!(
                "trainer.base_lr must be positive, got {}",
                self.base_lr
            ));
        }
        if let LrSchedule::Step { factor } = self.schedule {
            if !(factor.is_finite() && factor > 0.0) {
                return fail(format!(
                    "trainer.step_factor must be positive, got {factor}"
                ));
            }
        }
        if !(self.grad_clip > 0.0) {
            return fail(format!(
                "trainer.grad_clip must be > 0 (use inf to disable), got {}",
                self.grad_clip
            ));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return fail(format!("invalid Adam settings {a:?}"));
        }
        if !(self.triplet.margin.is_finite() && self.triplet.margin >= 0.0) {
            return fail(format!(
                "trainer.margin must be >= 0, got {}",
                self.triplet.margin
            ));
        }
        self.weights.validate()?;
        self.pipeline.normalization.validate()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// JSON has no infinity; non-finite values travel as strings.
mod float_or_inf {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Number(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(D::Error::custom),
        }
    }
}

/// Learning rate for a 0-based epoch.
pub fn lr_at_epoch(epoch: usize, config: &TrainConfig) -> f64 {
    if epoch < config.decay_epoch {
        return config.base_lr;
    }
    match config.schedule {
        LrSchedule::Exponential => {
            let span = (config.epochs - config.decay_epoch) as f64;
            let t = (epoch - config.decay_epoch) as f64 / span;
            config.base_lr * 0.001f64.powf(t)
        }
        LrSchedule::Step { factor } => config.base_lr * factor,
    }
}
