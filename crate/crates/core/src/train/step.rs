use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;

use super::config::TrainConfig;
use super::optim::{clip_global_norm, Adam};
use crate::data::{DatasetIndex, ImagePipeline, PkBatch};
use crate::error::{Error, Result};
use crate::losses::{
    check_pk_structure, combined_loss, identification_loss, triplet_batch_hard, BranchLosses,
    LossWeights, TripletConfig,
};
use crate::model::{Backbone, DeepPerson, OutputGrads};
use crate::params::Grads;

/// Preprocessed images of one PK batch with identity and class labels.
#[derive(Debug, Clone)]
pub struct BatchInput {
    pub images: Vec<Array3<f64>>,
    pub identities: Vec<i64>,
    pub classes: Vec<usize>,
}

/// Loads and (optionally) augments every image of `batch`, in batch order.
pub fn load_batch<R: Rng + ?Sized>(
    index: &DatasetIndex,
    batch: &PkBatch,
    pipeline: &ImagePipeline,
    augment: bool,
    rng: &mut R,
) -> Result<BatchInput> {
    let mut images = Vec::with_capacity(batch.len());
    let mut classes = Vec::with_capacity(batch.len());
    for (record, &id) in batch.iter_records(index).zip(&batch.identities) {
        let pixels = record.load()?;
        images.push(if augment {
            pipeline.augment(&pixels, rng)
        } else {
            pipeline.preprocess(&pixels)
        });
        classes.push(
            index
                .class_of(id)
                .ok_or_else(|| Error::Data(format!("identity {id} is not a training identity")))?,
        );
    }
    Ok(BatchInput {
        images,
        identities: batch.identities.clone(),
        classes,
    })
}

#[derive(Debug, Clone)]
pub struct GradientReport {
    pub losses: BranchLosses,
    pub total: f64,
    pub grads: Grads,
}

fn stack(rows: &[Array1<f64>]) -> Array2<f64> {
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::stack(Axis(0), &views).expect("rows share a length")
}

/// Forward and backward over a batch. Losses of disabled branches are
/// `None`; a term with weight zero is reported but contributes no gradient.
pub fn compute_gradients<B: Backbone>(
    model: &DeepPerson<B>,
    batch: &BatchInput,
    weights: &LossWeights,
    triplet: &TripletConfig,
) -> Result<GradientReport> {
    check_pk_structure(&batch.identities)?;
    if batch.images.len() != batch.identities.len() || batch.classes.len() != batch.identities.len()
    {
        return Err(Error::shape(
            "batch",
            batch.identities.len(),
            batch.images.len(),
        ));
    }
    let branches = model.config().branches;
    let mut outputs = Vec::with_capacity(batch.images.len());
    let mut caches = Vec::with_capacity(batch.images.len());
    for image in &batch.images {
        let (out, cache) = model.forward_cached(image.view())?;
        outputs.push(out);
        caches.push(cache);
    }

    let trp = if branches.ranking {
        let f_m: Vec<Array1<f64>> = outputs.iter().map(|o| o.f_m.clone()).collect();
        Some(triplet_batch_hard(
            stack(&f_m).view(),
            &batch.identities,
            triplet,
        )?)
    } else {
        None
    };
    let cls_p = if branches.part {
        let logits: Vec<Array1<f64>> = outputs
            .iter()
            .map(|o| o.part_logits().cloned())
            .collect::<Result<_>>()?;
        Some(identification_loss(stack(&logits).view(), &batch.classes)?)
    } else {
        None
    };
    let cls_g = if branches.global {
        let logits: Vec<Array1<f64>> = outputs
            .iter()
            .map(|o| o.global_logits().cloned())
            .collect::<Result<_>>()?;
        Some(identification_loss(stack(&logits).view(), &batch.classes)?)
    } else {
        None
    };
    let losses = BranchLosses {
        trp: trp.as_ref().map(|l| l.loss),
        cls_p: cls_p.as_ref().map(|l| l.loss),
        cls_g: cls_g.as_ref().map(|l| l.loss),
    };
    let total = combined_loss(&losses, weights)?;

    let mut grads = model.zero_grads();
    let row = |g: &Array2<f64>, i: usize, w: f64| (w != 0.0).then(|| g.row(i).to_owned() * w);
    for (i, cache) in caches.iter().enumerate() {
        let upstream = OutputGrads {
            f_m: trp.as_ref().and_then(|l| row(&l.grad, i, weights.trp)),
            logits_p: cls_p.as_ref().and_then(|l| row(&l.grad, i, weights.cls_p)),
            logits_g: cls_g.as_ref().and_then(|l| row(&l.grad, i, weights.cls_g)),
        };
        model.backward(cache, &upstream, &mut grads, false);
    }
    Ok(GradientReport {
        losses,
        total,
        grads,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub losses: BranchLosses,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Gradient norm after clipping, i.e. the one applied.
    pub clipped_norm: f64,
}

/// One optimization step: losses, backward, global-norm clip, Adam update.
pub fn train_step<B: Backbone>(
    model: &mut DeepPerson<B>,
    optimizer: &mut Adam,
    batch: &BatchInput,
    config: &TrainConfig,
    lr: f64,
) -> Result<StepReport> {
    let GradientReport {
        losses,
        total,
        mut grads,
    } = compute_gradients(model, batch, &config.weights, &config.triplet)?;
    let (grad_norm, clipped_norm) = clip_global_norm(&mut grads, config.grad_clip);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite {
            term: "gradient norm".into(),
            value: grad_norm,
        });
    }
    optimizer.update(model.params_mut(), &grads, lr);
    Ok(StepReport {
        losses,
        total,
        lr,
        grad_norm,
        clipped_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Branches, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_height: 16,
            input_width: 8,
            depth: 2,
            stage_convs: 1,
            base_width: 4,
            max_width: 4,
            channels: 6,
            hidden: 3,
            lstm_layers: 1,
            global_fc_dim: 5,
            num_classes: 3,
            branches: Branches::ALL,
            part_uses_lstm: true,
        }
    }

    fn random_batch(cfg: &ModelConfig, seed: u64) -> BatchInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = [0i64, 0, 1, 1, 2, 2];
        let images = ids
            .iter()
            .map(|_| {
                Array3::from_shape_simple_fn((cfg.input_height, cfg.input_width, 3), || {
                    StandardNormal.sample(&mut rng)
                })
            })
            .collect();
        BatchInput {
            images,
            identities: ids.to_vec(),
            classes: ids.iter().map(|&i| i as usize).collect(),
        }
    }

    #[test]
    fn combined_gradient_is_the_sum_of_branch_gradients() {
        let cfg = tiny_config();
        let model = DeepPerson::new(cfg.clone(), 3).unwrap();
        let batch = random_batch(&cfg, 4);
        let t = TripletConfig::default();
        let all = compute_gradients(&model, &batch, &LossWeights::default(), &t).unwrap();
        let mut sum = model.zero_grads();
        for w in [
            LossWeights::new(1.0, 0.0, 0.0),
            LossWeights::new(0.0, 1.0, 0.0),
            LossWeights::new(0.0, 0.0, 1.0),
        ] {
            sum.add_assign(&compute_gradients(&model, &batch, &w, &t).unwrap().grads);
        }
        for (a, b) in all
            .grads
            .tensors()
            .iter()
            .flatten()
            .zip(sum.tensors().iter().flatten())
        {
            assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn global_only_weights_leave_the_part_branch_unchanged() {
        let cfg = tiny_config();
        let mut model = DeepPerson::new(cfg.clone(), 5).unwrap();
        let before = model.params().clone();
        let config = TrainConfig {
            weights: LossWeights::new(0.0, 0.0, 1.0),
            ..TrainConfig::default()
        };
        let mut adam = Adam::new(config.adam, model.params());
        train_step(&mut model, &mut adam, &random_batch(&cfg, 6), &config, 1e-3).unwrap();
        for (old, new) in before.entries().iter().zip(model.params().entries()) {
            let changed = old.data != new.data;
            let is_part = old.name.starts_with("part.");
            assert_eq!(changed, !is_part, "{}", old.name);
        }
    }

    #[test]
    fn clipped_norm_respects_the_ceiling() {
        let cfg = tiny_config();
        let mut model = DeepPerson::new(cfg.clone(), 7).unwrap();
        let config = TrainConfig {
            grad_clip: 1e-3,
            ..TrainConfig::default()
        };
        let mut adam = Adam::new(config.adam, model.params());
        for s in 0..3 {
            let r =
                train_step(&mut model, &mut adam, &random_batch(&cfg, s), &config, 1e-3).unwrap();
            assert!(r.grad_norm > 1e-3);
            assert!(r.clipped_norm <= 1e-3 + 1e-6);
        }
    }

    #[test]
    fn single_batch_overfits() {
        let cfg = tiny_config();
        let mut model = DeepPerson::new(cfg.clone(), 8).unwrap();
        let config = TrainConfig::default();
        let mut adam = Adam::new(config.adam, model.params());
        let batch = random_batch(&cfg, 9);
        let totals: Vec<f64> = (0..50)
            .map(|_| {
                train_step(&mut model, &mut adam, &batch, &config, 3e-3)
                    .unwrap()
                    .total
            })
            .collect();
        let rises = totals.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(rises <= 5, "{rises} non-monotone steps: {totals:?}");
        assert!(totals[49] < totals[0]);
    }

    #[test]
    fn single_identity_batch_is_rejected() {
        let cfg = tiny_config();
        let model = DeepPerson::new(cfg.clone(), 1).unwrap();
        let mut batch = random_batch(&cfg, 2);
        batch.identities = vec![0; 6];
        batch.classes = vec![0; 6];
        let err = compute_gradients(
            &model,
            &batch,
            &LossWeights::default(),
            &TripletConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::BatchStructure(_)));
    }
}
