use std::fs;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, EpochMetrics, TrainState};
use super::config::{lr_at_epoch, TrainConfig};
use super::step::{load_batch, train_step};
use crate::data::{pk_sample, DatasetIndex, Split};
use crate::error::{Error, Result};
use crate::eval::{EvalReport, QueryMode};
use crate::model::{DeepPerson, Descriptor, ModelConfig};

use super::inference::evaluate_model;

pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_LOG: &str = "metrics.log";

/// Stream offset keeping epoch sampling apart from the model-init streams.
const EPOCH_STREAM_BASE: u64 = 1 << 32;

/// Random stream for one epoch's batch sampling and augmentation. Deriving it
/// from `(seed, epoch)` makes a resumed run draw exactly what an
/// uninterrupted run would.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EPOCH_STREAM_BASE + epoch as u64);
    rng
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Where checkpoints and the metrics log go; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/latest.ckpt` when it exists.
    pub resume: bool,
    /// Stop after this 0-based epoch, as if interrupted.
    pub stop_after_epoch: Option<usize>,
    pub eval_mode: QueryMode,
    pub k_max: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            out_dir: None,
            resume: false,
            stop_after_epoch: None,
            eval_mode: QueryMode::Single,
            k_max: 50,
        }
    }
}

pub struct TrainOutcome {
    pub model: DeepPerson,
    pub state: TrainState,
    pub last_eval: Option<EvalReport>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn mean_opt(values: &[Option<f64>]) -> Option<f64> {
    values
        .iter()
        .copied()
        .collect::<Option<Vec<f64>>>()
        .map(|v| mean(&v))
}

/// Trains for `config.epochs` epochs of `floor(N_c / P)` PK batches each.
/// With an output directory, every epoch rewrites `metrics.log` and
/// `latest.ckpt`; `best.ckpt` follows the best evaluated mAP.
pub fn run_training(
    index: &DatasetIndex,
    model_config: &ModelConfig,
    config: &TrainConfig,
    options: &RunOptions,
) -> Result<TrainOutcome> {
    model_config.validate()?;
    config.validate()?;
    if model_config.num_classes != index.num_classes() {
        return Err(Error::Config(format!(
            "model.num_classes is {} but the dataset has {} training identities",
            model_config.num_classes,
            index.num_classes()
        )));
    }
    if config.p > index.num_classes() {
        return Err(Error::Config(format!(
            "trainer.p = {} exceeds the {} training identities",
            config.p,
            index.num_classes()
        )));
    }
    let pipeline = &config.pipeline;
    if (pipeline.height as usize, pipeline.width as usize)
        != (model_config.input_height, model_config.input_width)
    {
        return Err(Error::Config(format!(
            "image pipeline produces {}x{} but the model expects {}x{}",
            pipeline.height, pipeline.width, model_config.input_height, model_config.input_width
        )));
    }
    if let Some(dir) = &options.out_dir {
        fs::create_dir_all(dir)?;
    }

    let mut model = DeepPerson::new(model_config.clone(), config.seed)?;
    let mut state = TrainState::new(model.params(), config);
    if let (true, Some(dir)) = (options.resume, &options.out_dir) {
        let path = dir.join(LATEST_CHECKPOINT);
        if path.exists() {
            let ck = Checkpoint::load(&path)?;
            ck.check_compatible(model_config, Some(config))?;
            ck.restore_into(&mut model)?;
            state = ck.state.ok_or_else(|| {
                Error::Checkpoint(format!("{} has no training state", path.display()))
            })?;
            log::info!("resuming from {} at epoch {}", path.display(), state.epoch);
        }
    }

    let batches = index.batches_per_epoch(config.p);
    let can_eval = index.count(Split::Query) > 0 && index.count(Split::Gallery) > 0;
    let mut last_eval = None;
    while state.epoch < config.epochs {
        let epoch = state.epoch;
        let lr = lr_at_epoch(epoch, config);
        let mut rng = epoch_rng(state.seed, epoch);
        let (mut totals, mut trp, mut cls_p, mut cls_g) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for b in 0..batches {
            state.batch_in_epoch = b;
            let batch = pk_sample(index, config.p, config.k, &mut rng)?;
            batch.check()?;
            let input = load_batch(index, &batch, pipeline, config.augment, &mut rng)?;
            let report =
                train_step(&mut model, &mut state.optimizer, &input, config, lr).map_err(|e| {
                    match e {
                        Error::NonFinite { term, value } => Error::NonFinite {
                            term: format!("{term} (epoch {epoch}, batch {b})"),
                            value,
                        },
                        other => other,
                    }
                })?;
            totals.push(report.total);
            trp.push(report.losses.trp);
            cls_p.push(report.losses.cls_p);
            cls_g.push(report.losses.cls_g);
        }
        state.batch_in_epoch = 0;
        state.epoch += 1;

        let due = config.eval_every > 0
            && (state.epoch.is_multiple_of(config.eval_every) || state.epoch == config.epochs);
        let mut map = None;
        if due && can_eval {
            let report = evaluate_model(
                &model,
                index,
                pipeline,
                Descriptor::Pooled,
                options.eval_mode,
                options.k_max,
            )?;
            map = Some(report.map);
            last_eval = Some(report);
        }
        let metrics = EpochMetrics {
            epoch,
            lr,
            loss: mean(&totals),
            loss_trp: mean_opt(&trp),
            loss_cls_p: mean_opt(&cls_p),
            loss_cls_g: mean_opt(&cls_g),
            map,
        };
        log::info!("{}", metrics.to_line());
        state.history.push(metrics);
        let improved = map.is_some_and(|m| state.best_map.is_none_or(|b| m > b));
        if improved {
            state.best_map = map;
            state.best_epoch = Some(epoch);
        }

        if let Some(dir) = &options.out_dir {
            let ck = Checkpoint::from_model(&model, Some(config), Some(&state));
            ck.save(dir.join(LATEST_CHECKPOINT))?;
            if improved {
                ck.save(dir.join(BEST_CHECKPOINT))?;
            }
            fs::write(dir.join(METRICS_LOG), state.metrics_log())?;
        }
        if options.stop_after_epoch == Some(epoch) {
            break;
        }
    }
    Ok(TrainOutcome {
        model,
        state,
        last_eval,
    })
}
