//! Run configuration: an INI-style file of `[section]` blocks with
//! `key = value` lines, overridden by `--set section.key=value` pairs and
//! finally by command-line flags.
//!
//! Every key has a default, so the resolved settings are always complete and
//! [`Settings::to_ini`] writes a file that reproduces the run when loaded.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use deepperson::data::{Difficulty, ImagePipeline, Normalization, SyntheticConfig};
use deepperson::eval::QueryMode;
use deepperson::losses::{LossWeights, TripletConfig};
use deepperson::model::{Branches, Descriptor, ModelConfig};
use deepperson::train::{AdamConfig, LrSchedule, TrainConfig};

use crate::error::CliError;

pub const DATA_ROOT_ENV: &str = "DEEPPERSON_DATA_ROOT";

/// Resolved `section.key -> value` pairs in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    entries: Vec<(&'static str, String)>,
}

fn fmt_bool(b: bool) -> String {
    b.to_string()
}

impl Default for Settings {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let pipeline = ImagePipeline::default();
        let synth = SyntheticConfig::new(16, 16);
        let step_factor = match train.schedule {
            LrSchedule::Step { factor } => factor,
            LrSchedule::Exponential => 0.1,
        };
        let entries = vec![
            ("run.seed", train.seed.to_string()),
            ("run.out", "out".to_string()),
            ("model.input_height", model.input_height.to_string()),
            ("model.input_width", model.input_width.to_string()),
            ("model.depth", model.depth.to_string()),
            ("model.stage_convs", model.stage_convs.to_string()),
            ("model.base_width", model.base_width.to_string()),
            ("model.max_width", model.max_width.to_string()),
            ("model.channels", model.channels.to_string()),
            ("model.hidden", model.hidden.to_string()),
            ("model.lstm_layers", model.lstm_layers.to_string()),
            ("model.global_fc_dim", model.global_fc_dim.to_string()),
            ("model.num_classes", "auto".to_string()),
            ("model.branches", model.branches.to_string()),
            ("model.part_uses_lstm", fmt_bool(model.part_uses_lstm)),
            ("trainer.p", train.p.to_string()),
            ("trainer.k", train.k.to_string()),
            ("trainer.epochs", train.epochs.to_string()),
            ("trainer.base_lr", train.base_lr.to_string()),
            ("trainer.decay_epoch", train.decay_epoch.to_string()),
            ("trainer.schedule", "exponential".to_string()),
            ("trainer.step_factor", step_factor.to_string()),
            ("trainer.beta1", train.adam.beta1.to_string()),
            ("trainer.beta2", train.adam.beta2.to_string()),
            ("trainer.adam_eps", train.adam.eps.to_string()),
            ("trainer.grad_clip", train.grad_clip.to_string()),
            ("trainer.lambda_trp", train.weights.trp.to_string()),
            ("trainer.lambda_cls_p", train.weights.cls_p.to_string()),
            ("trainer.lambda_cls_g", train.weights.cls_g.to_string()),
            ("trainer.margin", train.triplet.margin.to_string()),
            ("trainer.eval_every", train.eval_every.to_string()),
            ("trainer.augment", fmt_bool(train.augment)),
            ("trainer.resume", fmt_bool(false)),
            ("pipeline.normalization", "imagenet".to_string()),
            ("pipeline.scale_min", pipeline.scale_range.0.to_string()),
            ("pipeline.scale_max", pipeline.scale_range.1.to_string()),
            ("pipeline.aspect_min", pipeline.aspect_range.0.to_string()),
            ("pipeline.aspect_max", pipeline.aspect_range.1.to_string()),
            ("pipeline.flip_prob", pipeline.flip_prob.to_string()),
            (
                "pipeline.max_crop_attempts",
                pipeline.max_crop_attempts.to_string(),
            ),
            ("data.root", String::new()),
            ("data.held_in", fmt_bool(false)),
            ("eval.mode", QueryMode::Single.to_string()),
            ("eval.descriptor", Descriptor::Pooled.to_string()),
            ("eval.k_max", "50".to_string()),
            ("synth.num_ids", synth.num_ids.to_string()),
            ("synth.test_ids", synth.test_ids.to_string()),
            ("synth.imgs_per_id", synth.imgs_per_id.to_string()),
            ("synth.cameras", synth.cameras.to_string()),
            ("synth.height", synth.height.to_string()),
            ("synth.width", synth.width.to_string()),
            ("synth.difficulty", "standard".to_string()),
            ("heatmap.opacity", "0.5".to_string()),
        ];
        Self { entries }
    }
}

/// Closest known key, if any is near enough to be a plausible typo.
pub fn suggest(key: &str) -> Option<&'static str> {
    let known = Settings::default();
    known
        .keys()
        .map(|k| (strsim::normalized_damerau_levenshtein(key, k), k))
        .filter(|&(score, _)| score >= 0.7)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, k)| k)
}

fn unknown_keys_error(unknown: &[(String, String)]) -> CliError {
    let mut msg = String::from("unknown configuration keys:");
    for (key, origin) in unknown {
        let _ = write!(msg, "\n  {key} ({origin})");
        if let Some(s) = suggest(key) {
            let _ = write!(msg, ": did you mean {s}?");
        }
    }
    CliError::Config(msg)
}

/// Parses INI text into `(section.key, value, line)` triples.
pub fn parse_ini(text: &str, origin: &str) -> Result<Vec<(String, String, usize)>, CliError> {
    let mut section: Option<String> = None;
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = Some(name.trim().to_string());
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Config(format!(
                "{origin}:{}: expected `key = value`, got `{line}`",
                n + 1
            )));
        };
        let Some(section) = &section else {
            return Err(CliError::Config(format!(
                "{origin}:{}: `{}` appears before any [section]",
                n + 1,
                key.trim()
            )));
        };
        out.push((
            format!("{section}.{}", key.trim()),
            value.trim().to_string(),
            n + 1,
        ));
    }
    Ok(out)
}

impl Settings {
    pub fn keys(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.iter().map(|(k, _)| *k)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v.as_str())
    }

    fn slot(&mut self, key: &str) -> Option<&mut String> {
        self.entries
            .iter_mut()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
    }

    /// Applies `(key, value, origin)` overrides in order. All unknown keys are
    /// reported together and nothing is applied if any is unknown.
    pub fn apply(&mut self, overrides: &[(String, String, String)]) -> Result<(), CliError> {
        let unknown: Vec<(String, String)> = overrides
            .iter()
            .filter(|(k, _, _)| self.get(k).is_none())
            .map(|(k, _, origin)| (k.clone(), origin.clone()))
            .collect();
        if !unknown.is_empty() {
            return Err(unknown_keys_error(&unknown));
        }
        for (key, value, _) in overrides {
            *self.slot(key).expect("checked above") = value.clone();
        }
        Ok(())
    }

    /// Defaults, then the config file, then `--set` pairs.
    pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<Self, CliError> {
        let mut overrides = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            let origin = path.display().to_string();
            for (key, value, line) in parse_ini(&text, &origin)? {
                overrides.push((key, value, format!("{origin}:{line}")));
            }
        }
        for pair in sets {
            let Some((key, value)) = pair.split_once('=') else {
                return Err(CliError::Config(format!(
                    "--set expects key=value, got `{pair}`"
                )));
            };
            overrides.push((
                key.trim().to_string(),
                value.trim().to_string(),
                "--set".into(),
            ));
        }
        let mut settings = Self::default();
        settings.apply(&overrides)?;
        Ok(settings)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        *self.slot(key).unwrap_or_else(|| panic!("no setting {key}")) = value.into();
    }

    /// The settings as a loadable config file.
    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (key, value) in &self.entries {
            let (section, name) = key.split_once('.').expect("keys are section.name");
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{section}]");
                current = section;
            }
            let _ = writeln!(out, "{name} = {value}");
        }
        out
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key).expect("known key");
        raw.parse()
            .map_err(|e| CliError::Config(format!("{key}: invalid value `{raw}`: {e}")))
    }

    fn parse_bool(&self, key: &str) -> Result<bool, CliError> {
        match self.get(key).expect("known key") {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            raw => Err(CliError::Config(format!(
                "{key}: expected true or false, got `{raw}`"
            ))),
        }
    }

    pub fn to_run_config(&self) -> Result<RunConfig, CliError> {
        let num_classes = match self.get("model.num_classes").expect("known key") {
            "auto" => None,
            _ => Some(self.parse("model.num_classes")?),
        };
        let model = ModelConfig {
            input_height: self.parse("model.input_height")?,
            input_width: self.parse("model.input_width")?,
            depth: self.parse("model.depth")?,
            stage_convs: self.parse("model.stage_convs")?,
            base_width: self.parse("model.base_width")?,
            max_width: self.parse("model.max_width")?,
            channels: self.parse("model.channels")?,
            hidden: self.parse("model.hidden")?,
            lstm_layers: self.parse("model.lstm_layers")?,
            global_fc_dim: self.parse("model.global_fc_dim")?,
            num_classes: num_classes.unwrap_or(0),
            branches: self.parse::<Branches>("model.branches")?,
            part_uses_lstm: self.parse_bool("model.part_uses_lstm")?,
        };
        let normalization = match self.get("pipeline.normalization").expect("known key") {
            "imagenet" => Normalization::IMAGENET,
            "symmetric" => Normalization::SYMMETRIC,
            raw => {
                return Err(CliError::Config(format!(
                    "pipeline.normalization: expected imagenet or symmetric, got `{raw}`"
                )))
            }
        };
        let pipeline = ImagePipeline {
            height: to_u32("model.input_height", model.input_height)?,
            width: to_u32("model.input_width", model.input_width)?,
            scale_range: (
                self.parse("pipeline.scale_min")?,
                self.parse("pipeline.scale_max")?,
            ),
            aspect_range: (
                self.parse("pipeline.aspect_min")?,
                self.parse("pipeline.aspect_max")?,
            ),
            flip_prob: self.parse("pipeline.flip_prob")?,
            max_crop_attempts: self.parse("pipeline.max_crop_attempts")?,
            normalization,
        };
        let schedule = match self.get("trainer.schedule").expect("known key") {
            "exponential" => LrSchedule::Exponential,
            "step" => LrSchedule::Step {
                factor: self.parse("trainer.step_factor")?,
            },
            raw => {
                return Err(CliError::Config(format!(
                    "trainer.schedule: expected exponential or step, got `{raw}`"
                )))
            }
        };
        let seed: u64 = self.parse("run.seed")?;
        let train = TrainConfig {
            p: self.parse("trainer.p")?,
            k: self.parse("trainer.k")?,
            epochs: self.parse("trainer.epochs")?,
            base_lr: self.parse("trainer.base_lr")?,
            decay_epoch: self.parse("trainer.decay_epoch")?,
            schedule,
            adam: AdamConfig {
                beta1: self.parse("trainer.beta1")?,
                beta2: self.parse("trainer.beta2")?,
                eps: self.parse("trainer.adam_eps")?,
            },
            grad_clip: self.parse("trainer.grad_clip")?,
            weights: LossWeights::new(
                self.parse("trainer.lambda_trp")?,
                self.parse("trainer.lambda_cls_p")?,
                self.parse("trainer.lambda_cls_g")?,
            ),
            triplet: TripletConfig {
                margin: self.parse("trainer.margin")?,
            },
            seed,
            eval_every: self.parse("trainer.eval_every")?,
            pipeline,
            augment: self.parse_bool("trainer.augment")?,
        };
        let difficulty = match self.get("synth.difficulty").expect("known key") {
            "easy" => Difficulty::EASY,
            "standard" => Difficulty::STANDARD,
            "hard" => Difficulty::HARD,
            raw => {
                return Err(CliError::Config(format!(
                    "synth.difficulty: expected easy, standard or hard, got `{raw}`"
                )))
            }
        };
        let synth = SyntheticConfig {
            num_ids: self.parse("synth.num_ids")?,
            test_ids: self.parse("synth.test_ids")?,
            imgs_per_id: self.parse("synth.imgs_per_id")?,
            cameras: self.parse("synth.cameras")?,
            height: self.parse("synth.height")?,
            width: self.parse("synth.width")?,
            difficulty,
        };
        let data_root = match self.get("data.root").expect("known key") {
            "" => None,
            root => Some(PathBuf::from(root)),
        };
        let descriptor: Descriptor = self.parse("eval.descriptor")?;
        if descriptor == Descriptor::Fused && !(model.branches.part && model.branches.global) {
            return Err(CliError::Config(format!(
                "eval.descriptor = f_c needs the part and global branches, but model.branches = {}",
                model.branches
            )));
        }
        Ok(RunConfig {
            model,
            num_classes,
            train,
            resume: self.parse_bool("trainer.resume")?,
            data_root,
            held_in: self.parse_bool("data.held_in")?,
            eval_mode: self.parse("eval.mode")?,
            descriptor,
            k_max: self.parse("eval.k_max")?,
            synth,
            opacity: self.parse("heatmap.opacity")?,
            out: PathBuf::from(self.get("run.out").expect("known key")),
        })
    }
}

fn to_u32(key: &str, v: usize) -> Result<u32, CliError> {
    u32::try_from(v).map_err(|_| CliError::Config(format!("{key} = {v} is too large")))
}

/// Typed view of resolved [`Settings`].
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// `num_classes` is filled from the dataset when `num_classes` is `None`.
    pub model: ModelConfig,
    pub num_classes: Option<usize>,
    pub train: TrainConfig,
    pub resume: bool,
    pub data_root: Option<PathBuf>,
    /// Evaluate on the training images instead of a query/gallery split.
    pub held_in: bool,
    pub eval_mode: QueryMode,
    pub descriptor: Descriptor,
    pub k_max: usize,
    pub synth: SyntheticConfig,
    pub opacity: f64,
    pub out: PathBuf,
}

impl RunConfig {
    /// `data.root`, falling back to the environment.
    pub fn data_root(&self) -> Result<PathBuf, CliError> {
        if let Some(root) = &self.data_root {
            return Ok(root.clone());
        }
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
            _ => Err(CliError::Config(format!(
                "no dataset: set data.root or {DATA_ROOT_ENV}"
            ))),
        }
    }
}
