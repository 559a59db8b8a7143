use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use deepperson::data::{
    load_dataset_index, load_training_split, write_market_layout, DatasetIndex, ImagePipeline,
    Split,
};
use deepperson::heatmap::{heatmap as energy_heatmap, render_overlay};
use deepperson::model::{DeepPerson, Descriptor};
use deepperson::train::{
    embed_image, evaluate_model, run_training, Checkpoint, RunOptions, LATEST_CHECKPOINT,
};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, Settings};
use crate::error::CliError;
use crate::format::g9;

pub const CONFIG_ECHO: &str = "config.cfg";
pub const REPORT: &str = "report.txt";
pub const PER_QUERY: &str = "per_query.tsv";
pub const DESCRIPTORS: &str = "descriptors.tsv";

/// Typed config plus the output directory with the resolved settings saved in it.
fn prepare(settings: &Settings) -> Result<RunConfig, CliError> {
    let config = settings.to_run_config()?;
    fs::create_dir_all(&config.out)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", config.out.display())))?;
    fs::write(config.out.join(CONFIG_ECHO), settings.to_ini()).map_err(deepperson::Error::from)?;
    Ok(config)
}

fn load_index(config: &RunConfig) -> Result<DatasetIndex, CliError> {
    let root = config.data_root()?;
    Ok(if config.held_in {
        load_training_split(&root)?.with_held_in_split()?
    } else {
        load_dataset_index(&root)?
    })
}

struct Loaded {
    model: DeepPerson,
    pipeline: ImagePipeline,
}

/// The checkpointed model, with the preprocessing it was trained under when
/// the checkpoint records it.
fn load_model(config: &RunConfig, path: &Path) -> Result<Loaded, CliError> {
    let ck = Checkpoint::load(path)?;
    let model = ck.to_model()?;
    let pipeline = match ck.train_config {
        Some(t) => t.pipeline,
        None => {
            let mc = model.config();
            ImagePipeline {
                height: mc.input_height as u32,
                width: mc.input_width as u32,
                ..config.train.pipeline.clone()
            }
        }
    };
    Ok(Loaded { model, pipeline })
}

fn check_descriptor(model: &DeepPerson, which: Descriptor) -> Result<(), CliError> {
    let b = model.config().branches;
    if which == Descriptor::Fused && !(b.part && b.global) {
        return Err(CliError::Config(format!(
            "descriptor f_c concatenates the part and global features, but this \
             checkpoint was trained with branches = {b}; use eval.descriptor = f_m"
        )));
    }
    Ok(())
}

pub fn train(settings: &Settings) -> Result<(), CliError> {
    print!("{}", settings.to_ini());
    let config = prepare(settings)?;
    let index = load_index(&config)?;
    let mut model = config.model.clone();
    model.num_classes = config.num_classes.unwrap_or_else(|| index.num_classes());
    let options = RunOptions {
        out_dir: Some(config.out.clone()),
        resume: config.resume,
        eval_mode: config.eval_mode,
        k_max: config.k_max,
        ..RunOptions::default()
    };
    let outcome = run_training(&index, &model, &config.train, &options)?;
    if let Some(report) = &outcome.last_eval {
        print!("{}", report.to_text());
    }
    println!(
        "checkpoint={}",
        config.out.join(LATEST_CHECKPOINT).display()
    );
    Ok(())
}

pub fn eval(settings: &Settings, checkpoint: &Path) -> Result<(), CliError> {
    let config = prepare(settings)?;
    let loaded = load_model(&config, checkpoint)?;
    check_descriptor(&loaded.model, config.descriptor)?;
    let index = load_index(&config)?;
    if index.count(Split::Query) == 0 || index.count(Split::Gallery) == 0 {
        return Err(CliError::Data("dataset has no query/gallery images".into()));
    }
    let report = evaluate_model(
        &loaded.model,
        &index,
        &loaded.pipeline,
        config.descriptor,
        config.eval_mode,
        config.k_max,
    )?;
    let text = format!(
        "descriptor={}\nmode={}\nqueries={}\n{}",
        config.descriptor,
        config.eval_mode,
        report.num_valid_queries,
        report.to_text()
    );
    fs::write(config.out.join(REPORT), &text).map_err(deepperson::Error::from)?;
    fs::write(config.out.join(PER_QUERY), report.per_query_table())
        .map_err(deepperson::Error::from)?;
    print!("{text}");
    Ok(())
}

fn read_list(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read image list {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

fn one_line(msg: &str) -> String {
    msg.replace(['\t', '\n', '\r'], " ")
}

/// Writes `path<TAB>v1,v2,...` per listed image, in list order. Images that
/// fail get `path<TAB>ERROR: reason` and the run continues; the command still
/// reports a data error at the end.
pub fn extract(settings: &Settings, checkpoint: &Path, list: &Path) -> Result<(), CliError> {
    let config = prepare(settings)?;
    let loaded = load_model(&config, checkpoint)?;
    check_descriptor(&loaded.model, config.descriptor)?;
    let paths = read_list(list)?;
    let out_path = config.out.join(DESCRIPTORS);
    let file = fs::File::create(&out_path).map_err(deepperson::Error::from)?;
    let mut out = std::io::BufWriter::new(file);
    let mut failed = 0;
    for path in &paths {
        let row = image::open(path)
            .map_err(|e| e.to_string())
            .and_then(|img| {
                let x = loaded.pipeline.preprocess(&img.to_rgb8());
                embed_image(&loaded.model, x.view(), config.descriptor).map_err(|e| e.to_string())
            });
        match row {
            Ok(v) => {
                let values: Vec<String> = v.iter().map(|&x| g9(x as f32)).collect();
                writeln!(out, "{path}\t{}", values.join(","))
            }
            Err(e) => {
                failed += 1;
                log::warn!("{path}: {e}");
                writeln!(out, "{path}\tERROR: {}", one_line(&e))
            }
        }
        .map_err(deepperson::Error::from)?;
    }
    out.flush().map_err(deepperson::Error::from)?;
    log::info!(
        "wrote {} descriptors to {}",
        paths.len() - failed,
        out_path.display()
    );
    if failed > 0 {
        return Err(CliError::Data(format!(
            "{failed} of {} images failed; see {}",
            paths.len(),
            out_path.display()
        )));
    }
    Ok(())
}

/// One `<stem>_heatmap.png` per image, drawn at the network input size.
pub fn heatmap(settings: &Settings, checkpoint: &Path, images: &[PathBuf]) -> Result<(), CliError> {
    let config = prepare(settings)?;
    if !(0.0..=1.0).contains(&config.opacity) {
        return Err(CliError::Config(format!(
            "heatmap.opacity must be in [0, 1], got {}",
            config.opacity
        )));
    }
    let loaded = load_model(&config, checkpoint)?;
    for path in images {
        let img = image::open(path)
            .map_err(|source| deepperson::Error::Image {
                path: path.clone(),
                source,
            })?
            .to_rgb8();
        let x = loaded.pipeline.preprocess(&img);
        let heat = energy_heatmap(&loaded.model, x.view())?;
        let overlay = render_overlay(&loaded.pipeline.resized(&img), heat.view(), config.opacity)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let target = config.out.join(format!("{stem}_heatmap.png"));
        overlay
            .save(&target)
            .map_err(|source| deepperson::Error::Image {
                path: target.clone(),
                source,
            })?;
        println!("{}", target.display());
    }
    Ok(())
}

pub fn synth_gen(settings: &Settings) -> Result<(), CliError> {
    let config = settings.to_run_config()?;
    for split in [Split::Train, Split::Query, Split::Gallery] {
        let dir = config.out.join(split.dir_name());
        if fs::read_dir(&dir).is_ok_and(|mut d| d.next().is_some()) {
            return Err(CliError::Config(format!(
                "{} already holds images; choose an empty --out",
                dir.display()
            )));
        }
    }
    let config = prepare(settings)?;
    let seed: u64 = config.train.seed;
    let index = config
        .synth
        .generate(&mut ChaCha8Rng::seed_from_u64(seed))?;
    write_market_layout(&index, &config.out)?;
    println!(
        "train={} query={} gallery={} identities={}",
        index.count(Split::Train),
        index.count(Split::Query),
        index.count(Split::Gallery),
        index.num_classes()
    );
    Ok(())
}
