//! Properties that need a trained network. One desk-scale model is trained
//! once and shared by every test here.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use deepperson::data::{DatasetIndex, Difficulty, ImageRecord, Split, SyntheticConfig};
use deepperson::eval::QueryMode;
use deepperson::heatmap::heatmap;
use deepperson::model::{DeepPerson, Descriptor, ModelConfig};
use deepperson::train::{evaluate_model, run_training, RunOptions, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Trained {
    model: DeepPerson,
    config: SyntheticConfig,
    index: DatasetIndex,
    train: TrainConfig,
}

/// Three query images per identity and camera; the rest form the gallery.
fn multi_query_split(train: &DatasetIndex) -> DatasetIndex {
    let mut seen: BTreeMap<(i64, u32), usize> = BTreeMap::new();
    let mut records: Vec<ImageRecord> = train.records().to_vec();
    for r in train.records() {
        let n = seen.entry((r.identity, r.camera)).or_insert(0);
        *n += 1;
        let split = if *n <= 3 {
            Split::Query
        } else {
            Split::Gallery
        };
        records.push(ImageRecord { split, ..r.clone() });
    }
    DatasetIndex::from_records(records).unwrap()
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut config = SyntheticConfig::new(8, 16);
        config.difficulty = Difficulty::STANDARD;
        let base = config.generate(&mut ChaCha8Rng::seed_from_u64(21)).unwrap();
        let index = multi_query_split(&base);
        let train = TrainConfig {
            seed: 4,
            eval_every: 0,
            epochs: 20,
            decay_epoch: 15,
            ..TrainConfig::desk_scale()
        };
        let model = run_training(
            &index,
            &ModelConfig::desk_scale(8),
            &train,
            &RunOptions::default(),
        )
        .unwrap()
        .model;
        Trained {
            model,
            config,
            index,
            train,
        }
    })
}

#[test]
fn multi_query_is_at_least_as_good_as_single_query() {
    let t = trained();
    let score = |mode| {
        evaluate_model(
            &t.model,
            &t.index,
            &t.train.pipeline,
            Descriptor::Pooled,
            mode,
            50,
        )
        .unwrap()
        .map
    };
    let (single, multi) = (score(QueryMode::Single), score(QueryMode::Multi));
    assert!(multi >= single, "multi {multi} < single {single}");
    assert!(single > 0.3, "model did not learn: mAP {single}");
}

/// Mean heat inside the person's box against the mean over the background.
#[test]
fn heatmap_concentrates_on_the_person() {
    let t = trained();
    let images = t
        .config
        .render_all(&mut ChaCha8Rng::seed_from_u64(99))
        .unwrap();
    let mut ratios = Vec::new();
    for img in images.iter().step_by(9) {
        let x = t.train.pipeline.preprocess(&img.pixels);
        let heat = heatmap(&t.model, x.view()).unwrap();
        let (x0, y0, x1, y1) = img.body_box;
        let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0, 0.0, 0);
        for ((y, x), &v) in heat.indexed_iter() {
            let (x, y) = (x as u32, y as u32);
            if (x0..x1).contains(&x) && (y0..y1).contains(&y) {
                inside += v;
                n_in += 1;
            } else {
                outside += v;
                n_out += 1;
            }
        }
        ratios.push((inside / n_in as f64) / (outside / n_out as f64));
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!(mean > 1.0, "body/background heat ratio {mean}: {ratios:?}");
}
