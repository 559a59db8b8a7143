//! The acceptance suite. Each criterion prints one PASS/FAIL line; the
//! process exits non-zero if any criterion fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use deepperson::data::DatasetIndex;
use deepperson::data::{Difficulty, SyntheticConfig};
use deepperson::eval::{cmc_curve, mean_average_precision, QueryMode, RetrievalMeta};
use deepperson::losses::{identification_loss, triplet_batch_hard, LossWeights, TripletConfig};
use deepperson::model::{Branches, DeepPerson, Descriptor, ModelConfig, PartBranch, PartSequence};
use deepperson::params::{Grads, ParamStore};
use deepperson::train::{
    compute_gradients, evaluate_model, run_training, BatchInput, RunOptions, TrainConfig,
    LATEST_CHECKPOINT, METRICS_LOG,
};
use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = Box<dyn Fn() -> Outcome>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)+));
        }
    };
}

fn within(limit: Duration, started: Instant, what: &str) -> Result<(), String> {
    let took = started.elapsed();
    ensure!(took <= limit, "{what} took {took:?}, limit {limit:?}");
    Ok(())
}

// ---------------------------------------------------------------- criterion 1

fn euclid(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Per anchor, the largest hinge over every (positive, negative) pair.
fn triplet_oracle(x: &Array2<f64>, labels: &[usize], margin: f64) -> f64 {
    let n = x.nrows();
    let mut total = 0.0;
    for a in 0..n {
        let mut worst = f64::NEG_INFINITY;
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            for q in (0..n).filter(|&q| labels[q] != labels[a]) {
                let h = margin + euclid(x.row(a), x.row(p)) - euclid(x.row(a), x.row(q));
                worst = worst.max(h.max(0.0));
            }
        }
        total += worst;
    }
    total / n as f64
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let config = TripletConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let p = rng.random_range(2..=4);
        let k = rng.random_range(2..=4);
        let d = rng.random_range(1..=8);
        let mut labels: Vec<usize> = (0..p).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        labels.shuffle(&mut rng);
        let x = Array2::from_shape_simple_fn((p * k, d), || rng.random_range(-1.0..1.0));
        let got = triplet_batch_hard(x.view(), &labels, &config)
            .map_err(|e| e.to_string())?
            .loss;
        worst = worst.max((got - triplet_oracle(&x, &labels, config.margin)).abs());
    }
    ensure!(worst <= 1e-9, "max deviation {worst:e} > 1e-9");
    within(Duration::from_secs(10), started, "200 batches")?;
    Ok(format!("200 batches, max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- criterion 2

/// Reference ranking: walk the gallery by ascending distance (index breaks
/// ties), skipping junk and same-camera matches of the query identity.
fn ranks_oracle(dist: &[f64], qid: i64, qcam: u32, gid: &[i64], gcam: &[u32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[a].partial_cmp(&dist[b]).unwrap().then(a.cmp(&b)));
    let mut rank = 0;
    let mut hits = Vec::new();
    for j in order {
        if gid[j] == -1 || (gid[j] == qid && gcam[j] == qcam) {
            continue;
        }
        rank += 1;
        if gid[j] == qid {
            hits.push(rank);
        }
    }
    hits
}

fn ap_oracle(hits: &[usize]) -> f64 {
    // Precision at every relevant prefix, summed explicitly.
    let mut sum = 0.0;
    for (n, &r) in hits.iter().enumerate() {
        let relevant_in_prefix = hits.iter().filter(|&&h| h <= r).count();
        assert_eq!(relevant_in_prefix, n + 1);
        sum += relevant_in_prefix as f64 / r as f64;
    }
    sum / hits.len() as f64
}

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut scored = 0;
    let k_max = 50;
    while scored < 100 {
        let nq = rng.random_range(1..=10);
        let ng = rng.random_range(1..=50);
        let qid: Vec<i64> = (0..nq).map(|_| rng.random_range(0..6)).collect();
        let qcam: Vec<u32> = (0..nq).map(|_| rng.random_range(1..=3)).collect();
        let mut gid: Vec<i64> = (0..ng).map(|_| rng.random_range(-1..6)).collect();
        let gcam: Vec<u32> = (0..ng).map(|_| rng.random_range(1..=3)).collect();
        // Make sure junk and same-camera duplicates of the queries appear.
        if ng > 2 {
            gid[0] = -1;
            gid[1] = qid[0];
        }
        let mut gcam = gcam;
        if ng > 2 {
            gcam[1] = qcam[0];
        }
        // Coarse distances so ties occur.
        let dist = Array2::from_shape_simple_fn((nq, ng), || rng.random_range(0..20) as f64 / 4.0);
        let hits: Vec<Vec<usize>> = (0..nq)
            .map(|i| {
                ranks_oracle(
                    dist.row(i).as_slice().unwrap(),
                    qid[i],
                    qcam[i],
                    &gid,
                    &gcam,
                )
            })
            .collect();
        let valid: Vec<&Vec<usize>> = hits.iter().filter(|h| !h.is_empty()).collect();
        let q = RetrievalMeta::new(qid.clone(), qcam.clone()).unwrap();
        let g = RetrievalMeta::new(gid.clone(), gcam.clone()).unwrap();
        let cmc = cmc_curve(dist.view(), &q, &g, k_max);
        let map = mean_average_precision(dist.view(), &q, &g);
        if valid.is_empty() {
            ensure!(
                cmc.is_err() && map.is_err(),
                "instance without positives was scored"
            );
            continue;
        }
        scored += 1;
        let cmc = cmc.map_err(|e| e.to_string())?;
        for k in 1..=k_max {
            let expect = valid.iter().filter(|h| h[0] <= k).count() as f64 / valid.len() as f64;
            worst = worst.max((cmc[k - 1] - expect).abs());
        }
        let expect_map = valid.iter().map(|h| ap_oracle(h)).sum::<f64>() / valid.len() as f64;
        worst = worst.max((map.map_err(|e| e.to_string())? - expect_map).abs());
    }
    ensure!(worst <= 1e-12, "max deviation {worst:e} > 1e-12");

    // Relevant items at ranks 1 and 3 of 3.
    let q = RetrievalMeta::new(vec![1], vec![1]).unwrap();
    let g = RetrievalMeta::new(vec![1, 2, 1], vec![2, 2, 2]).unwrap();
    let dist = Array2::from_shape_vec((1, 3), vec![0.1, 0.2, 0.3]).unwrap();
    let ap = mean_average_precision(dist.view(), &q, &g).map_err(|e| e.to_string())?;
    ensure!((ap - 5.0 / 6.0).abs() <= 1e-12, "hand case AP {ap} != 5/6");
    within(Duration::from_secs(10), started, "100 instances")?;
    Ok(format!(
        "100 instances, max deviation {worst:.1e}; hand case AP = {ap:.6}"
    ))
}

// ---------------------------------------------------------------- criterion 3

const EPS: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

struct FdStats {
    checked: usize,
    kinks: usize,
    worst: f64,
}

/// Compares `analytic` with central differences of `f` at `x`. Points where
/// the one-sided slopes disagree straddle a hinge and are skipped.
fn fd_check(
    x: &mut [f64],
    analytic: &[f64],
    indices: &[usize],
    mut f: impl FnMut(&[f64]) -> f64,
) -> FdStats {
    let f0 = f(x);
    let mut s = FdStats {
        checked: 0,
        kinks: 0,
        worst: 0.0,
    };
    for &j in indices {
        let orig = x[j];
        x[j] = orig + EPS;
        let plus = f(x);
        x[j] = orig - EPS;
        let minus = f(x);
        x[j] = orig;
        let numeric = (plus - minus) / (2.0 * EPS);
        let scale = analytic[j].abs().max(numeric.abs());
        if scale < 1e-7 {
            continue;
        }
        if ((plus - f0) / EPS - (f0 - minus) / EPS).abs() > 1e-2 * scale {
            s.kinks += 1;
            continue;
        }
        s.worst = s.worst.max((analytic[j] - numeric).abs() / scale);
        s.checked += 1;
    }
    s
}

fn triplet_gradients(rng: &mut ChaCha8Rng) -> Result<FdStats, String> {
    let labels = [0usize, 0, 0, 1, 1, 1, 2, 2, 2];
    let mut x: Vec<f64> = (0..9 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cfg = TripletConfig { margin: 2.0 };
    let loss = |x: &[f64]| {
        let m = Array2::from_shape_vec((9, 4), x.to_vec()).unwrap();
        triplet_batch_hard(m.view(), &labels, &cfg).unwrap()
    };
    let analytic = loss(&x).grad.into_raw_vec_and_offset().0;
    let all: Vec<usize> = (0..x.len()).collect();
    Ok(fd_check(&mut x, &analytic, &all, |x| loss(x).loss))
}

fn ce_gradients(rng: &mut ChaCha8Rng) -> Result<FdStats, String> {
    let labels = [3usize, 0, 7, 7, 1];
    let mut z: Vec<f64> = (0..5 * 10).map(|_| rng.random_range(-3.0..3.0)).collect();
    let loss = |z: &[f64]| {
        let m = Array2::from_shape_vec((5, 10), z.to_vec()).unwrap();
        identification_loss(m.view(), &labels).unwrap()
    };
    let analytic = loss(&z).grad.into_raw_vec_and_offset().0;
    let all: Vec<usize> = (0..z.len()).collect();
    Ok(fd_check(&mut z, &analytic, &all, |z| loss(z).loss))
}

/// Two-step, U=3 part encoder under `L = c . f_p`: every parameter and the
/// input sequence.
fn blstm_gradients(rng: &mut ChaCha8Rng) -> Result<FdStats, String> {
    let cfg = ModelConfig {
        input_height: 8,
        input_width: 4,
        depth: 2,
        stage_convs: 1,
        base_width: 4,
        max_width: 4,
        channels: 4,
        hidden: 3,
        lstm_layers: 2,
        global_fc_dim: 4,
        num_classes: 3,
        branches: Branches::ALL,
        part_uses_lstm: true,
    };
    let mut store = ParamStore::new();
    let branch = PartBranch::new(&mut store, &cfg, rng);
    ensure!(
        branch.steps() == 2,
        "toy encoder has {} steps",
        branch.steps()
    );
    let seq = Array2::from_shape_simple_fn((2, 4), || rng.random_range(-1.0..1.0));
    let c = Array1::from_shape_simple_fn(6, || rng.random_range(-1.0..1.0));
    let loss = |store: &ParamStore, seq: &Array2<f64>| {
        let (f_p, _) = branch.encode(store, &PartSequence(seq.clone())).unwrap();
        f_p.dot(&c)
    };
    let (_, cache) = branch
        .encode(&store, &PartSequence(seq.clone()))
        .map_err(|e| e.to_string())?;
    let mut grads = Grads::zeros_like(&store);
    let dseq = branch.backward(&store, &cache, None, Some(&c), &mut grads);

    let mut total = FdStats {
        checked: 0,
        kinks: 0,
        worst: 0.0,
    };
    let mut merge = |s: FdStats| {
        total.checked += s.checked;
        total.kinks += s.kinks;
        total.worst = total.worst.max(s.worst);
    };
    for id in store.ids().collect::<Vec<_>>() {
        let mut x = store.get(id).to_vec();
        let analytic = grads.get(id).to_vec();
        let all: Vec<usize> = (0..x.len()).collect();
        let mut probe = store.clone();
        merge(fd_check(&mut x, &analytic, &all, |x| {
            probe.get_mut(id).copy_from_slice(x);
            loss(&probe, &seq)
        }));
    }
    let mut x = seq.clone().into_raw_vec_and_offset().0;
    let analytic = dseq.into_raw_vec_and_offset().0;
    let all: Vec<usize> = (0..x.len()).collect();
    merge(fd_check(&mut x, &analytic, &all, |x| {
        loss(&store, &Array2::from_shape_vec((2, 4), x.to_vec()).unwrap())
    }));
    Ok(total)
}

/// The whole network under the combined loss, sampled coordinates.
fn network_gradients(rng: &mut ChaCha8Rng) -> Result<FdStats, String> {
    let cfg = ModelConfig {
        input_height: 16,
        input_width: 8,
        depth: 2,
        stage_convs: 2,
        base_width: 3,
        max_width: 4,
        channels: 5,
        hidden: 3,
        lstm_layers: 2,
        global_fc_dim: 4,
        num_classes: 3,
        branches: Branches::ALL,
        part_uses_lstm: true,
    };
    let mut model = DeepPerson::new(cfg.clone(), 17).map_err(|e| e.to_string())?;
    let ids = vec![0i64, 0, 1, 1, 2, 2];
    let batch = BatchInput {
        images: ids
            .iter()
            .map(|_| Array3::from_shape_simple_fn((16, 8, 3), || rng.random_range(-1.0..1.0)))
            .collect(),
        identities: ids.clone(),
        classes: ids.iter().map(|&i| i as usize).collect(),
    };
    let weights = LossWeights::default();
    let triplet = TripletConfig::default();
    let report =
        compute_gradients(&model, &batch, &weights, &triplet).map_err(|e| e.to_string())?;
    let mut total = FdStats {
        checked: 0,
        kinks: 0,
        worst: 0.0,
    };
    for id in model.params().ids().collect::<Vec<_>>() {
        let len = model.params().get(id).len();
        let picks: Vec<usize> = (0..4).map(|_| rng.random_range(0..len)).collect();
        let mut x = model.params().get(id).to_vec();
        let analytic = report.grads.get(id).to_vec();
        let s = fd_check(&mut x, &analytic, &picks, |x| {
            model.params_mut().get_mut(id).copy_from_slice(x);
            compute_gradients(&model, &batch, &weights, &triplet)
                .unwrap()
                .total
        });
        let orig = x.clone();
        model.params_mut().get_mut(id).copy_from_slice(&orig);
        total.checked += s.checked;
        total.kinks += s.kinks;
        total.worst = total.worst.max(s.worst);
    }
    Ok(total)
}

fn criterion_3() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut lines = Vec::new();
    for (name, run) in [
        (
            "triplet",
            triplet_gradients as fn(&mut ChaCha8Rng) -> Result<FdStats, String>,
        ),
        ("identification", ce_gradients),
        ("BLSTM part encoder", blstm_gradients),
        ("full network", network_gradients),
    ] {
        let s = run(&mut rng)?;
        ensure!(
            s.checked >= 10,
            "{name}: only {} coordinates checked",
            s.checked
        );
        ensure!(
            s.kinks * 4 < s.checked,
            "{name}: {} of {} coordinates at kinks",
            s.kinks,
            s.checked
        );
        ensure!(
            s.worst <= REL_TOL,
            "{name}: relative error {:e} > {REL_TOL:e}",
            s.worst
        );
        lines.push(format!("{name} {:.1e} ({} coords)", s.worst, s.checked));
    }
    within(Duration::from_secs(60), started, "gradient checks")?;
    Ok(lines.join(", "))
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let ce = identification_loss(Array2::zeros((3, 751)).view(), &[0, 10, 750])
        .map_err(|e| e.to_string())?
        .loss;
    ensure!(
        (ce - 751f64.ln()).abs() <= 1e-9,
        "uniform logits give {ce}, expected ln 751"
    );
    let same = Array2::from_elem((8, 5), 0.3);
    let labels = [0, 0, 1, 1, 2, 2, 3, 3];
    let trp = triplet_batch_hard(same.view(), &labels, &TripletConfig::default())
        .map_err(|e| e.to_string())?
        .loss;
    ensure!(
        trp == 0.5,
        "identical embeddings give {trp}, expected exactly 0.5"
    );
    Ok(format!(
        "ln(751) = {ce:.9}, triplet on identical embeddings = {trp}"
    ))
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Outcome {
    let model_cfg = ModelConfig::default();
    let train = TrainConfig::default();
    let model = DeepPerson::new(model_cfg.clone(), 0).map_err(|e| e.to_string())?;
    let image = Array3::from_elem((256, 128, 3), 0.1);
    let out = model.forward(image.view()).map_err(|e| e.to_string())?;
    ensure!(
        out.f_b.dims() == (8, 4, 2048),
        "f_b is {:?}",
        out.f_b.dims()
    );
    let f_p = out.f_p.as_ref().map(|v| v.len());
    ensure!(
        f_p == Some(2048) && model_cfg.part_dim() == 8 * 256,
        "f_p length {f_p:?}"
    );
    ensure!(out.f_m.len() == 2048, "f_m length {}", out.f_m.len());
    ensure!(
        train.batch_size() == 128 && train.p * train.k == 128,
        "batch {}",
        train.batch_size()
    );
    ensure!(751 / train.p == 23, "batches per epoch {}", 751 / train.p);
    let lr0 = deepperson::train::lr_at_epoch(0, &train);
    ensure!(lr0 == 3e-4, "lr(0) = {lr0}");
    // The same count through the dataset index.
    let index = DatasetIndex::from_records(
        (1..=751)
            .map(|id| deepperson::data::ImageRecord {
                name: format!("{id:04}_c1s1_000000_00.png"),
                source: deepperson::data::ImageSource::Path(
                    format!("/nonexistent/{id}.png").into(),
                ),
                identity: id,
                camera: 1,
                split: deepperson::data::Split::Train,
            })
            .collect(),
    )
    .map_err(|e| e.to_string())?;
    ensure!(
        index.batches_per_epoch(train.p) == 23,
        "index gives {}",
        index.batches_per_epoch(train.p)
    );
    Ok("f_b 8x4x2048, f_p 2048, f_m 2048, batch 128, 23 batches/epoch, lr(0) 3e-4".into())
}

// ------------------------------------------------------------ criteria 6 to 8

fn synthetic(ids: usize, difficulty: Difficulty, seed: u64) -> Result<DatasetIndex, String> {
    let mut cfg = SyntheticConfig::new(ids, 16);
    cfg.difficulty = difficulty;
    cfg.generate(&mut ChaCha8Rng::seed_from_u64(100 + seed))
        .and_then(|d| d.with_held_in_split())
        .map_err(|e| e.to_string())
}

struct DeskRun {
    untrained_map: f64,
    rank1: f64,
    map: f64,
    took: Duration,
}

fn desk_run(
    index: &DatasetIndex,
    branches: Branches,
    seed: u64,
    out: Option<&Path>,
) -> Result<DeskRun, String> {
    let mut model_cfg = ModelConfig::desk_scale(index.num_classes());
    model_cfg.branches = branches;
    let train = TrainConfig {
        seed,
        eval_every: 10,
        ..TrainConfig::desk_scale()
    };
    let untrained = DeepPerson::new(model_cfg.clone(), seed).map_err(|e| e.to_string())?;
    let untrained_map = evaluate_model(
        &untrained,
        index,
        &train.pipeline,
        Descriptor::Pooled,
        QueryMode::Single,
        50,
    )
    .map_err(|e| e.to_string())?
    .map;
    let started = Instant::now();
    let options = RunOptions {
        out_dir: out.map(Path::to_path_buf),
        ..RunOptions::default()
    };
    let outcome = run_training(index, &model_cfg, &train, &options).map_err(|e| e.to_string())?;
    let report = outcome.last_eval.ok_or("training produced no evaluation")?;
    Ok(DeskRun {
        untrained_map,
        rank1: report.rank(1),
        map: report.map,
        took: started.elapsed(),
    })
}

fn criterion_6(out: &Path) -> Outcome {
    let index = synthetic(8, Difficulty::EASY, 0)?;
    let run = desk_run(&index, Branches::ALL, 0, Some(out))?;
    let summary = format!(
        "rank1 {:.4}, mAP {:.4} after 30 epochs in {:.0?}; untrained mAP {:.4}",
        run.rank1, run.map, run.took, run.untrained_map
    );
    ensure!(
        run.untrained_map < 0.5,
        "untrained model too good: {summary}"
    );
    ensure!(run.rank1 >= 0.95 && run.map >= 0.90, "{summary}");
    ensure!(run.took <= Duration::from_secs(15 * 60), "{summary}");
    Ok(summary)
}

fn criterion_7() -> Outcome {
    let variants = [
        ("full", Branches::ALL),
        ("global-only", "global".parse().unwrap()),
        ("triplet-only", "ranking".parse().unwrap()),
    ];
    let mut means = [0.0; 3];
    for seed in 0..3u64 {
        let index = synthetic(16, Difficulty::HARD, seed)?;
        for (i, (_, branches)) in variants.iter().enumerate() {
            means[i] += desk_run(&index, *branches, seed, None)?.map / 3.0;
        }
    }
    let summary = format!(
        "mean mAP over 3 seeds: full {:.4}, global-only {:.4}, triplet-only {:.4}",
        means[0], means[1], means[2]
    );
    ensure!(means[0] >= means[1] && means[0] >= means[2], "{summary}");
    Ok(summary)
}

fn criterion_8(first: &Path, second: &Path) -> Outcome {
    let index = synthetic(8, Difficulty::EASY, 0)?;
    desk_run(&index, Branches::ALL, 0, Some(second))?;
    for name in [METRICS_LOG, LATEST_CHECKPOINT] {
        let a = fs::read(first.join(name)).map_err(|e| format!("{name}: {e}"))?;
        let b = fs::read(second.join(name)).map_err(|e| format!("{name}: {e}"))?;
        ensure!(a == b, "{name} differs between runs");
    }
    Ok("metrics.log and latest.ckpt are byte-identical across two runs".into())
}

fn main() {
    let dirs = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (first, second) = (dirs.0.path().to_path_buf(), dirs.1.path().to_path_buf());
    let criteria: Vec<(&str, Criterion)> = vec![
        ("triplet oracle", Box::new(criterion_1)),
        ("retrieval metric oracle", Box::new(criterion_2)),
        ("gradient checks", Box::new(criterion_3)),
        ("analytic loss values", Box::new(criterion_4)),
        ("configuration audit", Box::new(criterion_5)),
        ("desk-scale learning", Box::new(move || criterion_6(&first))),
        ("ablation direction", Box::new(criterion_7)),
        (
            "determinism",
            Box::new({
                let (a, b) = (dirs.0.path().to_path_buf(), second.clone());
                move || criterion_8(&a, &b)
            }),
        ),
    ];
    let mut failed = 0;
    for (n, (name, run)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", n + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail})", n + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
