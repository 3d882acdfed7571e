//! The five subcommands. Each takes its resolved section and writes into its `out` directory.

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::config::{parse_variants, EvalSection, ScoreSection, SynthConfig, ToySection, TrainSection};
use crate::data::manifest::{self, LoadedScene, TOY_FILE};
use crate::data::pnm::{read_pgm, write_pgm, GrayImage};
use crate::data::scene::distance_map;
use crate::data::{gen_negative_patches, gen_scenes, gen_toy2d, MixedSource, SceneSample};
use crate::error::{Error, Result};
use crate::experiments::{median, run_toy_seed, score_maps, ScoreVariant};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::math::{class_posterior, AnomalyScoreMap};
use crate::metrics::report::{bin_label, write_rows, MetricRow};
use crate::metrics::{
    auroc, average_precision, closed_miou, fpr_at_tpr, fuse_labels, range_binned, two_fold_open_eval, FoldImage,
    OpenConfusionMatrix, ScoredPixelSet,
};
use crate::nn::{checkpoint, forward, train, Checkpoint, EpochLog, ModelParams, SampleSource, TrainProgress};
use crate::raster::ScoreRaster;

pub const CHECKPOINT_FILE: &str = "checkpoint.dhck";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TOY_REPORT_FILE: &str = "report.csv";
pub const TOY_POINTS_FILE: &str = "points.csv";

/// Everything `synth` may create; `force` removes only these.
const SYNTH_ENTRIES: [&str; 10] = [
    "images",
    "labels",
    "masks",
    "distance",
    "negatives",
    manifest::MANIFEST_FILE,
    manifest::NEGATIVES_FILE,
    TOY_FILE,
    super::config::RESOLVED_CONFIG_FILE,
    super::config::PROVENANCE_FILE,
];

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn prepare_synth_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let occupied = fs::read_dir(out)?.next().is_some();
        if occupied && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                out.display()
            )));
        }
        for entry in SYNTH_ENTRIES {
            let p = out.join(entry);
            if p.is_dir() {
                fs::remove_dir_all(&p)?;
            } else if p.exists() {
                fs::remove_file(&p)?;
            }
        }
    }
    fs::create_dir_all(out)?;
    Ok(())
}

fn outlier_fraction(samples: &[SceneSample]) -> f64 {
    let (mut outliers, mut total) = (0usize, 0usize);
    for s in samples {
        outliers += s.labels.count(s.labels.outlier_label());
        total += s.labels.values().len();
    }
    if total == 0 {
        0.0
    } else {
        outliers as f64 / total as f64
    }
}

pub fn cmd_synth(cfg: &SynthConfig) -> Result<()> {
    let scenes = cfg.scenes();
    scenes.validate()?;
    let splits = gen_scenes(cfg.seed, &scenes)?;
    let negatives = gen_negative_patches(cfg.seed, &scenes)?;
    let (toy_train, toy_test) = gen_toy2d(cfg.seed, cfg.toy_per_role)?;
    let distance = distance_map(scenes.image_size, scenes.image_size);
    prepare_synth_dir(&cfg.out, cfg.force)?;
    manifest::write_scenes(
        &cfg.out,
        &[("train", &splits.train), ("val", &splits.val), ("test", &splits.test)],
        Some(&distance),
    )?;
    manifest::write_negatives(&cfg.out, &negatives)?;
    manifest::write_toy(&cfg.out.join(TOY_FILE), &toy_train, &toy_test)?;

    for (name, samples) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        println!(
            "{name}: {} images, outlier pixel fraction {:.4}",
            samples.len(),
            outlier_fraction(samples)
        );
    }
    println!("negatives: {} patches", negatives.len());
    println!("toy: {} train points, {} test points", toy_train.len(), toy_test.len());
    Ok(())
}

#[derive(Serialize)]
struct TrainLogRow {
    epoch: u64,
    step: u64,
    lr: f64,
    skipped: u64,
    cls: f64,
    posterior_in: f64,
    /// Weighted by beta, so the four terms sum to `total`.
    posterior_out: f64,
    likelihood_out: f64,
    total: f64,
}

fn save_atomic(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    checkpoint::save(&tmp, ckpt)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn cmd_train(cfg: &TrainSection) -> Result<()> {
    let tcfg = cfg.train();
    tcfg.validate()?;
    let augment = cfg.augment();
    augment.validate()?;
    let scenes: Vec<SceneSample> = manifest::load_split(&cfg.data, "train", cfg.num_classes)?
        .into_iter()
        .map(|s| s.sample)
        .collect();
    let first = scenes
        .first()
        .ok_or_else(|| Error::Data(format!("no train split in {}", cfg.data.display())))?;
    let network = cfg.network(first.image.channels());
    let negatives = manifest::read_negatives(&cfg.data)?;
    if negatives.is_empty() && cfg.beta > 0.0 {
        log::warn!("no negatives in {}; outlier terms stay empty", cfg.data.display());
    }
    let source = MixedSource::new(&scenes, &negatives, augment)?;

    let (mut params, mut progress) = match &cfg.resume {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            if ckpt.params.config() != &network {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with {:?}, config asks for {:?}",
                    path.display(),
                    ckpt.params.config(),
                    network
                )));
            }
            let mut progress = ckpt
                .progress
                .ok_or_else(|| Error::Config(format!("checkpoint {} has no training state", path.display())))?;
            let schedule = tcfg.schedule(source.len());
            if progress.optimizer.schedule != schedule {
                log::warn!("learning-rate schedule differs from the checkpoint; using the configured one");
                progress.optimizer.schedule = schedule;
            }
            (ckpt.params, progress)
        }
        None => {
            let params = ModelParams::init(network)?;
            let progress = TrainProgress::new(&params, &tcfg, source.len());
            (params, progress)
        }
    };

    fs::create_dir_all(&cfg.out)?;
    let ckpt_path = cfg.out.join(CHECKPOINT_FILE);
    let log_path = cfg.out.join(TRAIN_LOG_FILE);
    let mut rows = Vec::new();
    let result = train(&mut params, &mut progress, &source, &tcfg, |log: &EpochLog, p, prog| {
        rows.push(TrainLogRow {
            epoch: log.epoch,
            step: prog.optimizer.step,
            lr: log.lr,
            skipped: log.skipped,
            cls: log.loss.cls,
            posterior_in: log.loss.posterior_in,
            posterior_out: cfg.beta * log.loss.posterior_out,
            likelihood_out: cfg.beta * log.loss.likelihood_out,
            total: log.loss.total,
        });
        write_csv(&log_path, &rows)?;
        save_atomic(
            &ckpt_path,
            &Checkpoint {
                params: p.clone(),
                progress: Some(prog.clone()),
            },
        )
    });
    if let Err(e) = result {
        if matches!(e, Error::NonFinite(_)) {
            if rows.is_empty() {
                log::error!("training diverged before the first epoch finished; no checkpoint written");
            } else {
                log::error!(
                    "training diverged; {} holds the state after epoch {}",
                    ckpt_path.display(),
                    progress.epochs_done
                );
            }
        }
        return Err(e);
    }
    // Also covers the no-op case of resuming a finished run.
    write_csv(&log_path, &rows)?;
    save_atomic(
        &ckpt_path,
        &Checkpoint {
            params,
            progress: Some(progress.clone()),
        },
    )?;
    println!(
        "trained {} epochs ({} steps); checkpoint {}",
        progress.epochs_done,
        progress.optimizer.step,
        ckpt_path.display()
    );
    Ok(())
}

fn scene_rows(data: &Path, split: &str) -> Result<Vec<manifest::ManifestRow>> {
    let rows: Vec<_> = manifest::read_manifest(data)?
        .into_iter()
        .filter(|r| split == "all" || r.split == split)
        .collect();
    if rows.is_empty() {
        return Err(Error::Data(format!("split {split:?} is empty in {}", data.display())));
    }
    Ok(rows)
}

fn raster_path(dir: &Path, name: &str, v: ScoreVariant) -> std::path::PathBuf {
    dir.join(format!("{name}.{}.dhsc", v.name()))
}

fn closed_path(dir: &Path, name: &str) -> std::path::PathBuf {
    dir.join(format!("{name}.closed.pgm"))
}

fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    write_pgm(
        path,
        &GrayImage::new(labels.height(), labels.width(), labels.values().to_vec())?,
    )
}

pub fn cmd_score(cfg: &ScoreSection) -> Result<()> {
    let variants = parse_variants(&cfg.score)?;
    let ckpt = checkpoint::load(&cfg.checkpoint)?;
    let params = ckpt.params;
    let k = params.config().num_classes;
    if k != cfg.num_classes {
        return Err(Error::Config(format!(
            "checkpoint has {k} classes, config says {}",
            cfg.num_classes
        )));
    }
    let rows = scene_rows(&cfg.data, &cfg.split)?;
    fs::create_dir_all(&cfg.out)?;
    for row in &rows {
        let scene = manifest::load_row(&cfg.data, row, k)?;
        let s = &scene.sample;
        if s.image.channels() != params.config().input_channels {
            return Err(Error::Data(format!(
                "{} has {} channels, the model expects {}",
                row.image,
                s.image.channels(),
                params.config().input_channels
            )));
        }
        let out = forward(&params, &s.image.to_tensor())?
            .pop()
            .ok_or_else(|| Error::contract("forward returned no outputs"))?;
        let closed = LabelMap::new(s.height(), s.width(), k, class_posterior(&out.logits).argmax())?;
        write_labels(&closed_path(&cfg.out, &scene.name), &closed)?;
        let maps = score_maps(&out)?;
        for &v in &variants {
            let map = maps.get(v);
            ScoreRaster::from_f64(map.height(), map.width(), map.values())?.write(&raster_path(
                &cfg.out,
                &scene.name,
                v,
            ))?;
            if let Some(tau) = cfg.tau {
                let open = fuse_labels(&closed, map, tau)?;
                write_labels(&cfg.out.join(format!("{}.{}.open.pgm", scene.name, v.name())), &open)?;
            }
        }
    }
    println!("scored {} images into {}", rows.len(), cfg.out.display());
    Ok(())
}

struct EvalImage {
    scene: LoadedScene,
    closed: LabelMap,
    scores: Vec<AnomalyScoreMap>,
}

fn load_eval_image(cfg: &EvalSection, row: &manifest::ManifestRow, variants: &[ScoreVariant]) -> Result<EvalImage> {
    let scene = manifest::load_row(&cfg.data, row, cfg.num_classes)?;
    let (h, w) = (scene.sample.height(), scene.sample.width());
    let closed_raw = read_pgm(&closed_path(&cfg.scores, &scene.name))?;
    if (closed_raw.height, closed_raw.width) != (h, w) {
        return Err(Error::Data(format!(
            "closed prediction of {} has the wrong size",
            scene.name
        )));
    }
    let closed = LabelMap::new(h, w, cfg.num_classes, closed_raw.values)?;
    let scores = variants
        .iter()
        .map(|&v| {
            let r = ScoreRaster::read(&raster_path(&cfg.scores, &scene.name, v))?;
            if (r.height, r.width) != (h, w) {
                return Err(Error::Data(format!(
                    "{} scores of {} have the wrong size",
                    v.name(),
                    scene.name
                )));
            }
            AnomalyScoreMap::new(h, w, r.to_f64())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalImage { scene, closed, scores })
}

/// Non-IGNORE pixels with their distances, matching [`ScoredPixelSet::from_map`].
fn pixel_set(im: &EvalImage, j: usize) -> Result<ScoredPixelSet> {
    let set = ScoredPixelSet::from_map(&im.scores[j], &im.scene.sample.labels)?;
    match &im.scene.distance {
        Some(d) => {
            let kept = d
                .iter()
                .zip(im.scene.sample.labels.values())
                .filter(|(_, &l)| l != IGNORE_LABEL)
                .map(|(&d, _)| d)
                .collect();
            set.with_distance(kept)
        }
        None => Ok(set),
    }
}

pub fn eval_rows(cfg: &EvalSection) -> Result<Vec<MetricRow>> {
    let variants = parse_variants(&cfg.score)?;
    let mut images = scene_rows(&cfg.data, &cfg.split)?
        .iter()
        .map(|r| load_eval_image(cfg, r, &variants))
        .collect::<Result<Vec<_>>>()?;
    // Sorting by name makes the report independent of manifest order.
    images.sort_by(|a, b| a.scene.name.cmp(&b.scene.name));
    let split = cfg.split.as_str();
    let mut rows = Vec::new();

    let mut cm = OpenConfusionMatrix::new(cfg.num_classes);
    for im in &images {
        cm.add(&im.closed, &im.scene.sample.labels)?;
    }
    rows.push(MetricRow::new(
        split,
        "closed:mIoU",
        "",
        closed_miou(&cm).map(|r| r.mean),
    ));

    let with_distance = images.iter().all(|im| im.scene.distance.is_some());
    for (j, v) in variants.iter().enumerate() {
        let name = v.name();
        let parts = images.iter().map(|im| pixel_set(im, j)).collect::<Result<Vec<_>>>()?;
        let set = ScoredPixelSet::concat(&parts)?;
        let calib = fpr_at_tpr(&set, cfg.target_tpr);
        rows.push(MetricRow::new(
            split,
            &format!("{name}:AP"),
            "",
            average_precision(&set),
        ));
        rows.push(MetricRow::new(split, &format!("{name}:AUROC"), "", auroc(&set)));
        rows.push(MetricRow::new(
            split,
            &format!("{name}:FPR95"),
            "",
            calib.as_ref().map(|c| c.fpr).map_err(clone_err),
        ));
        rows.push(MetricRow::new(
            split,
            &format!("{name}:tau95"),
            "",
            calib.map(|c| c.tau),
        ));

        if cfg.two_fold {
            let folds: Vec<FoldImage> = images
                .iter()
                .map(|im| FoldImage {
                    closed: im.closed.clone(),
                    scores: im.scores[j].clone(),
                    gt: im.scene.sample.labels.clone(),
                })
                .collect();
            let (a, b): (Vec<_>, Vec<_>) = folds.into_iter().enumerate().partition(|(i, _)| i % 2 == 0);
            let a: Vec<FoldImage> = a.into_iter().map(|(_, f)| f).collect();
            let b: Vec<FoldImage> = b.into_iter().map(|(_, f)| f).collect();
            let result = if b.is_empty() {
                Err(Error::Undefined("two folds need at least two images".into()))
            } else {
                two_fold_open_eval(&a, &b, cfg.target_tpr)
            };
            let part = |f: fn(&crate::metrics::TwoFoldResult) -> f64| result.as_ref().map(f).map_err(clone_err);
            rows.push(MetricRow::new(
                split,
                &format!("{name}:open_mIoU"),
                "",
                part(|r| r.open_miou),
            ));
            rows.push(MetricRow::new(
                split,
                &format!("{name}:open_mIoU_foldA"),
                "",
                part(|r| r.score_a),
            ));
            rows.push(MetricRow::new(
                split,
                &format!("{name}:open_mIoU_foldB"),
                "",
                part(|r| r.score_b),
            ));
        }

        if with_distance && !cfg.bin_edges.is_empty() {
            match range_binned(&set, &cfg.bin_edges, cfg.target_tpr) {
                Ok(bins) => {
                    for bin in bins {
                        let label = bin_label(bin.lo, bin.hi);
                        let why =
                            || Error::Undefined(format!("{} positives, {} negatives", bin.positives, bin.negatives));
                        rows.push(MetricRow::new(
                            split,
                            &format!("{name}:AP"),
                            &label,
                            bin.ap.ok_or_else(why),
                        ));
                        rows.push(MetricRow::new(
                            split,
                            &format!("{name}:FPR95"),
                            &label,
                            bin.fpr95.map(|c| c.fpr).ok_or_else(why),
                        ));
                    }
                }
                Err(e) => rows.push(MetricRow::new(split, &format!("{name}:binned"), "", Err(e))),
            }
        }
    }
    Ok(rows)
}

/// Metric errors are rendered into rows; only their text is needed.
fn clone_err(e: &Error) -> Error {
    match e {
        Error::Undefined(s) => Error::Undefined(s.clone()),
        other => Error::Data(other.to_string()),
    }
}

pub fn cmd_eval(cfg: &EvalSection) -> Result<()> {
    let rows = eval_rows(cfg)?;
    fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join(METRICS_FILE);
    write_rows(fs::File::create(&path)?, &rows)?;
    for r in rows.iter().filter(|r| r.bin.is_empty()) {
        match r.value {
            Some(v) => println!("{:<28} {v:.4}", r.metric),
            None => println!("{:<28} {}", r.metric, r.status),
        }
    }
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct ToyReportRow {
    seed: u64,
    variant: &'static str,
    auroc: f64,
    ap: f64,
    auroc_unseen: f64,
}

#[derive(Serialize)]
struct ToyPointRow {
    seed: u64,
    x: f64,
    y: f64,
    role: String,
    score_variant: &'static str,
    value: f64,
}

pub fn cmd_toy(cfg: &ToySection) -> Result<()> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("toy needs at least one seed".into()));
    }
    let bench = cfg.bench();
    let mut report = Vec::new();
    let mut points = Vec::new();
    for &seed in &cfg.seeds {
        let r = run_toy_seed(seed, &bench)?;
        for m in &r.metrics {
            report.push(ToyReportRow {
                seed,
                variant: m.variant.name(),
                auroc: m.auroc,
                ap: m.ap,
                auroc_unseen: m.auroc_unseen,
            });
        }
        for (p, s) in r.test.points.iter().zip(&r.scores) {
            for (j, v) in ScoreVariant::ALL.iter().enumerate() {
                points.push(ToyPointRow {
                    seed,
                    x: p.x,
                    y: p.y,
                    role: manifest::role_name(p.role),
                    score_variant: v.name(),
                    value: s[j],
                });
            }
        }
        log::info!("toy seed {seed} done");
    }
    fs::create_dir_all(&cfg.out)?;
    write_csv(&cfg.out.join(TOY_REPORT_FILE), &report)?;
    write_csv(&cfg.out.join(TOY_POINTS_FILE), &points)?;
    for v in ScoreVariant::ALL {
        let of = |f: fn(&ToyReportRow) -> f64| {
            median(
                &report
                    .iter()
                    .filter(|r| r.variant == v.name())
                    .map(f)
                    .collect::<Vec<_>>(),
            )
        };
        println!(
            "{:<15} median AUROC {:.4}  AP {:.4}  unseen AUROC {:.4}",
            v.name(),
            of(|r| r.auroc),
            of(|r| r.ap),
            of(|r| r.auroc_unseen)
        );
    }
    Ok(())
}
