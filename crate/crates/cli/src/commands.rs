use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use strokenet::dataset::{generate_dataset, Dataset, Manifest, Sample};
use strokenet::geometry::Point;
use strokenet::grouping::{evaluate_polygons, EvalReport};
use strokenet::model::{Ablation, Detection, Model};
use strokenet::train::{evaluate_model, train as train_model, StepLog};
use strokenet::Error;

use crate::config::{load_experiment, load_toml, ExperimentConfig, GenerateConfig};
use crate::manifest::RunManifest;
use crate::render;

pub const CHECKPOINT_FILE: &str = "checkpoint.snck";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const DETECTIONS_FILE: &str = "detections.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_FIGURE: &str = "ablation.svg";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_samples(dir: &Path) -> Result<Vec<Sample>> {
    let ds = Dataset::open(dir)?;
    if ds.is_empty() {
        bail!("{}: dataset is empty", dir.display());
    }
    Ok(ds.load_all()?)
}

pub fn generate(config: &Path, count: usize, out: &Path, seed: u64) -> Result<Manifest> {
    let cfg: GenerateConfig = load_toml(config)?;
    let run = RunManifest::start("generate", Some(config), seed, out);
    let manifest = generate_dataset(&cfg.subset, count, seed, out)?;
    run.finish()?;
    Ok(manifest)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub logs: Vec<StepLog>,
}

/// Trains one ablation and writes its checkpoint and log into `out`. A
/// non-finite loss still saves the last good parameters before failing.
pub fn train_into(samples: &[Sample], cfg: &ExperimentConfig, ablation: Ablation, out: &Path) -> Result<TrainOutcome> {
    create_dir(out)?;
    let log_path = out.join(LOG_FILE);
    let mut log = std::io::BufWriter::new(
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    let mut model = Model::new(cfg.model.clone(), ablation, cfg.train.seed)?;
    let result = train_model(&mut model, samples, &cfg.train, |step| {
        let line = serde_json::to_string(step).expect("log serializes");
        writeln!(log, "{line}").map_err(|e| Error::Io {
            path: log_path.clone(),
            source: e,
        })
    });
    log.flush().with_context(|| format!("writing {}", log_path.display()))?;
    let steps = result.as_ref().map_or(0, Vec::len);
    let extra = serde_json::json!({ "seed": cfg.train.seed, "steps": steps, "train": cfg.train });
    model.save(&out.join(CHECKPOINT_FILE), extra)?;
    match result {
        Ok(logs) => Ok(TrainOutcome { model, logs }),
        Err(e @ Error::NonFiniteLoss { .. }) => {
            bail!("{e}; last good parameters saved to {}", out.join(CHECKPOINT_FILE).display())
        }
        Err(e) => Err(e.into()),
    }
}

pub fn train(data: &Path, config: Option<&Path>, ablation: Ablation, out: &Path) -> Result<TrainOutcome> {
    let cfg = load_experiment(config)?;
    let samples = load_samples(data)?;
    let run = RunManifest::start("train", config, cfg.train.seed, out);
    let outcome = train_into(&samples, &cfg, ablation, out)?;
    run.finish()?;
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub polygon: Vec<[f64; 2]>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image: String,
    pub detections: Vec<DetectionRecord>,
}

pub fn detection_records(samples: &[Sample], dets: &[Detection]) -> Vec<ImageDetections> {
    samples
        .iter()
        .zip(dets)
        .map(|(s, d)| ImageDetections {
            image: s.name.clone(),
            detections: d
                .instances
                .iter()
                .map(|i| DetectionRecord {
                    polygon: i.polygon.iter().map(|p| [p.x, p.y]).collect(),
                    score: i.score,
                })
                .collect(),
        })
        .collect()
}

/// Pooled metrics of detection records against the samples they name.
pub fn score_detections(records: &[ImageDetections], samples: &[Sample], iou: f64) -> Result<EvalReport> {
    let reports = samples
        .iter()
        .map(|s| {
            let preds: Vec<Vec<Point>> = records
                .iter()
                .filter(|r| r.image == s.name)
                .flat_map(|r| &r.detections)
                .map(|d| d.polygon.iter().map(|&[x, y]| Point::new(x, y)).collect())
                .collect();
            let gts: Vec<Vec<Point>> = s.instances.iter().map(|a| a.polygon.clone()).collect();
            evaluate_polygons(&preds, &gts, iou)
        })
        .collect::<Vec<_>>();
    if let Some(r) = records.iter().find(|r| !samples.iter().any(|s| s.name == r.image)) {
        bail!("detections reference unknown image {}", r.image);
    }
    Ok(EvalReport::pooled(&reports))
}

/// `{precision, recall, hmean}` with six fixed decimals.
pub fn metrics_json(r: &EvalReport) -> String {
    format!(
        "{{\n  \"precision\": {:.6},\n  \"recall\": {:.6},\n  \"hmean\": {:.6}\n}}\n",
        r.precision, r.recall, r.hmean
    )
}

pub fn eval(checkpoint: &Path, data: &Path, out: &Path, overlays: bool, iou: f64) -> Result<EvalReport> {
    let model = Model::load(checkpoint, None)?;
    let samples = load_samples(data)?;
    let run = RunManifest::start("eval", None, 0, out);
    create_dir(out)?;
    let (_, dets) = evaluate_model(&model, &samples, iou)?;
    let records = detection_records(&samples, &dets);
    let report = score_detections(&records, &samples, iou)?;
    let det_path = out.join(DETECTIONS_FILE);
    fs::write(&det_path, serde_json::to_string_pretty(&records)? + "\n")
        .with_context(|| format!("writing {}", det_path.display()))?;
    let met_path = out.join(METRICS_FILE);
    fs::write(&met_path, metrics_json(&report)).with_context(|| format!("writing {}", met_path.display()))?;
    if overlays {
        let dir = out.join("overlays");
        create_dir(&dir)?;
        for (k, (s, d)) in samples.iter().zip(&dets).enumerate() {
            let path = dir.join(format!("{k:06}.png"));
            render::overlay(s, d)
                .save(&path)
                .with_context(|| format!("writing {}", path.display()))?;
        }
    }
    run.finish()?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: String,
    pub recall: f64,
    pub precision: f64,
    pub hmean: f64,
}

/// Training and evaluation splits for `ablate`: a separate directory, or
/// the last `holdout` samples of the training directory.
pub fn split(data: &Path, eval_data: Option<&Path>, holdout: usize) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut train = load_samples(data)?;
    let test = match eval_data {
        Some(dir) => load_samples(dir)?,
        None => {
            if holdout == 0 || holdout >= train.len() {
                bail!("holdout {holdout} must be in 1..{}", train.len());
            }
            train.split_off(train.len() - holdout)
        }
    };
    Ok((train, test))
}

pub fn ablate_samples(train: &[Sample], test: &[Sample], cfg: &ExperimentConfig, out: &Path, iou: f64) -> Result<Vec<AblationRow>> {
    create_dir(out)?;
    let mut rows = Vec::new();
    for ab in Ablation::ALL {
        let outcome = train_into(train, cfg, ab, &out.join(ab.key()))?;
        let (r, _) = evaluate_model(&outcome.model, test, iou)?;
        log::info!("{ab}: recall {:.4} precision {:.4} hmean {:.4}", r.recall, r.precision, r.hmean);
        rows.push(AblationRow {
            ablation: ab.label().into(),
            recall: r.recall,
            precision: r.precision,
            hmean: r.hmean,
        });
    }
    let csv_path = out.join(ABLATION_CSV);
    let mut w = csv::Writer::from_path(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?;
    let header = ["ablation", "recall", "precision", "hmean"].map(String::from);
    for rec in std::iter::once(header).chain(rows.iter().map(|r| {
        [
            r.ablation.clone(),
            format!("{:.6}", r.recall),
            format!("{:.6}", r.precision),
            format!("{:.6}", r.hmean),
        ]
    })) {
        w.write_record(&rec)
            .map_err(|e| anyhow::anyhow!("writing {}: {e}", csv_path.display()))?;
    }
    w.flush().with_context(|| format!("writing {}", csv_path.display()))?;
    render::ablation_figure(&rows, &out.join(ABLATION_FIGURE))?;
    Ok(rows)
}

pub struct AblateArgs<'a> {
    pub data: &'a Path,
    pub eval_data: Option<&'a Path>,
    pub holdout: usize,
    pub config: Option<&'a Path>,
    pub out: &'a Path,
    pub iou: f64,
}

pub fn ablate(args: &AblateArgs<'_>) -> Result<Vec<AblationRow>> {
    let cfg = load_experiment(args.config)?;
    let (train, test) = split(args.data, args.eval_data, args.holdout)?;
    let run = RunManifest::start("ablate", args.config, cfg.train.seed, args.out);
    let rows = ablate_samples(&train, &test, &cfg, args.out, args.iou)?;
    run.finish()?;
    Ok(rows)
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(CHECKPOINT_FILE)
}
