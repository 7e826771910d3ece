//! Joint optimization of the detector and held-out evaluation.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::geometry_labels::{make_geometry_maps, outer_rectangle_of_polygon, GeometryMaps};
use crate::grouping::{evaluate, EvalReport};
use crate::hrgn::{assign_instances, hrgn_forward, link_labels, loss_linkage, GraphBatch, ImageProposals};
use crate::losses::{loss_cls, loss_reg, loss_stroke, LossParts, LossWeights};
use crate::model::{stroke_crop, Detection, Model};
use crate::params::{clip_grad_norm, seeded_rng, Bound, Optimizer, OptimizerConfig};
use crate::proposal_graph::{extract_text_proposals, shrink_to_stroke_proposals};
use crate::sapn::{backbone_forward, ota_cells, text_head_forward};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub steps: usize,
    pub optimizer: OptimizerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Required square side of every training image.
    pub input_size: usize,
    pub phase1: Phase,
    /// Runs after `phase1` with fresh optimizer state; zero steps skips it.
    pub phase2: Phase,
    pub flip_prob: f64,
    pub seed: u64,
    pub clip_norm: f64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            input_size: 128,
            phase1: Phase {
                steps: 1200,
                optimizer: OptimizerConfig::Adam {
                    lr: 2e-3,
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                },
            },
            phase2: Phase {
                steps: 0,
                optimizer: OptimizerConfig::Sgd {
                    lr: 0.03,
                    momentum: 0.9,
                    decay: 0.5,
                    decay_every: 100,
                },
            },
            flip_prob: 0.5,
            seed: 0,
            clip_norm: 5.0,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.phase1.steps + self.phase2.steps
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub phase: usize,
    pub lr: f64,
    pub losses: LossParts,
    pub total: f64,
    pub grad_norm: f64,
}

/// Losses of one batch on a tape, returning the differentiable total and
/// the unweighted parts.
pub fn batch_loss<'t>(
    model: &Model,
    p: &Bound<'t, '_>,
    batch: &[Sample],
    weights: &LossWeights,
    rng: &mut ChaCha8Rng,
) -> Result<(Var<'t>, LossParts)> {
    let tape = p.get("backbone.0.weight").tape();
    let first = batch.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (w, h) = (first.width, first.height);
    if batch.iter().any(|s| s.width != w || s.height != h) {
        return Err(Error::Shape("batch images differ in size".into()));
    }
    let mut pixels = Vec::with_capacity(batch.len() * 3 * w * h);
    for s in batch {
        pixels.extend(s.planar());
    }
    let image = tape.constant(Tensor::new([batch.len(), 3, h, w], pixels));
    let gt: Vec<GeometryMaps> = batch
        .iter()
        .map(|s| make_geometry_maps(&s.instances, w, h, &model.cfg.labels).0)
        .collect();

    let sapn = &model.cfg.sapn;
    let feats = backbone_forward(p, sapn, image)?;
    let raw = text_head_forward(p, sapn, feats);
    let (ta, tca) = loss_cls(raw, &gt);
    let reg = loss_reg(raw, &gt);
    let mut parts = LossParts {
        ta: ta.item(),
        tca: tca.item(),
        sin: reg.sin.item(),
        cos: reg.cos.item(),
        h: reg.h.item(),
        ..LossParts::default()
    };
    let mut total = ta
        .scale(weights.ta)
        .add(tca.scale(weights.tca))
        .add(reg.sin.add(reg.cos).scale(weights.angle))
        .add(reg.h);

    if model.ablation.uses_stroke_head() {
        let (mse, ssim) = stroke_losses(model, p, feats, image, batch)?;
        if let Some((mse, ssim)) = mse.zip(ssim) {
            parts.mse = mse.item();
            parts.ssim = ssim.item();
            total = total.add(mse.scale(weights.mse)).add(ssim.scale(weights.ssim));
        }
    }

    if model.ablation.uses_graph() {
        if let Some(link) = linkage_loss(model, p, feats, batch, &gt, rng)? {
            parts.link = link.item();
            total = total.add(link.scale(weights.link));
        }
    }
    Ok((total, parts))
}

type StrokeLosses<'t> = (Option<Var<'t>>, Option<Var<'t>>);

fn stroke_losses<'t>(
    model: &Model,
    p: &Bound<'t, '_>,
    feats: Var<'t>,
    image: Var<'t>,
    batch: &[Sample],
) -> Result<StrokeLosses<'t>> {
    let s = model.cfg.sapn.stride();
    let fs = feats.shape();
    let mut mse_sum: Option<Var<'t>> = None;
    let mut ssim_sum: Option<Var<'t>> = None;
    let mut count = 0usize;
    for (n, sample) in batch.iter().enumerate() {
        let mask = sample
            .stroke_mask
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{}: stroke supervision needs a stroke mask", sample.name)))?;
        for ann in &sample.instances {
            let Ok(rect) = outer_rectangle_of_polygon(&ann.polygon) else {
                continue;
            };
            let Ok(cells) = ota_cells(&rect, s, fs[2], fs[3]) else {
                continue;
            };
            let pred = stroke_crop(p, &model.cfg.sapn, feats, image, n, cells)?;
            let (y0, y1, x0, x1) = cells;
            let (ch, cw) = ((y1 - y0) * s, (x1 - x0) * s);
            let mut gt = Vec::with_capacity(ch * cw);
            for yy in y0 * s..y1 * s {
                for xx in x0 * s..x1 * s {
                    gt.push(if mask[yy * sample.width + xx] { 1.0 } else { 0.0 });
                }
            }
            let (mse, ssim) = loss_stroke(pred, &Tensor::new([1, 1, ch, cw], gt));
            mse_sum = Some(mse_sum.map_or(mse, |a| a.add(mse)));
            ssim_sum = Some(ssim_sum.map_or(ssim, |a| a.add(ssim)));
            count += 1;
        }
    }
    let inv = 1.0 / count.max(1) as f64;
    Ok((mse_sum.map(|v| v.scale(inv)), ssim_sum.map(|v| v.scale(inv))))
}

/// Training proposals of one image, read off its ground-truth maps.
pub fn training_proposals(model: &Model, sample: &Sample, gt: &GeometryMaps) -> ImageProposals {
    let pc = &model.cfg.proposals;
    let text = extract_text_proposals(gt, pc.ta_thresh, pc.tca_thresh, pc.stride_ratio);
    let strokes = match (&sample.stroke_mask, model.ablation.uses_stroke_graph()) {
        (Some(mask), true) => {
            let plane: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            shrink_to_stroke_proposals(&text, &plane, sample.width, sample.height, pc.stroke_shrink, pc.stroke_keep)
        }
        _ => Vec::new(),
    };
    ImageProposals {
        text,
        strokes,
        pivots: None,
    }
}

fn linkage_loss<'t>(
    model: &Model,
    p: &Bound<'t, '_>,
    feats: Var<'t>,
    batch: &[Sample],
    gt: &[GeometryMaps],
    rng: &mut ChaCha8Rng,
) -> Result<Option<Var<'t>>> {
    let cap = model.cfg.hrgn.max_train_pivots;
    let mut images = Vec::with_capacity(batch.len());
    let mut instances = Vec::with_capacity(batch.len());
    for (sample, maps) in batch.iter().zip(gt) {
        let mut props = training_proposals(model, sample, maps);
        if props.text.len() > cap {
            let mut idx: Vec<usize> = (0..props.text.len()).collect();
            idx.shuffle(rng);
            idx.truncate(cap);
            idx.sort_unstable();
            props.pivots = Some(idx);
        }
        instances.push(assign_instances(&props.text, &sample.instances));
        images.push(props);
    }
    let gb = GraphBatch::build(&images, &model.cfg.hrgn);
    let use_strokes = model.ablation.uses_stroke_graph();
    let Some(logits) = hrgn_forward(p, &model.cfg.hrgn, feats, model.cfg.sapn.stride(), &gb, use_strokes)? else {
        return Ok(None);
    };
    Ok(loss_linkage(logits, &link_labels(&gb, &instances)))
}

/// Trains `model` in place. `on_step` sees every log line; an error from
/// it stops training. A non-finite loss stops training before the update,
/// leaving the last good parameters in `model`.
pub fn train(
    model: &mut Model,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog) -> Result<()>,
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    if let Some(s) = samples
        .iter()
        .find(|s| s.width != cfg.input_size || s.height != cfg.input_size)
    {
        return Err(Error::Shape(format!(
            "{} is {}x{}, expected {}x{}",
            s.name, s.width, s.height, cfg.input_size, cfg.input_size
        )));
    }
    let mut rng = seeded_rng(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut logs = Vec::with_capacity(cfg.total_steps());
    let mut step = 0;
    for (phase, ph) in [(1, &cfg.phase1), (2, &cfg.phase2)] {
        let mut opt = Optimizer::new(ph.optimizer, &model.params);
        for _ in 0..ph.steps {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            while batch.len() < cfg.batch_size {
                if order.is_empty() {
                    order = (0..samples.len()).collect();
                    order.shuffle(&mut rng);
                    order.reverse();
                }
                let s = &samples[order.pop().expect("refilled")];
                batch.push(if rng.random::<f64>() < cfg.flip_prob {
                    s.flipped_horizontally()
                } else {
                    s.clone()
                });
            }
            let lr = opt.current_lr();
            let tape = Tape::new();
            let p = model.params.bind(&tape, true);
            let (total, losses) = batch_loss(model, &p, &batch, &cfg.weights, &mut rng)?;
            let total_value = losses.weighted_total(&cfg.weights);
            if !total.item().is_finite() || !total_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: serde_json::to_string(&losses).unwrap_or_default(),
                });
            }
            let grads = tape.backward(total);
            let mut g = model.params.collect_grads(&p, &grads);
            drop(p);
            let grad_norm = clip_grad_norm(&mut g, cfg.clip_norm);
            if !grad_norm.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: "non-finite gradient norm".into(),
                });
            }
            opt.step(&mut model.params, &g);
            let log = StepLog {
                step,
                phase,
                lr,
                losses,
                total: total_value,
                grad_norm,
            };
            on_step(&log)?;
            logs.push(log);
            step += 1;
        }
    }
    Ok(logs)
}

/// Detections for every sample and the pooled report at `iou_thresh`.
pub fn evaluate_model(model: &Model, samples: &[Sample], iou_thresh: f64) -> Result<(EvalReport, Vec<Detection>)> {
    let dets: Vec<Detection> = samples
        .par_iter()
        .map(|s| model.detect(s))
        .collect::<Result<_>>()?;
    let reports: Vec<EvalReport> = dets
        .iter()
        .zip(samples)
        .map(|(d, s)| evaluate(&d.instances, &s.instances, iou_thresh))
        .collect();
    Ok((EvalReport::pooled(&reports), dets))
}
