//! The assembled detector: parameter layout per ablation, checkpoints and
//! the inference pipeline from pixels to text polygons.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::geometry_labels::{outer_rectangle, GeometryMaps, LabelConfig};
use crate::grouping::{accept_links, group_bfs, order_min_path, reconstruct_boundary_extended, TextInstance};
use crate::hrgn::{hrgn_forward, GraphBatch, HrgnConfig, ImageProposals};
use crate::params::{load_checkpoint, save_checkpoint, seeded_rng, Bound, ParamStore};
use crate::proposal_graph::{
    boundary_filter, connected_components, extract_text_proposals, extract_text_proposals_grouped, nms,
    shrink_to_stroke_proposals, Proposal, ProposalConfig,
};
use crate::sapn::{backbone_forward, decode_head, ota_cells, scf_forward, text_head_forward, tfd_forward, SapnConfig};
use crate::tensor::Tensor;

/// Which sub-systems are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Text-level prediction only.
    Tlp,
    /// Text- and stroke-level prediction.
    TlpSlp,
    /// Text-level prediction with text-only graphs.
    TlpTg,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Tlp, Ablation::TlpSlp, Ablation::TlpTg, Ablation::Full];

    pub fn uses_stroke_head(self) -> bool {
        matches!(self, Ablation::TlpSlp | Ablation::Full)
    }

    pub fn uses_graph(self) -> bool {
        matches!(self, Ablation::TlpTg | Ablation::Full)
    }

    pub fn uses_stroke_graph(self) -> bool {
        self == Ablation::Full
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Tlp => "TLP",
            Ablation::TlpSlp => "TLP+SLP",
            Ablation::TlpTg => "TLP+TG*",
            Ablation::Full => "FULL",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Ablation::Tlp => "tlp",
            Ablation::TlpSlp => "tlp_slp",
            Ablation::TlpTg => "tlp_tg",
            Ablation::Full => "full",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Linkage probability needed to join a pivot and a neighbor.
    pub link_thresh: f64,
    /// Extra extent added at each end of a reconstructed boundary, as a
    /// fraction of the end node's height.
    pub end_extension: f64,
    /// Smallest text-area component, in pixels, given a stroke prediction.
    pub min_ota_pixels: usize,
    /// Instances with fewer nodes are dropped.
    pub min_nodes: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            link_thresh: 0.5,
            end_extension: 0.5,
            min_ota_pixels: 4,
            min_nodes: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub sapn: SapnConfig,
    pub hrgn: HrgnConfig,
    pub proposals: ProposalConfig,
    pub labels: LabelConfig,
    pub inference: InferenceConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.hrgn.validate()?;
        if self.sapn.stride() == 0 {
            return Err(Error::Config("backbone strides must be positive".into()));
        }
        Ok(())
    }
}

/// Hex SHA-256 of the canonical JSON of a configuration and ablation.
pub fn config_hash(cfg: &ModelConfig, ablation: Ablation) -> String {
    let body = serde_json::to_string(&(cfg, ablation)).expect("config serializes");
    let digest = Sha256::digest(body.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub ablation: Ablation,
    pub params: ParamStore,
}

/// Inference result for one image.
#[derive(Clone, Debug)]
pub struct Detection {
    pub instances: Vec<TextInstance>,
    pub maps: GeometryMaps,
    /// Full-image stroke probabilities; zero outside predicted text areas.
    pub stroke_map: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    ablation: Ablation,
    #[serde(default)]
    extra: serde_json::Value,
}

impl Model {
    pub fn new(cfg: ModelConfig, ablation: Ablation, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(seed);
        let mut params = ParamStore::new();
        cfg.sapn.init(&mut params, ablation.uses_stroke_head(), &mut rng);
        if ablation.uses_graph() {
            cfg.hrgn
                .init(&mut params, cfg.sapn.feature_channels(), ablation.uses_stroke_graph(), &mut rng);
        }
        Ok(Self { cfg, ablation, params })
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.cfg, self.ablation)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = CheckpointMeta {
            config: self.cfg.clone(),
            ablation: self.ablation,
            extra,
        };
        let meta = serde_json::to_value(meta).expect("meta serializes");
        save_checkpoint(path, &self.params, &self.config_hash(), meta)
    }

    /// Loads a checkpoint; the stored hash must match its embedded
    /// configuration and, when given, `expected` as well.
    pub fn load(path: &Path, expected: Option<(&ModelConfig, Ablation)>) -> Result<Self> {
        let (params, header) = load_checkpoint(path)?;
        let meta: CheckpointMeta = serde_json::from_value(header.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
        let own = config_hash(&meta.config, meta.ablation);
        if own != header.config_hash {
            return Err(Error::IncompatibleCheckpoint {
                expected: own,
                found: header.config_hash,
            });
        }
        if let Some((cfg, ab)) = expected {
            let want = config_hash(cfg, ab);
            if want != header.config_hash {
                return Err(Error::IncompatibleCheckpoint {
                    expected: want,
                    found: header.config_hash,
                });
            }
        }
        let fresh = Model::new(meta.config.clone(), meta.ablation, 0)?;
        let same_layout = fresh.params.len() == params.len()
            && fresh
                .params
                .iter()
                .all(|(n, t)| params.get(n).is_some_and(|p| p.shape() == t.shape()));
        if !same_layout {
            return Err(Error::Checkpoint(format!(
                "{}: parameter names or shapes differ from the stored configuration",
                path.display()
            )));
        }
        Ok(Self {
            cfg: meta.config,
            ablation: meta.ablation,
            params,
        })
    }

    /// Runs the whole pipeline on one sample.
    pub fn detect(&self, sample: &Sample) -> Result<Detection> {
        let (w, h) = (sample.width, sample.height);
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let image = tape.constant(Tensor::new([1, 3, h, w], sample.planar()));
        let feats = backbone_forward(&p, &self.cfg.sapn, image)?;
        let raw = text_head_forward(&p, &self.cfg.sapn, feats).value();
        let maps = decode_head(&raw, 0);
        let stroke_map = if self.ablation.uses_stroke_head() {
            Some(self.predict_strokes(&p, feats, image, &maps)?)
        } else {
            None
        };
        let pc = &self.cfg.proposals;
        let instances = if self.ablation.uses_graph() {
            let text = extract_text_proposals(&maps, pc.ta_thresh, pc.tca_thresh, pc.stride_ratio);
            let text = nms(&boundary_filter(&text, w, h, pc.max_outside), pc.nms_iou);
            let strokes = match (&stroke_map, self.ablation.uses_stroke_graph()) {
                (Some(sm), true) => shrink_to_stroke_proposals(&text, sm, w, h, pc.stroke_shrink, pc.stroke_keep),
                _ => Vec::new(),
            };
            self.group_by_links(&p, feats, text, strokes)?
        } else {
            self.group_by_components(&maps)
        };
        Ok(Detection {
            instances,
            maps,
            stroke_map,
        })
    }

    fn predict_strokes<'t>(
        &self,
        p: &Bound<'t, '_>,
        feats: Var<'t>,
        image: Var<'t>,
        maps: &GeometryMaps,
    ) -> Result<Vec<f64>> {
        let (w, h) = (maps.width, maps.height);
        let s = self.cfg.sapn.stride();
        let fs = feats.shape();
        let mut out = vec![0.0f64; w * h];
        let mask: Vec<bool> = maps.ta.iter().map(|&v| v >= self.cfg.proposals.ta_thresh).collect();
        for comp in connected_components(&mask, w, h) {
            if comp.len() < self.cfg.inference.min_ota_pixels {
                continue;
            }
            let mut cm = vec![false; w * h];
            for &i in &comp {
                cm[i] = true;
            }
            let rect = outer_rectangle(&cm, w, h)?;
            let Ok(cells) = ota_cells(&rect, s, fs[2], fs[3]) else {
                continue;
            };
            let prob = stroke_crop(p, &self.cfg.sapn, feats, image, 0, cells)?.value();
            let (y0, y1, x0, x1) = cells;
            let cw = (x1 - x0) * s;
            for yy in 0..(y1 - y0) * s {
                for xx in 0..cw {
                    let (gy, gx) = (y0 * s + yy, x0 * s + xx);
                    let o = &mut out[gy * w + gx];
                    *o = o.max(prob.data()[yy * cw + xx]);
                }
            }
        }
        Ok(out)
    }

    fn group_by_links<'t>(
        &self,
        p: &Bound<'t, '_>,
        feats: Var<'t>,
        text: Vec<Proposal>,
        strokes: Vec<Proposal>,
    ) -> Result<Vec<TextInstance>> {
        if text.is_empty() {
            return Ok(Vec::new());
        }
        let images = [ImageProposals {
            text,
            strokes,
            pivots: None,
        }];
        let batch = GraphBatch::build(&images, &self.cfg.hrgn);
        let text = &images[0].text;
        let mut evaluated = Vec::new();
        let use_strokes = self.ablation.uses_stroke_graph();
        if let Some(logits) = hrgn_forward(p, &self.cfg.hrgn, feats, self.cfg.sapn.stride(), &batch, use_strokes)? {
            let probs = logits.softmax_rows().value();
            for (k, &(_, a, b)) in batch.links.iter().enumerate() {
                evaluated.push((a, b, probs.at2(k, 1)));
            }
        }
        let thresh = self.cfg.inference.link_thresh;
        let links = accept_links(&evaluated, thresh);
        let groups = group_bfs(text.len(), &links);
        let mut out = Vec::new();
        for g in groups {
            let members: std::collections::BTreeSet<usize> = g.iter().copied().collect();
            let probs: Vec<f64> = evaluated
                .iter()
                .filter(|(a, b, p)| members.contains(a) && members.contains(b) && *p >= thresh)
                .map(|t| t.2)
                .collect();
            let nodes: Vec<Proposal> = g.iter().map(|&i| text[i]).collect();
            let score = if probs.is_empty() {
                nodes.iter().map(|n| n.score).sum::<f64>() / nodes.len() as f64
            } else {
                probs.iter().sum::<f64>() / probs.len() as f64
            };
            if let Some(inst) = self.instance(nodes, score) {
                out.push(inst);
            }
        }
        Ok(out)
    }

    fn group_by_components(&self, maps: &GeometryMaps) -> Vec<TextInstance> {
        let pc = &self.cfg.proposals;
        extract_text_proposals_grouped(maps, pc.ta_thresh, pc.tca_thresh, pc.stride_ratio)
            .into_iter()
            .filter_map(|group| {
                let nodes = nms(&boundary_filter(&group, maps.width, maps.height, pc.max_outside), pc.nms_iou);
                if nodes.is_empty() {
                    return None;
                }
                let score = nodes.iter().map(|n| n.score).sum::<f64>() / nodes.len() as f64;
                self.instance(nodes, score)
            })
            .collect()
    }

    fn instance(&self, nodes: Vec<Proposal>, score: f64) -> Option<TextInstance> {
        if nodes.len() < self.cfg.inference.min_nodes {
            return None;
        }
        let centers: Vec<_> = nodes.iter().map(|n| n.center).collect();
        let ordered: Vec<Proposal> = order_min_path(&centers).into_iter().map(|i| nodes[i]).collect();
        let polygon = reconstruct_boundary_extended(&ordered, self.cfg.inference.end_extension);
        (polygon.len() >= 3).then_some(TextInstance {
            ordered_nodes: ordered,
            polygon,
            score,
        })
    }
}

/// Stroke probabilities `[1, 1, s·h, s·w]` over one feature window.
pub fn stroke_crop<'t>(
    p: &Bound<'t, '_>,
    cfg: &SapnConfig,
    feats: Var<'t>,
    image: Var<'t>,
    sample: usize,
    cells: (usize, usize, usize, usize),
) -> Result<Var<'t>> {
    let s = cfg.stride();
    let (y0, y1, x0, x1) = cells;
    let rough = tfd_forward(p, cfg, feats, sample, cells);
    let rgb = image.crop(sample, y0 * s, y1 * s, x0 * s, x1 * s);
    scf_forward(p, cfg, rough, rgb)
}
