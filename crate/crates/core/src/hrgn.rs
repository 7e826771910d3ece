//! Hierarchical relation graph network: node embeddings, the attention
//! update over stroke nodes, two-stage aggregation into text nodes, gated
//! fusion and pivot–neighbor linkage prediction.
//!
//! All local graphs of a batch are stacked: every (graph, node) pair is one
//! row, so aggregation runs as block-sparse products and segment sums.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Csr, Var};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::geometry_labels::TextAnnotation;
use crate::params::{Bound, ParamStore};
use crate::proposal_graph::{build_local_graph, k_nearest, stroke_links, GraphConfig, LocalGraph, Proposal};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HrgnConfig {
    /// Embedding widths of (x, y, height, width, angle); each must be even.
    pub geo_dims: [usize; 5],
    pub content_dim: usize,
    /// Sampling grid side of the rotated region pooling.
    pub roi_grid: usize,
    /// Neighbors of each stroke node in the attention update, itself included.
    pub stroke_knn: usize,
    pub graph_layers: usize,
    pub leaky_slope: f64,
    /// Pixels per unit in the image-frame stroke embedding.
    pub stroke_scale: f64,
    /// Largest number of pivots per image during training; 0 keeps all.
    pub max_train_pivots: usize,
    pub graph: GraphConfig,
}

impl Default for HrgnConfig {
    fn default() -> Self {
        Self {
            geo_dims: [14, 14, 12, 12, 12],
            content_dim: 32,
            roi_grid: 4,
            stroke_knn: 9,
            graph_layers: 3,
            leaky_slope: 0.2,
            stroke_scale: 16.0,
            max_train_pivots: 16,
            graph: GraphConfig::default(),
        }
    }
}

impl HrgnConfig {
    pub fn geo_dim(&self) -> usize {
        self.geo_dims.iter().sum()
    }

    pub fn dim(&self) -> usize {
        self.geo_dim() + self.content_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.geo_dims.iter().any(|d| d % 2 != 0 || *d == 0) {
            return Err(Error::Config(format!("geo_dims must be positive and even: {:?}", self.geo_dims)));
        }
        if self.content_dim == 0 || self.roi_grid == 0 || self.stroke_knn == 0 || self.graph_layers == 0 {
            return Err(Error::Config("hrgn sizes must be positive".into()));
        }
        Ok(())
    }

    /// Registers the graph parameters; the stroke-side ones only when
    /// `with_stroke` is set.
    pub fn init(&self, store: &mut ParamStore, feature_channels: usize, with_stroke: bool, rng: &mut ChaCha8Rng) {
        let d = self.dim();
        let fan = self.roi_grid * self.roi_grid * feature_channels;
        store.init_uniform("hrgn.content.weight", &[fan, self.content_dim], fan, rng);
        store.init_const("hrgn.content.bias", &[1, self.content_dim], 0.0);
        if with_stroke {
            store.init_glorot("hrgn.att.W", &[d, d], d, d, rng);
            store.init_glorot("hrgn.att.a", &[d, 2], 2 * d, 1, rng);
            store.init_glorot("hrgn.mask.M", &[d, d], d, d, rng);
            store.init_glorot("hrgn.fuse.W", &[3 * d, 1], 3 * d, 1, rng);
            store.init_const("hrgn.fuse.b", &[1, 1], 0.0);
        }
        for l in 1..self.graph_layers {
            store.init_glorot(&format!("hrgn.layer{l}.weight"), &[2 * d, d], 2 * d, d, rng);
            store.init_const(&format!("hrgn.layer{l}.bias"), &[1, d], 0.0);
        }
        store.init_glorot("hrgn.link.W", &[2 * d, 2], 2 * d, 2, rng);
    }
}

/// Coordinate frame in which proposal attributes are measured.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub origin: Point,
    pub cos: f64,
    pub sin: f64,
    pub scale: f64,
}

impl Frame {
    pub fn image(scale: f64) -> Self {
        Self {
            origin: Point::new(0.0, 0.0),
            cos: 1.0,
            sin: 0.0,
            scale,
        }
    }

    /// Centered on `p`, x along its writing direction, unit length its height.
    pub fn pivot(p: &Proposal) -> Self {
        Self {
            origin: p.center,
            cos: p.cos,
            sin: p.sin,
            scale: p.height().max(1e-6),
        }
    }

    /// `(x, y, height, width, angle)` of `p` in this frame.
    pub fn attributes(&self, p: &Proposal) -> [f64; 5] {
        let r = p.center - self.origin;
        let d = Point::new(self.cos, -self.sin);
        let down = Point::new(self.sin, self.cos);
        let s = 1.0 / self.scale;
        let angle = (p.sin * self.cos - p.cos * self.sin).atan2(p.cos * self.cos + p.sin * self.sin);
        [r.dot(d) * s, r.dot(down) * s, p.height() * s, p.width * s, angle]
    }
}

/// Interleaved `sin(a / 10000^(2i/d)), cos(a / 10000^(2i/d))` per attribute.
pub fn geometric_embedding(attrs: &[f64; 5], dims: &[usize; 5]) -> Vec<f64> {
    let mut out = Vec::with_capacity(dims.iter().sum());
    for (&a, &d) in attrs.iter().zip(dims) {
        for i in 0..d / 2 {
            let f = a / 10000f64.powf(2.0 * i as f64 / d as f64);
            out.push(f.sin());
            out.push(f.cos());
        }
    }
    out
}

/// Bilinear sampling matrix for rotated region pooling.
///
/// Row `p·g² + j·g + i` samples proposal `p` at grid cell `i` along the
/// writing direction and `j` from top to bottom. Columns index pixels of a
/// channels-last map of `n_images` feature maps of `fh × fw` cells.
pub fn rroi_sampling(
    props: &[(Proposal, usize)],
    n_images: usize,
    fh: usize,
    fw: usize,
    stride: usize,
    grid: usize,
) -> Result<Csr> {
    let mut trip = Vec::with_capacity(props.len() * grid * grid * 4);
    let s = stride as f64;
    for (pi, (p, img)) in props.iter().enumerate() {
        if p.width <= 0.0 || p.height() <= 0.0 {
            return Err(Error::ZeroAreaProposal);
        }
        assert!(*img < n_images, "image index out of range");
        let (top, bottom, d) = (p.top_mid(), p.bottom_mid(), p.direction());
        for j in 0..grid {
            let t = (j as f64 + 0.5) / grid as f64;
            let line = top.lerp(bottom, t);
            for i in 0..grid {
                let u = ((i as f64 + 0.5) / grid as f64 - 0.5) * p.width;
                let q = line + d * u;
                let fx = (q.x / s - 0.5).clamp(0.0, (fw - 1) as f64);
                let fy = (q.y / s - 0.5).clamp(0.0, (fh - 1) as f64);
                let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(fw - 1), (y0 + 1).min(fh - 1));
                let (wx, wy) = (fx - x0 as f64, fy - y0 as f64);
                let row = pi * grid * grid + j * grid + i;
                let base = img * fh * fw;
                for (yy, xx, w) in [
                    (y0, x0, (1.0 - wy) * (1.0 - wx)),
                    (y0, x1, (1.0 - wy) * wx),
                    (y1, x0, wy * (1.0 - wx)),
                    (y1, x1, wy * wx),
                ] {
                    if w != 0.0 {
                        trip.push((row, base + yy * fw + xx, w));
                    }
                }
            }
        }
    }
    Ok(Csr::from_triplets(props.len() * grid * grid, n_images * fh * fw, trip))
}

/// Content embeddings `[P, content_dim]` from `[N, C, fh, fw]` features.
pub fn content_embedding<'t>(p: &Bound<'t, '_>, features: Var<'t>, sampling: &Rc<Csr>, grid: usize) -> Var<'t> {
    let c = features.shape()[1];
    let n = sampling.rows / (grid * grid);
    features
        .channels_last()
        .spmm(sampling)
        .reshape(&[n, grid * grid * c])
        .matmul(p.get("hrgn.content.weight"))
        .add_row(p.get("hrgn.content.bias"))
}

/// Attention coefficients `[E, 1]` of edges `src[e] → nbr[e]` given the
/// projected features `wh = h·W` and the attention matrix `a = [a_src, a_nbr]`.
pub fn gat_attention<'t>(wh: Var<'t>, a: Var<'t>, src: &[usize], nbr: &[usize], n: usize, slope: f64) -> Result<Var<'t>> {
    let mut has = vec![false; n];
    for &s in src {
        has[s] = true;
    }
    if has.iter().any(|&h| !h) {
        return Err(Error::EmptyNeighbors);
    }
    let scores = wh.matmul(a);
    let e = scores
        .slice_cols(0, 1)
        .gather_rows(src)
        .add(scores.slice_cols(1, 2).gather_rows(nbr))
        .leaky_relu(slope);
    Ok(e.segment_softmax(src, n))
}

/// `sigmoid(Σ_k α_sk · W h_k)` for every stroke node.
pub fn stroke_graph_update<'t>(
    h: Var<'t>,
    w: Var<'t>,
    a: Var<'t>,
    src: &[usize],
    nbr: &[usize],
    slope: f64,
) -> Result<Var<'t>> {
    let n = h.shape()[0];
    let wh = h.matmul(w);
    let alpha = gat_attention(wh, a, src, nbr, n, slope)?;
    Ok(wh.gather_rows(nbr).mul_col(alpha).segment_sum(src, n).sigmoid())
}

/// Weighted average over text neighbors with the row-normalized adjacency.
pub fn agg_text_level<'t>(h: Var<'t>, adjacency: &Rc<Csr>) -> Var<'t> {
    h.spmm(adjacency)
}

/// Gate `[P, 1]` of every (text row, stroke) pair: `sigmoid(F_k · M · h̃_t)`
/// with `h̃_t` the mean of the strokes linked to the row.
pub fn stroke_soft_mask<'t>(f_pairs: Var<'t>, pool: &Rc<Csr>, pair_row: &[usize], m: Var<'t>) -> Var<'t> {
    let mean = f_pairs.spmm(pool);
    f_pairs.matmul(m).mul(mean.gather_rows(pair_row)).sum_cols().sigmoid()
}

/// `Σ_k m_k F_k` per text row.
pub fn agg_stroke_level<'t>(f_pairs: Var<'t>, gate: Var<'t>, pair_row: &[usize], rows: usize) -> Var<'t> {
    f_pairs.mul_col(gate).segment_sum(pair_row, rows)
}

/// `p·a + (1 − p)·b` with `p = sigmoid([a, a⊙b, b]·W + b_p)`; rows whose
/// `has_stroke` entry is 0 return `a`.
pub fn gated_fuse<'t>(a: Var<'t>, b: Var<'t>, w: Var<'t>, bias: Var<'t>, has_stroke: &Tensor) -> Var<'t> {
    let tape = a.tape();
    let p = Var::concat_cols(&[a, a.mul(b), b]).matmul(w).add_row(bias).sigmoid();
    let open = has_stroke.map(|m| 1.0 - m);
    let p_eff = p.mul_const(has_stroke).add(tape.constant(open));
    // the convex form returns `a` exactly where p_eff is 1
    a.mul_col(p_eff).add(b.mul_col(p_eff.neg().add_scalar(1.0)))
}

/// `(H ⊕ L·H)·W` per row.
pub fn linkage_logits<'t>(h: Var<'t>, laplacian: &Rc<Csr>, w: Var<'t>) -> Var<'t> {
    Var::concat_cols(&[h, h.spmm(laplacian)]).matmul(w)
}

pub fn linkage_predict<'t>(h: Var<'t>, laplacian: &Rc<Csr>, w: Var<'t>) -> Var<'t> {
    linkage_logits(h, laplacian, w).softmax_rows()
}

/// Mean cross entropy of `[K, 2]` logits against binary labels; `None`
/// when there are no rows.
pub fn loss_linkage<'t>(logits: Var<'t>, labels: &[bool]) -> Option<Var<'t>> {
    let k = labels.len();
    if k == 0 {
        return None;
    }
    assert_eq!(logits.shape(), vec![k, 2]);
    let mut onehot = vec![0.0; 2 * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[2 * i + usize::from(l)] = 1.0 / k as f64;
    }
    Some(logits.log_softmax_rows().mul_const(&Tensor::new([k, 2], onehot)).sum().neg())
}

/// Proposals of one image.
#[derive(Clone, Debug, Default)]
pub struct ImageProposals {
    pub text: Vec<Proposal>,
    pub strokes: Vec<Proposal>,
    /// Restricts the pivots; `None` uses every text proposal.
    pub pivots: Option<Vec<usize>>,
}

/// One pivot–neighbor decision: `(image, pivot, neighbor)` text indices.
pub type LinkKey = (usize, usize, usize);

/// Stacked graph inputs of a batch.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub n_images: usize,
    pub graphs: Vec<(usize, LocalGraph)>,
    /// Global text index of every row.
    pub row_text: Vec<usize>,
    pub row_geo: Tensor,
    pub text: Vec<(Proposal, usize)>,
    pub strokes: Vec<(Proposal, usize)>,
    pub stroke_geo: Tensor,
    pub adjacency: Rc<Csr>,
    pub laplacian: Rc<Csr>,
    pub gat_src: Vec<usize>,
    pub gat_nbr: Vec<usize>,
    pub pair_row: Vec<usize>,
    pub pair_stroke: Vec<usize>,
    pub pool: Rc<Csr>,
    pub has_stroke: Tensor,
    pub link_rows: Vec<usize>,
    pub links: Vec<LinkKey>,
}

impl GraphBatch {
    pub fn rows(&self) -> usize {
        self.row_text.len()
    }

    pub fn build(images: &[ImageProposals], cfg: &HrgnConfig) -> GraphBatch {
        let mut text = Vec::new();
        let mut strokes = Vec::new();
        let mut text_off = Vec::new();
        let mut stroke_off = Vec::new();
        for (i, im) in images.iter().enumerate() {
            text_off.push(text.len());
            stroke_off.push(strokes.len());
            text.extend(im.text.iter().map(|&p| (p, i)));
            strokes.extend(im.strokes.iter().map(|&p| (p, i)));
        }

        let mut graphs = Vec::new();
        let mut row_text = Vec::new();
        let mut geo = Vec::new();
        let mut adj = Vec::new();
        let mut lap = Vec::new();
        let mut pair_row = Vec::new();
        let mut pair_stroke = Vec::new();
        let mut link_rows = Vec::new();
        let mut links = Vec::new();
        for (i, im) in images.iter().enumerate() {
            let links_of: Vec<Vec<usize>> = im
                .text
                .iter()
                .map(|t| stroke_links(t, &im.strokes, cfg.graph.max_strokes))
                .collect();
            let pivots: Vec<usize> = match &im.pivots {
                Some(p) => p.clone(),
                None => (0..im.text.len()).collect(),
            };
            for pivot in pivots {
                let g = build_local_graph(pivot, &im.text, &cfg.graph);
                let base = row_text.len();
                let frame = Frame::pivot(&im.text[pivot]);
                for (k, &node) in g.nodes.iter().enumerate() {
                    row_text.push(text_off[i] + node);
                    geo.extend(geometric_embedding(&frame.attributes(&im.text[node]), &cfg.geo_dims));
                    for &s in &links_of[node] {
                        pair_row.push(base + k);
                        pair_stroke.push(stroke_off[i] + s);
                    }
                }
                let n = g.len();
                for r in 0..n {
                    for c in 0..n {
                        let (a, l) = (g.adjacency.at2(r, c), g.laplacian.at2(r, c));
                        if a != 0.0 {
                            adj.push((base + r, base + c, a));
                        }
                        if l != 0.0 {
                            lap.push((base + r, base + c, l));
                        }
                    }
                }
                for (k, &h) in g.hop1.iter().enumerate() {
                    link_rows.push(base + 1 + k);
                    links.push((i, pivot, h));
                }
                graphs.push((i, g));
            }
        }
        let rows = row_text.len();
        let gd = cfg.geo_dim();

        let mut stroke_geo = Vec::with_capacity(strokes.len() * gd);
        let frame = Frame::image(cfg.stroke_scale);
        for (p, _) in &strokes {
            stroke_geo.extend(geometric_embedding(&frame.attributes(p), &cfg.geo_dims));
        }
        let mut gat_src = Vec::new();
        let mut gat_nbr = Vec::new();
        for (i, im) in images.iter().enumerate() {
            let centers: Vec<Point> = im.strokes.iter().map(|s| s.center).collect();
            for (s, c) in centers.iter().enumerate() {
                for k in k_nearest(&centers, *c, cfg.stroke_knn, |_| false) {
                    gat_src.push(stroke_off[i] + s);
                    gat_nbr.push(stroke_off[i] + k);
                }
            }
        }

        let mut counts = vec![0usize; rows];
        for &r in &pair_row {
            counts[r] += 1;
        }
        let pool_trip = pair_row
            .iter()
            .enumerate()
            .map(|(k, &r)| (r, k, 1.0 / counts[r] as f64))
            .collect();
        let has_stroke = Tensor::new(
            [rows, 1],
            counts.iter().map(|&c| f64::from(u8::from(c > 0))).collect(),
        );
        GraphBatch {
            n_images: images.len(),
            graphs,
            row_text,
            row_geo: Tensor::new([rows, gd], geo),
            stroke_geo: Tensor::new([strokes.len(), gd], stroke_geo),
            text,
            strokes,
            adjacency: Rc::new(Csr::from_triplets(rows, rows, adj)),
            laplacian: Rc::new(Csr::from_triplets(rows, rows, lap)),
            gat_src,
            gat_nbr,
            pool: Rc::new(Csr::from_triplets(rows, pair_row.len(), pool_trip)),
            pair_row,
            pair_stroke,
            has_stroke,
            link_rows,
            links,
        }
    }
}

/// Linkage logits `[K, 2]` over the batch's pivot–neighbor pairs, or `None`
/// when the batch has no pairs.
///
/// With `use_strokes` unset only the text-level aggregation runs.
pub fn hrgn_forward<'t>(
    p: &Bound<'t, '_>,
    cfg: &HrgnConfig,
    features: Var<'t>,
    stride: usize,
    batch: &GraphBatch,
    use_strokes: bool,
) -> Result<Option<Var<'t>>> {
    if batch.links.is_empty() {
        return Ok(None);
    }
    let tape = features.tape();
    let fs = features.shape();
    let (fh, fw) = (fs[2], fs[3]);
    let grid = cfg.roi_grid;
    let text_sampling = Rc::new(rroi_sampling(&batch.text, batch.n_images, fh, fw, stride, grid)?);
    let text_content = content_embedding(p, features, &text_sampling, grid);
    let h_rows = Var::concat_cols(&[tape.constant(batch.row_geo.clone()), text_content.gather_rows(&batch.row_text)]);
    let stage1 = agg_text_level(h_rows, &batch.adjacency);

    let mut h = if use_strokes && !batch.pair_row.is_empty() {
        let stroke_sampling = Rc::new(rroi_sampling(&batch.strokes, batch.n_images, fh, fw, stride, grid)?);
        let stroke_content = content_embedding(p, features, &stroke_sampling, grid);
        let f = Var::concat_cols(&[tape.constant(batch.stroke_geo.clone()), stroke_content]);
        let updated = stroke_graph_update(
            f,
            p.get("hrgn.att.W"),
            p.get("hrgn.att.a"),
            &batch.gat_src,
            &batch.gat_nbr,
            cfg.leaky_slope,
        )?;
        let f_pairs = updated.gather_rows(&batch.pair_stroke);
        let gate = stroke_soft_mask(f_pairs, &batch.pool, &batch.pair_row, p.get("hrgn.mask.M"));
        let stage2 = agg_stroke_level(f_pairs, gate, &batch.pair_row, batch.rows());
        gated_fuse(stage1, stage2, p.get("hrgn.fuse.W"), p.get("hrgn.fuse.b"), &batch.has_stroke)
    } else {
        stage1
    };
    for l in 1..cfg.graph_layers {
        h = Var::concat_cols(&[h, h.spmm(&batch.laplacian)])
            .matmul(p.get(&format!("hrgn.layer{l}.weight")))
            .add_row(p.get(&format!("hrgn.layer{l}.bias")))
            .relu();
    }
    Ok(Some(linkage_logits(h, &batch.laplacian, p.get("hrgn.link.W")).gather_rows(&batch.link_rows)))
}

/// Ground-truth instance of each proposal: the first annotation whose
/// polygon contains its center.
pub fn assign_instances(props: &[Proposal], anns: &[TextAnnotation]) -> Vec<Option<usize>> {
    props
        .iter()
        .map(|p| anns.iter().position(|a| crate::geometry::contains(&a.polygon, p.center)))
        .collect()
}

/// Label of every link: both ends inside the same annotation.
pub fn link_labels(batch: &GraphBatch, instances: &[Vec<Option<usize>>]) -> Vec<bool> {
    batch
        .links
        .iter()
        .map(|&(i, a, b)| matches!((instances[i][a], instances[i][b]), (Some(x), Some(y)) if x == y))
        .collect()
}
