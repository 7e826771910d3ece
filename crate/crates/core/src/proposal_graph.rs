//! Rotated-box proposals read off geometry maps, their suppression, and the
//! pivot-centered local graphs built over them.

use serde::{Deserialize, Serialize};

use crate::geometry::{self, Point};
use crate::geometry_labels::GeometryMaps;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Text,
    Stroke,
}

/// One quadrilateral slice of a text (or stroke) region.
///
/// The box spans `width` along the writing direction around `center`,
/// `h1` towards the top edge and `h2` towards the bottom edge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub center: Point,
    pub h1: f64,
    pub h2: f64,
    pub sin: f64,
    pub cos: f64,
    pub width: f64,
    pub level: Level,
    pub score: f64,
}

impl Proposal {
    /// Unit vector along the writing direction.
    pub fn direction(&self) -> Point {
        Point::new(self.cos, -self.sin)
    }

    /// Unit vector pointing from the center towards the top edge.
    pub fn normal(&self) -> Point {
        Point::new(-self.sin, -self.cos)
    }

    pub fn height(&self) -> f64 {
        self.h1 + self.h2
    }

    pub fn top_mid(&self) -> Point {
        self.center + self.normal() * self.h1
    }

    pub fn bottom_mid(&self) -> Point {
        self.center - self.normal() * self.h2
    }

    /// Corners: top-left, top-right, bottom-right, bottom-left in writing order.
    pub fn corners(&self) -> [Point; 4] {
        let half = self.direction() * (self.width / 2.0);
        let (t, b) = (self.top_mid(), self.bottom_mid());
        [t - half, t + half, b + half, b - half]
    }

    pub fn contains(&self, p: Point) -> bool {
        let r = p - self.center;
        let along = r.dot(self.direction());
        let up = r.dot(self.normal());
        along.abs() <= self.width / 2.0 && up <= self.h1 && -up <= self.h2
    }

    /// Same box scaled about its center.
    pub fn scaled(&self, factor: f64, level: Level) -> Proposal {
        Proposal {
            h1: self.h1 * factor,
            h2: self.h2 * factor,
            width: self.width * factor,
            level,
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalConfig {
    pub ta_thresh: f64,
    pub tca_thresh: f64,
    /// Sampling stride along a center region, as a fraction of its height.
    pub stride_ratio: f64,
    pub nms_iou: f64,
    /// Largest fraction of a box's area allowed outside the image.
    pub max_outside: f64,
    pub stroke_shrink: f64,
    pub stroke_keep: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            ta_thresh: 0.5,
            tca_thresh: 0.5,
            stride_ratio: 0.5,
            nms_iou: 0.3,
            max_outside: 0.2,
            stroke_shrink: 0.5,
            stroke_keep: 0.5,
        }
    }
}

/// 4-connected components of a mask, each listed in scan order; components
/// are ordered by their first pixel.
pub fn connected_components(mask: &[bool], width: usize, height: usize) -> Vec<Vec<usize>> {
    assert_eq!(mask.len(), width * height);
    let mut label = vec![usize::MAX; mask.len()];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut members = Vec::new();
        label[start] = id;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            members.push(idx);
            let (x, y) = (idx % width, idx / width);
            let mut visit = |n: usize| {
                if mask[n] && label[n] == usize::MAX {
                    label[n] = id;
                    stack.push(n);
                }
            };
            if x > 0 {
                visit(idx - 1);
            }
            if x + 1 < width {
                visit(idx + 1);
            }
            if y > 0 {
                visit(idx - width);
            }
            if y + 1 < height {
                visit(idx + width);
            }
        }
        members.sort_unstable();
        comps.push(members);
    }
    comps
}

fn pixel_center(idx: usize, width: usize) -> Point {
    Point::new((idx % width) as f64 + 0.5, (idx / width) as f64 + 0.5)
}

fn mean_orientation(maps: &GeometryMaps, pixels: &[usize]) -> (f64, f64) {
    let (s, c) = pixels.iter().fold((0.0, 0.0), |(s, c), &i| {
        (s + maps.sin_theta[i], c + maps.cos_theta[i])
    });
    let r = s.hypot(c);
    if r < 1e-8 {
        (0.0, 1.0)
    } else {
        (s / r, c / r)
    }
}

/// Slices one center-region component into proposals of width close to
/// `stride_ratio` times its median height.
fn slice_component(maps: &GeometryMaps, pixels: &[usize], stride_ratio: f64) -> Vec<Proposal> {
    let w = maps.width;
    let (sin, cos) = mean_orientation(maps, pixels);
    let d = Point::new(cos, -sin);
    let proj: Vec<f64> = pixels.iter().map(|&i| pixel_center(i, w).dot(d)).collect();
    let lo = proj.iter().copied().fold(f64::INFINITY, f64::min) - 0.5;
    let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 0.5;
    let mut heights: Vec<f64> = pixels.iter().map(|&i| maps.text_height(i)).collect();
    heights.sort_by(f64::total_cmp);
    let median = heights[heights.len() / 2];
    let stride = stride_ratio * median;
    if !(stride > 0.0) {
        return Vec::new();
    }
    let len = hi - lo;
    let n = ((len / stride).round() as usize).max(1);
    let step = len / n as f64;
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (&i, &s) in pixels.iter().zip(&proj) {
        let k = (((s - lo) / step) as usize).min(n - 1);
        buckets[k].push(i);
    }
    let mut out = Vec::new();
    for (k, bucket) in buckets.iter().enumerate() {
        if bucket.is_empty() {
            continue;
        }
        let inv = 1.0 / bucket.len() as f64;
        let (mut centroid, mut top, mut bottom) = (Point::default(), Point::default(), Point::default());
        let (mut ss, mut cc, mut score) = (0.0, 0.0, 0.0);
        for &i in bucket {
            let p = pixel_center(i, w);
            let normal = Point::new(-maps.sin_theta[i], -maps.cos_theta[i]);
            centroid = centroid + p * inv;
            top = top + (p + normal * maps.h1[i]) * inv;
            bottom = bottom + (p - normal * maps.h2[i]) * inv;
            ss += maps.sin_theta[i];
            cc += maps.cos_theta[i];
            score += maps.tca[i] * inv;
        }
        let r = ss.hypot(cc);
        let (ps, pc) = if r < 1e-8 { (sin, cos) } else { (ss / r, cc / r) };
        let mid = lo + (k as f64 + 0.5) * step;
        let center = centroid + d * (mid - centroid.dot(d));
        let normal = Point::new(-ps, -pc);
        let h1 = (top - center).dot(normal).max(1e-3);
        let h2 = (center - bottom).dot(normal).max(1e-3);
        out.push(Proposal {
            center,
            h1,
            h2,
            sin: ps,
            cos: pc,
            width: step,
            level: Level::Text,
            score,
        });
    }
    out
}

/// Text-level proposals from thresholded center-region components.
///
/// Each 4-connected component of `tca ≥ tca_thresh ∧ ta ≥ ta_thresh` is
/// projected onto its mean writing direction and cut into equal slices of
/// roughly `stride_ratio` times its median height. A slice's box reads
/// its center, heights and angle from the averaged per-pixel geometry, and
/// its score is the mean center-region probability.
pub fn extract_text_proposals(
    pred: &GeometryMaps,
    ta_thresh: f64,
    tca_thresh: f64,
    stride_ratio: f64,
) -> Vec<Proposal> {
    extract_text_proposals_grouped(pred, ta_thresh, tca_thresh, stride_ratio)
        .into_iter()
        .flatten()
        .collect()
}

/// As [`extract_text_proposals`], keeping proposals grouped by the
/// component they came from.
pub fn extract_text_proposals_grouped(
    pred: &GeometryMaps,
    ta_thresh: f64,
    tca_thresh: f64,
    stride_ratio: f64,
) -> Vec<Vec<Proposal>> {
    let mask: Vec<bool> = pred
        .tca
        .iter()
        .zip(&pred.ta)
        .map(|(&c, &a)| c >= tca_thresh && a >= ta_thresh)
        .collect();
    connected_components(&mask, pred.width, pred.height)
        .iter()
        .map(|comp| slice_component(pred, comp, stride_ratio))
        .filter(|v| !v.is_empty())
        .collect()
}

/// Mean of `plane` over the pixels whose centers fall inside the box, or
/// `None` when no pixel center is covered.
pub fn mean_inside(p: &Proposal, plane: &[f64], width: usize, height: usize) -> Option<f64> {
    let r = geometry::Rect::bounding(&p.corners())?;
    let x0 = (r.x0 - 0.5).ceil().max(0.0) as usize;
    let y0 = (r.y0 - 0.5).ceil().max(0.0) as usize;
    let x1 = ((r.x1 - 0.5).floor() + 1.0).clamp(0.0, width as f64) as usize;
    let y1 = ((r.y1 - 0.5).floor() + 1.0).clamp(0.0, height as f64) as usize;
    let (mut sum, mut count) = (0.0, 0usize);
    for y in y0..y1 {
        for x in x0..x1 {
            if p.contains(Point::new(x as f64 + 0.5, y as f64 + 0.5)) {
                sum += plane[y * width + x];
                count += 1;
            }
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// Shrinks each text proposal about its center and keeps the result when
/// the stroke map is on average above `keep` inside it.
pub fn shrink_to_stroke_proposals(
    text_props: &[Proposal],
    stroke_map: &[f64],
    width: usize,
    height: usize,
    shrink: f64,
    keep: f64,
) -> Vec<Proposal> {
    text_props
        .iter()
        .filter_map(|p| {
            let s = p.scaled(shrink, Level::Stroke);
            let mean = mean_inside(&s, stroke_map, width, height)?;
            (mean > keep).then_some(Proposal { score: mean, ..s })
        })
        .collect()
}

/// Drops proposals with more than `max_outside` of their area beyond the
/// image borders.
pub fn boundary_filter(props: &[Proposal], width: usize, height: usize, max_outside: f64) -> Vec<Proposal> {
    let (w, h) = (width as f64, height as f64);
    let image = [
        Point::new(0.0, 0.0),
        Point::new(w, 0.0),
        Point::new(w, h),
        Point::new(0.0, h),
    ];
    props
        .iter()
        .filter(|p| {
            let quad = p.corners();
            let area = geometry::area(&quad);
            if area <= 0.0 {
                return false;
            }
            let inside = geometry::area(&geometry::convex_intersection(&quad, &image));
            1.0 - inside / area <= max_outside
        })
        .copied()
        .collect()
}

/// Processing order for suppression: score descending, then center x and
/// center y ascending.
pub fn nms_order(a: &Proposal, b: &Proposal) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.center.x.total_cmp(&b.center.x))
        .then(a.center.y.total_cmp(&b.center.y))
}

/// Greedy non-maximum suppression with rotated-box IoU. Survivors are
/// returned in processing order.
pub fn nms(props: &[Proposal], iou_thresh: f64) -> Vec<Proposal> {
    let mut sorted = props.to_vec();
    sorted.sort_by(nms_order);
    let quads: Vec<[Point; 4]> = sorted.iter().map(Proposal::corners).collect();
    let mut kept: Vec<usize> = Vec::new();
    for i in 0..sorted.len() {
        if kept
            .iter()
            .all(|&k| geometry::convex_iou(&quads[k], &quads[i]) <= iou_thresh)
        {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| sorted[i]).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub hop1: usize,
    pub hop2: usize,
    pub max_strokes: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            hop1: 8,
            hop2: 4,
            max_strokes: 3,
        }
    }
}

/// Pivot-centered neighborhood over text proposals.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalGraph {
    pub pivot: usize,
    /// Proposal indices; the pivot comes first, then hop-1, then hop-2.
    pub nodes: Vec<usize>,
    pub hop1: Vec<usize>,
    pub hop2: Vec<usize>,
    /// Undirected edges as positions into `nodes`, `a < b`.
    pub edges: Vec<(usize, usize)>,
    /// Row-normalized adjacency with self-loops.
    pub adjacency: Tensor,
    /// Symmetric normalized adjacency with self-loops.
    pub laplacian: Tensor,
}

impl LocalGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// The `k` points nearest to `query` by squared distance, ties broken by
/// index, skipping any index for which `skip` holds.
pub fn k_nearest(points: &[Point], query: Point, k: usize, skip: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut cand: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| !skip(*i))
        .map(|(i, p)| {
            let d = *p - query;
            (d.x * d.x + d.y * d.y, i)
        })
        .collect();
    let key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if cand.len() > k {
        cand.select_nth_unstable_by(k, key);
        cand.truncate(k);
    }
    cand.sort_by(key);
    cand.into_iter().map(|(_, i)| i).collect()
}

/// Two-hop neighborhood of `pivot` over the proposal centers.
///
/// Hop 1 holds the `cfg.hop1` nearest proposals. Every hop-1 node links to
/// its `cfg.hop2` nearest proposals other than the pivot; those not
/// already in hop 1 form hop 2.
pub fn build_local_graph(pivot: usize, props: &[Proposal], cfg: &GraphConfig) -> LocalGraph {
    let centers: Vec<Point> = props.iter().map(|p| p.center).collect();
    build_local_graph_from_points(pivot, &centers, cfg)
}

pub fn build_local_graph_from_points(pivot: usize, centers: &[Point], cfg: &GraphConfig) -> LocalGraph {
    let hop1 = k_nearest(centers, centers[pivot], cfg.hop1, |i| i == pivot);
    let mut nodes = vec![pivot];
    nodes.extend(&hop1);
    let mut pos: std::collections::HashMap<usize, usize> =
        nodes.iter().enumerate().map(|(p, &n)| (n, p)).collect();
    let mut hop2 = Vec::new();
    let mut edges: Vec<(usize, usize)> = (1..nodes.len()).map(|p| (0, p)).collect();
    for (k, &h) in hop1.iter().enumerate() {
        for m in k_nearest(centers, centers[h], cfg.hop2, |i| i == pivot || i == h) {
            let p = *pos.entry(m).or_insert_with(|| {
                nodes.push(m);
                hop2.push(m);
                nodes.len() - 1
            });
            let a = k + 1;
            edges.push((a.min(p), a.max(p)));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    let (adjacency, laplacian) = graph_matrices(nodes.len(), &edges);
    LocalGraph {
        pivot,
        nodes,
        hop1,
        hop2,
        edges,
        adjacency,
        laplacian,
    }
}

/// Returns `(D⁻¹(A + I), D^-½ (A + I) D^-½)` for the undirected edge list,
/// with `D` the degree of `A + I`.
pub fn graph_matrices(n: usize, edges: &[(usize, usize)]) -> (Tensor, Tensor) {
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
    }
    for &(u, v) in edges {
        if u != v {
            a[u * n + v] = 1.0;
            a[v * n + u] = 1.0;
        }
    }
    let deg: Vec<f64> = (0..n).map(|i| a[i * n..(i + 1) * n].iter().sum()).collect();
    let mut rw = vec![0.0; n * n];
    let mut sym = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let v = a[i * n + j];
            if v != 0.0 {
                rw[i * n + j] = v / deg[i];
                sym[i * n + j] = v / (deg[i] * deg[j]).sqrt();
            }
        }
    }
    (Tensor::new([n, n], rw), Tensor::new([n, n], sym))
}

/// Stroke proposals linked to one text proposal: up to `max` of those whose
/// center lies inside it, nearest first (ties by index).
pub fn stroke_links(text: &Proposal, strokes: &[Proposal], max: usize) -> Vec<usize> {
    let centers: Vec<Point> = strokes.iter().map(|s| s.center).collect();
    k_nearest(&centers, text.center, max, |i| !text.contains(strokes[i].center))
}

/// A text-level local graph with its stroke attachments.
#[derive(Clone, Debug, PartialEq)]
pub struct HeteroGraph {
    pub base: LocalGraph,
    /// For each entry of `base.nodes`, the linked stroke proposal indices.
    pub stroke_links: Vec<Vec<usize>>,
}

pub fn attach_stroke_nodes(
    text_graph: LocalGraph,
    text_props: &[Proposal],
    stroke_props: &[Proposal],
    max: usize,
) -> HeteroGraph {
    let stroke_links = text_graph
        .nodes
        .iter()
        .map(|&t| stroke_links(&text_props[t], stroke_props, max))
        .collect();
    HeteroGraph {
        base: text_graph,
        stroke_links,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry_labels::{make_geometry_maps, LabelConfig, TextAnnotation};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prop_at(x: f64, y: f64, deg: f64, w: f64, h: f64, score: f64) -> Proposal {
        let t = deg.to_radians();
        Proposal {
            center: Point::new(x, y),
            h1: h / 2.0,
            h2: h / 2.0,
            sin: t.sin(),
            cos: t.cos(),
            width: w,
            level: Level::Text,
            score,
        }
    }

    fn rect_maps(poly: Vec<Point>, w: usize, h: usize) -> GeometryMaps {
        make_geometry_maps(&[TextAnnotation::new(poly, "")], w, h, &LabelConfig::default()).0
    }

    #[test]
    fn empty_prediction_has_no_proposals() {
        let maps = GeometryMaps::empty(32, 32);
        assert!(extract_text_proposals(&maps, 0.5, 0.5, 0.5).is_empty());
    }

    #[test]
    fn horizontal_rect_proposal_count() {
        let poly = vec![
            Point::new(20.0, 10.0),
            Point::new(220.0, 10.0),
            Point::new(220.0, 30.0),
            Point::new(20.0, 30.0),
        ];
        let maps = rect_maps(poly, 240, 40);
        let props = extract_text_proposals(&maps, 0.5, 0.5, 0.5);
        // 180 px of center region at stride 0.5 * 20
        assert!((17..=19).contains(&props.len()), "{}", props.len());
        for p in &props {
            assert!((p.center.y - 20.0).abs() < 1e-9);
            assert!((p.h1 - 10.0).abs() < 1e-9 && (p.h2 - 10.0).abs() < 1e-9);
            assert_eq!((p.sin, p.cos), (0.0, 1.0));
        }
    }

    #[test]
    fn rotated_rect_proposals_follow_axis() {
        let horiz = vec![
            Point::new(20.0, 10.0),
            Point::new(220.0, 10.0),
            Point::new(220.0, 30.0),
            Point::new(20.0, 30.0),
        ];
        // the same rect turned 90°: writing upwards, top edge on the left
        let vert = vec![
            Point::new(10.0, 220.0),
            Point::new(10.0, 20.0),
            Point::new(30.0, 20.0),
            Point::new(30.0, 220.0),
        ];
        let a = extract_text_proposals(&rect_maps(horiz, 240, 40), 0.5, 0.5, 0.5);
        let b = extract_text_proposals(&rect_maps(vert, 40, 240), 0.5, 0.5, 0.5);
        assert_eq!(a.len(), b.len());
        for p in &b {
            assert!((p.center.x - 20.0).abs() < 1e-9);
            assert!((p.sin - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn axis_aligned_round_trip_without_shrink() {
        let poly = vec![
            Point::new(10.0, 10.0),
            Point::new(50.0, 10.0),
            Point::new(50.0, 20.0),
            Point::new(10.0, 20.0),
        ];
        let cfg = LabelConfig {
            shrink_ratio: 0.0,
            end_trim: 0.0,
        };
        let maps = make_geometry_maps(&[TextAnnotation::new(poly, "")], 64, 32, &cfg).0;
        let props = extract_text_proposals(&maps, 0.5, 0.5, 0.5);
        let first = props[0].corners();
        let last = props[props.len() - 1].corners();
        assert!((first[0].x - 10.0).abs() < 1e-9 && (first[0].y - 10.0).abs() < 1e-9);
        assert!((last[2].x - 50.0).abs() < 1e-9 && (last[2].y - 20.0).abs() < 1e-9);
        let covered: f64 = props.iter().map(|p| p.width).sum();
        assert!((covered - 40.0).abs() < 1e-9);
    }

    #[test]
    fn stroke_shrink_uniform_cases() {
        let props = vec![prop_at(16.0, 16.0, 0.0, 8.0, 8.0, 1.0), prop_at(40.0, 20.0, 30.0, 10.0, 6.0, 1.0)];
        let zeros = vec![0.0; 64 * 64];
        assert!(shrink_to_stroke_proposals(&props, &zeros, 64, 64, 0.5, 0.5).is_empty());
        let ones = vec![1.0; 64 * 64];
        let s = shrink_to_stroke_proposals(&props, &ones, 64, 64, 0.5, 0.5);
        assert_eq!(s.len(), 2);
        for (a, b) in s.iter().zip(&props) {
            assert_eq!(a.level, Level::Stroke);
            assert_eq!(a.width, b.width / 2.0);
            assert_eq!(a.h1, b.h1 / 2.0);
            assert_eq!(a.h2, b.h2 / 2.0);
        }
    }

    #[test]
    fn stroke_shrink_checkerboard_matches_full_scan() {
        let (w, h) = (48, 48);
        let board: Vec<f64> = (0..w * h).map(|i| ((i % w + i / w) % 2) as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let props: Vec<Proposal> = (0..40)
            .map(|_| {
                prop_at(
                    rng.random_range(5.0..43.0),
                    rng.random_range(5.0..43.0),
                    rng.random_range(0.0..360.0),
                    rng.random_range(2.0..12.0),
                    rng.random_range(2.0..12.0),
                    1.0,
                )
            })
            .collect();
        let kept = shrink_to_stroke_proposals(&props, &board, w, h, 0.6, 0.5);
        let oracle: Vec<Proposal> = props
            .iter()
            .filter_map(|p| {
                let s = p.scaled(0.6, Level::Stroke);
                let vals: Vec<f64> = (0..w * h)
                    .filter(|&i| {
                        let c = Point::new((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
                        let r = c - s.center;
                        let (u, v) = (r.dot(s.direction()), r.dot(s.normal()));
                        u.abs() <= s.width / 2.0 && v <= s.h1 && -v <= s.h2
                    })
                    .map(|i| board[i])
                    .collect();
                if vals.is_empty() {
                    return None;
                }
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                (m > 0.5).then_some(Proposal { score: m, ..s })
            })
            .collect();
        assert_eq!(kept, oracle);
    }

    #[test]
    fn nms_trivial_cases() {
        let a = prop_at(10.0, 10.0, 0.0, 8.0, 8.0, 0.9);
        assert_eq!(nms(&[a, a], 0.3).len(), 1);
        let b = prop_at(40.0, 10.0, 0.0, 8.0, 8.0, 0.5);
        assert_eq!(nms(&[b, a], 0.3), vec![a, b]);
    }

    fn brute_nms(props: &[Proposal], thresh: f64) -> Vec<Proposal> {
        let mut alive: Vec<Proposal> = props.to_vec();
        let mut out = Vec::new();
        while !alive.is_empty() {
            let best = (0..alive.len())
                .min_by(|&i, &j| nms_order(&alive[i], &alive[j]))
                .unwrap();
            let b = alive.remove(best);
            alive.retain(|p| geometry::convex_iou(&p.corners(), &b.corners()) <= thresh);
            out.push(b);
        }
        out
    }

    #[test]
    fn nms_matches_brute_force_and_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let props: Vec<Proposal> = (0..50)
                .map(|_| {
                    prop_at(
                        rng.random_range(0.0..60.0),
                        rng.random_range(0.0..60.0),
                        rng.random_range(0.0..180.0),
                        rng.random_range(3.0..20.0),
                        rng.random_range(3.0..20.0),
                        (rng.random_range(0..10) as f64) / 10.0,
                    )
                })
                .collect();
            let kept = nms(&props, 0.3);
            assert_eq!(kept, brute_nms(&props, 0.3));
            assert_eq!(nms(&kept, 0.3), kept);
        }
    }

    #[test]
    fn boundary_filter_drops_exiting_boxes() {
        let inside = prop_at(10.0, 10.0, 0.0, 8.0, 8.0, 1.0);
        let half_out = prop_at(0.0, 10.0, 0.0, 8.0, 8.0, 1.0);
        let slightly = prop_at(3.5, 10.0, 0.0, 8.0, 8.0, 1.0);
        let kept = boundary_filter(&[inside, half_out, slightly], 32, 32, 0.2);
        assert_eq!(kept, vec![inside, slightly]);
    }

    #[test]
    fn small_graphs() {
        let pts: Vec<Point> = (0..3).map(|i| Point::new(i as f64, 0.0)).collect();
        let g = build_local_graph_from_points(0, &pts, &GraphConfig::default());
        assert_eq!(g.hop1, vec![1, 2]);
        assert!(g.hop2.is_empty());
        let pts: Vec<Point> = (0..13).map(|i| Point::new((i * 7 % 13) as f64, (i % 3) as f64)).collect();
        let g = build_local_graph_from_points(4, &pts, &GraphConfig::default());
        assert_eq!(g.hop1.len(), 8);
    }

    #[test]
    fn graph_matrix_hand_cases() {
        let (a, l) = graph_matrices(1, &[]);
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(l.data(), &[1.0]);
        let (a, l) = graph_matrices(2, &[(0, 1)]);
        assert_eq!(a.data(), &[0.5, 0.5, 0.5, 0.5]);
        assert_eq!(l.at2(0, 1), 0.5);
    }

    /// Cyclic Jacobi eigenvalues of a symmetric matrix.
    fn jacobi_eigenvalues(m: &Tensor) -> Vec<f64> {
        let n = m.dim(0);
        let mut a = m.data().to_vec();
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i * n + j] * a[i * n + j])
                .sum();
            if off < 1e-22 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[p * n + q];
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k * n + p], a[k * n + q]);
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                        a[p * n + k] = c * apk - s * aqk;
                        a[q * n + k] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a[i * n + i]).collect()
    }

    #[test]
    fn laplacian_spectrum_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let edges: Vec<(usize, usize)> = (0..13)
                .flat_map(|i| (i + 1..13).map(move |j| (i, j)))
                .filter(|_| rng.random_bool(0.3))
                .collect();
            let (a, l) = graph_matrices(13, &edges);
            for i in 0..13 {
                let row: f64 = a.row(i).iter().sum();
                assert!((row - 1.0).abs() < 1e-12);
                for j in 0..13 {
                    assert!((l.at2(i, j) - l.at2(j, i)).abs() < 1e-12);
                }
            }
            for ev in jacobi_eigenvalues(&l) {
                assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&ev), "{ev}");
            }
        }
    }

    #[test]
    fn stroke_attachment() {
        let text: Vec<Proposal> = vec![prop_at(10.0, 10.0, 0.0, 8.0, 8.0, 1.0), prop_at(30.0, 10.0, 0.0, 8.0, 8.0, 1.0)];
        let g = build_local_graph(0, &text, &GraphConfig::default());
        let none = attach_stroke_nodes(g.clone(), &text, &[], 3);
        assert!(none.stroke_links.iter().all(Vec::is_empty));
        let s = vec![prop_at(11.0, 9.0, 0.0, 2.0, 2.0, 1.0).scaled(1.0, Level::Stroke)];
        let one = attach_stroke_nodes(g, &text, &s, 3);
        assert_eq!(one.stroke_links, vec![vec![0], vec![]]);
    }

    #[test]
    fn stroke_links_match_containment_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let text = prop_at(20.0, 20.0, 25.0, 16.0, 10.0, 1.0);
        let strokes: Vec<Proposal> = (0..10)
            .map(|_| prop_at(rng.random_range(8.0..32.0), rng.random_range(8.0..32.0), 0.0, 2.0, 2.0, 1.0))
            .collect();
        let mut oracle: Vec<(f64, usize)> = strokes
            .iter()
            .enumerate()
            .filter(|(_, s)| geometry::contains(&text.corners(), s.center))
            .map(|(i, s)| (s.center.dist(text.center), i))
            .collect();
        oracle.sort_by(|a, b| a.0.total_cmp(&b.0));
        let expect: Vec<usize> = oracle.iter().take(3).map(|x| x.1).collect();
        assert_eq!(stroke_links(&text, &strokes, 3), expect);
    }

    proptest! {
        #[test]
        fn hop_structure_invariant_under_rigid_moves(
            pts in prop::collection::vec((0i32..64, 0i32..64), 2..30),
            tx in -64i32..64, ty in -64i32..64, pivot_seed in 0usize..1000,
        ) {
            let a: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(x as f64, y as f64)).collect();
            let b: Vec<Point> = a.iter().map(|p| Point::new(2.0 * p.x + tx as f64, 2.0 * p.y + ty as f64)).collect();
            let pivot = pivot_seed % a.len();
            let cfg = GraphConfig::default();
            let ga = build_local_graph_from_points(pivot, &a, &cfg);
            let gb = build_local_graph_from_points(pivot, &b, &cfg);
            prop_assert_eq!(&ga.nodes, &gb.nodes);
            prop_assert_eq!(&ga.edges, &gb.edges);
            let mut seen = std::collections::HashSet::new();
            prop_assert!(ga.nodes.iter().all(|n| seen.insert(*n)));
        }
    }
}
