//! Per-pixel text geometry: building ground-truth maps from polygon
//! annotations, shrinking text areas to center areas, and the angle and
//! outer-rectangle helpers used on predicted maps.
//!
//! Orientation convention: the writing direction of angle `θ` is
//! `(cos θ, −sin θ)` in image coordinates, and the upward normal (towards
//! the top edge) is `(−sin θ, −cos θ)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Point, Rect};

/// One text instance. Vertices list the top edge along the writing
/// direction, then the bottom edge back towards the start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextAnnotation {
    pub polygon: Vec<Point>,
    #[serde(default)]
    pub word: String,
}

impl TextAnnotation {
    pub fn new(polygon: Vec<Point>, word: impl Into<String>) -> Self {
        Self {
            polygon,
            word: word.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.polygon.len();
        if n < 4 || n % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "polygon needs an even number (>= 4) of vertices, got {n}"
            )));
        }
        if !geometry::is_simple(&self.polygon) {
            return Err(Error::InvalidArgument("polygon is self-intersecting".into()));
        }
        Ok(())
    }

    /// Top/bottom vertex pairs in writing order.
    pub fn edge_pairs(&self) -> Vec<(Point, Point)> {
        edge_pairs(&self.polygon)
    }
}

pub(crate) fn edge_pairs(polygon: &[Point]) -> Vec<(Point, Point)> {
    let k = polygon.len() / 2;
    (0..k)
        .map(|i| (polygon[i], polygon[polygon.len() - 1 - i]))
        .collect()
}

fn polygon_from_pairs(pairs: &[(Point, Point)]) -> Vec<Point> {
    pairs
        .iter()
        .map(|p| p.0)
        .chain(pairs.iter().rev().map(|p| p.1))
        .collect()
}

/// Text-area geometry planes, row-major over `width × height` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryMaps {
    pub width: usize,
    pub height: usize,
    pub ta: Vec<f64>,
    pub tca: Vec<f64>,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub sin_theta: Vec<f64>,
    pub cos_theta: Vec<f64>,
    pub valid_mask: Vec<bool>,
}

impl GeometryMaps {
    pub fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            ta: vec![0.0; n],
            tca: vec![0.0; n],
            h1: vec![0.0; n],
            h2: vec![0.0; n],
            sin_theta: vec![0.0; n],
            cos_theta: vec![1.0; n],
            valid_mask: vec![false; n],
        }
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    /// Local text height `h1 + h2` at a flat pixel index.
    pub fn text_height(&self, idx: usize) -> f64 {
        self.h1[idx] + self.h2[idx]
    }

    /// Mirror left-right. Writing direction is kept left-to-right, so the
    /// angle maps to `−θ`.
    pub fn flipped_horizontally(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let src = self.index(x, y);
                let dst = self.index(self.width - 1 - x, y);
                out.ta[dst] = self.ta[src];
                out.tca[dst] = self.tca[src];
                out.h1[dst] = self.h1[src];
                out.h2[dst] = self.h2[src];
                out.sin_theta[dst] = -self.sin_theta[src];
                out.cos_theta[dst] = self.cos_theta[src];
                out.valid_mask[dst] = self.valid_mask[src];
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelConfig {
    /// Fraction of the local height removed from each side of the text area.
    pub shrink_ratio: f64,
    /// Length trimmed from each end, as a fraction of the local height.
    pub end_trim: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            shrink_ratio: 0.3,
            end_trim: 0.5,
        }
    }
}

/// An instance that produced no labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelWarning {
    pub instance: usize,
    pub reason: String,
}

fn clip_to_image(poly: &[Point], width: usize, height: usize) -> Vec<Point> {
    poly.iter()
        .map(|p| Point::new(p.x.clamp(0.0, width as f64), p.y.clamp(0.0, height as f64)))
        .collect()
}

/// Rasterizes polygon annotations into ground-truth geometry maps.
///
/// Later instances overwrite earlier ones where they overlap. Instances
/// with less than one square pixel of area are skipped and reported.
pub fn make_geometry_maps(
    annotations: &[TextAnnotation],
    width: usize,
    height: usize,
    cfg: &LabelConfig,
) -> (GeometryMaps, Vec<LabelWarning>) {
    let mut maps = GeometryMaps::empty(width, height);
    let mut warnings = Vec::new();
    for (k, ann) in annotations.iter().enumerate() {
        if ann.polygon.len() < 4 || ann.polygon.len() % 2 != 0 {
            warnings.push(LabelWarning {
                instance: k,
                reason: format!("unpaired polygon with {} vertices", ann.polygon.len()),
            });
            continue;
        }
        let poly = clip_to_image(&ann.polygon, width, height);
        if geometry::area(&poly) < 1.0 {
            warnings.push(LabelWarning {
                instance: k,
                reason: "degenerate polygon (area < 1 px²)".into(),
            });
            continue;
        }
        let pairs = edge_pairs(&poly);
        let top: Vec<Point> = pairs.iter().map(|p| p.0).collect();
        let bottom: Vec<Point> = pairs.iter().map(|p| p.1).collect();
        let top_segments: Vec<(Point, Point, f64, f64)> = top
            .windows(2)
            .filter_map(|w| {
                let d = w[1] - w[0];
                let len = d.norm();
                (len > 0.0).then(|| (w[0], w[1], -d.y / len, d.x / len))
            })
            .collect();
        if top_segments.is_empty() {
            warnings.push(LabelWarning {
                instance: k,
                reason: "top edge has zero length".into(),
            });
            continue;
        }

        let ta = geometry::rasterize(&poly, width, height);
        let tca_poly = shrink_to_tca(&poly, cfg.shrink_ratio, cfg.end_trim);
        let tca = geometry::rasterize(&tca_poly, width, height);
        for (idx, _) in ta.iter().enumerate().filter(|(_, &inside)| inside) {
            let c = Point::new((idx % width) as f64 + 0.5, (idx / width) as f64 + 0.5);
            let mut best = f64::INFINITY;
            let (mut sin, mut cos) = (0.0, 1.0);
            for &(a, b, s, co) in &top_segments {
                let d = geometry::point_segment_distance(c, a, b);
                if d < best {
                    best = d;
                    sin = s;
                    cos = co;
                }
            }
            let h2 = bottom
                .windows(2)
                .map(|w| geometry::point_segment_distance(c, w[0], w[1]))
                .fold(f64::INFINITY, f64::min);
            maps.ta[idx] = 1.0;
            maps.tca[idx] = if tca[idx] { 1.0 } else { 0.0 };
            maps.h1[idx] = best;
            maps.h2[idx] = h2;
            maps.sin_theta[idx] = sin;
            maps.cos_theta[idx] = cos;
            maps.valid_mask[idx] = true;
        }
    }
    (maps, warnings)
}

fn interpolate_pair(pairs: &[(Point, Point)], arc: &[f64], s: f64) -> (Point, Point) {
    let last = pairs.len() - 1;
    if s <= 0.0 {
        return pairs[0];
    }
    if s >= arc[last] {
        return pairs[last];
    }
    let i = arc.partition_point(|&a| a <= s).saturating_sub(1).min(last - 1);
    let span = arc[i + 1] - arc[i];
    if span <= 0.0 {
        return pairs[i];
    }
    let t = (s - arc[i]) / span;
    (pairs[i].0.lerp(pairs[i + 1].0, t), pairs[i].1.lerp(pairs[i + 1].1, t))
}

/// Shrinks a paired polygon into its text center area.
///
/// Each top/bottom pair moves towards its partner by `shrink_ratio` of the
/// pair distance, and both ends are cut back along the center line by
/// `end_trim` times the local height. Returns an empty polygon when the
/// region collapses.
pub fn shrink_to_tca(polygon: &[Point], shrink_ratio: f64, end_trim: f64) -> Vec<Point> {
    if polygon.len() < 4 || polygon.len() % 2 != 0 || shrink_ratio >= 0.5 {
        return Vec::new();
    }
    let pairs = edge_pairs(polygon);
    let mids: Vec<Point> = pairs.iter().map(|(t, b)| t.lerp(*b, 0.5)).collect();
    let mut arc = vec![0.0; mids.len()];
    for i in 1..mids.len() {
        arc[i] = arc[i - 1] + mids[i].dist(mids[i - 1]);
    }
    let total = arc[arc.len() - 1];
    let first = &pairs[0];
    let last = &pairs[pairs.len() - 1];
    let trim0 = end_trim * first.0.dist(first.1);
    let trim1 = end_trim * last.0.dist(last.1);
    if end_trim > 0.0 && trim0 + trim1 >= total {
        return Vec::new();
    }
    let (s0, s1) = (trim0, total - trim1);
    let mut kept = vec![interpolate_pair(&pairs, &arc, s0)];
    kept.extend(
        pairs
            .iter()
            .zip(&arc)
            .filter(|(_, &s)| s > s0 && s < s1)
            .map(|(p, _)| *p),
    );
    kept.push(interpolate_pair(&pairs, &arc, s1));
    let shrunk: Vec<(Point, Point)> = kept
        .into_iter()
        .map(|(t, b)| (t.lerp(b, shrink_ratio), b.lerp(t, shrink_ratio)))
        .collect();
    polygon_from_pairs(&shrunk)
}

/// Rescales an orientation pair to unit length.
pub fn normalize_angle(raw_sin: f64, raw_cos: f64) -> Result<(f64, f64)> {
    let r = raw_sin.hypot(raw_cos);
    if r < 1e-8 {
        return Err(Error::UndefinedOrientation {
            sin: raw_sin,
            cos: raw_cos,
        });
    }
    Ok((raw_sin / r, raw_cos / r))
}

/// Tightest axis-aligned rectangle covering every set pixel of a mask.
pub fn outer_rectangle(mask: &[bool], width: usize, height: usize) -> Result<Rect> {
    assert_eq!(mask.len(), width * height);
    let mut rect: Option<(usize, usize, usize, usize)> = None;
    for (idx, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (idx % width, idx / width);
        rect = Some(match rect {
            None => (x, y, x, y),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        });
    }
    let (x0, y0, x1, y1) = rect.ok_or(Error::EmptyRegion)?;
    Ok(Rect {
        x0: x0 as f64,
        y0: y0 as f64,
        x1: (x1 + 1) as f64,
        y1: (y1 + 1) as f64,
    })
}

/// Bounding rectangle of a polygon's vertices.
pub fn outer_rectangle_of_polygon(polygon: &[Point]) -> Result<Rect> {
    Rect::bounding(polygon).ok_or(Error::EmptyRegion)
}

/// Annotation file record: one image and its text instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image: String,
    pub instances: Vec<TextAnnotation>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rect_poly(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<Point> {
        vec![
            Point::new(x0, y0),
            Point::new(x1, y0),
            Point::new(x1, y1),
            Point::new(x0, y1),
        ]
    }

    /// Rectangle of size `len × h` centered at `c`, writing direction at `deg`.
    fn rotated_rect(c: Point, len: f64, h: f64, deg: f64) -> Vec<Point> {
        let t = deg.to_radians();
        let d = Point::new(t.cos(), -t.sin());
        let up = Point::new(-t.sin(), -t.cos());
        let (a, b) = (len / 2.0, h / 2.0);
        vec![
            c - d * a + up * b,
            c + d * a + up * b,
            c + d * a - up * b,
            c - d * a - up * b,
        ]
    }

    #[test]
    fn axis_aligned_rect_targets() {
        let ann = TextAnnotation::new(rect_poly(0.0, 0.0, 40.0, 10.0), "w");
        let (maps, warns) = make_geometry_maps(&[ann], 50, 20, &LabelConfig::default());
        assert!(warns.is_empty());
        // pixel centered at (20.5, 2.5)
        let idx = maps.index(20, 2);
        assert!((maps.h1[idx] - 2.5).abs() < 1e-12);
        assert!((maps.h2[idx] - 7.5).abs() < 1e-12);
        assert_eq!(maps.sin_theta[idx], 0.0);
        assert_eq!(maps.cos_theta[idx], 1.0);
    }

    #[test]
    fn rect_rotated_ninety_degrees() {
        let poly = rotated_rect(Point::new(20.0, 30.0), 40.0, 10.0, 90.0);
        let (maps, _) = make_geometry_maps(&[TextAnnotation::new(poly, "")], 40, 60, &LabelConfig::default());
        let mut n = 0;
        for idx in 0..maps.ta.len() {
            if maps.valid_mask[idx] {
                assert!((maps.sin_theta[idx] - 1.0).abs() < 1e-12);
                assert!(maps.cos_theta[idx].abs() < 1e-12);
                n += 1;
            }
        }
        assert_eq!(n, 400);
    }

    #[test]
    fn rotated_rect_matches_canonical_frame_oracle() {
        let c = Point::new(32.0, 32.0);
        let (len, h, deg) = (40.0, 12.0, 30.0);
        let poly = rotated_rect(c, len, h, deg);
        let (maps, _) = make_geometry_maps(&[TextAnnotation::new(poly, "")], 64, 64, &LabelConfig::default());
        let t = f64::to_radians(deg);
        let mut checked = 0;
        for idx in 0..maps.ta.len() {
            if !maps.valid_mask[idx] {
                continue;
            }
            let p = Point::new((idx % 64) as f64 + 0.5, (idx / 64) as f64 + 0.5) - c;
            // rotate the pixel into the frame where the text is horizontal
            let u = p.x * t.cos() - p.y * t.sin();
            let v = p.x * t.sin() + p.y * t.cos();
            let (h1, h2) = (v + h / 2.0, h / 2.0 - v);
            assert!(u.abs() <= len / 2.0 + 1e-9);
            assert!((maps.h1[idx] - h1).abs() < 1e-9, "h1 at {idx}");
            assert!((maps.h2[idx] - h2).abs() < 1e-9, "h2 at {idx}");
            assert!((maps.sin_theta[idx] - t.sin()).abs() < 1e-12);
            assert!((maps.cos_theta[idx] - t.cos()).abs() < 1e-12);
            checked += 1;
        }
        assert!(checked > 400);
    }

    #[test]
    fn shrink_identity_and_trimmed_rect() {
        let poly = rect_poly(0.0, 0.0, 40.0, 10.0);
        assert_eq!(shrink_to_tca(&poly, 0.0, 0.0), poly);
        let tca = shrink_to_tca(&poly, 0.3, 0.5);
        let r = Rect::bounding(&tca).unwrap();
        assert!((r.x0 - 5.0).abs() < 1e-12 && (r.x1 - 35.0).abs() < 1e-12);
        assert!((r.y0 - 3.0).abs() < 1e-12 && (r.y1 - 7.0).abs() < 1e-12);
    }

    #[test]
    fn shrink_thin_rect_is_near_empty() {
        let poly = rect_poly(0.0, 0.0, 40.0, 2.0);
        let tca = shrink_to_tca(&poly, 0.3, 0.5);
        let r = Rect::bounding(&tca).unwrap();
        assert!((r.height() - 0.8).abs() < 1e-12);
        let mask = geometry::rasterize(&tca, 40, 2);
        assert!(mask.iter().filter(|&&m| m).count() <= 40);
    }

    #[test]
    fn shrink_collapses_to_empty() {
        let poly = rect_poly(0.0, 0.0, 8.0, 10.0);
        assert!(shrink_to_tca(&poly, 0.3, 0.5).is_empty());
        assert!(shrink_to_tca(&poly, 0.5, 0.0).is_empty());
    }

    #[test]
    fn tca_pixels_respect_shrink_ratio() {
        let poly = rotated_rect(Point::new(40.0, 40.0), 50.0, 16.0, 17.0);
        let ann = TextAnnotation::new(poly, "");
        let cfg = LabelConfig::default();
        let (maps, _) = make_geometry_maps(&[ann], 80, 80, &cfg);
        for idx in 0..maps.tca.len() {
            if maps.tca[idx] > 0.0 {
                assert_eq!(maps.ta[idx], 1.0);
                let (h1, h2) = (maps.h1[idx], maps.h2[idx]);
                assert!(h1.min(h2) >= cfg.shrink_ratio * (h1 + h2) - 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_polygon_is_skipped() {
        let ann = TextAnnotation::new(rect_poly(3.0, 3.0, 3.5, 4.0), "x");
        let (maps, warns) = make_geometry_maps(&[ann], 10, 10, &LabelConfig::default());
        assert_eq!(warns.len(), 1);
        assert!(maps.ta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_angle_cases() {
        assert_eq!(normalize_angle(0.6, 0.8).unwrap(), (0.6, 0.8));
        let (s, c) = normalize_angle(3.0, 4.0).unwrap();
        assert!((s - 0.6).abs() < 1e-15 && (c - 0.8).abs() < 1e-15);
        assert!(matches!(
            normalize_angle(0.0, 0.0),
            Err(Error::UndefinedOrientation { .. })
        ));
    }

    #[test]
    fn outer_rectangle_cases() {
        let mut mask = vec![false; 100];
        assert!(outer_rectangle(&mask, 10, 10).is_err());
        mask[7 * 10 + 5] = true;
        assert_eq!(
            outer_rectangle(&mask, 10, 10).unwrap(),
            Rect { x0: 5.0, y0: 7.0, x1: 6.0, y1: 8.0 }
        );
        let full = vec![true; 100];
        assert_eq!(
            outer_rectangle(&full, 10, 10).unwrap(),
            Rect { x0: 0.0, y0: 0.0, x1: 10.0, y1: 10.0 }
        );
        let poly = rotated_rect(Point::new(10.0, 10.0), 4.0, 4.0, 45.0);
        let r = outer_rectangle_of_polygon(&poly).unwrap();
        let half = 2.0 * 2f64.sqrt();
        assert!((r.x0 - (10.0 - half)).abs() < 1e-12 && (r.y1 - (10.0 + half)).abs() < 1e-12);
    }

    #[test]
    fn height_constant_across_rect() {
        let poly = rect_poly(4.0, 6.0, 60.0, 20.0);
        let (maps, _) = make_geometry_maps(&[TextAnnotation::new(poly, "")], 64, 32, &LabelConfig::default());
        for idx in 0..maps.ta.len() {
            if maps.valid_mask[idx] {
                assert!((maps.text_height(idx) - 14.0).abs() <= 1.0);
            }
        }
    }

    proptest! {
        #[test]
        fn normalize_angle_is_idempotent(s in -100.0f64..100.0, c in -100.0f64..100.0) {
            prop_assume!(s.hypot(c) > 1e-6);
            let once = normalize_angle(s, c).unwrap();
            let twice = normalize_angle(once.0, once.1).unwrap();
            prop_assert!((once.0 - twice.0).abs() <= 1e-12 && (once.1 - twice.1).abs() <= 1e-12);
            prop_assert!((once.0 * once.0 + once.1 * once.1 - 1.0).abs() < 1e-12);
        }

        #[test]
        fn tca_is_subset_of_ta(
            cx in 20.0f64..44.0, cy in 20.0f64..44.0,
            len in 10.0f64..40.0, h in 4.0f64..16.0, deg in 0.0f64..360.0,
        ) {
            let poly = rotated_rect(Point::new(cx, cy), len, h, deg);
            let (maps, _) = make_geometry_maps(&[TextAnnotation::new(poly, "")], 64, 64, &LabelConfig::default());
            for idx in 0..maps.ta.len() {
                prop_assert!(maps.tca[idx] <= maps.ta[idx]);
                if maps.valid_mask[idx] {
                    let n = maps.sin_theta[idx].powi(2) + maps.cos_theta[idx].powi(2);
                    prop_assert!((n - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
