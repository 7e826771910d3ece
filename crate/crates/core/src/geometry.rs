//! Planar primitives shared by labeling, proposals, grouping and rendering.
//!
//! Image coordinates: x to the right, y down, origin at the top-left corner.
//! Pixel `(row i, col j)` is sampled at its center `(j + 0.5, i + 0.5)`.

use std::ops::{Add, Mul, Sub};

use geo::{Area, BooleanOps, ConvexHull};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Point) -> f64 {
        (self - o).norm()
    }

    pub fn lerp(self, o: Point, t: f64) -> Point {
        self + (o - self) * t
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }
}

/// Axis-aligned rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// Tightest rectangle around a point set.
    pub fn bounding(points: &[Point]) -> Option<Rect> {
        let first = points.first()?;
        let mut r = Rect {
            x0: first.x,
            y0: first.y,
            x1: first.x,
            y1: first.y,
        };
        for p in &points[1..] {
            r.x0 = r.x0.min(p.x);
            r.y0 = r.y0.min(p.y);
            r.x1 = r.x1.max(p.x);
            r.y1 = r.y1.max(p.y);
        }
        Some(r)
    }
}

/// Shoelace area, positive for clockwise-on-screen (counter-clockwise in
/// y-up) vertex order.
pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    (0..n)
        .map(|i| poly[i].cross(poly[(i + 1) % n]))
        .sum::<f64>()
        * 0.5
}

pub fn area(poly: &[Point]) -> f64 {
    signed_area(poly).abs()
}

/// Even-odd point containment.
pub fn contains(poly: &[Point], p: Point) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Pixels whose centers lie inside the polygon (even-odd rule), row-major.
pub fn rasterize(poly: &[Point], width: usize, height: usize) -> Vec<bool> {
    let mut out = vec![false; width * height];
    if poly.len() < 3 {
        return out;
    }
    let n = poly.len();
    let mut xs = Vec::new();
    for i in 0..height {
        let yc = i as f64 + 0.5;
        xs.clear();
        for k in 0..n {
            let (a, b) = (poly[k], poly[(k + 1) % n]);
            if (a.y > yc) != (b.y > yc) {
                xs.push(a.x + (yc - a.y) * (b.x - a.x) / (b.y - a.y));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            // centers j + 0.5 with left <= center < right
            let j0 = (pair[0] - 0.5).ceil().max(0.0) as usize;
            let j1 = (pair[1] - 0.5).ceil().clamp(0.0, width as f64) as usize;
            for j in j0..j1.min(width) {
                out[i * width + j] = true;
            }
        }
    }
    out
}

pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.dist(a + ab * t)
}

/// Intersection of two convex polygons by Sutherland–Hodgman clipping.
pub fn convex_intersection(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut out: Vec<Point> = subject.to_vec();
    if out.len() < 3 || clip.len() < 3 {
        return Vec::new();
    }
    let orient = signed_area(clip).signum();
    let m = clip.len();
    for k in 0..m {
        let (a, b) = (clip[k], clip[(k + 1) % m]);
        let inside = |p: Point| (b - a).cross(p - a) * orient >= 0.0;
        let input = std::mem::take(&mut out);
        if input.is_empty() {
            break;
        }
        let n = input.len();
        for i in 0..n {
            let cur = input[i];
            let prev = input[(i + n - 1) % n];
            let (ci, pi) = (inside(cur), inside(prev));
            if ci != pi {
                let d1 = (b - a).cross(prev - a);
                let d2 = (b - a).cross(cur - a);
                let t = d1 / (d1 - d2);
                out.push(prev.lerp(cur, t));
            }
            if ci {
                out.push(cur);
            }
        }
    }
    out
}

/// IoU of two convex polygons.
pub fn convex_iou(a: &[Point], b: &[Point]) -> f64 {
    let inter = area(&convex_intersection(a, b));
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

fn to_geo(poly: &[Point]) -> geo::Polygon<f64> {
    let coords: Vec<geo::Coord<f64>> = poly.iter().map(|p| geo::coord! { x: p.x, y: p.y }).collect();
    geo::Polygon::new(geo::LineString::from(coords), Vec::new())
}

/// IoU of two simple (possibly non-convex) polygons.
pub fn polygon_iou(a: &[Point], b: &[Point]) -> f64 {
    if a.len() < 3 || b.len() < 3 {
        return 0.0;
    }
    let (ga, gb) = (to_geo(a), to_geo(b));
    let inter = ga.intersection(&gb).unsigned_area();
    let union = ga.union(&gb).unsigned_area();
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Convex hull with positive signed area, without collinear points.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let coords: Vec<geo::Coord<f64>> = points.iter().map(|p| geo::coord! { x: p.x, y: p.y }).collect();
    let hull = geo::MultiPoint::from(coords).convex_hull();
    let mut ring: Vec<Point> = hull.exterior().points().map(|c| Point::new(c.x(), c.y())).collect();
    if ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    ring
}

fn orientation(a: Point, b: Point, c: Point) -> f64 {
    (b - a).cross(c - a)
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) - 1e-12
        && p.x <= a.x.max(b.x) + 1e-12
        && p.y >= a.y.min(b.y) - 1e-12
        && p.y <= a.y.max(b.y) + 1e-12
}

/// Closed-segment intersection test.
pub fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = orientation(q1, q2, p1);
    let d2 = orientation(q1, q2, p2);
    let d3 = orientation(p1, p2, q1);
    let d4 = orientation(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// True when no two non-adjacent edges of the closed polygon touch.
pub fn is_simple(poly: &[Point]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if a == b {
            return false;
        }
        for j in i + 1..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (c, d) = (poly[j], poly[(j + 1) % n]);
            if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<Point> {
        vec![
            Point::new(x0, y0),
            Point::new(x1, y0),
            Point::new(x1, y1),
            Point::new(x0, y1),
        ]
    }

    #[test]
    fn raster_counts_pixel_centers() {
        let mask = rasterize(&rect(0.0, 0.0, 4.0, 3.0), 10, 10);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 12);
        let mask = rasterize(&rect(0.6, 0.6, 1.4, 1.4), 4, 4);
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn raster_agrees_with_containment() {
        let poly = vec![
            Point::new(1.3, 2.2),
            Point::new(17.9, 4.1),
            Point::new(12.2, 15.7),
            Point::new(7.0, 9.0),
            Point::new(2.5, 14.0),
        ];
        let mask = rasterize(&poly, 20, 20);
        for i in 0..20 {
            for j in 0..20 {
                let c = Point::new(j as f64 + 0.5, i as f64 + 0.5);
                assert_eq!(mask[i * 20 + j], contains(&poly, c), "pixel {i},{j}");
            }
        }
    }

    #[test]
    fn convex_iou_cases() {
        let a = rect(0.0, 0.0, 2.0, 2.0);
        assert!((convex_iou(&a, &a) - 1.0).abs() < 1e-12);
        assert_eq!(convex_iou(&a, &rect(5.0, 5.0, 6.0, 6.0)), 0.0);
        let b = rect(1.0, 0.0, 3.0, 2.0);
        assert!((convex_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert!((polygon_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn hull_and_simplicity() {
        let pts = vec![
            Point::new(0.0, 0.0),
            Point::new(2.0, 0.0),
            Point::new(1.0, 1.0),
            Point::new(2.0, 2.0),
            Point::new(0.0, 2.0),
        ];
        let hull = convex_hull(&pts);
        assert_eq!(hull.len(), 4);
        assert!((signed_area(&hull) - 4.0).abs() < 1e-12);
        assert!(is_simple(&rect(0.0, 0.0, 1.0, 1.0)));
        let bowtie = vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 1.0),
            Point::new(1.0, 0.0),
            Point::new(0.0, 1.0),
        ];
        assert!(!is_simple(&bowtie));
    }
}
