//! Procedural scene-text images with exact stroke masks.
//!
//! Words are drawn from an embedded stroke font, so a pixel belongs to the
//! stroke mask exactly when its center lies within the stroke radius of a
//! glyph segment. Every sample is a pure function of its config and seed.

pub mod font;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Point, Rect};
use crate::geometry_labels::TextAnnotation;
pub use font::FontId;

/// Stroke width as a fraction of the font size.
pub const STROKE_WIDTH_RATIO: f64 = 0.12;
/// Minimum luminance difference between text color and background.
pub const MIN_CONTRAST: f64 = 30.0;
const MAX_PLACEMENT_TRIES: usize = 100;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundKind {
    /// Gentle two-color gradient.
    #[default]
    Plain,
    /// Gradient with soft blobs and geometric shapes.
    Textured,
}

/// Parameters of one generated subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub id: String,
    pub font_set: Vec<FontId>,
    /// Degrees, `[lo, hi]` within `[0, 360]`.
    pub angle_range: [f64; 2],
    /// Font size (cap height) in pixels, `[lo, hi]` within `[5, 80]`.
    pub size_range: [f64; 2],
    #[serde(default = "default_min_word_len")]
    pub min_word_len: usize,
    pub max_word_len: usize,
    /// Number of letters in the alphabet, taken from `A` onwards.
    pub alpha_count: usize,
    /// Number of digits in the alphabet, taken from `0` onwards.
    pub digit_count: usize,
    /// Inclusive range of words attempted per image.
    pub words_per_image: [usize; 2],
    /// `[width, height]` in pixels.
    pub canvas: [usize; 2],
    #[serde(default)]
    pub background: BackgroundKind,
    /// Clearance kept around each word quad, as a fraction of its size.
    #[serde(default = "default_min_gap")]
    pub min_gap: f64,
}

fn default_min_word_len() -> usize {
    1
}

fn default_min_gap() -> f64 {
    0.5
}

impl GenConfig {
    /// One to three horizontal words of 15 to 40 px on plain backgrounds.
    pub fn easy() -> Self {
        Self {
            id: "easy".into(),
            font_set: vec![FontId::Simplex],
            angle_range: [0.0, 0.0],
            size_range: [15.0, 40.0],
            min_word_len: 3,
            max_word_len: 4,
            alpha_count: 10,
            digit_count: 10,
            words_per_image: [1, 3],
            canvas: [128, 128],
            background: BackgroundKind::Plain,
            min_gap: 0.5,
        }
    }

    /// Five subsets spanning size bands, angle bands and word lengths.
    pub fn default_subsets() -> Vec<GenConfig> {
        let base = GenConfig {
            font_set: FontId::ALL.to_vec(),
            background: BackgroundKind::Textured,
            ..GenConfig::easy()
        };
        vec![
            GenConfig {
                id: "small".into(),
                size_range: [5.0, 15.0],
                angle_range: [0.0, 30.0],
                max_word_len: 6,
                ..base.clone()
            },
            GenConfig {
                id: "medium".into(),
                size_range: [15.0, 40.0],
                angle_range: [0.0, 90.0],
                ..base.clone()
            },
            GenConfig {
                id: "large".into(),
                size_range: [40.0, 80.0],
                min_word_len: 1,
                max_word_len: 2,
                words_per_image: [1, 2],
                canvas: [256, 256],
                ..base.clone()
            },
            GenConfig {
                id: "rotated".into(),
                size_range: [15.0, 30.0],
                angle_range: [0.0, 360.0],
                ..base.clone()
            },
            GenConfig {
                id: "long".into(),
                size_range: [10.0, 20.0],
                min_word_len: 5,
                max_word_len: 8,
                canvas: [256, 128],
                ..base
            },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("{}: {msg}", self.id)));
        let [alo, ahi] = self.angle_range;
        if !(0.0..=360.0).contains(&alo) || !(0.0..=360.0).contains(&ahi) || alo > ahi {
            return bad(format!("angle_range {:?} must be ordered within [0, 360]", self.angle_range));
        }
        let [slo, shi] = self.size_range;
        if !(5.0..=80.0).contains(&slo) || !(5.0..=80.0).contains(&shi) || slo > shi {
            return bad(format!("size_range {:?} must be ordered within [5, 80]", self.size_range));
        }
        if self.font_set.is_empty() {
            return bad("font_set is empty".into());
        }
        if self.min_word_len == 0 || self.min_word_len > self.max_word_len {
            return bad("word lengths must satisfy 1 <= min_word_len <= max_word_len".into());
        }
        if self.alpha_count > 26 || self.digit_count > 10 || self.alpha_count + self.digit_count == 0 {
            return bad("alphabet must hold 1..=26 letters and 0..=10 digits".into());
        }
        if self.words_per_image[0] > self.words_per_image[1] {
            return bad("words_per_image must be ordered".into());
        }
        if self.canvas[0] == 0 || self.canvas[1] == 0 {
            return bad("canvas must be non-empty".into());
        }
        if !(self.min_gap >= 0.0) {
            return bad("min_gap must be non-negative".into());
        }
        Ok(())
    }

    pub fn alphabet(&self) -> Vec<char> {
        ('A'..='Z')
            .take(self.alpha_count)
            .chain(('0'..='9').take(self.digit_count))
            .collect()
    }
}

/// `(sin, cos)` of an angle in degrees, exact at multiples of 90°.
pub fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    match r {
        0.0 => (0.0, 1.0),
        90.0 => (1.0, 0.0),
        180.0 => (0.0, -1.0),
        270.0 => (-1.0, 0.0),
        _ => r.to_radians().sin_cos(),
    }
}

/// A word laid out in its own frame: `u` along the writing direction, `v`
/// downwards, origin at the center of the glyph extent.
#[derive(Clone, Debug)]
pub struct WordShape {
    segments: Vec<(Point, Point)>,
    pub radius: f64,
    pub half_u: f64,
    pub half_v: f64,
    pub sin: f64,
    pub cos: f64,
    pub center: Point,
}

impl WordShape {
    pub fn new(word: &str, font: FontId, size: f64, angle_deg: f64, center: Point) -> Result<Self> {
        let raw = font::word_segments(word, font)?;
        let scale = size / font::CELL_HEIGHT;
        let pts: Vec<Point> = raw.iter().flat_map(|&(a, b)| [a * scale, b * scale]).collect();
        let r = Rect::bounding(&pts).ok_or(Error::EmptyWord)?;
        let mid = Point::new((r.x0 + r.x1) / 2.0, (r.y0 + r.y1) / 2.0);
        let radius = STROKE_WIDTH_RATIO * size / 2.0;
        let (sin, cos) = sin_cos_deg(angle_deg);
        Ok(Self {
            segments: raw.iter().map(|&(a, b)| (a * scale - mid, b * scale - mid)).collect(),
            radius,
            half_u: r.width() / 2.0 + radius,
            half_v: r.height() / 2.0 + radius,
            sin,
            cos,
            center,
        })
    }

    fn direction(&self) -> Point {
        Point::new(self.cos, -self.sin)
    }

    fn down(&self) -> Point {
        Point::new(self.sin, self.cos)
    }

    pub fn to_local(&self, p: Point) -> Point {
        let q = p - self.center;
        Point::new(q.dot(self.direction()), q.dot(self.down()))
    }

    pub fn to_image(&self, l: Point) -> Point {
        self.center + self.direction() * l.x + self.down() * l.y
    }

    /// Distance from an image point to the nearest glyph segment.
    pub fn distance(&self, p: Point) -> f64 {
        let l = self.to_local(p);
        if l.x.abs() > self.half_u + 1.0 || l.y.abs() > self.half_v + 1.0 {
            return f64::INFINITY;
        }
        self.segments
            .iter()
            .map(|&(a, b)| geometry::point_segment_distance(l, a, b))
            .fold(f64::INFINITY, f64::min)
    }

    /// Tight quad around the strokes grown by `margin` on every side, in
    /// the annotation vertex order (top edge first, along the writing).
    pub fn quad_with_margin(&self, margin: f64) -> Vec<Point> {
        let (u, v) = (self.half_u + margin, self.half_v + margin);
        [(-u, -v), (u, -v), (u, v), (-u, v)]
            .iter()
            .map(|&(a, b)| self.to_image(Point::new(a, b)))
            .collect()
    }

    pub fn quad(&self) -> Vec<Point> {
        self.quad_with_margin(0.0)
    }

    /// Pixel bounds (inclusive start, exclusive end) covering the quad.
    fn pixel_bounds(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let r = Rect::bounding(&self.quad_with_margin(1.0)).expect("quad has corners");
        let clamp = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
        (
            clamp(r.x0.floor(), width),
            clamp(r.y0.floor(), height),
            clamp(r.x1.ceil() + 1.0, width),
            clamp(r.y1.ceil() + 1.0, height),
        )
    }
}

/// A word drawn on its own canvas, centered on an integer pixel corner.
#[derive(Clone, Debug)]
pub struct WordRaster {
    pub width: usize,
    pub height: usize,
    /// Anti-aliased ink coverage in `[0, 1]`.
    pub coverage: Vec<f64>,
    pub mask: Vec<bool>,
    pub quad: Vec<Point>,
}

pub fn render_word(word: &str, font: FontId, size: f64, angle_deg: f64) -> Result<WordRaster> {
    let mut shape = WordShape::new(word, font, size, angle_deg, Point::default())?;
    let quad = shape.quad();
    let hx = quad.iter().map(|p| p.x.abs()).fold(0.0, f64::max);
    let hy = quad.iter().map(|p| p.y.abs()).fold(0.0, f64::max);
    let (cx, cy) = (hx.ceil() as usize + 1, hy.ceil() as usize + 1);
    shape.center = Point::new(cx as f64, cy as f64);
    let (width, height) = (2 * cx, 2 * cy);
    let mut coverage = vec![0.0; width * height];
    let mut mask = vec![false; width * height];
    for y in 0..height {
        for x in 0..width {
            let d = shape.distance(Point::new(x as f64 + 0.5, y as f64 + 0.5));
            coverage[y * width + x] = ink(d, shape.radius);
            mask[y * width + x] = d <= shape.radius;
        }
    }
    Ok(WordRaster {
        width,
        height,
        coverage,
        mask,
        quad: shape.quad(),
    })
}

fn ink(dist: f64, radius: f64) -> f64 {
    (radius + 0.5 - dist).clamp(0.0, 1.0)
}

/// Sampled parameters of one placed word.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordParams {
    pub font: FontId,
    pub size: f64,
    pub angle: f64,
    pub color: [u8; 3],
    /// Mean background luminance under the word before drawing.
    pub background_luma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB.
    pub image: Vec<u8>,
    pub stroke_mask: Vec<bool>,
    pub instances: Vec<TextAnnotation>,
    pub params: Vec<WordParams>,
    pub seed: u64,
    pub config_id: String,
    /// Words that could not be placed.
    pub dropped: usize,
}

pub fn luma(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn random_color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

fn paint_background(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let [w, h] = cfg.canvas;
    let spread = match cfg.background {
        BackgroundKind::Plain => 25.0,
        BackgroundKind::Textured => 70.0,
    };
    let c0 = random_color(rng, 30.0, 225.0);
    let mut c1 = c0;
    for v in &mut c1 {
        *v = (*v + rng.random_range(-spread..spread)).clamp(0.0, 255.0);
    }
    let (s, c) = rng.random_range(0.0..std::f64::consts::TAU).sin_cos();
    let extent = (w as f64).hypot(h as f64);
    let mut img = vec![[0.0; 3]; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = Point::new(x as f64 + 0.5 - w as f64 / 2.0, y as f64 + 0.5 - h as f64 / 2.0);
            let t = ((p.x * c + p.y * s) / extent + 0.5).clamp(0.0, 1.0);
            for k in 0..3 {
                img[y * w + x][k] = c0[k] + (c1[k] - c0[k]) * t;
            }
        }
    }
    if cfg.background == BackgroundKind::Textured {
        let scale = w.min(h) as f64;
        for _ in 0..rng.random_range(4..10) {
            let center = Point::new(rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
            let radius = rng.random_range(0.05..0.3) * scale;
            let color = random_color(rng, 0.0, 255.0);
            let alpha = rng.random_range(0.2..0.5);
            for (i, px) in img.iter_mut().enumerate() {
                let p = Point::new((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
                let t = 1.0 - p.dist(center) / radius;
                if t > 0.0 {
                    let a = alpha * t.min(1.0);
                    for k in 0..3 {
                        px[k] += (color[k] - px[k]) * a;
                    }
                }
            }
        }
        for _ in 0..rng.random_range(2..6) {
            let x0 = rng.random_range(0.0..w as f64);
            let y0 = rng.random_range(0.0..h as f64);
            let x1 = x0 + rng.random_range(3.0..0.4 * scale);
            let y1 = y0 + rng.random_range(3.0..0.4 * scale);
            let color = random_color(rng, 0.0, 255.0);
            let alpha = rng.random_range(0.2..0.5);
            let outline = rng.random_bool(0.5);
            for (i, px) in img.iter_mut().enumerate() {
                let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
                let inside = x >= x0 && x < x1 && y >= y0 && y < y1;
                let edge = inside && (x - x0 < 1.5 || x1 - x < 1.5 || y - y0 < 1.5 || y1 - y < 1.5);
                if (outline && edge) || (!outline && inside) {
                    for k in 0..3 {
                        px[k] += (color[k] - px[k]) * alpha;
                    }
                }
            }
        }
    }
    img
}

fn mean_under(img: &[[f64; 3]], width: usize, shape: &WordShape, bounds: (usize, usize, usize, usize)) -> [f64; 3] {
    let quad = shape.quad();
    let (x0, y0, x1, y1) = bounds;
    let (mut sum, mut n) = ([0.0; 3], 0.0);
    for y in y0..y1 {
        for x in x0..x1 {
            if geometry::contains(&quad, Point::new(x as f64 + 0.5, y as f64 + 0.5)) {
                for k in 0..3 {
                    sum[k] += img[y * width + x][k];
                }
                n += 1.0;
            }
        }
    }
    if n == 0.0 {
        return [127.5; 3];
    }
    sum.map(|s| s / n)
}

fn pick_text_color(rng: &mut ChaCha8Rng, bg_luma: f64) -> [u8; 3] {
    for _ in 0..64 {
        let c = [0, 1, 2].map(|_| rng.random_range(0u8..=255));
        if (luma(c.map(f64::from)) - bg_luma).abs() >= MIN_CONTRAST {
            return c;
        }
    }
    if bg_luma > 127.5 {
        [0, 0, 0]
    } else {
        [255, 255, 255]
    }
}

/// Generates one scene. Identical `(cfg, seed)` give identical samples.
pub fn generate_sample(cfg: &GenConfig, seed: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [w, h] = cfg.canvas;
    let mut img = paint_background(cfg, &mut rng);
    let mut mask = vec![false; w * h];
    let alphabet = cfg.alphabet();
    let wanted = rng.random_range(cfg.words_per_image[0]..=cfg.words_per_image[1]);
    let mut placed: Vec<WordShape> = Vec::new();
    let mut instances = Vec::new();
    let mut params = Vec::new();
    let mut dropped = 0;
    for _ in 0..wanted {
        let mut chosen = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let len = rng.random_range(cfg.min_word_len..=cfg.max_word_len);
            let word: String = (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
            let font = cfg.font_set[rng.random_range(0..cfg.font_set.len())];
            let size = rng.random_range(cfg.size_range[0]..=cfg.size_range[1]);
            let angle = rng.random_range(cfg.angle_range[0]..=cfg.angle_range[1]);
            let mut shape = WordShape::new(&word, font, size, angle, Point::default())?;
            let quad = shape.quad_with_margin(1.0);
            let hx = quad.iter().map(|p| p.x.abs()).fold(0.0, f64::max);
            let hy = quad.iter().map(|p| p.y.abs()).fold(0.0, f64::max);
            if 2.0 * hx >= w as f64 || 2.0 * hy >= h as f64 {
                continue;
            }
            shape.center = Point::new(
                rng.random_range(hx..w as f64 - hx),
                rng.random_range(hy..h as f64 - hy),
            );
            let grown = shape.quad_with_margin(cfg.min_gap * size);
            let clash = placed
                .iter()
                .any(|o| geometry::area(&geometry::convex_intersection(&grown, &o.quad_with_margin(1.0))) > 0.0);
            if !clash {
                chosen = Some((word, font, size, angle, shape));
                break;
            }
        }
        let Some((word, font, size, angle, shape)) = chosen else {
            dropped += 1;
            continue;
        };
        let bounds = shape.pixel_bounds(w, h);
        let bg = mean_under(&img, w, &shape, bounds);
        let bg_luma = luma(bg);
        let color = pick_text_color(&mut rng, bg_luma);
        let (x0, y0, x1, y1) = bounds;
        for y in y0..y1 {
            for x in x0..x1 {
                let d = shape.distance(Point::new(x as f64 + 0.5, y as f64 + 0.5));
                let a = ink(d, shape.radius);
                if a > 0.0 {
                    let px = &mut img[y * w + x];
                    for k in 0..3 {
                        px[k] += (f64::from(color[k]) - px[k]) * a;
                    }
                }
                if d <= shape.radius {
                    mask[y * w + x] = true;
                }
            }
        }
        instances.push(TextAnnotation::new(shape.quad(), word));
        params.push(WordParams {
            font,
            size,
            angle,
            color,
            background_luma: bg_luma,
        });
        placed.push(shape);
    }
    if dropped > 0 {
        info!("seed {seed}: placed {} of {wanted} words", placed.len());
    }
    let image = img
        .iter()
        .flat_map(|px| px.map(|v| v.round().clamp(0.0, 255.0) as u8))
        .collect();
    Ok(SceneSample {
        width: w,
        height: h,
        image,
        stroke_mask: mask,
        instances,
        params,
        seed,
        config_id: cfg.id.clone(),
        dropped,
    })
}
