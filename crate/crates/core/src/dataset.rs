//! On-disk dataset layout:
//!
//! ```text
//! images/NNNNNN.png    RGB scene
//! masks/NNNNNN.png     8-bit stroke mask (0 or 255)
//! annotations.jsonl    one record per sample, in index order
//! manifest.json        generator configs, seeds and counts
//! ```
//!
//! All paths stored in records are relative to the dataset root.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry_labels::TextAnnotation;
use crate::synth::{generate_sample, GenConfig, SceneSample, WordParams};

/// One line of `annotations.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub instances: Vec<TextAnnotation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub params: Vec<WordParams>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub config_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetEntry {
    pub config: GenConfig,
    pub count: usize,
    pub first_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub base_seed: u64,
    pub total: usize,
    pub subsets: Vec<SubsetEntry>,
}

fn write_png_rgb(path: &Path, w: usize, h: usize, data: Vec<u8>) -> Result<()> {
    let img = RgbImage::from_raw(w as u32, h as u32, data).expect("buffer matches dimensions");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn write_png_mask(path: &Path, w: usize, h: usize, mask: &[bool]) -> Result<()> {
    let data = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, data).expect("buffer matches dimensions");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn write_sample(root: &Path, index: usize, s: SceneSample) -> Result<SampleRecord> {
    let image = format!("images/{index:06}.png");
    let mask = format!("masks/{index:06}.png");
    write_png_rgb(&root.join(&image), s.width, s.height, s.image)?;
    write_png_mask(&root.join(&mask), s.width, s.height, &s.stroke_mask)?;
    Ok(SampleRecord {
        image,
        mask: Some(mask),
        instances: s.instances,
        params: s.params,
        seed: s.seed,
        config_id: s.config_id,
    })
}

/// Generates `count` samples per config. Sample `i` (counted across all
/// configs) uses seed `base_seed + i`. The manifest is written last, so a
/// failed run leaves none behind.
pub fn generate_dataset(configs: &[GenConfig], count: usize, base_seed: u64, out_dir: &Path) -> Result<Manifest> {
    for cfg in configs {
        cfg.validate()?;
    }
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let jobs: Vec<(usize, &GenConfig)> = configs
        .iter()
        .flat_map(|c| std::iter::repeat_n(c, count))
        .enumerate()
        .collect();
    let records: Vec<SampleRecord> = jobs
        .par_iter()
        .map(|&(i, cfg)| {
            let sample = generate_sample(cfg, base_seed + i as u64)?;
            write_sample(out_dir, i, sample)
        })
        .collect::<Result<_>>()?;
    let ann_path = out_dir.join("annotations.jsonl");
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).expect("records serialize"));
        text.push('\n');
    }
    fs::write(&ann_path, text).map_err(|e| Error::io(&ann_path, e))?;
    let manifest = Manifest {
        base_seed,
        total: records.len(),
        subsets: configs
            .iter()
            .enumerate()
            .map(|(k, c)| SubsetEntry {
                config: c.clone(),
                count,
                first_index: k * count,
            })
            .collect(),
    };
    let man_path = out_dir.join("manifest.json");
    let mut f = fs::File::create(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    writeln!(f, "{body}").map_err(|e| Error::io(&man_path, e))?;
    Ok(manifest)
}

/// A decoded sample.
#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB.
    pub image: Vec<u8>,
    pub stroke_mask: Option<Vec<bool>>,
    pub instances: Vec<TextAnnotation>,
}

impl Sample {
    /// Planar `[3, H, W]` pixel values scaled to `[0, 1]`.
    pub fn planar(&self) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                out[c * n + i] = f64::from(self.image[3 * i + c]) / 255.0;
            }
        }
        out
    }

    pub fn flipped_horizontally(&self) -> Sample {
        let (w, h) = (self.width, self.height);
        let mut image = vec![0u8; self.image.len()];
        for y in 0..h {
            for x in 0..w {
                let (src, dst) = (y * w + x, y * w + (w - 1 - x));
                image[3 * dst..3 * dst + 3].copy_from_slice(&self.image[3 * src..3 * src + 3]);
            }
        }
        let stroke_mask = self.stroke_mask.as_ref().map(|m| {
            (0..w * h).map(|i| m[(i / w) * w + (w - 1 - i % w)]).collect()
        });
        let instances = self
            .instances
            .iter()
            .map(|a| {
                // mirrored text still reads left to right, so each edge is reversed
                let k = a.polygon.len() / 2;
                let mirror = |p: &crate::geometry::Point| crate::geometry::Point::new(w as f64 - p.x, p.y);
                let top = a.polygon[..k].iter().rev().map(mirror);
                let bottom = a.polygon[k..].iter().rev().map(mirror);
                TextAnnotation::new(top.chain(bottom).collect(), a.word.clone())
            })
            .collect();
        Sample {
            name: self.name.clone(),
            width: w,
            height: h,
            image,
            stroke_mask,
            instances,
        }
    }
}

impl From<SceneSample> for Sample {
    fn from(s: SceneSample) -> Self {
        Sample {
            name: format!("seed-{}", s.seed),
            width: s.width,
            height: s.height,
            image: s.image,
            stroke_mask: Some(s.stroke_mask),
            instances: s.instances,
        }
    }
}

/// Index over a dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("annotations.jsonl");
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(&line).map_err(|source| Error::Json {
                path: path.clone(),
                source,
            })?;
            records.push(rec);
        }
        Ok(Self {
            root: root.to_path_buf(),
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<Sample> {
        let rec = &self.records[index];
        let path = self.root.join(&rec.image);
        let img = image::open(&path)
            .map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let stroke_mask = match &rec.mask {
            Some(m) => {
                let mpath = self.root.join(m);
                let mask = image::open(&mpath)
                    .map_err(|source| Error::Image { path: mpath, source })?
                    .to_luma8();
                Some(mask.into_raw().into_iter().map(|v| v >= 128).collect())
            }
            None => None,
        };
        Ok(Sample {
            name: rec.image.clone(),
            width: w,
            height: h,
            image: img.into_raw(),
            stroke_mask,
            instances: rec.instances.clone(),
        })
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).into_par_iter().map(|i| self.load(i)).collect()
    }
}
