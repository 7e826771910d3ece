//! Static figures: detection overlays and the ablation chart.

use std::path::Path;

use anyhow::{anyhow, Result};
use image::{Rgb, RgbImage};
use imageproc::drawing::draw_line_segment_mut;
use plotters::prelude::*;
use strokenet::dataset::Sample;
use strokenet::geometry::Point;
use strokenet::model::Detection;

use crate::commands::AblationRow;

const GT: Rgb<u8> = Rgb([0, 200, 0]);
const PRED: Rgb<u8> = Rgb([230, 30, 30]);

fn draw_polygon(img: &mut RgbImage, poly: &[Point], dx: f32, color: Rgb<u8>) {
    for (k, a) in poly.iter().enumerate() {
        let b = poly[(k + 1) % poly.len()];
        draw_line_segment_mut(img, (a.x as f32 + dx, a.y as f32), (b.x as f32 + dx, b.y as f32), color);
    }
}

/// The scene with ground truth in green and detections in red, followed by
/// the predicted stroke map when there is one.
pub fn overlay(sample: &Sample, det: &Detection) -> RgbImage {
    let (w, h) = (sample.width, sample.height);
    let panels = if det.stroke_map.is_some() { 2 } else { 1 };
    let mut img = RgbImage::new((w * panels) as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let i = 3 * (y * w + x);
            let px = &sample.image[i..i + 3];
            img.put_pixel(x as u32, y as u32, Rgb([px[0], px[1], px[2]]));
            if let Some(map) = &det.stroke_map {
                let v = (map[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                img.put_pixel((w + x) as u32, y as u32, Rgb([v, v, v]));
            }
        }
    }
    for ann in &sample.instances {
        draw_polygon(&mut img, &ann.polygon, 0.0, GT);
    }
    for inst in &det.instances {
        for p in 0..panels {
            draw_polygon(&mut img, &inst.polygon, (p * w) as f32, PRED);
        }
    }
    img
}

/// Grouped bars of recall, precision and hmean per ablation row.
pub fn ablation_figure(rows: &[AblationRow], path: &Path) -> Result<()> {
    let series = [("recall", BLUE), ("precision", RED), ("hmean", GREEN)];
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    let err = |e: &dyn std::fmt::Display| anyhow!("rendering {}: {e}", path.display());
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let n = rows.len().max(1) as u32;
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d((0..n * 4).into_segmented(), 0.0..1.0f64)
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(rows.len() * 4)
        .x_label_formatter(&|v| match v {
            SegmentValue::CenterOf(k) if k % 4 == 1 => rows.get((k / 4) as usize).map_or(String::new(), |r| r.ablation.clone()),
            _ => String::new(),
        })
        .y_desc("score")
        .draw()
        .map_err(|e| err(&e))?;
    for (s, (name, color)) in series.into_iter().enumerate() {
        let bars = rows.iter().enumerate().map(|(k, r)| {
            let v = [r.recall, r.precision, r.hmean][s];
            let x = k as u32 * 4 + s as u32;
            Rectangle::new(
                [(SegmentValue::Exact(x), 0.0), (SegmentValue::Exact(x + 1), v)],
                color.filled(),
            )
        });
        chart
            .draw_series(bars)
            .map_err(|e| err(&e))?
            .label(name)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(())
}
