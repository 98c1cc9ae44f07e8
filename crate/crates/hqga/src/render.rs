//! PNG rendering of trace records: heatmaps for `A` and `alpha`, a bar
//! chart for `beta`. The colour scale is pinned to `[0, 1]` so images are
//! comparable across samples.

use std::fs;
use std::path::{Path, PathBuf};

use hqga_core::hierarchy::Level;
use hqga_core::trace::TraceRecord;
use image::{Rgb, RgbImage};

use crate::error::{IoError, Result};

const CELL: u32 = 16;
const BAR_HEIGHT: u32 = 96;

/// White at 0 to deep blue at 1; values outside `[0, 1]` are clamped.
pub fn colour(v: f32) -> Rgb<u8> {
    let t = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let lerp = |a: f32, b: f32| (a + (b - a) * t).round() as u8;
    Rgb([lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0)])
}

pub fn heatmap(rows: &[Vec<f32>]) -> RgbImage {
    let h = rows.len().max(1) as u32;
    let w = rows.iter().map(Vec::len).max().unwrap_or(0).max(1) as u32;
    let mut img = RgbImage::from_pixel(w * CELL, h * CELL, colour(0.0));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            for dy in 0..CELL {
                for dx in 0..CELL {
                    img.put_pixel(j as u32 * CELL + dx, i as u32 * CELL + dy, colour(v));
                }
            }
        }
    }
    img
}

/// One bar per node; height proportional to the weight on `[0, 1]`.
pub fn bars(values: &[f32]) -> RgbImage {
    let w = values.len().max(1) as u32 * CELL;
    let mut img = RgbImage::from_pixel(w, BAR_HEIGHT, Rgb([255, 255, 255]));
    for (i, &v) in values.iter().enumerate() {
        let t = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        let top = BAR_HEIGHT - (t * BAR_HEIGHT as f32).round() as u32;
        for y in top..BAR_HEIGHT {
            for dx in 1..CELL - 1 {
                img.put_pixel(i as u32 * CELL + dx, y, colour(1.0));
            }
        }
    }
    img
}

fn file_stem(sample_id: &str) -> String {
    sample_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Writes `<sample_id>_<level>_<unit>_<tensor>.png` for every recorded
/// tensor and returns the paths in writing order.
pub fn render_trace(record: &TraceRecord, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| IoError::io(out_dir, e))?;
    let stem = file_stem(&record.sample_id);
    let mut written = Vec::new();
    let mut save = |img: RgbImage, level: Level, unit: usize, tensor: &str| -> Result<()> {
        let path = out_dir.join(format!("{stem}_{}_{unit}_{tensor}.png", level.tag()));
        img.save(&path).map_err(|e| IoError::Image { path: path.clone(), reason: e.to_string() })?;
        written.push(path);
        Ok(())
    };
    for level in Level::ALL {
        for u in record.levels.level(level) {
            if let Some(a) = &u.adjacency {
                save(heatmap(a), level, u.unit, "A")?;
            }
            if let Some(alpha) = &u.alpha {
                save(heatmap(alpha), level, u.unit, "alpha")?;
            }
            if let Some(beta) = &u.beta {
                save(bars(beta), level, u.unit, "beta")?;
            }
        }
    }
    Ok(written)
}
