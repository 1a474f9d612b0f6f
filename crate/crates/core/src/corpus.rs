//! Source images: a procedural generator and a loader for image folders.
//!
//! Procedural sources are drawn at four times the requested extent and box
//! downsampled, like photographs fed through the same pipeline.

use std::borrow::Cow;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::imageio;
use crate::synth::{box_downsample4, derive_seed, seeded_rng, BurstSpec};
use crate::tensor::Tensor;

enum Fill {
    Flat,
    Stripes { freq: f64, angle: f64, contrast: f64 },
    Checker { period: f64, contrast: f64 },
}

enum Shape {
    Rect { cx: f64, cy: f64, hw: f64, hh: f64, angle: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Line { x0: f64, y0: f64, x1: f64, y1: f64, width: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { cx, cy, hw, hh, angle } => {
                let (u, v) = rotate(x - cx, y - cy, angle);
                u.abs() <= hw && v.abs() <= hh
            }
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (u, v) = rotate(x - cx, y - cy, angle);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Line { x0, y0, x1, y1, width } => {
                let (dx, dy) = (x1 - x0, y1 - y0);
                let len2 = dx * dx + dy * dy;
                let t = (((x - x0) * dx + (y - y0) * dy) / len2).clamp(0.0, 1.0);
                let (px, py) = (x0 + t * dx - x, y0 + t * dy - y);
                px * px + py * py <= width * width
            }
        }
    }
}

fn rotate(x: f64, y: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (c * x + s * y, -s * x + c * y)
}

impl Fill {
    fn value(&self, base: f64, x: f64, y: f64) -> f64 {
        match *self {
            Fill::Flat => base,
            Fill::Stripes { freq, angle, contrast } => {
                let (u, _) = rotate(x, y, angle);
                base + contrast * (std::f64::consts::TAU * freq * u).sin()
            }
            Fill::Checker { period, contrast } => {
                let parity = ((x / period).floor() as i64 + (y / period).floor() as i64).rem_euclid(2);
                base + if parity == 0 { contrast } else { -contrast }
            }
        }
    }
}

/// A random scene of `size x size` pixels in `[0, 1]`: a smooth background
/// with overlapping flat, striped and checkered shapes and thin lines.
pub fn procedural_source(size: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let big = 4 * size;
    let n = big as f64;
    let base = rng.random_range(0.15..0.85);
    let gx = rng.random_range(-0.3..0.3) / n;
    let gy = rng.random_range(-0.3..0.3) / n;
    let mut img: Vec<f64> = (0..big * big)
        .map(|i| base + gx * (i % big) as f64 + gy * (i / big) as f64)
        .collect();

    let count = rng.random_range(8..20);
    for _ in 0..count {
        let cx = rng.random_range(0.0..n);
        let cy = rng.random_range(0.0..n);
        let scale = n * rng.random_range(0.04..0.3);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let shape = match rng.random_range(0..5) {
            0 | 1 => Shape::Rect {
                cx,
                cy,
                hw: scale,
                hh: scale * rng.random_range(0.2..1.0),
                angle,
            },
            2 | 3 => Shape::Ellipse {
                cx,
                cy,
                rx: scale,
                ry: scale * rng.random_range(0.3..1.0),
                angle,
            },
            _ => Shape::Line {
                x0: cx,
                y0: cy,
                x1: cx + 2.0 * scale * angle.cos(),
                y1: cy + 2.0 * scale * angle.sin(),
                width: rng.random_range(2.0..8.0),
            },
        };
        let contrast = rng.random_range(0.05..0.25);
        let fill = match rng.random_range(0..4) {
            0 => Fill::Stripes {
                freq: 1.0 / rng.random_range(6.0..40.0),
                angle: rng.random_range(0.0..std::f64::consts::PI),
                contrast,
            },
            1 => Fill::Checker {
                period: rng.random_range(8.0..48.0),
                contrast,
            },
            _ => Fill::Flat,
        };
        let value = rng.random_range(0.0..1.0);
        for (i, px) in img.iter_mut().enumerate() {
            let (x, y) = ((i % big) as f64 + 0.5, (i / big) as f64 + 0.5);
            if shape.contains(x, y) {
                *px = fill.value(value, x, y);
            }
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let full = Tensor::new(&[big, big], img).expect("finite pixels");
    box_downsample4(&full).expect("extent is a multiple of 4")
}

/// `count` procedural scenes of `size x size`, scene `i` seeded by
/// `(seed, i)`.
pub fn procedural_corpus(count: usize, size: usize, seed: u64) -> Vec<Tensor<f64>> {
    (0..count)
        .map(|i| procedural_source(size, &mut seeded_rng(derive_seed(seed, i as u64))))
        .collect()
}

/// Where bursts draw their clean content from.
#[derive(Debug, Clone)]
pub enum SourcePool {
    /// A fresh procedural scene per burst.
    Procedural,
    /// Preloaded images, picked uniformly at random.
    Images(Vec<Tensor<f64>>),
}

impl SourcePool {
    pub fn pick(&self, spec: &BurstSpec, rng: &mut impl Rng) -> Result<Cow<'_, Tensor<f64>>> {
        match self {
            SourcePool::Procedural => Ok(Cow::Owned(procedural_source(spec.min_source() + 8, rng))),
            SourcePool::Images(images) => {
                if images.is_empty() {
                    return Err(Error::Config("empty image pool".into()));
                }
                Ok(Cow::Borrowed(&images[rng.random_range(0..images.len())]))
            }
        }
    }
}

/// Image files (`png`, `pgm`, `pnm`) directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm" | "pnm"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no png/pgm images in {}", dir.display())));
    }
    Ok(files)
}

/// Loads each image as grayscale, crops it to a multiple of 4 and
/// downsamples it by 4. Images smaller than `min_extent` after downsampling
/// are skipped.
pub fn load_sources(dir: &Path, min_extent: usize) -> Result<Vec<Tensor<f64>>> {
    let mut out = Vec::new();
    for path in list_images(dir)? {
        let img = imageio::load_gray(&path)?;
        let (h, w) = img.dims2()?;
        let (h4, w4) = (h / 4 * 4, w / 4 * 4);
        if h4 / 4 < min_extent || w4 / 4 < min_extent {
            continue;
        }
        let cropped = Tensor::from_fn(&[h4, w4], |i| img.data()[(i / w4) * w + i % w4]);
        out.push(box_downsample4(&cropped)?);
    }
    if out.is_empty() {
        return Err(Error::Config(format!(
            "no image in {} is large enough ({min_extent}px after 4x downsampling)",
            dir.display()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn procedural_is_deterministic_and_in_range() {
        let a = procedural_source(48, &mut seeded_rng(1));
        let b = procedural_source(48, &mut seeded_rng(1));
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[48, 48]);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = a.mean();
        let var = a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / a.len() as f64;
        assert!(var > 1e-4, "scene has structure");
    }

    #[test]
    fn folder_loading() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(&[130, 70], |i| (i % 7) as f64 / 6.0);
        imageio::save_png(&img, &dir.path().join("a.png")).unwrap();
        imageio::save_png(&Tensor::<f64>::zeros(&[20, 20]), &dir.path().join("small.png")).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let sources = load_sources(dir.path(), 10).unwrap();
        assert_eq!(sources.len(), 1);
        assert_eq!(sources[0].shape(), &[32, 17]);
        assert!(load_sources(dir.path(), 40).is_err());
    }
}
