//! Seeded synthetic scenes: dark elliptical blobs on a light, noisy gray
//! background, with exact bounding boxes. Used for smoke tests and the
//! overfit check.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::BBox;
use crate::evaldata::{format_yolo_annotations, write_pnm};
use crate::raster::RgbImage;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    /// Semi-axis range in pixels.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Minimum distance between blob centers.
    pub separation: f64,
    pub background: f32,
    pub foreground: f32,
    /// Amplitude of the uniform pixel noise.
    pub noise: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 160,
            height: 160,
            min_blobs: 10,
            max_blobs: 30,
            min_radius: 3.0,
            max_radius: 7.0,
            separation: 12.0,
            background: 0.67,
            foreground: 0.42,
            noise: 0.06,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub image: RgbImage,
    pub boxes: Vec<BBox>,
}

pub fn generate_scene(cfg: &SynthConfig, seed: u64) -> SynthScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rng.gen_range(cfg.min_blobs..=cfg.max_blobs);
    let mut blobs: Vec<(f64, f64, f64, f64)> = Vec::with_capacity(target);
    let mut attempts = 0;
    while blobs.len() < target && attempts < 10_000 {
        attempts += 1;
        let a = rng.gen_range(cfg.min_radius..=cfg.max_radius);
        let b = rng.gen_range(cfg.min_radius..=cfg.max_radius);
        let cx = rng.gen_range(a..cfg.width as f64 - a);
        let cy = rng.gen_range(b..cfg.height as f64 - b);
        if blobs.iter().all(|&(x, y, _, _)| (x - cx).hypot(y - cy) >= cfg.separation) {
            blobs.push((cx, cy, a, b));
        }
    }

    let mut image = RgbImage::filled(cfg.width, cfg.height, cfg.background);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = blobs
                .iter()
                .any(|&(cx, cy, a, b)| ((px - cx) / a).powi(2) + ((py - cy) / b).powi(2) <= 1.0);
            let base = if inside { cfg.foreground } else { cfg.background };
            let v = (base + rng.gen_range(-cfg.noise..=cfg.noise)).clamp(0.0, 1.0);
            let i = 3 * (y * cfg.width + x);
            image.data[i..i + 3].fill(v);
        }
    }
    SynthScene {
        image,
        boxes: blobs.iter().map(|&(cx, cy, a, b)| BBox::new(cx, cy, 2.0 * a, 2.0 * b)).collect(),
    }
}

/// Writes `count` scenes as `synth_<i>.ppm` plus annotation files and a
/// `train.list` list (not `.txt`, so it never pairs with an image) into `dir`; returns the list path.
pub fn write_dataset(dir: &Path, cfg: &SynthConfig, count: usize, seed: u64) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut list = String::new();
    for i in 0..count {
        let scene = generate_scene(cfg, seed.wrapping_add(i as u64));
        let name = format!("synth_{i:03}");
        fs::write(dir.join(format!("{name}.ppm")), write_pnm(&scene.image.to_raster()))?;
        fs::write(
            dir.join(format!("{name}.txt")),
            format_yolo_annotations(&scene.boxes, cfg.width, cfg.height),
        )?;
        list.push_str(&format!("{name}.ppm\n"));
    }
    let path = dir.join("train.list");
    fs::write(&path, list)?;
    Ok(path)
}
