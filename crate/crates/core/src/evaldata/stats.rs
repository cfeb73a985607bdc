use serde::Serialize;

use crate::raster::{ColorType, Raster};

/// Gray-level histogram with population mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageStats {
    pub mean: f64,
    pub std: f64,
    pub histogram: Vec<u64>,
}

/// `round(0.299 R + 0.587 G + 0.114 B)`.
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    (0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b)).round() as u8
}

pub fn grayscale_stats(image: &Raster) -> ImageStats {
    let mut histogram = vec![0u64; 256];
    match image.color {
        ColorType::Gray => image.data.iter().for_each(|&v| histogram[v as usize] += 1),
        ColorType::Rgb => image
            .data
            .chunks_exact(3)
            .for_each(|p| histogram[luma(p[0], p[1], p[2]) as usize] += 1),
    }
    let count: u64 = histogram.iter().sum();
    if count == 0 {
        return ImageStats {
            mean: 0.0,
            std: 0.0,
            histogram,
        };
    }
    let sum: u64 = histogram.iter().enumerate().map(|(v, &c)| v as u64 * c).sum();
    let mean = sum as f64 / count as f64;
    let var = histogram
        .iter()
        .enumerate()
        .map(|(v, &c)| c as f64 * (v as f64 - mean).powi(2))
        .sum::<f64>()
        / count as f64;
    ImageStats {
        mean,
        std: var.sqrt(),
        histogram,
    }
}
