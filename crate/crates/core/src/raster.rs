//! In-memory images: 8-bit rasters for I/O and statistics, float RGB for the
//! numeric pipeline.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ColorType {
    Gray,
    Rgb,
}

impl ColorType {
    pub fn channels(self) -> usize {
        match self {
            Self::Gray => 1,
            Self::Rgb => 3,
        }
    }
}

/// Interleaved 8-bit image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub color: ColorType,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, color: ColorType) -> Self {
        Self {
            width,
            height,
            color,
            data: vec![0; width * height * color.channels()],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// RGB copy, replicating gray.
    pub fn to_rgb(&self) -> Raster {
        match self.color {
            ColorType::Rgb => self.clone(),
            ColorType::Gray => Raster {
                width: self.width,
                height: self.height,
                color: ColorType::Rgb,
                data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            },
        }
    }

    pub fn to_float(&self) -> RgbImage {
        let rgb = self.to_rgb();
        RgbImage {
            width: rgb.width,
            height: rgb.height,
            data: rgb.data.iter().map(|&v| f32::from(v) / 255.0).collect(),
        }
    }

    /// Draws a one-pixel rectangle outline; edges outside the image are skipped.
    pub fn draw_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
        if self.width == 0 || self.height == 0 {
            return;
        }
        let clamp_x = |v: f64| v.round().clamp(0.0, (self.width - 1) as f64) as usize;
        let clamp_y = |v: f64| v.round().clamp(0.0, (self.height - 1) as f64) as usize;
        let (l, r, t, b) = (clamp_x(x0), clamp_x(x1), clamp_y(y0), clamp_y(y1));
        for x in l..=r {
            self.put(x, t, color);
            self.put(x, b, color);
        }
        for y in t..=b {
            self.put(l, y, color);
            self.put(r, y, color);
        }
    }

    fn put(&mut self, x: usize, y: usize, color: [u8; 3]) {
        let i = y * self.width + x;
        match self.color {
            ColorType::Rgb => self.data[3 * i..3 * i + 3].copy_from_slice(&color),
            ColorType::Gray => {
                let [r, g, b] = color.map(f64::from);
                self.data[i] = (0.299 * r + 0.587 * g + 0.114 * b).round() as u8;
            }
        }
    }
}

/// Interleaved RGB with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_raster(&self) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            color: ColorType::Rgb,
            data: self
                .data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        }
    }
}
