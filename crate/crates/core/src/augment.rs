//! Photometric augmentation in HSV space: hue shift, saturation and
//! exposure scaling. Boxes are untouched.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::raster::RgbImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Maximum saturation scale factor (>= 1).
    pub saturation: f64,
    /// Maximum value (brightness) scale factor (>= 1).
    pub exposure: f64,
    /// Maximum hue shift as a fraction of the hue circle, in `[0, 0.5]`.
    pub hue: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            saturation: 1.5,
            exposure: 1.5,
            hue: 0.1,
        }
    }
}

impl AugmentConfig {
    /// No-op configuration.
    pub const IDENTITY: Self = Self {
        saturation: 1.0,
        exposure: 1.0,
        hue: 0.0,
    };

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.saturation.is_nan() || self.saturation < 1.0 {
            out.push(format!("saturation {} must be >= 1", self.saturation));
        }
        if self.exposure.is_nan() || self.exposure < 1.0 {
            out.push(format!("exposure {} must be >= 1", self.exposure));
        }
        if !(0.0..=0.5).contains(&self.hue) {
            out.push(format!("hue {} must lie in [0, 0.5]", self.hue));
        }
        out
    }
}

/// Hexcone conversion; `h` in `[0, 1)`, `s` and `v` in `[0, 1]`.
pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    if delta <= 0.0 || max <= 0.0 {
        return [0.0, 0.0, v];
    }
    let s = delta / max;
    let mut h = if r == max {
        (g - b) / delta
    } else if g == max {
        2.0 + (b - r) / delta
    } else {
        4.0 + (r - g) / delta
    } / 6.0;
    if h < 0.0 {
        h += 1.0;
    }
    if h >= 1.0 {
        h -= 1.0;
    }
    [h, s, v]
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    if s <= 0.0 {
        return [v, v, v];
    }
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Draws `u` uniform in `[1, max]` and returns `u` or `1 / u` with equal
/// probability, so the factor lies in `[1 / max, max]`.
pub fn sample_scale<R: Rng + ?Sized>(max: f64, rng: &mut R) -> f64 {
    let u = if max > 1.0 { rng.gen_range(1.0..=max) } else { 1.0 };
    if rng.gen_bool(0.5) {
        u
    } else {
        1.0 / u
    }
}

/// Factors drawn for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterDraw {
    pub hue_shift: f64,
    pub saturation_scale: f64,
    pub exposure_scale: f64,
}

impl JitterDraw {
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let hue_shift = if cfg.hue > 0.0 { rng.gen_range(-cfg.hue..=cfg.hue) } else { 0.0 };
        Self {
            hue_shift,
            saturation_scale: sample_scale(cfg.saturation, rng),
            exposure_scale: sample_scale(cfg.exposure, rng),
        }
    }

    pub fn apply(&self, image: &RgbImage) -> RgbImage {
        let mut out = image.clone();
        for px in out.data.chunks_exact_mut(3) {
            let [h, s, v] = rgb_to_hsv([px[0], px[1], px[2]].map(f64::from));
            let hsv = [
                (h + self.hue_shift).rem_euclid(1.0),
                (s * self.saturation_scale).clamp(0.0, 1.0),
                (v * self.exposure_scale).clamp(0.0, 1.0),
            ];
            let rgb = hsv_to_rgb(hsv);
            for (dst, src) in px.iter_mut().zip(rgb) {
                *dst = (src as f32).clamp(0.0, 1.0);
            }
        }
        out
    }
}

/// Random hue/saturation/exposure jitter of a whole image.
pub fn jitter<R: Rng + ?Sized>(image: &RgbImage, cfg: &AugmentConfig, rng: &mut R) -> RgbImage {
    JitterDraw::sample(cfg, rng).apply(image)
}
