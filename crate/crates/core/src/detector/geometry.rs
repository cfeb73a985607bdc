use serde::{Deserialize, Serialize};

use crate::raster::RgbImage;
use crate::tensor::{Shape, Tensor};

/// Axis-aligned box by center and size, in pixels of whatever frame the
/// use site states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn left(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn right(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn top(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn bottom(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.cx.is_finite() && self.cy.is_finite()
    }
}

/// Intersection over union of two boxes; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.left().max(b.left())).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.top().max(b.top())).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// IoU of two sizes with a shared center.
pub fn size_iou(w1: f64, h1: f64, w2: f64, h2: f64) -> f64 {
    let inter = w1.min(w2) * h1.min(h2);
    let union = w1 * h1 + w2 * h2 - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Maps original-image pixels into the letterboxed network canvas:
/// `net = orig * scale + pad`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LetterboxTransform {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
}

impl LetterboxTransform {
    pub const IDENTITY: Self = Self {
        scale: 1.0,
        pad_x: 0.0,
        pad_y: 0.0,
    };

    /// Fit-inside transform of an `image_w x image_h` image into the canvas,
    /// centered.
    pub fn fit(image_w: usize, image_h: usize, net_w: usize, net_h: usize) -> Self {
        let scale = (net_w as f64 / image_w as f64).min(net_h as f64 / image_h as f64);
        let new_w = resized(image_w, scale, net_w);
        let new_h = resized(image_h, scale, net_h);
        Self {
            scale,
            pad_x: ((net_w - new_w) / 2) as f64,
            pad_y: ((net_h - new_h) / 2) as f64,
        }
    }

    /// Original-image box into the network frame.
    pub fn apply(&self, b: &BBox) -> BBox {
        BBox {
            cx: b.cx * self.scale + self.pad_x,
            cy: b.cy * self.scale + self.pad_y,
            w: b.w * self.scale,
            h: b.h * self.scale,
        }
    }

    /// Network-frame box back into original-image pixels.
    pub fn map_back(&self, b: &BBox) -> BBox {
        BBox {
            cx: (b.cx - self.pad_x) / self.scale,
            cy: (b.cy - self.pad_y) / self.scale,
            w: b.w / self.scale,
            h: b.h / self.scale,
        }
    }
}

fn resized(extent: usize, scale: f64, limit: usize) -> usize {
    ((extent as f64 * scale).round() as usize).clamp(1, limit)
}

/// Gray padding value of the letterbox canvas.
pub const LETTERBOX_FILL: f32 = 0.5;

/// Aspect-preserving bilinear resize into a gray `net_w x net_h` canvas,
/// returned as a `1 x 3 x net_h x net_w` tensor.
pub fn letterbox(image: &RgbImage, net_w: usize, net_h: usize) -> (Tensor<f32>, LetterboxTransform) {
    let t = LetterboxTransform::fit(image.width, image.height, net_w, net_h);
    let mut out = Tensor::filled(Shape::new(1, 3, net_h, net_w), LETTERBOX_FILL).expect("canvas dimensions are positive");
    letterbox_into(image, &t, out.data_mut(), net_w, net_h);
    (out, t)
}

/// Writes the letterboxed image into a `3 x net_h x net_w` CHW buffer that
/// already holds the fill value.
pub fn letterbox_into(image: &RgbImage, t: &LetterboxTransform, chw: &mut [f32], net_w: usize, net_h: usize) {
    let new_w = resized(image.width, t.scale, net_w);
    let new_h = resized(image.height, t.scale, net_h);
    let (px, py) = (t.pad_x as usize, t.pad_y as usize);
    let plane = net_w * net_h;
    let max_x = (image.width - 1) as f64;
    let max_y = (image.height - 1) as f64;

    // Horizontal sample positions are shared by every row.
    let xs: Vec<(usize, usize, f32)> = (0..new_w)
        .map(|x| {
            let sx = ((x as f64 + 0.5) / t.scale - 0.5).clamp(0.0, max_x);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(image.width - 1);
            (x0, x1, (sx - x0 as f64) as f32)
        })
        .collect();
    for y in 0..new_h {
        let sy = ((y as f64 + 0.5) / t.scale - 0.5).clamp(0.0, max_y);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(image.height - 1);
        let fy = (sy - y0 as f64) as f32;
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            let (a, b) = (image.pixel(x0, y0), image.pixel(x1, y0));
            let (c, d) = (image.pixel(x0, y1), image.pixel(x1, y1));
            let dst = (py + y) * net_w + px + x;
            for ch in 0..3 {
                let top = a[ch] + (b[ch] - a[ch]) * fx;
                let bottom = c[ch] + (d[ch] - c[ch]) * fx;
                chw[ch * plane + dst] = top + (bottom - top) * fy;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_cases() {
        let a = BBox::from_corners(0.0, 0.0, 2.0, 2.0);
        let b = BBox::from_corners(1.0, 1.0, 3.0, 3.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::from_corners(5.0, 5.0, 6.0, 6.0)), 0.0);
    }

    #[test]
    fn fit_examples() {
        let t = LetterboxTransform::fit(640, 480, 640, 640);
        assert_eq!((t.scale, t.pad_x, t.pad_y), (1.0, 0.0, 80.0));
        assert_eq!(LetterboxTransform::fit(640, 640, 640, 640), LetterboxTransform::IDENTITY);
        let t = LetterboxTransform::fit(320, 240, 640, 640);
        assert_eq!((t.scale, t.pad_x, t.pad_y), (2.0, 0.0, 80.0));
    }

    #[test]
    fn map_back_arithmetic() {
        let t = LetterboxTransform::fit(640, 480, 640, 640);
        let b = t.map_back(&BBox::new(320.0, 320.0, 10.0, 10.0));
        assert_eq!((b.cx, b.cy, b.w, b.h), (320.0, 240.0, 10.0, 10.0));
        let orig = BBox::new(13.25, 400.5, 7.0, 9.5);
        let t = LetterboxTransform::fit(333, 517, 640, 640);
        let back = t.map_back(&t.apply(&orig));
        for (x, y) in [(back.cx, orig.cx), (back.cy, orig.cy), (back.w, orig.w), (back.h, orig.h)] {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn unit_scale_letterbox_copies_pixels() {
        let mut img = RgbImage::filled(4, 2, 0.0);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f32 / 24.0;
        }
        let (t, tr) = letterbox(&img, 4, 4);
        assert_eq!((tr.pad_x, tr.pad_y), (0.0, 1.0));
        assert_eq!(t.get(0, 1, 1, 2), img.pixel(2, 0)[1]);
        assert_eq!(t.get(0, 2, 2, 3), img.pixel(3, 1)[2]);
        assert_eq!(t.get(0, 0, 0, 0), LETTERBOX_FILL);
        assert_eq!(t.get(0, 0, 3, 0), LETTERBOX_FILL);
    }
}
