//! Deterministic synthetic images standing in for the real corpora.
//!
//! * Eye crops: vertical bars (eyes open, class 1) versus horizontal bars
//!   (eyes closed, class 0) over a noisy background.
//! * Pedestrian windows: a head/torso/legs silhouette centred in a 128x64
//!   window (class 1) versus clutter, off-centre or wrongly scaled figures
//!   (class 0).
//! * Frames: cluttered backgrounds with silhouettes planted at known boxes.

use crate::data::{DatasetSplit, LabeledImage};
use crate::detector::BBox;
use crate::model::{NEGATIVE, POSITIVE};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const PEDESTRIAN_WINDOW: (usize, usize) = (128, 64);

/// Single-channel canvas with clamped drawing helpers.
#[derive(Debug, Clone)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Canvas {
    pub fn new(height: usize, width: usize, value: f64) -> Self {
        Canvas {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    /// Fills the axis-aligned rectangle `[x0, x1) x [y0, y1)`, clipped.
    pub fn fill_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, value: f64) {
        let cx = |v: f64| v.round().clamp(0.0, self.width as f64) as usize;
        let cy = |v: f64| v.round().clamp(0.0, self.height as f64) as usize;
        let (xa, xb, ya, yb) = (cx(x0), cx(x1), cy(y0), cy(y1));
        for y in ya..yb {
            self.pixels[y * self.width + xa..y * self.width + xb].fill(value);
        }
    }

    pub fn fill_disc(&mut self, cx: f64, cy: f64, r: f64, value: f64) {
        for y in 0..self.height {
            for x in 0..self.width {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    self.pixels[y * self.width + x] = value;
                }
            }
        }
    }

    pub fn add_noise(&mut self, rng: &mut Rng, amplitude: f64) {
        for p in &mut self.pixels {
            *p += rng.uniform(-amplitude, amplitude);
        }
    }

    pub fn into_tensor(self) -> Tensor {
        let data = self.pixels.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Tensor::new(vec![1, self.height, self.width], data).expect("canvas is well-formed")
    }
}

/// Bar-pattern eye crop of side `size`. Bars run vertically when `open`.
pub fn eye_patch(rng: &mut Rng, size: usize, open: bool) -> Tensor {
    let unit = size as f64 / 24.0;
    let base = rng.uniform(0.3, 0.6);
    let contrast = rng.uniform(0.3, 0.4) * if rng.below(2) == 0 { 1.0 } else { -1.0 };
    let period = rng.uniform(6.0, 10.0) * unit;
    let phase = rng.uniform(0.0, period);
    let mut c = Canvas::new(size, size, base);
    for y in 0..size {
        for x in 0..size {
            let along = if open { x } else { y } as f64 + phase;
            if (along / period).fract() < 0.5 {
                c.pixels[y * size + x] = base + contrast;
            }
        }
    }
    c.add_noise(rng, 0.04);
    c.into_tensor()
}

/// Eye fixture split with the given per-set sizes, classes alternating so
/// every set is balanced.
pub fn eye_split(seed: u64, train: usize, validation: usize, test: usize) -> DatasetSplit<LabeledImage> {
    let mut rng = Rng::new(seed);
    let mut make = |n: usize, tag: &str| -> Vec<LabeledImage> {
        (0..n)
            .map(|i| {
                let label = if i % 2 == 0 { POSITIVE } else { NEGATIVE };
                LabeledImage {
                    pixels: eye_patch(&mut rng, 24, label == POSITIVE),
                    label,
                    source_path: format!("synthetic/eye/{tag}/{i:04}").into(),
                }
            })
            .collect()
    };
    let train = make(train, "train");
    let validation = make(validation, "val");
    let test = make(test, "test");
    DatasetSplit { train, validation, test, seed }
}

/// Cluttered background: brightness ramp, a few random rectangles, noise.
pub fn background(rng: &mut Rng, height: usize, width: usize) -> Canvas {
    let base = rng.uniform(0.25, 0.65);
    let ramp = rng.uniform(-0.15, 0.15);
    let mut c = Canvas::new(height, width, base);
    for y in 0..height {
        let shift = ramp * (y as f64 / height as f64 - 0.5);
        for v in &mut c.pixels[y * width..(y + 1) * width] {
            *v += shift;
        }
    }
    let blobs = 2 + rng.below(4) as usize;
    for _ in 0..blobs {
        let w = rng.uniform(6.0, 40.0);
        let h = rng.uniform(6.0, 40.0);
        let x = rng.uniform(-10.0, width as f64);
        let y = rng.uniform(-10.0, height as f64);
        let v = (base + rng.uniform(-0.3, 0.3)).clamp(0.0, 1.0);
        c.fill_rect(x, y, x + w, y + h, v);
    }
    c.add_noise(rng, 0.06);
    c
}

/// Draws a standing figure whose nominal 128x64 box has top-left
/// `(left, top)`, scaled by `scale` about the box centre.
pub fn draw_figure(c: &mut Canvas, rng: &mut Rng, left: f64, top: f64, scale: f64) {
    let (wh, ww) = (PEDESTRIAN_WINDOW.0 as f64, PEDESTRIAN_WINDOW.1 as f64);
    let (cx, cy) = (left + ww / 2.0, top + wh / 2.0);
    let sx = |v: f64| cx + (v - ww / 2.0) * scale;
    let sy = |v: f64| cy + (v - wh / 2.0) * scale;
    let level = c.pixels[(cy.clamp(0.0, c.height as f64 - 1.0) as usize) * c.width + cx.clamp(0.0, c.width as f64 - 1.0) as usize];
    let delta = rng.uniform(0.3, 0.45);
    let tone = if level > 0.5 { level - delta } else { level + delta }.clamp(0.0, 1.0);
    // head
    c.fill_disc(sx(32.0), sy(22.0), 9.0 * scale, tone);
    // torso
    c.fill_rect(sx(21.0), sy(32.0), sx(43.0), sy(74.0), tone);
    // arms
    c.fill_rect(sx(15.0), sy(34.0), sx(20.0), sy(68.0), tone);
    c.fill_rect(sx(44.0), sy(34.0), sx(49.0), sy(68.0), tone);
    // legs
    c.fill_rect(sx(22.0), sy(74.0), sx(30.0), sy(118.0), tone);
    c.fill_rect(sx(34.0), sy(74.0), sx(42.0), sy(118.0), tone);
}

/// One 128x64 training window. Positives hold a centred figure with small
/// jitter; negatives are clutter, displaced figures, or mis-scaled figures.
pub fn pedestrian_window(rng: &mut Rng, positive: bool) -> Tensor {
    let (h, w) = PEDESTRIAN_WINDOW;
    let mut c = background(rng, h, w);
    if positive {
        let scale = rng.uniform(0.92, 1.08);
        let dx = rng.uniform(-4.0, 4.0);
        let dy = rng.uniform(-6.0, 6.0);
        draw_figure(&mut c, rng, dx, dy, scale);
    } else {
        let sign = |rng: &mut Rng| if rng.below(2) == 0 { -1.0 } else { 1.0 };
        match rng.below(10) {
            0..=3 => {}
            4..=5 => {
                let dx = sign(rng) * rng.uniform(14.0, 44.0);
                let dy = rng.uniform(-12.0, 12.0);
                let scale = rng.uniform(0.9, 1.1);
                draw_figure(&mut c, rng, dx, dy, scale);
            }
            6 => {
                let dy = sign(rng) * rng.uniform(26.0, 70.0);
                let dx = rng.uniform(-6.0, 6.0);
                let scale = rng.uniform(0.9, 1.1);
                draw_figure(&mut c, rng, dx, dy, scale);
            }
            _ => {
                let scale = if rng.below(2) == 0 { rng.uniform(0.45, 0.75) } else { rng.uniform(1.3, 1.7) };
                let dx = rng.uniform(-8.0, 8.0);
                let dy = rng.uniform(-10.0, 10.0);
                draw_figure(&mut c, rng, dx, dy, scale);
            }
        }
    }
    c.into_tensor()
}

pub fn pedestrian_split(seed: u64, train: usize, validation: usize, test: usize) -> DatasetSplit<LabeledImage> {
    let mut rng = Rng::new(seed);
    let mut make = |n: usize, tag: &str| -> Vec<LabeledImage> {
        (0..n)
            .map(|i| {
                // 2 positives for every 3 negatives
                let label = if i % 5 < 2 { POSITIVE } else { NEGATIVE };
                LabeledImage {
                    pixels: pedestrian_window(&mut rng, label == POSITIVE),
                    label,
                    source_path: format!("synthetic/pedestrian/{tag}/{i:04}").into(),
                }
            })
            .collect()
    };
    let train = make(train, "train");
    let validation = make(validation, "val");
    let test = make(test, "test");
    DatasetSplit { train, validation, test, seed }
}

/// A frame with figures planted at stride-aligned positions. Returns the
/// frame and the planted boxes.
pub fn pedestrian_frame(rng: &mut Rng, height: usize, width: usize, plants: usize, grid: usize) -> (Tensor, Vec<BBox>) {
    let (wh, ww) = PEDESTRIAN_WINDOW;
    let mut c = background(rng, height, width);
    let mut boxes: Vec<BBox> = Vec::new();
    let cols = (width - ww) / grid + 1;
    let rows = (height - wh) / grid + 1;
    let mut attempts = 0;
    while boxes.len() < plants && attempts < 1000 {
        attempts += 1;
        let x = (rng.below(cols as u64) as usize * grid) as f64;
        let y = (rng.below(rows as u64) as usize * grid) as f64;
        if boxes.iter().any(|b| (b.x - x).abs() < ww as f64 * 1.5) {
            continue;
        }
        boxes.push(BBox::new(x, y, ww as f64, wh as f64));
    }
    for b in &boxes {
        draw_figure(&mut c, rng, b.x, b.y, 1.0);
    }
    (c.into_tensor(), boxes)
}

/// Driver-camera frame with an eye pattern of side `roi.w` planted at `roi`.
pub fn driver_frame(rng: &mut Rng, height: usize, width: usize, roi: &BBox, open: bool) -> Tensor {
    let mut c = Canvas::new(height, width, rng.uniform(0.3, 0.6));
    c.add_noise(rng, 0.05);
    let side = roi.w as usize;
    let patch = eye_patch(rng, side, open);
    for y in 0..side {
        for x in 0..side {
            c.pixels[(roi.y as usize + y) * width + roi.x as usize + x] = patch.data()[y * side + x];
        }
    }
    c.into_tensor()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_deterministic() {
        let a = eye_split(3, 10, 4, 4);
        let b = eye_split(3, 10, 4, 4);
        assert_eq!(a, b);
        let p1 = pedestrian_window(&mut Rng::new(8), true);
        let p2 = pedestrian_window(&mut Rng::new(8), true);
        assert_eq!(p1, p2);
    }

    #[test]
    fn shapes_and_range() {
        let mut rng = Rng::new(1);
        let e = eye_patch(&mut rng, 24, true);
        assert_eq!(e.shape(), &[1, 24, 24]);
        let p = pedestrian_window(&mut rng, false);
        assert_eq!(p.shape(), &[1, 128, 64]);
        let (f, boxes) = pedestrian_frame(&mut rng, 192, 256, 2, 16);
        assert_eq!(f.shape(), &[1, 192, 256]);
        assert_eq!(boxes.len(), 2);
        for t in [&e, &p, &f] {
            assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn splits_are_balanced() {
        let s = eye_split(1, 200, 50, 50);
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (200, 50, 50));
        assert_eq!(s.train.iter().filter(|i| i.label == POSITIVE).count(), 100);
    }
}
