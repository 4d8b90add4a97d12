//! A tiny synthetic "radiograph" world used as ground truth in tests and the
//! toy shortcut experiment.
//!
//! Each finding is drawn as a distinct shape on a smooth noisy background.
//! [`ShapeOracle`] reads an image back by normalized cross-correlation
//! against the shape templates, so it can stand in for a human reader.

use std::collections::BTreeSet;

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::hashing::stable_hash64;
use crate::imaging::{from_unit, resize_square, to_unit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Ring,
    Bar,
    Cross,
    Triangle,
    Disk,
    Checker,
    Dot,
}

pub const ALL_SHAPES: [Shape; 8] = [
    Shape::Square,
    Shape::Ring,
    Shape::Bar,
    Shape::Cross,
    Shape::Triangle,
    Shape::Disk,
    Shape::Checker,
    Shape::Dot,
];

impl Shape {
    /// The shape that stands for a finding key in the toy world.
    pub fn for_finding(key: &str) -> Option<Shape> {
        Some(match key {
            "cardiomegaly" => Shape::Square,
            "edema" => Shape::Ring,
            "pleural_effusion" => Shape::Bar,
            "pneumonia" => Shape::Cross,
            "hernia" => Shape::Triangle,
            "mass" => Shape::Disk,
            "emphysema" => Shape::Checker,
            "nodule" => Shape::Dot,
            _ => return None,
        })
    }

    pub fn finding(self) -> &'static str {
        match self {
            Shape::Square => "cardiomegaly",
            Shape::Ring => "edema",
            Shape::Bar => "pleural_effusion",
            Shape::Cross => "pneumonia",
            Shape::Triangle => "hernia",
            Shape::Disk => "mass",
            Shape::Checker => "emphysema",
            Shape::Dot => "nodule",
        }
    }

    /// Fallback for free-text prompts outside the finding map.
    pub fn for_text(text: &str) -> Shape {
        ALL_SHAPES[(stable_hash64(&[text.as_bytes()]) % ALL_SHAPES.len() as u64) as usize]
    }

    /// Binary mask of side `extent`, row-major.
    pub fn mask(self, extent: usize) -> Vec<f32> {
        let e = extent as f32;
        let c = (e - 1.0) / 2.0;
        let r = e / 2.0 - 0.25;
        let mut m = vec![0f32; extent * extent];
        for y in 0..extent {
            for x in 0..extent {
                let (fx, fy) = (x as f32, y as f32);
                let d = ((fx - c).powi(2) + (fy - c).powi(2)).sqrt();
                let arm = (e / 8.0).max(1.0);
                let on = match self {
                    Shape::Square => true,
                    Shape::Disk => d <= r,
                    Shape::Ring => d <= r && d >= r - (e / 5.0).max(1.0),
                    Shape::Dot => d <= e / 4.0,
                    Shape::Bar => (fy - c).abs() <= e / 6.0,
                    Shape::Cross => (fy - c).abs() <= arm || (fx - c).abs() <= arm,
                    Shape::Triangle => (fx - c).abs() <= (fy + 0.5) / 2.0,
                    Shape::Checker => {
                        let b = (extent / 4).max(1);
                        (x / b + y / b) % 2 == 0
                    }
                };
                if on {
                    m[y * extent + x] = 1.0;
                }
            }
        }
        m
    }
}

/// Rendering parameters of the toy world. Images are square, values in [0,1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeWorld {
    pub size: usize,
    pub background: f32,
    pub shading: f32,
    pub noise_sd: f32,
    pub shape_intensity: f32,
}

impl Default for ShapeWorld {
    fn default() -> Self {
        ShapeWorld {
            size: 32,
            background: 0.25,
            shading: 0.08,
            noise_sd: 0.04,
            shape_intensity: 0.85,
        }
    }
}

impl ShapeWorld {
    pub fn extent(&self) -> usize {
        (self.size / 4).max(3)
    }

    /// Smooth shaded background with pixel noise; a "no finding" scan.
    // the rounded constants are part of the rendered images; keep them
    #[allow(clippy::approx_constant)]
    pub fn background(&self, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.size;
        let (px, py): (f32, f32) = (rng.random_range(0.0..6.283), rng.random_range(0.0..6.283));
        let (fx, fy): (f32, f32) = (rng.random_range(0.5..1.5), rng.random_range(0.5..1.5));
        let noise = Normal::new(0.0f32, self.noise_sd.max(0.0)).expect("finite sd");
        let mut out = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let u = x as f32 / n as f32 * 3.1416 * fx + px;
                let v = y as f32 / n as f32 * 3.1416 * fy + py;
                let shade = self.shading * (u.sin() + v.cos()) / 2.0;
                let val = self.background + shade + noise.sample(&mut rng);
                out.push(val.clamp(0.0, 1.0));
            }
        }
        out
    }

    /// Blends `shape` into `pixels` with its top-left corner at (x0, y0).
    pub fn stamp(&self, pixels: &mut [f32], shape: Shape, x0: usize, y0: usize, extent: usize, alpha: f32) {
        let n = self.size;
        let mask = shape.mask(extent);
        for y in 0..extent {
            for x in 0..extent {
                let (ix, iy) = (x0 + x, y0 + y);
                if ix >= n || iy >= n {
                    continue;
                }
                let a = alpha * mask[y * extent + x];
                let p = &mut pixels[iy * n + ix];
                *p = (1.0 - a) * *p + a * self.shape_intensity;
            }
        }
    }

    /// Renders a scan carrying exactly the given shapes at non-overlapping
    /// random positions.
    pub fn render(&self, shapes: &[Shape], seed: u64) -> Vec<f32> {
        let full: Vec<(Shape, f32)> = shapes.iter().map(|&s| (s, 1.0)).collect();
        self.render_with_alpha(&full, seed)
    }

    /// As [`ShapeWorld::render`] with a per-shape opacity.
    pub fn render_with_alpha(&self, shapes: &[(Shape, f32)], seed: u64) -> Vec<f32> {
        let mut pixels = self.background(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
        let e = self.extent();
        let mut placed: Vec<(usize, usize)> = Vec::new();
        for &(shape, alpha) in shapes {
            let mut pos = None;
            for _ in 0..200 {
                let x = rng.random_range(1..=self.size - e - 1);
                let y = rng.random_range(1..=self.size - e - 1);
                let clear = placed
                    .iter()
                    .all(|&(px, py)| x.abs_diff(px) > e + 1 || y.abs_diff(py) > e + 1);
                if clear {
                    pos = Some((x, y));
                    break;
                }
            }
            // crowded canvas: overlap rather than drop a labeled finding
            let (x, y) = pos.unwrap_or_else(|| {
                (
                    rng.random_range(1..=self.size - e - 1),
                    rng.random_range(1..=self.size - e - 1),
                )
            });
            placed.push((x, y));
            self.stamp(&mut pixels, shape, x, y, e, alpha);
        }
        pixels
    }

    pub fn render_image(&self, shapes: &[Shape], seed: u64) -> GrayImage {
        from_unit(&self.render(shapes, seed), self.size as u32, self.size as u32)
            .expect("world size matches buffer")
    }
}

/// Template-matching reader for the toy world.
#[derive(Debug, Clone)]
pub struct ShapeOracle {
    world_size: usize,
    extent: usize,
    templates: Vec<(Shape, Vec<f32>)>,
    pub threshold: f32,
}

impl ShapeOracle {
    pub fn new(world: &ShapeWorld) -> Self {
        let extent = world.extent();
        let side = extent + 2;
        let templates = ALL_SHAPES
            .iter()
            .map(|&s| {
                let m = s.mask(extent);
                let mut t = vec![0f32; side * side];
                for y in 0..extent {
                    for x in 0..extent {
                        t[(y + 1) * side + x + 1] = m[y * extent + x];
                    }
                }
                let mean = t.iter().sum::<f32>() / t.len() as f32;
                t.iter_mut().for_each(|v| *v -= mean);
                let norm = t.iter().map(|v| v * v).sum::<f32>().sqrt();
                t.iter_mut().for_each(|v| *v /= norm);
                (s, t)
            })
            .collect();
        ShapeOracle {
            world_size: world.size,
            extent,
            templates,
            threshold: 0.8,
        }
    }

    /// Best correlation per shape, counted only where that shape is the
    /// best-matching template at the position.
    pub fn scores(&self, img: &GrayImage) -> Vec<(Shape, f32)> {
        let img = if img.width() as usize != self.world_size || img.height() as usize != self.world_size {
            resize_square(img, self.world_size as u32)
        } else {
            img.clone()
        };
        let px = to_unit(&img);
        let n = self.world_size;
        let side = self.extent + 2;
        let mut best = vec![f32::NEG_INFINITY; self.templates.len()];
        let mut window = vec![0f32; side * side];
        for y0 in 0..=n - side {
            for x0 in 0..=n - side {
                for y in 0..side {
                    window[y * side..(y + 1) * side]
                        .copy_from_slice(&px[(y0 + y) * n + x0..(y0 + y) * n + x0 + side]);
                }
                let mean = window.iter().sum::<f32>() / window.len() as f32;
                let norm = window.iter().map(|v| (v - mean).powi(2)).sum::<f32>().sqrt();
                if norm < 1e-3 {
                    continue;
                }
                let mut top = (0usize, f32::NEG_INFINITY);
                for (k, (_, t)) in self.templates.iter().enumerate() {
                    let ncc = window.iter().zip(t).map(|(w, t)| (w - mean) * t).sum::<f32>() / norm;
                    if ncc > top.1 {
                        top = (k, ncc);
                    }
                }
                if top.1 > best[top.0] {
                    best[top.0] = top.1;
                }
            }
        }
        self.templates
            .iter()
            .zip(best)
            .map(|((s, _), b)| (*s, b))
            .collect()
    }

    pub fn detect(&self, img: &GrayImage) -> BTreeSet<Shape> {
        self.scores(img)
            .into_iter()
            .filter(|(_, s)| *s >= self.threshold)
            .map(|(shape, _)| shape)
            .collect()
    }

    /// Finding keys read as present.
    pub fn read_findings(&self, img: &GrayImage) -> BTreeSet<&'static str> {
        self.detect(img).into_iter().map(Shape::finding).collect()
    }
}
