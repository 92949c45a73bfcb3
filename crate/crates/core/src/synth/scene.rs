//! Procedural scenes: a textured background with rectangles, ellipses and
//! stripes painted back to front.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};

pub const BACKGROUND: u8 = 0;
pub const RECTANGLE: u8 = 1;
pub const ELLIPSE: u8 = 2;
pub const STRIPE: u8 = 3;

/// Base colour per class; classes past the palette reuse it cyclically with
/// a brightness shift.
const PALETTE: [[f64; 3]; 4] = [
    [0.45, 0.50, 0.40],
    [0.85, 0.30, 0.25],
    [0.25, 0.40, 0.85],
    [0.90, 0.85, 0.30],
];

const COLOR_JITTER: f64 = 0.06;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub size: usize,
    pub num_classes: usize,
    /// Inclusive range for the number of foreground shapes.
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub noise_sigma: f64,
}

impl SceneSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            size: 64,
            num_classes: 4,
            min_shapes: 2,
            max_shapes: 6,
            noise_sigma: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config(format!("scene size must be at least 8, got {}", self.size)));
        }
        if !(1..=255).contains(&self.num_classes) {
            return Err(Error::Config(format!("num_classes must be in 1..=255, got {}", self.num_classes)));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::Config(format!(
                "min_shapes {} exceeds max_shapes {}",
                self.min_shapes, self.max_shapes
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

fn class_color(class: u8, rng: &mut SeededRng) -> [f64; 3] {
    let base = PALETTE[class as usize % PALETTE.len()];
    let shift = (class as usize / PALETTE.len()) as f64 * 0.15;
    base.map(|c| {
        let c = if shift > 0.0 { (c + shift) % 1.0 } else { c };
        (c + rng.random_range(-COLOR_JITTER..COLOR_JITTER)).clamp(0.0, 1.0)
    })
}

fn shape_mask(class: u8, size: usize, rng: &mut SeededRng) -> impl Fn(f64, f64) -> bool {
    let s = size as f64;
    let kind = (class as usize - 1) % 3;
    let cx = rng.random_range(0.0..s);
    let cy = rng.random_range(0.0..s);
    let a = rng.random_range(s / 10.0..s / 4.0);
    let b = rng.random_range(s / 10.0..s / 4.0);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let (sin, cos) = theta.sin_cos();
    move |x: f64, y: f64| match kind {
        0 => (x - cx).abs() <= a && (y - cy).abs() <= b,
        1 => {
            let (u, v) = ((x - cx) * cos + (y - cy) * sin, -(x - cx) * sin + (y - cy) * cos);
            (u / a).powi(2) + (v / b).powi(2) <= 1.0
        }
        _ => ((x - cx) * cos + (y - cy) * sin).abs() <= a / 4.0 + 1.0,
    }
}

/// Renders the scene described by `spec`; identical specs give identical bits.
pub fn generate_scene(spec: &SceneSpec) -> Result<Sample> {
    spec.validate()?;
    let n = spec.size;
    let mut rng = rng::seeded(spec.seed);
    let mut labels = vec![BACKGROUND; n * n];
    let mut color = vec![class_color(BACKGROUND, &mut rng); n * n];

    let count = rng.random_range(spec.min_shapes..=spec.max_shapes);
    if spec.num_classes > 1 {
        for _ in 0..count {
            let class = rng.random_range(1..spec.num_classes) as u8;
            let fill = class_color(class, &mut rng);
            let inside = shape_mask(class, n, &mut rng);
            for r in 0..n {
                for c in 0..n {
                    if inside(c as f64 + 0.5, r as f64 + 0.5) {
                        labels[r * n + c] = class;
                        color[r * n + c] = fill;
                    }
                }
            }
        }
    }

    let plane = n * n;
    let mut image = vec![0.0; 3 * plane];
    for (p, rgb) in color.iter().enumerate() {
        for ch in 0..3 {
            let noise = if spec.noise_sigma > 0.0 {
                spec.noise_sigma * rng::normal(&mut rng)
            } else {
                0.0
            };
            image[ch * plane + p] = (rgb[ch] + noise).clamp(0.0, 1.0);
        }
    }
    Ok(Sample::new(n, n, image, labels))
}
