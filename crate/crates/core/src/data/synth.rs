//! Colored-blob images for smoke tests: class `k` places a disc at one of
//! nine grid cells in one of three colors, over a noisy gray background.

use rand::Rng;

use super::{Dataset, Sample};
use crate::augment::sample_rng;
use crate::error::{Error, Result};
use crate::image::Image;

const COLORS: [[f64; 3]; 3] = [[0.9, 0.15, 0.1], [0.15, 0.8, 0.2], [0.1, 0.25, 0.9]];
const MAX_CLASSES: usize = 27;

fn layout(k: usize) -> (usize, usize) {
    let cell = k % 9;
    let color = (k + k / 9) % 3;
    (cell, color)
}

/// `classes × per_class` samples of size `3 × height × width`.
pub fn synth_dataset(
    classes: usize,
    per_class: usize,
    (height, width): (usize, usize),
    seed: u64,
) -> Result<Dataset> {
    if !(2..=MAX_CLASSES).contains(&classes) {
        return Err(Error::invalid(format!(
            "synthetic data supports 2..={MAX_CLASSES} classes, got {classes}"
        )));
    }
    if height < 8 || width < 8 {
        return Err(Error::invalid("synthetic images must be at least 8x8"));
    }
    let names = (0..classes).map(|k| format!("class_{k:02}")).collect();
    let radius = height.min(width) as f64 / 7.0;
    let jitter = radius / 3.0;
    let mut samples = Vec::with_capacity(classes * per_class);
    for k in 0..classes {
        let (cell, color) = layout(k);
        let cy = (cell / 3) as f64 * height as f64 / 3.0 + height as f64 / 6.0;
        let cx = (cell % 3) as f64 * width as f64 / 3.0 + width as f64 / 6.0;
        for i in 0..per_class {
            let mut rng = sample_rng(seed, (k * per_class + i) as u64);
            let oy = cy + rng.gen_range(-jitter..=jitter);
            let ox = cx + rng.gen_range(-jitter..=jitter);
            let mut img = Image::filled(3, height, width, 0.0);
            for y in 0..height {
                for x in 0..width {
                    let (dy, dx) = (y as f64 + 0.5 - oy, x as f64 + 0.5 - ox);
                    let inside = dy * dy + dx * dx <= radius * radius;
                    for c in 0..3 {
                        let base = if inside { COLORS[color][c] } else { 0.4 };
                        let v = base + rng.gen_range(-0.05..0.05);
                        img.set(c, y, x, v.clamp(0.0, 1.0));
                    }
                }
            }
            samples.push(Sample {
                image: img,
                label: k,
                source: None,
            });
        }
    }
    Dataset::new(names, samples)
}
