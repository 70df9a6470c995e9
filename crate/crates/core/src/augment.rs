//! Geometric augmentation (flip, rotation, zoom, shift) with reflect fill,
//! and bilinear resizing for multi-scale inputs.
//!
//! Every warp works by inverse mapping: each output pixel asks where it
//! came from in the source, and the source is sampled bilinearly. Source
//! coordinates outside the frame are mirrored back in without repeating the
//! border pixel (`… 2 1 0 1 2 …`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    #[default]
    Reflect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub horizontal_flip: bool,
    /// Angles are drawn from `[-rotation_range, rotation_range]` degrees.
    pub rotation_range: f64,
    /// Zoom factors are drawn from `[1 - zoom_range, 1 + zoom_range]`.
    pub zoom_range: f64,
    /// Shifts are drawn from `[-shift_range, shift_range]` of width/height.
    pub shift_range: f64,
    pub fill_mode: FillMode,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig::identity()
    }
}

impl AugmentConfig {
    /// Configuration that leaves every image untouched.
    pub fn identity() -> Self {
        AugmentConfig {
            horizontal_flip: false,
            rotation_range: 0.0,
            zoom_range: 0.0,
            shift_range: 0.0,
            fill_mode: FillMode::Reflect,
            seed: 0,
        }
    }

    /// Flip, ±20° rotation, 0.2 zoom and 0.2 shift.
    pub fn standard(seed: u64) -> Self {
        AugmentConfig {
            horizontal_flip: true,
            rotation_range: 20.0,
            zoom_range: 0.2,
            shift_range: 0.2,
            fill_mode: FillMode::Reflect,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=180.0).contains(&self.rotation_range) {
            return Err(Error::invalid(format!(
                "rotation_range {} outside [0, 180]",
                self.rotation_range
            )));
        }
        for (name, v) in [("zoom_range", self.zoom_range), ("shift_range", self.shift_range)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} {v} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        !self.horizontal_flip
            && self.rotation_range == 0.0
            && self.zoom_range == 0.0
            && self.shift_range == 0.0
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub angle: f64,
    pub zoom: f64,
    pub dx: f64,
    pub dy: f64,
}

impl AugmentParams {
    /// Always consumes exactly five uniforms so the stream position does not
    /// depend on which transforms are enabled.
    pub fn draw<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let mut sym = |range: f64| {
            let u: f64 = rng.gen();
            range * (2.0 * u - 1.0)
        };
        let flip_u = sym(1.0);
        let angle = sym(cfg.rotation_range);
        let zoom = 1.0 + sym(cfg.zoom_range);
        let dx = sym(cfg.shift_range);
        let dy = sym(cfg.shift_range);
        AugmentParams {
            flip: cfg.horizontal_flip && flip_u < 0.0,
            angle,
            zoom,
            dx,
            dy,
        }
    }
}

/// Independent stream for sample `index` under `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Mirrors `i` into `[0, n)` without repeating the edge element.
pub fn reflect_index(i: i64, n: usize) -> usize {
    if n <= 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    if m < n as i64 {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Bilinear sample of channel `c` at fractional `(y, x)` with reflect fill.
pub fn sample_bilinear(img: &Image, c: usize, y: f64, x: f64) -> f64 {
    let (h, w) = (img.height(), img.width());
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let (y0, x0) = (y0 as i64, x0 as i64);
    let ya = reflect_index(y0, h);
    let yb = reflect_index(y0 + 1, h);
    let xa = reflect_index(x0, w);
    let xb = reflect_index(x0 + 1, w);
    let top = (1.0 - fx) * img.get(c, ya, xa) + fx * img.get(c, ya, xb);
    let bottom = (1.0 - fx) * img.get(c, yb, xa) + fx * img.get(c, yb, xb);
    (1.0 - fy) * top + fy * bottom
}

/// Builds an image of the given extents from an inverse map
/// `(row, col) → (source_y, source_x)`.
fn warp(
    img: &Image,
    height: usize,
    width: usize,
    clamp: bool,
    map: impl Fn(f64, f64) -> (f64, f64),
) -> Image {
    let c = img.channels();
    let mut out = Image::filled(c, height, width, 0.0);
    for r in 0..height {
        for col in 0..width {
            let (sy, sx) = map(r as f64, col as f64);
            for ch in 0..c {
                let mut v = sample_bilinear(img, ch, sy, sx);
                if clamp {
                    v = v.clamp(0.0, 1.0);
                }
                out.set(ch, r, col, v);
            }
        }
    }
    out
}

pub fn horizontal_flip(img: &Image) -> Image {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let mut out = img.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.set(ch, y, x, img.get(ch, y, w - 1 - x));
            }
        }
    }
    out
}

/// `(sin, cos)` of an angle in degrees, exact at multiples of 90°.
fn sin_cos_degrees(deg: f64) -> (f64, f64) {
    let quarter = deg / 90.0;
    if quarter.fract() == 0.0 {
        match (quarter as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        deg.to_radians().sin_cos()
    }
}

/// Rotates about the pixel-grid center. A 90° turn sends element `(i, j)`
/// of a square image to `(j, H−1−i)`.
pub fn rotate(img: &Image, degrees: f64) -> Result<Image> {
    if !(degrees.abs() <= 180.0) {
        return Err(Error::invalid(format!("rotation angle {degrees} outside [-180, 180]")));
    }
    if degrees == 0.0 {
        return Ok(img.clone());
    }
    let (sin, cos) = sin_cos_degrees(degrees);
    let cy = (img.height() as f64 - 1.0) / 2.0;
    let cx = (img.width() as f64 - 1.0) / 2.0;
    Ok(warp(img, img.height(), img.width(), true, |r, c| {
        let (dr, dc) = (r - cy, c - cx);
        (cy + cos * dr - sin * dc, cx + sin * dr + cos * dc)
    }))
}

/// Center-anchored rescale; factors above 1 magnify.
pub fn zoom(img: &Image, factor: f64) -> Result<Image> {
    if !(factor > 0.0) {
        return Err(Error::invalid(format!("zoom factor {factor} must be > 0")));
    }
    if factor == 1.0 {
        return Ok(img.clone());
    }
    let cy = (img.height() as f64 - 1.0) / 2.0;
    let cx = (img.width() as f64 - 1.0) / 2.0;
    Ok(warp(img, img.height(), img.width(), true, |r, c| {
        (cy + (r - cy) / factor, cx + (c - cx) / factor)
    }))
}

/// Translates content by `dy·H` rows and `dx·W` columns.
pub fn shift(img: &Image, dx: f64, dy: f64) -> Image {
    if dx == 0.0 && dy == 0.0 {
        return img.clone();
    }
    let oy = dy * img.height() as f64;
    let ox = dx * img.width() as f64;
    warp(img, img.height(), img.width(), true, |r, c| (r - oy, c - ox))
}

/// Bilinear resize with corner-aligned sampling: the four corner pixels of
/// the output sample the four corner pixels of the input.
pub fn resize(img: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("resize target extents must be at least 1"));
    }
    if (height, width) == (img.height(), img.width()) {
        return Ok(img.clone());
    }
    let scale = |src: usize, dst: usize| {
        if dst == 1 {
            (0.0, (src as f64 - 1.0) / 2.0)
        } else {
            ((src as f64 - 1.0) / (dst as f64 - 1.0), 0.0)
        }
    };
    let (sy, oy) = scale(img.height(), height);
    let (sx, ox) = scale(img.width(), width);
    Ok(warp(img, height, width, false, |r, c| (r * sy + oy, c * sx + ox)))
}

/// Applies flip → rotate → zoom → shift with the given parameters.
pub fn apply(img: &Image, p: &AugmentParams) -> Result<Image> {
    let mut out = if p.flip {
        horizontal_flip(img)
    } else {
        img.clone()
    };
    out = rotate(&out, p.angle)?;
    out = zoom(&out, p.zoom)?;
    Ok(shift(&out, p.dx, p.dy))
}

/// Draws parameters from `rng` and applies them.
pub fn augment_sample<R: Rng + ?Sized>(
    img: &Image,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Image> {
    cfg.validate()?;
    let p = AugmentParams::draw(cfg, rng);
    apply(img, &p)
}
