//! Channel-first floating-point images and the netpbm codecs (binary PPM
//! and PGM) that every build can read and write. PNG and JPEG go through
//! the `image` crate when the `codecs` feature is on.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `C × H × W` image, values normally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "image extents must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    /// Builds an image from interleaved 8-bit samples (`HWC`), scaling each
    /// byte by 1/255.
    pub fn from_bytes(channels: usize, height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{channels}x{height}x{width} image needs {} bytes, got {}",
                channels * height * width,
                bytes.len()
            )));
        }
        let mut data = vec![0.0; bytes.len()];
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data[(c * height + y) * width + x] =
                        normalize_pixel(bytes[(y * width + x) * channels + c]);
                }
            }
        }
        Image::new(channels, height, width, data)
    }

    /// Interleaved 8-bit samples, rounding `v·255` after clamping to `[0, 1]`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut out = vec![0u8; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(y * w + x) * c + ch] = to_byte(self.data[(ch * h + y) * w + x]);
                }
            }
        }
        out
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.data.clone(),
        )
        .expect("image extents match data")
    }

    /// Repeats a single channel three times; three-channel images pass
    /// through unchanged.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let plane = &self.data[..self.height * self.width];
        let mut data = Vec::with_capacity(3 * plane.len());
        for _ in 0..3 {
            data.extend_from_slice(plane);
        }
        Image {
            channels: 3,
            height: self.height,
            width: self.width,
            data,
        }
    }
}

pub fn normalize_pixel(byte: u8) -> f64 {
    byte as f64 / 255.0
}

pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Stacks same-shaped images into an `(N, C, H, W)` batch.
pub fn stack(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("cannot stack zero images"))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels, img.height, img.width) != (c, h, w) {
            return Err(Error::shape("images in a batch must share extents"));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

/// Decodes binary PPM (`P6`) or PGM (`P5`) with 8-bit samples.
pub fn decode_netpbm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos).ok_or("empty file")?;
    let channels = match magic {
        b"P6" => 3,
        b"P5" => 1,
        _ => return Err("not a binary PPM/PGM file".into()),
    };
    let mut field = |what: &str| -> std::result::Result<usize, String> {
        let tok = next_token(bytes, &mut pos).ok_or(format!("missing {what}"))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(format!("bad {what}"))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if maxval != 255 {
        return Err(format!("only 8-bit samples are supported (maxval {maxval})"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * channels;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format!("raster truncated: need {need} bytes"))?;
    Image::from_bytes(channels, height, width, raster).map_err(|e| e.to_string())
}

pub fn encode_netpbm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let rgb;
    let src = if img.channels == 1 || img.channels == 3 {
        img
    } else {
        rgb = img.to_rgb();
        &rgb
    };
    let mut out = format!("{magic}\n{} {}\n255\n", src.width, src.height).into_bytes();
    out.extend(src.to_bytes());
    out
}

pub fn write_netpbm(img: &Image, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_netpbm(img))?;
    Ok(())
}

fn decode_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn is_supported_extension(path: &Path) -> bool {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("ppm" | "pgm" | "pnm") => true,
        Some("png" | "jpg" | "jpeg") => cfg!(feature = "codecs"),
        _ => false,
    }
}

/// Loads an image file. Netpbm is always available; PNG/JPEG need the
/// `codecs` feature.
pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| decode_error(path, e.to_string()))?;
    if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        return decode_netpbm(&bytes).map_err(|e| decode_error(path, e));
    }
    decode_with_codecs(path, &bytes)
}

#[cfg(feature = "codecs")]
fn decode_with_codecs(path: &Path, bytes: &[u8]) -> Result<Image> {
    let img = image::load_from_memory(bytes).map_err(|e| decode_error(path, e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Image::from_bytes(3, h as usize, w as usize, rgb.as_raw())
}

#[cfg(not(feature = "codecs"))]
fn decode_with_codecs(path: &Path, _bytes: &[u8]) -> Result<Image> {
    Err(decode_error(
        path,
        "only binary PPM/PGM is supported without the `codecs` feature",
    ))
}

/// Writes `img` in the format implied by the extension: netpbm always,
/// PNG/JPEG with the `codecs` feature.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "ppm" | "pgm" | "pnm" => write_netpbm(img, path),
        _ => encode_with_codecs(img, path),
    }
}

#[cfg(feature = "codecs")]
fn encode_with_codecs(img: &Image, path: &Path) -> Result<()> {
    let rgb = if img.channels == 3 { img.clone() } else { img.to_rgb() };
    let buf = image::RgbImage::from_raw(rgb.width as u32, rgb.height as u32, rgb.to_bytes())
        .expect("buffer matches extents");
    buf.save(path)
        .map_err(|e| Error::invalid(format!("cannot write {}: {e}", path.display())))
}

#[cfg(not(feature = "codecs"))]
fn encode_with_codecs(_img: &Image, path: &Path) -> Result<()> {
    Err(Error::invalid(format!(
        "cannot write {}: only PPM/PGM output is available without the `codecs` feature",
        path.display()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_points() {
        assert_eq!(normalize_pixel(0), 0.0);
        assert_eq!(normalize_pixel(255), 1.0);
        assert!((normalize_pixel(128) - 0.50196).abs() < 1e-5);
        for b in 0..=255u8 {
            assert_eq!(to_byte(normalize_pixel(b)), b);
        }
    }

    #[test]
    fn netpbm_round_trip() {
        let bytes: Vec<u8> = (0..2 * 3 * 3).map(|v| (v * 13) as u8).collect();
        let img = Image::from_bytes(3, 2, 3, &bytes).unwrap();
        let back = decode_netpbm(&encode_netpbm(&img)).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.to_bytes(), bytes);

        let gray = Image::from_bytes(1, 2, 2, &[0, 64, 128, 255]).unwrap();
        assert_eq!(decode_netpbm(&encode_netpbm(&gray)).unwrap(), gray);
    }

    #[test]
    fn netpbm_with_comment_and_errors() {
        let mut f = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        f.extend([255, 0, 0]);
        let img = decode_netpbm(&f).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0, 0.0]);
        assert!(decode_netpbm(b"P6\n2 2\n255\n\x00").is_err());
        assert!(decode_netpbm(b"GIF89a").is_err());
        assert!(decode_netpbm(b"P6\n1 1\n65535\n\x00\x00").is_err());
    }
}
