//! Image container, PNG I/O, luminance conversion and patch augmentation.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Planar image with intensities nominally in `[0, 1]`.
///
/// Samples are stored channel-major: `data[(c * height + y) * width + x]`.
/// Values produced by the network may leave the unit interval; they are
/// clamped only when saved or measured.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!(
                "expected 1 or 3 channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!(
                "zero-dimension image {height}x{width}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidImage(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Image::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    /// Builds an image from a per-sample function `f(channel, y, x)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Image::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn clamped(&self) -> Image {
        Image {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..*self
        }
    }

    /// Crops the rectangle `[top, top+height) x [left, left+width)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width} at ({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        Image::from_fn(height, width, self.channels, |c, y, x| {
            self.get(c, top + y, left + x)
        })
    }

    /// Center-crops to the largest dimensions divisible by `factor`.
    pub fn crop_to_multiple(&self, factor: usize) -> Result<Image> {
        let h = self.height - self.height % factor;
        let w = self.width - self.width % factor;
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "{}x{} image has no {factor}-divisible crop",
                self.height, self.width
            )));
        }
        if (h, w) == (self.height, self.width) {
            return Ok(self.clone());
        }
        self.crop((self.height - h) / 2, (self.width - w) / 2, h, w)
    }
}

/// Reads an 8- or 16-bit PNG; grayscale inputs are replicated to three channels.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decode_err = |e: png::DecodingError| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(decode_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::UnsupportedFormat("png output buffer too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(decode_err)?;
    let (width, height) = (info.width as usize, info.height as usize);
    if width == 0 || height == 0 {
        return Err(Error::InvalidImage("zero-dimension png".into()));
    }
    let samples: usize = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "color type {other:?} in {}",
                path.display()
            )))
        }
    };
    let (bytes_per_sample, max) = match info.bit_depth {
        png::BitDepth::Eight => (1, 255.0),
        png::BitDepth::Sixteen => (2, 65535.0),
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "bit depth {other:?} in {}",
                path.display()
            )))
        }
    };
    let line = info.line_size;
    let sample_at = |y: usize, x: usize, s: usize| -> f64 {
        let off = y * line + (x * samples + s) * bytes_per_sample;
        let raw = if bytes_per_sample == 1 {
            buf[off] as u32
        } else {
            u16::from_be_bytes([buf[off], buf[off + 1]]) as u32
        };
        raw as f64 / max
    };
    let color = samples >= 3;
    Image::from_fn(height, width, 3, |c, y, x| {
        sample_at(y, x, if color { c } else { 0 })
    })
}

/// Quantizes one intensity to a byte: clamp, scale by 255, round half away from zero.
#[inline]
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit PNG (RGB or grayscale).
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let encode_err = |e: png::EncodingError| Error::Encode {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(if img.channels == 3 {
        png::ColorType::Rgb
    } else {
        png::ColorType::Grayscale
    });
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(encode_err)?;
    let mut bytes = Vec::with_capacity(img.data.len());
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                bytes.push(quantize_u8(img.get(c, y, x)));
            }
        }
    }
    writer.write_image_data(&bytes).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

/// BT.601 studio-swing luma weights on the 255 scale (divided by 256).
const LUMA_R: f64 = 65.738;
const LUMA_G: f64 = 129.057;
const LUMA_B: f64 = 25.064;

/// Converts an RGB image to a single-channel luma image in `[0, 1]` units.
pub fn to_luminance(img: &Image) -> Result<Image> {
    if img.channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "luminance needs 3 channels, got {}",
            img.channels
        )));
    }
    let n = img.height * img.width;
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let data = (0..n)
        .map(|i| {
            let y = (LUMA_R * r[i] * 255.0 + LUMA_G * g[i] * 255.0 + LUMA_B * b[i] * 255.0) / 256.0
                + 16.0;
            y / 255.0
        })
        .collect();
    Image::new(img.height, img.width, 1, data)
}

/// Crops a `size`x`size` patch at a uniformly random position.
pub fn random_patch(img: &Image, size: usize, rng: &mut Rng) -> Result<Image> {
    if size == 0 || size > img.height || size > img.width {
        return Err(Error::Shape(format!(
            "patch {size} does not fit in {}x{}",
            img.height, img.width
        )));
    }
    let top = rng.below((img.height - size + 1) as u64) as usize;
    let left = rng.below((img.width - size + 1) as u64) as usize;
    img.crop(top, left, size, size)
}

/// Applies symmetry `k` of the square: horizontal flip when `k >= 4`, then
/// `k % 4` counter-clockwise quarter turns.
pub fn dihedral(img: &Image, k: u8) -> Result<Image> {
    if k > 7 {
        return Err(Error::InvalidArgument(format!(
            "dihedral index {k} outside 0..=7"
        )));
    }
    let mut out = if k >= 4 {
        flip_horizontal(img)
    } else {
        img.clone()
    };
    for _ in 0..k % 4 {
        out = rot90_ccw(&out);
    }
    Ok(out)
}

fn flip_horizontal(img: &Image) -> Image {
    let w = img.width;
    Image::from_fn(img.height, w, img.channels, |c, y, x| {
        img.get(c, y, w - 1 - x)
    })
    .expect("same shape")
}

fn rot90_ccw(img: &Image) -> Image {
    let w = img.width;
    Image::from_fn(img.width, img.height, img.channels, |c, y, x| {
        img.get(c, x, w - 1 - y)
    })
    .expect("transposed shape")
}
