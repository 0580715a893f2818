//! In-memory raster types and lossless PNG I/O.
//!
//! Images are 8-bit interleaved RGB, masks are binary with `1` for water, and
//! float rasters are planar (channel-major) so they stack directly into NCHW
//! network batches.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Write};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit RGB scene, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!("image {width}x{height} is empty")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "image {width}x{height} needs {} samples, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Deep copy of the `w×h` window at `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if x + w > self.width || y + h > self.height || w == 0 || h == 0 {
            return Err(Error::Dimension(format!(
                "crop {w}x{h}@({x},{y}) outside {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Self::new(w, h, data)
    }
}

/// Binary water mask, row-major; `0` background, `1` water.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!("mask {width}x{height} is empty")));
        }
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "mask {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::NonBinaryMask {
                x: i % width,
                y: i / width,
                value: data[i],
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(x, y)));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, water: bool) {
        self.data[y * self.width + x] = u8::from(water);
    }

    pub fn water_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn inverted(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if x + w > self.width || y + h > self.height || w == 0 || h == 0 {
            return Err(Error::Dimension(format!(
                "crop {w}x{h}@({x},{y}) outside {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h);
        for row in y..y + h {
            let start = row * self.width + x;
            data.extend_from_slice(&self.data[start..start + w]);
        }
        Self::new(w, h, data)
    }

    pub fn same_dims(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }
}

/// Planar float raster (`channels` planes of `height×width`), finite values only.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatRaster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FloatRaster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Dimension(format!(
                "float raster {width}x{height}x{channels} is empty"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Dimension(format!(
                "float raster {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("float raster contains NaN/Inf".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Samples scaled to `[0, 1]`.
    pub fn from_image_unit(img: &RasterImage) -> Self {
        let (w, h) = (img.width, img.height);
        let mut data = vec![0.0f32; w * h * 3];
        for (i, px) in img.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = px[c] as f32 / 255.0;
            }
        }
        Self {
            width: w,
            height: h,
            channels: 3,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Per-channel `(v − mean) / std`.
    pub fn standardized(&self, norm: &Normalization) -> Result<Self> {
        norm.validate()?;
        let n = self.width * self.height;
        let mut data = self.data.clone();
        for (c, plane) in data.chunks_mut(n).enumerate() {
            let (m, s) = (norm.mean[c % 3], norm.std[c % 3]);
            for v in plane {
                *v = (*v - m) / s;
            }
        }
        Self::new(self.width, self.height, self.channels, data)
    }

    /// Quantizes a unit-range raster back to 8-bit RGB (for inspection output).
    pub fn to_image_unit(&self) -> Result<RasterImage> {
        let n = self.width * self.height;
        let mut data = vec![0u8; n * 3];
        for i in 0..n {
            for c in 0..3 {
                let v = self.data[(c % self.channels) * n + i];
                data[i * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        RasterImage::new(self.width, self.height, data)
    }
}

/// Per-channel input normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| s == 0.0 || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "normalization std must be non-zero, got {:?}",
                self.std
            )));
        }
        Ok(())
    }
}

/// `(sample/255 − mean) / std` per channel.
pub fn normalize_image(img: &RasterImage, mean: [f32; 3], std: [f32; 3]) -> Result<FloatRaster> {
    FloatRaster::from_image_unit(img).standardized(&Normalization { mean, std })
}

fn decode_error(e: png::DecodingError) -> Error {
    Error::CorruptImage(e.to_string())
}

struct Decoded {
    width: usize,
    height: usize,
    color: ColorType,
    data: Vec<u8>,
}

fn decode_png<R: std::io::BufRead + std::io::Seek>(r: R) -> Result<Decoded> {
    let mut decoder = png::Decoder::new(r);
    decoder.set_transformations(Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(decode_error)?;
    let (color, depth) = {
        let info = reader.info();
        (info.color_type, info.bit_depth)
    };
    if depth != BitDepth::Eight {
        return Err(Error::UnsupportedBitDepth(depth as u8));
    }
    if !matches!(color, ColorType::Rgb | ColorType::Grayscale) {
        return Err(Error::UnsupportedColorType(format!("{color:?}")));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::CorruptImage("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(decode_error)?;
    buf.truncate(frame.buffer_size());
    Ok(Decoded {
        width: frame.width as usize,
        height: frame.height as usize,
        color,
        data: buf,
    })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn decoded_to_image(d: Decoded) -> Result<RasterImage> {
    let data = match d.color {
        ColorType::Rgb => d.data,
        _ => d.data.iter().flat_map(|&v| [v, v, v]).collect(),
    };
    RasterImage::new(d.width, d.height, data)
}

fn decoded_to_mask(d: Decoded) -> Result<LabelMask> {
    if d.color != ColorType::Grayscale {
        return Err(Error::UnsupportedColorType(format!(
            "{:?} (masks must be single-channel)",
            d.color
        )));
    }
    let mut data = d.data;
    for (i, v) in data.iter_mut().enumerate() {
        *v = match *v {
            0 => 0,
            255 => 1,
            other => {
                return Err(Error::NonBinaryMask {
                    x: i % d.width,
                    y: i / d.width,
                    value: other,
                })
            }
        };
    }
    LabelMask::new(d.width, d.height, data)
}

/// Loads an 8-bit RGB or grayscale PNG; grayscale is replicated to RGB.
pub fn load_image(path: impl AsRef<Path>) -> Result<RasterImage> {
    decoded_to_image(decode_png(open(path.as_ref())?)?)
}

pub fn decode_image(bytes: &[u8]) -> Result<RasterImage> {
    decoded_to_image(decode_png(Cursor::new(bytes))?)
}

/// Loads a single-channel PNG whose values are exactly `{0, 255}`.
pub fn load_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    decoded_to_mask(decode_png(open(path.as_ref())?)?)
}

pub fn decode_mask(bytes: &[u8]) -> Result<LabelMask> {
    decoded_to_mask(decode_png(Cursor::new(bytes))?)
}

fn encode_png(width: usize, height: usize, color: ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::CorruptImage(e.to_string()))?;
        writer
            .write_image_data(data)
            .map_err(|e| Error::CorruptImage(e.to_string()))?;
        writer
            .finish()
            .map_err(|e| Error::CorruptImage(e.to_string()))?;
    }
    Ok(out)
}

pub fn encode_image(img: &RasterImage) -> Result<Vec<u8>> {
    encode_png(img.width, img.height, ColorType::Rgb, &img.data)
}

/// Canonical on-disk form of a mask: grayscale PNG with water as 255.
pub fn encode_mask(mask: &LabelMask) -> Result<Vec<u8>> {
    let data: Vec<u8> = mask.data.iter().map(|&v| v * 255).collect();
    encode_png(mask.width, mask.height, ColorType::Grayscale, &data)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn save_image(img: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_image(img)?)
}

pub fn save_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_mask(mask)?)
}
