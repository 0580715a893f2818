//! Training-time augmentation: horizontal flip, scale-and-crop, photometric jitter.
//!
//! Images are handled in unit range `[0, 1]`; network standardization happens
//! after augmentation. Every operation has a forced-parameter form so tests can
//! pin the randomness.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::resize_taps;
use crate::error::{Error, Result};
use crate::raster::{FloatRaster, LabelMask};
use crate::tiling::TilePatch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub scale_range: [f64; 2],
    pub out_size: usize,
    pub brightness_delta: f32,
    pub contrast_range: [f32; 2],
    pub saturation_range: [f32; 2],
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_range: [0.5, 2.0],
            out_size: 512,
            brightness_delta: 0.125,
            contrast_range: [0.5, 1.5],
            saturation_range: [0.5, 1.5],
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob {} not in [0,1]", self.flip_prob)));
        }
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("scale_range [{lo}, {hi}] needs 0 < low <= high")));
        }
        if self.out_size == 0 {
            return Err(Error::Config("out_size must be positive".into()));
        }
        for (name, [a, b]) in [("contrast_range", self.contrast_range), ("saturation_range", self.saturation_range)] {
            if !(a >= 0.0 && a <= b) {
                return Err(Error::Config(format!("{name} [{a}, {b}] needs 0 <= low <= high")));
            }
        }
        if self.brightness_delta < 0.0 {
            return Err(Error::Config("brightness_delta must be non-negative".into()));
        }
        Ok(())
    }
}

/// A training example: unit-range planar RGB plus its label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: FloatRaster,
    pub mask: LabelMask,
}

impl Sample {
    pub fn new(image: FloatRaster, mask: LabelMask) -> Result<Self> {
        if !mask.same_dims(image.width(), image.height()) {
            return Err(Error::Dimension(format!(
                "image {}x{} vs mask {}x{}",
                image.width(),
                image.height(),
                mask.width(),
                mask.height()
            )));
        }
        Ok(Self { image, mask })
    }

    pub fn from_patch(p: &TilePatch) -> Self {
        Self {
            image: FloatRaster::from_image_unit(&p.image),
            mask: p.mask.clone(),
        }
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }
}

/// Mirror about the vertical axis.
pub fn hflip(s: &Sample) -> Sample {
    let (w, h, c) = (s.width(), s.height(), s.image.channels());
    let src = s.image.data();
    let mut img = vec![0.0f32; src.len()];
    for row in 0..c * h {
        for x in 0..w {
            img[row * w + x] = src[row * w + w - 1 - x];
        }
    }
    let mask = LabelMask::from_fn(w, h, |x, y| s.mask.get(w - 1 - x, y)).expect("same dims");
    Sample {
        image: FloatRaster::new(w, h, c, img).expect("same dims"),
        mask,
    }
}

pub fn random_hflip<R: Rng + ?Sized>(s: &Sample, rng: &mut R, cfg: &AugmentConfig) -> Sample {
    if rng.random::<f64>() < cfg.flip_prob {
        hflip(s)
    } else {
        s.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleCropParams {
    pub scale: f64,
    /// Top-left of the crop in the resized (and padded) frame.
    pub offset: (usize, usize),
}

fn resize_bilinear_planes(img: &FloatRaster, ow: usize, oh: usize) -> FloatRaster {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let tx = resize_taps(w, ow);
    let ty = resize_taps(h, oh);
    let mut out = vec![0.0f32; c * ow * oh];
    for ch in 0..c {
        let plane = img.plane(ch);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let p = |y: usize, x: usize| plane[y * w + x] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(ch * oh + oy) * ow + ox] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    FloatRaster::new(ow, oh, c, out).expect("finite")
}

fn nearest_index(o: usize, input: usize, output: usize) -> usize {
    (((o as f64 + 0.5) * input as f64 / output as f64).floor() as usize).min(input - 1)
}

fn resize_nearest_mask(m: &LabelMask, ow: usize, oh: usize) -> LabelMask {
    let xs: Vec<usize> = (0..ow).map(|o| nearest_index(o, m.width(), ow)).collect();
    let ys: Vec<usize> = (0..oh).map(|o| nearest_index(o, m.height(), oh)).collect();
    LabelMask::from_fn(ow, oh, |x, y| m.get(xs[x], ys[y])).expect("binary")
}

/// Reflection without edge repeat, e.g. `… 2 1 | 0 1 2 … n-1 | n-2 …`.
pub fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Bilinear image / nearest mask resize to `round(scale·dim)`, reflect-pad up to
/// `out_size`, then crop `out_size × out_size` at `offset`.
pub fn scale_crop(s: &Sample, p: ScaleCropParams, out_size: usize) -> Result<Sample> {
    let nw = ((p.scale * s.width() as f64).round() as usize).max(1);
    let nh = ((p.scale * s.height() as f64).round() as usize).max(1);
    let img = if (nw, nh) == (s.width(), s.height()) {
        s.image.clone()
    } else {
        resize_bilinear_planes(&s.image, nw, nh)
    };
    let mask = if (nw, nh) == (s.width(), s.height()) {
        s.mask.clone()
    } else {
        resize_nearest_mask(&s.mask, nw, nh)
    };
    let (fw, fh) = (nw.max(out_size), nh.max(out_size));
    let (ox, oy) = p.offset;
    if ox + out_size > fw || oy + out_size > fh {
        return Err(Error::InvalidArgument(format!(
            "crop offset ({ox},{oy}) outside {fw}x{fh} frame"
        )));
    }
    let xs: Vec<usize> = (0..out_size).map(|x| reflect_index(ox + x, nw)).collect();
    let ys: Vec<usize> = (0..out_size).map(|y| reflect_index(oy + y, nh)).collect();
    let c = img.channels();
    let mut out = Vec::with_capacity(c * out_size * out_size);
    for ch in 0..c {
        let plane = img.plane(ch);
        for &y in &ys {
            out.extend(xs.iter().map(|&x| plane[y * nw + x]));
        }
    }
    Ok(Sample {
        image: FloatRaster::new(out_size, out_size, c, out)?,
        mask: LabelMask::from_fn(out_size, out_size, |x, y| mask.get(xs[x], ys[y]))?,
    })
}

pub fn sample_scale_crop<R: Rng + ?Sized>(s: &Sample, rng: &mut R, cfg: &AugmentConfig) -> ScaleCropParams {
    let [lo, hi] = cfg.scale_range;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let nw = ((scale * s.width() as f64).round() as usize).max(1);
    let nh = ((scale * s.height() as f64).round() as usize).max(1);
    let ox = rng.random_range(0..=nw.max(cfg.out_size) - cfg.out_size);
    let oy = rng.random_range(0..=nh.max(cfg.out_size) - cfg.out_size);
    ScaleCropParams {
        scale,
        offset: (ox, oy),
    }
}

pub fn random_scale_crop<R: Rng + ?Sized>(s: &Sample, rng: &mut R, cfg: &AugmentConfig) -> Result<Sample> {
    let p = sample_scale_crop(s, rng, cfg);
    scale_crop(s, p, cfg.out_size)
}

/// Each factor is applied only when present, in the order brightness, contrast, saturation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhotometricParams {
    pub brightness: Option<f32>,
    pub contrast: Option<f32>,
    pub saturation: Option<f32>,
}

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Unit-range jitter. Contrast is anchored at 0.5; saturation scales chroma
/// about the luma `0.299 R + 0.587 G + 0.114 B`. Output is clamped to `[0, 1]`.
pub fn photometric(s: &Sample, p: PhotometricParams) -> Sample {
    let mut img = s.image.clone();
    let n = img.width() * img.height();
    let c = img.channels();
    let data = img.data_mut();
    if let Some(d) = p.brightness {
        data.iter_mut().for_each(|v| *v += d);
    }
    if let Some(f) = p.contrast {
        data.iter_mut().for_each(|v| *v = f * *v + 0.5 * (1.0 - f));
    }
    if let Some(f) = p.saturation {
        if c == 3 {
            for i in 0..n {
                let luma: f32 = (0..3).map(|ch| LUMA[ch] * data[ch * n + i]).sum();
                for ch in 0..3 {
                    let v = &mut data[ch * n + i];
                    *v = f * *v + (1.0 - f) * luma;
                }
            }
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Sample {
        image: img,
        mask: s.mask.clone(),
    }
}

pub fn sample_photometric<R: Rng + ?Sized>(rng: &mut R, cfg: &AugmentConfig) -> PhotometricParams {
    let range = |rng: &mut R, [a, b]: [f32; 2]| if b > a { rng.random_range(a..=b) } else { a };
    let d = cfg.brightness_delta;
    PhotometricParams {
        brightness: rng.random_bool(0.5).then(|| range(rng, [-d, d])),
        contrast: rng.random_bool(0.5).then(|| range(rng, cfg.contrast_range)),
        saturation: rng.random_bool(0.5).then(|| range(rng, cfg.saturation_range)),
    }
}

pub fn random_photometric<R: Rng + ?Sized>(s: &Sample, rng: &mut R, cfg: &AugmentConfig) -> Sample {
    photometric(s, sample_photometric(rng, cfg))
}

/// Full training policy: flip, scale-crop, photometric.
pub fn augment<R: Rng + ?Sized>(s: &Sample, rng: &mut R, cfg: &AugmentConfig) -> Result<Sample> {
    let s = random_hflip(s, rng, cfg);
    let s = random_scale_crop(&s, rng, cfg)?;
    Ok(random_photometric(&s, rng, cfg))
}
