//! Sliding-window sample construction and the seeded train/validation split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{LabelMask, RasterImage};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TileConfig {
    pub window: usize,
    pub stride: usize,
    pub keep_only_water: bool,
    pub edge_flush: bool,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            window: 512,
            stride: 128,
            keep_only_water: true,
            edge_flush: true,
        }
    }
}

impl TileConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 || self.stride > self.window {
            return Err(Error::Config(format!(
                "tiling needs 1 <= stride <= window, got stride {} window {}",
                self.stride, self.window
            )));
        }
        Ok(())
    }
}

/// A window cut from a labeled scene. Image and mask are owned copies.
#[derive(Clone, Debug, PartialEq)]
pub struct TilePatch {
    pub image: RasterImage,
    pub mask: LabelMask,
    pub origin: (usize, usize),
    pub source_id: String,
}

impl TilePatch {
    pub fn new(image: RasterImage, mask: LabelMask, origin: (usize, usize), source_id: impl Into<String>) -> Result<Self> {
        if !mask.same_dims(image.width(), image.height()) {
            return Err(Error::Dimension(format!(
                "image {}x{} vs mask {}x{}",
                image.width(),
                image.height(),
                mask.width(),
                mask.height()
            )));
        }
        Ok(Self {
            image,
            mask,
            origin,
            source_id: source_id.into(),
        })
    }

    /// `<source>_x<X>_y<Y>`
    pub fn name(&self) -> String {
        format!("{}_x{}_y{}", self.source_id, self.origin.0, self.origin.1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<TilePatch>,
    pub val: Vec<TilePatch>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Window start positions along one axis.
pub fn axis_positions(dim: usize, window: usize, stride: usize, edge_flush: bool) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=dim - window).step_by(stride).collect();
    let last = dim - window;
    if edge_flush && out.last() != Some(&last) {
        out.push(last);
    }
    out
}

/// Row-major window origins `(x, y)` for a `width×height` scene.
pub fn tile_origins(width: usize, height: usize, cfg: &TileConfig) -> Result<Vec<(usize, usize)>> {
    cfg.validate()?;
    if width < cfg.window || height < cfg.window {
        return Err(Error::Dimension(format!(
            "scene {width}x{height} smaller than window {}",
            cfg.window
        )));
    }
    let xs = axis_positions(width, cfg.window, cfg.stride, cfg.edge_flush);
    let ys = axis_positions(height, cfg.window, cfg.stride, cfg.edge_flush);
    Ok(ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
        .collect())
}

pub fn extract_patches(
    image: &RasterImage,
    mask: &LabelMask,
    cfg: &TileConfig,
    source_id: &str,
) -> Result<Vec<TilePatch>> {
    if !mask.same_dims(image.width(), image.height()) {
        return Err(Error::Dimension(format!(
            "image {}x{} vs mask {}x{}",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    let w = cfg.window;
    let mut out = Vec::new();
    for (x, y) in tile_origins(image.width(), image.height(), cfg)? {
        let m = mask.crop(x, y, w, w)?;
        if cfg.keep_only_water && m.water_count() == 0 {
            continue;
        }
        out.push(TilePatch {
            image: image.crop(x, y, w, w)?,
            mask: m,
            origin: (x, y),
            source_id: source_id.to_string(),
        });
    }
    Ok(out)
}

/// Number of training items for `n` items at `ratio`, keeping both sides nonempty.
pub fn train_count(n: usize, ratio: f64) -> usize {
    let k = (ratio * n as f64 + 1e-9).floor() as usize;
    k.clamp(1, n - 1)
}

/// Seeded Fisher–Yates shuffle, then the first `⌊ratio·n⌋` go to training.
pub fn split_dataset(patches: Vec<TilePatch>, ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio {ratio} not in (0,1)")));
    }
    if patches.len() < 2 {
        return Err(Error::Empty(format!(
            "need at least 2 patches to split, got {}",
            patches.len()
        )));
    }
    let k = train_count(patches.len(), ratio);
    let mut patches = patches;
    patches.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = patches.split_off(k);
    Ok(DatasetSplit {
        train: patches,
        val,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origins_for_paper_geometry() {
        let cfg = TileConfig::default();
        let o = tile_origins(1024, 1024, &cfg).unwrap();
        assert_eq!(o.len(), 25);
        let xs: Vec<usize> = o.iter().take(5).map(|p| p.0).collect();
        assert_eq!(xs, [0, 128, 256, 384, 512]);
        assert_eq!(tile_origins(512, 512, &cfg).unwrap(), [(0, 0)]);
        assert_eq!(tile_origins(600, 512, &cfg).unwrap(), [(0, 0), (88, 0)]);
    }

    #[test]
    fn small_scene_is_an_error() {
        assert!(tile_origins(100, 600, &TileConfig::default()).is_err());
    }

    #[test]
    fn train_count_examples() {
        assert_eq!(train_count(180, 0.9), 162);
        assert_eq!(train_count(3875, 0.9), 3487);
        assert_eq!(train_count(2, 0.9), 1);
    }
}
