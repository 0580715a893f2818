//! Procedural two-domain scenes with exact water masks: a high-contrast source
//! domain of lakes and wide rivers, and a turbid target domain of narrow gullies
//! cut into striated sediment.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::{LabelMask, RasterImage};
use crate::seeds;
use crate::tiling::{extract_patches, split_dataset, DatasetSplit, TileConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub size: usize,
    pub seed: u64,
    pub domain: Domain,
    pub water_color: [u8; 3],
    pub background_palette: Vec<[u8; 3]>,
    /// Scales the water colour's offset from the mean background colour.
    pub contrast_gap: f64,
    pub channel_width_range: [f64; 2],
    /// Fraction of the mean background colour mixed into the water colour.
    pub turbidity_blend: f64,
    pub noise_sigma: f64,
    pub cloud_prob: f64,
}

impl SceneConfig {
    pub fn source() -> Self {
        Self {
            size: 256,
            seed: 0,
            domain: Domain::Source,
            water_color: [32, 72, 142],
            background_palette: vec![[96, 122, 66], [152, 134, 96], [122, 114, 106]],
            contrast_gap: 1.0,
            channel_width_range: [8.0, 20.0],
            turbidity_blend: 0.0,
            noise_sigma: 4.0,
            cloud_prob: 0.3,
        }
    }

    pub fn target() -> Self {
        Self {
            size: 256,
            seed: 0,
            domain: Domain::Target,
            water_color: [72, 104, 118],
            background_palette: vec![[178, 148, 112], [160, 128, 96], [190, 162, 124]],
            contrast_gap: 1.0,
            channel_width_range: [2.0, 6.0],
            turbidity_blend: 0.7,
            noise_sigma: 4.0,
            cloud_prob: 0.0,
        }
    }

    pub fn preset(domain: Domain) -> Self {
        match domain {
            Domain::Source => Self::source(),
            Domain::Target => Self::target(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 64 {
            return Err(Error::Config(format!("scene size must be at least 64, got {}", self.size)));
        }
        if !(0.0..=1.0).contains(&self.turbidity_blend) || !(0.0..=1.0).contains(&self.cloud_prob) {
            return Err(Error::Config("turbidity_blend and cloud_prob must lie in [0, 1]".into()));
        }
        let [lo, hi] = self.channel_width_range;
        if !(lo >= 1.0 && hi >= lo) {
            return Err(Error::Config(format!("channel width range [{lo}, {hi}] is invalid")));
        }
        if self.background_palette.is_empty() {
            return Err(Error::Config("background palette is empty".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.contrast_gap >= 0.0) {
            return Err(Error::Config("noise_sigma and contrast_gap must be non-negative".into()));
        }
        Ok(())
    }

    /// Brightest channel value any land or water colour can take before noise.
    pub fn palette_max(&self) -> u8 {
        self.background_palette
            .iter()
            .chain(std::iter::once(&self.water_color))
            .flat_map(|c| c.iter().copied())
            .max()
            .unwrap_or(0)
    }

    /// Short hex digest of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("scene config serializes");
        Sha256::digest(json.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Float RGB canvas, row-major.
struct Canvas {
    size: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn to_image(&self, rng: &mut ChaCha8Rng, sigma: f64) -> Result<RasterImage> {
        let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("sigma is finite");
        let mut data = Vec::with_capacity(self.px.len() * 3);
        for p in &self.px {
            for &c in p {
                let n = if sigma > 0.0 { noise.sample(rng).clamp(-3.0 * sigma, 3.0 * sigma) } else { 0.0 };
                data.push((c + n).round().clamp(0.0, 255.0) as u8);
            }
        }
        RasterImage::new(self.size, self.size, data)
    }
}

fn rgb(c: [u8; 3]) -> [f64; 3] {
    c.map(f64::from)
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Smooth value noise in [0, 1] from a coarse random lattice.
struct ValueNoise {
    cells: usize,
    cell: f64,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, size: usize, cell: f64) -> Self {
        let cells = (size as f64 / cell).ceil() as usize + 2;
        Self {
            cells,
            cell,
            lattice: (0..cells * cells).map(|_| rng.random::<f64>()).collect(),
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = (x / self.cell, y / self.cell);
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (fx, fy) = (s(gx - ix as f64), s(gy - iy as f64));
        let v = |i: usize, j: usize| self.lattice[j.min(self.cells - 1) * self.cells + i.min(self.cells - 1)];
        let top = v(ix, iy) + (v(ix + 1, iy) - v(ix, iy)) * fx;
        let bottom = v(ix, iy + 1) + (v(ix + 1, iy + 1) - v(ix, iy + 1)) * fx;
        top + (bottom - top) * fy
    }
}

/// Patchy land cover blended between palette colours, darkened by `shade`.
fn land(cfg: &SceneConfig, rng: &mut ChaCha8Rng, shade: impl Fn(f64, f64) -> f64) -> Canvas {
    let n = cfg.size;
    let palette: Vec<[f64; 3]> = cfg.background_palette.iter().map(|&c| rgb(c)).collect();
    let pick = ValueNoise::new(rng, n, n as f64 / 3.0);
    let mut px = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f64, y as f64);
            let t = pick.at(xf, yf) * (palette.len() - 1) as f64;
            let i = (t.floor() as usize).min(palette.len() - 1);
            let j = (i + 1).min(palette.len() - 1);
            let c = lerp3(palette[i], palette[j], t - i as f64);
            px.push(c.map(|v| v * shade(xf, yf)));
        }
    }
    Canvas { size: n, px }
}

fn mean_color(canvas: &Canvas) -> [f64; 3] {
    let mut s = [0.0; 3];
    for p in &canvas.px {
        for k in 0..3 {
            s[k] += p[k];
        }
    }
    s.map(|v| v / canvas.px.len() as f64)
}

/// Pixels whose centres lie strictly within `radius` of some centreline point.
fn stamp_path(mask: &mut LabelMask, path: &[(f64, f64)], radius: f64) {
    let n = mask.width() as i64;
    for &(cx, cy) in path {
        let (x0, x1) = ((cx - radius).floor() as i64, (cx + radius).ceil() as i64);
        let (y0, y1) = ((cy - radius).floor() as i64, (cy + radius).ceil() as i64);
        for y in y0.max(0)..=y1.min(n - 1) {
            for x in x0.max(0)..=x1.min(n - 1) {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                if d2 < radius * radius {
                    mask.set(x as usize, y as usize, true);
                }
            }
        }
    }
}

/// Curvature and heading limits of a random-walk centreline.
struct Walk {
    turn_sigma: f64,
    max_turn: f64,
    max_deviation: f64,
}

/// Centreline entering at a random point on one side and wandering across the
/// scene, sampled every half pixel until it leaves.
fn centerline(rng: &mut ChaCha8Rng, size: usize, walk: &Walk) -> Vec<(f64, f64)> {
    let n = size as f64;
    let side = rng.random_range(0..4);
    let along = rng.random_range(0.15 * n..0.85 * n);
    let (mut x, mut y, base) = match side {
        0 => (-2.0, along, 0.0),
        1 => (n + 1.0, along, PI),
        2 => (along, -2.0, PI / 2.0),
        _ => (along, n + 1.0, -PI / 2.0),
    };
    let mut heading = base + rng.random_range(-0.4..0.4);
    let mut turn = 0.0f64;
    let step = 0.5;
    let limit = 8.0 * n / step;
    let mut path = Vec::new();
    for _ in 0..limit as usize {
        path.push((x, y));
        turn = (0.92 * turn + rng.random_range(-walk.turn_sigma..walk.turn_sigma)).clamp(-walk.max_turn, walk.max_turn);
        heading += turn * step;
        let dev = heading - base;
        if dev.abs() > walk.max_deviation {
            heading = base + dev.signum() * walk.max_deviation;
            turn = -turn * 0.5;
        }
        x += step * heading.cos();
        y += step * heading.sin();
        if x < -4.0 || y < -4.0 || x > n + 4.0 || y > n + 4.0 {
            break;
        }
    }
    path
}

fn ellipse(mask: &mut LabelMask, cx: f64, cy: f64, a: f64, b: f64, angle: f64) {
    let n = mask.width();
    let (c, s) = (angle.cos(), angle.sin());
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
            if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                mask.set(x, y, true);
            }
        }
    }
}

/// Soft light occluders painted over the image only.
fn clouds(canvas: &mut Canvas, rng: &mut ChaCha8Rng, cfg: &SceneConfig) {
    if !rng.random_bool(cfg.cloud_prob) {
        return;
    }
    let n = cfg.size as f64;
    let white = [238.0, 240.0, 244.0];
    let texture = ValueNoise::new(rng, cfg.size, n / 8.0);
    for _ in 0..rng.random_range(1..=2) {
        let (cx, cy) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
        let r = rng.random_range(0.08 * n..0.2 * n);
        for (i, p) in canvas.px.iter_mut().enumerate() {
            let (x, y) = ((i % cfg.size) as f64, (i / cfg.size) as f64);
            let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() / r + 0.3 * (texture.at(x, y) - 0.5);
            let alpha = ((1.25 - d) / 0.5).clamp(0.0, 1.0);
            if alpha > 0.0 {
                *p = lerp3(*p, white, alpha);
            }
        }
    }
}

fn water_tone(cfg: &SceneConfig, land_mean: [f64; 3]) -> [f64; 3] {
    let mixed = lerp3(rgb(cfg.water_color), land_mean, cfg.turbidity_blend);
    lerp3(land_mean, mixed, cfg.contrast_gap).map(|v| v.clamp(0.0, 255.0))
}

fn check_domain(cfg: &SceneConfig, want: Domain) -> Result<()> {
    cfg.validate()?;
    if cfg.domain != want {
        return Err(Error::InvalidArgument(format!(
            "{} generator called with a {} config",
            want.name(),
            cfg.domain.name()
        )));
    }
    Ok(())
}

/// Smallest water fraction of a source scene.
pub const MIN_SOURCE_WATER: f64 = 0.02;

/// Lakes and wide meandering rivers in clear water over patchy land.
pub fn gen_source_scene(cfg: &SceneConfig, seed: u64) -> Result<(RasterImage, LabelMask)> {
    check_domain(cfg, Domain::Source)?;
    let mut rng = seeds::rng(cfg.seed, &[seeds::tag("source"), seed]);
    let n = cfg.size;
    let nf = n as f64;
    let mut mask = LabelMask::zeros(n, n)?;
    let walk = Walk { turn_sigma: 0.012, max_turn: 0.03, max_deviation: 0.8 };
    let bodies = rng.random_range(1..=3);
    let mut placed = 0;
    // A body that barely clips the frame can leave too little water; add more.
    while placed < bodies || (mask.water_count() as f64) < MIN_SOURCE_WATER * (n * n) as f64 {
        placed += 1;
        if rng.random_bool(0.5) {
            let a = rng.random_range(0.12 * nf..0.22 * nf);
            let b = a * rng.random_range(0.6..1.0);
            let (cx, cy) = (rng.random_range(0.2 * nf..0.8 * nf), rng.random_range(0.2 * nf..0.8 * nf));
            ellipse(&mut mask, cx, cy, a, b, rng.random_range(0.0..PI));
        } else {
            let [lo, hi] = cfg.channel_width_range;
            let width = rng.random_range(lo..=hi);
            let path = centerline(&mut rng, n, &walk);
            stamp_path(&mut mask, &path, width / 2.0);
        }
    }
    let shade_noise = ValueNoise::new(&mut rng, n, nf / 6.0);
    let mut canvas = land(cfg, &mut rng, |x, y| 0.85 + 0.15 * shade_noise.at(x, y));
    let water = water_tone(cfg, mean_color(&canvas));
    let depth = ValueNoise::new(&mut rng, n, nf / 10.0);
    for (i, p) in canvas.px.iter_mut().enumerate() {
        if mask.data()[i] == 1 {
            let (x, y) = ((i % n) as f64, (i / n) as f64);
            *p = water.map(|v| v * (0.9 + 0.1 * depth.at(x, y)));
        }
    }
    clouds(&mut canvas, &mut rng, cfg);
    Ok((canvas.to_image(&mut rng, cfg.noise_sigma)?, mask))
}

/// Geometry of a target scene: the full water mask plus each channel alone.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetGeometry {
    pub water: LabelMask,
    pub channels: Vec<LabelMask>,
}

fn target_geometry(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<TargetGeometry> {
    let n = cfg.size;
    let [lo, hi] = cfg.channel_width_range;
    // Turning radius of twice the widest channel keeps bends from bulging.
    let walk = Walk { turn_sigma: 0.06, max_turn: 1.0 / (2.0 * hi).max(6.0), max_deviation: 1.1 };
    let mut water = LabelMask::zeros(n, n)?;
    let mut channels = Vec::new();
    for _ in 0..rng.random_range(1..=2) {
        let width = rng.random_range(lo..=hi);
        let path = centerline(rng, n, &walk);
        let mut ch = LabelMask::zeros(n, n)?;
        stamp_path(&mut ch, &path, width / 2.0);
        if rng.random_bool(0.35) {
            let inside: Vec<&(f64, f64)> = path
                .iter()
                .filter(|(x, y)| *x > 8.0 && *y > 8.0 && *x < n as f64 - 8.0 && *y < n as f64 - 8.0)
                .collect();
            if !inside.is_empty() {
                let &(px, py) = inside[rng.random_range(0..inside.len())];
                let r = rng.random_range(hi..2.0 * hi + 2.0);
                ellipse(&mut water, px, py, r, r * rng.random_range(0.6..1.0), rng.random_range(0.0..PI));
            }
        }
        for (i, &v) in ch.data().iter().enumerate() {
            if v == 1 {
                water.set(i % n, i / n, true);
            }
        }
        channels.push(ch);
    }
    Ok(TargetGeometry { water, channels })
}

/// Striated sediment shading: oriented ridges warped by low-frequency noise.
fn striation(rng: &mut ChaCha8Rng, size: usize) -> impl Fn(f64, f64) -> f64 {
    let theta = rng.random_range(0.0..PI);
    let period = rng.random_range(6.0..14.0);
    let phase = rng.random_range(0.0..TAU);
    let warp = ValueNoise::new(rng, size, size as f64 / 4.0);
    let (c, s) = (theta.cos(), theta.sin());
    move |x, y| {
        let u = (x * c + y * s) / period * TAU + phase + 6.0 * warp.at(x, y);
        0.86 + 0.14 * (0.5 + 0.5 * u.sin())
    }
}

/// Narrow, winding, sediment-laden channels with occasional pools.
pub fn gen_target_scene(cfg: &SceneConfig, seed: u64) -> Result<(RasterImage, LabelMask)> {
    let (image, geometry) = gen_target_scene_with_geometry(cfg, seed)?;
    Ok((image, geometry.water))
}

pub fn gen_target_scene_with_geometry(cfg: &SceneConfig, seed: u64) -> Result<(RasterImage, TargetGeometry)> {
    check_domain(cfg, Domain::Target)?;
    let mut rng = seeds::rng(cfg.seed, &[seeds::tag("target"), seed]);
    let geometry = target_geometry(cfg, &mut rng)?;
    let ridges = striation(&mut rng, cfg.size);
    let mut canvas = land(cfg, &mut rng, ridges);
    let water = water_tone(cfg, mean_color(&canvas));
    for (i, p) in canvas.px.iter_mut().enumerate() {
        if geometry.water.data()[i] == 1 {
            *p = water;
        }
    }
    clouds(&mut canvas, &mut rng, cfg);
    Ok((canvas.to_image(&mut rng, cfg.noise_sigma)?, geometry))
}

pub fn gen_scene(cfg: &SceneConfig, seed: u64) -> Result<(RasterImage, LabelMask)> {
    match cfg.domain {
        Domain::Source => gen_source_scene(cfg, seed),
        Domain::Target => gen_target_scene(cfg, seed),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub source: SceneConfig,
    pub target: SceneConfig,
    pub n_source: usize,
    pub n_target: usize,
    pub tile: TileConfig,
    pub split_ratio: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            source: SceneConfig::source(),
            target: SceneConfig::target(),
            n_source: 24,
            n_target: 8,
            tile: TileConfig { window: 128, stride: 64, keep_only_water: true, edge_flush: true },
            split_ratio: 0.9,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.target.validate()?;
        self.tile.validate()?;
        if self.source.domain != Domain::Source || self.target.domain != Domain::Target {
            return Err(Error::Config("scene configs must carry their own domain".into()));
        }
        if self.n_source < 2 || self.n_target < 2 {
            return Err(Error::Config("need at least 2 scenes per domain".into()));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("split ratio {} not in (0,1)", self.split_ratio)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub seed: u64,
    pub image: RasterImage,
    pub mask: LabelMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub source_scenes: Vec<Scene>,
    pub target_scenes: Vec<Scene>,
    pub source: DatasetSplit,
    pub target: DatasetSplit,
}

pub fn generate_scenes(cfg: &SceneConfig, count: usize, master_seed: u64) -> Result<Vec<Scene>> {
    let tag = seeds::tag(cfg.domain.name());
    (0..count)
        .map(|i| {
            let seed = seeds::derive(master_seed, &[tag, i as u64]);
            let (image, mask) = gen_scene(cfg, seed)?;
            Ok(Scene { id: format!("{}_{i:04}", cfg.domain.name()), seed, image, mask })
        })
        .collect()
}

fn tile_and_split(scenes: &[Scene], cfg: &SynthConfig, seed: u64) -> Result<DatasetSplit> {
    let mut patches = Vec::new();
    for s in scenes {
        patches.extend(extract_patches(&s.image, &s.mask, &cfg.tile, &s.id)?);
    }
    split_dataset(patches, cfg.split_ratio, seed)
}

/// Generates both domains, tiles every scene and splits each domain's patches.
pub fn build_synthetic_datasets(cfg: &SynthConfig, master_seed: u64) -> Result<SyntheticData> {
    cfg.validate()?;
    let source_scenes = generate_scenes(&cfg.source, cfg.n_source, master_seed)?;
    let target_scenes = generate_scenes(&cfg.target, cfg.n_target, master_seed)?;
    let source = tile_and_split(&source_scenes, cfg, seeds::derive(master_seed, &[seeds::tag("split-source")]))?;
    let target = tile_and_split(&target_scenes, cfg, seeds::derive(master_seed, &[seeds::tag("split-target")]))?;
    Ok(SyntheticData { source_scenes, target_scenes, source, target })
}
