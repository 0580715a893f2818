//! Channel-network analysis of a water mask: thinning to a skeleton, arc-length
//! binning, and the water-area concentration curve.

use std::f64::consts::SQRT_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::LabelMask;

const NONE: u32 = u32::MAX;

/// Clockwise from north: P2..P9 of the thinning neighborhood.
const RING: [(i64, i64); 8] = [(0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1)];

/// Traversal preference: edge neighbors before diagonals.
const STEPS: [(i64, i64); 8] = [(1, 0), (0, 1), (-1, 0), (0, -1), (1, 1), (-1, 1), (-1, -1), (1, -1)];

struct Grid {
    w: usize,
    h: usize,
    cells: Vec<bool>,
}

impl Grid {
    fn from_mask(m: &LabelMask) -> Self {
        Self {
            w: m.width(),
            h: m.height(),
            cells: m.data().iter().map(|&v| v == 1).collect(),
        }
    }

    fn at(&self, x: usize, y: usize) -> bool {
        self.cells[y * self.w + x]
    }

    /// Out-of-range reads take the nearest in-range value, so features that
    /// leave the tile are treated as continuing beyond it.
    fn clamped(&self, x: i64, y: i64) -> bool {
        let cx = x.clamp(0, self.w as i64 - 1) as usize;
        let cy = y.clamp(0, self.h as i64 - 1) as usize;
        self.at(cx, cy)
    }

    fn inside(&self, x: i64, y: i64) -> Option<usize> {
        (x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h).then(|| y as usize * self.w + x as usize)
    }

    fn to_mask(&self) -> Result<LabelMask> {
        LabelMask::new(self.w, self.h, self.cells.iter().map(|&b| b as u8).collect())
    }
}

fn deletable(g: &Grid, x: usize, y: usize, second: bool) -> bool {
    let p: [bool; 8] = RING.map(|(dx, dy)| g.clamped(x as i64 + dx, y as i64 + dy));
    let b = p.iter().filter(|&&v| v).count();
    if !(2..=6).contains(&b) {
        return false;
    }
    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
    if a != 1 {
        return false;
    }
    let (n, e, s, w) = (p[0], p[2], p[4], p[6]);
    if second {
        !(n && e && w) && !(n && s && w)
    } else {
        !(n && e && s) && !(e && s && w)
    }
}

/// 8-connected components in scan order of their first pixel.
fn components(g: &Grid) -> Vec<Vec<usize>> {
    let mut label = vec![false; g.cells.len()];
    let mut out = Vec::new();
    for start in 0..g.cells.len() {
        if !g.cells[start] || label[start] {
            continue;
        }
        label[start] = true;
        let mut comp = vec![start];
        let mut i = 0;
        while i < comp.len() {
            let (x, y) = ((comp[i] % g.w) as i64, (comp[i] / g.w) as i64);
            for (dx, dy) in RING {
                if let Some(j) = g.inside(x + dx, y + dy) {
                    if g.cells[j] && !label[j] {
                        label[j] = true;
                        comp.push(j);
                    }
                }
            }
            i += 1;
        }
        out.push(comp);
    }
    out
}

/// Two-subiteration parallel thinning to a fixpoint. A component that thinning
/// would erase entirely (a 2×2 block, say) keeps its pixel nearest the centroid.
pub fn skeletonize(mask: &LabelMask) -> Result<LabelMask> {
    if mask.water_count() == 0 {
        return Err(Error::Empty("cannot skeletonize a mask without water".into()));
    }
    let src = Grid::from_mask(mask);
    let mut g = Grid::from_mask(mask);
    loop {
        let mut changed = false;
        for second in [false, true] {
            let doomed: Vec<usize> = (0..g.cells.len())
                .filter(|&i| g.cells[i] && deletable(&g, i % g.w, i / g.w, second))
                .collect();
            changed |= !doomed.is_empty();
            for i in doomed {
                g.cells[i] = false;
            }
        }
        if !changed {
            break;
        }
    }
    for comp in components(&src) {
        if comp.iter().any(|&i| g.cells[i]) {
            continue;
        }
        let n = comp.len() as f64;
        let cx = comp.iter().map(|&i| (i % g.w) as f64).sum::<f64>() / n;
        let cy = comp.iter().map(|&i| (i / g.w) as f64).sum::<f64>() / n;
        let dist = |i: usize| ((i % g.w) as f64 - cx).powi(2) + ((i / g.w) as f64 - cy).powi(2);
        let keep = comp.iter().copied().fold(comp[0], |best, i| if dist(i) < dist(best) { i } else { best });
        g.cells[keep] = true;
    }
    g.to_mask()
}

/// Skeleton graph edges of pixel `i`. A diagonal step is dropped when an
/// edge-adjacent pair already connects the two pixels.
fn edges(g: &Grid, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
    let (x, y) = ((i % g.w) as i64, (i / g.w) as i64);
    STEPS.iter().filter_map(move |&(dx, dy)| {
        let j = g.inside(x + dx, y + dy)?;
        if !g.cells[j] {
            return None;
        }
        if dx != 0 && dy != 0 {
            let via_x = g.inside(x + dx, y).is_some_and(|k| g.cells[k]);
            let via_y = g.inside(x, y + dy).is_some_and(|k| g.cells[k]);
            if via_x || via_y {
                return None;
            }
            return Some((j, SQRT_2));
        }
        Some((j, 1.0))
    })
}

/// Arc length owned by each skeleton pixel: half of each incident edge plus
/// half a pixel per open end, so a straight run of n pixels measures n. An open
/// end away from the tile border is further extended to the water edge.
fn pixel_length(g: &Grid, water: &Grid, i: usize) -> f64 {
    let (sum, degree) = edges(g, i).fold((0.0, 0usize), |(s, d), (_, w)| (s + 0.5 * w, d + 1));
    let ends = 2usize.saturating_sub(degree) as f64;
    let (x, y) = (i % g.w, i / g.w);
    let on_border = x == 0 || y == 0 || x + 1 == g.w || y + 1 == g.h;
    let reach = if ends > 0.0 && !on_border {
        nearest(g.w, g.h, x, y, |j| (!water.cells[j]).then_some(0))
            .map_or(0.0, |(d2, _)| ((d2 as f64).sqrt() - 0.5).max(0.0))
    } else {
        0.0
    };
    sum + ends * (0.5 + reach)
}

/// Total channel length of a skeleton of `mask`, in pixels.
pub fn skeleton_length(mask: &LabelMask, skeleton: &LabelMask) -> Result<f64> {
    check_skeleton(mask, skeleton)?;
    let g = Grid::from_mask(skeleton);
    let water = Grid::from_mask(mask);
    Ok((0..g.cells.len()).filter(|&i| g.cells[i]).map(|i| pixel_length(&g, &water, i)).sum())
}

fn check_skeleton(mask: &LabelMask, skeleton: &LabelMask) -> Result<()> {
    if !skeleton.same_dims(mask.width(), mask.height()) {
        return Err(Error::Dimension("skeleton and mask differ in size".into()));
    }
    if skeleton.water_count() == 0 {
        return Err(Error::Empty("skeleton has no pixels".into()));
    }
    if skeleton.data().iter().zip(mask.data()).any(|(&s, &m)| s > m) {
        return Err(Error::InvalidArgument("skeleton leaves the water mask".into()));
    }
    Ok(())
}

/// Depth-first visiting order of skeleton pixels, one component at a time,
/// each starting from its first end pixel in scan order.
fn traversal(g: &Grid) -> Vec<Vec<usize>> {
    let mut seen = vec![false; g.cells.len()];
    let mut out = Vec::new();
    for comp in components(g) {
        let start = comp
            .iter()
            .copied()
            .filter(|&i| edges(g, i).count() <= 1)
            .min()
            .unwrap_or_else(|| *comp.iter().min().expect("components are nonempty"));
        let mut order = Vec::with_capacity(comp.len());
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            if seen[i] {
                continue;
            }
            seen[i] = true;
            order.push(i);
            let next: Vec<usize> = edges(g, i).map(|(j, _)| j).filter(|&j| !seen[j]).collect();
            stack.extend(next.into_iter().rev());
        }
        // Pixels joined only through dropped diagonals are still one component.
        for &i in &comp {
            if !seen[i] {
                seen[i] = true;
                order.push(i);
            }
        }
        out.push(order);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelBin {
    pub id: usize,
    pub length: f64,
    pub area: u64,
}

impl ChannelBin {
    pub fn density(&self) -> f64 {
        self.area as f64 / self.length
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSkeleton {
    pub skeleton: LabelMask,
    pub total_length: f64,
    pub bins: Vec<ChannelBin>,
    /// Bin id of every skeleton pixel, `None` elsewhere; row-major.
    pub pixel_bins: Vec<Option<usize>>,
}

impl ChannelSkeleton {
    pub fn total_area(&self) -> u64 {
        self.bins.iter().map(|b| b.area).sum()
    }
}

/// Squared distance and tag of the nearest in-range pixel that `tag` accepts,
/// ties going to the smaller tag.
fn nearest(w: usize, h: usize, x: usize, y: usize, tag: impl Fn(usize) -> Option<u32>) -> Option<(u64, u32)> {
    let (x0, y0) = (x as i64, y as i64);
    let consider = |best: &mut Option<(u64, u32)>, px: i64, py: i64| {
        if px < 0 || py < 0 || px as usize >= w || py as usize >= h {
            return;
        }
        if let Some(t) = tag(py as usize * w + px as usize) {
            let d2 = ((px - x0).pow(2) + (py - y0).pow(2)) as u64;
            if best.is_none_or(|(bd, bt)| d2 < bd || (d2 == bd && t < bt)) {
                *best = Some((d2, t));
            }
        }
    };
    let mut best = None;
    consider(&mut best, x0, y0);
    // Ring r holds pixels no closer than r, so stop once r² exceeds the best.
    for r in 1..=w.max(h) as i64 {
        if best.is_some_and(|(bd, _)| (r * r) as u64 > bd) {
            break;
        }
        for d in -r..=r {
            consider(&mut best, x0 + d, y0 - r);
            consider(&mut best, x0 + d, y0 + r);
        }
        for d in -r + 1..r {
            consider(&mut best, x0 - r, y0 + d);
            consider(&mut best, x0 + r, y0 + d);
        }
    }
    best
}

/// Cuts the skeleton into consecutive runs of `bin_len` arc length (the last
/// run of each component may be shorter) and gives every water pixel to the
/// bin of its nearest skeleton pixel, ties going to the lower bin id.
pub fn bin_channel(mask: &LabelMask, skeleton: &LabelMask, bin_len: f64) -> Result<ChannelSkeleton> {
    if !(bin_len > 0.0) {
        return Err(Error::InvalidArgument(format!("bin length must be positive, got {bin_len}")));
    }
    check_skeleton(mask, skeleton)?;
    let g = Grid::from_mask(skeleton);
    let water = Grid::from_mask(mask);
    let mut pixel_bin = vec![NONE; g.cells.len()];
    let mut bins: Vec<ChannelBin> = Vec::new();
    for order in traversal(&g) {
        let mut open = false;
        for i in order {
            if !open {
                bins.push(ChannelBin { id: bins.len(), length: 0.0, area: 0 });
                open = true;
            }
            let bin = bins.last_mut().expect("a bin is open");
            bin.length += pixel_length(&g, &water, i);
            pixel_bin[i] = bin.id as u32;
            if bin.length >= bin_len - 1e-9 {
                open = false;
            }
        }
    }
    let (w, h) = (mask.width(), mask.height());
    for (i, &v) in mask.data().iter().enumerate() {
        if v == 1 {
            let (_, b) = nearest(w, h, i % w, i / w, |j| (pixel_bin[j] != NONE).then_some(pixel_bin[j]))
                .expect("skeleton is nonempty");
            bins[b as usize].area += 1;
        }
    }
    let total_length = bins.iter().map(|b| b.length).sum();
    Ok(ChannelSkeleton {
        skeleton: skeleton.clone(),
        total_length,
        bins,
        pixel_bins: pixel_bin.iter().map(|&b| (b != NONE).then_some(b as usize)).collect(),
    })
}

/// Cumulative (length fraction, area fraction) over bins sorted by
/// descending area density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationCurve {
    pub points: Vec<(f64, f64)>,
}

pub fn concentration_curve(ch: &ChannelSkeleton) -> Result<ConcentrationCurve> {
    if ch.bins.is_empty() {
        return Err(Error::Empty("no channel bins".into()));
    }
    let mut order: Vec<&ChannelBin> = ch.bins.iter().collect();
    order.sort_by(|a, b| b.density().total_cmp(&a.density()).then(a.id.cmp(&b.id)));
    let mut cum = Vec::with_capacity(order.len() + 1);
    let (mut l, mut a) = (0.0f64, 0u64);
    cum.push((0.0, 0));
    for b in order {
        l += b.length;
        a += b.area;
        cum.push((l, a));
    }
    let (lt, at) = (l, a.max(1) as f64);
    let points = cum.into_iter().map(|(l, a)| (l / lt, a as f64 / at)).collect();
    Ok(ConcentrationCurve { points })
}

/// Smallest length fraction holding at least `area_threshold` of the water
/// area, interpolating linearly between curve points.
pub fn concentration_stat(curve: &ConcentrationCurve, area_threshold: f64) -> Result<f64> {
    if !(area_threshold > 0.0 && area_threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!("area threshold {area_threshold} outside (0, 1]")));
    }
    for pair in curve.points.windows(2) {
        let ((l0, a0), (l1, a1)) = (pair[0], pair[1]);
        if a1 >= area_threshold {
            return Ok(l0 + (area_threshold - a0) / (a1 - a0) * (l1 - l0));
        }
    }
    Ok(curve.points.last().map_or(1.0, |p| p.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HydroConfig {
    pub bin_len: f64,
    pub thresholds: Vec<f64>,
}

impl Default for HydroConfig {
    fn default() -> Self {
        Self {
            bin_len: 16.0,
            thresholds: vec![0.5, 0.8, 0.9],
        }
    }
}

impl HydroConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bin_len > 0.0) {
            return Err(Error::Config("hydro bin_len must be positive".into()));
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(Error::Config(format!("hydro threshold {t} outside (0, 1]")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatValue {
    pub threshold: f64,
    pub length_fraction: f64,
}

/// Serializable summary of one mask's channel analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HydroAnalysis {
    pub width: usize,
    pub height: usize,
    pub water_pixels: u64,
    pub skeleton_pixels: u64,
    pub total_length: f64,
    pub bin_len: f64,
    pub bins: Vec<ChannelBin>,
    pub curve: ConcentrationCurve,
    pub stats: Vec<StatValue>,
}

pub fn analyze(mask: &LabelMask, cfg: &HydroConfig) -> Result<HydroAnalysis> {
    cfg.validate()?;
    let skeleton = skeletonize(mask)?;
    let ch = bin_channel(mask, &skeleton, cfg.bin_len)?;
    let curve = concentration_curve(&ch)?;
    let stats = cfg
        .thresholds
        .iter()
        .map(|&t| Ok(StatValue { threshold: t, length_fraction: concentration_stat(&curve, t)? }))
        .collect::<Result<_>>()?;
    Ok(HydroAnalysis {
        width: mask.width(),
        height: mask.height(),
        water_pixels: mask.water_count() as u64,
        skeleton_pixels: skeleton.water_count() as u64,
        total_length: ch.total_length,
        bin_len: cfg.bin_len,
        bins: ch.bins,
        curve,
        stats,
    })
}
