//! Small U-Net baseline: double 3×3 conv + ReLU per level, average-pool
//! downsampling, bilinear ×2 upsampling with skip concatenation.

use serde::{Deserialize, Serialize};

use super::{check_input, Builder, Init, ParamVars};
use crate::autodiff::{Real, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetTinyConfig {
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for UNetTinyConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 8,
        }
    }
}

impl UNetTinyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 8 || self.base_channels == 0 {
            return Err(Error::Config(format!(
                "unet needs 1 <= depth <= 8 and base_channels > 0, got {} / {}",
                self.depth, self.base_channels
            )));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

fn conv(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize) {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    b.push(format!("{name}.weight"), &[cout, cin, k, k], Init::TruncNormal(std));
    b.push(format!("{name}.bias"), &[cout], Init::Zeros);
}

pub(crate) fn declare(c: &UNetTinyConfig, b: &mut Builder) {
    let mut cin = 3;
    for l in 0..c.depth {
        conv(b, &format!("enc{l}.conv1"), cin, c.channels(l), 3);
        conv(b, &format!("enc{l}.conv2"), c.channels(l), c.channels(l), 3);
        cin = c.channels(l);
    }
    let cb = c.channels(c.depth);
    conv(b, "bottleneck.conv1", cin, cb, 3);
    conv(b, "bottleneck.conv2", cb, cb, 3);
    for l in (0..c.depth).rev() {
        conv(b, &format!("dec{l}.conv1"), c.channels(l + 1) + c.channels(l), c.channels(l), 3);
        conv(b, &format!("dec{l}.conv2"), c.channels(l), c.channels(l), 3);
    }
    conv(b, "head", c.channels(0), 1, 1);
}

fn conv_relu<T: Real>(tape: &mut Tape<T>, p: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let y = tape.conv2d(x, p.get(&format!("{name}.weight"))?, Some(p.get(&format!("{name}.bias"))?), 1, 1)?;
    Ok(tape.relu(y))
}

fn double<T: Real>(tape: &mut Tape<T>, p: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let y = conv_relu(tape, p, &format!("{name}.conv1"), x)?;
    conv_relu(tape, p, &format!("{name}.conv2"), y)
}

/// `(N, 3, H, W)` → `(N, 1, H, W)` logits; `H`, `W` divisible by `2^depth`.
pub fn unet_forward<T: Real>(tape: &mut Tape<T>, c: &UNetTinyConfig, p: &ParamVars, x: Var) -> Result<Var> {
    c.validate()?;
    check_input(tape.value(x).shape(), 1 << c.depth)?;
    let mut skips = Vec::with_capacity(c.depth);
    let mut h = x;
    for l in 0..c.depth {
        let f = double(tape, p, &format!("enc{l}"), h)?;
        skips.push(f);
        h = tape.avg_pool(f, 2)?;
    }
    h = double(tape, p, "bottleneck", h)?;
    for l in (0..c.depth).rev() {
        let skip = skips[l];
        let (sh, sw) = {
            let s = tape.value(skip).shape();
            (s[2], s[3])
        };
        let up = tape.resize_bilinear(h, sh, sw)?;
        let cat = tape.concat(&[up, skip], 1)?;
        h = double(tape, p, &format!("dec{l}"), cat)?;
    }
    tape.conv2d(h, p.get("head.weight")?, Some(p.get("head.bias")?), 1, 0)
}
