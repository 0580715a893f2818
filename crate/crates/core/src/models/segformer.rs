//! Hierarchical-attention encoder with an all-MLP decoder, at toy width.
//!
//! Stage `i`: overlapping patch embedding (conv, kernel `2s−1`, stride `s`,
//! pad `s−1`) and layer norm, then pre-norm blocks of spatial-reduction
//! attention and Mix-FFN (linear, depthwise 3×3, GELU, linear), then a stage
//! norm. No positional embeddings exist anywhere.

use serde::{Deserialize, Serialize};

use super::{check_input, linear, norm, to_map, to_tokens, Builder, Init, ParamVars};
use crate::autodiff::{Real, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegFormerTinyConfig {
    pub stages: usize,
    pub embed_dims: Vec<usize>,
    pub heads: Vec<usize>,
    pub reduction_ratios: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub patch_strides: Vec<usize>,
    pub decoder_dim: usize,
    pub mlp_expansion: usize,
}

impl Default for SegFormerTinyConfig {
    fn default() -> Self {
        Self {
            stages: 2,
            embed_dims: vec![16, 32],
            heads: vec![1, 2],
            reduction_ratios: vec![4, 2],
            blocks_per_stage: vec![2, 2],
            patch_strides: vec![4, 2],
            decoder_dim: 32,
            mlp_expansion: 4,
        }
    }
}

impl SegFormerTinyConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.stages;
        if s == 0 {
            return Err(Error::Config("segformer needs at least one stage".into()));
        }
        for (name, v) in [
            ("embed_dims", &self.embed_dims),
            ("heads", &self.heads),
            ("reduction_ratios", &self.reduction_ratios),
            ("blocks_per_stage", &self.blocks_per_stage),
            ("patch_strides", &self.patch_strides),
        ] {
            if v.len() != s {
                return Err(Error::Config(format!("{name} has {} entries for {s} stages", v.len())));
            }
            if v.contains(&0) {
                return Err(Error::Config(format!("{name} entries must be positive")));
            }
        }
        if self.decoder_dim == 0 || self.mlp_expansion == 0 {
            return Err(Error::Config("decoder_dim and mlp_expansion must be positive".into()));
        }
        for (i, (&c, &h)) in self.embed_dims.iter().zip(&self.heads).enumerate() {
            if c % h != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: embed dim {c} not divisible by {h} heads"
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn declare(c: &SegFormerTinyConfig, b: &mut Builder) {
    let mut cin = 3;
    for i in 0..c.stages {
        let (dim, s) = (c.embed_dims[i], c.patch_strides[i]);
        let k = 2 * s - 1;
        let st = format!("stage{i}");
        b.push(format!("{st}.patch.weight"), &[dim, cin, k, k], Init::TruncNormal(0.02));
        b.push(format!("{st}.patch.bias"), &[dim], Init::Zeros);
        b.norm(&format!("{st}.patch.norm"), dim);
        for j in 0..c.blocks_per_stage[i] {
            let bl = format!("{st}.block{j}");
            b.norm(&format!("{bl}.norm1"), dim);
            for proj in ["q", "k", "v", "proj"] {
                b.linear(&format!("{bl}.attn.{proj}"), dim, dim);
            }
            if c.reduction_ratios[i] > 1 {
                b.linear(&format!("{bl}.attn.sr"), dim, dim);
                b.norm(&format!("{bl}.attn.sr_norm"), dim);
            }
            b.norm(&format!("{bl}.norm2"), dim);
            let hidden = dim * c.mlp_expansion;
            b.linear(&format!("{bl}.mlp.fc1"), dim, hidden);
            b.push(format!("{bl}.mlp.dw.weight"), &[hidden, 1, 3, 3], Init::TruncNormal(0.02));
            b.push(format!("{bl}.mlp.dw.bias"), &[hidden], Init::Zeros);
            b.linear(&format!("{bl}.mlp.fc2"), hidden, dim);
        }
        b.norm(&format!("{st}.norm"), dim);
        cin = dim;
    }
    for i in 0..c.stages {
        b.linear(&format!("decoder.proj{i}"), c.embed_dims[i], c.decoder_dim);
    }
    b.linear("decoder.fuse", c.stages * c.decoder_dim, c.decoder_dim);
    b.linear("decoder.head", c.decoder_dim, 1);
}

/// Multi-head attention of `q_src (N, L, C)` over `kv_src (N, L', C)`.
fn attention<T: Real>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    name: &str,
    x: Var,
    kv: Var,
    heads: usize,
) -> Result<Var> {
    let (n, l, c) = {
        let s = tape.value(x).shape();
        (s[0], s[1], s[2])
    };
    let lk = tape.value(kv).shape()[1];
    let d = c / heads;
    let q = linear(tape, p, &format!("{name}.q"), x)?;
    let k = linear(tape, p, &format!("{name}.k"), kv)?;
    let v = linear(tape, p, &format!("{name}.v"), kv)?;

    let q = tape.reshape(q, &[n, l, heads, d])?;
    let q = tape.permute(q, &[0, 2, 1, 3])?;
    let q = tape.reshape(q, &[n * heads, l, d])?;
    let k = tape.reshape(k, &[n, lk, heads, d])?;
    let k = tape.permute(k, &[0, 2, 3, 1])?;
    let k = tape.reshape(k, &[n * heads, d, lk])?;
    let v = tape.reshape(v, &[n, lk, heads, d])?;
    let v = tape.permute(v, &[0, 2, 1, 3])?;
    let v = tape.reshape(v, &[n * heads, lk, d])?;

    let scores = tape.matmul(q, k)?;
    let scores = tape.scale(scores, T::c(1.0 / (d as f64).sqrt()));
    let attn = tape.softmax(scores)?;
    let out = tape.matmul(attn, v)?;
    let out = tape.reshape(out, &[n, heads, l, d])?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, &[n, l, c])?;
    linear(tape, p, &format!("{name}.proj"), out)
}

fn block<T: Real>(
    tape: &mut Tape<T>,
    c: &SegFormerTinyConfig,
    p: &ParamVars,
    stage: usize,
    j: usize,
    x: Var,
    hw: (usize, usize),
) -> Result<Var> {
    let bl = format!("stage{stage}.block{j}");
    let (h, w) = hw;
    let r = c.reduction_ratios[stage];

    let xn = norm(tape, p, &format!("{bl}.norm1"), x)?;
    let kv = if r > 1 {
        let m = to_map(tape, xn, h, w)?;
        let m = tape.avg_pool(m, r)?;
        let t = to_tokens(tape, m)?;
        let t = linear(tape, p, &format!("{bl}.attn.sr"), t)?;
        norm(tape, p, &format!("{bl}.attn.sr_norm"), t)?
    } else {
        xn
    };
    let a = attention(tape, p, &format!("{bl}.attn"), xn, kv, c.heads[stage])?;
    let x = tape.add(x, a)?;

    let xn = norm(tape, p, &format!("{bl}.norm2"), x)?;
    let hdn = linear(tape, p, &format!("{bl}.mlp.fc1"), xn)?;
    let m = to_map(tape, hdn, h, w)?;
    let m = tape.depthwise_conv3(m, p.get(&format!("{bl}.mlp.dw.weight"))?, p.get(&format!("{bl}.mlp.dw.bias"))?)?;
    let t = to_tokens(tape, m)?;
    let t = tape.gelu(t);
    let t = linear(tape, p, &format!("{bl}.mlp.fc2"), t)?;
    tape.add(x, t)
}

/// `(N, 3, H, W)` → `(N, 1, H, W)` logits.
pub fn segformer_forward<T: Real>(tape: &mut Tape<T>, c: &SegFormerTinyConfig, p: &ParamVars, x: Var) -> Result<Var> {
    c.validate()?;
    let (n, h, w) = check_input(tape.value(x).shape(), c.patch_strides.iter().product())?;
    let mut feat = x;
    let mut stage_tokens = Vec::with_capacity(c.stages);
    let (mut fh, mut fw) = (h, w);
    for i in 0..c.stages {
        let s = c.patch_strides[i];
        let st = format!("stage{i}");
        let m = tape.conv2d(feat, p.get(&format!("{st}.patch.weight"))?, Some(p.get(&format!("{st}.patch.bias"))?), s, s - 1)?;
        fh /= s;
        fw /= s;
        let mut t = to_tokens(tape, m)?;
        t = norm(tape, p, &format!("{st}.patch.norm"), t)?;
        for j in 0..c.blocks_per_stage[i] {
            t = block(tape, c, p, i, j, t, (fh, fw))?;
        }
        t = norm(tape, p, &format!("{st}.norm"), t)?;
        feat = to_map(tape, t, fh, fw)?;
        stage_tokens.push((t, fh, fw));
    }

    let (h1, w1) = (stage_tokens[0].1, stage_tokens[0].2);
    let mut maps = Vec::with_capacity(c.stages);
    for (i, &(t, sh, sw)) in stage_tokens.iter().enumerate() {
        let d = linear(tape, p, &format!("decoder.proj{i}"), t)?;
        let mut m = to_map(tape, d, sh, sw)?;
        if (sh, sw) != (h1, w1) {
            m = tape.resize_bilinear(m, h1, w1)?;
        }
        maps.push(m);
    }
    let cat = if maps.len() == 1 { maps[0] } else { tape.concat(&maps, 1)? };
    let t = to_tokens(tape, cat)?;
    let t = linear(tape, p, "decoder.fuse", t)?;
    let t = tape.gelu(t);
    let t = linear(tape, p, "decoder.head", t)?;
    let m = to_map(tape, t, h1, w1)?;
    let out = if (h1, w1) != (h, w) { tape.resize_bilinear(m, h, w)? } else { m };
    debug_assert_eq!(tape.value(out).shape(), [n, 1, h, w]);
    Ok(out)
}
