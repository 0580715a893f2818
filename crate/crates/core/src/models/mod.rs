//! Segmentation networks and their parameter store.
//!
//! Parameters live in a name-keyed map of `f32` tensors. A forward pass binds
//! them onto a [`Tape`] (at either precision) and records the network there, so
//! the same code serves training, inference and 64-bit gradient checks.

mod checkpoint;
mod segformer;
mod unet;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_as, save_checkpoint, FORMAT_VERSION, MAGIC};
pub use segformer::{segformer_forward, SegFormerTinyConfig};
pub use unet::{unet_forward, UNetTinyConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchConfig {
    Segformer(SegFormerTinyConfig),
    Unet(UNetTinyConfig),
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Segformer(c) => c.validate(),
            Self::Unet(c) => c.validate(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Segformer(_) => "segformer-tiny",
            Self::Unet(_) => "unet-tiny",
        }
    }

    /// Canonical serialized form; the fingerprint and checkpoints are derived from it.
    pub fn blob(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn fingerprint(&self) -> u64 {
        let digest = Sha256::digest(self.blob().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// Input side lengths must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        match self {
            Self::Segformer(c) => c.patch_strides.iter().product(),
            Self::Unet(c) => 1 << c.depth,
        }
    }
}

/// Named parameter tensors for one architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl ModelParams {
    pub fn fingerprint(&self) -> u64 {
        self.arch.fingerprint()
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    /// Checks names and shapes against a freshly built model of the same architecture.
    pub fn check_layout(&self) -> Result<()> {
        let reference = layout(&self.arch)?;
        if reference.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters, architecture expects {}",
                self.tensors.len(),
                reference.len()
            )));
        }
        for (name, shape) in reference {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    Zeros,
    Ones,
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
}

#[derive(Default)]
pub(crate) struct Builder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        self.specs.push((name.into(), shape.to_vec(), init));
    }

    pub fn linear(&mut self, name: &str, cin: usize, cout: usize) {
        self.push(format!("{name}.weight"), &[cin, cout], Init::TruncNormal(0.02));
        self.push(format!("{name}.bias"), &[cout], Init::Zeros);
    }

    pub fn norm(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.weight"), &[c], Init::Ones);
        self.push(format!("{name}.bias"), &[c], Init::Zeros);
    }

    fn materialize(self, arch: ArchConfig, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in self.specs {
            let t = match init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::full(&shape, 1.0),
                Init::TruncNormal(std) => {
                    let normal = Normal::new(0.0, std).expect("positive std");
                    Tensor::from_fn(&shape, |_| loop {
                        let v: f64 = normal.sample(&mut rng);
                        if v.abs() <= 2.0 * std {
                            break v as f32;
                        }
                    })
                }
            };
            tensors.insert(name, t);
        }
        ModelParams { arch, tensors }
    }
}

fn builder(arch: &ArchConfig) -> Result<Builder> {
    arch.validate()?;
    let mut b = Builder::default();
    match arch {
        ArchConfig::Segformer(c) => segformer::declare(c, &mut b),
        ArchConfig::Unet(c) => unet::declare(c, &mut b),
    }
    Ok(b)
}

fn layout(arch: &ArchConfig) -> Result<Vec<(String, Vec<usize>)>> {
    Ok(builder(arch)?.specs.into_iter().map(|(n, s, _)| (n, s)).collect())
}

/// Seeded random initialization. Bit-identical for equal `(arch, seed)`.
pub fn build(arch: &ArchConfig, seed: u64) -> Result<ModelParams> {
    Ok(builder(arch)?.materialize(arch.clone(), seed))
}

pub fn build_segformer_tiny(cfg: &SegFormerTinyConfig, seed: u64) -> Result<ModelParams> {
    build(&ArchConfig::Segformer(cfg.clone()), seed)
}

pub fn build_unet_tiny(cfg: &UNetTinyConfig, seed: u64) -> Result<ModelParams> {
    build(&ArchConfig::Unet(cfg.clone()), seed)
}

/// Parameters recorded as leaves of one tape.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Records every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind<T: Real>(tape: &mut Tape<T>, params: &ModelParams, trainable: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(name, t)| {
                let t = t.cast::<T>();
                let v = if trainable { tape.param(t) } else { tape.constant(t) };
                (name.clone(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Tokens `(N, L, Cin)` through `name.weight (Cin, Cout)` and `name.bias`.
pub(crate) fn linear<T: Real>(tape: &mut Tape<T>, p: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.get(&format!("{name}.weight"))?)?;
    tape.add_bias(y, p.get(&format!("{name}.bias"))?)
}

pub(crate) fn norm<T: Real>(tape: &mut Tape<T>, p: &ParamVars, name: &str, x: Var) -> Result<Var> {
    tape.layer_norm(x, p.get(&format!("{name}.weight"))?, p.get(&format!("{name}.bias"))?)
}

/// `(N, C, H, W)` → `(N, H·W, C)`
pub(crate) fn to_tokens<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    let t = tape.permute(x, &[0, 2, 3, 1])?;
    tape.reshape(t, &[s[0], s[2] * s[3], s[1]])
}

/// `(N, H·W, C)` → `(N, C, H, W)`
pub(crate) fn to_map<T: Real>(tape: &mut Tape<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    let t = tape.reshape(x, &[s[0], h, w, s[2]])?;
    tape.permute(t, &[0, 3, 1, 2])
}

pub(crate) fn check_input(shape: &[usize], multiple: usize) -> Result<(usize, usize, usize)> {
    let [n, c, h, w] = shape else {
        return Err(Error::Shape(format!("expected an (N,3,H,W) batch, got {shape:?}")));
    };
    if *c != 3 || *n == 0 {
        return Err(Error::Shape(format!("expected an (N,3,H,W) batch, got {shape:?}")));
    }
    if *h == 0 || *w == 0 || h % multiple != 0 || w % multiple != 0 {
        return Err(Error::Dimension(format!(
            "input {h}x{w} must be a positive multiple of {multiple}"
        )));
    }
    Ok((*n, *h, *w))
}

/// Records the network on `tape` and returns `(N, 1, H, W)` logits.
pub fn forward<T: Real>(tape: &mut Tape<T>, arch: &ArchConfig, p: &ParamVars, x: Var) -> Result<Var> {
    match arch {
        ArchConfig::Segformer(c) => segformer_forward(tape, c, p, x),
        ArchConfig::Unet(c) => unet_forward(tape, c, p, x),
    }
}

/// Inference on a frozen snapshot: `(N, 3, H, W)` → `(N, 1, H, W)` logits.
pub fn predict(params: &ModelParams, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::<f32>::new();
    let p = ParamVars::bind(&mut tape, params, false);
    let x = tape.constant(batch.clone());
    let y = forward(&mut tape, &params.arch, &p, x)?;
    Ok(tape.value(y).clone())
}
