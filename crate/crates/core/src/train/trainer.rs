//! The training loop and frozen-snapshot evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{compound_loss, LossConfig};
use super::optim::{adamw_step, lr_at, AdamState, OptimConfig};
use crate::augment::{augment, AugmentConfig, Sample};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{threshold_logits, ClassReport, ConfusionMatrix};
use crate::models::{forward, predict, ModelParams, ParamVars};
use crate::raster::{FloatRaster, LabelMask, Normalization};
use crate::seeds;

/// Loop settings that are not optimizer hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub iters: u64,
    /// Validate every this many iterations; 0 disables periodic validation.
    pub eval_interval: u64,
    pub augment: bool,
    pub threshold: f64,
    pub eval_batch: usize,
    pub threads: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            iters: 20000,
            eval_interval: 0,
            augment: true,
            threshold: 0.5,
            eval_batch: 8,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: u64,
    pub lr: f64,
    pub loss_bce: f64,
    pub loss_dice: f64,
    pub loss_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iter: u64,
    pub report: ClassReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub iters: Vec<IterRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainHistory {
    /// `iter,lr,loss_bce,loss_dice,loss_total`, one row per iteration.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,lr,loss_bce,loss_dice,loss_total\n");
        for r in &self.iters {
            let _ = writeln!(s, "{},{:e},{},{},{}", r.iter, r.lr, r.loss_bce, r.loss_dice, r.loss_total);
        }
        s
    }
}

/// Stacks planar rasters into an `(N, C, H, W)` tensor.
pub fn stack_images(images: &[&FloatRaster]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::Empty("empty batch".into()))?;
    let (w, h, c) = (first.width(), first.height(), first.channels());
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.width(), img.height(), img.channels()) != (w, h, c) {
            return Err(Error::Dimension("batch images differ in size".into()));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}

pub fn stack_masks(masks: &[&LabelMask]) -> Result<Tensor<f32>> {
    let first = masks.first().ok_or_else(|| Error::Empty("empty batch".into()))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if !m.same_dims(w, h) {
            return Err(Error::Dimension("batch masks differ in size".into()));
        }
        data.extend(m.data().iter().map(|&v| v as f32));
    }
    Tensor::new(vec![masks.len(), 1, h, w], data)
}

/// Hard water masks for a set of samples, using a frozen parameter snapshot.
pub fn predict_masks(
    params: &ModelParams,
    images: &[&FloatRaster],
    norm: &Normalization,
    threshold: f64,
) -> Result<Vec<LabelMask>> {
    let mut out = Vec::with_capacity(images.len());
    let std: Vec<FloatRaster> = images.iter().map(|i| i.standardized(norm)).collect::<Result<_>>()?;
    let refs: Vec<&FloatRaster> = std.iter().collect();
    let logits = predict(params, &stack_images(&refs)?)?;
    let plane = refs[0].width() * refs[0].height();
    for (i, img) in refs.iter().enumerate() {
        let z = &logits.data()[i * plane..(i + 1) * plane];
        out.push(threshold_logits(z, img.width(), img.height(), threshold)?);
    }
    Ok(out)
}

/// Confusion counts over `samples`. No randomness reaches this path.
pub fn evaluate(params: &ModelParams, samples: &[Sample], norm: &Normalization, settings: &TrainSettings) -> Result<ClassReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set is empty".into()));
    }
    let batch = settings.eval_batch.max(1);
    let chunks: Vec<&[Sample]> = samples.chunks(batch).collect();
    let eval_chunk = |chunk: &[Sample]| -> Result<ConfusionMatrix> {
        let images: Vec<&FloatRaster> = chunk.iter().map(|s| &s.image).collect();
        let preds = predict_masks(params, &images, norm, settings.threshold)?;
        let mut cm = ConfusionMatrix::default();
        for (p, s) in preds.iter().zip(chunk) {
            cm.accumulate(p, &s.mask)?;
        }
        Ok(cm)
    };
    let threads = settings.threads.max(1).min(chunks.len());
    let cm = if threads <= 1 {
        chunks.iter().map(|c| eval_chunk(c)).sum::<Result<ConfusionMatrix>>()?
    } else {
        let per = chunks.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .chunks(per)
                .map(|group| scope.spawn(move || group.iter().map(|c| eval_chunk(c)).sum::<Result<ConfusionMatrix>>()))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .sum::<Result<ConfusionMatrix>>()
        })?
    };
    Ok(ClassReport::from_confusion(cm))
}

/// Everything one run needs besides the parameters and data.
#[derive(Clone, Debug)]
pub struct TrainSpec<'a> {
    pub loss: &'a LossConfig,
    pub optim: &'a OptimConfig,
    pub augment: &'a AugmentConfig,
    pub normalization: &'a Normalization,
    pub settings: &'a TrainSettings,
    pub seed: u64,
}

fn training_batch(train: &[Sample], spec: &TrainSpec, iter: u64) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut pick = seeds::rng(spec.seed, &[seeds::tag("batch"), iter]);
    let mut images = Vec::with_capacity(spec.optim.batch_size);
    let mut masks = Vec::with_capacity(spec.optim.batch_size);
    for k in 0..spec.optim.batch_size {
        let s = &train[pick.random_range(0..train.len())];
        let s = if spec.settings.augment {
            let mut rng = seeds::rng(spec.seed, &[seeds::tag("augment"), spec.augment.seed, iter, k as u64]);
            augment(s, &mut rng, spec.augment)?
        } else {
            s.clone()
        };
        images.push(s.image.standardized(spec.normalization)?);
        masks.push(s.mask);
    }
    let irefs: Vec<&FloatRaster> = images.iter().collect();
    let mrefs: Vec<&LabelMask> = masks.iter().collect();
    Ok((stack_images(&irefs)?, stack_masks(&mrefs)?))
}

/// Runs `settings.iters` AdamW steps on batches drawn with replacement from
/// `train`, validating on `val` every `eval_interval` iterations.
pub fn train_loop(
    params: ModelParams,
    train: &[Sample],
    val: &[Sample],
    spec: &TrainSpec,
) -> Result<(ModelParams, TrainHistory)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("training and validation splits must be nonempty".into()));
    }
    spec.loss.validate()?;
    spec.optim.validate()?;
    spec.augment.validate()?;
    spec.normalization.validate()?;
    let iters = spec.settings.iters;
    if iters > spec.optim.total_iters {
        return Err(Error::Config(format!(
            "iters {iters} exceeds the schedule's total_iters {}",
            spec.optim.total_iters
        )));
    }
    if spec.settings.augment && spec.augment.out_size != train[0].width() {
        return Err(Error::Config(format!(
            "augment out_size {} differs from patch size {}",
            spec.augment.out_size,
            train[0].width()
        )));
    }
    spec.optim.warn_if_floor_inactive();

    let mut params = params;
    let mut history = TrainHistory::default();
    let mut state = AdamState::default();
    for iter in 0..iters {
        let (x, y) = training_batch(train, spec, iter)?;
        let mut tape = Tape::<f32>::new();
        let pv = ParamVars::bind(&mut tape, &params, true);
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let logits = forward(&mut tape, &params.arch, &pv, xv)?;
        let p = tape.sigmoid(logits);
        let parts = compound_loss(&mut tape, p, yv, spec.loss)?;
        let grads = tape.backward(parts.total)?;
        let named: BTreeMap<String, Tensor<f32>> =
            pv.iter().map(|(name, &v)| (name.clone(), grads.wrt(&tape, v))).collect();
        let lr = lr_at(iter, spec.optim)?;
        let record = IterRecord {
            iter,
            lr,
            loss_bce: tape.value(parts.bce).item() as f64,
            loss_dice: tape.value(parts.dice).item() as f64,
            loss_total: tape.value(parts.total).item() as f64,
        };
        if !record.loss_total.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite loss at iteration {iter}")));
        }
        drop(tape);
        adamw_step(&mut params, &named, &mut state, lr, spec.optim)?;
        log::debug!("iter {iter} lr {lr:.3e} loss {:.5}", record.loss_total);
        history.iters.push(record);
        let done = iter + 1;
        if spec.settings.eval_interval > 0 && done % spec.settings.eval_interval == 0 {
            let report = evaluate(&params, val, spec.normalization, spec.settings)?;
            log::info!(
                "iter {done}: val water IoU {}",
                crate::metrics::fmt_percent(report.water.iou)
            );
            history.evals.push(EvalRecord { iter: done, report });
        }
    }
    Ok((params, history))
}
