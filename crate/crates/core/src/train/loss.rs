//! Soft Dice, class-weighted binary cross-entropy and their linear combination,
//! all recorded on the tape so they differentiate with respect to `p`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Var};
use crate::error::{Error, Result};

/// Probabilities are clamped into `[P_CLAMP, 1 − P_CLAMP]` before any log.
pub const P_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub epsilon: f64,
    pub w_background: f64,
    pub w_water: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            w_background: 0.2289,
            w_water: 0.7711,
            lambda_bce: 1.0,
            lambda_dice: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.w_background > 0.0 && self.w_water > 0.0) {
            return Err(Error::Config("loss epsilon and class weights must be positive".into()));
        }
        if self.lambda_bce < 0.0 || self.lambda_dice < 0.0 {
            return Err(Error::Config("loss lambdas must be non-negative".into()));
        }
        Ok(())
    }
}

fn same_shape<T: Real>(tape: &Tape<T>, p: Var, y: Var) -> Result<()> {
    let (ps, ys) = (tape.value(p).shape(), tape.value(y).shape());
    if ps != ys {
        return Err(Error::Shape(format!("prediction {ps:?} vs label {ys:?}")));
    }
    if tape.value(p).is_empty() {
        return Err(Error::Empty("loss over zero pixels".into()));
    }
    Ok(())
}

/// `1 − (2 Σ p·y + ε) / (Σ p + Σ y + ε)`
pub fn dice_loss<T: Real>(tape: &mut Tape<T>, p: Var, y: Var, epsilon: f64) -> Result<Var> {
    same_shape(tape, p, y)?;
    let py = tape.mul(p, y)?;
    let inter = tape.sum(py);
    let num = tape.scale(inter, T::c(2.0));
    let num = tape.add_scalar(num, T::c(epsilon));
    let sp = tape.sum(p);
    let sy = tape.sum(y);
    let den = tape.add(sp, sy)?;
    let den = tape.add_scalar(den, T::c(epsilon));
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -T::one());
    Ok(tape.add_scalar(neg, T::one()))
}

/// `−(1/N) Σ [w_water·y·log p + w_background·(1−y)·log(1−p)]` after clamping `p`.
pub fn weighted_bce_loss<T: Real>(tape: &mut Tape<T>, p: Var, y: Var, w_background: f64, w_water: f64) -> Result<Var> {
    same_shape(tape, p, y)?;
    let n = tape.value(p).len();
    let yv = tape.value(y).clone();
    let w_pos = tape.constant(yv.cast::<T>());
    let w_pos = tape.scale(w_pos, T::c(w_water));
    let neg_mask = tape.constant(crate::autodiff::Tensor::from_fn(yv.shape(), |i| T::one() - yv.data()[i]));
    let w_neg = tape.scale(neg_mask, T::c(w_background));

    let pc = tape.clamp(p, T::c(P_CLAMP), T::c(1.0 - P_CLAMP));
    let log_p = tape.log(pc)?;
    let one_minus = tape.scale(pc, -T::one());
    let one_minus = tape.add_scalar(one_minus, T::one());
    let log_q = tape.log(one_minus)?;
    let a = tape.mul(w_pos, log_p)?;
    let b = tape.mul(w_neg, log_q)?;
    let s = tape.add(a, b)?;
    let total = tape.sum(s);
    Ok(tape.scale(total, T::c(-1.0 / n as f64)))
}

/// Component and combined loss nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub bce: Var,
    pub dice: Var,
    pub total: Var,
}

/// `λ_bce · weighted_bce + λ_dice · dice`
pub fn compound_loss<T: Real>(tape: &mut Tape<T>, p: Var, y: Var, cfg: &LossConfig) -> Result<LossParts> {
    cfg.validate()?;
    let bce = weighted_bce_loss(tape, p, y, cfg.w_background, cfg.w_water)?;
    let dice = dice_loss(tape, p, y, cfg.epsilon)?;
    let a = tape.scale(bce, T::c(cfg.lambda_bce));
    let b = tape.scale(dice, T::c(cfg.lambda_dice));
    let total = tape.add(a, b)?;
    Ok(LossParts { bce, dice, total })
}
