//! AdamW with decoupled weight decay, the slanted triangular learning-rate
//! schedule and global gradient-norm rescaling.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments plus step bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: EncoderParams,
    pub v: EncoderParams,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub total_steps: u64,
}

impl AdamState {
    pub fn new(params: &EncoderParams, total_steps: u64) -> Self {
        Self {
            m: EncoderParams::zeros(&params.config),
            v: EncoderParams::zeros(&params.config),
            step: 0,
            total_steps,
        }
    }
}

/// Slanted triangular schedule: linear warm-up from `lr_max / ratio` to
/// `lr_max` over the first `cut = floor(T * cut_frac)` steps, then linear
/// decay back to `lr_max / ratio` at `t = T`.
pub fn stlr_learning_rate(t: u64, total: u64, cut_frac: f64, lr_max: f64, ratio: f64) -> Result<f64> {
    if total < 1 {
        return Err(Error::InvalidArgument("STLR needs at least one step".into()));
    }
    if t > total {
        return Err(Error::InvalidArgument(format!("step {t} beyond horizon {total}")));
    }
    if !(cut_frac > 0.0 && cut_frac < 1.0) || ratio < 1.0 {
        return Err(Error::InvalidArgument("need 0 < cut_frac < 1 and ratio >= 1".into()));
    }
    let cut = ((total as f64 * cut_frac).floor() as u64).max(1);
    let p = if t < cut {
        t as f64 / cut as f64
    } else {
        let decay_len = cut as f64 * (1.0 / cut_frac - 1.0);
        (1.0 - (t - cut) as f64 / decay_len).max(0.0)
    };
    Ok(lr_max * (1.0 + p * (ratio - 1.0)) / ratio)
}

/// Outcome of [`rescale_gradients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradNorm {
    pub before: f64,
    pub after: f64,
}

/// Global L2 rescaling over all gradients. With `always` false gradients are
/// only shrunk when their norm exceeds `max_norm`; with `always` true every
/// non-zero gradient is rescaled to exactly `max_norm`.
pub fn rescale_gradients(grads: &mut EncoderParams, max_norm: f64, always: bool) -> Result<GradNorm> {
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient(name));
    }
    let before = grads.sum_squares().sqrt();
    if before > 0.0 && (before > max_norm || always) {
        grads.scale(max_norm / before);
    }
    let after = grads.sum_squares().sqrt();
    Ok(GradNorm { before, after })
}

/// One AdamW update. Decay `theta -= lr * wd * theta` is applied before the
/// moment step and only to matrix tensors.
pub fn adamw_step(
    params: &mut EncoderParams,
    grads: &EncoderParams,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    hyper: AdamHyper,
) -> Result<()> {
    for (p, g) in params.tensors().iter().zip(grads.tensors()) {
        if p.value.shape() != g.value.shape() || p.name != g.name {
            return Err(Error::ShapeMismatch {
                name: p.name.clone(),
                expected: p.value.shape().to_vec(),
                found: g.value.shape().to_vec(),
            });
        }
    }
    if state.m.config != params.config || state.v.config != params.config {
        return Err(Error::ShapeMismatch {
            name: "optimizer state".into(),
            expected: vec![params.num_parameters()],
            found: vec![state.m.num_parameters()],
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let grads = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((mut p, g), mut m), mut v) in params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs) {
        let decay = if p.kind.decays() { lr * weight_decay } else { 0.0 };
        ndarray::Zip::from(&mut p.value)
            .and(&g.value)
            .and(&mut m.value)
            .and(&mut v.value)
            .for_each(|theta, &gv, mv, vv| {
                *theta -= decay * *theta;
                *mv = hyper.beta1 * *mv + (1.0 - hyper.beta1) * gv;
                *vv = hyper.beta2 * *vv + (1.0 - hyper.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
            });
    }
    Ok(())
}
