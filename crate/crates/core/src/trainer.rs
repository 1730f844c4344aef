//! The optimization loop.
//!
//! Each step assembles a minibatch, encodes clean anchors and positives for
//! the contrastive term and MLM-corrupted anchor copies for the MLM term,
//! backpropagates `L = L_contrastive + L_MLM`, rescales the global gradient
//! norm, and applies AdamW under the slanted triangular schedule.
//!
//! Parameters and optimizer moments are rounded to `f32` after every update,
//! so checkpoints (stored as `f32`) capture the training state exactly and a
//! resumed run replays the uninterrupted one.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, DocumentStore};
use crate::encoder::{
    mlm_logits, mlm_logits_backward, pool_backward, save_checkpoint, Checkpoint, DropoutSpec, EncoderConfig, EncoderParams,
    SequenceForward,
};
use crate::error::{Error, Result};
use crate::objective::{contrastive_loss_and_grad, mlm_loss_and_grad, EmbeddingSet, LossReduction};
use crate::optim::{adamw_step, rescale_gradients, stlr_learning_rate, AdamHyper, AdamState};
use crate::rng::derive_stream;
use crate::sampler::{ContrastiveBatch, SamplerConfig, SpanSampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Objective {
    #[default]
    #[serde(rename = "contrastive+mlm")]
    ContrastiveAndMlm,
    #[serde(rename = "contrastive-only")]
    ContrastiveOnly,
    #[serde(rename = "mlm-only")]
    MlmOnly,
}

impl Objective {
    pub fn uses_contrastive(self) -> bool {
        self != Objective::MlmOnly
    }

    pub fn uses_mlm(self) -> bool {
        self != Objective::ContrastiveOnly
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contrastive+mlm" => Ok(Objective::ContrastiveAndMlm),
            "contrastive-only" => Ok(Objective::ContrastiveOnly),
            "mlm-only" => Ok(Objective::MlmOnly),
            other => Err(Error::InvalidArgument(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub temperature: f64,
    pub lr_max: f64,
    pub weight_decay: f64,
    pub adam: AdamHyper,
    pub cut_frac: f64,
    pub stlr_ratio: f64,
    pub grad_norm: f64,
    /// Rescale every step to `grad_norm`, not only when it is exceeded.
    pub always_rescale: bool,
    pub seed: u64,
    pub objective: Objective,
    pub loss_reduction: LossReduction,
    /// Overrides `epochs * ceil(docs / batch_size)` as the schedule horizon and step budget.
    pub total_steps: Option<u64>,
    /// Drop wall-clock fields from the metrics log.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 1,
            temperature: 5e-2,
            lr_max: 5e-5,
            weight_decay: 0.1,
            adam: AdamHyper::default(),
            cut_frac: 0.1,
            stlr_ratio: 32.0,
            grad_norm: 1.0,
            always_rescale: false,
            seed: 0,
            objective: Objective::ContrastiveAndMlm,
            loss_reduction: LossReduction::Sum,
            total_steps: None,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.lr_max > 0.0) {
            return bad("lr_max must be positive");
        }
        if !(self.cut_frac > 0.0 && self.cut_frac < 1.0) {
            return bad("cut_frac must lie in (0, 1)");
        }
        if !(self.stlr_ratio >= 1.0) {
            return bad("stlr_ratio must be at least 1");
        }
        if self.batch_size < 1 || self.epochs < 1 {
            return bad("batch_size and epochs must be at least 1");
        }
        if !(self.grad_norm > 0.0) {
            return bad("grad_norm must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if self.total_steps == Some(0) {
            return bad("total_steps must be at least 1");
        }
        Ok(())
    }
}

/// Loss terms and parameter gradient for one batch.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    /// `None` when the objective skips the term.
    pub loss_contrastive: Option<f64>,
    pub loss_mlm: Option<f64>,
    pub grads: EncoderParams,
}

impl BatchGradient {
    pub fn total(&self) -> f64 {
        self.loss_contrastive.unwrap_or(0.0) + self.loss_mlm.unwrap_or(0.0)
    }
}

/// What the loss needs besides parameters and data.
#[derive(Debug, Clone, Copy)]
pub struct LossSettings {
    pub temperature: f64,
    pub objective: Objective,
    pub reduction: LossReduction,
    /// `(seed, step)` keying dropout masks; ignored at dropout 0.
    pub dropout_key: (u64, u64),
}

impl LossSettings {
    pub fn from_config(cfg: &TrainConfig, step: u64) -> Self {
        Self {
            temperature: cfg.temperature,
            objective: cfg.objective,
            reduction: cfg.loss_reduction,
            dropout_key: (cfg.seed, step),
        }
    }
}

fn forward_rows(
    params: &EncoderParams,
    rows: &[Vec<u32>],
    tag: &str,
    settings: &LossSettings,
) -> Result<Vec<SequenceForward>> {
    let rate = params.config.dropout;
    rows.par_iter()
        .enumerate()
        .map(|(r, ids)| {
            if ids.is_empty() {
                return Err(Error::AllPadRow { row: r });
            }
            if rate > 0.0 {
                let (seed, step) = settings.dropout_key;
                let mut rng = derive_stream(seed, "dropout", step, &format!("{tag}:{r}"));
                params.forward_sequence(ids, Some(DropoutSpec { rate, rng: &mut rng }))
            } else {
                params.forward_sequence(ids, None)
            }
        })
        .collect()
}

fn pooled_matrix(fwds: &[SequenceForward], d: usize) -> Array2<f64> {
    let mut out = Array2::zeros((fwds.len(), d));
    for (r, f) in fwds.iter().enumerate() {
        out.row_mut(r).assign(&f.pooled());
    }
    out
}

/// Backpropagates every `(forward, d_output)` pair, summing per-sequence
/// gradients in input order so the result does not depend on thread count.
fn accumulate(params: &EncoderParams, work: Vec<(&SequenceForward, Array2<f64>)>) -> EncoderParams {
    let partials: Vec<EncoderParams> = work
        .par_iter()
        .map(|(fwd, d_out)| {
            let mut g = EncoderParams::zeros(&params.config);
            params.backward_sequence(fwd, d_out, &mut g);
            g
        })
        .collect();
    let mut total = EncoderParams::zeros(&params.config);
    for g in &partials {
        total.add_assign(g);
    }
    total
}

/// Loss terms and exact parameter gradient of one contrastive batch.
pub fn batch_loss_and_grad(
    params: &EncoderParams,
    batch: &ContrastiveBatch,
    settings: &LossSettings,
) -> Result<BatchGradient> {
    let d = params.config.d_model;
    let an = batch.num_anchors();
    let p = batch.positives_per_anchor;

    let mut d_extra_mlm: Vec<Array2<f64>> = Vec::new();
    let mut mlm_grads = EncoderParams::zeros(&params.config);

    let mut anchor_fwd = Vec::new();
    let mut positive_fwd = Vec::new();
    let mut loss_contrastive = None;
    let mut d_anchor = Array2::zeros((0, d));
    let mut d_mean_pos = Array2::zeros((0, d));
    if settings.objective.uses_contrastive() {
        let anchor_rows: Vec<Vec<u32>> = (0..an).map(|r| batch.anchors.row_tokens(r)).collect();
        let positive_rows: Vec<Vec<u32>> = (0..p * an).map(|r| batch.positives.row_tokens(r)).collect();
        anchor_fwd = forward_rows(params, &anchor_rows, "anchor", settings)?;
        positive_fwd = forward_rows(params, &positive_rows, "positive", settings)?;
        let anchors = pooled_matrix(&anchor_fwd, d);
        let positives = pooled_matrix(&positive_fwd, d);
        let mut mean_pos = Array2::zeros((an, d));
        for i in 0..an {
            let mut acc = ndarray::Array1::<f64>::zeros(d);
            for pi in 0..p {
                acc += &positives.row(pi * an + i);
            }
            mean_pos.row_mut(i).assign(&(acc / p as f64));
        }
        let set = EmbeddingSet::new(&anchors, &mean_pos, settings.temperature)?;
        let (loss, grad) = contrastive_loss_and_grad(&set, settings.reduction)?;
        loss_contrastive = Some(loss);
        d_anchor = grad.slice(ndarray::s![..an, ..]).to_owned();
        d_mean_pos = grad.slice(ndarray::s![an.., ..]).to_owned();
    }

    let mut masked_fwd = Vec::new();
    let mut loss_mlm = None;
    if settings.objective.uses_mlm() {
        let masked_rows: Vec<Vec<u32>> = batch.mlm.iter().map(|m| m.input.clone()).collect();
        masked_fwd = forward_rows(params, &masked_rows, "masked", settings)?;
        let mut blocks = Vec::with_capacity(an);
        let mut labels = Vec::new();
        for (fwd, inst) in masked_fwd.iter().zip(&batch.mlm) {
            blocks.push(mlm_logits(params, fwd.output.view(), &inst.positions)?);
            labels.extend_from_slice(&inst.labels);
        }
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        let logits = ndarray::concatenate(Axis(0), &views).expect("matching vocab width");
        let (loss, d_logits) = mlm_loss_and_grad(&logits, &labels)?;
        loss_mlm = Some(loss);
        let mut offset = 0;
        for (fwd, inst) in masked_fwd.iter().zip(&batch.mlm) {
            let k = inst.positions.len();
            let block = d_logits.slice(ndarray::s![offset..offset + k, ..]).to_owned();
            offset += k;
            d_extra_mlm.push(mlm_logits_backward(
                params,
                fwd.output.view(),
                &inst.positions,
                &block,
                &mut mlm_grads,
            )?);
        }
    }

    let mut work: Vec<(&SequenceForward, Array2<f64>)> = Vec::new();
    for (i, fwd) in anchor_fwd.iter().enumerate() {
        work.push((fwd, pool_backward(d_anchor.row(i), fwd.len())));
    }
    for (r, fwd) in positive_fwd.iter().enumerate() {
        let i = r % an;
        let d_pooled = d_mean_pos.row(i).mapv(|g| g / p as f64);
        work.push((fwd, pool_backward(d_pooled.view(), fwd.len())));
    }
    for (fwd, d_out) in masked_fwd.iter().zip(d_extra_mlm) {
        work.push((fwd, d_out));
    }
    let mut grads = accumulate(params, work);
    grads.add_assign(&mlm_grads);

    Ok(BatchGradient {
        loss_contrastive,
        loss_mlm,
        grads,
    })
}

/// Loss only; used by finite-difference checks.
pub fn batch_loss(params: &EncoderParams, batch: &ContrastiveBatch, settings: &LossSettings) -> Result<f64> {
    Ok(batch_loss_and_grad(params, batch, settings)?.total())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Optimizer steps completed, including this one.
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss_contrastive: Option<f64>,
    pub loss_mlm: Option<f64>,
    pub loss: f64,
    /// Global gradient norm before rescaling.
    pub grad_norm: f64,
    pub grad_norm_rescaled: f64,
    pub spans: usize,
    pub spans_per_sec: Option<f64>,
}

/// Trainer bookkeeping stored alongside resumable checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub epochs_completed: u64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: u64,
    pub total_steps: u64,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub records: Vec<MetricRecord>,
    pub params: EncoderParams,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn epoch_checkpoint_name(epoch: u64) -> String {
    format!("epoch-{epoch}.ckpt")
}

pub struct Trainer<'a> {
    pub store: &'a DocumentStore,
    pub vocab_fingerprint: String,
    pub sampler: SamplerConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

impl Trainer<'_> {
    fn eligible(&self, sampler: &SpanSampler) -> Result<Vec<&Document>> {
        let docs: Vec<&Document> = self
            .store
            .iter()
            .filter(|d| sampler.check_eligible(d).is_ok())
            .collect();
        let skipped = self.store.len() - docs.len();
        if skipped > 0 {
            log::warn!("skipping {skipped} document(s) too short for the sampler");
        }
        if docs.is_empty() {
            return Err(Error::NoEligibleDocuments {
                required: self.sampler.min_doc_tokens(),
            });
        }
        Ok(docs)
    }

    /// `epochs * ceil(docs / N)` unless overridden.
    pub fn total_steps(&self, eligible: usize) -> u64 {
        self.train.total_steps.unwrap_or_else(|| {
            (self.train.epochs * eligible.div_ceil(self.train.batch_size)) as u64
        })
    }

    /// Trains from scratch, or from `resume` when given, writing metrics and
    /// checkpoints into `out_dir`.
    pub fn run(&self, out_dir: &Path, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
        self.train.validate()?;
        self.encoder.validate()?;
        let sampler = SpanSampler::new(self.sampler.clone())?;
        if self.encoder.max_positions < self.sampler.max_span_len {
            return Err(Error::InvalidConfig(format!(
                "max_positions {} below max_span_len {}",
                self.encoder.max_positions, self.sampler.max_span_len
            )));
        }
        let docs = self.eligible(&sampler)?;
        let total = self.total_steps(docs.len());
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let metrics_path = out_dir.join(METRICS_FILE);

        let (mut params, mut state, start_epoch) = match resume {
            Some(ckpt) => {
                ckpt.check_vocab(&self.vocab_fingerprint)?;
                if ckpt.params.config != self.encoder {
                    return Err(Error::InvalidConfig("checkpoint encoder config differs from run config".into()));
                }
                let state = ckpt.optimizer.ok_or_else(|| {
                    Error::InvalidArgument("checkpoint carries no optimizer state; cannot resume".into())
                })?;
                if state.total_steps != total {
                    return Err(Error::InvalidConfig(format!(
                        "checkpoint horizon {} differs from run horizon {total}",
                        state.total_steps
                    )));
                }
                let run: RunState = ckpt
                    .run
                    .map(serde_json::from_value)
                    .transpose()
                    .map_err(|e| Error::InvalidArgument(format!("checkpoint run state: {e}")))?
                    .ok_or_else(|| Error::InvalidArgument("checkpoint carries no run state".into()))?;
                (ckpt.params, state, run.epochs_completed)
            }
            None => {
                let mut params = EncoderParams::init(&self.encoder, self.train.seed)?;
                params.round_to_f32();
                let state = AdamState::new(&params, total);
                let _ = fs::remove_file(&metrics_path);
                (params, state, 0)
            }
        };

        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?;
        let mut metrics = BufWriter::new(file);
        let mut records = Vec::new();
        let vocab_size = self.encoder.vocab_size;
        let mut epoch = start_epoch;

        'epochs: while epoch < self.train.epochs as u64 && state.step < total {
            let mut order: Vec<usize> = (0..docs.len()).collect();
            order.shuffle(&mut derive_stream(self.train.seed, "shuffle", epoch, ""));
            for chunk in order.chunks(self.train.batch_size) {
                if state.step >= total {
                    break 'epochs;
                }
                let started = Instant::now();
                let batch_docs: Vec<&Document> = chunk.iter().map(|&k| docs[k]).collect();
                let batch = sampler.assemble_batch(self.train.seed, epoch, &batch_docs, vocab_size)?;
                let settings = LossSettings::from_config(&self.train, state.step);
                let mut out = batch_loss_and_grad(&params, &batch, &settings)?;
                let loss = out.total();
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("loss at step {}", state.step + 1)));
                }
                let norm = rescale_gradients(&mut out.grads, self.train.grad_norm, self.train.always_rescale)?;
                let lr = stlr_learning_rate(
                    state.step,
                    total,
                    self.train.cut_frac,
                    self.train.lr_max,
                    self.train.stlr_ratio,
                )?;
                adamw_step(&mut params, &out.grads, &mut state, lr, self.train.weight_decay, self.train.adam)?;
                params.round_to_f32();
                state.m.round_to_f32();
                state.v.round_to_f32();
                if let Some(name) = params.first_non_finite() {
                    return Err(Error::NonFiniteGradient(name));
                }

                let spans = batch.num_anchors() * (1 + batch.positives_per_anchor);
                let record = MetricRecord {
                    step: state.step,
                    epoch,
                    lr,
                    loss_contrastive: out.loss_contrastive,
                    loss_mlm: out.loss_mlm,
                    loss,
                    grad_norm: norm.before,
                    grad_norm_rescaled: norm.after,
                    spans,
                    spans_per_sec: (!self.train.deterministic)
                        .then(|| spans as f64 / started.elapsed().as_secs_f64().max(1e-9)),
                };
                let line = serde_json::to_string(&record).expect("record serializes");
                writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
                metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
                log::debug!("step {} loss {:.4} lr {:.3e}", record.step, record.loss, record.lr);
                records.push(record);
            }
            epoch += 1;
            if epoch <= self.train.epochs as u64 && state.step <= total {
                let path = out_dir.join(epoch_checkpoint_name(epoch));
                self.write_checkpoint(&params, &state, epoch, &path)?;
            }
        }

        let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
        self.write_checkpoint(&params, &state, epoch, &final_checkpoint)?;
        Ok(TrainOutcome {
            steps: state.step,
            total_steps: total,
            final_checkpoint,
            metrics_path,
            records,
            params,
        })
    }

    fn write_checkpoint(&self, params: &EncoderParams, state: &AdamState, epochs_completed: u64, path: &Path) -> Result<()> {
        let run = RunState {
            epochs_completed,
            seed: self.train.seed,
        };
        let ckpt = Checkpoint {
            params: params.clone(),
            vocab_fingerprint: self.vocab_fingerprint.clone(),
            step: state.step,
            optimizer: Some(state.clone()),
            run: Some(serde_json::to_value(run).expect("run state serializes")),
        };
        save_checkpoint(&ckpt, path)
    }
}

/// Reads a metrics log written by [`Trainer::run`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedRecord {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}
