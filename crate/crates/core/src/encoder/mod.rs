//! Compact pre-norm transformer encoder with a mean pooler and a weight-tied
//! MLM head. Gradients are computed by hand; see [`forward`].

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use forward::{
    encode_tokens, mean_pool, mlm_logits, mlm_logits_backward, pool_backward, DropoutSpec, SequenceForward,
};

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_stream;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            d_ff: 256,
            max_positions: 512,
            vocab_size: 0,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.d_model == 0 || self.heads == 0 || self.d_ff == 0 {
            return bad("d_model, heads and d_ff must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.max_positions == 0 {
            return bad("max_positions must be positive".into());
        }
        if self.vocab_size < 4 {
            return bad(format!("vocab_size {} is below 4", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Layer-norm affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl NormParams {
    fn new(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: NormParams,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ffn_norm: NormParams,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl LayerParams {
    fn zeros(cfg: &EncoderConfig) -> Self {
        let d = cfg.d_model;
        let f = cfg.d_ff;
        Self {
            attn_norm: NormParams::new(d),
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ffn_norm: NormParams::new(d),
            w1: Array2::zeros((d, f)),
            b1: Array1::zeros(f),
            w2: Array2::zeros((f, d)),
            b2: Array1::zeros(d),
        }
    }
}

/// Role of a tensor; only `Matrix` tensors receive weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Matrix,
    Bias,
    NormScale,
    NormShift,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        self == ParamKind::Matrix
    }
}

pub struct ParamRef<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub value: ArrayViewD<'a, f64>,
}

pub struct ParamMut<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub value: ArrayViewMutD<'a, f64>,
}

/// All trainable tensors. The same type doubles as a gradient / moment buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    /// `V x d`; also the MLM output projection.
    pub token_embedding: Array2<f64>,
    /// `max_positions x d`.
    pub position_embedding: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub final_norm: NormParams,
    pub mlm_bias: Array1<f64>,
}

macro_rules! param_list {
    ($self:ident, $view:ident, $iter:ident, $out:ident, $wrap:ident) => {{
        use ParamKind::*;
        $out.push($wrap("token_embedding", Matrix, $self.token_embedding.$view().into_dyn()));
        $out.push($wrap("position_embedding", Matrix, $self.position_embedding.$view().into_dyn()));
        for (l, layer) in $self.layers.$iter().enumerate() {
            let p = |s: &str| format!("layers.{l}.{s}");
            $out.push($wrap(&p("attn_norm.gamma"), NormScale, layer.attn_norm.gamma.$view().into_dyn()));
            $out.push($wrap(&p("attn_norm.beta"), NormShift, layer.attn_norm.beta.$view().into_dyn()));
            $out.push($wrap(&p("attn.wq"), Matrix, layer.wq.$view().into_dyn()));
            $out.push($wrap(&p("attn.bq"), Bias, layer.bq.$view().into_dyn()));
            $out.push($wrap(&p("attn.wk"), Matrix, layer.wk.$view().into_dyn()));
            $out.push($wrap(&p("attn.bk"), Bias, layer.bk.$view().into_dyn()));
            $out.push($wrap(&p("attn.wv"), Matrix, layer.wv.$view().into_dyn()));
            $out.push($wrap(&p("attn.bv"), Bias, layer.bv.$view().into_dyn()));
            $out.push($wrap(&p("attn.wo"), Matrix, layer.wo.$view().into_dyn()));
            $out.push($wrap(&p("attn.bo"), Bias, layer.bo.$view().into_dyn()));
            $out.push($wrap(&p("ffn_norm.gamma"), NormScale, layer.ffn_norm.gamma.$view().into_dyn()));
            $out.push($wrap(&p("ffn_norm.beta"), NormShift, layer.ffn_norm.beta.$view().into_dyn()));
            $out.push($wrap(&p("ffn.w1"), Matrix, layer.w1.$view().into_dyn()));
            $out.push($wrap(&p("ffn.b1"), Bias, layer.b1.$view().into_dyn()));
            $out.push($wrap(&p("ffn.w2"), Matrix, layer.w2.$view().into_dyn()));
            $out.push($wrap(&p("ffn.b2"), Bias, layer.b2.$view().into_dyn()));
        }
        $out.push($wrap("final_norm.gamma", NormScale, $self.final_norm.gamma.$view().into_dyn()));
        $out.push($wrap("final_norm.beta", NormShift, $self.final_norm.beta.$view().into_dyn()));
        $out.push($wrap("mlm.bias", Bias, $self.mlm_bias.$view().into_dyn()));
    }};
}

impl EncoderParams {
    /// All-zero tensors (layer-norm scales included) shaped for `config`.
    pub fn zeros(config: &EncoderConfig) -> Self {
        let mut p = Self::unit(config);
        p.fill(0.0);
        p
    }

    /// Zero weights with unit layer-norm scales.
    fn unit(config: &EncoderConfig) -> Self {
        let d = config.d_model;
        Self {
            config: config.clone(),
            token_embedding: Array2::zeros((config.vocab_size, d)),
            position_embedding: Array2::zeros((config.max_positions, d)),
            layers: (0..config.layers).map(|_| LayerParams::zeros(config)).collect(),
            final_norm: NormParams::new(d),
            mlm_bias: Array1::zeros(config.vocab_size),
        }
    }

    /// Weights ~ N(0, 0.02^2) truncated at two standard deviations; biases
    /// and shifts zero; layer-norm scales one.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Self::unit(config);
        let mut rng = derive_stream(seed, "init", 0, "");
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        for mut t in params.tensors_mut() {
            if t.kind != ParamKind::Matrix {
                continue;
            }
            for x in t.value.iter_mut() {
                *x = loop {
                    let v: f64 = normal.sample(&mut rng);
                    if v.abs() <= 2.0 * INIT_STD {
                        break v;
                    }
                };
            }
        }
        Ok(params)
    }

    pub fn tensors(&self) -> Vec<ParamRef<'_>> {
        fn wrap<'a>(name: &str, kind: ParamKind, value: ArrayViewD<'a, f64>) -> ParamRef<'a> {
            ParamRef {
                name: name.to_string(),
                kind,
                value,
            }
        }
        let mut out = Vec::new();
        param_list!(self, view, iter, out, wrap);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<ParamMut<'_>> {
        fn wrap<'a>(name: &str, kind: ParamKind, value: ArrayViewMutD<'a, f64>) -> ParamMut<'a> {
            ParamMut {
                name: name.to_string(),
                kind,
                value,
            }
        }
        let mut out = Vec::new();
        param_list!(self, view_mut, iter_mut, out, wrap);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.value.len()).sum()
    }

    pub fn fill(&mut self, v: f64) {
        for mut t in self.tensors_mut() {
            t.value.fill(v);
        }
    }

    /// `self += other`, tensor by tensor in a fixed order.
    pub fn add_assign(&mut self, other: &EncoderParams) {
        for (mut a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.value += &b.value;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for mut t in self.tensors_mut() {
            t.value.mapv_inplace(|x| x * factor);
        }
    }

    /// Sum of squares over every entry, accumulated in tensor order.
    pub fn sum_squares(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|t| t.value.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }

    /// Name of the first tensor holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|t| t.value.iter().any(|x| !x.is_finite()))
            .map(|t| t.name)
    }

    /// Rounds every entry to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for mut t in self.tensors_mut() {
            t.value.mapv_inplace(|x| x as f32 as f64);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 50,
            max_positions: 16,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = EncoderParams::init(&cfg(), 5).unwrap();
        let b = EncoderParams::init(&cfg(), 5).unwrap();
        assert_eq!(a, b);
        let c = EncoderParams::init(&cfg(), 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_statistics() {
        let p = EncoderParams::init(&cfg(), 11).unwrap();
        let mut n = 0usize;
        let mut ss = 0.0;
        let mut mean = 0.0;
        for t in p.tensors() {
            match t.kind {
                ParamKind::Matrix => {
                    for &x in t.value.iter() {
                        assert!(x.abs() <= 2.0 * INIT_STD);
                        mean += x;
                        ss += x * x;
                        n += 1;
                    }
                }
                ParamKind::NormScale => assert!(t.value.iter().all(|&x| x == 1.0)),
                ParamKind::Bias | ParamKind::NormShift => {
                    assert!(t.value.iter().all(|&x| x == 0.0))
                }
            }
        }
        mean /= n as f64;
        let std = (ss / n as f64 - mean * mean).sqrt();
        // a N(0, s^2) truncated at 2s has std 0.8796 s
        assert!((0.0170..0.0182).contains(&std), "std {std}");
    }

    #[test]
    fn config_checks() {
        let mut c = cfg();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.vocab_size = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn tensor_names_unique_and_ordered() {
        let p = EncoderParams::zeros(&cfg());
        let names: Vec<String> = p.tensors().into_iter().map(|t| t.name).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert_eq!(names[0], "token_embedding");
        assert_eq!(names.last().unwrap(), "mlm.bias");
        assert_eq!(names.len(), 2 + 16 * 2 + 3);
    }
}
