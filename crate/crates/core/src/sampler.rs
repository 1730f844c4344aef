//! Anchor / positive span sampling and contrastive minibatch assembly.
//!
//! Span lengths are `floor(p * (max - min) + min)` with `p` drawn from a beta
//! distribution (anchors skew long, positives skew short). Anchor starts are
//! uniform over the document; positive starts are uniform over
//! `{anchor.start - len, ..., anchor.end}` clipped to the document, so every
//! positive overlaps, abuts, or is contained in its anchor.
//!
//! Batch layout for `N` documents, `A` anchors per document and `P` positives
//! per anchor uses 1-based global indices: anchor `i = doc * A + slot + 1`
//! and its `p`-th positive lives at slot `i + p * A * N`.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, MASK_ID, NUM_SPECIALS, PAD_ID};
use crate::error::{Error, Result};
use crate::rng::{derive_stream, Rng};

/// Retries for the anchor separation constraint before the evenly spaced fallback.
pub const ANCHOR_RETRY_BUDGET: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub min_span_len: usize,
    pub max_span_len: usize,
    pub anchors_per_doc: usize,
    pub positives_per_anchor: usize,
    pub anchor_beta: BetaParams,
    pub positive_beta: BetaParams,
    pub mask_rate: f64,
    pub separation_multiplier: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            min_span_len: 32,
            max_span_len: 512,
            anchors_per_doc: 2,
            positives_per_anchor: 2,
            anchor_beta: BetaParams {
                alpha: 4.0,
                beta: 2.0,
            },
            positive_beta: BetaParams {
                alpha: 2.0,
                beta: 4.0,
            },
            mask_rate: 0.15,
            separation_multiplier: 2,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.min_span_len < 1 || self.min_span_len > self.max_span_len {
            return bad("need 1 <= min_span_len <= max_span_len");
        }
        if self.anchors_per_doc < 1 || self.positives_per_anchor < 1 {
            return bad("anchors_per_doc and positives_per_anchor must be at least 1");
        }
        for b in [self.anchor_beta, self.positive_beta] {
            if !(b.alpha > 0.0 && b.beta > 0.0 && b.alpha.is_finite() && b.beta.is_finite()) {
                return bad("beta shape parameters must be positive and finite");
            }
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return bad("mask_rate must lie in [0, 1]");
        }
        if self.separation_multiplier < 1 {
            return bad("separation_multiplier must be at least 1");
        }
        Ok(())
    }

    /// Minimum distance between the starts of two anchors from one document.
    pub fn anchor_separation(&self) -> usize {
        self.separation_multiplier * self.max_span_len
    }

    /// Smallest document length the sampler accepts.
    pub fn min_doc_tokens(&self) -> usize {
        self.anchors_per_doc * self.anchor_separation()
    }
}

/// Beta variates by the gamma ratio `X / (X + Y)`, `X ~ Gamma(a)`, `Y ~ Gamma(b)`.
#[derive(Debug, Clone)]
pub struct BetaSampler {
    x: Gamma<f64>,
    y: Gamma<f64>,
}

impl BetaSampler {
    pub fn new(params: BetaParams) -> Result<Self> {
        let make = |shape: f64| {
            Gamma::new(shape, 1.0)
                .map_err(|e| Error::InvalidConfig(format!("beta shape {shape}: {e}")))
        };
        Ok(Self {
            x: make(params.alpha)?,
            y: make(params.beta)?,
        })
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        loop {
            let x = self.x.sample(rng);
            let y = self.y.sample(rng);
            let total = x + y;
            if total > 0.0 && total.is_finite() {
                return x / total;
            }
        }
    }
}

/// Maps a unit fraction to a span length in `[min_len, max_len]`.
pub fn span_length_from_fraction(p: f64, min_len: usize, max_len: usize) -> usize {
    let raw = (p * (max_len - min_len) as f64 + min_len as f64).floor() as usize;
    raw.clamp(min_len, max_len)
}

pub fn sample_span_length(rng: &mut Rng, beta: &BetaSampler, min_len: usize, max_len: usize) -> usize {
    span_length_from_fraction(beta.sample(rng), min_len, max_len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanRole {
    Anchor,
    Positive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanSpec {
    pub doc_id: String,
    /// Inclusive.
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub role: SpanRole,
    /// 1-based global anchor index `i`.
    pub anchor_index: usize,
    /// 1-based positive index `p`; `None` for anchors.
    pub positive_index: Option<usize>,
}

impl SpanSpec {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn tokens<'a>(&self, doc: &'a Document) -> &'a [u32] {
        &doc.tokens[self.start..self.end]
    }
}

/// How a positive relates to its anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Overlapping,
    Adjacent,
    Subsumed,
}

impl View {
    pub fn as_str(self) -> &'static str {
        match self {
            View::Overlapping => "overlapping",
            View::Adjacent => "adjacent",
            View::Subsumed => "subsumed",
        }
    }
}

pub fn classify_view(anchor: &SpanSpec, positive: &SpanSpec) -> View {
    if positive.end == anchor.start || positive.start == anchor.end {
        View::Adjacent
    } else if positive.start >= anchor.start && positive.end <= anchor.end {
        View::Subsumed
    } else {
        View::Overlapping
    }
}

#[derive(Debug, Clone)]
pub struct AnchorSample {
    pub spans: Vec<SpanSpec>,
    /// True when the retry budget ran out and starts were evenly spaced.
    pub used_fallback: bool,
}

/// Precomputed beta samplers for one configuration.
#[derive(Debug, Clone)]
pub struct SpanSampler {
    cfg: SamplerConfig,
    anchor_beta: BetaSampler,
    positive_beta: BetaSampler,
}

impl SpanSampler {
    pub fn new(cfg: SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            anchor_beta: BetaSampler::new(cfg.anchor_beta)?,
            positive_beta: BetaSampler::new(cfg.positive_beta)?,
            cfg,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn anchor_beta(&self) -> &BetaSampler {
        &self.anchor_beta
    }

    pub fn positive_beta(&self) -> &BetaSampler {
        &self.positive_beta
    }

    pub fn check_eligible(&self, doc: &Document) -> Result<()> {
        let required = self.cfg.min_doc_tokens();
        if doc.len() < required {
            return Err(Error::DocumentRejected {
                doc_id: doc.id.clone(),
                n: doc.len(),
                required,
            });
        }
        Ok(())
    }

    pub fn sample_anchors(&self, rng: &mut Rng, doc: &Document) -> Result<AnchorSample> {
        self.check_eligible(doc)?;
        let n = doc.len();
        let a = self.cfg.anchors_per_doc;
        let separation = self.cfg.anchor_separation();
        let mut lengths = vec![0; a];
        let mut starts = vec![0; a];
        for _ in 0..ANCHOR_RETRY_BUDGET {
            for k in 0..a {
                lengths[k] = sample_span_length(
                    rng,
                    &self.anchor_beta,
                    self.cfg.min_span_len,
                    self.cfg.max_span_len,
                );
                starts[k] = rng.random_range(0..=n - lengths[k]);
            }
            if separated(&starts, separation) {
                return Ok(AnchorSample {
                    spans: anchor_specs(doc, &starts, &lengths),
                    used_fallback: false,
                });
            }
        }
        let stride = n / a;
        for (k, start) in starts.iter_mut().enumerate() {
            *start = k * stride;
        }
        Ok(AnchorSample {
            spans: anchor_specs(doc, &starts, &lengths),
            used_fallback: true,
        })
    }

    /// Returns the clipped start range `(lo, hi)` (inclusive) for a positive of `len` tokens.
    pub fn positive_start_range(anchor: &SpanSpec, len: usize, n: usize) -> (usize, usize) {
        let lo = anchor.start.saturating_sub(len);
        let hi = anchor.end.min(n - len);
        (lo, hi)
    }

    pub fn sample_positives(&self, rng: &mut Rng, doc: &Document, anchor: &SpanSpec) -> Vec<SpanSpec> {
        let n = doc.len();
        (1..=self.cfg.positives_per_anchor)
            .map(|p| {
                let len = sample_span_length(
                    rng,
                    &self.positive_beta,
                    self.cfg.min_span_len,
                    self.cfg.max_span_len,
                );
                let (lo, hi) = Self::positive_start_range(anchor, len, n);
                let start = rng.random_range(lo..=hi);
                SpanSpec {
                    doc_id: doc.id.clone(),
                    start,
                    end: start + len,
                    role: SpanRole::Positive,
                    anchor_index: anchor.anchor_index,
                    positive_index: Some(p),
                }
            })
            .collect()
    }

    /// Assembles one minibatch. Each document draws from its own stream keyed
    /// by `(seed, epoch, doc id)`.
    pub fn assemble_batch(
        &self,
        seed: u64,
        epoch: u64,
        docs: &[&Document],
        vocab_size: usize,
    ) -> Result<ContrastiveBatch> {
        if docs.is_empty() {
            return Err(Error::InvalidArgument("a batch needs at least one document".into()));
        }
        let a = self.cfg.anchors_per_doc;
        let p = self.cfg.positives_per_anchor;
        let an = a * docs.len();

        let mut anchors = Vec::with_capacity(an);
        let mut positives: Vec<Option<SpanSpec>> = vec![None; p * an];
        let mut anchor_tokens = Vec::with_capacity(an);
        let mut positive_tokens: Vec<Vec<u32>> = vec![Vec::new(); p * an];
        let mut mlm = Vec::with_capacity(an);

        for (doc_index, doc) in docs.iter().enumerate() {
            let mut rng = derive_stream(seed, "batch", epoch, &doc.id);
            let sample = self.sample_anchors(&mut rng, doc)?;
            for (slot, mut anchor) in sample.spans.into_iter().enumerate() {
                let i = doc_index * a + slot + 1;
                anchor.anchor_index = i;
                for mut pos in self.sample_positives(&mut rng, doc, &anchor) {
                    let pi = pos.positive_index.expect("positive index");
                    pos.anchor_index = i;
                    let slot0 = (pi - 1) * an + (i - 1);
                    positive_tokens[slot0] = pos.tokens(doc).to_vec();
                    positives[slot0] = Some(pos);
                }
                let tokens = anchor.tokens(doc).to_vec();
                mlm.push(apply_mlm_masking(&mut rng, &tokens, vocab_size, self.cfg.mask_rate));
                anchor_tokens.push(tokens);
                anchors.push(anchor);
            }
        }

        let width = anchor_tokens
            .iter()
            .chain(positive_tokens.iter())
            .map(Vec::len)
            .max()
            .unwrap_or(0);
        let masked: Vec<Vec<u32>> = mlm.iter().map(|m| m.input.clone()).collect();
        Ok(ContrastiveBatch {
            num_docs: docs.len(),
            anchors_per_doc: a,
            positives_per_anchor: p,
            anchor_spans: anchors,
            positive_spans: positives.into_iter().map(|s| s.expect("positive filled")).collect(),
            anchors: PaddedIds::from_rows(&anchor_tokens, width),
            positives: PaddedIds::from_rows(&positive_tokens, width),
            masked_anchors: PaddedIds::from_rows(&masked, width),
            mlm,
        })
    }
}

fn separated(starts: &[usize], separation: usize) -> bool {
    for (k, &a) in starts.iter().enumerate() {
        for &b in &starts[k + 1..] {
            if a.abs_diff(b) < separation {
                return false;
            }
        }
    }
    true
}

fn anchor_specs(doc: &Document, starts: &[usize], lengths: &[usize]) -> Vec<SpanSpec> {
    starts
        .iter()
        .zip(lengths)
        .enumerate()
        .map(|(k, (&start, &len))| SpanSpec {
            doc_id: doc.id.clone(),
            start,
            end: start + len,
            role: SpanRole::Anchor,
            anchor_index: k + 1,
            positive_index: None,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmInstance {
    /// Anchor copy after corruption.
    pub input: Vec<u32>,
    /// Positions selected for prediction, ascending.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub labels: Vec<u32>,
}

/// BERT-style corruption: each position is selected with probability
/// `mask_rate`; selected positions become `MASK` (80%), a random non-special
/// id (10%) or stay unchanged (10%). At least one position is always selected.
pub fn apply_mlm_masking(rng: &mut Rng, tokens: &[u32], vocab_size: usize, mask_rate: f64) -> MlmInstance {
    assert!(!tokens.is_empty(), "MLM masking needs a non-empty span");
    assert!(vocab_size > NUM_SPECIALS, "vocabulary has no surface tokens");
    let mut selected: Vec<usize> = (0..tokens.len())
        .filter(|_| rng.random::<f64>() < mask_rate)
        .collect();
    if selected.is_empty() {
        selected.push(rng.random_range(0..tokens.len()));
    }
    let mut input = tokens.to_vec();
    for &pos in &selected {
        let u: f64 = rng.random();
        if u < 0.8 {
            input[pos] = MASK_ID;
        } else if u < 0.9 {
            input[pos] = rng.random_range(NUM_SPECIALS as u32..vocab_size as u32);
        }
    }
    MlmInstance {
        input,
        labels: selected.iter().map(|&p| tokens[p]).collect(),
        positions: selected,
    }
}

/// Row-padded id matrix; `mask[[r, c]]` is true for real tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedIds {
    pub ids: Array2<u32>,
    pub mask: Array2<bool>,
}

impl PaddedIds {
    pub fn from_rows(rows: &[Vec<u32>], width: usize) -> Self {
        let mut ids = Array2::from_elem((rows.len(), width), PAD_ID);
        let mut mask = Array2::from_elem((rows.len(), width), false);
        for (r, row) in rows.iter().enumerate() {
            for (c, &id) in row.iter().enumerate() {
                ids[[r, c]] = id;
                mask[[r, c]] = true;
            }
        }
        Self { ids, mask }
    }

    pub fn rows(&self) -> usize {
        self.ids.nrows()
    }

    pub fn width(&self) -> usize {
        self.ids.ncols()
    }

    /// Unpadded ids of one row.
    pub fn row_tokens(&self, r: usize) -> Vec<u32> {
        self.ids
            .row(r)
            .iter()
            .zip(self.mask.row(r))
            .filter(|(_, &m)| m)
            .map(|(&id, _)| id)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub num_docs: usize,
    pub anchors_per_doc: usize,
    pub positives_per_anchor: usize,
    /// Indexed `i - 1`.
    pub anchor_spans: Vec<SpanSpec>,
    /// Indexed `(p - 1) * AN + (i - 1)`, i.e. slot `i + p*AN` minus `AN + 1`.
    pub positive_spans: Vec<SpanSpec>,
    pub anchors: PaddedIds,
    pub positives: PaddedIds,
    pub masked_anchors: PaddedIds,
    pub mlm: Vec<MlmInstance>,
}

impl ContrastiveBatch {
    /// `A * N`.
    pub fn num_anchors(&self) -> usize {
        self.anchors_per_doc * self.num_docs
    }

    /// `2 * A * N`.
    pub fn contrastive_set_size(&self) -> usize {
        2 * self.num_anchors()
    }

    /// Row of the `p`-th positive (1-based) of anchor `i` (1-based) in `positives`.
    pub fn positive_row(&self, i: usize, p: usize) -> usize {
        (p - 1) * self.num_anchors() + (i - 1)
    }
}
