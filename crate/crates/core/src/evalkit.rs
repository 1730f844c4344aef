//! Inference-time embedding and evaluation.
//!
//! Report values use the percentage scale of published benchmark tables:
//! accuracies and correlations are multiplied by 100 before they enter a
//! [`TaskReport`], so heterogeneous reports average meaningfully.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Vocab};
use crate::encoder::{encode_tokens, mean_pool, Checkpoint, EncoderParams};
use crate::error::{Error, Result};
use crate::objective::cosine_sim;
use crate::sampler::PaddedIds;

/// One embedding row per input text.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: Array2<f64>,
    pub ids: Vec<String>,
    pub normalized: bool,
    /// Rows whose text tokenized to nothing; these hold `NaN`.
    pub flagged: Vec<usize>,
}

impl EmbeddingMatrix {
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }
}

/// Tokenizes, truncates to `max_len`, encodes in batches of `batch_size`, and
/// mean-pools. Rows do not depend on `batch_size`.
pub fn embed_texts(
    params: &EncoderParams,
    vocab: &Vocab,
    texts: &[String],
    batch_size: usize,
    max_len: usize,
    normalize: bool,
) -> Result<EmbeddingMatrix> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if params.config.vocab_size != vocab.len() {
        return Err(Error::InvalidArgument(format!(
            "encoder vocabulary {} differs from vocabulary file {}",
            params.config.vocab_size,
            vocab.len()
        )));
    }
    let max_len = max_len.min(params.config.max_positions);
    let d = params.config.d_model;
    let mut ids: Vec<Vec<u32>> = texts
        .iter()
        .map(|t| {
            let mut v = tokenize(t, vocab);
            v.truncate(max_len);
            v
        })
        .collect();
    let flagged: Vec<usize> = ids.iter().enumerate().filter(|(_, v)| v.is_empty()).map(|(i, _)| i).collect();
    for &i in &flagged {
        log::warn!("text {} is empty after tokenization; its row is NaN", i + 1);
    }
    let live: Vec<usize> = (0..ids.len()).filter(|i| !ids[*i].is_empty()).collect();

    let mut rows = Array2::from_elem((texts.len(), d), f64::NAN);
    for chunk in live.chunks(batch_size) {
        let batch: Vec<Vec<u32>> = chunk.iter().map(|&i| std::mem::take(&mut ids[i])).collect();
        let width = batch.iter().map(Vec::len).max().unwrap_or(0);
        let padded = PaddedIds::from_rows(&batch, width);
        let hidden = encode_tokens(params, &padded.ids, &padded.mask)?;
        let pooled = mean_pool(&hidden, &padded.mask)?;
        for (r, &i) in chunk.iter().enumerate() {
            rows.row_mut(i).assign(&pooled.row(r));
        }
    }
    if normalize {
        for &i in &live {
            let mut row = rows.row_mut(i);
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNorm);
            }
            row.mapv_inplace(|x| x / norm);
        }
    }
    Ok(EmbeddingMatrix {
        rows,
        ids: (1..=texts.len()).map(|i| i.to_string()).collect(),
        normalized: normalize,
        flagged,
    })
}

/// [`embed_texts`] after checking the checkpoint was trained on `vocab`.
pub fn embed_with_checkpoint(
    checkpoint: &Checkpoint,
    vocab: &Vocab,
    texts: &[String],
    batch_size: usize,
    max_len: usize,
    normalize: bool,
) -> Result<EmbeddingMatrix> {
    checkpoint.check_vocab(&vocab.fingerprint())?;
    embed_texts(&checkpoint.params, vocab, texts, batch_size, max_len, normalize)
}

/// 1-based fractional ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ConstantInput);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs at least 2 points".into()));
    }
    if let Some(v) = x.iter().chain(y).find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("spearman input {v}")));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Cosine of each pair against gold, as a `spearman` report on the ×100 scale.
pub fn sts_evaluate(name: &str, pairs: &[(ArrayView1<'_, f64>, ArrayView1<'_, f64>)], gold: &[f64]) -> Result<TaskReport> {
    if pairs.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "{} pairs but {} gold scores",
            pairs.len(),
            gold.len()
        )));
    }
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument("STS evaluation needs at least 2 pairs".into()));
    }
    let predicted: Vec<f64> = pairs.iter().map(|(a, b)| cosine_sim(*a, *b)).collect::<Result<_>>()?;
    let rho = spearman(&predicted, gold)?;
    TaskReport::new(name, TaskPayload::Spearman(100.0 * rho))
}

/// Precision@1 of cosine nearest-neighbor retrieval, excluding each row
/// itself. Ties go to the lower row index.
pub fn knn_retrieval(embeddings: &Array2<f64>, labels: &[String]) -> Result<f64> {
    let n = embeddings.nrows();
    if n != labels.len() {
        return Err(Error::InvalidArgument(format!("{n} rows but {} labels", labels.len())));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("retrieval needs at least 2 rows".into()));
    }
    if embeddings.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding matrix".into()));
    }
    let distinct: BTreeSet<&String> = labels.iter().collect();
    if distinct.len() < 2 {
        log::warn!("all rows share one label; precision@1 is trivially 1");
    }
    let mut unit = embeddings.clone();
    for mut row in unit.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNorm);
        }
        row.mapv_inplace(|x| x / norm);
    }
    let hits: usize = (0..n)
        .into_par_iter()
        .map(|i| {
            let q = unit.row(i);
            let mut best = None::<(usize, f64)>;
            for j in (0..n).filter(|&j| j != i) {
                let s = q.dot(&unit.row(j));
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((j, s));
                }
            }
            let (j, _) = best.expect("n >= 2");
            usize::from(labels[j] == labels[i])
        })
        .sum();
    Ok(hits as f64 / n as f64)
}

/// Fixed number of full-batch gradient-descent iterations for the probe.
pub const PROBE_ITERATIONS: usize = 500;

/// Multinomial logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub classes: Vec<String>,
    mean: Array1<f64>,
    scale: Array1<f64>,
    weights: Array2<f64>,
    bias: Array1<f64>,
}

impl LinearProbe {
    /// Trains by gradient descent on mean cross-entropy plus `l2/2 · ‖W‖²`.
    /// The step size is `1/L` for the loss's smoothness bound `L`, so the
    /// iteration is monotone and needs no tuning.
    pub fn fit(x: &Array2<f64>, labels: &[String], l2: f64) -> Result<Self> {
        let (n, d) = x.dim();
        if n != labels.len() {
            return Err(Error::InvalidArgument(format!("{n} rows but {} labels", labels.len())));
        }
        if !(l2 >= 0.0) {
            return Err(Error::InvalidArgument("l2 must be non-negative".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("probe features".into()));
        }
        let classes: Vec<String> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        if classes.len() < 2 {
            return Err(Error::InvalidArgument("probe needs at least 2 classes in training data".into()));
        }
        let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let y: Vec<usize> = labels.iter().map(|l| index[l.as_str()]).collect();

        let mean = x.mean_axis(Axis(0)).expect("n >= 1");
        let scale = x.var_axis(Axis(0), 0.0).mapv(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
        let z = (x - &mean) / &scale;
        let c = classes.len();
        let max_sq = z.rows().into_iter().map(|r| r.dot(&r) + 1.0).fold(0.0, f64::max);
        let step = 1.0 / (0.5 * max_sq + l2);

        let mut weights = Array2::<f64>::zeros((d, c));
        let mut bias = Array1::<f64>::zeros(c);
        for _ in 0..PROBE_ITERATIONS {
            let mut probs = z.dot(&weights) + &bias;
            for (mut row, &label) in probs.rows_mut().into_iter().zip(&y) {
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|v| (v - m).exp());
                let s = row.sum();
                row.mapv_inplace(|v| v / s);
                row[label] -= 1.0;
            }
            let g_w = z.t().dot(&probs) / n as f64 + &weights * l2;
            let g_b = probs.sum_axis(Axis(0)) / n as f64;
            weights.scaled_add(-step, &g_w);
            bias.scaled_add(-step, &g_b);
        }
        Ok(Self {
            classes,
            mean,
            scale,
            weights,
            bias,
        })
    }

    pub fn decision_function(&self, x: &Array2<f64>) -> Array2<f64> {
        ((x - &self.mean) / &self.scale).dot(&self.weights) + &self.bias
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<&str> {
        self.decision_function(x)
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (k, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = k;
                    }
                }
                self.classes[best].as_str()
            })
            .collect()
    }
}

/// Fits a probe on the training split and reports test accuracy (×100).
pub fn train_linear_probe(
    name: &str,
    train_x: &Array2<f64>,
    train_labels: &[String],
    test_x: &Array2<f64>,
    test_labels: &[String],
    l2: f64,
) -> Result<TaskReport> {
    if train_x.ncols() != test_x.ncols() {
        return Err(Error::ShapeMismatch {
            name: "probe features".into(),
            expected: vec![train_x.ncols()],
            found: vec![test_x.ncols()],
        });
    }
    if test_x.nrows() != test_labels.len() || test_x.nrows() == 0 {
        return Err(Error::InvalidArgument("test rows and labels must match and be nonempty".into()));
    }
    let probe = LinearProbe::fit(train_x, train_labels, l2)?;
    let unseen: BTreeSet<&String> = test_labels.iter().filter(|l| !probe.classes.contains(l)).collect();
    if !unseen.is_empty() {
        log::warn!("test labels absent from training data count as errors: {unseen:?}");
    }
    let correct = probe
        .predict(test_x)
        .iter()
        .zip(test_labels)
        .filter(|(p, t)| **p == t.as_str())
        .count();
    TaskReport::new(name, TaskPayload::Accuracy(100.0 * correct as f64 / test_labels.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskPayload {
    Accuracy(f64),
    /// `[accuracy, f1]`
    AccuracyAndF1([f64; 2]),
    Spearman(f64),
    MeanSpearman(f64),
    /// Recall@{1,5,10} for image retrieval, then for caption retrieval.
    RecallAtKSet([f64; 6]),
}

impl TaskPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            TaskPayload::Accuracy(_) => "accuracy",
            TaskPayload::AccuracyAndF1(_) => "accuracyAndF1",
            TaskPayload::Spearman(_) => "spearman",
            TaskPayload::MeanSpearman(_) => "meanSpearman",
            TaskPayload::RecallAtKSet(_) => "recallAtKSet",
        }
    }

    fn values(&self) -> &[f64] {
        match self {
            TaskPayload::Accuracy(v) | TaskPayload::Spearman(v) | TaskPayload::MeanSpearman(v) => {
                std::slice::from_ref(v)
            }
            TaskPayload::AccuracyAndF1(v) => v,
            TaskPayload::RecallAtKSet(v) => v,
        }
    }

    /// The single number a report contributes to the downstream average.
    pub fn score(&self) -> f64 {
        let v = self.values();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawReport", into = "RawReport")]
pub struct TaskReport {
    pub name: String,
    pub payload: TaskPayload,
}

impl TaskReport {
    pub fn new(name: impl Into<String>, payload: TaskPayload) -> Result<Self> {
        let name = name.into();
        if let Some(v) = payload.values().iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("report {name}: {v}")));
        }
        Ok(Self { name, payload })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReport {
    name: String,
    kind: String,
    payload: serde_json::Value,
}

impl From<TaskReport> for RawReport {
    fn from(r: TaskReport) -> Self {
        let payload = match r.payload {
            TaskPayload::Accuracy(v) | TaskPayload::Spearman(v) | TaskPayload::MeanSpearman(v) => v.into(),
            TaskPayload::AccuracyAndF1(v) => v.to_vec().into(),
            TaskPayload::RecallAtKSet(v) => v.to_vec().into(),
        };
        Self {
            name: r.name,
            kind: r.payload.kind().to_string(),
            payload,
        }
    }
}

impl TryFrom<RawReport> for TaskReport {
    type Error = String;

    fn try_from(raw: RawReport) -> std::result::Result<Self, String> {
        let name = raw.name;
        let scalar = || {
            raw.payload
                .as_f64()
                .ok_or_else(|| format!("report {name}: kind {} expects a number", raw.kind))
        };
        let array = |len: usize| -> std::result::Result<Vec<f64>, String> {
            let items = raw
                .payload
                .as_array()
                .filter(|a| a.len() == len)
                .ok_or_else(|| format!("report {name}: kind {} expects {len} numbers", raw.kind))?;
            items
                .iter()
                .map(|v| v.as_f64().ok_or_else(|| format!("report {name}: non-numeric value {v}")))
                .collect()
        };
        let payload = match raw.kind.as_str() {
            "accuracy" => TaskPayload::Accuracy(scalar()?),
            "spearman" => TaskPayload::Spearman(scalar()?),
            "meanSpearman" => TaskPayload::MeanSpearman(scalar()?),
            "accuracyAndF1" => TaskPayload::AccuracyAndF1(array(2)?.try_into().expect("length 2")),
            "recallAtKSet" => TaskPayload::RecallAtKSet(array(6)?.try_into().expect("length 6")),
            other => return Err(format!("report {name}: unknown kind {other:?}")),
        };
        TaskReport::new(name.clone(), payload).map_err(|e| e.to_string())
    }
}

/// Unweighted mean of per-report scores, skipping reports named in `exclude`.
pub fn aggregate_downstream(reports: &[TaskReport], exclude: &[&str]) -> Result<f64> {
    let kept: Vec<f64> = reports
        .iter()
        .filter(|r| !exclude.contains(&r.name.as_str()))
        .map(|r| r.payload.score())
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyAggregation);
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

pub fn aggregate_probing(accuracies: &[f64]) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(Error::EmptyAggregation);
    }
    Ok(accuracies.iter().sum::<f64>() / accuracies.len() as f64)
}

pub fn load_reports(path: &Path) -> Result<Vec<TaskReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedRecord {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })
}

fn parse_floats(field: &str, path: &Path, line: usize, sep: char) -> Result<Vec<f64>> {
    field
        .split(sep)
        .map(|s| {
            s.trim().parse::<f64>().map_err(|e| Error::MalformedRecord {
                path: path.to_path_buf(),
                line,
                reason: format!("{s:?}: {e}"),
            })
        })
        .collect()
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty())
}

/// Reads one tab-separated row of floats per line.
pub fn read_embedding_tsv(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, l) in data_lines(&text) {
        let row = parse_floats(l, path, line, '\t')?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::MalformedRecord {
                    path: path.to_path_buf(),
                    line,
                    reason: format!("{} columns, expected {}", row.len(), first.len()),
                });
            }
        }
        rows.push(row);
    }
    let d = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Array2::from_shape_vec((rows.len(), d), flat).expect("rectangular rows"))
}

/// Writes rows as tab-separated shortest round-trip decimals.
pub fn write_embedding_tsv(rows: &Array2<f64>, out: &mut impl Write) -> std::io::Result<()> {
    for row in rows.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", line.join("\t"))?;
    }
    Ok(())
}

/// One label per line.
pub fn read_labels(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(data_lines(&text).map(|(_, l)| l.trim().to_string()).collect())
}

/// Precomputed-embedding STS pair: `gold \t v1,v2,... \t w1,w2,...`.
pub struct EmbeddedPair {
    pub gold: f64,
    pub left: Array1<f64>,
    pub right: Array1<f64>,
}

pub fn read_embedded_pairs(path: &Path) -> Result<Vec<EmbeddedPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    data_lines(&text)
        .map(|(line, l)| {
            let fields: Vec<&str> = l.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::MalformedRecord {
                    path: path.to_path_buf(),
                    line,
                    reason: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            let gold = parse_floats(fields[0], path, line, ',')?;
            let left = parse_floats(fields[1], path, line, ',')?;
            let right = parse_floats(fields[2], path, line, ',')?;
            if gold.len() != 1 || left.len() != right.len() {
                return Err(Error::MalformedRecord {
                    path: path.to_path_buf(),
                    line,
                    reason: "expected one gold score and two equal-length vectors".into(),
                });
            }
            Ok(EmbeddedPair {
                gold: gold[0],
                left: Array1::from(left),
                right: Array1::from(right),
            })
        })
        .collect()
}

/// Text STS pair file: `text1 \t text2 \t gold`.
pub fn read_text_pairs(path: &Path) -> Result<Vec<(String, String, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    data_lines(&text)
        .map(|(line, l)| {
            let fields: Vec<&str> = l.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::MalformedRecord {
                    path: path.to_path_buf(),
                    line,
                    reason: format!("expected text1, text2, gold; found {} fields", fields.len()),
                });
            }
            let gold = parse_floats(fields[2], path, line, ',')?;
            Ok((fields[0].to_string(), fields[1].to_string(), gold[0]))
        })
        .collect()
}
