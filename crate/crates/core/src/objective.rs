//! Contrastive and MLM losses.
//!
//! For a set of `2AN` embeddings (anchors in rows `0..AN`, mean positives in
//! rows `AN..2AN`) the pair term is
//!
//! ```text
//! l(i, j) = -log( exp(sim(e_i, e_j) / t) / sum_{k != i} exp(sim(e_i, e_k) / t) )
//! ```
//!
//! where only `k = i` is excluded from the denominator (the positive `j`
//! stays in). The contrastive loss sums `l(i, i+AN) + l(i+AN, i)` over all
//! anchors. Indices in this module are 0-based.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn cosine_sim(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> Result<f64> {
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Componentwise mean of the positives paired with one anchor.
pub fn mean_positive_embedding(positives: &[ArrayView1<'_, f64>]) -> Result<Array1<f64>> {
    let first = positives
        .first()
        .ok_or_else(|| Error::InvalidArgument("need at least one positive".into()))?;
    let mut acc = first.to_owned();
    for p in &positives[1..] {
        if p.len() != acc.len() {
            return Err(Error::ShapeMismatch {
                name: "positive embedding".into(),
                expected: vec![acc.len()],
                found: vec![p.len()],
            });
        }
        acc += p;
    }
    Ok(acc / positives.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    /// Sum over the `2AN` pair terms.
    #[default]
    Sum,
    /// Sum divided by `2AN`.
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    embeddings: Array2<f64>,
    temperature: f64,
}

impl EmbeddingSet {
    /// Stacks `AN` anchor embeddings over their `AN` mean-positive embeddings.
    pub fn new(anchors: &Array2<f64>, mean_positives: &Array2<f64>, temperature: f64) -> Result<Self> {
        if anchors.dim() != mean_positives.dim() {
            return Err(Error::ShapeMismatch {
                name: "mean positives".into(),
                expected: anchors.shape().to_vec(),
                found: mean_positives.shape().to_vec(),
            });
        }
        let stacked = ndarray::concatenate(Axis(0), &[anchors.view(), mean_positives.view()])
            .expect("matching widths");
        Self::from_stacked(stacked, temperature)
    }

    pub fn from_stacked(embeddings: Array2<f64>, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidTemperature(temperature));
        }
        let rows = embeddings.nrows();
        if rows < 2 || rows % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "an embedding set needs an even number (>= 2) of rows, got {rows}"
            )));
        }
        if embeddings.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding set".into()));
        }
        for row in embeddings.rows() {
            if row.dot(&row) == 0.0 {
                return Err(Error::ZeroNorm);
            }
        }
        Ok(Self {
            embeddings,
            temperature,
        })
    }

    /// `2AN`.
    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `AN`.
    pub fn num_anchors(&self) -> usize {
        self.len() / 2
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    /// Index of the positive paired with row `k`.
    pub fn partner(&self, k: usize) -> usize {
        let an = self.num_anchors();
        if k < an {
            k + an
        } else {
            k - an
        }
    }

    fn unit_rows(&self) -> (Array2<f64>, Array1<f64>) {
        let norms = self.embeddings.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        let mut unit = self.embeddings.clone();
        for (mut row, &n) in unit.rows_mut().into_iter().zip(norms.iter()) {
            row.mapv_inplace(|x| x / n);
        }
        (unit, norms)
    }

    /// `sim(e_i, e_k) / t` for every pair, each entry an independent dot product.
    fn scaled_similarities(&self, unit: &Array2<f64>) -> Array2<f64> {
        let n = unit.nrows();
        let mut s = Array2::zeros((n, n));
        for i in 0..n {
            for k in 0..n {
                let dot: f64 = unit.row(i).iter().zip(unit.row(k)).map(|(a, b)| a * b).sum();
                s[[i, k]] = dot.clamp(-1.0, 1.0) / self.temperature;
            }
        }
        s
    }
}

/// `-log softmax` of entry `j` of row `i`, excluding column `i`, stabilized by
/// subtracting the row maximum.
fn pair_term(scores: &Array2<f64>, i: usize, j: usize) -> f64 {
    let row = scores.row(i);
    let max = row
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != i)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != i)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    (max - row[j]) + sum.ln()
}

pub fn nt_xent_pair(set: &EmbeddingSet, i: usize, j: usize) -> Result<f64> {
    let n = set.len();
    if i == j || i >= n || j >= n {
        return Err(Error::InvalidArgument(format!(
            "pair ({i}, {j}) invalid for a set of {n}"
        )));
    }
    if n == 2 {
        log::warn!("contrastive set of size 2 is degenerate; pair loss is 0");
    }
    let (unit, _) = set.unit_rows();
    let scores = set.scaled_similarities(&unit);
    Ok(pair_term(&scores, i, j))
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn contrastive_loss(set: &EmbeddingSet, reduction: LossReduction) -> Result<f64> {
    Ok(contrastive_loss_and_grad(set, reduction)?.0)
}

/// Loss and its gradient with respect to every row of the embedding set.
pub fn contrastive_loss_and_grad(set: &EmbeddingSet, reduction: LossReduction) -> Result<(f64, Array2<f64>)> {
    let n = set.len();
    if n == 2 {
        log::warn!("contrastive set of size 2 is degenerate; loss is 0");
    }
    let weight = match reduction {
        LossReduction::Sum => 1.0,
        LossReduction::Mean => 1.0 / n as f64,
    };
    let (unit, norms) = set.unit_rows();
    let scores = set.scaled_similarities(&unit);

    let terms: Vec<f64> = (0..n).map(|i| pair_term(&scores, i, set.partner(i))).collect();
    let loss = compensated_sum(terms.iter().copied()) * weight;

    // d loss / d scores
    let mut d_scores = Array2::zeros((n, n));
    for i in 0..n {
        let row = scores.row(i);
        let max = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = (0..n)
            .map(|k| if k == i { 0.0 } else { (row[k] - max).exp() })
            .collect();
        let total: f64 = exps.iter().sum();
        let j = set.partner(i);
        for k in 0..n {
            if k == i {
                continue;
            }
            let target = if k == j { 1.0 } else { 0.0 };
            d_scores[[i, k]] = weight * (exps[k] / total - target);
        }
    }
    // scores = U U^T / t (clamping is inactive away from |sim| = 1)
    let sym = &d_scores + &d_scores.t();
    let d_unit = sym.dot(&unit) / set.temperature;
    let mut grad = Array2::zeros(unit.raw_dim());
    for r in 0..n {
        let u = unit.row(r);
        let du = d_unit.row(r);
        let radial = u.dot(&du);
        let g = (&du - &(&u * radial)) / norms[r];
        grad.row_mut(r).assign(&g);
    }
    Ok((loss, grad))
}

pub fn mlm_loss(logits: &Array2<f64>, labels: &[u32]) -> Result<f64> {
    Ok(mlm_loss_and_grad(logits, labels)?.0)
}

/// Mean softmax cross-entropy over masked positions and its gradient with
/// respect to the logits.
pub fn mlm_loss_and_grad(logits: &Array2<f64>, labels: &[u32]) -> Result<(f64, Array2<f64>)> {
    let m = logits.nrows();
    if m == 0 || labels.is_empty() {
        return Err(Error::NoMaskedPositions);
    }
    if labels.len() != m {
        return Err(Error::ShapeMismatch {
            name: "MLM labels".into(),
            expected: vec![m],
            found: vec![labels.len()],
        });
    }
    let v = logits.ncols();
    if let Some(&id) = labels.iter().find(|&&l| l as usize >= v) {
        return Err(Error::TokenOutOfRange { id, vocab_size: v });
    }
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut losses = Vec::with_capacity(m);
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps = row.mapv(|x| (x - max).exp());
        let total = exps.sum();
        losses.push((max - row[label as usize]) + total.ln());
        let mut g = grad.row_mut(r);
        g.assign(&(exps / total / m as f64));
        g[label as usize] -= 1.0 / m as f64;
    }
    let loss = compensated_sum(losses) / m as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("MLM loss".into()));
    }
    Ok((loss, grad))
}

/// `L = L_contrastive + L_MLM`.
pub fn combined_loss(contrastive: f64, mlm: f64) -> Result<f64> {
    if !contrastive.is_finite() {
        return Err(Error::NonFinite("contrastive loss".into()));
    }
    if !mlm.is_finite() {
        return Err(Error::NonFinite("MLM loss".into()));
    }
    Ok(contrastive + mlm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array};
    use proptest::prelude::*;

    /// Unstabilized scalar evaluation of the pair term.
    fn naive_pair(e: &Array2<f64>, t: f64, i: usize, j: usize) -> f64 {
        let cos = |a: usize, b: usize| {
            let (u, v) = (e.row(a), e.row(b));
            u.dot(&v) / (u.dot(&u).sqrt() * v.dot(&v).sqrt())
        };
        let num = (cos(i, j) / t).exp();
        let den: f64 = (0..e.nrows()).filter(|&k| k != i).map(|k| (cos(i, k) / t).exp()).sum();
        -(num / den).ln()
    }

    fn naive_total(e: &Array2<f64>, t: f64) -> f64 {
        let an = e.nrows() / 2;
        (0..an).map(|i| naive_pair(e, t, i, i + an) + naive_pair(e, t, i + an, i)).sum()
    }

    #[test]
    fn cosine_cases() {
        let u = arr1(&[0.3, -1.2, 2.0]);
        assert!((cosine_sim(u.view(), u.view()).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_sim(u.view(), (-&u).view()).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(arr1(&[1.0, 0.0]).view(), arr1(&[0.0, 1.0]).view()).unwrap(), 0.0);
        assert!(matches!(
            cosine_sim(arr1(&[0.0, 0.0]).view(), u.slice(ndarray::s![..2])),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn mean_positive_cases() {
        let a = arr1(&[2.0, 0.0]);
        let b = arr1(&[0.0, 2.0]);
        assert_eq!(mean_positive_embedding(&[a.view()]).unwrap(), a);
        assert_eq!(mean_positive_embedding(&[a.view(), b.view()]).unwrap(), arr1(&[1.0, 1.0]));
        let neg = -&a;
        let zero = mean_positive_embedding(&[a.view(), neg.view()]).unwrap();
        assert!(matches!(cosine_sim(zero.view(), a.view()), Err(Error::ZeroNorm)));
        assert!(mean_positive_embedding(&[]).is_err());
    }

    #[test]
    fn identical_embeddings_give_log_of_set_size_minus_one() {
        let e = Array2::from_elem((4, 3), 0.7);
        let set = EmbeddingSet::from_stacked(e, 0.05).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert_eq!(nt_xent_pair(&set, i, j).unwrap(), 3f64.ln());
                }
            }
        }
        assert_eq!(contrastive_loss(&set, LossReduction::Sum).unwrap(), 4.0 * 3f64.ln());
        assert_eq!(contrastive_loss(&set, LossReduction::Mean).unwrap(), 3f64.ln());
    }

    #[test]
    fn hand_evaluated_pair() {
        // e1 . e3 = 1, all other pairs orthogonal, t = 1
        let e = arr2(&[
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
        ]);
        let set = EmbeddingSet::from_stacked(e, 1.0).unwrap();
        let expected = (1.0 + 2.0 / std::f64::consts::E).ln();
        assert!((nt_xent_pair(&set, 0, 2).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.5514).abs() < 1e-4);
    }

    #[test]
    fn degenerate_pair_set_is_zero() {
        let e = arr2(&[[1.0, 2.0], [-3.0, 0.5]]);
        let set = EmbeddingSet::from_stacked(e, 0.05).unwrap();
        assert_eq!(nt_xent_pair(&set, 0, 1).unwrap(), 0.0);
        let (loss, grad) = contrastive_loss_and_grad(&set, LossReduction::Sum).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn set_validation() {
        let e = Array2::from_elem((4, 2), 1.0);
        assert!(matches!(
            EmbeddingSet::from_stacked(e.clone(), 0.0),
            Err(Error::InvalidTemperature(_))
        ));
        assert!(EmbeddingSet::from_stacked(Array2::from_elem((3, 2), 1.0), 1.0).is_err());
        let mut z = e.clone();
        z.row_mut(2).fill(0.0);
        assert!(matches!(EmbeddingSet::from_stacked(z, 1.0), Err(Error::ZeroNorm)));
        let set = EmbeddingSet::from_stacked(e, 1.0).unwrap();
        assert!(nt_xent_pair(&set, 1, 1).is_err());
        assert!(nt_xent_pair(&set, 0, 4).is_err());
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let e = Array::from_shape_fn((6, 5), |(r, c)| ((r * 7 + c * 3) as f64 * 0.37).sin() + 0.1);
        let t = 0.2;
        let (_, grad) =
            contrastive_loss_and_grad(&EmbeddingSet::from_stacked(e.clone(), t).unwrap(), LossReduction::Sum)
                .unwrap();
        let h = 1e-6;
        for r in 0..6 {
            for c in 0..5 {
                let mut plus = e.clone();
                plus[[r, c]] += h;
                let mut minus = e.clone();
                minus[[r, c]] -= h;
                let f = |m: Array2<f64>| {
                    contrastive_loss(&EmbeddingSet::from_stacked(m, t).unwrap(), LossReduction::Sum).unwrap()
                };
                let fd = (f(plus) - f(minus)) / (2.0 * h);
                let a = grad[[r, c]];
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
                assert!(rel < 1e-6, "[{r},{c}] analytic {a} fd {fd}");
            }
        }
    }

    #[test]
    fn mlm_loss_cases() {
        let v = 37;
        let uniform = Array2::zeros((3, v));
        let loss = mlm_loss(&uniform, &[3, 4, 5]).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-14);

        // gap g over V classes: ln(1 + (V - 1) e^-g)
        for big_v in [2usize, 4, 100, 10_000] {
            let mut confident = Array2::zeros((2, big_v));
            confident[[0, 1]] = 20.0;
            confident[[1, 0]] = 20.0;
            let loss = mlm_loss(&confident, &[1, 0]).unwrap();
            let expected = ((big_v - 1) as f64 * (-20f64).exp()).ln_1p();
            assert!((loss - expected).abs() < 1e-12, "V={big_v}");
            if big_v <= 4 {
                assert!(loss < 1e-8);
            }
        }
        let mut wide = Array2::zeros((1, 3));
        wide[[0, 2]] = 200.0;
        assert_eq!(mlm_loss(&wide, &[2]).unwrap(), 0.0);

        let mut logits = Array2::zeros((3, 6));
        logits[[0, 1]] = 2.0;
        logits[[1, 2]] = -1.0;
        logits[[2, 5]] = 0.5;
        let a = mlm_loss(&logits, &[1, 3, 5]).unwrap();
        let permuted = ndarray::stack![Axis(0), logits.row(2), logits.row(0), logits.row(1)];
        let b = mlm_loss(&permuted, &[5, 1, 3]).unwrap();
        assert!((a - b).abs() < 1e-15);

        assert!(matches!(
            mlm_loss(&Array2::zeros((0, 5)), &[]),
            Err(Error::NoMaskedPositions)
        ));
    }

    #[test]
    fn mlm_gradient_matches_finite_differences() {
        let logits = Array::from_shape_fn((3, 5), |(r, c)| ((r + 2 * c) as f64).cos());
        let labels = [1, 4, 0];
        let (_, grad) = mlm_loss_and_grad(&logits, &labels).unwrap();
        let h = 1e-6;
        for r in 0..3 {
            for c in 0..5 {
                let mut p = logits.clone();
                p[[r, c]] += h;
                let mut m = logits.clone();
                m[[r, c]] -= h;
                let fd = (mlm_loss(&p, &labels).unwrap() - mlm_loss(&m, &labels).unwrap()) / (2.0 * h);
                assert!((fd - grad[[r, c]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn combined_cases() {
        assert_eq!(combined_loss(0.0, 2.5).unwrap(), 2.5);
        assert_eq!(combined_loss(2.5, 0.0).unwrap(), 2.5);
        assert_eq!(combined_loss(1.5, 2.5).unwrap(), 4.0);
        assert!(combined_loss(f64::NAN, 1.0).is_err());
        assert!(combined_loss(1.0, f64::INFINITY).is_err());
    }

    fn embeddings(rows: usize, dim: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(-2.0f64..2.0, rows * dim)
            .prop_map(move |v| Array2::from_shape_vec((rows, dim), v).unwrap())
            .prop_filter("nonzero rows", |m| m.rows().into_iter().all(|r| r.dot(&r) > 1e-6))
    }

    proptest! {
        #[test]
        fn stabilized_matches_naive(e in embeddings(8, 4), t in 0.3f64..2.0) {
            let set = EmbeddingSet::from_stacked(e.clone(), t).unwrap();
            for i in 0..8 {
                for j in 0..8 {
                    if i != j {
                        let a = nt_xent_pair(&set, i, j).unwrap();
                        prop_assert!((a - naive_pair(&e, t, i, j)).abs() < 1e-10);
                        prop_assert!(a > 0.0);
                    }
                }
            }
            let total = contrastive_loss(&set, LossReduction::Sum).unwrap();
            prop_assert!((total - naive_total(&e, t)).abs() < 1e-10);
        }

        #[test]
        fn scale_invariance(e in embeddings(6, 3), row in 0usize..6, c in 0.01f64..100.0) {
            let base = EmbeddingSet::from_stacked(e.clone(), 0.5).unwrap();
            let mut scaled = e.clone();
            scaled.row_mut(row).mapv_inplace(|x| x * c);
            let scaled = EmbeddingSet::from_stacked(scaled, 0.5).unwrap();
            for i in 0..6 {
                let j = base.partner(i);
                let a = nt_xent_pair(&base, i, j).unwrap();
                let b = nt_xent_pair(&scaled, i, j).unwrap();
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn document_permutation_leaves_loss_unchanged(e in embeddings(8, 3)) {
            // A = 2, N = 2: swap the two documents (anchors and their positives)
            let perm = [2usize, 3, 0, 1, 6, 7, 4, 5];
            let swapped = e.select(Axis(0), &perm);
            let a = contrastive_loss(&EmbeddingSet::from_stacked(e, 0.1).unwrap(), LossReduction::Sum).unwrap();
            let b = contrastive_loss(&EmbeddingSet::from_stacked(swapped, 0.1).unwrap(), LossReduction::Sum).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn pair_term_decreases_as_positive_similarity_grows(s1 in -0.9f64..0.8, ds in 0.01f64..0.1) {
            // e0 fixed; e1 rotates towards e0 while the other rows stay orthogonal to both
            let build = |s: f64| {
                let c = (1.0 - s * s).sqrt();
                ndarray::arr2(&[
                    [1.0, 0.0, 0.0, 0.0],
                    [s, c, 0.0, 0.0],
                    [0.0, 0.0, 1.0, 0.0],
                    [0.0, 0.0, 0.0, 1.0],
                ])
            };
            let lo = nt_xent_pair(&EmbeddingSet::from_stacked(build(s1), 0.5).unwrap(), 0, 1).unwrap();
            let hi = nt_xent_pair(&EmbeddingSet::from_stacked(build(s1 + ds), 0.5).unwrap(), 0, 1).unwrap();
            prop_assert!(hi < lo);
        }
    }
}
