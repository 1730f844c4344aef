//! Forward and backward passes.
//!
//! Sequences are processed one at a time over their unpadded positions only,
//! which is exactly equivalent to masking pad keys to -inf in every attention
//! row: a sequence's output never depends on its padding or batch companions.
//!
//! Per layer (pre-norm):
//!
//! ```text
//! a  = LN(x);   x' = x  + Attn(a) Wo + bo
//! b  = LN(x');  x'' = x' + GELU(b W1 + b1) W2 + b2
//! ```
//!
//! followed by a final layer norm.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng as _;
use rayon::prelude::*;

use super::{EncoderParams, LayerParams, NormParams, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::rng::Rng;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + GELU_K * z * z * z)).tanh())
}

fn gelu_grad(z: f64) -> f64 {
    let t = (GELU_C * (z + GELU_K * z * z * z)).tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * z * z)
}

struct NormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn norm_forward(x: &Array2<f64>, p: &NormParams) -> (Array2<f64>, NormCache) {
    let (rows, d) = x.dim();
    let mut xhat = Array2::zeros((rows, d));
    let mut rstd = Array1::zeros(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[r] = rs;
        Zip::from(xhat.row_mut(r)).and(row).for_each(|h, &v| *h = (v - mean) * rs);
    }
    let y = &xhat * &p.gamma + &p.beta;
    (y, NormCache { xhat, rstd })
}

fn norm_backward(dy: &Array2<f64>, p: &NormParams, cache: &NormCache, grad: &mut NormParams) -> Array2<f64> {
    let d = dy.ncols() as f64;
    grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    grad.beta += &dy.sum_axis(Axis(0));
    let dxhat = dy * &p.gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for r in 0..dy.nrows() {
        let g = dxhat.row(r);
        let h = cache.xhat.row(r);
        let mean_g = g.sum() / d;
        let mean_gh = g.dot(&h) / d;
        let rs = cache.rstd[r];
        Zip::from(dx.row_mut(r))
            .and(g)
            .and(h)
            .for_each(|o, &gv, &hv| *o = rs * (gv - mean_g - hv * mean_gh));
    }
    dx
}

fn affine(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(w) + b
}

/// `dx` for `y = x W + b`; accumulates `dW` and `db`.
fn affine_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    ndarray::linalg::general_mat_mul(1.0, &x.t(), dy, 1.0, dw);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Inverted dropout on a sublayer output.
#[derive(Debug)]
pub struct DropoutSpec<'a> {
    pub rate: f64,
    pub rng: &'a mut Rng,
}

fn dropout_mask(shape: (usize, usize), spec: &mut Option<DropoutSpec<'_>>) -> Option<Array2<f64>> {
    let spec = spec.as_mut()?;
    if spec.rate <= 0.0 {
        return None;
    }
    let keep = 1.0 - spec.rate;
    Some(Array2::from_shape_fn(shape, |_| {
        if spec.rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    }))
}

struct LayerCache {
    attn_norm: NormCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    attn_drop: Option<Array2<f64>>,
    ffn_norm: NormCache,
    b: Array2<f64>,
    z: Array2<f64>,
    u: Array2<f64>,
    ffn_drop: Option<Array2<f64>>,
}

/// Output of one sequence's forward pass plus everything its backward pass needs.
pub struct SequenceForward {
    ids: Vec<u32>,
    positions: Vec<usize>,
    layers: Vec<LayerCache>,
    final_norm: NormCache,
    /// `len x d_model` token embeddings.
    pub output: Array2<f64>,
}

impl SequenceForward {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Mean over all positions of this (unpadded) sequence.
    pub fn pooled(&self) -> Array1<f64> {
        pool_rows(self.output.view())
    }
}

fn pool_rows(rows: ArrayView2<'_, f64>) -> Array1<f64> {
    let mut acc = Array1::zeros(rows.ncols());
    for row in rows.rows() {
        acc += &row;
    }
    acc / rows.nrows() as f64
}

fn layer_forward(
    p: &LayerParams,
    x: Array2<f64>,
    heads: usize,
    dropout: &mut Option<DropoutSpec<'_>>,
) -> (Array2<f64>, LayerCache) {
    let (len, d) = x.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (a, attn_norm) = norm_forward(&x, &p.attn_norm);
    let q = affine(&a, &p.wq, &p.bq);
    let k = affine(&a, &p.wk, &p.bk);
    let v = affine(&a, &p.wv, &p.bv);
    let mut ctx = Array2::zeros((len, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores *= scale;
        softmax_rows(&mut scores);
        ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let mut attn_out = affine(&ctx, &p.wo, &p.bo);
    let attn_drop = dropout_mask(attn_out.dim(), dropout);
    if let Some(m) = &attn_drop {
        attn_out *= m;
    }
    let x1 = x + attn_out;

    let (b, ffn_norm) = norm_forward(&x1, &p.ffn_norm);
    let z = affine(&b, &p.w1, &p.b1);
    let u = z.mapv(gelu);
    let mut ffn_out = affine(&u, &p.w2, &p.b2);
    let ffn_drop = dropout_mask(ffn_out.dim(), dropout);
    if let Some(m) = &ffn_drop {
        ffn_out *= m;
    }
    let x2 = x1 + ffn_out;

    (
        x2,
        LayerCache {
            attn_norm,
            a,
            q,
            k,
            v,
            probs,
            ctx,
            attn_drop,
            ffn_norm,
            b,
            z,
            u,
            ffn_drop,
        },
    )
}

fn layer_backward(
    p: &LayerParams,
    c: &LayerCache,
    dx2: Array2<f64>,
    heads: usize,
    g: &mut LayerParams,
) -> Array2<f64> {
    let (len, d) = dx2.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // FFN sublayer
    let mut dffn = dx2.clone();
    if let Some(m) = &c.ffn_drop {
        dffn *= m;
    }
    let du = affine_backward(&c.u, &p.w2, &dffn, &mut g.w2, &mut g.b2);
    let mut dz = du;
    Zip::from(&mut dz).and(&c.z).for_each(|dzv, &zv| *dzv *= gelu_grad(zv));
    let db = affine_backward(&c.b, &p.w1, &dz, &mut g.w1, &mut g.b1);
    let dx1 = dx2 + norm_backward(&db, &p.ffn_norm, &c.ffn_norm, &mut g.ffn_norm);

    // attention sublayer
    let mut dattn = dx1.clone();
    if let Some(m) = &c.attn_drop {
        dattn *= m;
    }
    let dctx = affine_backward(&c.ctx, &p.wo, &dattn, &mut g.wo, &mut g.bo);
    let mut dq = Array2::zeros((len, d));
    let mut dk = Array2::zeros((len, d));
    let mut dv = Array2::zeros((len, d));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let probs = &c.probs[h];
        let dctx_h = dctx.slice(cols);
        let dprobs = dctx_h.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));
        let mut dscores = Array2::zeros((len, len));
        for r in 0..len {
            let pr = probs.row(r);
            let gr = dprobs.row(r);
            let inner = pr.dot(&gr);
            Zip::from(dscores.row_mut(r))
                .and(pr)
                .and(gr)
                .for_each(|o, &pv, &gv| *o = pv * (gv - inner) * scale);
        }
        dq.slice_mut(cols).assign(&dscores.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&dscores.t().dot(&c.q.slice(cols)));
    }
    let mut da = affine_backward(&c.a, &p.wq, &dq, &mut g.wq, &mut g.bq);
    da += &affine_backward(&c.a, &p.wk, &dk, &mut g.wk, &mut g.bk);
    da += &affine_backward(&c.a, &p.wv, &dv, &mut g.wv, &mut g.bv);
    dx1 + norm_backward(&da, &p.attn_norm, &c.attn_norm, &mut g.attn_norm)
}

impl EncoderParams {
    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Encodes one unpadded sequence at positions `0..len`.
    pub fn forward_sequence(&self, ids: &[u32], dropout: Option<DropoutSpec<'_>>) -> Result<SequenceForward> {
        let positions: Vec<usize> = (0..ids.len()).collect();
        self.forward_at(ids, &positions, dropout)
    }

    /// Encodes tokens `ids[t]` placed at absolute positions `positions[t]`.
    pub fn forward_at(
        &self,
        ids: &[u32],
        positions: &[usize],
        mut dropout: Option<DropoutSpec<'_>>,
    ) -> Result<SequenceForward> {
        assert_eq!(ids.len(), positions.len());
        self.check_ids(ids)?;
        if let Some(&pos) = positions.iter().max() {
            if pos >= self.config.max_positions {
                return Err(Error::SequenceTooLong {
                    len: pos + 1,
                    max: self.config.max_positions,
                });
            }
        }
        let d = self.config.d_model;
        let mut x = Array2::zeros((ids.len(), d));
        for (t, (&id, &pos)) in ids.iter().zip(positions).enumerate() {
            let mut row = x.row_mut(t);
            row += &self.token_embedding.row(id as usize);
            row += &self.position_embedding.row(pos);
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, cache) = layer_forward(layer, x, self.config.heads, &mut dropout);
            layers.push(cache);
            x = next;
        }
        let (output, final_norm) = norm_forward(&x, &self.final_norm);
        Ok(SequenceForward {
            ids: ids.to_vec(),
            positions: positions.to_vec(),
            layers,
            final_norm,
            output,
        })
    }

    /// Accumulates into `grads` the parameter gradient given `d_output`, the
    /// gradient of the loss with respect to `fwd.output`.
    pub fn backward_sequence(&self, fwd: &SequenceForward, d_output: &Array2<f64>, grads: &mut EncoderParams) {
        assert_eq!(d_output.dim(), fwd.output.dim());
        let mut dx = norm_backward(d_output, &self.final_norm, &fwd.final_norm, &mut grads.final_norm);
        for (l, layer) in self.layers.iter().enumerate().rev() {
            dx = layer_backward(layer, &fwd.layers[l], dx, self.config.heads, &mut grads.layers[l]);
        }
        for (t, (&id, &pos)) in fwd.ids.iter().zip(&fwd.positions).enumerate() {
            let g = dx.row(t);
            let mut te = grads.token_embedding.row_mut(id as usize);
            te += &g;
            let mut pe = grads.position_embedding.row_mut(pos);
            pe += &g;
        }
    }

    /// Mean-pooled embedding of one unpadded sequence.
    pub fn embed_sequence(&self, ids: &[u32]) -> Result<Array1<f64>> {
        if ids.is_empty() {
            return Err(Error::AllPadRow { row: 0 });
        }
        Ok(self.forward_sequence(ids, None)?.pooled())
    }
}

/// Encodes a padded `(batch, len)` id matrix. `mask` is true at real tokens.
/// Rows are independent; pad positions of the output are zero.
pub fn encode_tokens(
    params: &EncoderParams,
    ids: &Array2<u32>,
    mask: &Array2<bool>,
) -> Result<Array3<f64>> {
    if ids.dim() != mask.dim() {
        return Err(Error::ShapeMismatch {
            name: "pad mask".into(),
            expected: ids.shape().to_vec(),
            found: mask.shape().to_vec(),
        });
    }
    let (batch, len) = ids.dim();
    if len > params.config.max_positions {
        return Err(Error::SequenceTooLong {
            len,
            max: params.config.max_positions,
        });
    }
    let rows: Vec<(Vec<usize>, Array2<f64>)> = (0..batch)
        .into_par_iter()
        .map(|r| {
            let positions: Vec<usize> = (0..len).filter(|&c| mask[[r, c]]).collect();
            let row_ids: Vec<u32> = positions.iter().map(|&c| ids[[r, c]]).collect();
            let fwd = params.forward_at(&row_ids, &positions, None)?;
            Ok((positions, fwd.output))
        })
        .collect::<Result<_>>()?;
    let mut out = Array3::zeros((batch, len, params.config.d_model));
    for (r, (positions, output)) in rows.into_iter().enumerate() {
        for (t, &c) in positions.iter().enumerate() {
            out.slice_mut(s![r, c, ..]).assign(&output.row(t));
        }
    }
    Ok(out)
}

/// Mean over unpadded positions, one pooled vector per row.
pub fn mean_pool(token_embeddings: &Array3<f64>, mask: &Array2<bool>) -> Result<Array2<f64>> {
    let (batch, len, d) = token_embeddings.dim();
    if mask.dim() != (batch, len) {
        return Err(Error::ShapeMismatch {
            name: "pad mask".into(),
            expected: vec![batch, len],
            found: mask.shape().to_vec(),
        });
    }
    let mut out = Array2::zeros((batch, d));
    for r in 0..batch {
        let mut acc = Array1::<f64>::zeros(d);
        let mut count = 0usize;
        for c in 0..len {
            if mask[[r, c]] {
                acc += &token_embeddings.slice(s![r, c, ..]);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::AllPadRow { row: r });
        }
        out.row_mut(r).assign(&(acc / count as f64));
    }
    Ok(out)
}

/// Logits over the vocabulary at `positions`: `h E^T + bias`.
pub fn mlm_logits(params: &EncoderParams, hidden: ArrayView2<'_, f64>, positions: &[usize]) -> Result<Array2<f64>> {
    let gathered = gather_rows(hidden, positions)?;
    Ok(gathered.dot(&params.token_embedding.t()) + &params.mlm_bias)
}

/// Backward of [`mlm_logits`]: accumulates embedding and bias gradients and
/// returns the gradient with respect to `hidden`.
pub fn mlm_logits_backward(
    params: &EncoderParams,
    hidden: ArrayView2<'_, f64>,
    positions: &[usize],
    d_logits: &Array2<f64>,
    grads: &mut EncoderParams,
) -> Result<Array2<f64>> {
    let gathered = gather_rows(hidden, positions)?;
    ndarray::linalg::general_mat_mul(1.0, &d_logits.t(), &gathered, 1.0, &mut grads.token_embedding);
    grads.mlm_bias += &d_logits.sum_axis(Axis(0));
    let d_gathered = d_logits.dot(&params.token_embedding);
    let mut d_hidden = Array2::zeros(hidden.raw_dim());
    for (k, &pos) in positions.iter().enumerate() {
        let mut row = d_hidden.row_mut(pos);
        row += &d_gathered.row(k);
    }
    Ok(d_hidden)
}

fn gather_rows(hidden: ArrayView2<'_, f64>, positions: &[usize]) -> Result<Array2<f64>> {
    let len = hidden.nrows();
    if let Some(&position) = positions.iter().find(|&&p| p >= len) {
        return Err(Error::PositionOutOfRange { position, len });
    }
    Ok(hidden.select(Axis(0), positions))
}

/// Gradient of a pooled vector with respect to each token row of the sequence.
pub fn pool_backward(d_pooled: ArrayView1<'_, f64>, len: usize) -> Array2<f64> {
    let scaled = d_pooled.mapv(|g| g / len as f64);
    let mut out = Array2::zeros((len, scaled.len()));
    for mut row in out.rows_mut() {
        row.assign(&scaled);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::EncoderConfig;
    use super::*;
    use crate::rng::seeded;
    use rand_distr::{Distribution, Normal};

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            layers: 2,
            heads: 2,
            d_ff: 12,
            max_positions: 6,
            vocab_size: 11,
            dropout: 0.0,
        }
    }

    /// Random parameters at a scale where every path carries signal.
    fn random_params(cfg: &EncoderConfig, seed: u64) -> EncoderParams {
        let mut p = EncoderParams::zeros(cfg);
        let mut rng = seeded(seed);
        let n = Normal::new(0.0, 0.4).unwrap();
        for mut t in p.tensors_mut() {
            let shift = if t.kind == super::super::ParamKind::NormScale { 1.0 } else { 0.0 };
            t.value.mapv_inplace(|_| shift + n.sample(&mut rng));
        }
        p
    }

    #[test]
    fn shapes() {
        let cfg = EncoderConfig {
            d_model: 16,
            heads: 4,
            ..tiny()
        };
        let p = EncoderParams::init(&cfg, 0).unwrap();
        let ids = Array2::from_shape_fn((3, 6), |(r, c)| ((r + c) % 8 + 3) as u32);
        let mask = Array2::from_elem((3, 6), true);
        let out = encode_tokens(&p, &ids, &mask).unwrap();
        assert_eq!(out.dim(), (3, 6, 16));
        let logits = mlm_logits(&p, out.slice(s![0, .., ..]), &[0, 5]).unwrap();
        assert_eq!(logits.dim(), (2, 11));
        assert!(matches!(
            mlm_logits(&p, out.slice(s![0, .., ..]), &[6]),
            Err(Error::PositionOutOfRange { .. })
        ));
    }

    #[test]
    fn encode_errors() {
        let p = EncoderParams::init(&tiny(), 0).unwrap();
        let ids = Array2::from_elem((1, 7), 3u32);
        let mask = Array2::from_elem((1, 7), true);
        assert!(matches!(encode_tokens(&p, &ids, &mask), Err(Error::SequenceTooLong { .. })));
        let ids = Array2::from_elem((1, 2), 11u32);
        let mask = Array2::from_elem((1, 2), true);
        assert!(matches!(encode_tokens(&p, &ids, &mask), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn pooling_rules() {
        let emb = Array3::from_shape_vec((1, 3, 2), vec![1.0, 0.0, 0.0, 1.0, 9.0, 9.0]).unwrap();
        let mask = Array2::from_shape_vec((1, 3), vec![true, true, false]).unwrap();
        assert_eq!(mean_pool(&emb, &mask).unwrap().row(0).to_vec(), vec![0.5, 0.5]);
        let mask = Array2::from_shape_vec((1, 3), vec![true, false, false]).unwrap();
        assert_eq!(mean_pool(&emb, &mask).unwrap().row(0).to_vec(), vec![1.0, 0.0]);
        let mask = Array2::from_elem((1, 3), false);
        assert!(matches!(mean_pool(&emb, &mask), Err(Error::AllPadRow { row: 0 })));
    }

    #[test]
    fn padding_and_companions_do_not_change_rows() {
        let p = random_params(&tiny(), 3);
        let short = [3u32, 7, 9];
        let alone = p.embed_sequence(&short).unwrap();
        let ids = Array2::from_shape_vec((2, 5), vec![3, 7, 9, 0, 0, 4, 5, 6, 8, 10]).unwrap();
        let mask = ids.mapv(|id| id != 0);
        let out = encode_tokens(&p, &ids, &mask).unwrap();
        let pooled = mean_pool(&out, &mask).unwrap();
        assert_eq!(pooled.row(0).to_vec(), alone.to_vec());
    }

    #[test]
    fn zero_hidden_gives_uniform_logits() {
        let p = EncoderParams::zeros(&tiny());
        let hidden = Array2::<f64>::zeros((2, 8));
        let logits = mlm_logits(&p, hidden.view(), &[1]).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for &z in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(z + h) - gelu(z - h)) / (2.0 * h);
            assert!((fd - gelu_grad(z)).abs() < 1e-8);
        }
    }

    /// Finite-difference check of the encoder + MLM head for an arbitrary
    /// scalar of the outputs: sum_t w_t . out_t + sum of weighted logits.
    #[test]
    fn encoder_and_head_gradients_match_finite_differences() {
        let cfg = tiny();
        let params = random_params(&cfg, 21);
        let ids = [4u32, 2, 9, 3];
        let positions = [1usize, 3];
        let mut rng = seeded(99);
        let n = Normal::new(0.0, 1.0).unwrap();
        let w_out = Array2::from_shape_fn((4, 8), |_| n.sample(&mut rng));
        let w_log = Array2::from_shape_fn((2, 11), |_| n.sample(&mut rng));

        let scalar = |p: &EncoderParams| -> f64 {
            let f = p.forward_sequence(&ids, None).unwrap();
            let logits = mlm_logits(p, f.output.view(), &positions).unwrap();
            (&f.output * &w_out).sum() + (&logits * &w_log).sum()
        };

        let fwd = params.forward_sequence(&ids, None).unwrap();
        let mut grads = EncoderParams::zeros(&cfg);
        let d_hidden = mlm_logits_backward(&params, fwd.output.view(), &positions, &w_log, &mut grads).unwrap();
        params.backward_sequence(&fwd, &(d_hidden + &w_out), &mut grads);

        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let names: Vec<String> = params.tensors().into_iter().map(|t| t.name).collect();
        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.value.iter().cloned().collect()).collect();
        for (ti, name) in names.iter().enumerate() {
            let count = analytic[ti].len();
            for k in 0..count {
                let mut plus = params.clone();
                *plus.tensors_mut()[ti].value.iter_mut().nth(k).unwrap() += h;
                let mut minus = params.clone();
                *minus.tensors_mut()[ti].value.iter_mut().nth(k).unwrap() -= h;
                let fd = (scalar(&plus) - scalar(&minus)) / (2.0 * h);
                let a = analytic[ti][k];
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-4);
                assert!(rel < 1e-4, "{name}[{k}]: analytic {a} vs fd {fd}");
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn dropout_is_identity_at_rate_zero_and_scales_otherwise() {
        let p = random_params(&tiny(), 5);
        let ids = [3u32, 4, 5];
        let plain = p.forward_sequence(&ids, None).unwrap().output;
        let mut rng = seeded(1);
        let zero = p
            .forward_sequence(&ids, Some(DropoutSpec { rate: 0.0, rng: &mut rng }))
            .unwrap()
            .output;
        assert_eq!(plain, zero);
        let dropped = p
            .forward_sequence(&ids, Some(DropoutSpec { rate: 0.5, rng: &mut rng }))
            .unwrap()
            .output;
        assert_ne!(plain, dropped);
    }
}
