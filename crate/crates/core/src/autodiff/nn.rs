//! Transformer building blocks composed from tape primitives.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::tape::{ParamId, ParamStore, Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Layer-norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Glorot-style uniform init, `U(-sqrt(6/(fan_in+fan_out)), +...)`.
pub fn init_scaled_uniform<T: Scalar, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    let data = (0..rows * cols)
        .map(|_| T::from_f64_lossy(dist.sample(rng)))
        .collect();
    Tensor::matrix(rows, cols, data).expect("size")
}

pub fn init_normal<T: Scalar, R: Rng>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols)
        .map(|_| T::from_f64_lossy(dist.sample(rng)))
        .collect();
    Tensor::matrix(rows, cols, data).expect("size")
}

/// Fixed sinusoidal encodings for the given positions, one row per position.
pub fn sinusoidal_encoding<T: Scalar>(positions: &[usize], d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(positions.len() * d);
    for &pos in positions {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data.push(T::from_f64_lossy(if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }));
        }
    }
    Tensor::matrix(positions.len(), d, data).expect("size")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    /// The key projection carries no bias: it would shift every score in a
    /// row equally and the row softmax cancels it.
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttentionParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        rng: &mut R,
    ) -> Self {
        let mut matrix = |name: &str, rng: &mut R| {
            store_push(
                store,
                format!("{prefix}.{name}"),
                init_scaled_uniform(d, d, rng),
            )
        };
        let wq = matrix("wq", rng);
        let wk = matrix("wk", rng);
        let wv = matrix("wv", rng);
        let wo = matrix("wo", rng);
        let bq = store.push(format!("{prefix}.bq"), Tensor::zeros(&[d]));
        let bv = store.push(format!("{prefix}.bv"), Tensor::zeros(&[d]));
        let bo = store.push(format!("{prefix}.bo"), Tensor::zeros(&[d]));
        Self {
            wq,
            bq,
            wk,
            wv,
            bv,
            wo,
            bo,
        }
    }
}

fn store_push<T: Scalar>(store: &mut ParamStore<T>, name: String, t: Tensor<T>) -> ParamId {
    store.push(name, t)
}

/// Multi-head scaled dot-product self-attention over the rows of `x`
/// (`T x d`). `mask` is either `T` key flags or a full `T x T` matrix of
/// allowed query/key pairs.
pub fn multi_head_self_attention<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    params: &AttentionParams,
    mask: Option<&[bool]>,
    n_heads: usize,
) -> Result<Var> {
    let d = tape.value(x).cols();
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(Error::config(format!(
            "model dimension {d} not divisible by {n_heads} heads"
        )));
    }
    let head_dim = d / n_heads;
    let scale = T::from_f64_lossy(1.0 / (head_dim as f64).sqrt());

    let (wq, bq, wk, wv, bv, wo, bo) = (
        tape.param(params.wq),
        tape.param(params.bq),
        tape.param(params.wk),
        tape.param(params.wv),
        tape.param(params.bv),
        tape.param(params.wo),
        tape.param(params.bo),
    );
    let q = tape.affine(x, wq, bq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.affine(x, wv, bv)?;

    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let start = h * head_dim;
        let qh = tape.slice_cols(q, start, head_dim)?;
        let kh = tape.slice_cols(k, start, head_dim)?;
        let vh = tape.slice_cols(v, start, head_dim)?;
        let scores = tape.matmul_t(qh, kh, false, true)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores, mask)?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    tape.affine(merged, wo, bo)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransformerLayerParams {
    pub attention: AttentionParams,
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
}

impl TransformerLayerParams {
    /// Feed-forward hidden width is `4 d`.
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        rng: &mut R,
    ) -> Self {
        let attention = AttentionParams::register(store, &format!("{prefix}.attn"), d, rng);
        let norm1_gain = store.push(format!("{prefix}.norm1.gain"), Tensor::full(&[d], T::one()));
        let norm1_bias = store.push(format!("{prefix}.norm1.bias"), Tensor::zeros(&[d]));
        let ffn_w1 = store.push(
            format!("{prefix}.ffn.w1"),
            init_scaled_uniform(d, 4 * d, rng),
        );
        let ffn_b1 = store.push(format!("{prefix}.ffn.b1"), Tensor::zeros(&[4 * d]));
        let ffn_w2 = store.push(
            format!("{prefix}.ffn.w2"),
            init_scaled_uniform(4 * d, d, rng),
        );
        let ffn_b2 = store.push(format!("{prefix}.ffn.b2"), Tensor::zeros(&[d]));
        let norm2_gain = store.push(format!("{prefix}.norm2.gain"), Tensor::full(&[d], T::one()));
        let norm2_bias = store.push(format!("{prefix}.norm2.bias"), Tensor::zeros(&[d]));
        Self {
            attention,
            norm1_gain,
            norm1_bias,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
            norm2_gain,
            norm2_bias,
        }
    }

    /// Post-norm encoder block: `norm(x + drop(attn(x)))` then
    /// `norm(h + drop(ffn(h)))`.
    pub fn forward<T: Scalar, R: Rng>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        mask: Option<&[bool]>,
        n_heads: usize,
        dropout: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let attn = multi_head_self_attention(tape, x, &self.attention, mask, n_heads)?;
        let attn = tape.dropout(attn, dropout, train, rng)?;
        let res = tape.add(x, attn)?;
        let (g1, b1) = (tape.param(self.norm1_gain), tape.param(self.norm1_bias));
        let h = tape.layer_norm(res, g1, b1, LAYER_NORM_EPS)?;

        let (w1, fb1, w2, fb2) = (
            tape.param(self.ffn_w1),
            tape.param(self.ffn_b1),
            tape.param(self.ffn_w2),
            tape.param(self.ffn_b2),
        );
        let hidden = tape.affine(h, w1, fb1)?;
        let hidden = tape.relu(hidden);
        let ffn = tape.affine(hidden, w2, fb2)?;
        let ffn = tape.dropout(ffn, dropout, train, rng)?;
        let res = tape.add(h, ffn)?;
        let (g2, b2) = (tape.param(self.norm2_gain), tape.param(self.norm2_bias));
        tape.layer_norm(res, g2, b2, LAYER_NORM_EPS)
    }
}
