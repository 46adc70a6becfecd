//! Attention and transformer-block primitives on top of the graph ops.

use crate::autodiff::graph::{Graph, Value};
use crate::autodiff::params::ParamRef;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Gain/bias pair for a layer norm site.
#[derive(Clone)]
pub struct LayerNormParams {
    pub gain: ParamRef,
    pub bias: ParamRef,
}

impl LayerNormParams {
    pub fn apply(&self, g: &mut Graph, x: Value) -> Result<Value> {
        let gain = g.param(&self.gain);
        let bias = g.param(&self.bias);
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}

/// Projection weights for one multi-head attention site.
#[derive(Clone)]
pub struct AttentionParams {
    pub wq: ParamRef,
    pub wk: ParamRef,
    pub wv: ParamRef,
    pub wo: ParamRef,
}

/// Two-layer MLP with GELU.
#[derive(Clone)]
pub struct MlpParams {
    pub w1: ParamRef,
    pub b1: ParamRef,
    pub w2: ParamRef,
    pub b2: ParamRef,
}

/// Pre-norm encoder block: self-attention and MLP sublayers with residuals.
#[derive(Clone)]
pub struct EncoderBlockParams {
    pub ln_attn: LayerNormParams,
    pub attn: AttentionParams,
    pub ln_mlp: LayerNormParams,
    pub mlp: MlpParams,
}

/// Scaled dot-product attention over already-projected q/k/v.
///
/// `mask`, when present, is added to the score matrix before the softmax
/// (use large negative entries to block keys).
pub fn attention(g: &mut Graph, q: Value, k: Value, v: Value, mask: Option<Value>) -> Result<Value> {
    let (_, dq) = g.shape(q);
    let (_, dk) = g.shape(k);
    if dq != dk {
        return Err(Error::ShapeMismatch {
            op: "attention",
            left: g.shape(q),
            right: g.shape(k),
        });
    }
    let kt = g.transpose(k);
    let raw = g.matmul(q, kt)?;
    let mut scores = g.scale(raw, 1.0 / (dq as f64).sqrt());
    if let Some(m) = mask {
        scores = g.add(scores, m)?;
    }
    let weights = g.softmax_rows(scores);
    g.matmul(weights, v)
}

/// Multi-head attention with separate query and key/value sequences.
///
/// Self-attention passes the same value for both; cross-attention passes the
/// other modality's states as `x_kv`.
pub fn multi_head_attention(
    g: &mut Graph,
    x_q: Value,
    x_kv: Value,
    params: &AttentionParams,
    n_heads: usize,
    mask: Option<Value>,
) -> Result<Value> {
    let (_, d) = g.shape(x_q);
    if !d.is_multiple_of(n_heads) {
        return Err(Error::invalid(format!(
            "embed dim {d} not divisible by {n_heads} heads"
        )));
    }
    let head_dim = d / n_heads;
    let wq = g.param(&params.wq);
    let wk = g.param(&params.wk);
    let wv = g.param(&params.wv);
    let wo = g.param(&params.wo);
    let q = g.matmul(x_q, wq)?;
    let k = g.matmul(x_kv, wk)?;
    let v = g.matmul(x_kv, wv)?;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let lo = h * head_dim;
        let hi = lo + head_dim;
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        heads.push(attention(g, qh, kh, vh, mask)?);
    }
    let cat = g.concat_cols(&heads)?;
    g.matmul(cat, wo)
}

pub fn feed_forward(g: &mut Graph, x: Value, params: &MlpParams) -> Result<Value> {
    let w1 = g.param(&params.w1);
    let b1 = g.param(&params.b1);
    let w2 = g.param(&params.w2);
    let b2 = g.param(&params.b2);
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h);
    let out = g.matmul(h, w2)?;
    g.add_row(out, b2)
}

/// Pre-norm transformer encoder block:
/// x + MHA(LN(x)), then + MLP(LN(.)).
pub fn transformer_block(
    g: &mut Graph,
    x: Value,
    block: &EncoderBlockParams,
    n_heads: usize,
) -> Result<Value> {
    let normed = block.ln_attn.apply(g, x)?;
    let attn_out = multi_head_attention(g, normed, normed, &block.attn, n_heads, None)?;
    let x = g.add(x, attn_out)?;
    let normed = block.ln_mlp.apply(g, x)?;
    let mlp_out = feed_forward(g, normed, &block.mlp)?;
    g.add(x, mlp_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tensor::Tensor;

    #[test]
    fn single_position_attention_returns_value_row() {
        let mut g = Graph::new();
        let q = g.leaf(Tensor::row(vec![0.3, -0.2]));
        let k = g.leaf(Tensor::row(vec![1.0, 2.0]));
        let v = g.leaf(Tensor::row(vec![5.0, -7.0]));
        let out = attention(&mut g, q, k, v, None).unwrap();
        assert_eq!(g.data(out), &[5.0, -7.0]);
    }

    #[test]
    fn mask_forces_attention_to_one_key() {
        let mut g = Graph::new();
        let q = g.leaf(Tensor::row(vec![0.1, 0.1]));
        let k = g.leaf(Tensor::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap());
        let v = g.leaf(Tensor::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let mask = g.leaf(Tensor::row(vec![-1e9, 0.0, -1e9]));
        let out = attention(&mut g, q, k, v, Some(mask)).unwrap();
        let got = g.data(out);
        assert!((got[0] - 3.0).abs() < 1e-9);
        assert!((got[1] - 4.0).abs() < 1e-9);
    }
}
