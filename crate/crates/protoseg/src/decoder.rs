//! Transformer decoder with the class prototype as the sole Query token:
//! self-attention over that token, cross-attention into the flattened query
//! feature positions (no positional codes on Keys/Values), and a
//! feed-forward block, each with residual + layer normalization. The output
//! token is the mask embedding dotted against pixel embeddings to predict
//! the mask.

use crate::config::Config;
use crate::error::{Error, Result};
use crate::params::BoundParams;
use crate::tensor::{Scalar, Tape, Var};

const LN_EPS: f64 = 1e-5;

/// Multi-head attention output plus the per-head attention rows and
/// per-head pre-projection aggregates (exposed for invariant checks).
pub struct Attention {
    /// [n_q, C] after the output projection.
    pub out: Var,
    /// Per head: [n_q, n_k] rows on the probability simplex.
    pub weights: Vec<Var>,
    /// Per head: [n_q, d_h] convex combination of value rows.
    pub mixed: Vec<Var>,
}

fn project<F: Scalar>(tape: &mut Tape<F>, bound: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let w = bound.var(&format!("{name}.w"))?;
    let b = bound.var(&format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row_bias(y, b)
}

/// Scaled dot-product multi-head attention; `prefix` names the {wq,wk,wv,wo}
/// projection parameters.
pub fn multi_head_attention<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    prefix: &str,
    q: Var,
    kv: Var,
    n_heads: usize,
) -> Result<Attention> {
    let c = tape.value(q).shape()[1];
    if c % n_heads != 0 {
        return Err(Error::config(format!(
            "attention width {c} not divisible by {n_heads} heads"
        )));
    }
    let dh = c / n_heads;
    let qp = project(tape, bound, &format!("{prefix}.wq"), q)?;
    let kp = project(tape, bound, &format!("{prefix}.wk"), kv)?;
    let vp = project(tape, bound, &format!("{prefix}.wv"), kv)?;
    let scale = F::from_f64_c(1.0 / (dh as f64).sqrt());
    let mut weights = Vec::with_capacity(n_heads);
    let mut mixed = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.narrow_cols(qp, h * dh, dh)?;
        let kh = tape.narrow_cols(kp, h * dh, dh)?;
        let vh = tape.narrow_cols(vp, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let a = tape.softmax(scores);
        let o = tape.matmul(a, vh)?;
        weights.push(a);
        mixed.push(o);
    }
    let cat = tape.concat_cols(&mixed)?;
    let out = project(tape, bound, &format!("{prefix}.wo"), cat)?;
    Ok(Attention {
        out,
        weights,
        mixed,
    })
}

fn layer_norm_named<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    name: &str,
    x: Var,
) -> Result<Var> {
    let gamma = bound.var(&format!("{name}.gamma"))?;
    let beta = bound.var(&format!("{name}.beta"))?;
    tape.layer_norm(x, gamma, beta, F::from_f64_c(LN_EPS))
}

/// Runs the decoder stack on the prototype token against the [C,h,w] query
/// features and returns the [1,C] mask embedding. The learnable positional
/// encoding attaches to the Query token only and is re-added every layer.
pub fn decode_mask_embedding<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    cfg: &Config,
    proto: Var,
    xqm: Var,
) -> Result<Var> {
    let xs = tape.value(xqm).shape().to_vec();
    if xs.len() != 3 || xs[0] != cfg.dim {
        return Err(Error::config(format!(
            "decoder expects [{},h,w] query features, got {xs:?}",
            cfg.dim
        )));
    }
    if cfg.dim % cfg.n_heads != 0 {
        return Err(Error::config(format!(
            "dim {} not divisible by n_heads {}",
            cfg.dim, cfg.n_heads
        )));
    }
    let n = xs[1] * xs[2];
    let flat = tape.reshape(xqm, vec![cfg.dim, n])?;
    let kv = tape.transpose(flat)?;
    let pos = bound.var("decoder.pos_enc")?;
    let pos = tape.reshape(pos, vec![1, cfg.dim])?;
    let mut t = tape.reshape(proto, vec![1, cfg.dim])?;
    for l in 0..cfg.layers {
        let p = format!("decoder.layer{l}");
        t = tape.add(t, pos)?;
        let sa = multi_head_attention(tape, bound, &format!("{p}.self"), t, t, cfg.n_heads)?;
        let r = tape.add(t, sa.out)?;
        t = layer_norm_named(tape, bound, &format!("{p}.norm1"), r)?;
        let ca = multi_head_attention(tape, bound, &format!("{p}.cross"), t, kv, cfg.n_heads)?;
        let r = tape.add(t, ca.out)?;
        t = layer_norm_named(tape, bound, &format!("{p}.norm2"), r)?;
        let hsz = project(tape, bound, &format!("{p}.ffn.lin1"), t)?;
        let hsz = tape.relu(hsz);
        let ff = project(tape, bound, &format!("{p}.ffn.lin2"), hsz)?;
        let r = tape.add(t, ff)?;
        t = layer_norm_named(tape, bound, &format!("{p}.norm3"), r)?;
    }
    Ok(t)
}

/// Dot product of the [1,C] mask embedding with every pixel embedding of the
/// [C,h,w] enriched features, then a sigmoid: a [1,h,w] probability map.
pub fn predict_mask<F: Scalar>(tape: &mut Tape<F>, q: Var, feat: Var) -> Result<Var> {
    let (qs, fs) = (tape.value(q).shape().to_vec(), tape.value(feat).shape().to_vec());
    if qs.len() != 2 || qs[0] != 1 || fs.len() != 3 || fs[0] != qs[1] {
        return Err(Error::ShapeMismatch {
            op: "predict_mask",
            lhs: qs,
            rhs: fs,
        });
    }
    let (c, h, w) = (fs[0], fs[1], fs[2]);
    let flat = tape.reshape(feat, vec![c, h * w])?;
    let logits = tape.matmul(q, flat)?;
    let logits = tape.reshape(logits, vec![1, h, w])?;
    Ok(tape.sigmoid(logits))
}
