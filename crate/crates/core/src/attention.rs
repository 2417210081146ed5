//! Attention machinery: QKV projection, scaled dot-product attention,
//! multi-head attention, sinusoidal positions, the two-layer FFN, and the
//! residual self-/cross-attention blocks the fusion network stacks.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};
use rand::Rng;

/// Multi-head attention dimensions. `d_k = d_v = d_model / n_heads` exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MhaConfig {
    pub n_heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
}

impl MhaConfig {
    pub fn new(d_model: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} must be a positive multiple of n_heads {n_heads}"
            )));
        }
        let d_k = d_model / n_heads;
        Ok(MhaConfig {
            n_heads,
            d_model,
            d_k,
            d_v: d_k,
        })
    }

    /// Full-scale setting: n_h = 8, d = 512, d_k = d_v = 64.
    pub fn paper() -> Self {
        Self::new(512, 8).unwrap()
    }

    /// Desk-scale setting: n_h = 4, d = 32, d_k = d_v = 8.
    pub fn toy() -> Self {
        Self::new(32, 4).unwrap()
    }
}

/// Projection weights for one multi-head attention module. Per-head matrices
/// are stored stacked: `wq, wk: [d, n_h*d_k]`, `wv: [d, n_h*d_v]`,
/// `wo: [n_h*d_v, d]`.
#[derive(Debug, Clone)]
pub struct MhaWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl MhaWeights {
    pub fn init<R: Rng>(cfg: &MhaConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let dk = cfg.n_heads * cfg.d_k;
        let dv = cfg.n_heads * cfg.d_v;
        MhaWeights {
            wq: Tensor::glorot(&[d, dk], d, dk, rng),
            wk: Tensor::glorot(&[d, dk], d, dk, rng),
            wv: Tensor::glorot(&[d, dv], d, dv, rng),
            wo: Tensor::glorot(&[dv, d], dv, d, rng),
        }
    }

    pub fn zeros(cfg: &MhaConfig) -> Self {
        let d = cfg.d_model;
        MhaWeights {
            wq: Tensor::zeros(&[d, cfg.n_heads * cfg.d_k]),
            wk: Tensor::zeros(&[d, cfg.n_heads * cfg.d_k]),
            wv: Tensor::zeros(&[d, cfg.n_heads * cfg.d_v]),
            wo: Tensor::zeros(&[cfg.n_heads * cfg.d_v, d]),
        }
    }

    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> MhaIds {
        MhaIds {
            wq: stage_one(tape, &self.wq, trainable),
            wk: stage_one(tape, &self.wk, trainable),
            wv: stage_one(tape, &self.wv, trainable),
            wo: stage_one(tape, &self.wo, trainable),
        }
    }
}

/// Two-layer feed-forward weights: `w1: [d_in, d_hidden]`, `w2: [d_hidden, d_out]`.
#[derive(Debug, Clone)]
pub struct FfnWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FfnWeights {
    pub fn init<R: Rng>(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut R) -> Self {
        FfnWeights {
            w1: Tensor::glorot(&[d_in, d_hidden], d_in, d_hidden, rng),
            b1: Tensor::zeros(&[d_hidden]),
            w2: Tensor::glorot(&[d_hidden, d_out], d_hidden, d_out, rng),
            b2: Tensor::zeros(&[d_out]),
        }
    }

    pub fn zeros(d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        FfnWeights {
            w1: Tensor::zeros(&[d_in, d_hidden]),
            b1: Tensor::zeros(&[d_hidden]),
            w2: Tensor::zeros(&[d_hidden, d_out]),
            b2: Tensor::zeros(&[d_out]),
        }
    }

    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> FfnIds {
        FfnIds {
            w1: stage_one(tape, &self.w1, trainable),
            b1: stage_one(tape, &self.b1, trainable),
            w2: stage_one(tape, &self.w2, trainable),
            b2: stage_one(tape, &self.b2, trainable),
        }
    }
}

/// One self-attention block: MHA weights plus its residual FFN.
#[derive(Debug, Clone)]
pub struct MsaParams {
    pub mha: MhaWeights,
    pub ffn: FfnWeights,
}

impl MsaParams {
    pub fn init<R: Rng>(cfg: &MhaConfig, d_ff: usize, rng: &mut R) -> Self {
        MsaParams {
            mha: MhaWeights::init(cfg, rng),
            ffn: FfnWeights::init(cfg.d_model, d_ff, cfg.d_model, rng),
        }
    }

    pub fn zeros(cfg: &MhaConfig, d_ff: usize) -> Self {
        MsaParams {
            mha: MhaWeights::zeros(cfg),
            ffn: FfnWeights::zeros(cfg.d_model, d_ff, cfg.d_model),
        }
    }

    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> MsaIds {
        MsaIds {
            mha: self.mha.stage(tape, trainable),
            ffn: self.ffn.stage(tape, trainable),
        }
    }
}

/// One cross-attention block pair: the visual-updating and tactile-updating
/// attention modules, each with its own residual FFN.
#[derive(Debug, Clone)]
pub struct McaParams {
    pub mha_v: MhaWeights,
    pub ffn_v: FfnWeights,
    pub mha_h: MhaWeights,
    pub ffn_h: FfnWeights,
}

impl McaParams {
    pub fn init<R: Rng>(cfg: &MhaConfig, d_ff: usize, rng: &mut R) -> Self {
        McaParams {
            mha_v: MhaWeights::init(cfg, rng),
            ffn_v: FfnWeights::init(cfg.d_model, d_ff, cfg.d_model, rng),
            mha_h: MhaWeights::init(cfg, rng),
            ffn_h: FfnWeights::init(cfg.d_model, d_ff, cfg.d_model, rng),
        }
    }

    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> McaIds {
        McaIds {
            mha_v: self.mha_v.stage(tape, trainable),
            ffn_v: self.ffn_v.stage(tape, trainable),
            mha_h: self.mha_h.stage(tape, trainable),
            ffn_h: self.ffn_h.stage(tape, trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MhaIds {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnIds {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

#[derive(Debug, Clone, Copy)]
pub struct MsaIds {
    pub mha: MhaIds,
    pub ffn: FfnIds,
}

#[derive(Debug, Clone, Copy)]
pub struct McaIds {
    pub mha_v: MhaIds,
    pub ffn_v: FfnIds,
    pub mha_h: MhaIds,
    pub ffn_h: FfnIds,
}

fn stage_one(tape: &mut Tape, t: &Tensor, trainable: bool) -> TensorId {
    let mut t = t.clone();
    t.requires_grad = trainable;
    t.grad = None;
    tape.leaf(t)
}

/// Sinusoidal positions: `P[pos, 2i] = sin(pos / 10000^(2i/d))`,
/// `P[pos, 2i+1] = cos(pos / 10000^(2i/d))`. Requires even `d`.
pub fn sinusoidal_positions(seq_len: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs even width, got {d}"
        )));
    }
    let mut data = vec![0.0; seq_len * d];
    for pos in 0..seq_len {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + 2 * i] = angle.sin();
            data[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::from_vec(vec![seq_len, d], data)
}

/// Project a sequence through the stacked Q/K/V matrices.
pub fn project_qkv(
    tape: &mut Tape,
    x: TensorId,
    w: &MhaIds,
) -> Result<(TensorId, TensorId, TensorId)> {
    let q = tape.matmul(x, w.wq)?;
    let k = tape.matmul(x, w.wk)?;
    let v = tape.matmul(x, w.wv)?;
    Ok((q, k, v))
}

/// softmax(Q K^T / sqrt(d_k)) V.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
) -> Result<TensorId> {
    let (out, _) = scaled_dot_attention_with_weights(tape, q, k, v)?;
    Ok(out)
}

/// Like [`scaled_dot_attention`] but also returns the post-softmax weights
/// (a row-stochastic `[S_q, S_k]` matrix).
pub fn scaled_dot_attention_with_weights(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
) -> Result<(TensorId, TensorId)> {
    let (sq, sk, sv) = (tape.shape(q), tape.shape(k), tape.shape(v));
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention (q vs k)",
            lhs: sq.to_vec(),
            rhs: sk.to_vec(),
        });
    }
    if sv.len() != 2 || sv[0] != sk[0] {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention (k vs v)",
            lhs: sk.to_vec(),
            rhs: sv.to_vec(),
        });
    }
    let d_k = sq[1] as f64;
    let kt = tape.transpose2d(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.mul_scalar(scores, 1.0 / d_k.sqrt())?;
    let attn = tape.softmax(scaled, 1)?;
    let out = tape.matmul(attn, v)?;
    Ok((out, attn))
}

/// Multi-head attention: per-head scaled dot-product attention on projected
/// slices, concatenated over heads, then multiplied by W^O.
pub fn multi_head_attention(
    tape: &mut Tape,
    q_in: TensorId,
    k_in: TensorId,
    v_in: TensorId,
    w: &MhaIds,
    cfg: &MhaConfig,
) -> Result<TensorId> {
    for id in [q_in, k_in, v_in] {
        let s = tape.shape(id);
        if s.len() != 2 || s[1] != cfg.d_model {
            return Err(Error::ShapeMismatch {
                op: "multi_head_attention",
                lhs: s.to_vec(),
                rhs: vec![0, cfg.d_model],
            });
        }
    }
    let q = tape.matmul(q_in, w.wq)?;
    let k = tape.matmul(k_in, w.wk)?;
    let v = tape.matmul(v_in, w.wv)?;

    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = tape.slice_cols(q, h * cfg.d_k, cfg.d_k)?;
        let kh = tape.slice_cols(k, h * cfg.d_k, cfg.d_k)?;
        let vh = tape.slice_cols(v, h * cfg.d_v, cfg.d_v)?;
        heads.push(scaled_dot_attention(tape, qh, kh, vh)?);
    }
    let cat = tape.concat(&heads, 1)?;
    tape.matmul(cat, w.wo)
}

/// FFN(X) = max(0, X W1 + b1) W2 + b2. No internal residual.
pub fn ffn(tape: &mut Tape, x: TensorId, w: &FfnIds) -> Result<TensorId> {
    let h = tape.matmul(x, w.w1)?;
    let h = tape.add_row_bias(h, w.b1)?;
    let h = tape.relu(h)?;
    let out = tape.matmul(h, w.w2)?;
    tape.add_row_bias(out, w.b2)
}

/// Residual self-attention block:
/// `x <- x + MHSA(x+P, x+P, x)` followed by `x <- x + FFN(x)`.
/// The value input deliberately carries no positional term.
pub fn msa_block(
    tape: &mut Tape,
    x: TensorId,
    pos: TensorId,
    params: &MsaIds,
    cfg: &MhaConfig,
) -> Result<TensorId> {
    if tape.shape(x) != tape.shape(pos) {
        return Err(Error::ShapeMismatch {
            op: "msa_block (x vs positions)",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(pos).to_vec(),
        });
    }
    let xp = tape.add(x, pos)?;
    let attn = multi_head_attention(tape, xp, xp, x, &params.mha, cfg)?;
    let x1 = tape.add(x, attn)?;
    let f = ffn(tape, x1, &params.ffn)?;
    tape.add(x1, f)
}

/// Residual cross-attention block pair, both streams updated from the
/// pre-update inputs:
/// `x_v <- x_v + MHSA(x_v+P_v, x_h+P_h, x_h)` and symmetrically for `x_h`,
/// each followed by its own residual FFN.
pub fn mca_block(
    tape: &mut Tape,
    x_v: TensorId,
    x_h: TensorId,
    pos_v: TensorId,
    pos_h: TensorId,
    params: &McaIds,
    cfg: &MhaConfig,
) -> Result<(TensorId, TensorId)> {
    let (sv, sh) = (tape.shape(x_v), tape.shape(x_h));
    if sv.len() != 2 || sh.len() != 2 || sv[1] != sh[1] {
        return Err(Error::ShapeMismatch {
            op: "mca_block",
            lhs: sv.to_vec(),
            rhs: sh.to_vec(),
        });
    }
    let xvp = tape.add(x_v, pos_v)?;
    let xhp = tape.add(x_h, pos_h)?;

    let attn_v = multi_head_attention(tape, xvp, xhp, x_h, &params.mha_v, cfg)?;
    let attn_h = multi_head_attention(tape, xhp, xvp, x_v, &params.mha_h, cfg)?;

    let v1 = tape.add(x_v, attn_v)?;
    let h1 = tape.add(x_h, attn_h)?;

    let fv = ffn(tape, v1, &params.ffn_v)?;
    let out_v = tape.add(v1, fv)?;
    let fh = ffn(tape, h1, &params.ffn_h)?;
    let out_h = tape.add(h1, fh)?;
    Ok((out_v, out_h))
}
