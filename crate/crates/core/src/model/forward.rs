use super::{ModelConfig, ModelError, ModelParams, RMS_EPS};
use crate::codec::TokenizedPacket;
use crate::scalar::Scalar;
use crate::tensor::{axpy, dot, Matrix};

/// Output of a full-length forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    /// L×V next-token logits.
    pub logits: Matrix<T>,
    /// `attention[layer][head]` is an L×L row-stochastic, lower-triangular
    /// matrix. Empty unless capture was requested.
    pub attention: Vec<Vec<Matrix<T>>>,
}

pub(crate) struct LayerCache<T> {
    pub x_in: Matrix<T>,
    pub inv_rms_attn: Vec<T>,
    pub h_attn: Matrix<T>,
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    /// Per-head n×n attention probabilities.
    pub probs: Vec<Matrix<T>>,
    pub ctx: Matrix<T>,
    pub x_mid: Matrix<T>,
    pub inv_rms_ffn: Vec<T>,
    pub h_ffn: Matrix<T>,
    pub gate: Matrix<T>,
    pub up: Matrix<T>,
    pub act: Matrix<T>,
}

pub(crate) struct ForwardCache<T> {
    pub layers: Vec<LayerCache<T>>,
    pub x_final: Matrix<T>,
    pub inv_rms_final: Vec<T>,
    pub h_final: Matrix<T>,
    pub logits: Matrix<T>,
}

pub(crate) fn rms_norm<T: Scalar>(x: &Matrix<T>, gain: &[T]) -> (Matrix<T>, Vec<T>) {
    let d = x.cols();
    let eps = T::of(RMS_EPS);
    let inv_d = T::one() / T::of(d as f64);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let r_inv = T::one() / (dot(row, row) * inv_d + eps).sqrt();
        for ((o, &xv), &g) in out.row_mut(r).iter_mut().zip(row).zip(gain) {
            *o = xv * r_inv * g;
        }
        inv.push(r_inv);
    }
    (out, inv)
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// Causal multi-head attention on already-projected q, k, v (n×d each).
fn causal_attention<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, n_heads: usize) -> (Vec<Matrix<T>>, Matrix<T>) {
    let n = q.rows();
    let d = q.cols();
    let dh = d / n_heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut probs = Vec::with_capacity(n_heads);
    let mut ctx = Matrix::zeros(n, d);
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let mut p = Matrix::zeros(n, n);
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            let row = &mut p.row_mut(i)[..=i];
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(qi, &k.row(j)[cols.clone()]) * scale;
            }
            crate::tensor::softmax_in_place(row);
            let out = &mut ctx.row_mut(i)[cols.clone()];
            for j in 0..=i {
                axpy(p.get(i, j), &v.row(j)[cols.clone()], out);
            }
        }
        probs.push(p);
    }
    (probs, ctx)
}

pub(crate) fn check_inputs<T: Scalar>(tp: &TokenizedPacket, params: &ModelParams<T>, cfg: &ModelConfig) -> Result<(), ModelError> {
    if tp.token_ids.len() != cfg.seq_len || tp.numeric_pos.len() != cfg.seq_len || tp.field_pos.len() != cfg.seq_len || tp.loss_mask.len() != cfg.seq_len {
        return Err(ModelError::ShapeMismatch(format!(
            "packet has {} positions, model expects {}",
            tp.token_ids.len(),
            cfg.seq_len
        )));
    }
    if params.layers.len() != cfg.n_layers
        || params.embed.word.shape() != (cfg.vocab_size, cfg.emb_size)
        || params.embed.numeric_pos.rows() != cfg.max_numeric_len
        || params.embed.field_pos.rows() != cfg.seq_len
        || params.w_out.shape() != (cfg.emb_size, cfg.vocab_size)
    {
        return Err(ModelError::ShapeMismatch("parameters do not match the model config".into()));
    }
    Ok(())
}

/// Runs the decoder over the first `n` positions. Row `t` of every
/// intermediate depends only on positions `<= t`.
pub(crate) fn forward_prefix<T: Scalar>(tp: &TokenizedPacket, params: &ModelParams<T>, cfg: &ModelConfig, n: usize) -> Result<ForwardCache<T>, ModelError> {
    let mut x = params.embed.embed_prefix(tp, n)?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lp in &params.layers {
        let (h_attn, inv_rms_attn) = rms_norm(&x, &lp.attn_norm);
        let q = h_attn.matmul(&lp.wq);
        let k = h_attn.matmul(&lp.wk);
        let v = h_attn.matmul(&lp.wv);
        let (probs, ctx) = causal_attention(&q, &k, &v, cfg.n_heads);
        let mut x_mid = ctx.matmul(&lp.wo);
        x_mid.add_assign(&x);

        let (h_ffn, inv_rms_ffn) = rms_norm(&x_mid, &lp.ffn_norm);
        let gate = h_ffn.matmul(&lp.w_gate);
        let up = h_ffn.matmul(&lp.w_up);
        let mut act = Matrix::zeros(n, gate.cols());
        for ((a, &g), &u) in act.as_mut_slice().iter_mut().zip(gate.as_slice()).zip(up.as_slice()) {
            *a = g * sigmoid(g) * u;
        }
        let mut x_out = act.matmul(&lp.w_down);
        x_out.add_assign(&x_mid);

        layers.push(LayerCache {
            x_in: std::mem::replace(&mut x, x_out),
            inv_rms_attn,
            h_attn,
            q,
            k,
            v,
            probs,
            ctx,
            x_mid,
            inv_rms_ffn,
            h_ffn,
            gate,
            up,
            act,
        });
    }
    let (h_final, inv_rms_final) = rms_norm(&x, &params.final_norm);
    let logits = h_final.matmul(&params.w_out);
    Ok(ForwardCache {
        layers,
        x_final: x,
        inv_rms_final,
        h_final,
        logits,
    })
}

/// Full-length forward pass.
pub fn forward<T: Scalar>(tp: &TokenizedPacket, params: &ModelParams<T>, cfg: &ModelConfig, capture_attention: bool) -> Result<ForwardTrace<T>, ModelError> {
    check_inputs(tp, params, cfg)?;
    let cache = forward_prefix(tp, params, cfg, cfg.seq_len)?;
    let attention = if capture_attention {
        cache.layers.into_iter().map(|l| l.probs).collect()
    } else {
        Vec::new()
    };
    Ok(ForwardTrace {
        logits: cache.logits,
        attention,
    })
}
