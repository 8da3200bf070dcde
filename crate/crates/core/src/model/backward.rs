//! Reverse-mode gradients of the mean next-token NLL.

use super::forward::{check_inputs, forward_prefix, sigmoid, ForwardCache, LayerCache};
use super::{LayerParams, ModelConfig, ModelError, ModelParams};
use crate::codec::TokenizedPacket;
use crate::embedding::EmbeddingTables;
use crate::scalar::Scalar;
use crate::tensor::{axpy, dot, log_sum_exp, softmax_in_place, Matrix};

/// Loss and parameter gradients, mirroring [`ModelParams`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub loss: T,
    pub grads: ModelParams<T>,
}

/// Mean NLL over supervised rows of `logits` and its gradient.
pub(crate) fn nll_with_grad<T: Scalar>(logits: &Matrix<T>, tp: &TokenizedPacket) -> Result<(T, Matrix<T>), ModelError> {
    let n = logits.rows();
    let targets: Vec<usize> = (0..n).filter(|&t| t + 1 < tp.len() && tp.loss_mask[t + 1]).collect();
    if targets.is_empty() {
        return Err(ModelError::EmptyMask);
    }
    let inv_count = T::one() / T::of(targets.len() as f64);
    let mut loss = T::zero();
    let mut d = Matrix::zeros(n, logits.cols());
    for &t in &targets {
        let row = logits.row(t);
        let target = tp.token_ids[t + 1];
        loss += log_sum_exp(row) - row[target];
        let drow = d.row_mut(t);
        drow.copy_from_slice(row);
        softmax_in_place(drow);
        drow[target] -= T::one();
        drow.iter_mut().for_each(|x| *x *= inv_count);
    }
    Ok((loss * inv_count, d))
}

fn rms_norm_backward<T: Scalar>(x: &Matrix<T>, inv_rms: &[T], gain: &[T], dy: &Matrix<T>, d_gain: &mut [T]) -> Matrix<T> {
    let d = x.cols();
    let inv_d = T::one() / T::of(d as f64);
    let mut dx = Matrix::zeros(x.rows(), d);
    let mut xn = vec![T::zero(); d];
    let mut dxn = vec![T::zero(); d];
    for r in 0..x.rows() {
        let ri = inv_rms[r];
        let dyr = dy.row(r);
        for c in 0..d {
            xn[c] = x.get(r, c) * ri;
            dxn[c] = dyr[c] * gain[c];
            d_gain[c] += dyr[c] * xn[c];
        }
        let m = dot(&dxn, &xn) * inv_d;
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = ri * (dxn[c] - xn[c] * m);
        }
    }
    dx
}

fn attention_backward<T: Scalar>(cache: &LayerCache<T>, d_ctx: &Matrix<T>, n_heads: usize) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let (n, d) = cache.q.shape();
    let dh = d / n_heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    let mut da = vec![T::zero(); n];
    for (h, p) in cache.probs.iter().enumerate() {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let dci = &d_ctx.row(i)[cols.clone()];
            let mut weighted = T::zero();
            for j in 0..=i {
                da[j] = dot(dci, &cache.v.row(j)[cols.clone()]);
                weighted += p.get(i, j) * da[j];
                axpy(p.get(i, j), dci, &mut dv.row_mut(j)[cols.clone()]);
            }
            for j in 0..=i {
                let ds = p.get(i, j) * (da[j] - weighted) * scale;
                axpy(ds, &cache.k.row(j)[cols.clone()], &mut dq.row_mut(i)[cols.clone()]);
                axpy(ds, &cache.q.row(i)[cols.clone()], &mut dk.row_mut(j)[cols.clone()]);
            }
        }
    }
    (dq, dk, dv)
}

fn layer_backward<T: Scalar>(lp: &LayerParams<T>, cache: &LayerCache<T>, dx_out: Matrix<T>, g: &mut LayerParams<T>, n_heads: usize) -> Matrix<T> {
    // feed-forward branch
    cache.act.t_matmul_acc(&dx_out, &mut g.w_down);
    let d_act = dx_out.matmul_t(&lp.w_down);
    let mut d_gate = Matrix::zeros(d_act.rows(), d_act.cols());
    let mut d_up = Matrix::zeros(d_act.rows(), d_act.cols());
    for i in 0..d_act.as_slice().len() {
        let z = cache.gate.as_slice()[i];
        let u = cache.up.as_slice()[i];
        let da = d_act.as_slice()[i];
        let s = sigmoid(z);
        d_up.as_mut_slice()[i] = da * z * s;
        d_gate.as_mut_slice()[i] = da * u * s * (T::one() + z * (T::one() - s));
    }
    cache.h_ffn.t_matmul_acc(&d_gate, &mut g.w_gate);
    cache.h_ffn.t_matmul_acc(&d_up, &mut g.w_up);
    let mut d_h_ffn = d_gate.matmul_t(&lp.w_gate);
    d_h_ffn.add_assign(&d_up.matmul_t(&lp.w_up));
    let mut dx_mid = dx_out;
    dx_mid.add_assign(&rms_norm_backward(&cache.x_mid, &cache.inv_rms_ffn, &lp.ffn_norm, &d_h_ffn, &mut g.ffn_norm));

    // attention branch
    cache.ctx.t_matmul_acc(&dx_mid, &mut g.wo);
    let d_ctx = dx_mid.matmul_t(&lp.wo);
    let (dq, dk, dv) = attention_backward(cache, &d_ctx, n_heads);
    cache.h_attn.t_matmul_acc(&dq, &mut g.wq);
    cache.h_attn.t_matmul_acc(&dk, &mut g.wk);
    cache.h_attn.t_matmul_acc(&dv, &mut g.wv);
    let mut d_h = dq.matmul_t(&lp.wq);
    d_h.add_assign(&dk.matmul_t(&lp.wk));
    d_h.add_assign(&dv.matmul_t(&lp.wv));
    let mut dx_in = dx_mid;
    dx_in.add_assign(&rms_norm_backward(&cache.x_in, &cache.inv_rms_attn, &lp.attn_norm, &d_h, &mut g.attn_norm));
    dx_in
}

/// Adds the gradient of the loss whose logit-gradient is `d_logits` into `grads`.
pub(crate) fn backward<T: Scalar>(tp: &TokenizedPacket, params: &ModelParams<T>, cfg: &ModelConfig, cache: &ForwardCache<T>, d_logits: &Matrix<T>, grads: &mut ModelParams<T>) {
    cache.h_final.t_matmul_acc(d_logits, &mut grads.w_out);
    let d_h_final = d_logits.matmul_t(&params.w_out);
    let mut dx = rms_norm_backward(&cache.x_final, &cache.inv_rms_final, &params.final_norm, &d_h_final, &mut grads.final_norm);
    for ((lp, lc), lg) in params.layers.iter().zip(&cache.layers).zip(grads.layers.iter_mut()).rev() {
        dx = layer_backward(lp, lc, dx, lg, cfg.n_heads);
    }
    EmbeddingTables::accumulate_grad(tp, &dx, &mut grads.embed);
}

fn accumulate<T: Scalar>(tp: &TokenizedPacket, params: &ModelParams<T>, cfg: &ModelConfig, grads: &mut ModelParams<T>) -> Result<T, ModelError> {
    check_inputs(tp, params, cfg)?;
    // Nothing after the last supervised prediction can influence the loss.
    let n = tp.supervised_prefix();
    if n == 0 {
        return Err(ModelError::EmptyMask);
    }
    let cache = forward_prefix(tp, params, cfg, n)?;
    let (loss, d_logits) = nll_with_grad(&cache.logits, tp)?;
    backward(tp, params, cfg, &cache, &d_logits, grads);
    Ok(loss)
}

/// Exact gradient of `sequence_nll` for one packet.
pub fn gradients<T: Scalar>(tp: &TokenizedPacket, params: &ModelParams<T>, cfg: &ModelConfig) -> Result<Gradients<T>, ModelError> {
    let mut grads = ModelParams::zeros(cfg);
    let loss = accumulate(tp, params, cfg, &mut grads)?;
    Ok(Gradients { loss, grads })
}

/// Mean loss and mean gradient over a batch, accumulated in batch order.
pub fn batch_gradients<T: Scalar>(batch: &[&TokenizedPacket], params: &ModelParams<T>, cfg: &ModelConfig) -> Result<Gradients<T>, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyMask);
    }
    let mut grads = ModelParams::zeros(cfg);
    let mut loss = T::zero();
    for tp in batch {
        loss += accumulate(tp, params, cfg, &mut grads)?;
    }
    let inv = T::one() / T::of(batch.len() as f64);
    grads.scale(inv);
    Ok(Gradients { loss: loss * inv, grads })
}
