use super::backward::nll_with_grad;
use super::forward::{check_inputs, forward_prefix, ForwardTrace};
use super::{ModelConfig, ModelError, ModelParams};
use crate::codec::{TokenizedPacket, Vocabulary};
use crate::scalar::Scalar;
use crate::tensor::{log_sum_exp, softmax_in_place};

/// Mean of `-log softmax(logits[t])[token[t + 1]]` over every `t` whose
/// successor is supervised (`loss_mask[t + 1]`), label included.
pub fn sequence_nll<T: Scalar>(trace: &ForwardTrace<T>, tp: &TokenizedPacket) -> Result<T, ModelError> {
    if trace.logits.rows() != tp.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "trace has {} rows, packet has {} positions",
            trace.logits.rows(),
            tp.len()
        )));
    }
    let mut loss = T::zero();
    let mut count = 0usize;
    for t in 0..tp.len().saturating_sub(1) {
        if tp.loss_mask[t + 1] {
            let row = trace.logits.row(t);
            loss += log_sum_exp(row) - row[tp.token_ids[t + 1]];
            count += 1;
        }
    }
    if count == 0 {
        return Err(ModelError::EmptyMask);
    }
    Ok(loss / T::of(count as f64))
}

/// Same value as [`sequence_nll`] without materializing the full trace.
pub fn packet_nll<T: Scalar>(tp: &TokenizedPacket, params: &ModelParams<T>, cfg: &ModelConfig) -> Result<T, ModelError> {
    check_inputs(tp, params, cfg)?;
    let n = tp.supervised_prefix();
    if n == 0 {
        return Err(ModelError::EmptyMask);
    }
    let cache = forward_prefix(tp, params, cfg, n)?;
    Ok(nll_with_grad(&cache.logits, tp)?.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub class: usize,
    /// Distribution over the K label tokens, renormalized.
    pub probs: Vec<T>,
}

/// Restricted argmax over the label tokens at the label slot.
/// Ties go to the lowest class id.
pub fn predict_label<T: Scalar>(tp: &TokenizedPacket, params: &ModelParams<T>, cfg: &ModelConfig, vocab: &Vocabulary) -> Result<Prediction<T>, ModelError> {
    check_inputs(tp, params, cfg)?;
    if tp.label_pos == 0 || tp.label_pos >= tp.len() {
        return Err(ModelError::ShapeMismatch(format!("label position {} is not predictable", tp.label_pos)));
    }
    let cache = forward_prefix(tp, params, cfg, tp.label_pos)?;
    Ok(restricted_prediction(cache.logits.row(tp.label_pos - 1), vocab))
}

/// Softmax restricted to the label tokens of one logits row.
pub fn restricted_prediction<T: Scalar>(logits_row: &[T], vocab: &Vocabulary) -> Prediction<T> {
    let mut probs = logits_row[vocab.label_base..vocab.label_base + vocab.label_count].to_vec();
    softmax_in_place(&mut probs);
    let mut class = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > probs[class] {
            class = k;
        }
    }
    Prediction { class, probs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    fn vocab() -> Vocabulary {
        Vocabulary::new(2, 4)
    }

    #[test]
    fn uniform_logits_pick_class_zero() {
        let v = vocab();
        let p = restricted_prediction(&vec![0.0f64; v.size], &v);
        assert_eq!(p.class, 0);
        for x in p.probs {
            assert!((x - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn dominant_label_logit_wins() {
        let v = vocab();
        let mut row = vec![0.0f64; v.size];
        row[v.label_base + 3] = 10.0;
        // large logits outside the label range are ignored
        row[0] = 50.0;
        let p = restricted_prediction(&row, &v);
        assert_eq!(p.class, 3);
        assert!(p.probs[3] > 0.9998);
    }

    #[test]
    fn shift_invariance() {
        let v = vocab();
        let row: Vec<f64> = (0..v.size).map(|i| ((i * 37) % 11) as f64 * 0.3).collect();
        let shifted: Vec<f64> = row.iter().map(|x| x + 123.5).collect();
        assert_eq!(restricted_prediction(&row, &v).class, restricted_prediction(&shifted, &v).class);
    }

    #[test]
    fn nll_of_three_token_toy_sequence() {
        // tokens [a, b, c], loss over predictions of b (from row 0) and c (from row 1)
        let tp = TokenizedPacket {
            token_ids: vec![0, 1, 2],
            numeric_pos: vec![None; 3],
            field_pos: vec![0, 1, 2],
            label_pos: 2,
            loss_mask: vec![true; 3],
        };
        let logits = Matrix::from_vec(3, 3, vec![1.0f64, 2.0, 0.0, 0.5, 0.5, 3.0, 9.0, 9.0, 9.0]);
        let trace = ForwardTrace {
            logits,
            attention: vec![],
        };
        // hand-computed: -ln(e^2/(e^1+e^2+e^0)) and -ln(e^3/(2e^0.5+e^3))
        let e = std::f64::consts::E;
        let l0 = -(e.powf(2.0) / (e + e * e + 1.0)).ln();
        let l1 = -(e.powf(3.0) / (2.0 * e.powf(0.5) + e.powf(3.0))).ln();
        let got = sequence_nll(&trace, &tp).unwrap();
        assert!((got - (l0 + l1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let tp = TokenizedPacket {
            token_ids: vec![3, 1, 2, 4],
            numeric_pos: vec![None; 4],
            field_pos: vec![0, 1, 2, 3],
            label_pos: 2,
            loss_mask: vec![true, true, true, false],
        };
        let trace = ForwardTrace {
            logits: Matrix::from_vec(4, 7, vec![0.25f64; 28]),
            attention: vec![],
        };
        assert!((sequence_nll(&trace, &tp).unwrap() - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_drive_nll_to_zero() {
        let tp = TokenizedPacket {
            token_ids: vec![0, 1, 2],
            numeric_pos: vec![None; 3],
            field_pos: vec![0, 1, 2],
            label_pos: 2,
            loss_mask: vec![true; 3],
        };
        let mut logits = Matrix::zeros(3, 3);
        logits.set(0, 1, 60.0);
        logits.set(1, 2, 60.0);
        let l = sequence_nll(&ForwardTrace { logits, attention: vec![] }, &tp).unwrap();
        assert!((0.0..1e-20).contains(&l));
    }

    #[test]
    fn empty_mask_is_an_error() {
        let tp = TokenizedPacket {
            token_ids: vec![0, 1],
            numeric_pos: vec![None; 2],
            field_pos: vec![0, 1],
            label_pos: 1,
            loss_mask: vec![true, false],
        };
        let trace = ForwardTrace {
            logits: Matrix::<f64>::zeros(2, 3),
            attention: vec![],
        };
        assert_eq!(sequence_nll(&trace, &tp), Err(ModelError::EmptyMask));
    }
}
