//! Word + numeric-position + field-position embeddings.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::codec::TokenizedPacket;
use crate::scalar::Scalar;
use crate::tensor::{add_into, Matrix};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{table} index {index} out of range (rows = {rows}) at position {position}")]
pub struct IndexOutOfRange {
    pub table: &'static str,
    pub index: usize,
    pub rows: usize,
    pub position: usize,
}

/// The three lookup tables: `word` is V×d, `numeric_pos` is M×d and
/// `field_pos` is L×d.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTables<T> {
    pub word: Matrix<T>,
    pub numeric_pos: Matrix<T>,
    pub field_pos: Matrix<T>,
}

impl<T: Scalar> EmbeddingTables<T> {
    pub fn zeros(vocab: usize, max_numeric_len: usize, seq_len: usize, dim: usize) -> Self {
        Self {
            word: Matrix::zeros(vocab, dim),
            numeric_pos: Matrix::zeros(max_numeric_len, dim),
            field_pos: Matrix::zeros(seq_len, dim),
        }
    }

    /// N(0, 0.02²) entries.
    pub fn init<R: Rng>(vocab: usize, max_numeric_len: usize, seq_len: usize, dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut sample = |rows, cols| Matrix::from_fn(rows, cols, |_, _| T::of(normal.sample(rng)));
        Self {
            word: sample(vocab, dim),
            numeric_pos: sample(max_numeric_len, dim),
            field_pos: sample(seq_len, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.word.cols()
    }

    fn check(&self, tp: &TokenizedPacket, n: usize) -> Result<(), IndexOutOfRange> {
        for t in 0..n {
            let oob = |table, index, rows| IndexOutOfRange {
                table,
                index,
                rows,
                position: t,
            };
            if tp.token_ids[t] >= self.word.rows() {
                return Err(oob("word", tp.token_ids[t], self.word.rows()));
            }
            if let Some(p) = tp.numeric_pos[t] {
                if p >= self.numeric_pos.rows() {
                    return Err(oob("numeric_pos", p, self.numeric_pos.rows()));
                }
            }
            if tp.field_pos[t] >= self.field_pos.rows() {
                return Err(oob("field_pos", tp.field_pos[t], self.field_pos.rows()));
            }
        }
        Ok(())
    }

    /// Embeds the first `n` positions of `tp`.
    pub fn embed_prefix(&self, tp: &TokenizedPacket, n: usize) -> Result<Matrix<T>, IndexOutOfRange> {
        self.check(tp, n)?;
        let mut out = Matrix::zeros(n, self.dim());
        for t in 0..n {
            let row = out.row_mut(t);
            row.copy_from_slice(self.word.row(tp.token_ids[t]));
            // numeric_pos == None contributes the zero vector
            if let Some(p) = tp.numeric_pos[t] {
                add_into(row, self.numeric_pos.row(p));
            }
            add_into(row, self.field_pos.row(tp.field_pos[t]));
        }
        Ok(out)
    }

    /// Scatters the gradient of the embedded rows back into `grads`.
    pub fn accumulate_grad(tp: &TokenizedPacket, d_embedded: &Matrix<T>, grads: &mut EmbeddingTables<T>) {
        for t in 0..d_embedded.rows() {
            let g = d_embedded.row(t);
            add_into(grads.word.row_mut(tp.token_ids[t]), g);
            if let Some(p) = tp.numeric_pos[t] {
                add_into(grads.numeric_pos.row_mut(p), g);
            }
            add_into(grads.field_pos.row_mut(tp.field_pos[t]), g);
        }
    }
}

/// Full-length embedding, one row per sequence position.
pub fn embed_sequence<T: Scalar>(tp: &TokenizedPacket, tables: &EmbeddingTables<T>) -> Result<Matrix<T>, IndexOutOfRange> {
    tables.embed_prefix(tp, tp.len())
}
