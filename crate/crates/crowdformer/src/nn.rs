//! Small composition helpers shared by the tokenizer and the main encoder.

use crate::tape::{Tape, Var};

/// x[n, in] * w[in, out] + b[out]
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row_vec(y, b)
}

pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
}

/// Multi-head self-attention over x[n, d_in], projecting to d_model and
/// splitting it into `heads` slices. Per-head logits are scaled by
/// 1/sqrt(d_model/heads). Returns the concatenated head outputs [n, d_model];
/// any output projection is up to the caller.
pub fn mhsa(tape: &mut Tape, x: Var, w: &AttentionWeights, heads: usize) -> Var {
    let q = linear(tape, x, w.wq, w.bq);
    let k = linear(tape, x, w.wk, w.bk);
    let v = linear(tape, x, w.wv, w.bv);
    let d_model = tape.value(q).shape()[1];
    assert_eq!(d_model % heads, 0, "d_model {d_model} not divisible by {heads} heads");
    let dh = d_model / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = None;
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi);
        let kh = tape.slice_cols(k, lo, hi);
        let vh = tape.slice_cols(v, lo, hi);
        let kt = tape.transpose(kh);
        let logits = tape.matmul(qh, kt);
        let logits = tape.scale(logits, scale);
        let attn = tape.softmax_rows(logits);
        let oh = tape.matmul(attn, vh);
        out = Some(match out {
            None => oh,
            Some(acc) => tape.concat_cols(acc, oh),
        });
    }
    out.unwrap()
}

/// Attention weights of a single token sequence position, for tests:
/// the row-stochastic matrix of the first head.
pub fn attention_matrix(tape: &mut Tape, x: Var, w: &AttentionWeights, heads: usize) -> Var {
    let q = linear(tape, x, w.wq, w.bq);
    let k = linear(tape, x, w.wk, w.bk);
    let d_model = tape.value(q).shape()[1];
    let dh = d_model / heads;
    let qh = tape.slice_cols(q, 0, dh);
    let kh = tape.slice_cols(k, 0, dh);
    let kt = tape.transpose(kh);
    let logits = tape.matmul(qh, kt);
    let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt());
    tape.softmax_rows(logits)
}
