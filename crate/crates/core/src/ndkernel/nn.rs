use std::cmp::Ordering;
use std::sync::Arc;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::{KernelError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Projection weights of a multi-head attention block (`d x d` each, no biases).
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// `1 x d`.
    pub out: Var,
    /// Per-head weights over the key rows, in the caller's row order.
    pub weights: Vec<Vec<f64>>,
}

/// Row order that sorts `(key, value)` pairs by their bit patterns.
///
/// Evaluating attention in this order makes the result independent of how the
/// caller listed the rows, down to the last bit.
pub(crate) fn canonical_order(keys: &Tensor, values: &Tensor) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.rows()).collect();
    let cmp_rows = |a: &[f64], b: &[f64]| -> Ordering {
        a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
    };
    order.sort_by(|&i, &j| {
        cmp_rows(keys.row_slice(i), keys.row_slice(j)).then_with(|| cmp_rows(values.row_slice(i), values.row_slice(j)))
    });
    order
}

/// Scaled dot-product attention of one query row over `L` key/value rows.
pub fn attention(
    tape: &mut Tape,
    query: Var,
    keys: Var,
    values: Var,
    heads: usize,
    p: &AttentionParams,
) -> Result<AttentionOutput> {
    let (kt, vt) = (tape.value(keys), tape.value(values));
    let l = kt.rows();
    if l == 0 || kt.is_empty() {
        return Err(KernelError::EmptyKeys);
    }
    if kt.shape() != vt.shape() {
        return Err(KernelError::Shape { op: "attention", left: kt.shape().to_vec(), right: vt.shape().to_vec() });
    }
    let d = tape.value(query).cols();
    if heads == 0 || d % heads != 0 || kt.cols() != d {
        return Err(KernelError::Invalid { op: "attention", detail: format!("d={d} heads={heads} key width={}", kt.cols()) });
    }
    let order = canonical_order(kt, vt);
    let (keys, values) = if order.iter().enumerate().all(|(k, &i)| k == i) {
        (keys, values)
    } else {
        let idx = Arc::new(order.clone());
        (tape.gather_rows(keys, Arc::clone(&idx))?, tape.gather_rows(values, idx)?)
    };
    let dh = d / heads;
    let q = tape.matmul(query, p.wq)?;
    let k = tape.matmul(keys, p.wk)?;
    let v = tape.matmul(values, p.wv)?;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let s = tape.matmul_bt(qh, kh)?;
        let s = tape.scale(s, 1.0 / (dh as f64).sqrt())?;
        let w = tape.softmax(s, 1)?;
        let mut orig = vec![0.0; l];
        for (k, &i) in order.iter().enumerate() {
            orig[i] = tape.value(w).data()[k];
        }
        weights.push(orig);
        outs.push(tape.matmul(w, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let out = tape.matmul(cat, p.wo)?;
    Ok(AttentionOutput { out, weights })
}

/// `x w + b` with `b` a `1 x n` row.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Pre-norm block: causal self-attention then a GELU feed-forward, each with a residual.
#[derive(Clone, Copy, Debug)]
pub struct TransformerLayer {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub attn: AttentionParams,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Debug)]
pub struct TransformerParams {
    /// `max_len x d` learned positions.
    pub pos: Var,
    pub layers: Vec<TransformerLayer>,
    pub lnf_g: Var,
    pub lnf_b: Var,
    pub heads: usize,
}

fn causal_self_attention(tape: &mut Tape, x: Var, heads: usize, p: &AttentionParams) -> Result<Var> {
    let d = tape.value(x).cols();
    if heads == 0 || d % heads != 0 {
        return Err(KernelError::Invalid { op: "self_attention", detail: format!("d={d} heads={heads}") });
    }
    let dh = d / heads;
    let q = tape.matmul(x, p.wq)?;
    let k = tape.matmul(x, p.wk)?;
    let v = tape.matmul(x, p.wv)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let s = tape.matmul_bt(qh, kh)?;
        let s = tape.scale(s, 1.0 / (dh as f64).sqrt())?;
        let a = tape.causal_softmax(s)?;
        outs.push(tape.matmul(a, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    tape.matmul(cat, p.wo)
}

/// Adds positions to `seq` (`L x d`) and runs the stacked causal blocks plus a final norm.
pub fn causal_transformer(tape: &mut Tape, seq: Var, p: &TransformerParams) -> Result<Var> {
    let l = tape.value(seq).rows();
    let max = tape.value(p.pos).rows();
    if l == 0 {
        return Err(KernelError::EmptyKeys);
    }
    if l > max {
        return Err(KernelError::SequenceTooLong { len: l, max });
    }
    let pos = tape.slice_rows(p.pos, 0, l)?;
    let mut h = tape.add(seq, pos)?;
    for layer in &p.layers {
        let n = tape.layer_norm(h, layer.ln1_g, layer.ln1_b, LAYER_NORM_EPS)?;
        let a = causal_self_attention(tape, n, p.heads, &layer.attn)?;
        h = tape.add(h, a)?;
        let n = tape.layer_norm(h, layer.ln2_g, layer.ln2_b, LAYER_NORM_EPS)?;
        let f = linear(tape, n, layer.w1, layer.b1)?;
        let f = tape.gelu(f)?;
        let f = linear(tape, f, layer.w2, layer.b2)?;
        h = tape.add(h, f)?;
    }
    tape.layer_norm(h, p.lnf_g, p.lnf_b, LAYER_NORM_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_params(tape: &mut Tape, d: usize) -> AttentionParams {
        let mut eye = || tape.constant(Tensor::eye(d));
        AttentionParams { wq: eye(), wk: eye(), wv: eye(), wo: eye() }
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut tape = Tape::new();
        let p = identity_params(&mut tape, 2);
        let q = tape.constant(Tensor::row(vec![3.0, -7.0]));
        let k = tape.constant(Tensor::row(vec![0.5, 0.25]));
        let v = tape.constant(Tensor::row(vec![1.5, -2.5]));
        let out = attention(&mut tape, q, k, v, 1, &p).unwrap();
        assert_eq!(tape.value(out.out).data(), &[1.5, -2.5]);
        assert_eq!(out.weights, vec![vec![1.0]]);
    }

    #[test]
    fn hand_evaluated_two_keys() {
        let mut tape = Tape::new();
        let p = identity_params(&mut tape, 2);
        let q = tape.constant(Tensor::row(vec![1.0, 0.0]));
        let kv = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let k = tape.constant(kv.clone());
        let v = tape.constant(kv);
        let out = attention(&mut tape, q, k, v, 1, &p).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let w0 = s.exp() / (s.exp() + 1.0);
        assert!((out.weights[0][0] - w0).abs() < 1e-15);
        let o = tape.value(out.out).data();
        assert!((o[0] - w0).abs() < 1e-15 && (o[1] - (1.0 - w0)).abs() < 1e-15);
    }

    #[test]
    fn empty_keys_error() {
        let mut tape = Tape::new();
        let p = identity_params(&mut tape, 2);
        let q = tape.constant(Tensor::row(vec![1.0, 0.0]));
        let k = tape.constant(Tensor::zeros(vec![0, 2]));
        assert!(matches!(attention(&mut tape, q, k, k, 1, &p), Err(KernelError::EmptyKeys)));
    }
}
