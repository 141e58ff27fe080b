//! Transformer building blocks shared by the encoders and the prompt generator.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{Bound, ParamSet};
use crate::tensor::{c, Mat, Real};

pub(crate) fn init_linear<T: Real, R: Rng + ?Sized>(
    set: &mut ParamSet<T>,
    path: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    set.insert(path, Mat::randn(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng));
}

pub(crate) fn init_layer_norm<T: Real>(set: &mut ParamSet<T>, path: &str, d: usize) {
    set.insert(format!("{path}_g"), Mat::filled(1, d, T::one()));
    set.insert(format!("{path}_b"), Mat::zeros(1, d));
}

pub(crate) fn init_attention<T: Real, R: Rng + ?Sized>(set: &mut ParamSet<T>, path: &str, d: usize, rng: &mut R) {
    for w in ["wq", "wk", "wv", "wo"] {
        init_linear(set, &format!("{path}/{w}"), d, d, rng);
    }
}

pub(crate) fn init_ffn<T: Real, R: Rng + ?Sized>(set: &mut ParamSet<T>, path: &str, d: usize, d_ff: usize, rng: &mut R) {
    init_linear(set, &format!("{path}/w1"), d, d_ff, rng);
    set.insert(format!("{path}/b1"), Mat::zeros(1, d_ff));
    init_linear(set, &format!("{path}/w2"), d_ff, d, rng);
    set.insert(format!("{path}/b2"), Mat::zeros(1, d));
}

/// Pre-norm self-attention block followed by a pre-norm feed-forward block.
pub(crate) fn init_block<T: Real, R: Rng + ?Sized>(set: &mut ParamSet<T>, path: &str, d: usize, d_ff: usize, rng: &mut R) {
    init_layer_norm(set, &format!("{path}/ln1"), d);
    init_attention(set, &format!("{path}/attn"), d, rng);
    init_layer_norm(set, &format!("{path}/ln2"), d);
    init_ffn(set, &format!("{path}/ffn"), d, d_ff, rng);
}

pub(crate) fn layer_norm<T: Real>(g: &mut Graph<T>, b: &Bound, path: &str, x: Var) -> Result<Var> {
    let n = g.layer_norm(x);
    let scaled = g.mul_row(n, b.get(&format!("{path}_g"))?);
    Ok(g.add_row(scaled, b.get(&format!("{path}_b"))?))
}

pub(crate) fn linear<T: Real>(g: &mut Graph<T>, b: &Bound, path: &str, x: Var, bias: bool) -> Result<Var> {
    let y = g.matmul(x, b.get(&format!("{path}/w"))?);
    if bias {
        Ok(g.add_row(y, b.get(&format!("{path}/b"))?))
    } else {
        Ok(y)
    }
}

/// Multi-head attention of `queries` onto `context`. No masking, no positions:
/// permuting the rows of `context` leaves the output unchanged.
pub(crate) fn attention<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    path: &str,
    queries: Var,
    context: Var,
    heads: usize,
) -> Result<Var> {
    let q = g.matmul(queries, b.get(&format!("{path}/wq"))?);
    let k = g.matmul(context, b.get(&format!("{path}/wk"))?);
    let v = g.matmul(context, b.get(&format!("{path}/wv"))?);
    let d = g.value(q).cols();
    let dh = d / heads;
    let scale: T = c(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
        };
        let scores = g.matmul_bt(qh, kh);
        let scores = g.scale(scores, scale);
        let w = g.softmax_rows(scores);
        outs.push(g.matmul(w, vh));
    }
    let merged = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    Ok(g.matmul(merged, b.get(&format!("{path}/wo"))?))
}

pub(crate) fn ffn<T: Real>(g: &mut Graph<T>, b: &Bound, path: &str, x: Var) -> Result<Var> {
    let h = g.matmul(x, b.get(&format!("{path}/w1"))?);
    let h = g.add_row(h, b.get(&format!("{path}/b1"))?);
    let h = g.gelu(h);
    let y = g.matmul(h, b.get(&format!("{path}/w2"))?);
    Ok(g.add_row(y, b.get(&format!("{path}/b2"))?))
}

pub(crate) fn block<T: Real>(g: &mut Graph<T>, b: &Bound, path: &str, x: Var, heads: usize) -> Result<Var> {
    let n = layer_norm(g, b, &format!("{path}/ln1"), x)?;
    let a = attention(g, b, &format!("{path}/attn"), n, n, heads)?;
    let x = g.add(x, a);
    let n = layer_norm(g, b, &format!("{path}/ln2"), x)?;
    let f = ffn(g, b, &format!("{path}/ffn"), n)?;
    Ok(g.add(x, f))
}
