//! Slice-level forward kernels shared by the differentiable ops and the buffer-reusing
//! inference path. Both call exactly these routines, so their results agree bit for bit.

use rayon::prelude::*;

use super::linalg::{gemm, ROW_MAJOR, TRANSPOSED};
use super::Element;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu_scalar<E: Element>(x: E) -> E {
    let half = E::from_f64(0.5);
    let inner = E::from_f64(SQRT_2_OVER_PI) * (x + E::from_f64(GELU_CUBIC) * x * x * x);
    half * x * (E::one() + inner.tanh())
}

#[inline]
pub(crate) fn gelu_grad<E: Element>(x: E) -> E {
    let half = E::from_f64(0.5);
    let c = E::from_f64(SQRT_2_OVER_PI);
    let a = E::from_f64(GELU_CUBIC);
    let th = (c * (x + a * x * x * x)).tanh();
    let sech2 = E::one() - th * th;
    half * (E::one() + th) + half * x * sech2 * c * (E::one() + E::from_f64(3.0) * a * x * x)
}

/// `out[rows×d_out] = x[rows×d_in] · w[d_in×d_out] (+ b)`.
pub(crate) fn linear_into<E: Element>(
    x: &[E],
    w: &[E],
    b: Option<&[E]>,
    d_in: usize,
    d_out: usize,
    out: &mut [E],
) {
    let rows = x.len() / d_in.max(1);
    let beta = match b {
        Some(b) => {
            for r in out[..rows * d_out].chunks_exact_mut(d_out) {
                r.copy_from_slice(b);
            }
            E::one()
        }
        None => E::zero(),
    };
    gemm(
        rows,
        d_in,
        d_out,
        E::one(),
        x,
        ROW_MAJOR(d_in),
        w,
        ROW_MAJOR(d_out),
        beta,
        out,
        ROW_MAJOR(d_out),
    );
}

/// Row-wise layer normalization. Optionally records `x̂` and `1/σ` for the gradient.
pub(crate) fn layer_norm_into<E: Element>(
    x: &[E],
    gamma: &[E],
    beta: &[E],
    eps: E,
    out: &mut [E],
    mut saved: Option<(&mut [E], &mut [E])>,
) {
    let width = gamma.len();
    let inv_w = E::from_f64(1.0 / width as f64);
    for (r, (row, dst)) in x
        .chunks_exact(width)
        .zip(out.chunks_exact_mut(width))
        .enumerate()
    {
        let mean = row.iter().copied().sum::<E>() * inv_w;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() * inv_w;
        let rs = E::one() / (var + eps).sqrt();
        for i in 0..width {
            let h = (row[i] - mean) * rs;
            dst[i] = h * gamma[i] + beta[i];
            if let Some((xhat, _)) = saved.as_mut() {
                xhat[r * width + i] = h;
            }
        }
        if let Some((_, rstd)) = saved.as_mut() {
            rstd[r] = rs;
        }
    }
}

pub(crate) fn softmax_rows<E: Element>(m: &mut [E], width: usize) {
    for row in m.chunks_exact_mut(width) {
        let max = row.iter().copied().fold(E::neg_infinity(), E::max);
        let mut total = E::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        let inv = E::one() / total;
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnDims {
    pub batch: usize,
    pub tokens: usize,
    pub width: usize,
    pub heads: usize,
}

impl AttnDims {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Softmax probabilities `[B·heads, T, T]` of packed `qkv[B,T,3L]`.
pub(crate) fn attention_probs_into<E: Element>(qkv: &[E], d: AttnDims, probs: &mut [E]) {
    let (t, w, hd) = (d.tokens, d.width, d.head_dim());
    let scale = E::from_f64(1.0 / (hd as f64).sqrt());
    probs[..d.batch * d.heads * t * t]
        .par_chunks_mut(t * t)
        .enumerate()
        .for_each(|(bh, p)| {
            let (b, h) = (bh / d.heads, bh % d.heads);
            let base = b * t * 3 * w + h * hd;
            gemm(
                t,
                hd,
                t,
                scale,
                &qkv[base..],
                ROW_MAJOR(3 * w),
                &qkv[base + w..],
                TRANSPOSED(3 * w),
                E::zero(),
                p,
                ROW_MAJOR(t),
            );
            softmax_rows(p, t);
        });
}

/// `out[B,T,L] = softmax(QKᵀ/√d)·V` per head, given precomputed probabilities.
pub(crate) fn attention_apply_into<E: Element>(qkv: &[E], probs: &[E], d: AttnDims, out: &mut [E]) {
    let (t, w, hd) = (d.tokens, d.width, d.head_dim());
    out[..d.batch * t * w]
        .par_chunks_mut(t * w)
        .enumerate()
        .for_each(|(b, ob)| {
            for h in 0..d.heads {
                let v = &qkv[b * t * 3 * w + 2 * w + h * hd..];
                let p = &probs[(b * d.heads + h) * t * t..(b * d.heads + h + 1) * t * t];
                gemm(
                    t,
                    t,
                    hd,
                    E::one(),
                    p,
                    ROW_MAJOR(t),
                    v,
                    ROW_MAJOR(3 * w),
                    E::zero(),
                    &mut ob[h * hd..],
                    ROW_MAJOR(w),
                );
            }
        });
}
