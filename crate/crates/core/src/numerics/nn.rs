//! Layers built on the tensor engine: GELU, normalization, attention and the MLP.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

use super::kernels::{self, gelu_grad, gelu_scalar, AttnDims};
use super::linalg::{gemm, ROW_MAJOR, TRANSPOSED};
use super::{Element, Tensor};
use crate::error::{Result, StoicError};

static GELU_BACKWARD_FAULT: AtomicBool = AtomicBool::new(false);

/// Test hook: when enabled, the GELU gradient rule is deliberately wrong (scaled by 1.5),
/// giving the gradient checker a negative control.
pub fn set_gelu_backward_fault(enabled: bool) {
    GELU_BACKWARD_FAULT.store(enabled, Ordering::SeqCst);
}

/// GELU, tanh approximation.
pub fn gelu<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    let xs = x.clone();
    Tensor::from_op(
        "gelu",
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g, _| {
            let fault = if GELU_BACKWARD_FAULT.load(Ordering::SeqCst) {
                E::from_f64(1.5)
            } else {
                E::one()
            };
            vec![Some(
                g.iter()
                    .zip(xs.data())
                    .map(|(&g, &x)| g * gelu_grad(x) * fault)
                    .collect(),
            )]
        }),
    )
}

/// Normalizes each row of `x[.., L]` to zero mean and unit variance, then applies
/// `gamma`/`beta`.
pub fn layer_norm<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
) -> Result<Tensor<E>> {
    let width = *x
        .shape()
        .last()
        .ok_or_else(|| StoicError::shape("layer_norm", "rank 0 input"))?;
    if gamma.shape() != [width] || beta.shape() != [width] {
        return Err(StoicError::shape(
            "layer_norm",
            format!(
                "affine {:?}/{:?} vs last axis {width}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    if eps <= 0.0 {
        return Err(StoicError::invalid("layer_norm", "eps must be positive"));
    }
    let rows = x.numel() / width.max(1);
    let inv_w = E::from_f64(1.0 / width as f64);
    let mut xhat = vec![E::zero(); x.numel()];
    let mut rstd = vec![E::zero(); rows];
    let mut out = vec![E::zero(); x.numel()];
    kernels::layer_norm_into(
        x.data(),
        gamma.data(),
        beta.data(),
        E::from_f64(eps),
        &mut out,
        Some((&mut xhat, &mut rstd)),
    );
    let gm = gamma.clone();
    Ok(Tensor::from_op(
        "layer_norm",
        out,
        x.shape().to_vec(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = vec![E::zero(); rows * width];
                for r in 0..rows {
                    let gr = &g[r * width..(r + 1) * width];
                    let hr = &xhat[r * width..(r + 1) * width];
                    let mut mean_dh = E::zero();
                    let mut mean_dh_h = E::zero();
                    for i in 0..width {
                        let dh = gr[i] * gm.data()[i];
                        mean_dh = mean_dh + dh;
                        mean_dh_h = mean_dh_h + dh * hr[i];
                    }
                    mean_dh = mean_dh * inv_w;
                    mean_dh_h = mean_dh_h * inv_w;
                    for i in 0..width {
                        let dh = gr[i] * gm.data()[i];
                        dx[r * width + i] = rstd[r] * (dh - mean_dh - hr[i] * mean_dh_h);
                    }
                }
                dx
            });
            let (mut dgamma, mut dbeta) = (vec![E::zero(); width], vec![E::zero(); width]);
            if needs[1] || needs[2] {
                for r in 0..rows {
                    for i in 0..width {
                        let gv = g[r * width + i];
                        dgamma[i] = dgamma[i] + gv * xhat[r * width + i];
                        dbeta[i] = dbeta[i] + gv;
                    }
                }
            }
            vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
        }),
    ))
}

/// Per-channel normalization of `x[B,C,H,W]` with statistics taken over the batch and
/// spatial axes of the current input (no running averages are kept).
pub fn batch_norm2d<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
) -> Result<Tensor<E>> {
    let &[batch, channels, h, w] = x.shape() else {
        return Err(StoicError::shape(
            "batch_norm2d",
            format!("input must be [B,C,H,W], got {:?}", x.shape()),
        ));
    };
    if gamma.shape() != [channels] || beta.shape() != [channels] {
        return Err(StoicError::shape(
            "batch_norm2d",
            "affine parameters must match channel count",
        ));
    }
    let plane = h * w;
    let count = batch * plane;
    let inv_n = E::from_f64(1.0 / count.max(1) as f64);
    let eps = E::from_f64(eps);
    let idx = move |b: usize, c: usize, p: usize| (b * channels + c) * plane + p;
    let mut xhat = vec![E::zero(); x.numel()];
    let mut rstd = vec![E::zero(); channels];
    let mut out = vec![E::zero(); x.numel()];
    let xd = x.data();
    for c in 0..channels {
        let mut mean = E::zero();
        for b in 0..batch {
            for p in 0..plane {
                mean = mean + xd[idx(b, c, p)];
            }
        }
        mean = mean * inv_n;
        let mut var = E::zero();
        for b in 0..batch {
            for p in 0..plane {
                let d = xd[idx(b, c, p)] - mean;
                var = var + d * d;
            }
        }
        let rs = E::one() / (var * inv_n + eps).sqrt();
        rstd[c] = rs;
        for b in 0..batch {
            for p in 0..plane {
                let i = idx(b, c, p);
                xhat[i] = (xd[i] - mean) * rs;
                out[i] = xhat[i] * gamma.data()[c] + beta.data()[c];
            }
        }
    }
    let gm = gamma.clone();
    Ok(Tensor::from_op(
        "batch_norm2d",
        out,
        x.shape().to_vec(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, needs| {
            let mut dx = vec![E::zero(); g.len()];
            let (mut dgamma, mut dbeta) = (vec![E::zero(); channels], vec![E::zero(); channels]);
            for c in 0..channels {
                let (mut sg, mut sgh) = (E::zero(), E::zero());
                for b in 0..batch {
                    for p in 0..plane {
                        let i = idx(b, c, p);
                        sg = sg + g[i];
                        sgh = sgh + g[i] * xhat[i];
                    }
                }
                dgamma[c] = sgh;
                dbeta[c] = sg;
                let k = gm.data()[c] * rstd[c];
                for b in 0..batch {
                    for p in 0..plane {
                        let i = idx(b, c, p);
                        dx[i] = k * (g[i] - sg * inv_n - xhat[i] * sgh * inv_n);
                    }
                }
            }
            vec![
                needs[0].then_some(dx),
                needs[1].then_some(dgamma),
                needs[2].then_some(dbeta),
            ]
        }),
    ))
}

fn split_heads(
    op: &'static str,
    shape: &[usize],
    heads: usize,
) -> Result<(usize, usize, usize, usize)> {
    let &[batch, tokens, three_l] = shape else {
        return Err(StoicError::shape(
            op,
            format!("qkv must be [B,T,3L], got {shape:?}"),
        ));
    };
    if three_l % 3 != 0 {
        return Err(StoicError::shape(
            op,
            format!("qkv width {three_l} not divisible by 3"),
        ));
    }
    let width = three_l / 3;
    if heads == 0 || width % heads != 0 {
        return Err(StoicError::invalid(
            op,
            format!("embedding {width} not divisible by {heads} heads"),
        ));
    }
    Ok((batch, tokens, width, width / heads))
}

/// Softmax attention probabilities `[B, heads, T, T]` for a packed `qkv[B,T,3L]`.
pub fn attention_probs<E: Element>(qkv: &Tensor<E>, heads: usize) -> Result<Vec<E>> {
    let (batch, tokens, width, _) = split_heads("attention", qkv.shape(), heads)?;
    let mut probs = vec![E::zero(); batch * heads * tokens * tokens];
    kernels::attention_probs_into(
        qkv.data(),
        AttnDims {
            batch,
            tokens,
            width,
            heads,
        },
        &mut probs,
    );
    Ok(probs)
}

/// Scaled dot-product attention on a packed `qkv[B,T,3L]` laid out as `[q | k | v]` along
/// the last axis, heads interleaved in contiguous `L/heads` slices. Returns `[B,T,L]`.
pub fn scaled_dot_attention<E: Element>(qkv: &Tensor<E>, heads: usize) -> Result<Tensor<E>> {
    let (batch, tokens, width, head_dim) = split_heads("attention", qkv.shape(), heads)?;
    let probs = attention_probs(qkv, heads)?;
    let tt = tokens * tokens;
    let mut out = vec![E::zero(); batch * tokens * width];
    kernels::attention_apply_into(
        qkv.data(),
        &probs,
        AttnDims {
            batch,
            tokens,
            width,
            heads,
        },
        &mut out,
    );

    let src = qkv.clone();
    Ok(Tensor::from_op(
        "attention",
        out,
        vec![batch, tokens, width],
        vec![qkv.clone()],
        Box::new(move |g, _| {
            let scale = E::from_f64(1.0 / (head_dim as f64).sqrt());
            let three = 3 * width;
            let mut dqkv = vec![E::zero(); batch * tokens * three];
            dqkv.par_chunks_mut(tokens * three)
                .enumerate()
                .for_each(|(b, db)| {
                    let xb = &src.data()[b * tokens * three..(b + 1) * tokens * three];
                    let gb = &g[b * tokens * width..(b + 1) * tokens * width];
                    let mut dp = vec![E::zero(); tt];
                    for h in 0..heads {
                        let off = h * head_dim;
                        let p = &probs[(b * heads + h) * tt..(b * heads + h + 1) * tt];
                        // dV = Pᵀ · dO
                        gemm(
                            tokens,
                            tokens,
                            head_dim,
                            E::one(),
                            p,
                            TRANSPOSED(tokens),
                            &gb[off..],
                            ROW_MAJOR(width),
                            E::zero(),
                            &mut db[2 * width + off..],
                            ROW_MAJOR(three),
                        );
                        // dP = dO · Vᵀ
                        gemm(
                            tokens,
                            head_dim,
                            tokens,
                            E::one(),
                            &gb[off..],
                            ROW_MAJOR(width),
                            &xb[2 * width + off..],
                            TRANSPOSED(three),
                            E::zero(),
                            &mut dp,
                            ROW_MAJOR(tokens),
                        );
                        // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                        for (dpr, pr) in dp.chunks_exact_mut(tokens).zip(p.chunks_exact(tokens)) {
                            let dot: E = dpr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                            dpr.iter_mut()
                                .zip(pr)
                                .for_each(|(d, &pv)| *d = pv * (*d - dot));
                        }
                        // dQ = scale · dS · K ; dK = scale · dSᵀ · Q
                        gemm(
                            tokens,
                            tokens,
                            head_dim,
                            scale,
                            &dp,
                            ROW_MAJOR(tokens),
                            &xb[width + off..],
                            ROW_MAJOR(three),
                            E::zero(),
                            &mut db[off..],
                            ROW_MAJOR(three),
                        );
                        gemm(
                            tokens,
                            tokens,
                            head_dim,
                            scale,
                            &dp,
                            TRANSPOSED(tokens),
                            &xb[off..],
                            ROW_MAJOR(three),
                            E::zero(),
                            &mut db[width + off..],
                            ROW_MAJOR(three),
                        );
                    }
                });
            vec![Some(dqkv)]
        }),
    ))
}

/// Projection weights of one multi-head attention layer. Linear weights are `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams<'a, E: Element> {
    pub qkv_w: &'a Tensor<E>,
    pub qkv_b: &'a Tensor<E>,
    pub out_w: &'a Tensor<E>,
    pub out_b: &'a Tensor<E>,
}

/// Multi-head self-attention over `x[B,T,L]`; no positional information is added.
pub fn multi_head_attention<E: Element>(
    x: &Tensor<E>,
    p: AttentionParams<'_, E>,
    heads: usize,
) -> Result<Tensor<E>> {
    let width = *x.shape().last().unwrap_or(&0);
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(StoicError::invalid(
            "multi_head_attention",
            format!("embedding {width} not divisible by {heads} heads"),
        ));
    }
    let qkv = x.linear(p.qkv_w, Some(p.qkv_b))?;
    scaled_dot_attention(&qkv, heads)?.linear(p.out_w, Some(p.out_b))
}

#[derive(Clone, Copy, Debug)]
pub struct MlpParams<'a, E: Element> {
    pub fc1_w: &'a Tensor<E>,
    pub fc1_b: &'a Tensor<E>,
    pub fc2_w: &'a Tensor<E>,
    pub fc2_b: &'a Tensor<E>,
}

/// `linear(L→rL) → gelu → linear(rL→L)`.
pub fn mlp<E: Element>(x: &Tensor<E>, p: MlpParams<'_, E>) -> Result<Tensor<E>> {
    gelu(&x.linear(p.fc1_w, Some(p.fc1_b))?).linear(p.fc2_w, Some(p.fc2_b))
}
