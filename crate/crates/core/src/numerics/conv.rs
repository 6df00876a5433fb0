//! 2-D convolution and transposed convolution (im2col + GEMM), cross-correlation convention.

use rayon::prelude::*;

use super::linalg::{gemm, ROW_MAJOR, TRANSPOSED};
use super::{Element, Tensor};
use crate::error::{Result, StoicError};

/// Output extent of a strided, zero-padded window: `⌊(n + 2p − k)/s⌋ + 1`.
pub fn conv_out_extent(n: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(StoicError::invalid(
            "conv",
            format!("kernel {kernel} and stride {stride} must be >= 1"),
        ));
    }
    let padded = n + 2 * padding;
    if padded < kernel {
        return Err(StoicError::invalid(
            "conv",
            format!("padded extent {padded} smaller than kernel {kernel}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution: `(n − 1)·s − 2p + k`.
pub fn conv_transpose_out_extent(
    n: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if kernel == 0 || stride == 0 || n == 0 {
        return Err(StoicError::invalid(
            "conv_transpose",
            "kernel, stride and input extent must be >= 1",
        ));
    }
    let full = (n - 1) * stride + kernel;
    if full <= 2 * padding {
        return Err(StoicError::invalid(
            "conv_transpose",
            format!("output extent < 1 (padding {padding})"),
        ));
    }
    Ok(full - 2 * padding)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source pixel for window position `(oy, ox)` and tap `(ky, kx)`, or `None` in the padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        (y >= 0 && x >= 0 && (y as usize) < self.height && (x as usize) < self.width)
            .then(|| y as usize * self.width + x as usize)
    }
}

fn im2col<E: Element>(img: &[E], g: &Geometry) -> Vec<E> {
    let cols = g.col_cols();
    let mut out = vec![E::zero(); g.col_rows() * cols];
    let plane = g.height * g.width;
    for c in 0..g.channels {
        let src = &img[c * plane..(c + 1) * plane];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some(i) = g.source(oy, ox, ky, kx) {
                            dst[oy * g.out_w + ox] = src[i];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto the image.
fn col2im<E: Element>(cols_buf: &[E], g: &Geometry, img: &mut [E]) {
    let cols = g.col_cols();
    let plane = g.height * g.width;
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols_buf[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some(i) = g.source(oy, ox, ky, kx) {
                            let v = &mut img[c * plane + i];
                            *v = *v + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn sum_partials<E: Element>(partials: Vec<Vec<E>>, len: usize) -> Vec<E> {
    // Fixed batch order keeps the reduction deterministic.
    let mut acc = vec![E::zero(); len];
    for p in partials {
        acc.iter_mut().zip(&p).for_each(|(a, &b)| *a = *a + b);
    }
    acc
}

fn bias_grad<E: Element>(g: &[E], batch: usize, channels: usize, plane: usize) -> Vec<E> {
    let mut db = vec![E::zero(); channels];
    for b in 0..batch {
        for (c, d) in db.iter_mut().enumerate() {
            let s: E = g[(b * channels + c) * plane..(b * channels + c + 1) * plane]
                .iter()
                .copied()
                .sum();
            *d = *d + s;
        }
    }
    db
}

fn check_nchw<E: Element>(op: &'static str, x: &Tensor<E>) -> Result<[usize; 4]> {
    match *x.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        ref s => Err(StoicError::shape(
            op,
            format!("input must be [B,C,H,W], got {s:?}"),
        )),
    }
}

fn check_kernel<E: Element>(
    op: &'static str,
    w: &Tensor<E>,
    bias: &Tensor<E>,
    c_in: usize,
    in_axis: usize,
) -> Result<(usize, usize)> {
    let &[a, b, k, k2] = w.shape() else {
        return Err(StoicError::shape(
            op,
            format!("weight must be rank 4, got {:?}", w.shape()),
        ));
    };
    if k != k2 || k == 0 {
        return Err(StoicError::shape(
            op,
            format!("kernel must be square and non-empty, got {k}x{k2}"),
        ));
    }
    let (wc_in, c_out) = if in_axis == 0 { (a, b) } else { (b, a) };
    if wc_in != c_in {
        return Err(StoicError::shape(
            op,
            format!("input has {c_in} channels, weight expects {wc_in}"),
        ));
    }
    if bias.shape() != [c_out] {
        return Err(StoicError::shape(
            op,
            format!("bias {:?} vs {c_out} output channels", bias.shape()),
        ));
    }
    Ok((c_out, k))
}

/// `conv2d(x[B,C_in,H,W], w[C_out,C_in,K,K], b[C_out])` with zero padding.
pub fn conv2d<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    let [batch, c_in, h, w] = check_nchw("conv2d", x)?;
    let (c_out, k) = check_kernel("conv2d", weight, bias, c_in, 1)?;
    let out_h = conv_out_extent(h, k, stride, padding)?;
    let out_w = conv_out_extent(w, k, stride, padding)?;
    let geo = Geometry {
        channels: c_in,
        height: h,
        width: w,
        kernel: k,
        stride,
        padding,
        out_h,
        out_w,
    };
    let (in_sz, out_plane, kk) = (c_in * h * w, out_h * out_w, geo.col_rows());

    let mut out = vec![E::zero(); batch * c_out * out_plane];
    out.par_chunks_mut(c_out * out_plane)
        .enumerate()
        .for_each(|(b, dst)| {
            let cols = im2col(&x.data()[b * in_sz..(b + 1) * in_sz], &geo);
            for (c, row) in dst.chunks_exact_mut(out_plane).enumerate() {
                row.fill(bias.data()[c]);
            }
            gemm(
                c_out,
                kk,
                out_plane,
                E::one(),
                weight.data(),
                ROW_MAJOR(kk),
                &cols,
                ROW_MAJOR(out_plane),
                E::one(),
                dst,
                ROW_MAJOR(out_plane),
            );
        });

    let (xs, ws) = (x.clone(), weight.clone());
    Ok(Tensor::from_op(
        "conv2d",
        out,
        vec![batch, c_out, out_h, out_w],
        vec![x.clone(), weight.clone(), bias.clone()],
        Box::new(move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = vec![E::zero(); batch * in_sz];
                dx.par_chunks_mut(in_sz).enumerate().for_each(|(b, dst)| {
                    let mut cols = vec![E::zero(); kk * out_plane];
                    let gb = &g[b * c_out * out_plane..(b + 1) * c_out * out_plane];
                    gemm(
                        kk,
                        c_out,
                        out_plane,
                        E::one(),
                        ws.data(),
                        TRANSPOSED(kk),
                        gb,
                        ROW_MAJOR(out_plane),
                        E::zero(),
                        &mut cols,
                        ROW_MAJOR(out_plane),
                    );
                    col2im(&cols, &geo, dst);
                });
                dx
            });
            let dw = needs[1].then(|| {
                let partials: Vec<Vec<E>> = (0..batch)
                    .into_par_iter()
                    .map(|b| {
                        let cols = im2col(&xs.data()[b * in_sz..(b + 1) * in_sz], &geo);
                        let gb = &g[b * c_out * out_plane..(b + 1) * c_out * out_plane];
                        let mut dw = vec![E::zero(); c_out * kk];
                        gemm(
                            c_out,
                            out_plane,
                            kk,
                            E::one(),
                            gb,
                            ROW_MAJOR(out_plane),
                            &cols,
                            TRANSPOSED(out_plane),
                            E::zero(),
                            &mut dw,
                            ROW_MAJOR(kk),
                        );
                        dw
                    })
                    .collect();
                sum_partials(partials, c_out * kk)
            });
            let db = needs[2].then(|| bias_grad(g, batch, c_out, out_plane));
            vec![dx, dw, db]
        }),
    ))
}

/// `conv_transpose2d(x[B,C_in,H,W], w[C_in,C_out,K,K], b[C_out])`, the adjoint of [`conv2d`]
/// with the same geometry (plus bias).
pub fn conv_transpose2d<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    let [batch, c_in, h, w] = check_nchw("conv_transpose2d", x)?;
    let (c_out, k) = check_kernel("conv_transpose2d", weight, bias, c_in, 0)?;
    let out_h = conv_transpose_out_extent(h, k, stride, padding)?;
    let out_w = conv_transpose_out_extent(w, k, stride, padding)?;
    // The scatter geometry is that of a conv2d from the output image back to the input grid.
    let geo = Geometry {
        channels: c_out,
        height: out_h,
        width: out_w,
        kernel: k,
        stride,
        padding,
        out_h: h,
        out_w: w,
    };
    debug_assert_eq!(conv_out_extent(out_h, k, stride, padding).ok(), Some(h));
    let (in_plane, out_sz, kk) = (h * w, c_out * out_h * out_w, geo.col_rows());

    let mut out = vec![E::zero(); batch * out_sz];
    out.par_chunks_mut(out_sz).enumerate().for_each(|(b, dst)| {
        let mut cols = vec![E::zero(); kk * in_plane];
        let xb = &x.data()[b * c_in * in_plane..(b + 1) * c_in * in_plane];
        gemm(
            kk,
            c_in,
            in_plane,
            E::one(),
            weight.data(),
            TRANSPOSED(kk),
            xb,
            ROW_MAJOR(in_plane),
            E::zero(),
            &mut cols,
            ROW_MAJOR(in_plane),
        );
        col2im(&cols, &geo, dst);
        let plane = out_h * out_w;
        for (c, ch) in dst.chunks_exact_mut(plane).enumerate() {
            let bc = bias.data()[c];
            ch.iter_mut().for_each(|v| *v = *v + bc);
        }
    });

    let (xs, ws) = (x.clone(), weight.clone());
    Ok(Tensor::from_op(
        "conv_transpose2d",
        out,
        vec![batch, c_out, out_h, out_w],
        vec![x.clone(), weight.clone(), bias.clone()],
        Box::new(move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = vec![E::zero(); batch * c_in * in_plane];
                dx.par_chunks_mut(c_in * in_plane)
                    .enumerate()
                    .for_each(|(b, dst)| {
                        let cols = im2col(&g[b * out_sz..(b + 1) * out_sz], &geo);
                        gemm(
                            c_in,
                            kk,
                            in_plane,
                            E::one(),
                            ws.data(),
                            ROW_MAJOR(kk),
                            &cols,
                            ROW_MAJOR(in_plane),
                            E::zero(),
                            dst,
                            ROW_MAJOR(in_plane),
                        );
                    });
                dx
            });
            let dw = needs[1].then(|| {
                let partials: Vec<Vec<E>> = (0..batch)
                    .into_par_iter()
                    .map(|b| {
                        let cols = im2col(&g[b * out_sz..(b + 1) * out_sz], &geo);
                        let xb = &xs.data()[b * c_in * in_plane..(b + 1) * c_in * in_plane];
                        let mut dw = vec![E::zero(); c_in * kk];
                        gemm(
                            c_in,
                            in_plane,
                            kk,
                            E::one(),
                            xb,
                            ROW_MAJOR(in_plane),
                            &cols,
                            TRANSPOSED(in_plane),
                            E::zero(),
                            &mut dw,
                            ROW_MAJOR(kk),
                        );
                        dw
                    })
                    .collect();
                sum_partials(partials, c_in * kk)
            });
            let db = needs[2].then(|| bias_grad(g, batch, c_out, out_h * out_w));
            vec![dx, dw, db]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    #[test]
    fn output_extents_for_both_stride_variants() {
        let x = Tensor::<f32>::zeros(&[1, 3, 32, 32]);
        let y = conv2d(
            &x,
            &Tensor::zeros(&[8, 3, 3, 3]),
            &Tensor::zeros(&[8]),
            1,
            1,
        )
        .unwrap();
        assert_eq!(y.shape(), &[1, 8, 32, 32]);
        let y = conv2d(
            &x,
            &Tensor::zeros(&[8, 3, 2, 2]),
            &Tensor::zeros(&[8]),
            2,
            0,
        )
        .unwrap();
        assert_eq!(y.shape(), &[1, 8, 16, 16]);
        let z = conv_transpose2d(
            &Tensor::<f32>::zeros(&[1, 3, 16, 16]),
            &Tensor::zeros(&[3, 3, 2, 2]),
            &Tensor::zeros(&[3]),
            2,
            0,
        )
        .unwrap();
        assert_eq!(z.shape(), &[1, 3, 32, 32]);
    }

    #[test]
    fn all_ones_window_sums_to_four() {
        let x = Tensor::<f32>::ones(&[1, 1, 2, 2]);
        let y = conv2d(&x, &Tensor::ones(&[1, 1, 2, 2]), &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn transposed_unit_kernel_is_scalar_product() {
        let x = Tensor::<f64>::from_vec(vec![3.0], &[1, 1, 1, 1]).unwrap();
        let w = Tensor::from_vec(vec![-2.5], &[1, 1, 1, 1]).unwrap();
        let y = conv_transpose2d(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.data(), &[-7.5]);
    }

    #[test]
    fn rejects_bad_geometry() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        assert!(conv2d(
            &x,
            &Tensor::zeros(&[2, 2, 3, 3]),
            &Tensor::zeros(&[2]),
            1,
            1
        )
        .is_err());
        assert!(conv2d(
            &x,
            &Tensor::zeros(&[2, 3, 5, 5]),
            &Tensor::zeros(&[2]),
            1,
            0
        )
        .is_err());
        assert!(conv2d(
            &x,
            &Tensor::zeros(&[2, 3, 3, 3]),
            &Tensor::zeros(&[2]),
            0,
            0
        )
        .is_err());
        assert!(conv2d(
            &x,
            &Tensor::zeros(&[2, 3, 3, 3]),
            &Tensor::zeros(&[3]),
            1,
            0
        )
        .is_err());
    }

    #[test]
    fn matches_direct_loop_with_padding_and_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 2, 5, 4]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let y = conv2d(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 2]);
        let (xd, wd) = (x.data(), w.data());
        for n in 0..2 {
            for co in 0..3 {
                for oy in 0..3 {
                    for ox in 0..2 {
                        let mut acc = b.data()[co];
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                        acc += xd
                                            [((n * 2 + ci) * 5 + iy as usize) * 4 + ix as usize]
                                            * wd[((co * 2 + ci) * 3 + ky) * 3 + kx];
                                    }
                                }
                            }
                        }
                        let got = y.data()[((n * 3 + co) * 3 + oy) * 2 + ox];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(k, s, p, h, w) in &[
            (3, 1, 1, 5, 6),
            (2, 2, 0, 4, 6),
            (3, 2, 1, 7, 5),
            (1, 1, 0, 3, 3),
        ] {
            let x = rand_tensor(&mut rng, &[2, 3, h, w]);
            let weight = rand_tensor(&mut rng, &[4, 3, k, k]);
            let zero4 = Tensor::<f64>::zeros(&[4]);
            let zero3 = Tensor::<f64>::zeros(&[3]);
            let cx = conv2d(&x, &weight, &zero4, s, p).unwrap();
            let y = rand_tensor(&mut rng, cx.shape());
            // conv_transpose2d with weight [C_in=4, C_out=3] reads the same buffer.
            let ty = conv_transpose2d(&y, &weight, &zero3, s, p).unwrap();
            if ty.shape() != x.shape() {
                // Non-invertible stride remainder: the adjoint covers a smaller image.
                continue;
            }
            let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() < 1e-10,
                "k={k} s={s} p={p}: {lhs} vs {rhs}"
            );
        }
    }
}
