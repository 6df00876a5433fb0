//! Elementwise, reduction and layout ops with their gradient rules.

use super::kernels::linear_into;
use super::linalg::{gemm, ROW_MAJOR, TRANSPOSED};
use super::tensor::numel_of;
use super::{Element, Tensor};
use crate::error::{Result, StoicError};

fn same_shape<E: Element>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(StoicError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<E: Element> Tensor<E> {
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            "add",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, needs| vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            "sub",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, needs| {
                vec![
                    needs[0].then(|| g.to_vec()),
                    needs[1].then(|| g.iter().map(|&v| -v).collect()),
                ]
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            "mul",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.iter().zip(b.data()).map(|(&g, &y)| g * y).collect()),
                    needs[1].then(|| g.iter().zip(a.data()).map(|(&g, &x)| g * x).collect()),
                ]
            }),
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor<E> {
        let s = E::from_f64(factor);
        let data = self.data().iter().map(|&v| v * s).collect();
        Tensor::from_op(
            "scale",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().map(|&v| v * s).collect())]),
        )
    }

    pub fn square(&self) -> Tensor<E> {
        let data = self.data().iter().map(|&v| v * v).collect();
        let x = self.clone();
        Tensor::from_op(
            "square",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let two = E::from_f64(2.0);
                vec![Some(
                    g.iter().zip(x.data()).map(|(&g, &x)| two * x * g).collect(),
                )]
            }),
        )
    }

    pub fn sum(&self) -> Tensor<E> {
        let total = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![total],
            Vec::new(),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<E> {
        let n = self.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Mean of squared differences.
    pub fn mse(&self, target: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.sub(target)?.square().mean())
    }

    /// Inner product `Σ self·other` as a scalar.
    pub fn dot(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.mul(other)?.sum())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        if numel_of(shape) != self.numel() {
            return Err(StoicError::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape()),
            ));
        }
        Ok(self.share_with_shape(
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Swaps the last two axes: `[.., A, B] -> [.., B, A]`.
    pub fn transpose_last2(&self) -> Result<Tensor<E>> {
        let r = self.rank();
        if r < 2 {
            return Err(StoicError::shape("transpose", format!("rank {r} < 2")));
        }
        let (a, b) = (self.shape()[r - 2], self.shape()[r - 1]);
        let batch = self.numel() / (a * b).max(1);
        let data = transpose_batched(self.data(), batch, a, b);
        let mut shape = self.shape().to_vec();
        shape.swap(r - 2, r - 1);
        Ok(Tensor::from_op(
            "transpose",
            data,
            shape,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(transpose_batched(g, batch, b, a))]),
        ))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        let first = parts
            .first()
            .ok_or_else(|| StoicError::invalid("concat", "no inputs"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(StoicError::shape(
                "concat",
                format!("axis {axis} out of range for rank {rank}"),
            ));
        }
        for p in parts {
            let ok = p.rank() == rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(StoicError::shape(
                    "concat",
                    format!("{:?} vs {:?} on axis {axis}", p.shape(), first.shape()),
                ));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let row: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        Ok(Tensor::from_op(
            "concat",
            data,
            shape,
            parts.iter().map(|&p| p.clone()).collect(),
            Box::new(move |g, needs| {
                let mut offset = 0;
                widths
                    .iter()
                    .zip(needs)
                    .map(|(&w, &need)| {
                        let start = offset;
                        offset += w;
                        need.then(|| {
                            let mut out = Vec::with_capacity(outer * w);
                            for o in 0..outer {
                                out.extend_from_slice(&g[o * row + start..o * row + start + w]);
                            }
                            out
                        })
                    })
                    .collect()
            }),
        ))
    }

    /// Keeps `len` entries of the last axis starting at `start`.
    pub fn narrow_last(&self, start: usize, len: usize) -> Result<Tensor<E>> {
        let last = *self
            .shape()
            .last()
            .ok_or_else(|| StoicError::shape("narrow", "rank 0"))?;
        if start + len > last {
            return Err(StoicError::shape(
                "narrow",
                format!("{start}+{len} exceeds last extent {last}"),
            ));
        }
        let rows = self.numel() / last.max(1);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.data()[r * last + start..r * last + start + len]);
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(Tensor::from_op(
            "narrow",
            data,
            shape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut out = vec![E::zero(); rows * last];
                for r in 0..rows {
                    out[r * last + start..r * last + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![Some(out)]
            }),
        ))
    }

    /// Affine map over the last axis: `x[.., in] · w[in, out] + b[out]`.
    pub fn linear(&self, weight: &Tensor<E>, bias: Option<&Tensor<E>>) -> Result<Tensor<E>> {
        let (d_in, d_out) = match weight.shape() {
            &[i, o] => (i, o),
            s => {
                return Err(StoicError::shape(
                    "linear",
                    format!("weight must be rank 2, got {s:?}"),
                ))
            }
        };
        if self.shape().last() != Some(&d_in) {
            return Err(StoicError::shape(
                "linear",
                format!("input {:?} vs weight {:?}", self.shape(), weight.shape()),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [d_out] {
                return Err(StoicError::shape(
                    "linear",
                    format!("bias {:?} vs out {d_out}", b.shape()),
                ));
            }
        }
        let rows = self.numel() / d_in.max(1);
        let mut out = vec![E::zero(); rows * d_out];
        linear_into(
            self.data(),
            weight.data(),
            bias.map(|b| b.data()),
            d_in,
            d_out,
            &mut out,
        );

        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        let (x, w) = (self.clone(), weight.clone());
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            "linear",
            out,
            shape,
            parents,
            Box::new(move |g, needs| {
                let dx = needs[0].then(|| {
                    let mut dx = vec![E::zero(); rows * d_in];
                    gemm(
                        rows,
                        d_out,
                        d_in,
                        E::one(),
                        g,
                        ROW_MAJOR(d_out),
                        w.data(),
                        TRANSPOSED(d_out),
                        E::zero(),
                        &mut dx,
                        ROW_MAJOR(d_in),
                    );
                    dx
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![E::zero(); d_in * d_out];
                    gemm(
                        d_in,
                        rows,
                        d_out,
                        E::one(),
                        x.data(),
                        TRANSPOSED(d_in),
                        g,
                        ROW_MAJOR(d_out),
                        E::zero(),
                        &mut dw,
                        ROW_MAJOR(d_out),
                    );
                    dw
                });
                let mut grads = vec![dx, dw];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| {
                        let mut db = vec![E::zero(); d_out];
                        for r in g.chunks_exact(d_out) {
                            db.iter_mut().zip(r).for_each(|(a, &b)| *a = *a + b);
                        }
                        db
                    }));
                }
                grads
            }),
        ))
    }
}

pub(crate) fn transpose_batched<E: Element>(src: &[E], batch: usize, a: usize, b: usize) -> Vec<E> {
    let mut out = vec![E::zero(); src.len()];
    for n in 0..batch {
        let s = &src[n * a * b..(n + 1) * a * b];
        let d = &mut out[n * a * b..(n + 1) * a * b];
        for i in 0..a {
            for j in 0..b {
                d[j * a + i] = s[i * b + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64], s: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(v.to_vec(), s).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::<f64>::parameter(vec![0.5, -1.0, 3.0], &[3]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_input() {
        let x = Tensor::<f64>::parameter(vec![0.5, -1.0, 3.0], &[3]).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, -2.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::parameter(vec![2.0], &[1]).unwrap();
        let loss = x.square().sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn constants_do_not_record_graphs() {
        let a = t(&[1.0, 2.0], &[2]);
        let b = a.add(&a).unwrap();
        assert!(!b.requires_grad() && b.is_leaf());
    }

    #[test]
    fn concat_and_narrow_along_last_axis() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[9.0, 8.0], &[2, 1]);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let n = c.narrow_last(1, 2).unwrap();
        assert_eq!(n.data(), &[2.0, 9.0, 4.0, 8.0]);
        assert!(c.narrow_last(2, 2).is_err());
        assert!(Tensor::concat(&[&a, &t(&[1.0; 3], &[3, 1])], 1).is_err());
    }

    #[test]
    fn concat_gradient_routes_back_to_parts() {
        let a = Tensor::<f64>::parameter(vec![1.0, 2.0], &[1, 2]).unwrap();
        let b = Tensor::<f64>::parameter(vec![3.0], &[1, 1]).unwrap();
        let w = t(&[10.0, 20.0, 30.0], &[1, 3]);
        Tensor::concat(&[&a, &b], 1)
            .unwrap()
            .dot(&w)
            .unwrap()
            .backward()
            .unwrap();
        assert_eq!(a.grad().unwrap(), vec![10.0, 20.0]);
        assert_eq!(b.grad().unwrap(), vec![30.0]);
    }

    #[test]
    fn transpose_swaps_last_axes() {
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, 2, 3]);
        let b = a.transpose_last2().unwrap();
        assert_eq!(b.shape(), &[1, 3, 2]);
        assert_eq!(b.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(b.transpose_last2().unwrap().data(), a.data());
    }

    #[test]
    fn linear_8_to_4_and_shape_errors() {
        let x = t(&[1.0; 8], &[1, 8]);
        let w = t(&[0.5; 32], &[8, 4]);
        let b = t(&[1.0; 4], &[4]);
        let y = x.linear(&w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[5.0; 4]);
        assert!(x.linear(&t(&[0.0; 12], &[3, 4]), None).is_err());
        assert!(x.linear(&w, Some(&t(&[0.0; 3], &[3]))).is_err());
    }
}
