use super::Element;

/// Strided view descriptor: `(row_stride, col_stride)`.
pub(crate) type Strides = (usize, usize);

pub(crate) const ROW_MAJOR: fn(usize) -> Strides = |cols| (cols, 1);
pub(crate) const TRANSPOSED: fn(usize) -> Strides = |cols| (1, cols);

fn extent(rows: usize, cols: usize, (rs, cs): Strides) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// `C[m×n] = alpha · A[m×k] · B[k×n] + beta · C`, all operands addressed through strides
/// relative to the start of each slice.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
    a: &[E],
    sa: Strides,
    b: &[E],
    sb: Strides,
    beta: E,
    c: &mut [E],
    sc: Strides,
) {
    assert!(extent(m, k, sa) <= a.len(), "gemm: A out of bounds");
    assert!(extent(k, n, sb) <= b.len(), "gemm: B out of bounds");
    assert!(extent(m, n, sc) <= c.len(), "gemm: C out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every strided access is within the slices per the asserts above.
    unsafe {
        E::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_naive_product_including_transposed_views() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            &a,
            ROW_MAJOR(k),
            &b,
            ROW_MAJOR(n),
            0.0,
            &mut c,
            ROW_MAJOR(n),
        );
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // Bᵀ stored row-major as [n×k]; read it back transposed.
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            &a,
            ROW_MAJOR(k),
            &bt,
            TRANSPOSED(k),
            0.0,
            &mut c2,
            ROW_MAJOR(n),
        );
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
