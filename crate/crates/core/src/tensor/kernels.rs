//! Slice-level numeric kernels shared by the graph and the eager tensor API.

use super::Scalar;

/// Strided 2-D view into a flat buffer.
#[derive(Debug, Clone, Copy)]
pub struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn row_major(offset: usize, rows: usize, cols: usize, stride: usize) -> Self {
        View {
            offset,
            rows,
            cols,
            rs: stride,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        View {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn last_index(&self) -> usize {
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// `c = alpha * a * b + beta * c` on strided views. With `beta == 0` the
/// previous contents of `c` are not read.
pub fn gemm<T: Scalar>(alpha: T, a: &[T], av: View, b: &[T], bv: View, beta: T, c: &mut [T], cv: View) {
    assert_eq!(av.cols, bv.rows, "gemm inner extents");
    assert_eq!(av.rows, cv.rows, "gemm output rows");
    assert_eq!(bv.cols, cv.cols, "gemm output cols");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    if av.cols == 0 {
        for i in 0..cv.rows {
            for j in 0..cv.cols {
                let idx = cv.offset + i * cv.rs + j * cv.cs;
                c[idx] = if beta == T::zero() { T::zero() } else { beta * c[idx] };
            }
        }
        return;
    }
    assert!(av.last_index() < a.len(), "gemm: a view out of bounds");
    assert!(bv.last_index() < b.len(), "gemm: b view out of bounds");
    assert!(cv.last_index() < c.len(), "gemm: c view out of bounds");
    // SAFETY: every view was bounds-checked against its buffer above and `c`
    // is borrowed mutably, so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            cv.rows,
            av.cols,
            cv.cols,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// `out (+)= op(a) * op(b)` for logical `[m, k] x [k, n]` operands, where a
/// transposed operand is stored as its transpose.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Scalar>(
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
    accumulate: bool,
) {
    let av = if a_t {
        View::row_major(0, k, m, m).t()
    } else {
        View::row_major(0, m, k, k)
    };
    let bv = if b_t {
        View::row_major(0, n, k, k).t()
    } else {
        View::row_major(0, k, n, n)
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    gemm(T::one(), a, av, b, bv, beta, out, View::row_major(0, m, n, n));
}

pub fn softmax_rows<T: Scalar>(data: &mut [T], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Gradient of a row-wise softmax given its output `y`, written into `dx`.
pub fn softmax_rows_backward<T: Scalar>(y: &[T], dy: &[T], cols: usize, dx: &mut [T]) {
    for ((yr, dyr), dxr) in y.chunks(cols).zip(dy.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d += yv * (g - dot);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
    cols: usize,
    out: &mut [T],
    xhat: &mut [T],
    rstd: &mut [T],
) {
    let n = T::from_f64(cols as f64);
    for (r, ((xr, or), hr)) in x
        .chunks(cols)
        .zip(out.chunks_mut(cols))
        .zip(xhat.chunks_mut(cols))
        .enumerate()
    {
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let denom = (var + eps).sqrt();
        // Zero variance with zero epsilon: the centred row is all zeros.
        let s = if denom > T::zero() { T::one() / denom } else { T::zero() };
        rstd[r] = s;
        for j in 0..cols {
            let h = (xr[j] - mean) * s;
            hr[j] = h;
            or[j] = h * gamma[j] + beta[j];
        }
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(INV_SQRT_2)).erf())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(INV_SQRT_2)).erf());
    let pdf = T::from_f64(INV_SQRT_2PI) * (-(x * x) * half).exp();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strided_gemm_matches_loop_on_transposed_views() {
        // a stored as [3, 2] used as its transpose [2, 3]
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0f64; 4];
        gemm(
            1.0,
            &a,
            View::row_major(0, 3, 2, 2).t(),
            &b,
            View::row_major(0, 3, 2, 2),
            0.0,
            &mut c,
            View::row_major(0, 2, 2, 2),
        );
        // a^T = [[1,3,5],[2,4,6]]
        assert_eq!(c, [6.0, 8.0, 8.0, 10.0]);
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}
