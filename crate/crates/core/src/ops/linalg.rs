use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

/// Strided view of a row-major matrix buffer.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn fits(&self) -> bool {
        self.rows == 0
            || self.cols == 0
            || (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride < self.data.len()
    }
}

/// `c = alpha * a @ b + beta * c`, with `c` dense row-major `[a.rows, b.cols]`.
pub(crate) fn gemm(alpha: f64, a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert!(a.fits() && b.fits(), "gemm operand out of bounds");
    assert_eq!(c.len(), a.rows * b.cols, "gemm output size");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    // SAFETY: every operand was bounds-checked against its strides above and
    // `c` is an exclusively borrowed dense buffer of the right size.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

pub(crate) fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new([c, r], out).unwrap()
}

pub(crate) fn matmul_backward(
    g: &Tensor,
    a: &Tensor,
    b: &Tensor,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let gm = Mat::new(g.data(), m, n);
    let da = need_a.then(|| {
        let mut d = vec![0.0; m * k];
        gemm(1.0, gm, Mat::new(b.data(), k, n).t(), 0.0, &mut d);
        Tensor::new([m, k], d).unwrap()
    });
    let db = need_b.then(|| {
        let mut d = vec![0.0; k * n];
        gemm(1.0, Mat::new(a.data(), m, k).t(), gm, 0.0, &mut d);
        Tensor::new([k, n], d).unwrap()
    });
    (da, db)
}

impl Tape {
    /// `[m, k] @ [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {:?} by {:?}", sa, sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            Mat::new(self.value(a).data(), m, k),
            Mat::new(self.value(b).data(), k, n),
            0.0,
            &mut out,
        );
        let v = Tensor::new([m, n], out)?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return Err(Error::shape(
                "transpose",
                format!("expected a matrix, got {:?}", self.shape(a)),
            ));
        }
        let v = transpose(self.value(a));
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    /// `x @ w^T` for `x: [n, d]`, `w: [out, d]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let wt = self.transpose(w)?;
        self.matmul(x, wt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tape.leaf(Tensor::new([3, 1], vec![1., 0., -1.]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[-2.0, -2.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros([2, 3]));
        let b = tape.leaf(Tensor::zeros([2, 3]));
        assert!(tape.matmul(a, b).is_err());
    }
}
