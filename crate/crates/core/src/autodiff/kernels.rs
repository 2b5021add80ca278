//! Safe wrapper over `matrixmultiply::dgemm`.

/// A strided view of a logical matrix.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    data: &'a [f64],
    rs: isize,
    cs: isize,
}

impl<'a> Mat<'a> {
    /// Row-major storage with `cols` columns.
    pub(crate) fn rows(data: &'a [f64], cols: usize) -> Self {
        Mat {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// The transpose of a row-major matrix that has `stored_cols` columns.
    pub(crate) fn transposed(data: &'a [f64], stored_cols: usize) -> Self {
        Mat {
            data,
            rs: 1,
            cs: stored_cols as isize,
        }
    }

    fn max_offset(&self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.rs as usize + (cols - 1) * self.cs as usize
    }
}

/// `c = a · b + beta · c` with `a: m×k`, `b: k×n`, `c: m×n` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Mat, b: Mat, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    assert!(a.max_offset(m, k) < a.data.len());
    assert!(b.max_offset(k, n) < b.data.len());
    // SAFETY: the asserts above bound every index dgemm touches within the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
