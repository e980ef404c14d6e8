use super::Real;

/// Strided view of a row-major matrix buffer.
#[derive(Clone, Copy)]
pub(crate) struct MatView {
    pub offset: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatView {
    pub fn rows(cols: usize) -> Self {
        MatView { offset: 0, rs: cols as isize, cs: 1 }
    }

    /// The transpose of a row-major `[rows × cols]` buffer.
    pub fn transposed(cols: usize) -> Self {
        MatView { offset: 0, rs: 1, cs: cols as isize }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        let r = (rows.saturating_sub(1)) as isize * self.rs;
        let c = (cols.saturating_sub(1)) as isize * self.cs;
        self.offset + (r + c) as usize
    }
}

/// `c[m×n] (+)= a[m×k] · b[k×n]` over strided views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    av: MatView,
    b: &[T],
    bv: MatView,
    c: &mut [T],
    cv: MatView,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(av.max_index(m, k) < a.len().max(1) || k == 0, "gemm: lhs view out of bounds");
    assert!(bv.max_index(k, n) < b.len().max(1) || k == 0, "gemm: rhs view out of bounds");
    assert!(cv.max_index(m, n) < c.len(), "gemm: output view out of bounds");
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: views were bounds-checked above and `c` is a distinct &mut borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr().add(av.offset),
            av.rs,
            av.cs,
            b.as_ptr().add(bv.offset),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs,
            cv.cs,
        );
    }
}

/// Plain row-major product, `a[m×k] · b[k×n]`.
pub(crate) fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm(m, k, n, a, MatView::rows(k), b, MatView::rows(n), &mut c, MatView::rows(n), false);
    c
}

/// Numerically stable softmax of one strided slice, accumulated in f64.
pub(crate) fn softmax_strided<T: Real>(x: &[T], out: &mut [T], start: usize, len: usize, stride: usize) {
    let mut max = f64::NEG_INFINITY;
    for i in 0..len {
        max = max.max(x[start + i * stride].as_f64());
    }
    let mut sum = 0.0f64;
    for i in 0..len {
        let e = (x[start + i * stride].as_f64() - max).exp();
        out[start + i * stride] = T::of(e);
        sum += e;
    }
    for i in 0..len {
        let idx = start + i * stride;
        out[idx] = T::of(out[idx].as_f64() / sum);
    }
}

