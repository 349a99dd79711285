use super::Scalar;

/// Strided matrix view: `(buffer, row stride, column stride)`.
pub(crate) type View<'a, T> = (&'a [T], isize, isize);

fn max_index(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize
}

/// `c = alpha * a[m,k] * b[k,n] + beta * c[m,n]` with bounds checked
/// against the strided extents.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: View<'_, T>,
    b: View<'_, T>,
    beta: T,
    c: &mut [T],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.1 >= 0 && a.2 >= 0 && b.1 >= 0 && b.2 >= 0 && rsc >= 0 && csc >= 0);
    if k > 0 {
        assert!(max_index(m, k, a.1, a.2) < a.0.len(), "gemm: lhs out of bounds");
        assert!(max_index(k, n, b.1, b.2) < b.0.len(), "gemm: rhs out of bounds");
    }
    assert!(max_index(m, n, rsc, csc) < c.len(), "gemm: output out of bounds");
    // SAFETY: all reachable indices were checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        )
    }
}
