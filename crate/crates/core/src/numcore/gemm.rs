//! Strided single-precision GEMM.

/// Row/column strides of a matrix view.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides {
    pub row: isize,
    pub col: isize,
}

impl Strides {
    pub const fn rows(ld: usize) -> Self {
        Strides {
            row: ld as isize,
            col: 1,
        }
    }

    /// View a row-major matrix with leading dimension `ld` as its transpose.
    pub const fn transposed(ld: usize) -> Self {
        Strides {
            row: 1,
            col: ld as isize,
        }
    }
}

fn extent(rows: usize, cols: usize, s: Strides) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * s.row.unsigned_abs() + (cols - 1) * s.col.unsigned_abs() + 1
}

/// Products up to this many multiply-adds skip the packed kernel, whose
/// buffer setup dominates at small sizes.
const SMALL_GEMM: usize = 16 * 1024;

/// Direct loops over bounds-checked views. With `beta == 0` the prior
/// contents of `c` are ignored.
#[allow(clippy::too_many_arguments)]
fn small_sgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    sa: Strides,
    b: &[f32],
    sb: Strides,
    beta: f32,
    c: &mut [f32],
    sc: Strides,
) {
    let at = |i: usize, j: usize, s: Strides| i * s.row as usize + j * s.col as usize;
    if beta != 1.0 {
        for i in 0..m {
            for j in 0..n {
                let out = &mut c[at(i, j, sc)];
                *out = if beta == 0.0 { 0.0 } else { beta * *out };
            }
        }
    }
    if sb.col == 1 && sc.col == 1 {
        // Rows of b are contiguous: axpy each into the output row.
        for i in 0..m {
            let row = &mut c[i * sc.row as usize..][..n];
            for p in 0..k {
                let av = alpha * a[at(i, p, sa)];
                let brow = &b[p * sb.row as usize..][..n];
                row.iter_mut().zip(brow).for_each(|(c, b)| *c += av * b);
            }
        }
    } else if sa.col == 1 && sb.row == 1 {
        // Rows of a and columns of b are contiguous: dot products.
        for i in 0..m {
            let arow = &a[i * sa.row as usize..][..k];
            for j in 0..n {
                let bcol = &b[j * sb.col as usize..][..k];
                c[at(i, j, sc)] += alpha * dot(arow, bcol);
            }
        }
    } else {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for p in 0..k {
                    acc += a[at(i, p, sa)] * b[at(p, j, sb)];
                }
                c[at(i, j, sc)] += alpha * acc;
            }
        }
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
pub(crate) fn dot(x: &[f32], y: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let tail: f32 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] += a[l] * b[l];
        }
    }
    acc.iter().sum::<f32>() + tail
}

/// `y += a * x`
pub(crate) fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

/// `c = alpha * a · b + beta * c` for an `m×k` by `k×n` product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    sa: Strides,
    b: &[f32],
    sb: Strides,
    beta: f32,
    c: &mut [f32],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(extent(m, k, sa) <= a.len(), "gemm: lhs view out of bounds");
    assert!(extent(k, n, sb) <= b.len(), "gemm: rhs view out of bounds");
    assert!(extent(m, n, sc) <= c.len(), "gemm: output view out of bounds");
    if m * k * n <= SMALL_GEMM {
        small_sgemm(m, k, n, alpha, a, sa, b, sb, beta, c, sc);
        return;
    }
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.row,
            sa.col,
            b.as_ptr(),
            sb.row,
            sb.col,
            beta,
            c.as_mut_ptr(),
            sc.row,
            sc.col,
        );
    }
}
