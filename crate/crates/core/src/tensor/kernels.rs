//! Row-major dense kernels. `acc_*` variants accumulate into `out`.

/// `[m×k] · [k×n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    acc_matmul(&mut out, a, b, m, k, n);
    out
}

pub(crate) fn acc_matmul(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    gemm(out, a, b, m, k, n, (k, 1), (n, 1));
}

/// `[m×k] · [n×k]ᵀ`
pub(crate) fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    acc_matmul_bt(&mut out, a, b, m, k, n);
    out
}

pub(crate) fn acc_matmul_bt(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    gemm(out, a, b, m, k, n, (k, 1), (1, k));
}

/// `out[k×n] += aᵀ · b` with `a: [m×k]`, `b: [m×n]`.
pub(crate) fn acc_matmul_at(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    gemm(out, a, b, k, m, n, (1, k), (n, 1));
}

/// `out[m×n] += A · B` where `A` is `m×k` and `B` is `k×n`, each given as
/// (row stride, column stride) over its slice.
#[allow(clippy::too_many_arguments)]
fn gemm(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize, sa: (usize, usize), sb: (usize, usize)) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(out.len() >= m * n && a.len() >= m * k && b.len() >= k * n);
    // SAFETY: the strides address exactly the m×k, k×n and m×n elements the
    // assertion above guarantees are in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn softmax_rows(x: &[f64], cols: usize, causal: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (i, (row, orow)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let width = if causal { (i + 1).min(cols) } else { cols };
        let max = row[..width].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..width {
            let e = (row[j] - max).exp();
            orow[j] = e;
            total += e;
        }
        for v in &mut orow[..width] {
            *v /= total;
        }
    }
    out
}
