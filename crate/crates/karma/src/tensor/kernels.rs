//! Shared numeric kernels.
//!
//! Both the autodiff graph and the plain (no-graph) scoring paths in the
//! reward and policy models call these, so the two paths agree bit for bit.

/// `out += a (n x k) * b (k x m)`, row-major.
pub(crate) fn matmul_acc(a: &[f32], b: &[f32], n: usize, k: usize, m: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * m..(i + 1) * m];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_ip * b_pj;
            }
        }
    }
}

pub(crate) fn matmul(a: &[f32], b: &[f32], n: usize, k: usize, m: usize) -> Vec<f32> {
    let mut out = vec![0.0; n * m];
    matmul_acc(a, b, n, k, m, &mut out);
    out
}

/// `out += a^T (k x n)^T=(n x k)... ` transpose-first product: `a (k x n)` read
/// column-major as the left operand, i.e. computes `a^T * b` with
/// `a: (k x n)`, `b: (k x m)`, result `(n x m)`.
pub(crate) fn matmul_at_b(a: &[f32], b: &[f32], k: usize, n: usize, m: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), k * n);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for p in 0..k {
        let a_row = &a[p * n..(p + 1) * n];
        let b_row = &b[p * m..(p + 1) * m];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == 0.0 {
                continue;
            }
            let out_row = &mut out[i * m..(i + 1) * m];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_pi * b_pj;
            }
        }
    }
}

/// `out += a (n x k) * b^T` with `b: (m x k)`, result `(n x m)`.
pub(crate) fn matmul_a_bt(a: &[f32], b: &[f32], n: usize, k: usize, m: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * m..(i + 1) * m];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (&x, &y) in a_row.iter().zip(b_row.iter()) {
                acc += x * y;
            }
            *o += acc;
        }
    }
}

/// Numerically stable log-softmax of one row.
pub(crate) fn log_softmax_row(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for &v in row {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        *o = v - lse;
    }
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax_row(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Sigmoid that avoids overflow on both tails.
pub(crate) fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let a = vec![3.0, -1.0, 2.5, 0.5];
        assert_eq!(matmul(&eye, &a, 2, 2, 2), a);
    }

    #[test]
    fn transposed_products_agree_with_plain() {
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = vec![1.0, -1.0, 0.5, 2.0, -2.0, 1.5]; // 3x2
        // a^T * (a*b) via matmul_at_b equals matmul on materialized transpose
        let ab = matmul(&a, &b, 2, 3, 2); // 2x2
        let mut out1 = vec![0.0; 3 * 2];
        matmul_at_b(&a, &ab, 2, 3, 2, &mut out1);
        let a_t = vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3x2
        let out2 = matmul(&a_t, &ab, 3, 2, 2);
        for (x, y) in out1.iter().zip(out2.iter()) {
            assert!((x - y).abs() < 1e-6);
        }

        // (a*b) * b^T via matmul_a_bt equals matmul on materialized transpose
        let mut out3 = vec![0.0; 2 * 3];
        matmul_a_bt(&ab, &b, 2, 2, 3, &mut out3);
        let b_t = vec![1.0, 0.5, -2.0, -1.0, 2.0, 1.5]; // 2x3
        let out4 = matmul(&ab, &b_t, 2, 2, 3);
        for (x, y) in out3.iter().zip(out4.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_matches_log_softmax() {
        let row = vec![0.3, -1.2, 2.0, 0.0];
        let mut p = vec![0.0; 4];
        let mut lp = vec![0.0; 4];
        softmax_row(&row, &mut p);
        log_softmax_row(&row, &mut lp);
        for (a, b) in p.iter().zip(lp.iter()) {
            assert!((a.ln() - b).abs() < 1e-6);
        }
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sigmoid_tails_do_not_overflow() {
        assert!(stable_sigmoid(100.0) <= 1.0);
        assert!(stable_sigmoid(-100.0) >= 0.0);
        assert!((stable_sigmoid(0.0) - 0.5).abs() < 1e-7);
    }
}
