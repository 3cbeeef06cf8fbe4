//! Dense matrix kernels. Each output row is produced by one closure call with
//! a fixed inner reduction order, so the parallel and sequential paths agree
//! bitwise.

use crate::parallel::for_each_row;

/// `a[m x k] * b[k x n]`
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for_each_row(&mut out, n, m * k * n, |i, row| {
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `a[m x k] * b[n x k]^T`
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for_each_row(&mut out, n, m * k * n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = ar
                .iter()
                .zip(&b[j * k..(j + 1) * k])
                .map(|(x, y)| x * y)
                .sum();
        }
    });
    out
}

/// `a[k x m]^T * b[k x n]`
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for_each_row(&mut out, n, m * k * n, |i, row| {
        for p in 0..k {
            let av = a[p * m + i];
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    });
    out
}
