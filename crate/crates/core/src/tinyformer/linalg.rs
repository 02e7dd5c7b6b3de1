//! Row-major dense kernels. Shapes are passed explicitly; slices must be at
//! least as long as the shapes imply.

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    out[..m * n].fill(0.0);
    matmul_acc(a, b, out, m, k, n);
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k×n] += aᵀ · b` with `a[m×k]`, `b[m×n]`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] = a[m×n] · bᵀ` with `b[k×n]`.
pub fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = dot(arow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `out[m×k] += a[m×n] · bᵀ` with `b[k×n]`.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += dot(arow, &b[p * n..(p + 1) * n]);
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the compiler vectorise without reassociation
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Adds `bias` to every row of `x[rows×bias.len()]`.
pub fn add_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// `out += column sums of x[rows×out.len()]`.
pub fn col_sum_acc(x: &[f64], out: &mut [f64]) {
    for row in x.chunks(out.len()) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// In-place row softmax of `x[rows×cols]`.
pub fn softmax_rows(x: &mut [f64], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Row-wise log-softmax cross-entropy for one row of logits. Returns the
/// loss and writes `softmax - onehot` into `grad`.
pub fn cross_entropy(logits: &[f64], target: usize, grad: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let log_z = max + sum.ln();
    for (g, &v) in grad.iter_mut().zip(logits) {
        *g = (v - log_z).exp();
    }
    grad[target] -= 1.0;
    log_z - logits[target]
}

pub fn argmax(x: &[f64]) -> usize {
    x.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_agree_with_naive_loops() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut out = vec![0.0; m * n];
        matmul(&a, &b, &mut out, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((out[i * n + j] - want).abs() < 1e-12);
            }
        }
        // aᵀ·c with c[m×n]
        let c: Vec<f64> = (0..m * n).map(|i| i as f64 * 0.1 - 0.5).collect();
        let mut tn = vec![0.0; k * n];
        matmul_tn_acc(&a, &c, &mut tn, m, k, n);
        for p in 0..k {
            for j in 0..n {
                let want: f64 = (0..m).map(|i| a[i * k + p] * c[i * n + j]).sum();
                assert!((tn[p * n + j] - want).abs() < 1e-12);
            }
        }
        // c·bᵀ with b[k×n] gives m×k
        let mut nt = vec![0.0; m * k];
        matmul_nt(&c, &b, &mut nt, m, n, k);
        for i in 0..m {
            for p in 0..k {
                let want: f64 = (0..n).map(|j| c[i * n + j] * b[p * n + j]).sum();
                assert!((nt[i * k + p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_and_cross_entropy() {
        let mut x = vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0];
        softmax_rows(&mut x, 3);
        assert!((x[..3].iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((x[3] - 1.0 / 3.0).abs() < 1e-15);
        let mut g = vec![0.0; 3];
        let loss = cross_entropy(&[0.0, 0.0, 0.0], 1, &mut g);
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        assert!((g[1] + 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(argmax(&[0.1, 0.7, 0.7, 0.2]), 1);
    }
}
