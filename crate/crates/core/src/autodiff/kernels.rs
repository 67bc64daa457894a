//! Plain loops for the dense products. Summation order is fixed, so results
//! are bitwise reproducible.

/// `out[n×m] += a[n×k] · b[k×m]`
///
/// Each output entry accumulates its `k` products in index order; the
/// four-way unrolling below keeps that order, it only saves stores.
pub(crate) fn mm(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        let arow = &a[i * k..(i + 1) * k];
        axpy_rows(orow, |p| arow[p], |p| &b[p * m..(p + 1) * m], k);
    }
}

/// `out[n×k] += a[n×m] · b[k×m]ᵀ`
pub(crate) fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize, k: usize) {
    let mut bt = alloc::vec![0.0; m * k];
    for j in 0..k {
        for p in 0..m {
            bt[p * k + j] = b[j * m + p];
        }
    }
    mm(a, &bt, out, n, m, k);
}

/// `out[k×m] += a[n×k]ᵀ · b[n×m]`
pub(crate) fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for p in 0..k {
        let orow = &mut out[p * m..(p + 1) * m];
        axpy_rows(orow, |i| a[i * k + p], |i| &b[i * m..(i + 1) * m], n);
    }
}

/// `out += Σ_r coef(r) · row(r)` for `r` in `0..count`, summed in order.
#[inline(always)]
fn axpy_rows<'b>(out: &mut [f64], coef: impl Fn(usize) -> f64, row: impl Fn(usize) -> &'b [f64], count: usize) {
    let w = out.len();
    let mut r = 0;
    while r + 4 <= count {
        let (c0, c1, c2, c3) = (coef(r), coef(r + 1), coef(r + 2), coef(r + 3));
        let (r0, r1, r2, r3) = (&row(r)[..w], &row(r + 1)[..w], &row(r + 2)[..w], &row(r + 3)[..w]);
        for j in 0..w {
            out[j] = out[j] + c0 * r0[j] + c1 * r1[j] + c2 * r2[j] + c3 * r3[j];
        }
        r += 4;
    }
    while r < count {
        let (c, rr) = (coef(r), &row(r)[..w]);
        for j in 0..w {
            out[j] += c * rr[j];
        }
        r += 1;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Numerically stable `ln Σ exp(row)`.
pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = row.iter().map(|&x| libm::exp(x - max)).sum();
    max + libm::log(sum)
}

/// In-place stable softmax over the first `valid` entries; the rest are zeroed.
pub(crate) fn softmax_prefix(row: &mut [f64], valid: usize) {
    let max = row[..valid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in &mut row[..valid] {
        *x = libm::exp(*x - max);
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in &mut row[..valid] {
        *x *= inv;
    }
    row[valid..].fill(0.0);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_agree_on_small_case() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        mm(&a, &b, &mut out, 2, 2, 2);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
        let mut nt = [0.0; 4];
        mm_nt(&a, &b, &mut nt, 2, 2, 2);
        assert_eq!(nt, [17.0, 23.0, 39.0, 53.0]);
        let mut tn = [0.0; 4];
        mm_tn(&a, &b, &mut tn, 2, 2, 2);
        assert_eq!(tn, [26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn dot_handles_tails() {
        let a: alloc::vec::Vec<f64> = (1..=7).map(f64::from).collect();
        assert_eq!(dot(&a, &a), 140.0);
    }
}
