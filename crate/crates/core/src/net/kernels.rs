//! Dense row-major kernels. Every loop has a fixed iteration order so results
//! are reproducible run to run.

use super::Real;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Dot product with eight independent partial sums.
#[inline]
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = F::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[m×n] = a[m×k] · b[k×n] + bias[n]`.
pub(crate) fn matmul_bias<F: Real>(a: &[F], b: &[F], bias: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        out.extend_from_slice(bias);
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip != F::zero() {
                axpy(aip, &b[p * n..(p + 1) * n], row);
            }
        }
    }
    out
}

/// `out[m×n] = a[m×k] · b[k×n]` with `b` given as `bt[n×k]` (row `j` of `bt` is column `j` of `b`).
pub(crate) fn matmul_bt<F: Real>(a: &[F], bt: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        out.extend(bt.chunks_exact(k).take(n).map(|col| dot(row, col)));
    }
    out
}

/// `out[m×n] = a[m×k] · b[k×n]` without bias.
pub(crate) fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip != F::zero() {
                axpy(aip, &b[p * n..(p + 1) * n], row);
            }
        }
    }
    out
}

/// `db[k×n] += aᵀ · dc` for `a[m×k]`, `dc[m×n]`.
pub(crate) fn acc_at_b<F: Real>(a: &[F], dc: &[F], db: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip != F::zero() {
                axpy(aip, dc_row, &mut db[p * n..(p + 1) * n]);
            }
        }
    }
}

/// `db[n] += column sums of dc[m×n]`.
pub(crate) fn acc_col_sums<F: Real>(dc: &[F], db: &mut [F], n: usize) {
    for row in dc.chunks_exact(n) {
        for (d, &x) in db.iter_mut().zip(row) {
            *d += x;
        }
    }
}

pub(crate) struct LnCache<F> {
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

pub(crate) fn layer_norm<F: Real>(x: &[F], gain: &[F], bias: &[F], d: usize) -> (Vec<F>, LnCache<F>) {
    let rows = x.len() / d;
    let mut out = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(rows);
    let inv_d = F::lift(1.0 / d as f64);
    for row in x.chunks_exact(d) {
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let r = F::one() / (var + F::lift(LN_EPS)).sqrt();
        rstd.push(r);
        for ((&v, &g), &b) in row.iter().zip(gain).zip(bias) {
            let h = (v - mean) * r;
            xhat.push(h);
            out.push(g * h + b);
        }
    }
    (out, LnCache { xhat, rstd })
}

/// Accumulates layer-norm parameter gradients and adds the input gradient into `dx`.
pub(crate) fn layer_norm_backward<F: Real>(
    dy: &[F],
    cache: &LnCache<F>,
    gain: &[F],
    dgain: &mut [F],
    dbias: &mut [F],
    dx: &mut [F],
    d: usize,
) {
    let inv_d = F::lift(1.0 / d as f64);
    let mut dxhat = vec![F::zero(); d];
    for (r, ((dy_row, xh_row), dx_row)) in dy
        .chunks_exact(d)
        .zip(cache.xhat.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .enumerate()
    {
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for j in 0..d {
            dgain[j] += dy_row[j] * xh_row[j];
            dbias[j] += dy_row[j];
            dxhat[j] = dy_row[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh_row[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let rstd = cache.rstd[r];
        for j in 0..d {
            dx_row[j] += rstd * (dxhat[j] - mean_dxhat - xh_row[j] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub(crate) fn gelu<F: Real>(x: F) -> F {
    let u = F::lift(GELU_C) * (x + F::lift(GELU_A) * x * x * x);
    F::lift(0.5) * x * (F::one() + u.tanh())
}

pub(crate) fn gelu_grad<F: Real>(x: F) -> F {
    let u = F::lift(GELU_C) * (x + F::lift(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = F::lift(GELU_C) * (F::one() + F::lift(3.0 * GELU_A) * x * x);
    F::lift(0.5) * (F::one() + t) + F::lift(0.5) * x * (F::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..19).map(|i| i as f64 * 0.5 - 3.0).collect();
        let b: Vec<f64> = (0..19).map(|i| (i * i) as f64 * 0.1).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn matmul_variants_agree() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).cos()).collect();
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let c1 = matmul(&a, &b, m, k, n);
        let c2 = matmul_bt(&a, &bt, m, k, n);
        let c3 = matmul_bias(&a, &b, &vec![0.0; n], m, k, n);
        for i in 0..m * n {
            assert!((c1[i] - c2[i]).abs() < 1e-12);
            assert_eq!(c1[i], c3[i]);
        }
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}
