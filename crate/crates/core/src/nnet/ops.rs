//! Dense row-major kernels shared by the forward and backward passes.

use super::Real;

#[inline]
pub(crate) fn lit<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("finite literal")
}

/// `a [m,k] @ b [k,n] -> [m,n]`
pub(crate) fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `acc [k,n] += a^T @ d` for `a [m,k]`, `d [m,n]`.
pub(crate) fn add_at_b<F: Real>(acc: &mut [F], a: &[F], d: &[F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &d[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            for (o, &dv) in acc[p * n..(p + 1) * n].iter_mut().zip(drow) {
                *o += av * dv;
            }
        }
    }
}

/// `d [m,n] @ w^T -> [m,k]` for `w [k,n]`.
pub(crate) fn matmul_bt<F: Real>(d: &[F], w: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * k];
    for i in 0..m {
        let drow = &d[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = dot(drow, &w[p * n..(p + 1) * n]);
        }
    }
    out
}

pub(crate) fn add_bias<F: Real>(x: &mut [F], bias: &[F]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// `acc [n] += column sums of d [m,n]`.
pub(crate) fn add_col_sums<F: Real>(acc: &mut [F], d: &[F]) {
    for row in d.chunks(acc.len()) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

#[inline]
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |s, (&x, &y)| s + x * y)
}

/// Numerically stable softmax of one row.
pub fn softmax<F: Real>(x: &[F]) -> Vec<F> {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax<F: Real>(x: &[F]) -> Vec<F> {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = x.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
    x.iter().map(|&v| v - lse).collect()
}

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) struct LayerNormCache<F> {
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

pub(crate) fn layer_norm<F: Real>(x: &[F], gain: &[F], bias: &[F]) -> (Vec<F>, LayerNormCache<F>) {
    let d = gain.len();
    let n = x.len() / d;
    let inv_d = lit::<F>(1.0 / d as f64);
    let eps = lit::<F>(LN_EPS);
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = Vec::with_capacity(n);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let r = F::one() / (var + eps).sqrt();
        rstd.push(r);
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            y[i * d + j] = h * gain[j] + bias[j];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

/// Returns dx and accumulates into the gain/bias gradients.
pub(crate) fn layer_norm_backward<F: Real>(
    dy: &[F],
    cache: &LayerNormCache<F>,
    gain: &[F],
    dgain: &mut [F],
    dbias: &mut [F],
) -> Vec<F> {
    let d = gain.len();
    let n = dy.len() / d;
    let inv_d = lit::<F>(1.0 / d as f64);
    let mut dx = vec![F::zero(); dy.len()];
    for i in 0..n {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            let g = dyr[j] * gain[j];
            mean_dxhat += g;
            mean_dxhat_xhat += g * xh[j];
        }
        mean_dxhat = mean_dxhat * inv_d;
        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
        let r = cache.rstd[i];
        for j in 0..d {
            dx[i * d + j] = r * (dyr[j] * gain[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<F: Real>(x: F) -> F {
    let c = lit::<F>(GELU_C);
    let a = lit::<F>(GELU_A);
    let half = lit::<F>(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<F: Real>(x: F) -> F {
    let c = lit::<F>(GELU_C);
    let a = lit::<F>(GELU_A);
    let half = lit::<F>(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + lit::<F>(3.0) * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![4.0, 5.0, 10.0, 11.0]);
        assert_eq!(matmul_bt(&[1.0, 1.0], &b, 1, 3, 2), vec![1.0, 1.0, 2.0]);
        let mut acc = vec![0.0; 3];
        add_at_b(&mut acc, &a, &[1.0, 2.0], 2, 3, 1);
        assert_eq!(acc, vec![9.0, 12.0, 15.0]);
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softmax_and_log_softmax_agree() {
        let x = [1000.0f64, 999.0, -5.0];
        let p = softmax(&x);
        let lp = log_softmax(&x);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in p.iter().zip(&lp) {
            assert!((a.ln() - b).abs() < 1e-9 || *a == 0.0);
        }
    }
}
