use crate::error::{Error, Result};

/// `c = op(a) · op(b) + beta · c` where `c` is `m × n` and the inner extent is `k`.
///
/// `a` is stored `m × k` (or `k × m` when `trans_a`), `b` is stored `k × n`
/// (or `n × k` when `trans_b`), all row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    gemm_strided(
        m,
        k,
        n,
        StridedRef::new(a, 0, rsa, csa),
        StridedRef::new(b, 0, rsb, csb),
        c,
        0,
        n as isize,
        beta,
    );
}

/// Read-only strided matrix view used for per-head attention products.
#[derive(Clone, Copy)]
pub(crate) struct StridedRef<'a> {
    data: &'a [f64],
    offset: usize,
    rs: isize,
    cs: isize,
}

impl<'a> StridedRef<'a> {
    pub(crate) fn new(data: &'a [f64], offset: usize, rs: isize, cs: isize) -> Self {
        Self {
            data,
            offset,
            rs,
            cs,
        }
    }
}

/// Strided GEMM; `c` is written row-major starting at `c_offset` with row stride `rsc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: StridedRef<'_>,
    b: StridedRef<'_>,
    c: &mut [f64],
    c_offset: usize,
    rsc: isize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |v: &StridedRef<'_>, r: usize, cc: usize| {
        v.offset as isize + (r as isize - 1) * v.rs + (cc as isize - 1) * v.cs
    };
    assert!(k == 0 || (last(&a, m, k) as usize) < a.data.len());
    assert!(k == 0 || (last(&b, k, n) as usize) < b.data.len());
    assert!(c_offset + (m - 1) * rsc as usize + n - 1 < c.len());
    if k == 0 {
        for i in 0..m {
            let row = c_offset + i * rsc as usize;
            for v in &mut c[row..row + n] {
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: every index touched by dgemm lies inside the bounds asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.rs,
            a.cs,
            b.data.as_ptr().add(b.offset),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr().add(c_offset),
            rsc,
            1,
        );
    }
}

/// `log Σ exp(v_i)` with max-shift stabilisation.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::arg("log_sum_exp of an empty vector"));
    }
    Ok(lse(v))
}

/// Unchecked variant; `-inf` entries are allowed and an all-`-inf` input yields `-inf`.
#[inline]
pub(crate) fn lse(v: &[f64]) -> f64 {
    if v.len() == 1 {
        return v[0];
    }
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[inline]
pub(crate) fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let z = lse(v);
    v.iter().map(|x| x - z).collect()
}

/// `gamma ⊙ (x − mean) / sqrt(var + eps) + beta` with population variance.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vec<f64>> {
    if gamma.len() != x.len() || beta.len() != x.len() {
        return Err(Error::arg(format!(
            "layer_norm length mismatch: x {}, gamma {}, beta {}",
            x.len(),
            gamma.len(),
            beta.len()
        )));
    }
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let (mean, rstd) = moments(x, eps);
    Ok(x
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| g * (v - mean) * rstd + b)
        .collect())
}

/// Mean and reciprocal standard deviation `1/sqrt(var + eps)`.
#[inline]
pub(crate) fn moments(x: &[f64], eps: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}
