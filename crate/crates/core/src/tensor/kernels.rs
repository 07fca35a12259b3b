//! Slice-level numeric kernels shared by the tape ops and the tape-free
//! inference path. Keeping a single implementation means both paths produce
//! bitwise-identical results.

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row_c = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let row_b = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in row_c.iter_mut().zip(row_b) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
    c
}

/// `da[m×k] += dc[m×n] · bᵀ`.
pub fn matmul_grad_a(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row_dc = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            da[i * k + p] += dot(row_dc, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `db[k×n] += aᵀ · dc[m×n]`.
pub fn matmul_grad_b(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row_dc = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let row_db = &mut db[p * n..(p + 1) * n];
            for (d, &g) in row_db.iter_mut().zip(row_dc) {
                *d += a_ip * g;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place numerically stable softmax (max subtraction).
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Log-softmax of one row, returned as a new vector.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes `x` into `out` with learned `gain`/`bias`. Fills `xhat` and
/// returns the reciprocal standard deviation, both needed by the backward rule.
pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64], xhat: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for j in 0..x.len() {
        xhat[j] = (x[j] - mean) * rstd;
        out[j] = xhat[j] * gain[j] + bias[j];
    }
    rstd
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Logistic function, clamped so the result stays strictly inside (0, 1)
/// even where f64 would round to an endpoint.
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// One query row of multi-head causal attention against `n_keys` cached
/// key/value rows (each of width `q.len()`). Writes the attended output into
/// `out` and the per-head probabilities into `probs` (`heads × n_keys`).
pub fn attend_row(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    n_keys: usize,
    heads: usize,
    out: &mut [f64],
    probs: &mut [f64],
) {
    let width = q.len();
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    out.iter_mut().for_each(|v| *v = 0.0);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = &q[cols.clone()];
        let p = &mut probs[h * n_keys..(h + 1) * n_keys];
        for (j, pj) in p.iter_mut().enumerate() {
            *pj = dot(qh, &keys[j * width + cols.start..j * width + cols.end]) * scale;
        }
        softmax_in_place(p);
        let oh = &mut out[cols.clone()];
        for (j, &pj) in p.iter().enumerate() {
            let vj = &values[j * width + cols.start..j * width + cols.end];
            for (o, &v) in oh.iter_mut().zip(vj) {
                *o += pj * v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], &[0.0, 1.0], 2, 2, 1);
        assert_eq!(c, vec![2.0, 4.0]);
    }

    #[test]
    fn softmax_handles_large_inputs() {
        let mut r = [1000.0, 1000.0];
        softmax_in_place(&mut r);
        assert_eq!(r, [0.5, 0.5]);
    }

    #[test]
    fn sigmoid_is_symmetric() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3.0) + sigmoid(-3.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-800.0) > 0.0);
        assert!(sigmoid(800.0) < 1.0);
    }
}
