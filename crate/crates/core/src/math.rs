//! Small numeric helpers shared across modules.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit length in place. A zero vector is left untouched.
pub fn normalize_in_place(v: &mut [f64]) {
    let n = l2_norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// log(sum(exp(x_i))) computed without overflow.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax of `scores / temperature`, stable under large magnitudes.
pub fn softmax_with_temperature(scores: &[f64], temperature: f64) -> Vec<f64> {
    debug_assert!(temperature > 0.0);
    let scaled: Vec<f64> = scores.iter().map(|&s| s / temperature).collect();
    let lse = log_sum_exp(&scaled);
    scaled.iter().map(|&s| (s - lse).exp()).collect()
}

/// Unit-normalized mean of the selected embedding rows. Returns a zero
/// vector when `tokens` is empty so the caller's dot products vanish.
pub fn normalized_mean(rows: &[Vec<f64>], tokens: &[usize], dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    if tokens.is_empty() {
        return m;
    }
    for &t in tokens {
        for (mi, ri) in m.iter_mut().zip(&rows[t]) {
            *mi += ri;
        }
    }
    let inv = 1.0 / tokens.len() as f64;
    for mi in m.iter_mut() {
        *mi *= inv;
    }
    normalize_in_place(&mut m);
    m
}
