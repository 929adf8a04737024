//! Log-domain numeric helpers. All probability math in this crate runs in
//! log space; probabilities are materialized only inside explicit
//! distribution vectors.

/// log(sum(exp(values))) with the max-shift trick. Empty input gives -inf.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Shift `values` so that exp of them sums to one.
pub fn log_normalize_in_place(values: &mut [f64]) {
    let norm = log_sum_exp(values);
    for v in values.iter_mut() {
        *v -= norm;
    }
}

/// Numerically stable log(sigmoid(x)) = -log(1 + exp(-x)).
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Logistic sigmoid evaluated stably at both tails.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mixed absolute/relative closeness: |a - b| <= atol + rtol * |b|.
pub fn allclose(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    if !a.is_finite() || !b.is_finite() {
        return a == b;
    }
    (a - b).abs() <= atol + rtol * b.abs()
}
