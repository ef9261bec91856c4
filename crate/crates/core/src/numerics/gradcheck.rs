/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Max over parameters of `|g_a - g_fd| / max(1, |g_a|, |g_fd|)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Checks the analytic gradient returned by `f` at `params` against central
/// finite differences with step `eps`.
///
/// `f` maps a parameter vector to `(value, analytic gradient)` and must be
/// deterministic.
pub fn grad_check<F>(mut f: F, params: &[f64], eps: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    assert!(
        (1e-6..=1e-3).contains(&eps),
        "finite-difference step {eps} outside [1e-6, 1e-3]"
    );
    let (_, analytic) = f(params);
    assert_eq!(analytic.len(), params.len(), "gradient length mismatch");
    let mut x = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: params.len(),
    };
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let (plus, _) = f(&x);
        x[i] = orig - eps;
        let (minus, _) = f(&x);
        x[i] = orig;
        let fd = (plus - minus) / (2.0 * eps);
        let ga = analytic[i];
        let err = (ga - fd).abs() / 1f64.max(ga.abs()).max(fd.abs());
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    report
}
