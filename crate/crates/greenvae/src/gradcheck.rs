//! Finite-difference verification of tape gradients. The numeric side always
//! runs in 64-bit shadow mode; the analytic side runs at whatever precision
//! the caller's closure uses.

/// Outcome of a finite-difference sweep over one parameter vector.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Relative error per parameter element.
    pub per_param: Vec<f64>,
    pub max_rel_err: f64,
    pub pass: bool,
}

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs()).max(1e-3);
    (a - n).abs() / scale
}

/// Central-difference check of `analytic` (loss and gradient at the caller's
/// precision) against `numeric` (64-bit loss only), perturbing each parameter
/// by `eps`. Fails iff any element's relative error exceeds `tol`.
pub fn gradient_check(
    analytic: impl Fn(&[f64]) -> (f64, Vec<f64>),
    numeric: impl Fn(&[f64]) -> f64,
    params: &[f64],
    eps: f64,
    tol: f64,
) -> GradCheckReport {
    assert!(eps > 0.0, "gradient_check: eps must be positive");
    let (_, grad) = analytic(params);
    assert_eq!(
        grad.len(),
        params.len(),
        "gradient_check: analytic gradient length {} vs {} params",
        grad.len(),
        params.len()
    );
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel_err: f64 = 0.0;
    let mut shifted = params.to_vec();
    for i in 0..params.len() {
        shifted[i] = params[i] + eps;
        let up = numeric(&shifted);
        shifted[i] = params[i] - eps;
        let down = numeric(&shifted);
        shifted[i] = params[i];
        let fd = (up - down) / (2.0 * eps);
        let err = rel_err(grad[i], fd);
        max_rel_err = max_rel_err.max(err);
        per_param.push(err);
    }
    GradCheckReport {
        per_param,
        max_rel_err,
        pass: max_rel_err < tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes_tight() {
        let f = |p: &[f64]| p.iter().map(|x| x * x).sum::<f64>();
        let analytic = |p: &[f64]| (f(p), p.iter().map(|x| 2.0 * x).collect());
        let report = gradient_check(analytic, f, &[0.5, -1.5, 2.0], 1e-5, 1e-6);
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn corrupted_rule_fails() {
        let f = |p: &[f64]| p.iter().map(|x| x * x).sum::<f64>();
        // Wrong by a factor of 3.
        let analytic = |p: &[f64]| (f(p), p.iter().map(|x| 6.0 * x).collect());
        let report = gradient_check(analytic, f, &[0.5, -1.5, 2.0], 1e-5, 1e-4);
        assert!(!report.pass);
    }
}
