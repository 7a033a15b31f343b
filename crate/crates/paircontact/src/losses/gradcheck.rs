//! Central finite-difference verification of analytic gradients.

/// Worst-coordinate outcome of a gradient check.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error with an absolute-error fallback for near-zero pairs.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale > 1e-6 {
        (a - b).abs() / scale
    } else {
        (a - b).abs()
    }
}

/// Compare `analytic` against central differences of `f` at `theta`, on the
/// coordinates in `sample` (all coordinates when empty).
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    analytic: &[f64],
    step: f64,
    sample: &[usize],
) -> GradCheckReport {
    assert_eq!(theta.len(), analytic.len(), "theta vs gradient length");
    let all: Vec<usize>;
    let coords: &[usize] = if sample.is_empty() {
        all = (0..theta.len()).collect();
        &all
    } else {
        sample
    };
    let mut work = theta.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        checked: coords.len(),
    };
    for &i in coords {
        let orig = work[i];
        work[i] = orig + step;
        let fp = f(&work);
        work[i] = orig - step;
        let fm = f(&work);
        work[i] = orig;
        let fd = (fp - fm) / (2.0 * step);
        let err = relative_error(fd, analytic[i]);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = i;
        }
    }
    report
}
