use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use super::AnalysisError;

/// `L(N) = (N / N_c)^α`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub alpha: f64,
    pub n_c: f64,
    /// `ln L − ln L̂` per point.
    pub residuals: Vec<f64>,
    pub r_squared: f64,
}

impl ScalingFit {
    pub fn predict(&self, n: f64) -> f64 {
        (n / self.n_c).powf(self.alpha)
    }
}

/// Ordinary least squares `y = slope·x + intercept`, plus R².
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64), AnalysisError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(AnalysisError::InvalidArgument("need at least 2 paired points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if !(sxx > 0.0) {
        return Err(AnalysisError::Degenerate("all x values equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - slope * a - intercept).powi(2))
        .sum();
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    Ok((slope, intercept, r2))
}

/// Log-log least squares on `(N, L)` points.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<ScalingFit, AnalysisError> {
    if points.len() < 2 {
        return Err(AnalysisError::InvalidArgument("need at least 2 points".into()));
    }
    if points.iter().any(|&(n, l)| !(n > 0.0 && l > 0.0)) {
        return Err(AnalysisError::InvalidArgument("N and L must be positive".into()));
    }
    let x: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (alpha, intercept, r_squared) = linear_fit(&x, &y)?;
    if alpha == 0.0 {
        return Err(AnalysisError::Degenerate("zero slope: N_c undefined".into()));
    }
    let residuals = x
        .iter()
        .zip(&y)
        .map(|(a, b)| b - (alpha * a + intercept))
        .collect();
    Ok(ScalingFit {
        alpha,
        n_c: (-intercept / alpha).exp(),
        residuals,
        r_squared,
    })
}

/// `L(N, D) = L∞ + A·N^(−α) + B·D^(−β)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointScalingFit {
    pub l_inf: f64,
    pub a: f64,
    pub alpha: f64,
    pub b: f64,
    pub beta: f64,
    /// Root-mean-square log residual.
    pub rmse_log: f64,
    pub starts: usize,
}

impl JointScalingFit {
    pub fn predict(&self, n: f64, d: f64) -> f64 {
        self.l_inf + self.a * n.powf(-self.alpha) + self.b * d.powf(-self.beta)
    }
}

/// Parameters in log space: (ln L∞, ln A, ln α, ln B, ln β).
type Theta = SVector<f64, 5>;

fn unpack(t: &Theta) -> [f64; 5] {
    [t[0].exp(), t[1].exp(), t[2].exp(), t[3].exp(), t[4].exp()]
}

fn residuals_and_jacobian(theta: &Theta, pts: &[(f64, f64, f64)]) -> (DVector<f64>, DMatrix<f64>) {
    let [l, a, al, b, be] = unpack(theta);
    let m = pts.len();
    let mut r = DVector::zeros(m);
    let mut j = DMatrix::zeros(m, 5);
    for (k, &(n, d, y)) in pts.iter().enumerate() {
        let tn = a * n.powf(-al);
        let td = b * d.powf(-be);
        let model = l + tn + td;
        r[k] = model.ln() - y.ln();
        j[(k, 0)] = l / model;
        j[(k, 1)] = tn / model;
        j[(k, 2)] = -tn * n.ln() * al / model;
        j[(k, 3)] = td / model;
        j[(k, 4)] = -td * d.ln() * be / model;
    }
    (r, j)
}

fn levenberg_marquardt(start: Theta, pts: &[(f64, f64, f64)]) -> Option<(Theta, f64)> {
    let mut theta = start;
    let (mut r, mut j) = residuals_and_jacobian(&theta, pts);
    let mut cost = r.norm_squared();
    if !cost.is_finite() {
        return None;
    }
    let mut lambda = 1e-3;
    for _ in 0..2000 {
        let jt = j.transpose();
        let g = &jt * &r;
        let h = &jt * &j;
        let mut accepted = false;
        for _ in 0..30 {
            let mut damped = SMatrix::<f64, 5, 5>::zeros();
            for p in 0..5 {
                for q in 0..5 {
                    damped[(p, q)] = h[(p, q)];
                }
                damped[(p, p)] += lambda * (h[(p, p)] + 1e-12);
            }
            let rhs = Theta::from_iterator(g.iter().map(|v| -v));
            let Some(step) = damped.lu().solve(&rhs) else {
                lambda *= 10.0;
                continue;
            };
            let cand = theta + step;
            let (rc, jc) = residuals_and_jacobian(&cand, pts);
            let c = rc.norm_squared();
            if c.is_finite() && c < cost {
                let improvement = cost - c;
                theta = cand;
                r = rc;
                j = jc;
                cost = c;
                lambda = (lambda * 0.3).max(1e-15);
                accepted = true;
                if improvement <= 1e-30 + 1e-15 * cost || step.norm() < 1e-13 {
                    return Some((theta, cost));
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    Some((theta, cost))
}

/// Nonlinear least squares on log losses with a deterministic grid of
/// starting points; the lowest-residual fit wins.
pub fn fit_joint_scaling(points: &[(f64, f64, f64)]) -> Result<JointScalingFit, AnalysisError> {
    if points.len() < 6 {
        return Err(AnalysisError::Degenerate(format!(
            "need at least 6 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|&(n, d, l)| !(n > 0.0 && d > 0.0 && l > 0.0)) {
        return Err(AnalysisError::InvalidArgument("N, D and L must be positive".into()));
    }
    let distinct = |f: fn(&(f64, f64, f64)) -> f64| {
        let mut v: Vec<f64> = points.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v.len()
    };
    if distinct(|p| p.0) < 2 || distinct(|p| p.1) < 2 {
        return Err(AnalysisError::Degenerate("need at least 2 distinct N and D values".into()));
    }
    let ls: Vec<f64> = points.iter().map(|p| p.2).collect();
    let lmin = ls.iter().cloned().fold(f64::INFINITY, f64::min);
    let lmax = ls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if (lmax - lmin) <= 1e-12 * lmax {
        return Err(AnalysisError::Degenerate("losses do not vary".into()));
    }
    let mut best: Option<(Theta, f64)> = None;
    let mut starts = 0;
    for &alpha in &[0.05, 0.2, 0.5, 1.0] {
        for &beta in &[0.05, 0.2, 0.5, 1.0] {
            for &floor in &[0.1, 0.6] {
                starts += 1;
                let l_inf = floor * lmin;
                // A, B from a linear solve at fixed exponents and floor.
                let m = points.len();
                let x = DMatrix::from_fn(m, 2, |k, c| {
                    if c == 0 {
                        points[k].0.powf(-alpha)
                    } else {
                        points[k].1.powf(-beta)
                    }
                });
                let y = DVector::from_iterator(m, points.iter().map(|p| p.2 - l_inf));
                let coef = x
                    .clone()
                    .svd(true, true)
                    .solve(&y, 1e-14)
                    .unwrap_or_else(|_| DVector::from_element(2, 1.0));
                let guess = |v: f64, fallback: f64| if v > 0.0 && v.is_finite() { v } else { fallback };
                let scale = (lmax - l_inf).max(1e-12);
                let start = Theta::new(
                    l_inf.ln(),
                    guess(coef[0], scale).ln(),
                    alpha.ln(),
                    guess(coef[1], scale).ln(),
                    beta.ln(),
                );
                if let Some((theta, cost)) = levenberg_marquardt(start, points) {
                    if best.as_ref().is_none_or(|b| cost < b.1) {
                        best = Some((theta, cost));
                    }
                }
            }
        }
    }
    let (theta, cost) = best.ok_or_else(|| AnalysisError::Degenerate("no start converged".into()))?;
    let [l_inf, a, alpha, b, beta] = unpack(&theta);
    if ![l_inf, a, alpha, b, beta].iter().all(|v| v.is_finite()) {
        return Err(AnalysisError::Degenerate("non-finite fit".into()));
    }
    Ok(JointScalingFit {
        l_inf,
        a,
        alpha,
        b,
        beta,
        rmse_log: (cost / points.len() as f64).sqrt(),
        starts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsoFlopCurve {
    pub compute: f64,
    /// `(N, D, predicted L)` on the log grid.
    pub points: Vec<(f64, f64, f64)>,
    pub n_opt: f64,
    pub d_opt: f64,
    pub l_opt: f64,
}

/// Training FLOPs per unit of `D` for a model of size `N`; the budget
/// constraint is `C = flops_per_token(N) · D`.
pub fn six_n(n: f64) -> f64 {
    6.0 * n
}

/// Closed-form compute-optimal size under `C = 6·N·D`.
pub fn isoflop_optimum_closed_form(fit: &JointScalingFit, compute: f64) -> f64 {
    let (a, al, b, be) = (fit.a, fit.alpha, fit.b, fit.beta);
    (al * a / (be * b)).powf(1.0 / (al + be)) * (compute / 6.0).powf(be / (al + be))
}

/// Predicted loss along the fixed-compute curve, swept over a log grid of
/// `N ∈ [1, N_max]` with `D = C / flops_per_token(N) ≥ 1`, then refined by
/// golden-section search around the grid minimum.
pub fn isoflop_curve(
    fit: &JointScalingFit,
    compute: f64,
    flops_per_token: &dyn Fn(f64) -> f64,
    grid_points: usize,
) -> Result<IsoFlopCurve, AnalysisError> {
    if !(compute > 0.0) || grid_points < 3 {
        return Err(AnalysisError::InvalidArgument("compute > 0 and >= 3 grid points required".into()));
    }
    // Largest N with at least one token.
    let mut hi = 1.0f64;
    if flops_per_token(1.0) > compute {
        return Err(AnalysisError::InvalidArgument(format!(
            "compute {compute:e} too small for N = 1, D = 1"
        )));
    }
    while flops_per_token(hi * 2.0) <= compute && hi < 1e30 {
        hi *= 2.0;
    }
    let (mut lo_b, mut hi_b) = (hi, hi * 2.0);
    for _ in 0..200 {
        let mid = (lo_b * hi_b).sqrt();
        if flops_per_token(mid) <= compute {
            lo_b = mid;
        } else {
            hi_b = mid;
        }
    }
    let n_max = lo_b;
    let eval = |ln_n: f64| {
        let n = ln_n.exp();
        let d = compute / flops_per_token(n);
        (n, d, fit.predict(n, d))
    };
    let span = n_max.ln();
    let points: Vec<(f64, f64, f64)> = (0..grid_points)
        .map(|k| eval(span * k as f64 / (grid_points - 1) as f64))
        .collect();
    let kmin = (0..points.len())
        .min_by(|&a, &b| points[a].2.total_cmp(&points[b].2))
        .expect("non-empty grid");
    let step = span / (grid_points - 1) as f64;
    let mut a = (kmin as f64 - 1.0).max(0.0) * step;
    let mut b = ((kmin + 1) as f64 * step).min(span);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    for _ in 0..200 {
        if eval(c).2 < eval(d).2 {
            b = d;
        } else {
            a = c;
        }
        c = b - g * (b - a);
        d = a + g * (b - a);
    }
    let (n_opt, d_opt, l_opt) = eval(0.5 * (a + b));
    Ok(IsoFlopCurve {
        compute,
        points,
        n_opt,
        d_opt,
        l_opt,
    })
}
