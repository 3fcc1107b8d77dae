//! Finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Step of the central-difference stencil.
    pub eps: f64,
    /// Cap on checked coordinates per tensor; `None` checks everything.
    pub max_coords_per_tensor: Option<usize>,
    /// Gradients smaller than this are compared in absolute terms.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            max_coords_per_tensor: None,
            abs_floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Coordinates to probe: all of them, or an even stride plus the largest
/// analytic gradients so sparse (embedding) gradients are exercised.
fn coords(len: usize, grad: Option<&Tensor<f64>>, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(cap) if len > cap => {
            let half = cap / 2;
            let mut out: Vec<usize> = (0..half).map(|k| k * len / half.max(1)).collect();
            if let Some(g) = grad {
                let mut order: Vec<usize> = (0..len).collect();
                order.sort_by(|&a, &b| g.data[b].abs().total_cmp(&g.data[a].abs()));
                out.extend(order.into_iter().take(cap - half));
            }
            out.sort_unstable();
            out.dedup();
            out
        }
        _ => (0..len).collect(),
    }
}

/// Compare reverse-mode gradients of the scalar built by `f` against
/// fourth-order central differences and return the worst relative error.
pub fn finite_difference_check<F>(
    f: F,
    params: &[Tensor<f64>],
    options: GradCheckOptions,
) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NnError>,
{
    let h = options.eps;
    if !(h > 0.0) || !h.is_finite() {
        return Err(NnError::InvalidArgument(format!("finite-difference step {h}")));
    }
    let eval = |ps: &[Tensor<f64>]| -> Result<f64, NnError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let g = grads.get(*v);
        for i in coords(params[k].len(), g, options.max_coords_per_tensor) {
            let x0 = params[k].data[i];
            let mut at = |delta: f64| -> Result<f64, NnError> {
                work[k].data[i] = x0 + delta;
                let r = eval(&work);
                work[k].data[i] = x0;
                r
            };
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let analytic = g.map_or(0.0, |g| g.data[i]);
            let denom = analytic.abs().max(numeric.abs()).max(options.abs_floor);
            let rel = (analytic - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.worst = (k, i);
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let a = Tensor::from_f64(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.25, -1.0]);
        let x = Tensor::from_f64(3, 1, &[0.3, -0.7, 1.1]);
        let r = finite_difference_check(
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                Ok(t.sum_all(y))
            },
            &[a, x],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-10, "{r:?}");
    }

    #[test]
    fn invalid_step() {
        let x = Tensor::from_f64(1, 1, &[1.0]);
        let opts = GradCheckOptions {
            eps: 0.0,
            ..Default::default()
        };
        assert!(finite_difference_check(|t, v| Ok(t.sum_all(v[0])), &[x], opts).is_err());
    }
}
