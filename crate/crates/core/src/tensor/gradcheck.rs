//! Central finite-difference check of backward-pass gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared on an absolute rather than a
/// relative scale.
const MAGNITUDE_FLOOR: f64 = 1e-4;

/// Probes whose ±eps evaluations take a different discrete branch (relu mask,
/// argmax) than the base point are retried with eps shrunk by 10, at most
/// this many times, before the component is skipped.
const MAX_SHRINKS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOutcome {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Components skipped because every probe straddled a kink.
    pub skipped: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-4)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

fn evaluate<F>(f: &F, points: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_branch_tracking();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = scalar_output(&g, out)?;
    Ok((value, g.branch_signature()))
}

fn scalar_output(g: &Graph<f64>, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Shape(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Compares the backward-pass gradient of a scalar function of several tensors
/// with central differences, component by component.
pub fn grad_check_many<F>(f: F, points: &[Tensor<f64>], eps: f64) -> Result<GradCheckOutcome>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eps must be positive, got {eps}"
        )));
    }
    let mut g = Graph::with_branch_tracking();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_output(&g, out)?;
    let base_sig = g.branch_signature();
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .expect("trainable leaves always get a gradient")
                .clone()
        })
        .collect();

    let mut outcome = GradCheckOutcome {
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut probe = points.to_vec();
    for t in 0..points.len() {
        for i in 0..points[t].numel() {
            let orig = points[t].data()[i];
            let mut step = eps;
            let mut numeric = None;
            for _ in 0..=MAX_SHRINKS {
                probe[t].data_mut()[i] = orig + step;
                let (fp, sp) = evaluate(&f, &probe)?;
                probe[t].data_mut()[i] = orig - step;
                let (fm, sm) = evaluate(&f, &probe)?;
                probe[t].data_mut()[i] = orig;
                if sp == base_sig && sm == base_sig {
                    numeric = Some((fp - fm) / (2.0 * step));
                    break;
                }
                step /= 10.0;
            }
            match numeric {
                Some(n) => {
                    let err = relative_error(analytic[t].data()[i], n);
                    outcome.checked += 1;
                    if err > outcome.max_relative_error || err.is_nan() {
                        outcome.max_relative_error = err;
                    }
                }
                None => outcome.skipped += 1,
            }
        }
    }
    Ok(outcome)
}

/// Single-tensor form of [`grad_check_many`]; returns the worst relative error.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let outcome = grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(point), eps)?;
    Ok(outcome.max_relative_error)
}
