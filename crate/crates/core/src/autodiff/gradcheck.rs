//! Central finite-difference verification of backward passes.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Finite-difference step used by [`grad_check`] and [`grad_check_many`].
pub const FD_STEP: f64 = 1e-5;

/// Entries whose analytic and numeric gradients are both below
/// `REL_FLOOR * max(1, |f|)` are compared on an absolute scale. Rounding in
/// the difference quotient grows with `|f|`, so tiny entries of a large
/// function value cannot be resolved any better than that.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub index: usize,
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    /// Flat entry with the largest relative error.
    pub worst_entry: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn max_relative_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_relative_error).fold(0.0, f64::max)
    }
}

/// Fourth-order central difference, one coordinate at a time:
/// `(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`.
///
/// The plain two-point stencil has `O(h^2)` truncation error, which is
/// visible on small gradient entries of sharply curved functions such as
/// temperature-scaled similarities.
pub fn central_difference<F>(f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            let mut at = |offset: f64| {
                x[i] = orig + offset;
                f(&x)
            };
            let (p1, m1, p2, m2) = (at(step), at(-step), at(2.0 * step), at(-2.0 * step));
            x[i] = orig;
            (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step)
        })
        .collect()
}

/// Checks the backward pass of a scalar function of one tensor.
pub fn grad_check<F>(function: F, point: &Tensor, relative_tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| function(g, vars[0]), std::slice::from_ref(point), relative_tolerance)
}

/// Checks the backward pass of a scalar function of several tensors, each
/// entering the graph as a gradient-tracking leaf.
pub fn grad_check_many<F>(function: F, points: &[Tensor], relative_tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if relative_tolerance <= 0.0 {
        return Err(Error::invalid("grad_check: tolerance must be positive"));
    }
    let evaluate = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let root = function(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|t| g.leaf(t.clone())).collect();
    let root = function(&mut g, &vars)?;
    let grads = g.backward(root)?;
    let floor = REL_FLOOR * g.value(root).item().abs().max(1.0);

    let mut tensors = Vec::with_capacity(points.len());
    let mut work: Vec<Tensor> = points.to_vec();
    for (index, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var);
        let mut check = TensorCheck {
            index,
            max_relative_error: 0.0,
            max_abs_error: 0.0,
            worst_entry: 0,
            passed: true,
        };
        for entry in 0..analytic.len() {
            let orig = work[index].data()[entry];
            let mut at = |offset: f64| -> Result<f64> {
                work[index].data_mut()[entry] = orig + offset;
                evaluate(&work)
            };
            let (p1, m1) = (at(FD_STEP)?, at(-FD_STEP)?);
            let (p2, m2) = (at(2.0 * FD_STEP)?, at(-2.0 * FD_STEP)?);
            work[index].data_mut()[entry] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * FD_STEP);
            let abs = (analytic[entry] - numeric).abs();
            let rel = abs / analytic[entry].abs().max(numeric.abs()).max(floor);
            check.max_abs_error = check.max_abs_error.max(abs);
            if rel > check.max_relative_error {
                check.max_relative_error = rel;
                check.worst_entry = entry;
            }
        }
        check.passed = check.max_relative_error < relative_tolerance;
        tensors.push(check);
    }
    Ok(GradCheckReport {
        tensors,
        tolerance: relative_tolerance,
    })
}
