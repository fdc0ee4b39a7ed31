//! Central-difference gradient checking.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Builds the expression over fresh parameter leaves and returns its value
/// together with the gradient of every parameter.
pub fn evaluate_with_gradients<F>(params: &[Tensor], f: F) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = g.scalar(out)?;
    let grads = g.backward(out)?;
    let per_param = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();
    Ok((value, per_param))
}

fn evaluate<F>(params: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.scalar(out)
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
    pub max_relative_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub value: f64,
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_relative_error)
            .fold(0.0, f64::max)
    }
}

/// Finite-difference formula used as the reference derivative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `D(h) = (f(x+h) - f(x-h)) / 2h`, error `O(h^2)`.
    #[default]
    Central,
    /// `(4 D(h/2) - D(h)) / 3`, error `O(h^4)`.
    Richardson,
}

/// Compares reverse-mode gradients against `(f(x+h) - f(x-h)) / 2h` for
/// every coordinate of every parameter.
pub fn grad_check<F>(params: &[Tensor], f: F, h: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_with(params, f, h, tolerance, Stencil::Central)
}

pub fn grad_check_with<F>(
    params: &[Tensor],
    f: F,
    h: f64,
    tolerance: f64,
    stencil: Stencil,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    let (value, analytic) = evaluate_with_gradients(params, &f)?;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.into_iter().enumerate() {
        let mut numeric = Tensor::zeros(grad.shape());
        let mut worst = 0.0f64;
        for k in 0..work[pi].len() {
            let mut central = |step: f64| -> Result<f64> {
                let orig = work[pi].data()[k];
                work[pi].data_mut()[k] = orig + step;
                let plus = evaluate(&work, &f)?;
                work[pi].data_mut()[k] = orig - step;
                let minus = evaluate(&work, &f)?;
                work[pi].data_mut()[k] = orig;
                Ok((plus - minus) / (2.0 * step))
            };
            let d = match stencil {
                Stencil::Central => central(h)?,
                Stencil::Richardson => {
                    let coarse = central(h)?;
                    (4.0 * central(h / 2.0)? - coarse) / 3.0
                }
            };
            numeric.data_mut()[k] = d;
            worst = worst.max(relative_error(grad.data()[k], d));
        }
        checks.push(ParamCheck {
            index: pi,
            analytic: grad,
            numeric,
            max_relative_error: worst,
        });
    }
    let passed = checks.iter().all(|c| c.max_relative_error <= tolerance);
    Ok(GradCheckReport {
        value,
        params: checks,
        tolerance,
        passed,
    })
}
