use super::graph::{FrozenGates, Graph, Var};
use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// (input index, flat coordinate, analytic, numeric) at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Check the gradient of a scalar function of one tensor.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var> + Sync,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)
}

/// Finite-difference stencil used for the numeric derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error `O(h^2)`.
    Central2,
    /// Five-point central difference, error `O(h^4)`.
    Central4,
    /// Seven-point central difference, error `O(h^6)`.
    Central6,
}

impl Stencil {
    /// `(k, w)` pairs; the derivative is `sum w * (f(x + k h) - f(x - k h)) / h`.
    fn taps(self) -> &'static [(f64, f64)] {
        match self {
            Stencil::Central2 => &[(1.0, 0.5)],
            Stencil::Central4 => &[(1.0, 8.0 / 12.0), (2.0, -1.0 / 12.0)],
            Stencil::Central6 => &[(1.0, 45.0 / 60.0), (2.0, -9.0 / 60.0), (3.0, 1.0 / 60.0)],
        }
    }
}

/// Check the gradient of a scalar function of several tensors.
///
/// `f` receives one leaf per input, in order, and must return a scalar node.
/// Every coordinate of every input is perturbed by `±eps`.
pub fn grad_check_many<T, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var> + Sync,
{
    grad_check_with(f, inputs, eps, Stencil::Central2)
}

/// [`grad_check_many`] with a chosen stencil.
///
/// Higher-order stencils tolerate a larger `eps`, which lowers the rounding
/// noise of the difference quotient on coordinates with tiny gradients.
/// Large steps are safe across ReLU kinks because perturbed evaluations keep
/// the gating pattern of the unperturbed input.
pub fn grad_check_with<T, F>(f: F, inputs: &[Tensor<T>], eps: f64, stencil: Stencil) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var> + Sync,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();
    drop(g);

    let eval = |which: usize, coord: usize, value: Option<T>, gates: Option<&[bool]>| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        g.gates = gates.map(|p| FrozenGates {
            pattern: p.to_vec(),
            cursor: 0,
            mismatch: false,
        });
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| match value {
                Some(value) if i == which => {
                    let mut p = t.clone();
                    p.data_mut()[coord] = value;
                    g.constant(p)
                }
                _ => g.constant(t.clone()),
            })
            .collect();
        let out = f(&mut g, &vars)?;
        if let Some(gates) = &g.gates {
            if gates.mismatch || gates.cursor != gates.pattern.len() {
                return Err(Error::contract("grad_check function changed structure under perturbation"));
            }
        }
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::contract("grad_check function must return a scalar"));
        }
        Ok((v.data()[0].to_f64_lossy(), g.relu_pattern()))
    };
    // Perturbed evaluations replay the ReLU pattern of the unperturbed input,
    // so every stencil tap samples the smooth piece containing `x` even when
    // the step crosses a kink.
    let base_pattern = eval(0, 0, None, None)?.1;
    let f_at = |i: usize, c: usize, v: T| eval(i, c, Some(v), Some(&base_pattern)).map(|r| r.0);

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |c| (i, c)))
        .collect();
    let numeric: Vec<Result<f64>> = par::map_jobs(&coords, |&(i, c)| {
        let x = inputs[i].data()[c];
        if stencil == Stencil::Central2 {
            // divide by the step actually representable in T
            let h = T::from_f64_lossy(eps);
            let (xp, xm) = (x + h, x - h);
            return Ok((f_at(i, c, xp)? - f_at(i, c, xm)?) / (xp - xm).to_f64_lossy());
        }
        let mut acc = 0.0;
        for &(k, w) in stencil.taps() {
            let step = T::from_f64_lossy(k * eps);
            acc += w * (f_at(i, c, x + step)? - f_at(i, c, x - step)?);
        }
        Ok(acc / eps)
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: coords.len(),
        worst: None,
    };
    for (&(i, c), num) in coords.iter().zip(numeric) {
        let num = num?;
        let ana = analytic[i].data()[c].to_f64_lossy();
        let err = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-8);
        if !err.is_finite() {
            return Err(Error::NonFinite(format!("grad_check input {i} coordinate {c}")));
        }
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some((i, c, ana, num));
        }
    }
    Ok(report)
}

