use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over coordinates of `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8)
}

/// Central-difference check of a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), eps)
}

/// Central-difference check of a scalar function of several tensors; every
/// coordinate of every input is perturbed.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars = xs
            .iter()
            .map(|x| tape.param(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .zip(xs)
            .map(|(v, x)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
            })
            .collect()
    };
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars = inputs
            .iter()
            .map(|x| tape.constant(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(f(&tape, &vars)?.item())
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor> = xs.to_vec();
    for (which, x) in xs.iter().enumerate() {
        for i in 0..x.len() {
            let orig = x.data()[i];
            work[which].data_mut()[i] = orig + eps;
            let fp = eval(&work)?;
            work[which].data_mut()[i] = orig - eps;
            let fm = eval(&work)?;
            work[which].data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let err = relative_error(analytic[which].data()[i], fd);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (which, i);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
