//! Central finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the element with the largest relative error.
    pub worst_index: Option<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Checks `grad` (an analytic gradient of `value` at `x`) against central
/// differences on the listed flat indices, or on every element when `indices`
/// is `None`.
pub fn grad_check_with(
    mut value: impl FnMut(&Tensor) -> Result<f64>,
    grad: &[f64],
    x: &Tensor,
    h: f64,
    tol: f64,
    indices: Option<&[usize]>,
) -> Result<GradCheckReport> {
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut probe = x.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        analytic: Vec::with_capacity(idx.len()),
        numeric: Vec::with_capacity(idx.len()),
        checked: 0,
        tol,
    };
    for &i in idx {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = value(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = value(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let err = relative_error(grad[i], numeric);
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
        report.analytic.push(grad[i]);
        report.numeric.push(numeric);
        report.checked += 1;
    }
    Ok(report)
}

/// Fixed pseudo-random weights used to scalarize vector-valued functions.
fn projection(n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0f_9c4a);
    (0..n).map(|_| rng.gen_range(0.5..1.5)).collect()
}

fn scalarize<'t>(tape: &'t Tape, y: Var<'t>) -> Result<Var<'t>> {
    let shape = y.shape();
    let n: usize = shape.iter().product();
    if n == 1 {
        return Ok(y);
    }
    let w = tape.constant(Tensor::from_parts(shape, projection(n)));
    y.mul(w)?.sum_all()
}

/// Differentiates `f` at `x` on a tape and compares against central
/// differences with step `h`. Vector outputs are reduced to a scalar through
/// a fixed random projection.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xv = tape.param(x);
    let loss = scalarize(&tape, f(&tape, xv)?)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    drop(grads);
    grad_check_with(
        |probe| {
            let tape = Tape::new();
            let v = tape.constant(probe.clone());
            let out = scalarize(&tape, f(&tape, v)?)?;
            Ok(out.with_values(|d| d[0]))
        },
        &analytic,
        x,
        h,
        tol,
        None,
    )
}
