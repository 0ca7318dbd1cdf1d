use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares autodiff against central differences for every coordinate of
/// `x` and returns the largest relative error
/// `|a − n| / max(|a|, |n|, 1e-12)`.
///
/// `f` receives a fresh tape and the variable holding `x` and must return
/// a single-element loss. A NaN anywhere yields an infinite error.
pub fn gradient_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    gradient_check_coords(f, x, eps, &coords)
}

/// Like [`gradient_check`] but restricted to the listed flat coordinates,
/// for tensors too large for an exhaustive sweep.
pub fn gradient_check_coords<F>(f: F, x: &Tensor<f64>, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    check_coords(&f, x, coords, |eval, i| central_difference(eval, x, i, eps))
}

/// Like [`gradient_check_coords`] with the central difference replaced by its
/// Richardson extrapolation `(4·D(eps/2) − D(eps)) / 3`, whose truncation
/// error is O(eps⁴). This allows a step large enough to resolve derivatives
/// many orders of magnitude smaller than the function value, which plain
/// central differences lose to round-off. Only valid where `f` is smooth
/// within `eps` of `x`.
pub fn gradient_check_extrapolated_coords<F>(f: F, x: &Tensor<f64>, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    check_coords(&f, x, coords, |eval, i| {
        let coarse = central_difference(eval, x, i, eps)?;
        let fine = central_difference(eval, x, i, eps / 2.0)?;
        Ok((4.0 * fine - coarse) / 3.0)
    })
}

fn central_difference(eval: &dyn Fn(Tensor<f64>) -> Result<f64>, x: &Tensor<f64>, i: usize, eps: f64) -> Result<f64> {
    let mut plus = x.clone();
    plus.data_mut()[i] += eps;
    let mut minus = x.clone();
    minus.data_mut()[i] -= eps;
    Ok((eval(plus)? - eval(minus)?) / (2.0 * eps))
}

fn check_coords<F>(
    f: &F,
    x: &Tensor<f64>,
    coords: &[usize],
    numeric: impl Fn(&dyn Fn(Tensor<f64>) -> Result<f64>, usize) -> Result<f64>,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let loss = f(&mut tape, v)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(probe);
        let out = f(&mut tape, v)?;
        tape.tensor(out).item()
    };

    let mut worst = 0.0f64;
    for &i in coords {
        if i >= x.numel() {
            return Err(Error::Dimension(format!(
                "gradient check coordinate {i} out of range for {} elements",
                x.numel()
            )));
        }
        let numeric = numeric(&eval, i)?;
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        if err.is_nan() {
            return Ok(f64::INFINITY);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
