use crate::error::{AutodiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error used by [`grad_check`]: `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the tape gradient of a scalar function against central
/// differences with step `h`, returning the largest elementwise relative error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if h.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(AutodiffError::InvalidArgument {
            op: "grad_check",
            reason: format!("step must be positive, got {h}"),
        });
    }
    let mut tape = Tape::new();
    let input = tape.param(x.clone());
    let out = f(&mut tape, input)?;
    if tape.value(out).numel() != 1 {
        return Err(AutodiffError::NotScalar {
            shape: tape.shape(out).to_vec(),
        });
    }
    let analytic = tape.backward_scalar(out)?.get(input);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(Tensor::new(x.shape().to_vec(), data)?);
        let o = f(&mut t, v)?;
        Ok(t.value(o).item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
