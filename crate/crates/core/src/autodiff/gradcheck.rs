use super::{Array, AutodiffError, Result, Tape, Tensor};

/// Compares the reverse-mode gradient of a scalar function against central
/// differences and returns the largest relative error
/// `|autodiff - fd| / (|fd| + 1e-12)` over all coordinates of `x`.
pub fn grad_check<F>(f: F, x: &Array, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Tensor<'t>) -> Result<Tensor<'t>>,
{
    if !(eps > 0.0) {
        return Err(AutodiffError::GradCheck(format!(
            "step must be positive, got {eps}"
        )));
    }
    let analytic = {
        let tape = Tape::new();
        let input = tape.leaf(x.clone(), true);
        let out = f(&tape, input)?;
        if out.value().len() != 1 {
            return Err(AutodiffError::NonScalarLoss(out.shape()));
        }
        tape.backward(out)?;
        input
            .grad()
            .unwrap_or_else(|| Array::zeros(x.shape().to_vec()))
    };

    let eval = |point: Array| -> Result<f64> {
        let tape = Tape::new();
        let input = tape.leaf(point, false);
        let out = f(&tape, input)?;
        let v = out.value().data()[0];
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * eps);
        let err = (analytic.data()[i] - fd).abs() / (fd.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
