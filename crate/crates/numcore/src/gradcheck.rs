//! Central finite-difference check of tape gradients.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Max over coordinates of `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`, where
/// `g_fd` is the central difference with step `epsilon`.
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), epsilon)
}

/// [`grad_check`] over several input tensors at once.
pub fn grad_check_many<F>(f: F, points: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(TensorError::invalid("grad_check", "epsilon must be positive"));
    }
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = pts.iter().map(|p| tape.param(p.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(TensorError::NotScalar(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars = points.iter().map(|p| tape.param(p.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work = points.to_vec();
    let mut worst = 0.0f64;
    for (pi, var) in vars.iter().enumerate() {
        let ad = grads.wrt(*var);
        for i in 0..points[pi].len() {
            let orig = points[pi].data()[i];
            work[pi].data_mut()[i] = orig + epsilon;
            let up = eval(&work)?;
            work[pi].data_mut()[i] = orig - epsilon;
            let down = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * epsilon);
            let g = ad.data()[i];
            if !fd.is_finite() || !g.is_finite() {
                return Err(TensorError::NonFinite { op: "grad_check" });
            }
            let rel = (g - fd).abs() / 1f64.max(g.abs()).max(fd.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
