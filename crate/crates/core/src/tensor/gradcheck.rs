use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central finite
/// differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)` where
/// `numeric_i = (f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("grad_check", format!("step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    let analytic = g
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(probe.clone(), false);
        let out = f(&mut g, v)?;
        let val = g.value(out).item()?;
        if !val.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(val)
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
