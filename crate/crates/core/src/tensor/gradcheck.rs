//! Central finite-difference gradient checks.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest elementwise `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// `(input, element)` where the worst error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Denominator floor so that gradients which are zero up to roundoff do not
/// produce meaningless ratios.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares the reverse-mode gradient of `f` against central differences of
/// step `h`, for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'static, f64>, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[i].len()];
        let analytic = grads.wrt(v).unwrap_or(&zeros);
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + h;
            let fp = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - h;
            let fm = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if !rel.is_finite() {
                return Err(Error::NonFinite(format!("gradient check of input {i}")));
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
