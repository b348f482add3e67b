use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::Result;

/// Outcome of comparing taped gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `(input, element)` where the worst error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Elementwise `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences at `h = 1e-5` carry roughly `1e-11 * |f|` of rounding
/// noise, so gradients smaller than this floor are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-5;

/// Compares the gradient of the scalar built by `f` against central finite
/// differences with step `h`, for every element of every input.
pub fn gradient_check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut work = inputs.to_vec();
    let mut out = GradCheck { max_rel_err: 0.0, worst: (0, 0), checked: 0 };
    for i in 0..work.len() {
        for k in 0..work[i].len() {
            let x0 = work[i].data()[k];
            work[i].data_mut()[k] = x0 + h;
            let up = eval(&work)?;
            work[i].data_mut()[k] = x0 - h;
            let down = eval(&work)?;
            work[i].data_mut()[k] = x0;
            let numeric = (up - down) / (2.0 * h);
            let e = rel_err(analytic[i][k], numeric, REL_ERR_FLOOR);
            if e > out.max_rel_err {
                out.max_rel_err = e;
                out.worst = (i, k);
            }
            out.checked += 1;
        }
    }
    Ok(out)
}

/// [`gradient_check`] over every tensor of a parameter store; `f` receives
/// variables indexed by `ParamId`.
pub fn gradient_check_store<F>(store: &ParamStore, h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    gradient_check(&inputs, h, f)
}
