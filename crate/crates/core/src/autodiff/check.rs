//! Central-difference gradient verification in `f64`.

use super::{forward, ParamSet, Primitive, Tape, Var};
use crate::error::Result;
use crate::gtensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Entries probed per parameter tensor; evenly strided when the tensor is larger.
    pub max_entries: usize,
    /// Denominator floor of [`relative_error`].
    pub floor: f64,
    /// Scale the adjoint of this primitive (negative control).
    pub corrupt: Option<Primitive>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tol: 1e-3,
            max_entries: 24,
            floor: 1e-6,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

fn probe_indices(len: usize, max_entries: usize) -> Vec<usize> {
    if len <= max_entries {
        return (0..len).collect();
    }
    // odd stride offset so probes do not all land on the same kernel tap
    (0..max_entries).map(|i| (i * len / max_entries + i % 3) % len).collect()
}

/// Compare tape gradients of `loss_fn` against central differences for every
/// parameter in `params`. `loss_fn` receives the parameters registered on the
/// tape in `params` order.
pub fn check_gradients<F>(params: &ParamSet, opts: &GradCheckOptions, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let base: Vec<Tensor<f64>> = params.iter().map(|p| p.value.cast()).collect();
    let names: Vec<&str> = params.iter().map(|p| p.name.as_str()).collect();

    let eval = |values: &[Tensor<f64>], corrupt: Option<Primitive>| {
        forward::<f64>(|tape| {
            tape.corrupt_adjoint(corrupt);
            let vars: Vec<Var> = names
                .iter()
                .zip(values)
                .map(|(n, v)| tape.param(*n, v.clone()))
                .collect();
            loss_fn(tape, &vars)
        })
    };

    let (_, tape) = eval(&base, opts.corrupt)?;
    let grads = tape.backward()?;
    drop(tape);

    let mut report = Vec::with_capacity(base.len());
    let mut values = base.clone();
    for (pi, name) in names.iter().enumerate() {
        let analytic = grads.get(name).expect("registered parameter");
        let mut check = ParamCheck {
            name: name.to_string(),
            checked: 0,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in probe_indices(base[pi].len(), opts.max_entries) {
            let x0 = base[pi].data()[idx];
            values[pi].data_mut()[idx] = x0 + opts.eps;
            let (lp, _) = eval(&values, None)?;
            values[pi].data_mut()[idx] = x0 - opts.eps;
            let (lm, _) = eval(&values, None)?;
            values[pi].data_mut()[idx] = x0;
            let numeric = (lp - lm) / (2.0 * opts.eps);
            let a = analytic.data()[idx];
            let err = relative_error(a, numeric, opts.floor);
            check.checked += 1;
            if err > check.max_rel_err || check.checked == 1 {
                check.max_rel_err = err;
                check.worst_index = idx;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    let max_rel_err = report.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: report,
        max_rel_err,
        tol: opts.tol,
        passed: max_rel_err <= opts.tol,
    })
}
