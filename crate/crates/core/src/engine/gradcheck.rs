//! Central finite-difference verification of tape gradients.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the relative error.
    pub rtol: f64,
    /// Denominator floor of the relative error, so gradients that are zero
    /// on both sides compare absolutely instead of dividing by ~0.
    pub abs_floor: f64,
    /// Check at most this many evenly spaced elements per parameter.
    pub max_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            rtol: 1e-4,
            abs_floor: 1e-6,
            max_per_param: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub rtol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.rtol
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn evaluate<F>(f: &mut F, store: &ParamStore) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.value(loss).item()
}

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences for every trainable parameter in `store`.
pub fn finite_diff_check<F>(store: &ParamStore, mut f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    if opts.step <= 0.0 {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;

    let mut work = store.clone();
    let mut report = GradCheckReport {
        params: Vec::new(),
        max_rel_err: 0.0,
        rtol: opts.rtol,
    };
    let names: Vec<String> = store.trainable_names().map(str::to_owned).collect();
    for name in names {
        let len = store.tensor(&name)?.len();
        let analytic = grads
            .param(&name)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; len]);
        let stride = match opts.max_per_param {
            Some(m) if m > 0 && len > m => len.div_ceil(m),
            _ => 1,
        };
        let mut check = ParamCheck {
            name: name.clone(),
            checked: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for i in (0..len).step_by(stride) {
            let orig = store.tensor(&name)?.data()[i];
            work.tensor_mut(&name)?.data_mut()[i] = orig + opts.step;
            let up = evaluate(&mut f, &work)?;
            work.tensor_mut(&name)?.data_mut()[i] = orig - opts.step;
            let down = evaluate(&mut f, &work)?;
            work.tensor_mut(&name)?.data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * opts.step);
            let abs = (numeric - analytic[i]).abs();
            let rel = abs / numeric.abs().max(analytic[i].abs()).max(opts.abs_floor);
            check.checked += 1;
            check.max_abs_err = check.max_abs_err.max(abs);
            check.max_rel_err = check.max_rel_err.max(rel);
        }
        report.max_rel_err = report.max_rel_err.max(check.max_rel_err);
        report.params.push(check);
    }
    Ok(report)
}
