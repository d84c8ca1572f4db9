//! Central finite-difference checks for tape gradients.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of the backward rules it is used to verify.

use alloc::vec::Vec;

use super::{ParameterStore, Result, Tape, Var};

pub const DEFAULT_EPS: f64 = 1e-5;
/// Denominator floor so that near-zero gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        if e > self.max_rel_error || e.is_nan() {
            self.max_rel_error = e;
        }
        self.checked += 1;
    }

    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            checked: self.checked + other.checked,
        }
    }
}

/// A leaf input given as `(rows, cols, values)`.
pub type Input = (usize, usize, Vec<f64>);

fn eval_inputs<F>(store: &ParameterStore, inputs: &[Input], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let vars: Vec<Var> = inputs.iter().map(|(r, c, v)| tape.leaf(*r, *c, v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.scalar(out))
}

/// Compare gradients with respect to leaf inputs.
pub fn check_inputs<F>(store: &ParameterStore, inputs: &[Input], eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let vars: Vec<Var> = inputs.iter().map(|(r, c, v)| tape.leaf(*r, *c, v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheck::default();
    let mut work: Vec<Input> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*var) {
            Some(g) => g.to_vec(),
            None => alloc::vec![0.0; inputs[k].2.len()],
        };
        for i in 0..inputs[k].2.len() {
            let orig = work[k].2[i];
            work[k].2[i] = orig + eps;
            let up = eval_inputs(store, &work, &f)?;
            work[k].2[i] = orig - eps;
            let down = eval_inputs(store, &work, &f)?;
            work[k].2[i] = orig;
            report.record(analytic[i], (up - down) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Compare gradients with respect to every entry of every stored parameter.
pub fn check_params<F>(store: &mut ParameterStore, eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        let grads = tape.backward(out)?;
        let mut acc = super::Gradients::zeros_like(store);
        grads.accumulate_params(&tape, &mut acc);
        acc
    };
    let eval = |store: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        Ok(tape.scalar(out))
    };

    let mut report = GradCheck::default();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for i in 0..store.value(id).len() {
            let orig = store.value(id)[i];
            store.value_mut(id)[i] = orig + eps;
            let up = eval(store)?;
            store.value_mut(id)[i] = orig - eps;
            let down = eval(store)?;
            store.value_mut(id)[i] = orig;
            report.record(analytic.get(id)[i], (up - down) / (2.0 * eps));
        }
    }
    Ok(report)
}
