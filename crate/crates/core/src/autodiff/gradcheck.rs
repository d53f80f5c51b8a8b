//! Central finite-difference verification of tape gradients.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Magnitudes below this are compared absolutely rather than relatively.
/// Central differences at a 1e-5 step carry about 1e-10 of rounding and
/// truncation noise, so the floor times a 1e-4 tolerance must stay above it.
pub const ABS_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| e.rel_error > self.tolerance)
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn eval<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Checks `d f / d p` for every element of every parameter in `store`.
/// `f` must read parameters through [`Tape::param`] and be deterministic.
pub fn grad_check_params<F>(store: &ParamStore, f: F, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let base = eval(&f, store)?;
    let again = eval(&f, store)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "two evaluations gave {base} and {again}"
        )));
    }

    let mut analytic = store.clone();
    analytic.zero_grad();
    {
        let mut tape = Tape::new();
        let out = f(&mut tape, &analytic)?;
        tape.backward(out, &mut analytic)?;
    }

    let mut probe = store.clone();
    let mut entries = Vec::new();
    for id in store.ids() {
        for i in 0..store.value(id).numel() {
            let orig = store.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = orig + step;
            let plus = eval(&f, &probe)?;
            probe.value_mut(id).data_mut()[i] = orig - step;
            let minus = eval(&f, &probe)?;
            probe.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.grad(id).data()[i];
            entries.push(GradCheckEntry {
                tensor: store.name(id).to_string(),
                index: i,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            });
        }
    }
    Ok(GradCheckReport { tolerance, entries })
}

/// Checks the gradient of `f` with respect to each input tensor.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("input{i}"), t.clone()))
        .collect();
    grad_check_params(
        &store,
        |tape, s| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(s, id)).collect();
            f(tape, &vars)
        },
        step,
        tolerance,
    )
}
