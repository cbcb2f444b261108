//! Central finite-difference checking of tape gradients.

use alloc::vec::Vec;
use alloc::{format, vec};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub h: f64,
    /// A coordinate is flagged non-smooth when the forward and backward
    /// one-sided slopes differ by more than `kink_tol · max(1, |analytic|)`.
    pub kink_tol: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            kink_tol: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordError {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: Vec<CoordError>,
    /// `(param, index)` pairs skipped as non-smooth.
    pub skipped: Vec<(usize, usize)>,
}

impl FdReport {
    /// Fraction of checked coordinates with relative error below `tol`.
    pub fn fraction_below(&self, tol: f64) -> f64 {
        if self.checked.is_empty() {
            return 1.0;
        }
        let ok = self.checked.iter().filter(|c| c.rel < tol).count();
        ok as f64 / self.checked.len() as f64
    }

    /// Per-parameter maximum relative error, indexed like the inputs.
    pub fn per_param_max(&self, n_params: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_params];
        for c in &self.checked {
            out[c.param] = f64::max(out[c.param], c.rel);
        }
        out
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    libm::fabs(analytic - numeric) / f64::max(1.0, libm::fabs(analytic))
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss {
            shape: v.shape().to_vec(),
        });
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Analytic gradients of `f` at `params`, one tensor per input.
pub fn analytic_gradients<F>(f: &F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {value}")));
    }
    let grads = tape.backward(loss)?;
    Ok((
        value,
        vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect(),
    ))
}

/// Compares reverse-mode gradients of `f` against central differences over
/// every coordinate of every tensor in `params`.
pub fn check_gradients<F>(f: F, params: &[Tensor], opts: FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_coordinates(f, params, opts, |_, _| true)
}

/// Like [`check_gradients`] but only visits coordinates accepted by `select`.
pub fn check_coordinates<F, S>(f: F, params: &[Tensor], opts: FdOptions, select: S) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    S: Fn(usize, usize) -> bool,
{
    if !(opts.h > 0.0) {
        return Err(Error::Invalid(format!("step h must be positive, got {}", opts.h)));
    }
    let (f0, analytic) = analytic_gradients(&f, params)?;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = FdReport::default();
    let h = opts.h;
    for p in 0..params.len() {
        for i in 0..params[p].numel() {
            if !select(p, i) {
                continue;
            }
            let x0 = params[p].data()[i];
            work[p].data_mut()[i] = x0 + h;
            let fp = evaluate(&f, &work)?;
            work[p].data_mut()[i] = x0 - h;
            let fm = evaluate(&f, &work)?;
            work[p].data_mut()[i] = x0;
            let a = analytic[p].data()[i];
            let fwd = (fp - f0) / h;
            let bwd = (f0 - fm) / h;
            if libm::fabs(fwd - bwd) > opts.kink_tol * f64::max(1.0, libm::fabs(a)) {
                report.skipped.push((p, i));
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let rel = rel_error(a, numeric);
            report.max_rel_error = f64::max(report.max_rel_error, rel);
            report.checked.push(CoordError {
                param: p,
                index: i,
                analytic: a,
                numeric,
                rel,
            });
        }
    }
    Ok(report)
}

/// Single-input form: `f` maps one tensor to a scalar on the tape.
pub fn finite_difference_check<F>(f: F, point: &Tensor, h: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_gradients(
        |t: &mut Tape, v: &[Var]| f(t, v[0]),
        core::slice::from_ref(point),
        FdOptions {
            h,
            ..FdOptions::default()
        },
    )
}
