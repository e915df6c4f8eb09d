//! Central finite differences against reverse accumulation.

use alloc::format;
use alloc::vec::Vec;

use super::{Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so that entries whose
    /// true derivative is zero are compared against roundoff, not against 0.
    pub floor: f64,
    /// Check at most this many randomly chosen entries per parameter.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, tolerance: 1e-4, floor: 1e-6, max_entries: None }
    }
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compares the tape gradient of the scalar built by `f` with central
/// differences for every parameter tensor in `params`.
///
/// `f` receives a fresh tape whose first `params.len()` leaves are the
/// parameters, in order.
pub fn grad_check<F>(f: F, params: &[Tensor], cfg: &GradCheckConfig, rng: &mut Rng) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::shape("grad_check pipeline must return a scalar"));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss {v} at probe point")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut reports = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let n = params[pi].len();
        let mut entries: Vec<usize> = (0..n).collect();
        if let Some(k) = cfg.max_entries {
            if k < n {
                rng.shuffle(&mut entries);
                entries.truncate(k);
            }
        }
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &e in &entries {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + cfg.step;
            let fp = eval(&work)?;
            work[pi].data_mut()[e] = orig - cfg.step;
            let fm = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let a = analytic.data()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.floor);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(abs);
        }
        reports.push(ParamReport { entries_checked: entries.len(), max_rel_error: max_rel, max_abs_error: max_abs });
    }
    let passed = reports.iter().all(|r| r.max_rel_error < cfg.tolerance);
    Ok(GradCheckReport { params: reports, passed })
}
