//! Central-difference gradient checking.

use super::tape::{ParamId, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for relative errors.
pub const REL_FLOOR: f64 = 1e-8;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat entry)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub entries_checked: usize,
}

/// Central differences of a scalar function of several tensors.
pub fn central_difference<F>(mut f: F, params: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!("step h must be positive, got {h}")));
    }
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = params[p].values()[i];
            work[p].values_mut()[i] = orig + h;
            let plus = eval_finite(&mut f, &work)?;
            work[p].values_mut()[i] = orig - h;
            let minus = eval_finite(&mut f, &work)?;
            work[p].values_mut()[i] = orig;
            *gi = (plus - minus) / (2.0 * h);
        }
        out.push(Tensor::new(params[p].shape().to_vec(), g)?);
    }
    Ok(out)
}

fn eval_finite<F: FnMut(&[Tensor]) -> Result<f64>>(f: &mut F, params: &[Tensor]) -> Result<f64> {
    let v = f(params)?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("finite-difference evaluation returned {v}")));
    }
    Ok(v)
}

/// Elementwise comparison of two gradient sets.
pub fn compare(analytic: &[Tensor], numeric: &[Tensor]) -> Result<GradCheckReport> {
    let mut report =
        GradCheckReport { max_rel_error: 0.0, worst: (0, 0), analytic_at_worst: 0.0, numeric_at_worst: 0.0, entries_checked: 0 };
    for (p, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        if !a.same_shape(n) {
            return Err(Error::shape("gradient compare", a.shape(), n.shape()));
        }
        for (i, (&av, &nv)) in a.values().iter().zip(n.values()).enumerate() {
            let e = relative_error(av, nv);
            report.entries_checked += 1;
            if e > report.max_rel_error || report.entries_checked == 1 {
                report.max_rel_error = e;
                report.worst = (p, i);
                report.analytic_at_worst = av;
                report.numeric_at_worst = nv;
            }
        }
    }
    Ok(report)
}

/// Checks the tape's reverse-mode gradients against central differences.
///
/// `build` receives a fresh tape and one [`Var`] per parameter (registered as
/// `ParamId(i)`) and returns the scalar loss node.
pub fn finite_diff_check<F>(mut build: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: for<'t> FnMut(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().enumerate().map(|(i, p)| tape.param(ParamId(i as u32), p.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        let grads = tape.gradients(loss)?;
        params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                grads
                    .get(&ParamId(i as u32))
                    .cloned()
                    .unwrap_or_else(|| Tensor::new(p.shape().to_vec(), vec![0.0; p.len()]).expect("shape"))
            })
            .collect::<Vec<_>>()
    };
    let numeric = central_difference(
        |ps| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
            let loss = build(&mut tape, &vars)?;
            Ok(tape.scalar(loss))
        },
        params,
        h,
    )?;
    compare(&analytic, &numeric)
}
