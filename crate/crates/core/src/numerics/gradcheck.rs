//! Central-difference verification of tape gradients.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Flat index of the component with the largest error.
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Components whose ±h evaluations changed a ReLU mask or pooling
    /// argmax; central differences are meaningless across such a kink.
    pub skipped: usize,
    pub tol: f64,
    pub pass: bool,
}

/// `|a - b| / max(1, |a|, |b|)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

fn scalar_loss(tape: &Tape, loss: Var, index: usize) -> Result<f64> {
    let v = tape.value(loss).item()?;
    if !v.is_finite() {
        return Err(Error::Numeric {
            index,
            context: format!("loss evaluated to {v}"),
        });
    }
    Ok(v)
}

/// Checks the tape gradient of the scalar function `f` at `x` against
/// central differences with step [`FD_STEP`], over every component of `x`.
///
/// `f` receives a fresh tape and the variable holding `x` and must return a
/// one-element loss.
pub fn gradcheck<F>(mut f: F, x: &Tensor, tol: f64) -> Result<GradcheckReport>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.variable(x.clone());
    let loss = f(&mut tape, xv)?;
    scalar_loss(&tape, loss, 0)?;
    let base_sig = tape.signature();
    let analytic = tape.backward(loss)?.wrt(xv);
    let indices: Vec<usize> = (0..x.len()).collect();
    compare_central_differences(&analytic, x, &indices, tol, Some(base_sig), |xp, i| {
        let mut tape = Tape::new();
        let xv = tape.variable(xp.clone());
        let loss = f(&mut tape, xv)?;
        Ok((scalar_loss(&tape, loss, i)?, tape.signature()))
    })
}

/// Checks the gradient of `f` with respect to one stored parameter.
///
/// `indices` restricts the check to some components (all when `None`). The
/// parameter is restored before returning.
pub fn gradcheck_param<F>(
    store: &mut ParamStore,
    id: ParamId,
    indices: Option<&[usize]>,
    tol: f64,
    mut f: F,
) -> Result<GradcheckReport>
where
    F: FnMut(&mut Tape, &mut ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    scalar_loss(&tape, loss, 0)?;
    let base_sig = tape.signature();
    let original = store.get(id).clone();
    let analytic = tape.backward(loss)?.param(id).unwrap_or_else(|| original.zeros_like());
    drop(tape);
    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..original.len()).collect();
            &all
        }
    };
    let report = compare_central_differences(&analytic, &original, indices, tol, Some(base_sig), |p, i| {
        store.set(id, p.clone())?;
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        Ok((scalar_loss(&tape, loss, i)?, tape.signature()))
    });
    store.set(id, original)?;
    report
}

/// Shared driver: compares `analytic` to central differences of `eval` on
/// the listed components of `x`.
///
/// `eval` returns the loss and the branch signature of the tape it built.
/// When `base_sig` is given, components whose perturbed evaluations land on
/// a different signature are counted as skipped instead of compared.
pub fn compare_central_differences<E>(
    analytic: &Tensor,
    x: &Tensor,
    indices: &[usize],
    tol: f64,
    base_sig: Option<u64>,
    mut eval: E,
) -> Result<GradcheckReport>
where
    E: FnMut(&Tensor, usize) -> Result<(f64, u64)>,
{
    if analytic.shape() != x.shape() {
        return Err(Error::shape(format!(
            "analytic gradient {:?} vs input {:?}",
            analytic.shape(),
            x.shape()
        )));
    }
    if let Some(i) = analytic.first_non_finite() {
        return Err(Error::Numeric {
            index: i,
            context: "analytic gradient".into(),
        });
    }
    if let Some(i) = x.first_non_finite() {
        return Err(Error::Numeric {
            index: i,
            context: "gradcheck input".into(),
        });
    }
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        skipped: 0,
        tol,
        pass: true,
    };
    let mut probe = x.clone();
    for &i in indices {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let (plus, sig_plus) = eval(&probe, i)?;
        probe.data_mut()[i] = orig - FD_STEP;
        let (minus, sig_minus) = eval(&probe, i)?;
        probe.data_mut()[i] = orig;
        if let Some(base) = base_sig {
            if sig_plus != base || sig_minus != base {
                report.skipped += 1;
                continue;
            }
        }
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let err = rel_error(analytic.data()[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    report.pass = report.checked > 0 && report.max_rel_error < tol;
    Ok(report)
}
