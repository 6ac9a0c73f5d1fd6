//! Central finite-difference gradient checking.

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rtol: 1e-4,
            atol: 1e-7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|)` among
    /// entries whose absolute error exceeds `atol`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub entries_checked: usize,
    pub rtol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.rtol
    }
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every entry of every parameter.
pub fn check_gradients<F>(f: F, params: &[Matrix], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.param(m.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar_value(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|m| tape.param(m.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Matrix> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            tape.grad(*v)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        entries_checked: 0,
        rtol: cfg.rtol,
    };
    let mut work: Vec<Matrix> = params.to_vec();
    for (p, grad) in analytic.iter().enumerate() {
        for k in 0..params[p].data().len() {
            let orig = params[p].data()[k];
            work[p].data_mut()[k] = orig + cfg.step;
            let plus = eval(&work)?;
            work[p].data_mut()[k] = orig - cfg.step;
            let minus = eval(&work)?;
            work[p].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad.data()[k];
            let abs = (a - numeric).abs();
            report.max_abs_error = report.max_abs_error.max(abs);
            if abs > cfg.atol {
                let rel = abs / a.abs().max(numeric.abs());
                report.max_rel_error = report.max_rel_error.max(rel);
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}
