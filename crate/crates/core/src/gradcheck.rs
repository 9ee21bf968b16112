//! Central finite-difference gradient checking.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step, within `[1e-7, 1e-4]`.
    pub step: f64,
    /// Pass threshold on the relative error.
    pub tolerance: f64,
    /// Gradients smaller than this are compared absolutely: the relative
    /// error is `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many evenly spaced elements per parameter.
    pub max_elements: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-6,
            tolerance: 1e-5,
            floor: 1e-3,
            max_elements: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub param: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat element index of the worst mismatch.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    /// `(parameter, element)` of the worst mismatch overall.
    pub fn worst(&self) -> Option<(usize, usize)> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .map(|p| (p.param, p.worst_index))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss);
    if value.numel() != 1 {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    if let Some((index, v)) = value.first_non_finite() {
        return Err(Error::Numeric {
            context: "loss".into(),
            index,
            value: v,
        });
    }
    Ok((tape, vars, loss))
}

/// Compares tape gradients of `f` with central differences at `params`.
pub fn grad_check<F>(f: F, params: &[Tensor], config: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&config.step) {
        return Err(Error::Config(alloc::format!(
            "finite-difference step {} outside [1e-7, 1e-4]",
            config.step
        )));
    }
    let (tape, vars, loss) = evaluate(&f, params)?;
    let grads = tape.backward(loss)?;
    let mut reports = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        if let Some((index, value)) = analytic.first_non_finite() {
            return Err(Error::Numeric {
                context: alloc::format!("analytic gradient of parameter {pi}"),
                index,
                value,
            });
        }
        let n = params[pi].numel();
        let stride = match config.max_elements {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut report = ParamReport {
            param: pi,
            checked: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for e in (0..n).step_by(stride) {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + config.step;
            let plus = evaluate(&f, &work)?;
            let fp = plus.0.value(plus.2).data()[0];
            work[pi].data_mut()[e] = orig - config.step;
            let minus = evaluate(&f, &work)?;
            let fm = minus.0.value(minus.2).data()[0];
            work[pi].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * config.step);
            let a = analytic.data()[e];
            let err = relative_error(a, numeric, config.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst_index = e;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        reports.push(report);
    }
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: reports,
        max_rel_error,
        tolerance: config.tolerance,
    })
}
