//! Central finite-difference verification of analytic gradients.

use super::Parameterized;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many evenly spaced elements of each parameter.
    pub max_elems_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_elems_per_param: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the gradients written by `loss_fn` against central differences
/// `(f(w+ε) − f(w−ε)) / 2ε` for every non-frozen parameter of `model`.
///
/// `loss_fn` must run the forward and backward pass, accumulating into the
/// parameters' `grad` slots, and return the scalar loss.
pub fn grad_check<M, F>(model: &mut M, mut loss_fn: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: FnMut(&mut M) -> Result<f64>,
{
    model.zero_grad();
    let base = loss_fn(model)?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("grad_check: loss is {base}")));
    }
    let analytic = model.grads();
    let meta: Vec<(String, usize, bool)> = model
        .params()
        .into_iter()
        .map(|(n, p)| (n, p.value.len(), p.frozen))
        .collect();

    let mut report = GradCheckReport::default();
    for (pi, (name, len, frozen)) in meta.into_iter().enumerate() {
        if frozen {
            continue;
        }
        let indices: Vec<usize> = match opts.max_elems_per_param {
            Some(m) if m < len => (0..m).map(|i| i * len / m).collect(),
            _ => (0..len).collect(),
        };
        let mut worst = 0.0f64;
        for &ei in &indices {
            let original = model.params_mut()[pi].1.value.data()[ei];
            model.params_mut()[pi].1.value.data_mut()[ei] = original + opts.eps;
            let plus = loss_fn(model)?;
            model.params_mut()[pi].1.value.data_mut()[ei] = original - opts.eps;
            let minus = loss_fn(model)?;
            model.params_mut()[pi].1.value.data_mut()[ei] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check: loss non-finite when perturbing {name}[{ei}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            worst = worst.max(relative_error(analytic[pi].data()[ei], numeric));
        }
        report.entries.push(GradCheckEntry {
            name,
            max_rel_err: worst,
            checked: indices.len(),
        });
    }
    model.zero_grad();
    Ok(report)
}
