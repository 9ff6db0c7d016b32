//! Central finite differences against reverse-mode gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Checks at most this many evenly spaced coordinates per parameter.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            max_coords: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordError {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<CoordError>,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }

    fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// `|g_ad − g_fd| / max(1, |g_ad| + |g_fd|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1.0)
}

fn coordinates(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => {
            let m = m.max(1);
            (0..m).map(|i| i * len / m).collect()
        }
        _ => (0..len).collect(),
    }
}

fn evaluate<F: FnMut(&[f64]) -> Result<f64>>(
    f: &mut F,
    theta: &[f64],
    coord: usize,
    side: &str,
) -> Result<f64> {
    let v = f(theta)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            op: format!("finite_diff_check ({side}h)"),
            index: coord,
        })
    }
}

/// Compares `analytic` with central differences of `f` around `theta`.
pub fn finite_diff_check<F>(
    mut f: F,
    theta: &[f64],
    analytic: &[f64],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if theta.len() != analytic.len() {
        return Err(Error::dim(
            "finite_diff_check",
            format!("{} parameters vs {} gradients", theta.len(), analytic.len()),
        ));
    }
    let mut point = theta.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        tol: opts.tol,
    };
    for i in coordinates(theta.len(), opts.max_coords) {
        point[i] = theta[i] + opts.h;
        let plus = evaluate(&mut f, &point, i, "+")?;
        point[i] = theta[i] - opts.h;
        let minus = evaluate(&mut f, &point, i, "-")?;
        point[i] = theta[i];
        let numeric = (plus - minus) / (2.0 * opts.h);
        let rel_error = relative_error(analytic[i], numeric);
        report.checked += 1;
        if report.worst.is_none() || rel_error > report.max_rel_error {
            report.max_rel_error = rel_error;
            report.worst = Some(CoordError {
                index: i,
                analytic: analytic[i],
                numeric,
                rel_error,
            });
        }
    }
    Ok(report)
}

/// Per-parameter check of a loss built on a [`Tape`] from `store`.
///
/// Returns one `(parameter name, report)` entry for each id in `ids`.
pub fn check_params<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    loss: F,
    opts: GradCheckOptions,
) -> Result<Vec<(String, GradCheckReport)>>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let out = loss(&tape, &bound)?;
        let grads = tape.backward(out)?;
        ids.iter()
            .map(|&id| {
                grads
                    .get(bound[id])
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; store.get(id).numel()])
            })
            .collect()
    };

    let mut reports = Vec::with_capacity(ids.len());
    for (&id, grad) in ids.iter().zip(&analytic) {
        let theta = store.get(id).data().to_vec();
        let report = finite_diff_check(
            |point| {
                store.get_mut(id).data_mut().copy_from_slice(point);
                let tape = Tape::new();
                let bound = store.bind(&tape);
                let v = loss(&tape, &bound)?.value().data()[0];
                Ok(v)
            },
            &theta,
            grad,
            opts,
        );
        store.get_mut(id).data_mut().copy_from_slice(&theta);
        reports.push((store.name(id).to_string(), report?));
    }
    Ok(reports)
}

/// Folds per-parameter reports into one.
pub fn combine<'a>(reports: impl IntoIterator<Item = &'a GradCheckReport>) -> GradCheckReport {
    let mut total = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        tol: GradCheckOptions::default().tol,
    };
    for r in reports {
        total.tol = r.tol;
        total.merge(r);
    }
    total
}
