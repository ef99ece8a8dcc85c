//! Detection of separated observations.
//!
//! A zero-outcome observation is separated when some combination of the
//! regressors and absorbed effects is zero on every positive-outcome row,
//! nonnegative on every zero-outcome row and strictly positive on it. Such
//! rows push the Poisson estimates to infinity and carry no information
//! about the remaining parameters, so they are dropped before fitting.
//!
//! Two checks are implemented. `fe` drops every group of an intercept term
//! whose outcomes are all zero. `ir` (iterated rectifier) looks for a
//! certificate with a sequence of weighted least squares fits of an
//! artificial response on the full model.

use std::fmt;

use serde::Serialize;

use crate::dataset::{DropReason, EstimationSample};
use crate::irls::{collinear_columns, weighted_sq_norms, wls_solve_with, COLLINEAR_TOL};
use crate::projector::{Acceleration, Projector, ProjectorOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fe,
    Ir,
    Simplex,
    Mu,
    None,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Fe => "fe",
            Method::Ir => "ir",
            Method::Simplex => "simplex",
            Method::Mu => "mu",
            Method::None => "none",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fe" => Ok(Method::Fe),
            "ir" => Ok(Method::Ir),
            "simplex" => Ok(Method::Simplex),
            "mu" => Ok(Method::Mu),
            "none" => Ok(Method::None),
            other => Err(format!("unknown separation method `{other}`")),
        }
    }
}

pub const DEFAULT_METHODS: [Method; 3] = [Method::Fe, Method::Simplex, Method::Ir];

/// Parses a comma- or space-separated method list.
pub fn parse_methods(text: &str) -> Result<Vec<Method>, String> {
    let methods = text
        .split([',', ' '])
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Method>, _>>()?;
    if methods.is_empty() {
        return Err("empty separation method list".into());
    }
    if methods.contains(&Method::None) && methods.len() > 1 {
        return Err("separation method `none` cannot be combined with others".into());
    }
    Ok(methods)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrParams {
    /// Absolute threshold on fitted values of the artificial response.
    pub tol: f64,
    pub max_iter: usize,
    /// Weight on positive-outcome rows; `None` means 1e6 · n.
    pub big_weight: Option<f64>,
}

impl Default for IrParams {
    fn default() -> Self {
        Self {
            tol: 1e-5,
            max_iter: 10_000,
            big_weight: None,
        }
    }
}

/// Flags every row of any intercept-term group whose outcomes sum to zero,
/// repeating until no group changes.
pub fn check_fe(sample: &EstimationSample) -> Vec<bool> {
    let n = sample.n_rows();
    let mut flagged = vec![false; n];
    loop {
        let mut changed = false;
        for term in sample.intercept_terms() {
            let mut mass = vec![0.0; term.n_groups];
            let mut active = vec![false; term.n_groups];
            for (i, &g) in term.codes.iter().enumerate() {
                if !flagged[i] {
                    mass[g as usize] += sample.weights[i] * sample.y[i];
                    active[g as usize] = true;
                }
            }
            for (i, &g) in term.codes.iter().enumerate() {
                let g = g as usize;
                if !flagged[i] && active[g] && mass[g] == 0.0 {
                    flagged[i] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            return flagged;
        }
    }
}

#[derive(Debug, Clone)]
pub struct IrOutcome {
    pub flagged: Vec<bool>,
    /// Fitted artificial response at the stopping point, one per sample row.
    pub zhat: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn project_best_effort(proj: &Projector, v: &mut [f64], tol: f64) {
    // an unconverged projection leaves its best iterate in place
    let _ = proj.project_column(v, tol);
}

fn project_matrix_best_effort(proj: &Projector, x: &mut nalgebra::DMatrix<f64>, tol: f64) {
    let n = x.nrows();
    if n == 0 {
        return;
    }
    for col in x.as_mut_slice().chunks_mut(n) {
        project_best_effort(proj, col, tol);
    }
}

fn ir_projector(sample: &EstimationSample, weights: &[f64]) -> Projector {
    Projector::new(
        &sample.terms,
        weights,
        ProjectorOptions {
            acceleration: Acceleration::ConjugateGradient,
            max_sweeps: 20_000,
        },
    )
}

/// Columns of `X` that are independent of each other and of the absorbed
/// effects, judged with unit weights.
fn independent_columns(sample: &EstimationSample) -> Vec<usize> {
    let n = sample.n_rows();
    let ones = vec![1.0; n];
    let proj = ir_projector(sample, &ones);
    let mut xt = sample.x.clone();
    project_matrix_best_effort(&proj, &mut xt, 1e-13);
    let reference = weighted_sq_norms(&sample.x, &ones);
    let dropped = collinear_columns(&xt, &ones, &reference, COLLINEAR_TOL);
    (0..xt.ncols()).filter(|j| !dropped.contains(j)).collect()
}

/// Iterated rectifier.
///
/// The artificial response starts at 1 on zero-outcome rows and 0 elsewhere
/// and is regressed on the model with a very large weight on positive rows.
/// While the fit is not a certificate the response is replaced by the
/// positive part of the fit. The fit is a certificate once, relative to its
/// largest entry m, it is nonnegative on zero-outcome rows and vanishes on
/// positive ones (both up to `tol·m`); its entries above `tol·m` are the
/// separated rows. Without separation the response decays, and once m drops
/// below `tol` nothing is flagged.
pub fn check_ir(sample: &EstimationSample, params: &IrParams) -> IrOutcome {
    let n = sample.n_rows();
    let zero: Vec<bool> = sample.y.iter().map(|&y| y == 0.0).collect();
    if !zero.iter().any(|&z| z) {
        return IrOutcome {
            flagged: vec![false; n],
            zhat: vec![0.0; n],
            iterations: 0,
            converged: true,
        };
    }
    let big = params.big_weight.unwrap_or(1e6 * n as f64);
    let w: Vec<f64> = zero.iter().map(|&z| if z { 1.0 } else { big }).collect();
    let proj_tol = (1e-7 / big).max(1e-16);
    let proj = ir_projector(sample, &w);

    let keep = independent_columns(sample);
    let mut xt = sample.x.select_columns(&keep);
    project_matrix_best_effort(&proj, &mut xt, proj_tol);

    let mut u: Vec<f64> = zero.iter().map(|&z| if z { 1.0 } else { 0.0 }).collect();
    let mut zhat = vec![0.0; n];
    for iter in 1..=params.max_iter {
        let mut ut = u.clone();
        project_best_effort(&proj, &mut ut, proj_tol);
        let fit = wls_solve_with(&xt, &ut, &w);
        for i in 0..n {
            zhat[i] = u[i] - fit.resid[i];
        }
        let m = (0..n).filter(|&i| zero[i]).fold(0.0f64, |a, i| a.max(zhat[i]));
        if m <= params.tol {
            return IrOutcome {
                flagged: vec![false; n],
                zhat,
                iterations: iter,
                converged: true,
            };
        }
        let thresh = params.tol * m;
        let certified = (0..n).all(|i| {
            if zero[i] {
                zhat[i] >= -thresh
            } else {
                zhat[i].abs() <= thresh
            }
        });
        if certified {
            let flagged = (0..n).map(|i| zero[i] && zhat[i] > thresh).collect();
            return IrOutcome {
                flagged,
                zhat,
                iterations: iter,
                converged: true,
            };
        }
        for i in 0..n {
            u[i] = if zero[i] { zhat[i].max(0.0) } else { 0.0 };
        }
    }
    IrOutcome {
        flagged: vec![false; n],
        zhat,
        iterations: params.max_iter,
        converged: false,
    }
}

/// Checks that `zhat` certifies separation on `sample`: it lies in the span
/// of the regressors and absorbed effects, vanishes on positive-outcome
/// rows, is nonnegative on zero-outcome rows and positive somewhere. All
/// tests are relative to max|zhat|.
pub fn verify_certificate(sample: &EstimationSample, zhat: &[f64], tol: f64) -> bool {
    let n = sample.n_rows();
    if zhat.len() != n {
        return false;
    }
    let scale = zhat.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return false;
    }
    let thresh = tol * scale;
    for i in 0..n {
        let bad = if sample.y[i] > 0.0 {
            zhat[i].abs() > thresh
        } else {
            zhat[i] < -thresh
        };
        if bad {
            return false;
        }
    }
    let ones = vec![1.0; n];
    let proj = ir_projector(sample, &ones);
    let keep = independent_columns(sample);
    let mut xt = sample.x.select_columns(&keep);
    project_matrix_best_effort(&proj, &mut xt, 1e-13);
    let mut zt = zhat.to_vec();
    project_best_effort(&proj, &mut zt, 1e-13);
    let fit = wls_solve_with(&xt, &zt, &ones);
    fit.resid.iter().all(|r| r.abs() <= thresh)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeparatedRow {
    /// Original file row.
    pub row: usize,
    pub method: Method,
}

/// Positive entries of one accepted certificate, by original file row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    pub support: Vec<(usize, f64)>,
    #[serde(skip)]
    pub row_ids: Vec<usize>,
    #[serde(skip)]
    pub zhat: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SeparationReport {
    /// Methods actually run, in order of first use.
    pub methods: Vec<Method>,
    pub separated: Vec<SeparatedRow>,
    pub certificates: Vec<Certificate>,
    pub num_separated: usize,
    pub notices: Vec<String>,
}

impl SeparationReport {
    pub fn rows(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.separated.iter().map(|s| s.row).collect();
        r.sort_unstable();
        r
    }

    /// Space-separated method names; `none` when no check ran.
    pub fn methods_label(&self) -> String {
        if self.methods.is_empty() {
            return "none".into();
        }
        self.methods
            .iter()
            .map(Method::to_string)
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn mark(&mut self, m: Method) {
        if !self.methods.contains(&m) {
            self.methods.push(m);
        }
    }

    pub fn merge(&mut self, other: SeparationReport) {
        for m in other.methods {
            self.mark(m);
        }
        self.num_separated += other.num_separated;
        self.separated.extend(other.separated);
        self.certificates.extend(other.certificates);
        for n in other.notices {
            if !self.notices.contains(&n) {
                self.notices.push(n);
            }
        }
    }
}

fn drop_flagged(
    sample: EstimationSample,
    flagged: &[bool],
    method: Method,
    report: &mut SeparationReport,
) -> EstimationSample {
    let keep: Vec<bool> = flagged.iter().map(|f| !f).collect();
    for (i, &f) in flagged.iter().enumerate() {
        if f {
            report.separated.push(SeparatedRow {
                row: sample.row_ids[i],
                method,
            });
            report.num_separated += 1;
        }
    }
    sample.retain(&keep, DropReason::Separated)
}

/// Applies the requested checks (fe before ir) until neither finds more
/// rows. Dropped rows are ledgered as separated.
pub fn run_separation(
    sample: &EstimationSample,
    methods: &[Method],
    params: &IrParams,
) -> (EstimationSample, SeparationReport) {
    let mut report = SeparationReport::default();
    let mut sample = sample.clone();
    if methods.is_empty() || methods.contains(&Method::None) {
        return (sample, report);
    }
    for m in [Method::Simplex, Method::Mu] {
        if methods.contains(&m) {
            report
                .notices
                .push(format!("separation method `{m}` not implemented, skipped"));
        }
    }
    let use_fe = methods.contains(&Method::Fe);
    let use_ir = methods.contains(&Method::Ir);
    loop {
        let mut found = false;
        if use_fe && sample.intercept_terms().next().is_some() {
            report.mark(Method::Fe);
            let flagged = check_fe(&sample);
            if flagged.iter().any(|&f| f) && flagged.iter().any(|&f| !f) {
                sample = drop_flagged(sample, &flagged, Method::Fe, &mut report);
                found = true;
            }
        }
        if use_ir {
            report.mark(Method::Ir);
            let out = check_ir(&sample, params);
            if !out.converged {
                report.notices.push(format!(
                    "ir separation check did not converge in {} iterations; no rows dropped",
                    out.iterations
                ));
            } else if out.flagged.iter().any(|&f| f) {
                if verify_certificate(&sample, &out.zhat, params.tol) {
                    let support = (0..sample.n_rows())
                        .filter(|&i| out.flagged[i])
                        .map(|i| (sample.row_ids[i], out.zhat[i]))
                        .collect();
                    report.certificates.push(Certificate {
                        support,
                        row_ids: sample.row_ids.clone(),
                        zhat: out.zhat.clone(),
                    });
                    sample = drop_flagged(sample, &out.flagged, Method::Ir, &mut report);
                    found = true;
                } else {
                    report
                        .notices
                        .push("ir certificate failed verification; no rows dropped".into());
                }
            }
        }
        if !found || sample.n_rows() == 0 {
            return (sample, report);
        }
    }
}
