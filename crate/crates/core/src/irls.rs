//! Poisson IRLS with absorbed fixed effects.
//!
//! Each iteration forms the working response and weights, residualizes both
//! the working response and the covariates with respect to the absorbed
//! effects, solves the weighted least squares problem on the residualized
//! data and recovers the full linear predictor from the WLS residuals.
//!
//! With acceleration on, the working response is not residualized from
//! scratch. The previous residual plus the change in the working response
//! differs from the new working response only by a vector in the absorbed
//! span, so it has the same residual and is already close to it. Covariates
//! are refined in place under the new weights for the same reason. The
//! projector tolerance starts loose and tightens with the deviance change.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::dataset::EstimationSample;
use crate::projector::{recover_fe_sum, ProjectError, Projector, ProjectorOptions};

/// Largest |η| accepted before `exp` is considered to be running away.
pub const ETA_LIMIT: f64 = 700.0;

/// Relative pivot tolerance for collinearity detection.
pub const COLLINEAR_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IrlsError {
    #[error("response identically zero")]
    ZeroResponse,
    #[error(
        "diverging linear predictor at iteration {iteration} (|eta| = {max_eta:.1}); \
         likely separation, enable separation checks"
    )]
    DivergingPredictor { iteration: usize, max_eta: f64 },
    #[error(
        "covariate `{name}` became collinear at iteration {iteration}; \
         weights are degenerating, likely separation, enable separation checks"
    )]
    DegenerateUpdate { iteration: usize, name: String },
    #[error("nothing to estimate")]
    NothingToEstimate,
    #[error(transparent)]
    Project(#[from] ProjectError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Guess {
    #[default]
    Simple,
    Ols,
}

impl std::str::FromStr for Guess {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "simple" => Ok(Self::Simple),
            "ols" => Ok(Self::Ols),
            other => Err(format!("unknown guess `{other}` (expected simple or ols)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrlsOptions {
    pub tolerance: f64,
    pub maxiter: usize,
    pub guess: Guess,
    pub accelerate: bool,
    pub projector: ProjectorOptions,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            maxiter: 10_000,
            guess: Guess::Simple,
            accelerate: true,
            projector: ProjectorOptions::default(),
        }
    }
}

/// Weighted mean helper.
fn weighted_mean(v: &[f64], w: &[f64]) -> f64 {
    let (num, den) = v
        .iter()
        .zip(w)
        .fold((0.0, 0.0), |(a, b), (&x, &wi)| (a + wi * x, b + wi));
    num / den
}

/// Starting linear predictor.
///
/// `simple` starts from μ₀ = (y + ȳ)/2. `ols` regresses ln(1 + y) − offset
/// on the covariates and absorbed effects and uses the fitted values.
pub fn initial_guess(
    sample: &EstimationSample,
    method: Guess,
    projector: ProjectorOptions,
) -> Result<Vec<f64>, IrlsError> {
    let y = &sample.y;
    let w = &sample.weights;
    if y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() <= 0.0 {
        return Err(IrlsError::ZeroResponse);
    }
    match method {
        Guess::Simple => Ok(simple_guess(y, w)),
        Guess::Ols => {
            let lhs: Vec<f64> = y
                .iter()
                .zip(&sample.offset)
                .map(|(yi, o)| (1.0 + yi).ln() - o)
                .collect();
            let proj = Projector::for_sample(sample, w, projector);
            let mut zt = lhs.clone();
            proj.project_column(&mut zt, 1e-6)?;
            let mut xt = sample.x.clone();
            proj.project(&mut xt, 1e-6)?;
            let reference = weighted_sq_norms(&sample.x, w);
            let dropped = collinear_columns(&xt, w, &reference, COLLINEAR_TOL);
            let keep: Vec<usize> = (0..xt.ncols()).filter(|j| !dropped.contains(j)).collect();
            let fit = wls_solve_with(&xt.select_columns(&keep), &zt, w);
            Ok(lhs
                .iter()
                .zip(&fit.resid)
                .zip(&sample.offset)
                .map(|((l, e), o)| l - e + o)
                .collect())
        }
    }
}

pub fn simple_guess(y: &[f64], w: &[f64]) -> Vec<f64> {
    let ybar = weighted_mean(y, w);
    y.iter().map(|yi| (0.5 * (yi + ybar)).ln()).collect()
}

/// Working response and IRLS weights for the current linear predictor.
/// `z` excludes the offset.
pub fn update_working(
    y: &[f64],
    eta: &[f64],
    offset: &[f64],
    obs_weights: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), IrlsError> {
    let max_eta = eta.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    if !(max_eta <= ETA_LIMIT) {
        return Err(IrlsError::DivergingPredictor {
            iteration: 0,
            max_eta,
        });
    }
    let n = y.len();
    let mut z = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    for i in 0..n {
        let mu = eta[i].exp();
        z.push((y[i] - mu) / mu + eta[i] - offset[i]);
        w.push(obs_weights[i] * mu);
    }
    Ok((z, w))
}

/// Poisson deviance, with `y ln(y/μ) = 0` at `y = 0`.
pub fn deviance(y: &[f64], mu: &[f64], obs_weights: &[f64]) -> f64 {
    2.0 * y
        .iter()
        .zip(mu)
        .zip(obs_weights)
        .map(|((&yi, &mi), &wi)| {
            let t = if yi > 0.0 { yi * (yi / mi).ln() } else { 0.0 };
            wi * (t - (yi - mi))
        })
        .sum::<f64>()
}

/// Poisson log-likelihood (pseudo-likelihood for non-integer y).
pub fn loglik(y: &[f64], mu: &[f64], obs_weights: &[f64]) -> f64 {
    y.iter()
        .zip(mu)
        .zip(obs_weights)
        .map(|((&yi, &mi), &wi)| {
            let t = if yi > 0.0 { yi * mi.ln() } else { 0.0 };
            wi * (t - mi - ln_gamma(yi + 1.0))
        })
        .sum()
}

/// Σ w x_j² for each column.
pub fn weighted_sq_norms(x: &DMatrix<f64>, w: &[f64]) -> Vec<f64> {
    x.column_iter()
        .map(|c| c.iter().zip(w).map(|(v, wi)| wi * v * v).sum())
        .collect()
}

fn gram(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut xw = x.clone();
    for (i, &wi) in w.iter().enumerate() {
        let s = wi.sqrt();
        xw.row_mut(i).scale_mut(s);
    }
    xw.transpose() * &xw
}

/// Columns to drop, found by a sequential pivoted Cholesky of `X'WX` in
/// column order: column j goes when its squared residual on the kept
/// earlier columns is at most `rel_tol · reference[j]`.
pub fn collinear_columns(x: &DMatrix<f64>, w: &[f64], reference: &[f64], rel_tol: f64) -> Vec<usize> {
    let k = x.ncols();
    let g = gram(x, w);
    // rows of the lower Cholesky factor, over kept columns
    let mut l: Vec<Vec<f64>> = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..k {
        let mut row = Vec::with_capacity(kept.len() + 1);
        for (a, &ka) in kept.iter().enumerate() {
            let s: f64 = (0..a).map(|b| l[a][b] * row[b]).sum();
            row.push((g[(ka, j)] - s) / l[a][a]);
        }
        let d = g[(j, j)] - row.iter().map(|v| v * v).sum::<f64>();
        if !(d > rel_tol * reference[j]) || d <= 0.0 {
            dropped.push(j);
        } else {
            row.push(d.sqrt());
            l.push(row);
            kept.push(j);
        }
    }
    dropped
}

#[derive(Debug, Clone)]
pub struct WlsFit {
    pub delta: Vec<f64>,
    pub resid: Vec<f64>,
}

/// Weighted least squares on columns assumed full rank.
pub fn wls_solve_with(x: &DMatrix<f64>, z: &[f64], w: &[f64]) -> WlsFit {
    let n = z.len();
    let k = x.ncols();
    if k == 0 {
        return WlsFit {
            delta: vec![],
            resid: z.to_vec(),
        };
    }
    // QR of W^½X keeps the conditioning of X rather than squaring it
    let mut xw = x.clone();
    let mut zw = DVector::zeros(n);
    for i in 0..n {
        let s = w[i].sqrt();
        xw.row_mut(i).scale_mut(s);
        zw[i] = s * z[i];
    }
    // unit-norm columns, so a column whose weights have collapsed still
    // gets an accurate step
    let norms: Vec<f64> = (0..k)
        .map(|j| {
            let c = xw.column(j).norm();
            if c > 0.0 && c.is_finite() {
                c
            } else {
                1.0
            }
        })
        .collect();
    for (j, &c) in norms.iter().enumerate() {
        xw.column_mut(j).unscale_mut(c);
    }
    // largest rows first: with weights spanning many orders of magnitude,
    // Householder QR otherwise smears heavy rows into the light ones
    let row_max: Vec<f64> = (0..n).map(|i| xw.row(i).amax()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| row_max[b].total_cmp(&row_max[a]).then(a.cmp(&b)));
    let xw = xw.select_rows(&order);
    let zw = DVector::from_iterator(n, order.iter().map(|&i| zw[i]));
    let qr = xw.clone().qr();
    let qtz = qr.q().transpose() * &zw;
    let mut delta = match qr.r().solve_upper_triangular(&qtz) {
        Some(d) if d.iter().all(|v| v.is_finite()) => d,
        _ => xw
            .svd(true, true)
            .solve(&zw, 1e-14)
            .expect("svd solve with both factors"),
    };
    for (j, &c) in norms.iter().enumerate() {
        delta[j] /= c;
    }
    let fitted = x * &delta;
    let resid = z.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect();
    WlsFit {
        delta: delta.iter().copied().collect(),
        resid,
    }
}

#[derive(Debug, Clone)]
pub struct WlsSolution {
    /// One entry per input column; zero for dropped columns.
    pub delta: Vec<f64>,
    pub resid: Vec<f64>,
    pub dropped: Vec<usize>,
}

/// Weighted least squares with collinear columns dropped (pivot relative
/// to each column's own weighted norm).
pub fn wls_solve(x: &DMatrix<f64>, z: &[f64], w: &[f64]) -> WlsSolution {
    let reference = weighted_sq_norms(x, w);
    let dropped = collinear_columns(x, w, &reference, COLLINEAR_TOL);
    let keep: Vec<usize> = (0..x.ncols()).filter(|j| !dropped.contains(j)).collect();
    let fit = wls_solve_with(&x.select_columns(&keep), z, w);
    let mut delta = vec![0.0; x.ncols()];
    for (&j, &d) in keep.iter().zip(&fit.delta) {
        delta[j] = d;
    }
    WlsSolution {
        delta,
        resid: fit.resid,
        dropped,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub deviance: f64,
    /// |ΔD| / (1 + D); infinite on the first iteration.
    pub eps: f64,
    pub inner_tol: f64,
    pub sweeps: usize,
    pub max_delta_eta: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Coefficients for every covariate column; zero where dropped.
    pub delta: Vec<f64>,
    pub kept: Vec<usize>,
    pub dropped_collinear: Vec<usize>,
    pub eta: Vec<f64>,
    pub mu: Vec<f64>,
    /// Sum of the fixed effects per row.
    pub d: Vec<f64>,
    pub deviance: f64,
    pub ll: f64,
    pub ic: usize,
    pub ic2: usize,
    pub converged: bool,
    /// Kept covariates residualized under the converged weights.
    pub x_tilde: DMatrix<f64>,
    /// (X̃'WX̃)⁻¹ at the converged weights, over kept columns.
    pub bread: DMatrix<f64>,
    pub history: Vec<IterationRecord>,
}

impl FitResult {
    pub fn rank(&self) -> usize {
        self.kept.len()
    }

    pub fn kept_delta(&self) -> Vec<f64> {
        self.kept.iter().map(|&j| self.delta[j]).collect()
    }
}

/// Fits the Poisson model on `sample`, which must already be free of
/// singletons and separated observations.
pub fn irls_fit(sample: &EstimationSample, opts: &IrlsOptions) -> Result<FitResult, IrlsError> {
    let tol = opts.tolerance;
    let y = &sample.y;
    let obs_w = &sample.weights;
    let offset = &sample.offset;
    let k = sample.x.ncols();
    let mut eta = initial_guess(sample, opts.guess, opts.projector)?;

    let mut proj = Projector::for_sample(sample, obs_w, opts.projector);
    let mut keep: Vec<usize> = (0..k).collect();
    let mut dropped = Vec::new();
    let mut xt = sample.x.clone();
    let mut zt_prev: Option<Vec<f64>> = None;
    let mut z_last: Vec<f64> = Vec::new();
    let mut dev_prev: Option<f64> = None;
    let mut eps_prev: Option<f64> = None;
    let mut delta_kept = Vec::new();
    let mut ic2 = 0;
    let mut history = Vec::new();
    let mut converged = false;
    let mut dev = f64::NAN;

    let mut ic = 0;
    while ic < opts.maxiter {
        ic += 1;
        let (z, w) = update_working(y, &eta, offset, obs_w).map_err(|e| match e {
            IrlsError::DivergingPredictor { max_eta, .. } => IrlsError::DivergingPredictor {
                iteration: ic,
                max_eta,
            },
            other => other,
        })?;
        proj.set_weights(&w);

        let inner_tol = if !opts.accelerate {
            tol
        } else {
            match eps_prev {
                None => tol.max(1e-3),
                Some(e) => tol.max(1e-3f64.min(0.1 * e)),
            }
        };

        let warm = opts.accelerate && ic > 1;
        let mut zt = match (&zt_prev, warm) {
            (Some(prev), true) => prev
                .iter()
                .zip(&z)
                .zip(&z_last)
                .map(|((p, zi), zl)| p + zi - zl)
                .collect(),
            _ => z.clone(),
        };
        if !warm {
            xt = sample.x.select_columns(&keep);
        }
        // collinearity is judged once, on covariates residualized tightly
        let x_tol = if ic == 1 { tol } else { inner_tol };
        let (rz, rx) = rayon::join(
            || proj.project_column(&mut zt, inner_tol),
            || proj.project(&mut xt, x_tol),
        );
        let sweeps = rz?.max(rx?);
        ic2 += sweeps;

        let xs = sample.x.select_columns(&keep);
        let reference = weighted_sq_norms(&xs, &w);
        let newly = collinear_columns(&xt, &w, &reference, COLLINEAR_TOL);
        if !newly.is_empty() {
            if ic == 1 {
                let local: Vec<usize> = (0..keep.len()).filter(|j| !newly.contains(j)).collect();
                dropped = newly.iter().map(|&j| keep[j]).collect();
                keep = local.iter().map(|&j| keep[j]).collect();
                xt = xt.select_columns(&local);
            } else {
                return Err(IrlsError::DegenerateUpdate {
                    iteration: ic,
                    name: sample.x_names[keep[newly[0]]].clone(),
                });
            }
        }
        if keep.is_empty() && proj.n_terms() == 0 {
            return Err(IrlsError::NothingToEstimate);
        }

        let fit = wls_solve_with(&xt, &zt, &w);
        let mut max_delta_eta = 0.0f64;
        for i in 0..eta.len() {
            let new = z[i] - fit.resid[i] + offset[i];
            max_delta_eta = max_delta_eta.max((new - eta[i]).abs());
            eta[i] = new;
        }
        delta_kept = fit.delta;

        let mu: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
        dev = deviance(y, &mu, obs_w);
        let eps = match dev_prev {
            Some(dp) => (dev - dp).abs() / (1.0 + dev),
            None => f64::INFINITY,
        };
        history.push(IterationRecord {
            iteration: ic,
            deviance: dev,
            eps,
            inner_tol,
            sweeps,
            max_delta_eta,
        });

        if !dev.is_finite() {
            let max_eta = eta.iter().fold(0.0f64, |m, e| m.max(e.abs()));
            return Err(IrlsError::DivergingPredictor {
                iteration: ic,
                max_eta,
            });
        }
        if eps < tol && inner_tol <= tol && max_delta_eta < tol.sqrt() {
            converged = true;
            break;
        }
        zt_prev = Some(zt);
        z_last = z;
        dev_prev = Some(dev);
        eps_prev = eps.is_finite().then_some(eps);
    }

    let mu: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
    let w_final: Vec<f64> = mu.iter().zip(obs_w).map(|(m, w)| m * w).collect();
    proj.set_weights(&w_final);
    // residualization is weight-free up to the absorbed span, so refine in place
    let final_tol = (tol * 1e-2).max(1e-14);
    ic2 += proj.project(&mut xt, final_tol)?;
    let bread = if xt.ncols() == 0 {
        DMatrix::zeros(0, 0)
    } else {
        let g = gram(&xt, &w_final);
        g.clone()
            .cholesky()
            .map(|c| c.inverse())
            .or_else(|| g.pseudo_inverse(1e-14).ok())
            .expect("bread inversion")
    };

    let mut delta = vec![0.0; k];
    for (&j, &d) in keep.iter().zip(&delta_kept) {
        delta[j] = d;
    }
    let d = recover_fe_sum(&eta, &sample.x.select_columns(&keep), &delta_kept, offset);
    let ll = loglik(y, &mu, obs_w);

    Ok(FitResult {
        delta,
        kept: keep,
        dropped_collinear: dropped,
        eta,
        mu,
        d,
        deviance: dev,
        ll,
        ic,
        ic2,
        converged,
        x_tilde: xt,
        bread,
        history,
    })
}

/// Log-likelihood of the model with the absorbed effects only (plus the
/// constant when the model has one).
pub fn fit_fe_only(sample: &EstimationSample, opts: &IrlsOptions) -> Result<FitResult, IrlsError> {
    let cols: Vec<usize> = sample
        .x_names
        .iter()
        .enumerate()
        .filter(|(_, n)| *n == crate::dataset::CONSTANT_NAME)
        .map(|(j, _)| j)
        .collect();
    irls_fit(&sample.with_columns(&cols), opts)
}
