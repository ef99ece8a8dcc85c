//! Dense reference implementations used by the integration and acceptance
//! tests: Poisson MLE with explicit dummy columns, its robust sandwich, and
//! brute-force separation by LP vertex enumeration.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ppmlhdfe::dataset::EstimationSample;

/// Dense Poisson problem with every absorbed effect spelled out.
#[derive(Debug, Clone)]
pub struct DenseProblem {
    pub y: Vec<f64>,
    /// Covariates followed by dummy (or group-slope) columns.
    pub design: DMatrix<f64>,
    pub n_covariates: usize,
    pub offset: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Explicit design: dummies for intercept terms, `v·1{g}` for slope terms.
/// `level_order` permutes the dummy columns of each term, which changes the
/// level that ends up pruned as the reference.
pub fn dense_problem(sample: &EstimationSample, level_order: Option<&[Vec<usize>]>) -> DenseProblem {
    let n = sample.n_rows();
    let k = sample.x.ncols();
    let p = k + sample.terms.iter().map(|t| t.n_groups).sum::<usize>();
    let mut design = DMatrix::<f64>::zeros(n, p);
    design.columns_mut(0, k).copy_from(&sample.x);
    let mut col = k;
    for (t, term) in sample.terms.iter().enumerate() {
        let order: Vec<usize> = match level_order {
            Some(o) => o[t].clone(),
            None => (0..term.n_groups).collect(),
        };
        for i in 0..n {
            let g = term.codes[i] as usize;
            let pos = order.iter().position(|&o| o == g).unwrap();
            let v = term.slope.as_ref().map_or(1.0, |s| s[i]);
            design[(i, col + pos)] = v;
        }
        col += term.n_groups;
    }
    DenseProblem {
        y: sample.y.clone(),
        design,
        n_covariates: k,
        offset: sample.offset.clone(),
        weights: sample.weights.clone(),
    }
}

/// Indices of columns kept by sequential Gram–Schmidt, absorbed columns
/// first and covariates after, mirroring how the engine resolves ties.
pub fn independent_columns(design: &DMatrix<f64>, n_covariates: usize) -> Vec<usize> {
    let p = design.ncols();
    let order: Vec<usize> = (n_covariates..p).chain(0..n_covariates).collect();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept = Vec::new();
    for j in order {
        let c = design.column(j).into_owned();
        let norm0 = c.norm();
        let mut r = c.clone();
        // two passes for stability
        for _ in 0..2 {
            for b in &basis {
                let proj = b.dot(&r);
                r -= b * proj;
            }
        }
        let nr = r.norm();
        if norm0 > 0.0 && nr > 1e-9 * norm0 {
            basis.push(r / nr);
            kept.push(j);
        }
    }
    kept.sort_unstable();
    kept
}

#[derive(Debug, Clone)]
pub struct DenseFit {
    /// Coefficients over `kept` columns.
    pub beta: Vec<f64>,
    pub kept: Vec<usize>,
    pub eta: Vec<f64>,
    pub mu: Vec<f64>,
    pub ll: f64,
    pub deviance: f64,
    /// Robust sandwich over `kept` columns, q = n / (n − p).
    pub v_robust: DMatrix<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl DenseFit {
    /// Coefficient of original design column `j`, if kept.
    pub fn coef(&self, j: usize) -> Option<f64> {
        self.kept.iter().position(|&c| c == j).map(|a| self.beta[a])
    }

    pub fn se(&self, j: usize) -> Option<f64> {
        self.kept
            .iter()
            .position(|&c| c == j)
            .map(|a| self.v_robust[(a, a)].sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleError {
    NotConverged { iterations: usize, grad_norm: f64 },
}

fn ln_factorial(y: f64) -> f64 {
    statrs::function::gamma::ln_gamma(y + 1.0)
}

fn loglik(y: &[f64], mu: &[f64], w: &[f64]) -> f64 {
    (0..y.len())
        .map(|i| {
            let t = if y[i] > 0.0 { y[i] * mu[i].ln() } else { 0.0 };
            w[i] * (t - mu[i] - ln_factorial(y[i]))
        })
        .sum()
}

fn deviance(y: &[f64], mu: &[f64], w: &[f64]) -> f64 {
    2.0 * (0..y.len())
        .map(|i| {
            let t = if y[i] > 0.0 { y[i] * (y[i] / mu[i]).ln() } else { 0.0 };
            w[i] * (t - (y[i] - mu[i]))
        })
        .sum::<f64>()
}

/// Newton–Raphson with step halving on the exact Poisson log-likelihood.
pub fn dense_poisson_mle(prob: &DenseProblem) -> Result<DenseFit, OracleError> {
    let n = prob.y.len();
    let kept = independent_columns(&prob.design, prob.n_covariates);
    let x = prob.design.select_columns(&kept);
    let w = &prob.weights;

    // start from a least squares fit of the log of a smoothed response
    let ybar: f64 = (0..n).map(|i| w[i] * prob.y[i]).sum::<f64>() / w.iter().sum::<f64>();
    let target = DVector::from_iterator(n, (0..n).map(|i| (0.5 * (prob.y[i] + ybar)).ln() - prob.offset[i]));
    let mut beta = x.clone().svd(true, true).solve(&target, 1e-12).unwrap();

    let eta_of = |b: &DVector<f64>| -> Vec<f64> {
        let xb = &x * b;
        (0..n).map(|i| xb[i] + prob.offset[i]).collect()
    };
    let mut eta = eta_of(&beta);
    let mut mu: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
    let mut ll = loglik(&prob.y, &mu, w);
    let scale = (0..n).map(|i| w[i] * prob.y[i]).sum::<f64>().max(1.0);
    let mut grad_norm = f64::INFINITY;
    for it in 0..500 {
        let resid = DVector::from_iterator(n, (0..n).map(|i| w[i] * (prob.y[i] - mu[i])));
        let grad = x.transpose() * &resid;
        grad_norm = grad.amax();
        if grad_norm <= 1e-10 * scale {
            let v = sandwich(&x, &prob.y, &mu, w);
            return Ok(DenseFit {
                beta: beta.iter().copied().collect(),
                kept,
                deviance: deviance(&prob.y, &mu, w),
                eta,
                mu,
                ll,
                v_robust: v,
                iterations: it,
                grad_norm,
            });
        }
        let mut xw = x.clone();
        for i in 0..n {
            xw.row_mut(i).scale_mut((w[i] * mu[i]).sqrt());
        }
        let h = xw.transpose() * &xw;
        let step = match h.clone().cholesky() {
            Some(c) => c.solve(&grad),
            None => break,
        };
        let mut t = 1.0;
        loop {
            let cand = &beta + &step * t;
            let ce = eta_of(&cand);
            if ce.iter().all(|e| e.abs() < 700.0) {
                let cm: Vec<f64> = ce.iter().map(|e| e.exp()).collect();
                let cll = loglik(&prob.y, &cm, w);
                if cll >= ll - 1e-12 * ll.abs() {
                    beta = cand;
                    eta = ce;
                    mu = cm;
                    ll = cll;
                    break;
                }
            }
            t *= 0.5;
            if t < 1e-12 {
                return Err(OracleError::NotConverged {
                    iterations: it,
                    grad_norm,
                });
            }
        }
    }
    Err(OracleError::NotConverged {
        iterations: 500,
        grad_norm,
    })
}

/// q · H⁻¹ M H⁻¹ with q = n / (n − p).
pub fn sandwich(x: &DMatrix<f64>, y: &[f64], mu: &[f64], w: &[f64]) -> DMatrix<f64> {
    let n = x.nrows();
    let p = x.ncols();
    let mut xw = x.clone();
    let mut s = x.clone();
    for i in 0..n {
        xw.row_mut(i).scale_mut((w[i] * mu[i]).sqrt());
        s.row_mut(i).scale_mut(w[i] * (y[i] - mu[i]));
    }
    let h = xw.transpose() * &xw;
    let hinv = h.cholesky().expect("full-rank design").inverse();
    let meat = s.transpose() * &s;
    let q = n as f64 / (n - p) as f64;
    &hinv * meat * &hinv * q
}

fn null_space(a: &DMatrix<f64>, p: usize) -> DMatrix<f64> {
    if a.nrows() == 0 {
        return DMatrix::identity(p, p);
    }
    let ata = a.transpose() * a;
    let eig = SymmetricEigen::new(ata);
    let scale = eig.eigenvalues.amax().max(1.0);
    let cols: Vec<usize> = (0..p).filter(|&i| eig.eigenvalues[i] <= 1e-10 * scale).collect();
    eig.eigenvectors.select_columns(&cols)
}

/// Orthonormal basis for the range of `b`, ignoring singular values below
/// `1e-9 · scale`.
fn orthonormal_range(b: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
    if b.ncols() == 0 {
        return DMatrix::zeros(b.nrows(), 0);
    }
    let svd = b.clone().svd(true, false);
    let u = svd.u.unwrap();
    let cols: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > 1e-9 * scale)
        .collect();
    u.select_columns(&cols)
}

fn for_each_combination(m: usize, d: usize, f: &mut dyn FnMut(&[usize])) {
    if d > m {
        return;
    }
    let mut idx: Vec<usize> = (0..d).collect();
    loop {
        f(&idx);
        let mut i = d;
        while i > 0 && idx[i - 1] == i - 1 + m - d {
            i -= 1;
        }
        if i == 0 {
            return;
        }
        idx[i - 1] += 1;
        for j in i..d {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// One LP solve: max Σz over {z = A_zero γ : A_pos γ = 0, 0 ≤ z ≤ 1} by
/// enumerating vertices. Returns the optimal z over the zero rows.
fn lp_max_sum(a_zero: &DMatrix<f64>, a_pos: &DMatrix<f64>) -> Vec<f64> {
    let m = a_zero.nrows();
    let p = a_zero.ncols();
    let ns = null_space(a_pos, p);
    let q = orthonormal_range(&(a_zero * ns), a_zero.norm().max(1.0));
    let d = q.ncols();
    if d == 0 {
        return vec![0.0; m];
    }
    let mut work = 1f64;
    for i in 0..d {
        work *= (m - i) as f64 / (i + 1) as f64;
    }
    assert!(work * 2f64.powi(d as i32) < 2e7, "instance too large for vertex enumeration");

    let mut best = vec![0.0; m];
    let mut best_obj = 0.0;
    for_each_combination(m, d, &mut |rows| {
        let qs = q.select_rows(rows);
        let lu = qs.clone().lu();
        if lu.determinant().abs() < 1e-12 {
            return;
        }
        for bounds in 0u32..(1 << d) {
            let rhs = DVector::from_iterator(d, (0..d).map(|j| f64::from((bounds >> j) & 1)));
            let Some(t) = lu.solve(&rhs) else { continue };
            let z = &q * t;
            if z.iter().all(|&v| v >= -1e-9 && v <= 1.0 + 1e-9) {
                let obj: f64 = z.sum();
                if obj > best_obj + 1e-9 {
                    best_obj = obj;
                    best = z.iter().map(|v| v.clamp(0.0, 1.0)).collect();
                }
            }
        }
    });
    best
}

/// Rows that can be separated, found by repeatedly solving the LP and
/// removing the rows it certifies until nothing new appears. A single LP
/// optimum need not cover every separable row.
pub fn brute_force_separation(y: &[f64], design: &DMatrix<f64>) -> Vec<bool> {
    let n = y.len();
    let pos: Vec<usize> = (0..n).filter(|&i| y[i] > 0.0).collect();
    let mut remaining: Vec<usize> = (0..n).filter(|&i| y[i] == 0.0).collect();
    let a_pos = design.select_rows(&pos);
    let mut flagged = vec![false; n];
    loop {
        if remaining.is_empty() {
            return flagged;
        }
        let a_zero = design.select_rows(&remaining);
        let z = lp_max_sum(&a_zero, &a_pos);
        let hits: Vec<usize> = (0..remaining.len()).filter(|&r| z[r] > 1e-8).collect();
        if hits.is_empty() {
            return flagged;
        }
        for &r in &hits {
            flagged[remaining[r]] = true;
        }
        remaining = remaining
            .iter()
            .enumerate()
            .filter(|(r, _)| !hits.contains(r))
            .map(|(_, &i)| i)
            .collect();
    }
}

/// Largest relative discrepancies between an engine fit and the dense
/// oracle on the same (reduced) sample. Relative errors use max(|oracle|, 1)
/// as the denominator.
#[derive(Debug, Clone, Default)]
pub struct Discrepancy {
    pub coef: f64,
    pub se: f64,
    pub ll: f64,
    pub deviance: f64,
    pub fe_sum: f64,
    /// Engine and oracle disagree on which covariates are identified.
    pub kept_mismatch: bool,
}

impl Discrepancy {
    pub fn max(&self) -> f64 {
        self.coef.max(self.se).max(self.ll).max(self.deviance).max(self.fe_sum)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

pub fn compare_with_oracle(est: &ppmlhdfe::pipeline::Estimate) -> Result<Discrepancy, OracleError> {
    let s = &est.sample;
    let prob = dense_problem(s, None);
    let dense = dense_poisson_mle(&prob)?;
    let k = s.x.ncols();
    let mut out = Discrepancy::default();
    let v = &est.results.matrices.V.values;
    for j in 0..k {
        let engine_kept = est.fit.kept.contains(&j);
        match dense.coef(j) {
            Some(b) if engine_kept => {
                out.coef = out.coef.max(rel(est.fit.delta[j], b));
                out.se = out.se.max(rel(v[j][j].sqrt(), dense.se(j).unwrap()));
            }
            None if !engine_kept => {}
            _ => out.kept_mismatch = true,
        }
    }
    out.ll = rel(est.fit.ll, dense.ll);
    out.deviance = rel(est.fit.deviance, dense.deviance);
    for i in 0..s.n_rows() {
        let xb: f64 = (0..k).filter_map(|j| dense.coef(j).map(|b| b * s.x[(i, j)])).sum();
        let d = dense.eta[i] - xb - s.offset[i];
        out.fe_sum = out.fe_sum.max(rel(est.fit.d[i], d));
    }
    Ok(out)
}
