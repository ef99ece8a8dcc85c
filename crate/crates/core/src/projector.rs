//! Weighted within-transformation with respect to all absorbed terms.
//!
//! Columns are residualized by alternating weighted projections: each term
//! subtracts its group-wise weighted mean (intercept terms) or its group-wise
//! weighted slope on `v` (slope terms). A *sweep* applies every term forward
//! then backward, which makes the sweep operator self-adjoint in the
//! `W`-inner product. Two accelerations are available on top of plain sweeps:
//! Irons–Tuck vector extrapolation every third sweep, and conjugate gradient
//! on `(I - S) u = (I - S) c`, where `u` is the absorbed component.
//!
//! Convergence is declared when the largest per-row update a sweep would
//! make falls below `tol` times the root-mean-square of the input column.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dataset::{DataError, DropReason, EstimationSample, FactorTerm, GroupVar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectError {
    #[error("within-transformation did not converge after {sweeps} sweeps (last update {last_update:e})")]
    NotConverged { sweeps: usize, last_update: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Acceleration {
    None,
    #[default]
    Aitken,
    ConjugateGradient,
}

impl std::str::FromStr for Acceleration {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "aitken" => Ok(Self::Aitken),
            "cg" | "conjugate_gradient" => Ok(Self::ConjugateGradient),
            other => Err(format!("unknown acceleration `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectorOptions {
    pub acceleration: Acceleration,
    pub max_sweeps: usize,
}

impl Default for ProjectorOptions {
    fn default() -> Self {
        Self {
            acceleration: Acceleration::default(),
            max_sweeps: 100_000,
        }
    }
}

#[derive(Debug, Clone)]
struct TermIndex {
    codes: Vec<u32>,
    n_groups: usize,
    slope: Option<Vec<f64>>,
}

/// Residualizer for one sample and one set of weights. Owns no per-call
/// scratch, so a shared reference can project many columns in parallel.
#[derive(Debug, Clone)]
pub struct Projector {
    terms: Vec<TermIndex>,
    weights: Vec<f64>,
    /// Per term, per group: Σw (intercept) or Σw·v² (slope).
    denom: Vec<Vec<f64>>,
    opts: ProjectorOptions,
}

impl Projector {
    pub fn new(terms: &[FactorTerm], weights: &[f64], opts: ProjectorOptions) -> Self {
        let terms = terms
            .iter()
            .map(|t| TermIndex {
                codes: t.codes.clone(),
                n_groups: t.n_groups,
                slope: t.slope.clone(),
            })
            .collect();
        let mut p = Projector {
            terms,
            weights: Vec::new(),
            denom: Vec::new(),
            opts,
        };
        p.set_weights(weights);
        p
    }

    pub fn for_sample(sample: &EstimationSample, weights: &[f64], opts: ProjectorOptions) -> Self {
        Self::new(&sample.terms, weights, opts)
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn options(&self) -> ProjectorOptions {
        self.opts
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: &[f64]) {
        debug_assert!(weights.iter().all(|&w| w > 0.0));
        self.weights = weights.to_vec();
        self.denom = self
            .terms
            .iter()
            .map(|t| {
                let mut d = vec![0.0; t.n_groups];
                match &t.slope {
                    None => {
                        for (&g, &w) in t.codes.iter().zip(weights) {
                            d[g as usize] += w;
                        }
                    }
                    Some(v) => {
                        for ((&g, &w), &vi) in t.codes.iter().zip(weights).zip(v) {
                            d[g as usize] += w * vi * vi;
                        }
                    }
                }
                d
            })
            .collect();
    }

    /// Subtracts term `t`'s weighted projection from `r`. Returns the
    /// largest absolute per-row change.
    fn apply_term(&self, t: usize, r: &mut [f64], sums: &mut Vec<f64>) -> f64 {
        let term = &self.terms[t];
        let denom = &self.denom[t];
        sums.clear();
        sums.resize(term.n_groups, 0.0);
        let mut max_update = 0.0f64;
        match &term.slope {
            None => {
                for ((&g, &w), &ri) in term.codes.iter().zip(&self.weights).zip(r.iter()) {
                    sums[g as usize] += w * ri;
                }
                for (s, &d) in sums.iter_mut().zip(denom) {
                    *s /= d;
                    max_update = max_update.max(s.abs());
                }
                for (&g, ri) in term.codes.iter().zip(r.iter_mut()) {
                    *ri -= sums[g as usize];
                }
            }
            Some(v) => {
                for (((&g, &w), &ri), &vi) in
                    term.codes.iter().zip(&self.weights).zip(r.iter()).zip(v)
                {
                    sums[g as usize] += w * vi * ri;
                }
                for (s, &d) in sums.iter_mut().zip(denom) {
                    *s = if d > 0.0 { *s / d } else { 0.0 };
                }
                for ((&g, ri), &vi) in term.codes.iter().zip(r.iter_mut()).zip(v) {
                    let delta = sums[g as usize] * vi;
                    *ri -= delta;
                    max_update = max_update.max(delta.abs());
                }
            }
        }
        max_update
    }

    /// One symmetric sweep (terms forward, then backward without repeating
    /// the last). Returns the largest per-row update.
    fn sweep(&self, r: &mut [f64], sums: &mut Vec<f64>) -> f64 {
        let k = self.terms.len();
        let mut upd = 0.0f64;
        for t in 0..k {
            upd = upd.max(self.apply_term(t, r, sums));
        }
        for t in (0..k.saturating_sub(1)).rev() {
            upd = upd.max(self.apply_term(t, r, sums));
        }
        upd
    }

    fn dot_w(&self, a: &[f64], b: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(a)
            .zip(b)
            .map(|((&w, &x), &y)| w * x * y)
            .sum()
    }

    /// Residualizes one column in place and returns the sweeps used. On
    /// failure the column holds the last iterate.
    pub fn project_column(&self, col: &mut [f64], tol: f64) -> Result<usize, ProjectError> {
        let k = self.terms.len();
        if k == 0 {
            return Ok(0);
        }
        let n = col.len().max(1) as f64;
        let scale = (col.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
        if scale == 0.0 {
            return Ok(0);
        }
        let mut sums = Vec::new();
        if k == 1 {
            // a single projection is exact
            self.sweep(col, &mut sums);
            return Ok(1);
        }
        let threshold = tol * scale;
        match self.opts.acceleration {
            Acceleration::None => self.plain(col, threshold, &mut sums),
            Acceleration::Aitken => self.aitken(col, threshold, &mut sums),
            Acceleration::ConjugateGradient => self.conjugate_gradient(col, threshold, &mut sums),
        }
    }

    fn plain(&self, r: &mut [f64], threshold: f64, sums: &mut Vec<f64>) -> Result<usize, ProjectError> {
        let mut last = f64::INFINITY;
        for sweeps in 1..=self.opts.max_sweeps {
            last = self.sweep(r, sums);
            if last <= threshold {
                return Ok(sweeps);
            }
        }
        Err(ProjectError::NotConverged {
            sweeps: self.opts.max_sweeps,
            last_update: last,
        })
    }

    fn aitken(&self, r: &mut [f64], threshold: f64, sums: &mut Vec<f64>) -> Result<usize, ProjectError> {
        let n = r.len();
        let mut x0 = vec![0.0; n];
        let mut x1 = vec![0.0; n];
        let mut d1 = vec![0.0; n];
        let mut d2 = vec![0.0; n];
        let mut sweeps = 0;
        let mut last = f64::INFINITY;
        loop {
            x0.copy_from_slice(r);
            for buf in [&mut x1, &mut d1] {
                if sweeps >= self.opts.max_sweeps {
                    return Err(ProjectError::NotConverged {
                        sweeps,
                        last_update: last,
                    });
                }
                last = self.sweep(r, sums);
                sweeps += 1;
                if last <= threshold {
                    return Ok(sweeps);
                }
                buf.copy_from_slice(r);
            }
            // r = T²x0, x1 = T x0
            for i in 0..n {
                d1[i] = r[i] - x1[i];
                d2[i] = r[i] - 2.0 * x1[i] + x0[i];
            }
            let den = self.dot_w(&d2, &d2);
            if den > 0.0 {
                let step = self.dot_w(&d1, &d2) / den;
                if step.is_finite() {
                    for i in 0..n {
                        r[i] -= step * d1[i];
                    }
                }
            }
        }
    }

    fn conjugate_gradient(
        &self,
        x: &mut [f64],
        threshold: f64,
        sums: &mut Vec<f64>,
    ) -> Result<usize, ProjectError> {
        let n = x.len();
        let sup = |v: &[f64]| v.iter().fold(0.0f64, |m, a| m.max(a.abs()));

        // r = x - S x, the update one sweep would make
        let mut r = x.to_vec();
        self.sweep(&mut r, sums);
        for i in 0..n {
            r[i] = x[i] - r[i];
        }
        let mut sweeps = 1;
        let mut last = sup(&r);
        if last <= threshold {
            for i in 0..n {
                x[i] -= r[i];
            }
            return Ok(sweeps);
        }
        let mut p = r.clone();
        let mut ap = vec![0.0; n];
        let mut rr = self.dot_w(&r, &r);
        while sweeps < self.opts.max_sweeps {
            ap.copy_from_slice(&p);
            self.sweep(&mut ap, sums);
            sweeps += 1;
            for i in 0..n {
                ap[i] = p[i] - ap[i];
            }
            let pap = self.dot_w(&p, &ap);
            if pap <= 0.0 || !pap.is_finite() {
                return Ok(sweeps);
            }
            let alpha = rr / pap;
            for i in 0..n {
                x[i] -= alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            last = sup(&r);
            if last <= threshold {
                return Ok(sweeps);
            }
            let rr_new = self.dot_w(&r, &r);
            let beta = rr_new / rr;
            rr = rr_new;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
        }
        Err(ProjectError::NotConverged {
            sweeps,
            last_update: last,
        })
    }

    /// Residualizes every column of `cols` in place (columns in parallel).
    /// Returns the largest sweep count over columns.
    pub fn project(&self, cols: &mut DMatrix<f64>, tol: f64) -> Result<usize, ProjectError> {
        let n = cols.nrows();
        if n == 0 || cols.ncols() == 0 || self.terms.is_empty() {
            return Ok(0);
        }
        let results: Vec<Result<usize, ProjectError>> = cols
            .as_mut_slice()
            .par_chunks_mut(n)
            .map(|c| self.project_column(c, tol))
            .collect();
        let mut max = 0;
        for r in results {
            max = max.max(r?);
        }
        Ok(max)
    }

    /// Splits a vector lying in the absorbed span into per-term components
    /// (each term's fitted effect per row). Components sum to `d`.
    pub fn decompose(&self, d: &[f64], tol: f64) -> Vec<Vec<f64>> {
        let k = self.terms.len();
        let mut comps = vec![vec![0.0; d.len()]; k];
        if k == 0 {
            return comps;
        }
        let mut r = d.to_vec();
        let mut before = vec![0.0; d.len()];
        let mut sums = Vec::new();
        let n = d.len().max(1) as f64;
        let scale = (d.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
        for _ in 0..self.opts.max_sweeps {
            let mut upd = 0.0f64;
            for t in 0..k {
                before.copy_from_slice(&r);
                upd = upd.max(self.apply_term(t, &mut r, &mut sums));
                for i in 0..r.len() {
                    comps[t][i] += before[i] - r[i];
                }
            }
            if upd <= tol * scale {
                break;
            }
        }
        // whatever is left (not absorbable, or unconverged) goes to the first term
        for (c, ri) in comps[0].iter_mut().zip(&r) {
            *c += ri;
        }
        comps
    }
}

/// Iteratively removes observations that are alone in a group of any
/// intercept term. Returns the reduced sample and the number dropped.
pub fn drop_singletons(sample: &EstimationSample) -> Result<(EstimationSample, usize), DataError> {
    let n = sample.n_rows();
    let mut keep = vec![true; n];
    let mut dropped = 0;
    loop {
        let mut changed = false;
        for term in sample.intercept_terms() {
            let mut counts = vec![0usize; term.n_groups];
            for (i, &g) in term.codes.iter().enumerate() {
                if keep[i] {
                    counts[g as usize] += 1;
                }
            }
            for (i, &g) in term.codes.iter().enumerate() {
                if keep[i] && counts[g as usize] == 1 {
                    keep[i] = false;
                    dropped += 1;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    if dropped == n {
        return Err(DataError::NoObservations);
    }
    if dropped == 0 {
        return Ok((sample.clone(), 0));
    }
    Ok((sample.retain(&keep, DropReason::Singleton), dropped))
}

/// Degrees of freedom absorbed by one term.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DofEntry {
    pub label: String,
    pub categories: usize,
    pub redundant: usize,
    pub num_coefs: usize,
    /// Every group of the term lies inside one cluster.
    pub nested: bool,
    /// `redundant` is exact rather than a conservative lower bound.
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DofTable {
    pub entries: Vec<DofEntry>,
    pub df_a: usize,
    pub df_a_initial: usize,
    pub df_a_redundant: usize,
    pub method: String,
}

pub const DOF_METHOD: &str = "pairwise";

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut a: usize) -> usize {
        while self.parent[a] != a {
            self.parent[a] = self.parent[self.parent[a]];
            a = self.parent[a];
        }
        a
    }

    /// Returns true when two components were merged.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra] = rb;
        true
    }
}

/// Connected components of the bipartite graph linking the groups of two
/// terms through shared observations.
pub fn bipartite_components(a: &[u32], ga: usize, b: &[u32], gb: usize) -> usize {
    let mut uf = UnionFind::new(ga + gb);
    let mut components = ga + gb;
    for (&i, &j) in a.iter().zip(b) {
        if uf.union(i as usize, ga + j as usize) {
            components -= 1;
        }
    }
    components
}

/// True when every group of `codes` maps into a single cluster.
pub fn is_nested(codes: &[u32], n_groups: usize, cluster: &GroupVar) -> bool {
    let mut owner: Vec<Option<u32>> = vec![None; n_groups];
    for (&g, &c) in codes.iter().zip(&cluster.codes) {
        match owner[g as usize] {
            None => owner[g as usize] = Some(c),
            Some(o) if o != c => return false,
            Some(_) => {}
        }
    }
    true
}

/// Degrees-of-freedom accounting for the absorbed terms.
///
/// The first intercept term loses nothing; the second loses one category
/// per connected component of its bipartite graph with the first; later
/// intercept terms conservatively lose one. Slope terms lose nothing. Terms
/// nested in a cluster variable contribute no degrees of freedom.
pub fn count_dof(sample: &EstimationSample, clusters: &[GroupVar]) -> DofTable {
    let mut entries = Vec::with_capacity(sample.terms.len());
    let mut first: Option<&FactorTerm> = None;
    let mut intercepts_seen = 0;
    for term in &sample.terms {
        let categories = term.n_groups;
        let (mut redundant, exact) = if term.is_slope() {
            (0, true)
        } else {
            intercepts_seen += 1;
            match (intercepts_seen, first) {
                (1, _) => {
                    first = Some(term);
                    (0, true)
                }
                (2, Some(f)) => (
                    bipartite_components(&f.codes, f.n_groups, &term.codes, term.n_groups),
                    true,
                ),
                _ => (1.min(categories), false),
            }
        };
        let nested = clusters
            .iter()
            .any(|c| is_nested(&term.codes, term.n_groups, c));
        if nested {
            redundant = categories;
        }
        entries.push(DofEntry {
            label: term.label.clone(),
            categories,
            redundant,
            num_coefs: categories - redundant,
            nested,
            exact: exact || nested,
        });
    }
    let df_a_initial = entries.iter().map(|e| e.categories).sum();
    let df_a_redundant = entries.iter().map(|e| e.redundant).sum();
    DofTable {
        df_a: entries.iter().map(|e| e.num_coefs).sum(),
        df_a_initial,
        df_a_redundant,
        entries,
        method: DOF_METHOD.to_string(),
    }
}

/// Sum of the fixed effects: `d = eta - X delta - offset`.
pub fn recover_fe_sum(eta: &[f64], x: &DMatrix<f64>, delta: &[f64], offset: &[f64]) -> Vec<f64> {
    assert_eq!(x.ncols(), delta.len());
    (0..eta.len())
        .map(|i| {
            let xb: f64 = (0..delta.len()).map(|j| x[(i, j)] * delta[j]).sum();
            eta[i] - xb - offset[i]
        })
        .collect()
}
