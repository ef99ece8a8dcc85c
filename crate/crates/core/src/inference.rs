//! Sandwich variance estimators, test statistics and the saved-results
//! document.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;
use serde_json::{json, Value};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::absorb::densify;
use crate::dataset::{DropReason, EstimationSample, GroupVar, CONSTANT_NAME};
use crate::irls::{FitResult, IterationRecord};
use crate::projector::DofTable;
use crate::separation::SeparationReport;

pub const SCHEMA: &str = "ppmlhdfe-results/1";
pub const Z_975: f64 = 1.959963984540054;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("cluster variable `{name}` has {groups} group; need at least 2 clusters")]
    TooFewClusters { name: String, groups: usize },
    #[error("cluster variance requested without cluster variables")]
    NoClusterVars,
    #[error("no residual degrees of freedom (N = {n}, parameters = {k})")]
    NoResidualDof { n: usize, k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VceKind {
    Robust,
    Cluster,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VceSpec {
    pub kind: VceKind,
    pub cluster_vars: Vec<String>,
}

impl Default for VceSpec {
    fn default() -> Self {
        Self {
            kind: VceKind::Robust,
            cluster_vars: vec![],
        }
    }
}

impl std::str::FromStr for VceSpec {
    type Err = String;

    /// `robust`, or `cluster:v1,v2` (also `cluster v1 v2`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "robust" {
            return Ok(Self::default());
        }
        let rest = s
            .strip_prefix("cluster")
            .ok_or_else(|| format!("unknown vce `{s}` (expected robust or cluster:vars)"))?;
        let vars: Vec<String> = rest
            .trim_start_matches(':')
            .split([',', ' '])
            .filter(|v| !v.is_empty())
            .map(str::to_string)
            .collect();
        if vars.is_empty() {
            return Err("vce cluster needs at least one variable".into());
        }
        Ok(Self {
            kind: VceKind::Cluster,
            cluster_vars: vars,
        })
    }
}

impl VceSpec {
    pub fn label(&self) -> &'static str {
        match self.kind {
            VceKind::Robust => "robust",
            VceKind::Cluster => "cluster",
        }
    }
}

/// (X̃'WX̃)⁻¹.
pub fn bread(xt: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let k = xt.ncols();
    if k == 0 {
        return DMatrix::zeros(0, 0);
    }
    let mut xw = xt.clone();
    for (i, &wi) in w.iter().enumerate() {
        xw.row_mut(i).scale_mut(wi.sqrt());
    }
    let g = xw.transpose() * &xw;
    g.clone()
        .cholesky()
        .map(|c| c.inverse())
        .expect("cross-product of retained columns is positive definite")
}

/// Row scores `w_i e_i x̃_i` as an n × k matrix.
fn scores(xt: &DMatrix<f64>, e: &[f64], w: &[f64]) -> DMatrix<f64> {
    let mut s = xt.clone();
    for i in 0..xt.nrows() {
        s.row_mut(i).scale_mut(w[i] * e[i]);
    }
    s
}

fn symmetrize(v: &mut DMatrix<f64>) {
    let t = v.transpose();
    *v = (&*v + t) * 0.5;
}

fn residual_dof(n: usize, k_eff: usize) -> Result<f64, InferenceError> {
    if n <= k_eff {
        return Err(InferenceError::NoResidualDof { n, k: k_eff });
    }
    Ok((n - k_eff) as f64)
}

/// Heteroskedasticity-robust sandwich with q = n / (n − k_eff).
pub fn vce_robust(
    xt: &DMatrix<f64>,
    e: &[f64],
    w: &[f64],
    k_eff: usize,
) -> Result<DMatrix<f64>, InferenceError> {
    let n = xt.nrows();
    let q = n as f64 / residual_dof(n, k_eff)?;
    let b = bread(xt, w);
    let s = scores(xt, e, w);
    let meat = s.transpose() * &s;
    let mut v = &b * meat * &b * q;
    symmetrize(&mut v);
    Ok(v)
}

/// One inclusion–exclusion term: q_S · B M_S B for the clustering `codes`.
pub fn cluster_term(
    xt: &DMatrix<f64>,
    e: &[f64],
    w: &[f64],
    codes: &[u32],
    n_groups: usize,
    k_eff: usize,
) -> Result<DMatrix<f64>, InferenceError> {
    let n = xt.nrows();
    let k = xt.ncols();
    let dof = residual_dof(n, k_eff)?;
    let s = scores(xt, e, w);
    let mut sums = DMatrix::<f64>::zeros(n_groups, k);
    for i in 0..n {
        let g = codes[i] as usize;
        for j in 0..k {
            sums[(g, j)] += s[(i, j)];
        }
    }
    let meat = sums.transpose() * &sums;
    let g = n_groups as f64;
    let q = g / (g - 1.0) * (n as f64 - 1.0) / dof;
    let b = bread(xt, w);
    Ok(&b * meat * &b * q)
}

#[derive(Debug, Clone)]
pub struct ClusterVce {
    pub v: DMatrix<f64>,
    /// Before the eigenvalue floor.
    pub raw: DMatrix<f64>,
    pub n_clust: Vec<usize>,
    /// Negative eigenvalues were zeroed.
    pub repaired: bool,
}

/// Multi-way clustered sandwich by inclusion–exclusion over the nonempty
/// subsets of cluster variables, floored to positive semidefinite.
pub fn vce_cluster(
    xt: &DMatrix<f64>,
    e: &[f64],
    w: &[f64],
    clusters: &[GroupVar],
    k_eff: usize,
) -> Result<ClusterVce, InferenceError> {
    if clusters.is_empty() {
        return Err(InferenceError::NoClusterVars);
    }
    for c in clusters {
        if c.n_groups < 2 {
            return Err(InferenceError::TooFewClusters {
                name: c.name.clone(),
                groups: c.n_groups,
            });
        }
    }
    let n = xt.nrows();
    let k = xt.ncols();
    let m = clusters.len();
    let mut raw = DMatrix::<f64>::zeros(k, k);
    for mask in 1u32..(1 << m) {
        let members: Vec<&GroupVar> = (0..m)
            .filter(|j| mask & (1 << j) != 0)
            .map(|j| &clusters[j])
            .collect();
        let (codes, n_groups) = intersect(&members, n);
        let term = cluster_term(xt, e, w, &codes, n_groups, k_eff)?;
        if members.len() % 2 == 1 {
            raw += term;
        } else {
            raw -= term;
        }
    }
    symmetrize(&mut raw);
    let (v, repaired) = psd_floor(&raw);
    Ok(ClusterVce {
        v,
        raw,
        n_clust: clusters.iter().map(|c| c.n_groups).collect(),
        repaired,
    })
}

/// Dense codes for the intersection of several groupings.
pub fn intersect(vars: &[&GroupVar], n: usize) -> (Vec<u32>, usize) {
    if vars.len() == 1 {
        return (vars[0].codes.clone(), vars[0].n_groups);
    }
    let mut codes: Vec<u64> = vec![0; n];
    let mut radix = 1u64;
    let mut combined: Vec<u32> = vars[0].codes.clone();
    for v in vars {
        for i in 0..n {
            codes[i] += radix * v.codes[i] as u64;
        }
        radix *= v.n_groups as u64;
    }
    // compress the mixed-radix key to dense codes
    let mut map = std::collections::HashMap::new();
    for i in 0..n {
        let next = map.len() as u32;
        combined[i] = *map.entry(codes[i]).or_insert(next);
    }
    densify(&combined)
}

fn psd_floor(v: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if v.nrows() == 0 {
        return (v.clone(), false);
    }
    let eig = SymmetricEigen::new(v.clone());
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    if eig.eigenvalues.iter().all(|&l| l >= -1e-14 * scale) {
        return (v.clone(), false);
    }
    let floored = eig.eigenvalues.map(|l| l.max(0.0));
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    (out, true)
}

/// Wald statistic b'V⁺b (Moore–Penrose inverse) and its rank.
pub fn wald(b: &[f64], v: &DMatrix<f64>) -> (f64, usize) {
    if b.is_empty() {
        return (0.0, 0);
    }
    let bv = nalgebra::DVector::from_column_slice(b);
    let eig = SymmetricEigen::new(v.clone());
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, l| a.max(l.abs()));
    let cutoff = scale * 1e-12 * b.len() as f64;
    let mut stat = 0.0;
    let mut rank = 0;
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l > cutoff {
            let proj = eig.eigenvectors.column(i).dot(&bv);
            stat += proj * proj / l;
            rank += 1;
        }
    }
    (stat, rank)
}

/// Two-sided normal p-value.
pub fn p_value(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefRow {
    pub name: String,
    pub b: f64,
    pub se: Option<f64>,
    pub z: Option<f64>,
    pub p: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub omitted: bool,
}

/// Coefficient table; with `eform` the estimate, its standard error and the
/// interval are on the exponentiated scale while z and p are unchanged.
pub fn coefficient_table(names: &[String], b: &[f64], v: &DMatrix<f64>, omitted: &[bool], eform: bool) -> Vec<CoefRow> {
    names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            if omitted[j] {
                return CoefRow {
                    name: name.clone(),
                    b: if eform { 1.0 } else { 0.0 },
                    se: None,
                    z: None,
                    p: None,
                    ci_low: None,
                    ci_high: None,
                    omitted: true,
                };
            }
            let se = v[(j, j)].max(0.0).sqrt();
            let z = b[j] / se;
            let (lo, hi) = (b[j] - Z_975 * se, b[j] + Z_975 * se);
            let (est, se_out, lo, hi) = if eform {
                let e = b[j].exp();
                (e, e * se, lo.exp(), hi.exp())
            } else {
                (b[j], se, lo, hi)
            };
            CoefRow {
                name: name.clone(),
                b: est,
                se: Some(se_out),
                z: Some(z),
                p: Some(p_value(z)),
                ci_low: Some(lo),
                ci_high: Some(hi),
                omitted: false,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedVector {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedMatrix {
    pub rownames: Vec<String>,
    pub colnames: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[allow(non_snake_case)]
pub struct Matrices {
    pub b: NamedVector,
    pub V: NamedMatrix,
    pub dof_table: NamedMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Functions {
    /// One flag per original row.
    pub sample: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ledger {
    pub missing: Vec<usize>,
    pub singleton: Vec<usize>,
    pub separated: Vec<usize>,
    pub collinear: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSummary {
    pub converged: bool,
    pub deviance: f64,
    pub iterations: Vec<IterationRecord>,
}

/// Saved results: Stata-style scalars, macros and matrices plus ledgers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultsBundle {
    pub schema: String,
    pub scalars: BTreeMap<String, Value>,
    pub macros: BTreeMap<String, String>,
    pub matrices: Matrices,
    pub functions: Functions,
    pub coefficients: Vec<CoefRow>,
    pub eform: bool,
    pub vce_repaired: bool,
    pub ledger: Ledger,
    pub dof: DofTable,
    pub separation: SeparationReport,
    pub fit: FitSummary,
    pub notices: Vec<String>,
}

impl ResultsBundle {
    pub fn scalar(&self, key: &str) -> Option<f64> {
        self.scalars.get(key).and_then(Value::as_f64)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("results serialize")
    }
}

/// Everything `summarize` needs besides the fit.
#[derive(Debug, Clone)]
pub struct SummaryInput<'a> {
    pub sample: &'a EstimationSample,
    pub fit: &'a FitResult,
    pub ll_0: f64,
    pub dof: &'a DofTable,
    pub vce: &'a VceSpec,
    pub separation: &'a SeparationReport,
    pub num_singletons: usize,
    pub drop_singletons: bool,
    pub cmdline: String,
    pub absvars: String,
    pub eform: bool,
    pub notices: Vec<String>,
}

/// Computes the variance matrix and fills the results document.
pub fn summarize(input: &SummaryInput<'_>) -> Result<ResultsBundle, InferenceError> {
    let sample = input.sample;
    let fit = input.fit;
    let n = sample.n_rows();
    let k = sample.x.ncols();
    let rank = fit.rank();
    let k_eff = rank + input.dof.df_a;

    let e: Vec<f64> = sample.y.iter().zip(&fit.mu).map(|(y, m)| (y - m) / m).collect();
    let w: Vec<f64> = fit.mu.iter().zip(&sample.weights).map(|(m, o)| m * o).collect();

    let (v_kept, n_clust, repaired) = match input.vce.kind {
        VceKind::Robust => (vce_robust(&fit.x_tilde, &e, &w, k_eff)?, vec![], false),
        VceKind::Cluster => {
            let c = vce_cluster(&fit.x_tilde, &e, &w, &sample.clusters, k_eff)?;
            (c.v, c.n_clust, c.repaired)
        }
    };

    // full-size b and V with zeros in omitted positions
    let mut v = DMatrix::<f64>::zeros(k, k);
    for (a, &ja) in fit.kept.iter().enumerate() {
        for (b, &jb) in fit.kept.iter().enumerate() {
            v[(ja, jb)] = v_kept[(a, b)];
        }
    }
    let omitted: Vec<bool> = (0..k).map(|j| !fit.kept.contains(&j)).collect();

    let test_idx: Vec<usize> = (0..fit.kept.len())
        .filter(|&a| sample.x_names[fit.kept[a]] != CONSTANT_NAME)
        .collect();
    let b_test: Vec<f64> = test_idx.iter().map(|&a| fit.delta[fit.kept[a]]).collect();
    let v_test = DMatrix::from_fn(test_idx.len(), test_idx.len(), |r, c| {
        v_kept[(test_idx[r], test_idx[c])]
    });
    let (chi2, _) = wald(&b_test, &v_test);
    let df_m = test_idx.len();

    let rss: f64 = sample
        .y
        .iter()
        .zip(&fit.mu)
        .zip(&sample.weights)
        .map(|((y, m), o)| o * (y - m) * (y - m))
        .sum();
    let df = n - k_eff;
    let rmse = (rss / df as f64).sqrt();

    let ledger_src = &sample.ledger;
    let n_full = sample.n_original();
    let mut factor_sets: Vec<&Vec<String>> = Vec::new();
    for t in &sample.terms {
        if !factor_sets.contains(&&t.factors) {
            factor_sets.push(&t.factors);
        }
    }

    let mut scalars: BTreeMap<String, Value> = BTreeMap::new();
    let mut put = |key: &str, v: Value| {
        scalars.insert(key.to_string(), v);
    };
    put("N", json!(n));
    put("num_singletons", json!(input.num_singletons));
    put("num_separated", json!(input.separation.num_separated));
    put("N_full", json!(n_full));
    put("drop_singletons", json!(u8::from(input.drop_singletons)));
    put("rank", json!(rank));
    put("df", json!(df));
    put("df_m", json!(df_m));
    put("df_a", json!(input.dof.df_a));
    put("df_a_initial", json!(input.dof.df_a_initial));
    put("df_a_redundant", json!(input.dof.df_a_redundant));
    put("N_hdfe", json!(factor_sets.len()));
    put("N_hdfe_extended", json!(sample.terms.len()));
    put("rss", json!(rss));
    put("rmse", json!(rmse));
    put("chi2", json!(chi2));
    put("r2_p", json!(1.0 - fit.ll / input.ll_0));
    put("ll", json!(fit.ll));
    put("ll_0", json!(input.ll_0));
    put("N_clustervars", json!(n_clust.len()));
    for (i, g) in n_clust.iter().enumerate() {
        put(&format!("N_clust{}", i + 1), json!(g));
    }
    put("N_clust", n_clust.iter().min().map_or(Value::Null, |g| json!(g)));
    put("ic", json!(fit.ic));
    put("ic2", json!(fit.ic2));
    put("converged", json!(u8::from(fit.converged)));

    let covariates: Vec<&String> = sample
        .x_names
        .iter()
        .filter(|n| *n != CONSTANT_NAME)
        .collect();
    let mut macros: BTreeMap<String, String> = BTreeMap::new();
    let mut set = |key: &str, v: String| {
        macros.insert(key.to_string(), v);
    };
    set("cmd", "ppmlhdfe".into());
    set("cmdline", input.cmdline.clone());
    set("separation", input.separation.methods_label());
    set("dofmethod", input.dof.method.clone());
    set("depvar", sample.depvar.clone());
    set(
        "indepvars",
        covariates.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" "),
    );
    set("absvars", input.absvars.clone());
    set(
        "extended_absvars",
        sample
            .terms
            .iter()
            .map(|t| t.label.as_str())
            .collect::<Vec<_>>()
            .join(" "),
    );
    set("title", "HDFE PPML regression".into());
    set("clustvar", input.vce.cluster_vars.join(" "));
    for (i, c) in input.vce.cluster_vars.iter().enumerate() {
        set(&format!("clustvar{}", i + 1), c.clone());
    }
    set("vce", input.vce.label().into());
    set("chi2type", "Wald".into());
    set("offset", sample.offset_label.clone().unwrap_or_default());
    set("properties", "b V".into());
    set("predict", "ppmlhdfe_p".into());
    set("estat_cmd", "reghdfe_estat".into());
    set("marginsok", "default".into());
    set("marginsnotok", "stdp".into());
    set("footnote", "reghdfe_footnote".into());

    let dof_table = NamedMatrix {
        rownames: input.dof.entries.iter().map(|e| e.label.clone()).collect(),
        colnames: vec!["Categories".into(), "Redundant".into(), "Num Coefs".into()],
        values: input
            .dof
            .entries
            .iter()
            .map(|e| vec![e.categories as f64, e.redundant as f64, e.num_coefs as f64])
            .collect(),
    };
    let matrices = Matrices {
        b: NamedVector {
            names: sample.x_names.clone(),
            values: fit.delta.clone(),
        },
        V: NamedMatrix {
            rownames: sample.x_names.clone(),
            colnames: sample.x_names.clone(),
            values: (0..k).map(|r| (0..k).map(|c| v[(r, c)]).collect()).collect(),
        },
        dof_table,
    };

    let sample_mask = ledger_src
        .reasons
        .iter()
        .map(|r| *r == DropReason::None)
        .collect();

    Ok(ResultsBundle {
        schema: SCHEMA.into(),
        scalars,
        macros,
        matrices,
        functions: Functions {
            sample: sample_mask,
        },
        coefficients: coefficient_table(&sample.x_names, &fit.delta, &v, &omitted, input.eform),
        eform: input.eform,
        vce_repaired: repaired,
        ledger: Ledger {
            missing: ledger_src.rows(DropReason::Missing),
            singleton: ledger_src.rows(DropReason::Singleton),
            separated: ledger_src.rows(DropReason::Separated),
            collinear: fit
                .dropped_collinear
                .iter()
                .map(|&j| sample.x_names[j].clone())
                .collect(),
        },
        dof: input.dof.clone(),
        separation: input.separation.clone(),
        fit: FitSummary {
            converged: fit.converged,
            deviance: fit.deviance,
            iterations: fit.history.clone(),
        },
        notices: input.notices.clone(),
    })
}
