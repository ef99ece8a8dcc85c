//! End-to-end estimation: sample construction, singleton and separation
//! drops, the fit, and the results document.

use thiserror::Error;

use crate::dataset::{build_sample, DataError, EstimationSample, RawTable, SampleSpec};
use crate::inference::{summarize, InferenceError, ResultsBundle, SummaryInput, VceKind, VceSpec};
use crate::irls::{fit_fe_only, irls_fit, FitResult, IrlsError, IrlsOptions};
use crate::projector::{count_dof, drop_singletons, DofTable, Projector};
use crate::separation::{run_separation, IrParams, Method, SeparationReport, DEFAULT_METHODS};

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Irls(#[from] IrlsError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

#[derive(Debug, Clone)]
pub struct EstimateOptions {
    pub irls: IrlsOptions,
    pub separation: Vec<Method>,
    pub ir: IrParams,
    pub keep_singletons: bool,
    pub vce: VceSpec,
    pub eform: bool,
    pub cmdline: String,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            irls: IrlsOptions::default(),
            separation: DEFAULT_METHODS.to_vec(),
            ir: IrParams::default(),
            keep_singletons: false,
            vce: VceSpec::default(),
            eform: false,
            cmdline: String::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Estimate {
    pub sample: EstimationSample,
    pub fit: FitResult,
    pub fe_only: FitResult,
    pub dof: DofTable,
    pub separation: SeparationReport,
    pub num_singletons: usize,
    pub results: ResultsBundle,
}

impl Estimate {
    /// Per-term fixed effects at the converged weights, in sample row order.
    pub fn fe_components(&self) -> Vec<Vec<f64>> {
        let w: Vec<f64> = self
            .fit
            .mu
            .iter()
            .zip(&self.sample.weights)
            .map(|(m, o)| m * o)
            .collect();
        let proj = Projector::for_sample(&self.sample, &w, Default::default());
        proj.decompose(&self.fit.d, 1e-12)
    }
}

/// Drops singletons and separated rows until neither step changes the
/// sample.
pub fn reduce_sample(
    sample: EstimationSample,
    opts: &EstimateOptions,
) -> Result<(EstimationSample, usize, SeparationReport), DataError> {
    let mut sample = sample;
    let mut num_singletons = 0;
    let mut report = SeparationReport::default();
    let mut first = true;
    loop {
        if !opts.keep_singletons {
            let (s, dropped) = drop_singletons(&sample)?;
            sample = s;
            num_singletons += dropped;
            if dropped == 0 && !first {
                break;
            }
        }
        first = false;
        let (s, rep) = run_separation(&sample, &opts.separation, &opts.ir);
        let found = rep.num_separated > 0;
        report.merge(rep);
        sample = s;
        if sample.n_rows() == 0 {
            return Err(DataError::NoObservations);
        }
        if !found || opts.keep_singletons {
            break;
        }
    }
    Ok((sample, num_singletons, report))
}

/// Runs the full estimation on a loaded table.
pub fn estimate(
    table: &RawTable,
    spec: &SampleSpec,
    opts: &EstimateOptions,
) -> Result<Estimate, EstimateError> {
    let sample = build_sample(table, spec)?;
    estimate_sample(sample, &spec.absorb.labels_as_typed(), opts)
}

/// Runs everything after sample construction.
pub fn estimate_sample(
    sample: EstimationSample,
    absvars: &str,
    opts: &EstimateOptions,
) -> Result<Estimate, EstimateError> {
    let (sample, num_singletons, separation) = reduce_sample(sample, opts)?;

    let clusters = match opts.vce.kind {
        VceKind::Cluster => sample.clusters.as_slice(),
        VceKind::Robust => &[],
    };
    let dof = count_dof(&sample, clusters);
    let fit = irls_fit(&sample, &opts.irls)?;
    let fe_only = fit_fe_only(&sample, &opts.irls)?;

    let results = summarize(&SummaryInput {
        sample: &sample,
        fit: &fit,
        ll_0: fe_only.ll,
        dof: &dof,
        vce: &opts.vce,
        separation: &separation,
        num_singletons,
        drop_singletons: !opts.keep_singletons,
        cmdline: opts.cmdline.clone(),
        absvars: absvars.to_string(),
        eform: opts.eform,
        notices: separation.notices.clone(),
    })?;

    Ok(Estimate {
        sample,
        fit,
        fe_only,
        dof,
        separation,
        num_singletons,
        results,
    })
}
