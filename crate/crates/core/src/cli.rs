//! Command-line front end.

use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::Parser;

use crate::absorb::parse_absorb_for;
use crate::dataset::{build_sample, load_table, LoadOptions, RawTable, SampleSpec};
use crate::inference::{ResultsBundle, VceKind, VceSpec};
use crate::irls::{Guess, IrlsOptions};
use crate::pipeline::{estimate_sample, Estimate, EstimateOptions};
use crate::projector::{Acceleration, ProjectorOptions};
use crate::separation::{parse_methods, IrParams};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_ESTIMATION: i32 = 3;

pub const D_DEFAULT_NAME: &str = "_ppmlhdfe_";

/// Poisson pseudo-maximum-likelihood regression with high-dimensional fixed effects.
#[derive(Debug, Clone, Parser)]
#[command(name = "ppmlhdfe", version, about)]
pub struct CliConfig {
    /// Delimited input file with a header row.
    pub input: PathBuf,
    /// Dependent variable (nonnegative).
    pub depvar: String,
    /// Explanatory variables.
    pub indepvars: Vec<String>,

    /// Fixed effects to absorb, e.g. "firm year" or "fe1=firm firm#c.t".
    #[arg(short, long, value_name = "ABSVARS")]
    pub absorb: Option<String>,
    /// Include ln(VAR) with coefficient constrained to 1.
    #[arg(long, value_name = "VAR", conflicts_with = "offset")]
    pub exposure: Option<String>,
    /// Include VAR with coefficient constrained to 1.
    #[arg(long, value_name = "VAR")]
    pub offset: Option<String>,
    /// Observation weights.
    #[arg(long, value_name = "VAR")]
    pub weight: Option<String>,
    /// Save the sum of the fixed effects (default name _ppmlhdfe_).
    #[arg(long, value_name = "NAME", num_args = 0..=1, default_missing_value = D_DEFAULT_NAME)]
    pub d: Option<String>,
    /// robust, or cluster:v1[,v2...] for multi-way clustering.
    #[arg(long, default_value = "robust")]
    pub vce: VceSpec,
    /// Convergence criterion on the relative deviance change.
    #[arg(long, default_value_t = 1e-8)]
    pub tolerance: f64,
    /// Initial values: simple or ols.
    #[arg(long, default_value = "simple")]
    pub guess: Guess,
    /// Separation checks: any of fe, ir, simplex, mu; or none.
    #[arg(long, default_value = "fe,simplex,ir")]
    pub separation: String,
    /// Maximum number of IRLS iterations.
    #[arg(long, default_value_t = 10_000)]
    pub maxiter: usize,
    /// Do not drop singleton groups.
    #[arg(long)]
    pub keepsingletons: bool,
    /// Report exponentiated coefficients (incidence-rate ratios).
    #[arg(long, visible_alias = "irr")]
    pub eform: bool,
    /// Detail level from -1 (silent) to 4.
    #[arg(long, default_value_t = 0, allow_negative_numbers = true,
          value_parser = clap::value_parser!(i32).range(-1..=4))]
    pub verbose: i32,
    /// Hide the iteration log.
    #[arg(long)]
    pub nolog: bool,
    /// Write the results document (JSON) here.
    #[arg(short, long, value_name = "PATH")]
    pub output: Option<PathBuf>,
    /// Save every fixed effect, unnamed ones as _hdfe#_.
    #[arg(long)]
    pub save_fe: bool,
    /// Write the input augmented with saved columns here.
    #[arg(long, value_name = "PATH")]
    pub data_out: Option<PathBuf>,
    /// Worker threads for the projector (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Field delimiter of the input file.
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
    /// Projector acceleration: aitken, cg or none.
    #[arg(long, default_value = "aitken")]
    pub accel: Acceleration,
    /// Residualize each IRLS step from scratch at full tolerance.
    #[arg(long)]
    pub no_accelerate: bool,
    /// Threshold of the ir separation check.
    #[arg(long, default_value_t = 1e-5)]
    pub ir_tol: f64,
    /// Weight on positive outcomes in the ir check (default 1e6 * N).
    #[arg(long)]
    pub ir_big_weight: Option<f64>,
}

/// Parses arguments (including the program name).
pub fn parse_args<I, T>(argv: I) -> Result<CliConfig, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cfg = CliConfig::try_parse_from(argv)?;
    cfg.validate()
        .map_err(|m| clap::Error::raw(clap::error::ErrorKind::ArgumentConflict, m + "\n"))?;
    Ok(cfg)
}

impl CliConfig {
    fn validate(&self) -> Result<(), String> {
        parse_methods(&self.separation)?;
        if !(self.tolerance > 0.0) {
            return Err("tolerance must be positive".into());
        }
        if self.maxiter == 0 {
            return Err("maxiter must be at least 1".into());
        }
        if !self.delimiter.is_ascii() {
            return Err("delimiter must be a single ASCII character".into());
        }
        if (self.d.is_some() || self.save_fe) && self.data_out.is_none() {
            return Err("--d and --save-fe need --data-out".into());
        }
        if self.threads == Some(0) {
            return Err("threads must be at least 1".into());
        }
        Ok(())
    }

    pub fn estimate_options(&self, cmdline: String) -> EstimateOptions {
        EstimateOptions {
            irls: IrlsOptions {
                tolerance: self.tolerance,
                maxiter: self.maxiter,
                guess: self.guess,
                accelerate: !self.no_accelerate,
                projector: ProjectorOptions {
                    acceleration: self.accel,
                    ..Default::default()
                },
            },
            separation: parse_methods(&self.separation).expect("validated"),
            ir: IrParams {
                tol: self.ir_tol,
                big_weight: self.ir_big_weight,
                max_iter: self.maxiter,
            },
            keep_singletons: self.keepsingletons,
            vce: self.vce.clone(),
            eform: self.eform,
            cmdline,
        }
    }
}

fn fmt_num(v: Option<f64>, width: usize, prec: usize) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{:>width$.prec$}", x),
        Some(_) => format!("{:>width$}", "."),
        None => format!("{:>width$}", "(omitted)"),
    }
}

/// Human-readable coefficient table with the absorbed degrees-of-freedom
/// footer.
pub fn render_table(r: &ResultsBundle) -> String {
    let mut s = String::new();
    let sc = |k: &str| r.scalar(k).unwrap_or(f64::NAN);
    let mac = |k: &str| r.macros.get(k).cloned().unwrap_or_default();
    let _ = writeln!(s, "{}", mac("title"));
    let _ = writeln!(s, "{:<36}{:>22} = {:>10}", "", "Number of obs", sc("N") as i64);
    if r.scalars.contains_key("N_clust") && !r.scalars["N_clust"].is_null() {
        let _ = writeln!(s, "{:<36}{:>22} = {:>10}", "", "Number of clusters", sc("N_clust") as i64);
    }
    let _ = writeln!(s, "{:<36}{:>22} = {:>10.2}", "", "Wald chi2", sc("chi2"));
    let _ = writeln!(s, "{:<36}{:>22} = {:>10.4}", "", "Pseudo R2", sc("r2_p"));
    let _ = writeln!(s, "{:<36}{:>22} = {:>10.4}", "Log pseudolikelihood", "", sc("ll"));
    let se_label = match mac("vce").as_str() {
        "cluster" => "Clust. SE",
        _ => "Robust SE",
    };
    let coef_label = if r.eform { "IRR" } else { "Coef." };
    let rule = "-".repeat(98);
    let _ = writeln!(s, "{rule}");
    let _ = writeln!(
        s,
        "{:>14} | {:>12} {:>12} {:>10} {:>10} {:>14} {:>14}",
        mac("depvar"),
        coef_label,
        se_label,
        "z",
        "P>|z|",
        "[95% Conf.",
        "Interval]"
    );
    let _ = writeln!(s, "{rule}");
    for c in &r.coefficients {
        if c.omitted {
            let _ = writeln!(s, "{:>14} | {:>12}", c.name, "(omitted)");
            continue;
        }
        let _ = writeln!(
            s,
            "{:>14} | {} {} {} {} {} {}",
            c.name,
            fmt_num(Some(c.b), 12, 6),
            fmt_num(c.se, 12, 6),
            fmt_num(c.z, 10, 2),
            fmt_num(c.p, 10, 3),
            fmt_num(c.ci_low, 14, 6),
            fmt_num(c.ci_high, 14, 6)
        );
    }
    let _ = writeln!(s, "{rule}");
    if !r.dof.entries.is_empty() {
        let _ = writeln!(s, "\nAbsorbed degrees of freedom:");
        let _ = writeln!(
            s,
            "{:>20} | {:>10} {:>11} {:>10}",
            "Absorbed FE", "Categories", "- Redundant", "= Num. Coefs"
        );
        for e in &r.dof.entries {
            let mark = if e.nested {
                " *"
            } else if !e.exact {
                " ?"
            } else {
                ""
            };
            let _ = writeln!(
                s,
                "{:>20} | {:>10} {:>11} {:>10}{}",
                e.label, e.categories, e.redundant, e.num_coefs, mark
            );
        }
        if r.dof.entries.iter().any(|e| e.nested) {
            let _ = writeln!(s, "* = FE nested within cluster; treated as redundant for DoF computation");
        }
        if r.dof.entries.iter().any(|e| !e.exact) {
            let _ = writeln!(s, "? = number of redundant parameters may be higher");
        }
    }
    if r.vce_repaired {
        let _ = writeln!(s, "note: variance matrix had negative eigenvalues; floored at zero");
    }
    s
}

/// Per-iteration log lines; detail grows with `verbose`.
pub fn render_log(est: &Estimate, verbose: i32) -> String {
    let mut s = String::new();
    for rec in &est.fit.history {
        let eps = if rec.eps.is_finite() {
            format!("{:.3e}", rec.eps)
        } else {
            "-".into()
        };
        let _ = write!(s, "Iteration {}: deviance = {:.6e}  eps = {}", rec.iteration, rec.deviance, eps);
        if verbose >= 1 {
            let _ = write!(s, "  tol = {:.1e}  max|d eta| = {:.2e}", rec.inner_tol, rec.max_delta_eta);
        }
        if verbose >= 2 {
            let _ = write!(s, "  sweeps = {}", rec.sweeps);
        }
        s.push('\n');
    }
    let status = if est.fit.converged { "Converged" } else { "Not converged" };
    let _ = writeln!(s, "{} in {} iterations ({} projector sweeps)", status, est.fit.ic, est.fit.ic2);
    s
}

fn render_separation_trace(est: &Estimate) -> String {
    let mut s = String::new();
    let rep = &est.separation;
    let _ = writeln!(s, "separation methods: {}", rep.methods_label());
    for row in &rep.separated {
        let _ = writeln!(s, "  row {} separated ({})", row.row + 1, row.method);
    }
    for c in &rep.certificates {
        let _ = writeln!(s, "  certificate support: {} rows", c.support.len());
    }
    s
}

/// Original table plus saved columns; rows outside the sample stay empty.
fn write_augmented(
    path: &std::path::Path,
    table: &RawTable,
    est: &Estimate,
    cfg: &CliConfig,
    delimiter: u8,
) -> Result<(), String> {
    let mut extra: Vec<(String, Vec<f64>)> = Vec::new();
    if let Some(name) = &cfg.d {
        extra.push((name.clone(), est.fit.d.clone()));
    }
    let wants_fe = cfg.save_fe || est.sample.terms.iter().any(|t| t.save_as.is_some());
    if wants_fe && !est.sample.terms.is_empty() {
        let comps = est.fe_components();
        for (t, (term, comp)) in est.sample.terms.iter().zip(comps).enumerate() {
            match &term.save_as {
                Some(name) => extra.push((name.clone(), comp)),
                None if cfg.save_fe => extra.push((format!("_hdfe{}_", t + 1), comp)),
                None => {}
            }
        }
    }
    for (name, _) in &extra {
        if table.column(name).is_some() {
            return Err(format!("column `{name}` already exists"));
        }
    }
    let mut pos = vec![None; table.n_rows];
    for (i, &r) in est.sample.row_ids.iter().enumerate() {
        pos[r] = Some(i);
    }
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_path(path)
        .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    let header: Vec<String> = table
        .names()
        .into_iter()
        .map(str::to_string)
        .chain(extra.iter().map(|(n, _)| n.clone()))
        .collect();
    w.write_record(&header).map_err(|e| e.to_string())?;
    for row in 0..table.n_rows {
        let mut rec: Vec<String> = table.columns.iter().map(|c| c.display(row)).collect();
        for (_, vals) in &extra {
            rec.push(pos[row].map(|i| vals[i].to_string()).unwrap_or_default());
        }
        w.write_record(&rec).map_err(|e| e.to_string())?;
    }
    w.flush().map_err(|e| e.to_string())
}

/// Runs the command, writing human output to `out` and diagnostics to
/// `err`. Returns the process exit code.
pub fn run(cfg: &CliConfig, cmdline: &str, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let started = Instant::now();
    let say = cfg.verbose >= 0;
    let delimiter = cfg.delimiter as u8;
    let table = match load_table(&cfg.input, &LoadOptions { delimiter, has_header: true }) {
        Ok(t) => t,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_USAGE;
        }
    };
    let absorb = match parse_absorb_for(cfg.absorb.as_deref().unwrap_or(""), &table) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_USAGE;
        }
    };
    let spec = SampleSpec {
        depvar: cfg.depvar.clone(),
        indepvars: cfg.indepvars.clone(),
        absorb,
        weight: cfg.weight.clone(),
        exposure: cfg.exposure.clone(),
        offset: cfg.offset.clone(),
        clusters: match cfg.vce.kind {
            VceKind::Cluster => cfg.vce.cluster_vars.clone(),
            VceKind::Robust => vec![],
        },
    };
    let sample = match build_sample(&table, &spec) {
        Ok(s) => s,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_USAGE;
        }
    };
    let loaded = started.elapsed();
    let opts = cfg.estimate_options(cmdline.to_string());
    let est = match estimate_sample(sample, &spec.absorb.labels_as_typed(), &opts) {
        Ok(e) => e,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_ESTIMATION;
        }
    };
    let fitted = started.elapsed();

    if say {
        for n in &est.results.notices {
            let _ = writeln!(out, "note: {n}");
        }
        if est.num_singletons > 0 {
            let _ = writeln!(out, "({} observations deleted: singletons)", est.num_singletons);
        }
        if est.separation.num_separated > 0 {
            let _ = writeln!(out, "({} observations deleted: separation)", est.separation.num_separated);
        }
        for name in &est.results.ledger.collinear {
            let _ = writeln!(out, "note: {name} omitted because of collinearity");
        }
        if cfg.verbose >= 3 {
            let _ = write!(out, "{}", render_separation_trace(&est));
        }
        if !cfg.nolog {
            let _ = write!(out, "{}", render_log(&est, cfg.verbose));
        }
    }

    if !est.fit.converged {
        let _ = writeln!(
            err,
            "error: no convergence after {} iterations; the estimates may not exist (check for separation)",
            est.fit.ic
        );
        return EXIT_ESTIMATION;
    }

    if say {
        let _ = writeln!(out);
        let _ = write!(out, "{}", render_table(&est.results));
    }
    if let Some(path) = &cfg.output {
        if let Err(e) = std::fs::write(path, est.results.to_json() + "\n") {
            let _ = writeln!(err, "error: cannot write {}: {e}", path.display());
            return EXIT_USAGE;
        }
    }
    if let Some(path) = &cfg.data_out {
        if let Err(e) = write_augmented(path, &table, &est, cfg, delimiter) {
            let _ = writeln!(err, "error: {e}");
            return EXIT_USAGE;
        }
    }
    if cfg.verbose >= 4 {
        let _ = writeln!(
            out,
            "timing: load {:.3}s, estimate {:.3}s, total {:.3}s",
            loaded.as_secs_f64(),
            (fitted - loaded).as_secs_f64(),
            started.elapsed().as_secs_f64()
        );
    }
    EXIT_OK
}

/// Entry point used by the binary.
pub fn main_with_args(argv: Vec<String>) -> i32 {
    let cfg = match parse_args(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cfg.threads {
        // a pool can only be installed once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cmdline = argv.join(" ");
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(&cfg, &cmdline, &mut stdout.lock(), &mut stderr.lock())
}
