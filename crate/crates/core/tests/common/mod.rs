//! Random instance generators and small helpers shared by integration tests.

#![allow(dead_code)]

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use ppmlhdfe::absorb::parse_absorb;
use ppmlhdfe::dataset::{build_sample, read_table, EstimationSample, LoadOptions, RawTable, SampleSpec};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// |a − b| relative to max(|b|, 1).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

pub fn table(csv: &str) -> RawTable {
    read_table(csv.as_bytes(), &LoadOptions::default()).unwrap()
}

pub const PAPER_EXAMPLE: &str = "y,x1,x2,x3\n0,1,2,1\n0,0,0,2\n0,2,3,3\n1,1,2,4\n2,2,4,5\n3,1,2,6\n";

#[derive(Debug, Clone)]
pub struct InstanceConfig {
    pub n: usize,
    pub k: usize,
    /// Group counts of the absorbed intercept terms (0, 1 or 2 entries).
    pub groups: Vec<usize>,
    pub offset: bool,
    pub weights: bool,
    /// Scale of the covariate effects.
    pub beta_scale: f64,
    pub base_mean: f64,
}

/// A generated data set with its CSV text and model spec.
#[derive(Debug, Clone)]
pub struct Instance {
    pub csv: String,
    pub spec: SampleSpec,
}

impl Instance {
    pub fn table(&self) -> RawTable {
        table(&self.csv)
    }

    pub fn sample(&self) -> EstimationSample {
        build_sample(&self.table(), &self.spec).unwrap()
    }
}

/// Poisson data with covariates, up to two absorbed factors, optional
/// offset and weights.
pub fn poisson_instance(cfg: &InstanceConfig, rng: &mut impl Rng) -> Instance {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let beta: Vec<f64> = (0..cfg.k).map(|_| cfg.beta_scale * normal.sample(rng)).collect();
    let effects: Vec<Vec<f64>> = cfg
        .groups
        .iter()
        .map(|&g| (0..g).map(|_| 0.5 * normal.sample(rng)).collect())
        .collect();
    let mut csv = String::from("y");
    for j in 0..cfg.k {
        let _ = write!(csv, ",x{}", j + 1);
    }
    for t in 0..cfg.groups.len() {
        let _ = write!(csv, ",f{}", t + 1);
    }
    csv.push_str(",off,w\n");
    for _ in 0..cfg.n {
        let x: Vec<f64> = (0..cfg.k).map(|_| normal.sample(rng)).collect();
        let f: Vec<usize> = cfg.groups.iter().map(|&g| rng.random_range(0..g)).collect();
        let off = if cfg.offset { 0.3 * normal.sample(rng) } else { 0.0 };
        let w = if cfg.weights { rng.random_range(0.5..2.0) } else { 1.0 };
        let mut eta = cfg.base_mean.ln() + off;
        for j in 0..cfg.k {
            eta += beta[j] * x[j];
        }
        for (t, &g) in f.iter().enumerate() {
            eta += effects[t][g];
        }
        let y: f64 = Poisson::new(eta.exp()).unwrap().sample(rng);
        let _ = write!(csv, "{y}");
        for v in &x {
            let _ = write!(csv, ",{v}");
        }
        for g in &f {
            let _ = write!(csv, ",g{g}");
        }
        let _ = writeln!(csv, ",{off},{w}");
    }
    let absorb = (0..cfg.groups.len())
        .map(|t| format!("f{}", t + 1))
        .collect::<Vec<_>>()
        .join(" ");
    let spec = SampleSpec {
        depvar: "y".into(),
        indepvars: (0..cfg.k).map(|j| format!("x{}", j + 1)).collect(),
        absorb: parse_absorb(&absorb).unwrap(),
        weight: cfg.weights.then(|| "w".to_string()),
        offset: cfg.offset.then(|| "off".to_string()),
        ..Default::default()
    };
    Instance { csv, spec }
}
