//! Replicate studies over (size, ICC) grids.

use super::config::{ConfigError, CriticalKind, StudyConfig, StudyKind};
use crate::dgp::{gen_aipw_iid, gen_clustered, DgpError, DgpTruth, NearBoundaryConfig, Observation};
use crate::diagnostics::pivot_distance;
use crate::estimator::{
    aipw, loo_perturbations_from_estimates, remainder_oracle, AipwPipeline, ClusterPipelineLoo, EstimateResult,
    EstimatorError, PipelineLoo,
};
use crate::numeric::{mean, sample_variance};
use crate::resampling::{
    bca_interval, cluster_bootstrap, cluster_jackknife, cluster_sandwich, hc_corrected, jackknife, pairs_bootstrap,
    sandwich, wald_with_critical, BootstrapResult, Critical, IntervalMethod, JackknifeResult, ResamplingError,
    VarianceReport,
};
use crate::rng::{purpose, SeedPath};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("study aborted: {0}")]
    Aborted(String),
    #[error("cannot start worker pool: {0}")]
    Pool(String),
}

/// Interval methods reported per row, in column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Sand,
    Jk,
    Boot,
    Bca,
    Hc,
}

pub const METHODS: [Method; 5] = [Method::Sand, Method::Jk, Method::Boot, Method::Bca, Method::Hc];

impl Method {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sand => "sand",
            Method::Jk => "jk",
            Method::Boot => "boot",
            Method::Bca => "bca",
            Method::Hc => "hc",
        }
    }
}

/// Why a replicate produced no estimate: a short code for tallies and the
/// full message.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub code: String,
    pub message: String,
}

impl Failure {
    fn new(code: &str, message: impl ToString) -> Self {
        Failure { code: code.to_string(), message: message.to_string() }
    }
}

impl From<EstimatorError> for Failure {
    fn from(e: EstimatorError) -> Self {
        Failure::new(e.code(), &e)
    }
}

impl From<ResamplingError> for Failure {
    fn from(e: ResamplingError) -> Self {
        Failure::new(e.code(), &e)
    }
}

impl From<DgpError> for Failure {
    fn from(e: DgpError) -> Self {
        Failure::new("dgp", &e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRecord {
    pub size: usize,
    pub icc: f64,
    pub replicate_index: usize,
    pub psi_hat: f64,
    pub variance: Option<VarianceReport>,
    /// Whether each method's interval covered the truth; `None` when the
    /// method is disabled or failed on this replicate.
    pub contains: [Option<bool>; 5],
    /// Reason codes for methods that produced no interval.
    pub method_failures: Vec<(Method, String)>,
    pub mean_true_d: Option<f64>,
    pub r_rem: Option<f64>,
    pub c_n: Option<f64>,
    /// Reason the replicate as a whole failed.
    pub failure: Option<Failure>,
    pub boot_retries: usize,
    pub bca_clamped: bool,
}

impl ReplicateRecord {
    fn failed(size: usize, icc: f64, replicate_index: usize, reason: Failure) -> Self {
        ReplicateRecord {
            size,
            icc,
            replicate_index,
            psi_hat: f64::NAN,
            variance: None,
            contains: [None; 5],
            method_failures: Vec::new(),
            mean_true_d: None,
            r_rem: None,
            c_n: None,
            failure: Some(reason),
            boot_retries: 0,
            bca_clamped: false,
        }
    }
}

/// One aggregated grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub size: usize,
    pub icc: f64,
    pub bias: f64,
    pub mcsd: f64,
    /// Coverage per method in [`METHODS`] order; `None` when no replicate
    /// produced an interval for that method.
    pub cp: [Option<f64>; 5],
    /// Ratio of mean jackknife to mean sandwich variance.
    pub rho_hat: f64,
    pub n_failures: usize,
    pub mean_var_sand: f64,
    pub mean_var_jk: f64,
    pub mean_var_boot: Option<f64>,
    /// size × Var(realized remainder).
    pub scaled_var_rem: Option<f64>,
    pub mean_c_n: Option<f64>,
    pub var_c_n: Option<f64>,
    /// Mallows-2 distance between bootstrap and Monte Carlo pivots.
    pub d2: Option<f64>,
    pub boot_retries: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub rows: Vec<StudyRow>,
    pub records: Vec<ReplicateRecord>,
    pub build_id: String,
    pub wall_time_secs: f64,
}

pub fn build_id() -> String {
    format!("alevar-{}", env!("CARGO_PKG_VERSION"))
}

/// Stream for cell (size, icc); keyed by value so a cell's replicates do not
/// depend on the rest of the grid.
pub fn cell_seed(base_seed: u64, size: usize, icc: f64) -> SeedPath {
    SeedPath::root(base_seed).child(size as u64).child(icc.to_bits())
}

struct Cell {
    size: usize,
    icc: f64,
    truth: DgpTruth,
    pipeline: AipwPipeline,
    critical: Critical,
    crit_value: f64,
    seed: SeedPath,
}

fn build_cells(cfg: &StudyConfig) -> Result<Vec<Cell>, StudyError> {
    let mut cells = Vec::new();
    for &size in &cfg.sizes {
        for &icc in &cfg.icc_values {
            let truth = if cfg.study_kind.is_clustered() {
                cfg.truth
                    .with_icc(icc)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?
                    .with_cluster_size(cfg.cluster_size)
            } else {
                cfg.truth
            };
            let pipeline = match cfg.study_kind {
                StudyKind::AipwStrongDecay | StudyKind::BootstrapConsistency => AipwPipeline::fitted(truth),
                StudyKind::NearBoundary | StudyKind::ClusteredIccSweep => {
                    AipwPipeline::near_boundary(truth, NearBoundaryConfig::new(cfg.lambda_q, cfg.lambda_g))
                }
            };
            let critical = match cfg.critical {
                CriticalKind::Z => Critical::Z,
                CriticalKind::T => Critical::T((size - 1) as f64),
            };
            let crit_value = critical.value(cfg.level()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            cells.push(Cell { size, icc, truth, pipeline, critical, crit_value, seed: cell_seed(cfg.base_seed, size, icc) });
        }
    }
    Ok(cells)
}

struct Fitted {
    est: EstimateResult,
    var_sand: f64,
    jk: JackknifeResult,
    boot: Option<Result<BootstrapResult, ResamplingError>>,
    /// Observations, for the oracle fields.
    units: Vec<Observation>,
    c_n: Option<f64>,
}

fn fit_iid(cfg: &StudyConfig, cell: &Cell, rep_seed: SeedPath) -> Result<Fitted, Failure> {
    let data = gen_aipw_iid(cell.size, &cell.truth, rep_seed.child(purpose::DATA))?;
    let pipeline = &cell.pipeline;
    let nuis = pipeline.nuisances(&data)?;
    let est = aipw(&data, &nuis)?;
    let var_sand = sandwich(&est.scores)?;
    let loo = PipelineLoo::with_nuisances(pipeline, &data, &nuis);
    let jk = jackknife(&loo)?;
    let c_n = loo_perturbations_from_estimates(&data, &cell.truth, est.psi_hat, &jk.loo_estimates).c_n;
    let boot = (cfg.boot_b > 0).then(|| {
        pairs_bootstrap(|d: &[Observation]| pipeline.psi(d), &data, cfg.boot_b, rep_seed.child(purpose::BOOTSTRAP))
    });
    Ok(Fitted { est, var_sand, jk, boot, units: data, c_n: Some(c_n) })
}

fn fit_clustered(cfg: &StudyConfig, cell: &Cell, rep_seed: SeedPath) -> Result<Fitted, Failure> {
    let data = gen_clustered(cell.size, &cell.truth, rep_seed.child(purpose::DATA))?;
    let pipeline = &cell.pipeline;
    let est = pipeline.estimate_clustered(&data)?;
    let sums = est.cluster_scores.as_deref().expect("clustered estimate carries cluster scores");
    // Ψ̂ averages over all N units, so the variance of the cluster-sum mean
    // is rescaled by (J/N)².
    let scale = data.n_clusters() as f64 / data.n_units() as f64;
    let var_sand = cluster_sandwich(sums)? * scale * scale;
    let jk = cluster_jackknife(&ClusterPipelineLoo::new(pipeline, &data))?;
    let boot = (cfg.boot_b > 0)
        .then(|| cluster_bootstrap(|d| pipeline.psi_clustered(d), &data, cfg.boot_b, rep_seed.child(purpose::BOOTSTRAP)));
    Ok(Fitted { est, var_sand, jk, boot, units: data.observations().to_vec(), c_n: None })
}

fn run_replicate(cfg: &StudyConfig, cell: &Cell, r: usize, keep_boot: bool) -> ReplicateRecord {
    let rep_seed = cell.seed.child(r as u64);
    let fitted = if cfg.study_kind.is_clustered() {
        fit_clustered(cfg, cell, rep_seed)
    } else {
        fit_iid(cfg, cell, rep_seed)
    };
    let f = match fitted {
        Ok(f) => f,
        Err(reason) => return ReplicateRecord::failed(cell.size, cell.icc, r, reason),
    };
    let psi0 = cell.truth.psi0();
    let psi = f.est.psi_hat;
    let (var_hc, rho_hat) = match hc_corrected(f.var_sand, f.jk.var_jk) {
        Ok(v) => v,
        Err(e) => return ReplicateRecord::failed(cell.size, cell.icc, r, e.into()),
    };
    let level = cfg.level();
    let wald = |var: f64, method| wald_with_critical(psi, var, cell.crit_value, level, cell.critical, method);
    let mut contains = [None; 5];
    let mut method_failures = Vec::new();
    for (m, var, im) in [
        (Method::Sand, f.var_sand, IntervalMethod::SandWald),
        (Method::Jk, f.jk.var_jk, IntervalMethod::JkWald),
        (Method::Hc, var_hc, IntervalMethod::HcWald),
    ] {
        match wald(var, im) {
            Ok(ci) => contains[m.index()] = Some(ci.contains(psi0)),
            Err(e) => method_failures.push((m, e.code().to_string())),
        }
    }
    let mut var_boot = None;
    let mut boot_replicates = None;
    let mut boot_retries = 0;
    let mut bca_clamped = false;
    match &f.boot {
        None => {}
        Some(Err(e)) => {
            method_failures.push((Method::Boot, e.code().to_string()));
            method_failures.push((Method::Bca, e.code().to_string()));
        }
        Some(Ok(b)) => {
            var_boot = Some(b.var_boot);
            boot_retries = b.retries;
            match wald(b.var_boot, IntervalMethod::BootWald) {
                Ok(ci) => contains[Method::Boot.index()] = Some(ci.contains(psi0)),
                Err(e) => method_failures.push((Method::Boot, e.code().to_string())),
            }
            match bca_interval(&b.replicates, psi, &f.jk.loo_estimates, level) {
                Ok(bca) => {
                    contains[Method::Bca.index()] = Some(bca.interval.contains(psi0));
                    bca_clamped = bca.z0_clamped;
                }
                Err(e) => method_failures.push((Method::Bca, e.code().to_string())),
            }
            if keep_boot {
                boot_replicates = Some(b.replicates.clone());
            }
        }
    }
    let oracle = remainder_oracle(&f.est, &f.units, &cell.truth);
    ReplicateRecord {
        size: cell.size,
        icc: cell.icc,
        replicate_index: r,
        psi_hat: psi,
        variance: Some(VarianceReport {
            var_sand: f.var_sand,
            var_jk: f.jk.var_jk,
            var_boot,
            var_hc,
            rho_hat,
            boot_replicates,
        }),
        contains,
        method_failures,
        mean_true_d: Some(oracle.mean_true_d),
        r_rem: Some(oracle.r_rem),
        c_n: f.c_n,
        failure: None,
        boot_retries,
        bca_clamped,
    }
}

fn optional_mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| mean(xs))
}

fn optional_variance(xs: &[f64]) -> Option<f64> {
    (xs.len() >= 2).then(|| sample_variance(xs))
}

/// Aggregates one cell's records (sorted by replicate index first).
pub fn summarize_cell(size: usize, icc: f64, psi0: f64, records: &[ReplicateRecord]) -> StudyRow {
    let mut recs: Vec<&ReplicateRecord> = records.iter().collect();
    recs.sort_by_key(|r| r.replicate_index);
    let ok: Vec<&ReplicateRecord> = recs.iter().copied().filter(|r| r.failure.is_none()).collect();
    let psi: Vec<f64> = ok.iter().map(|r| r.psi_hat).collect();
    let mut cp = [None; 5];
    for m in METHODS {
        let flags: Vec<bool> = ok.iter().filter_map(|r| r.contains[m.index()]).collect();
        if !flags.is_empty() {
            cp[m.index()] = Some(flags.iter().filter(|&&c| c).count() as f64 / flags.len() as f64);
        }
    }
    let vars: Vec<&VarianceReport> = ok.iter().filter_map(|r| r.variance.as_ref()).collect();
    let sand: Vec<f64> = vars.iter().map(|v| v.var_sand).collect();
    let jk: Vec<f64> = vars.iter().map(|v| v.var_jk).collect();
    let boot: Vec<f64> = vars.iter().filter_map(|v| v.var_boot).collect();
    let rem: Vec<f64> = ok.iter().filter_map(|r| r.r_rem).collect();
    let cn: Vec<f64> = ok.iter().filter_map(|r| r.c_n).collect();
    let mean_var_sand = optional_mean(&sand).unwrap_or(f64::NAN);
    let mean_var_jk = optional_mean(&jk).unwrap_or(f64::NAN);
    StudyRow {
        size,
        icc,
        bias: optional_mean(&psi).map(|m| m - psi0).unwrap_or(f64::NAN),
        mcsd: optional_variance(&psi).map(f64::sqrt).unwrap_or(f64::NAN),
        cp,
        rho_hat: mean_var_jk / mean_var_sand,
        n_failures: recs.len() - ok.len(),
        mean_var_sand,
        mean_var_jk,
        mean_var_boot: optional_mean(&boot),
        scaled_var_rem: optional_variance(&rem).map(|v| v * size as f64),
        mean_c_n: optional_mean(&cn),
        var_c_n: optional_variance(&cn),
        d2: None,
        boot_retries: ok.iter().map(|r| r.boot_retries).sum(),
    }
}

fn failure_summary(records: &[ReplicateRecord]) -> String {
    let mut reasons: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    for r in records {
        if let Some(f) = &r.failure {
            reasons.entry(f.code.as_str()).or_insert((0, f.message.as_str())).0 += 1;
        }
    }
    reasons
        .iter()
        .map(|(code, (count, example))| format!("{count}× {code}, e.g. {example}"))
        .collect::<Vec<_>>()
        .join("; ")
}

pub fn run_study(config: &StudyConfig) -> Result<StudyReport, StudyError> {
    config.validate()?;
    let start = Instant::now();
    let cells = build_cells(config)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.worker_count)
        .build()
        .map_err(|e| StudyError::Pool(e.to_string()))?;
    let keep_boot = config.study_kind == StudyKind::BootstrapConsistency;
    let tasks: Vec<(usize, usize)> =
        (0..cells.len()).flat_map(|c| (0..config.reps).map(move |r| (c, r))).collect();
    let mut records: Vec<ReplicateRecord> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(c, r)| run_replicate(config, &cells[c], r, keep_boot && r == 0))
            .collect()
    });
    // Aggregation must not depend on arrival order.
    let position = |size: usize, icc: f64| cells.iter().position(|c| c.size == size && c.icc == icc).unwrap_or(usize::MAX);
    records.sort_by_key(|r| (position(r.size, r.icc), r.replicate_index));

    let mut rows = Vec::with_capacity(cells.len());
    let mut aborted = Vec::new();
    for (ci, cell) in cells.iter().enumerate() {
        let cell_records = &records[ci * config.reps..(ci + 1) * config.reps];
        let mut row = summarize_cell(cell.size, cell.icc, cell.truth.psi0(), cell_records);
        if row.n_failures as f64 > config.max_failure_rate * config.reps as f64 {
            aborted.push(format!(
                "size {} icc {}: {}/{} replicates failed ({})",
                cell.size,
                cell.icc,
                row.n_failures,
                config.reps,
                failure_summary(cell_records)
            ));
        }
        if keep_boot {
            let first = &cell_records[0];
            if let Some(boot) = first.variance.as_ref().and_then(|v| v.boot_replicates.as_ref()) {
                let mc: Vec<f64> =
                    cell_records.iter().filter(|r| r.failure.is_none()).map(|r| r.psi_hat).collect();
                row.d2 = Some(pivot_distance(cell.size, first.psi_hat, boot, cell.truth.psi0(), &mc));
            }
        }
        rows.push(row);
    }
    if !aborted.is_empty() {
        return Err(StudyError::Aborted(aborted.join("\n")));
    }
    Ok(StudyReport {
        config: config.clone(),
        rows,
        records,
        build_id: build_id(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}
