//! `alevar` command line: `simulate`, `diagnose`, `calibrate`.

use super::calibration_file;
use super::config::{parse_lambda, parse_list, read_file, ConfigError, ConfigOverrides, CriticalKind, OutputFormat, StudyKind};
use super::report::{parse_records, render, render_records, write_text, RecordsFile};
use super::study::{run_study, StudyError};
use crate::calibration::{Calibration, DEFAULT_LAMBDA_SPLIT, DEFAULT_TARGET_RATIO};
use crate::dgp::DgpTruth;
use crate::diagnostics::{cn_tracker, decomposition_oracle, pivot_distance, regime_classify_with, OracleRecord, RegimeRule};
use crate::numeric::mean;
use crate::rng::{purpose, SeedPath};
use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "alevar", version, about = "Variance estimation studies for asymptotically linear estimators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a replicate study and write the aggregated report.
    Simulate(SimulateArgs),
    /// Summarize stored replicate records.
    Diagnose(DiagnoseArgs),
    /// Compute κ, σ²_EIF and c_R and write a calibration file.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// key=value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    study: Option<StudyKind>,
    /// Comma-separated n (or J for clustered studies).
    #[arg(long)]
    sizes: Option<String>,
    #[arg(long)]
    icc: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    /// Bootstrap replicates per dataset; 0 disables bootstrap intervals.
    #[arg(long)]
    boot: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    critical: Option<CriticalKind>,
    /// `q,g` or a single value used for both.
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    cluster_size: Option<usize>,
    /// Calibration file supplying λ when --lambda is absent.
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    format: Option<OutputFormat>,
    /// Also write per-replicate records for `diagnose`.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long, default_value_t = RegimeRule::default().threshold)]
    threshold: f64,
    #[arg(long, default_value_t = RegimeRule::default().min_relative_decrease)]
    min_decrease: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Target c_R/σ²_EIF.
    #[arg(long, default_value_t = DEFAULT_TARGET_RATIO)]
    target: f64,
    /// λ_g/λ_q.
    #[arg(long, default_value_t = DEFAULT_LAMBDA_SPLIT)]
    split: f64,
    /// Draws for the Monte Carlo cross-check of σ²_EIF; 0 skips it.
    #[arg(long, default_value_t = 0)]
    mc_draws: usize,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Run(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::Run(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

/// Runs the CLI; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a, out, err),
        Command::Diagnose(a) => diagnose(a, out),
        Command::Calibrate(a) => calibrate(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Run(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_FAILURE
        }
    }
}

fn emit(out: &mut dyn Write, path: Option<&PathBuf>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => write_text(p, text).map_err(|e| Failure::Run(e.to_string())),
        None => out.write_all(text.as_bytes()).map_err(|e| Failure::Run(e.to_string())),
    }
}

fn simulate(a: SimulateArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Failure> {
    let base = match &a.config {
        Some(p) => ConfigOverrides::from_text(&read_file(p)?)?,
        None => ConfigOverrides::default(),
    };
    let flags = ConfigOverrides {
        study: a.study,
        sizes: a.sizes.as_deref().map(|v| parse_list("sizes", v)).transpose()?,
        icc: a.icc.as_deref().map(|v| parse_list("icc", v)).transpose()?,
        reps: a.reps,
        boot: a.boot,
        seed: a.seed,
        alpha: a.alpha,
        critical: a.critical,
        lambda: a.lambda.as_deref().map(parse_lambda).transpose()?,
        cluster_size: a.cluster_size,
        calibration: a.calibration,
        out: a.out,
        format: a.format,
        workers: a.workers,
    };
    let config = base.merge(flags).build()?;
    let report = match run_study(&config) {
        Ok(r) => r,
        Err(StudyError::Config(e)) => return Err(e.into()),
        Err(e) => return Err(Failure::Run(e.to_string())),
    };
    emit(out, config.output_path.as_ref(), &render(&report, config.format))?;
    if let Some(p) = &a.records {
        write_text(p, &render_records(&report)).map_err(|e| Failure::Run(e.to_string()))?;
    }
    let _ = writeln!(err, "{} cells, {:.1}s", report.rows.len(), report.wall_time_secs);
    Ok(())
}

/// Groups successful records by ICC, then by size, ascending.
fn by_icc_and_size(file: &RecordsFile) -> Vec<(f64, Vec<(usize, Vec<&super::study::ReplicateRecord>)>)> {
    let mut iccs: Vec<f64> = file.records.iter().map(|r| r.icc).collect();
    iccs.sort_by(f64::total_cmp);
    iccs.dedup();
    iccs.into_iter()
        .map(|icc| {
            let mut sizes: Vec<usize> = file.records.iter().filter(|r| r.icc == icc).map(|r| r.size).collect();
            sizes.sort_unstable();
            sizes.dedup();
            let cells = sizes
                .into_iter()
                .map(|n| {
                    let recs = file
                        .records
                        .iter()
                        .filter(|r| r.icc == icc && r.size == n && r.failure.is_none())
                        .collect();
                    (n, recs)
                })
                .collect();
            (icc, cells)
        })
        .collect()
}

fn diagnose(a: DiagnoseArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let text = read_file(&a.records)?;
    let file = parse_records(&text).map_err(|e| Failure::Usage(format!("{}: {e}", a.records.display())))?;
    let psi0 = file.meta_f64("psi0").unwrap_or_else(|| DgpTruth::default().psi0());
    let rule = RegimeRule { threshold: a.threshold, min_relative_decrease: a.min_decrease };
    let mut s = String::new();
    if let Some(kind) = file.meta.get("study_kind") {
        s.push_str(&format!("study: {kind}\n"));
    }
    for (icc, cells) in by_icc_and_size(&file) {
        s.push_str(&format!("\n[icc {icc}]\n"));
        let rho_by_n: Vec<(usize, f64)> = cells
            .iter()
            .filter(|(_, recs)| !recs.is_empty())
            .map(|(n, recs)| {
                let sand: Vec<f64> = recs.iter().filter_map(|r| r.variance.as_ref().map(|v| v.var_sand)).collect();
                let jk: Vec<f64> = recs.iter().filter_map(|r| r.variance.as_ref().map(|v| v.var_jk)).collect();
                (*n, mean(&jk) / mean(&sand))
            })
            .collect();
        match regime_classify_with(&rho_by_n, rule) {
            Ok(v) => {
                let seq: Vec<String> = v.rho_by_n.iter().map(|(n, r)| format!("{n}:{r:.4}")).collect();
                s.push_str(&format!(
                    "regime: {} (rho {}; relative decrease {:.3})\n",
                    v.verdict.as_str(),
                    seq.join(" "),
                    v.trend_statistic
                ));
            }
            Err(e) => s.push_str(&format!("regime: unavailable ({e})\n")),
        }
        for (n, recs) in &cells {
            let oracle: Vec<OracleRecord> = recs
                .iter()
                .map(|r| OracleRecord { psi_hat: r.psi_hat, mean_true_d: r.mean_true_d, r_rem: r.r_rem })
                .collect();
            match decomposition_oracle(&oracle) {
                Ok(d) => s.push_str(&format!(
                    "decomposition n={n}: var_total {:.6e} (se {:.2e}) eif {:.6e} rem {:.6e} cross {:.6e} gap {:.3e}; n*var_rem {:.4}\n",
                    d.var_total, d.var_total_se, d.eif_term, d.var_rem, d.cross_term, d.closure_gap, *n as f64 * d.var_rem
                )),
                Err(e) => s.push_str(&format!("decomposition n={n}: unavailable ({e})\n")),
            }
            if let Some(boot) = recs
                .iter()
                .find(|r| r.replicate_index == 0)
                .and_then(|r| r.variance.as_ref().and_then(|v| v.boot_replicates.as_ref()).map(|b| (r.psi_hat, b)))
            {
                let mc: Vec<f64> = recs.iter().map(|r| r.psi_hat).collect();
                s.push_str(&format!("bootstrap d2 n={n}: {:.5}\n", pivot_distance(*n, boot.0, boot.1, psi0, &mc)));
            }
        }
        let cn: Vec<(usize, f64)> =
            cells.iter().flat_map(|(n, recs)| recs.iter().filter_map(move |r| r.c_n.map(|c| (*n, c)))).collect();
        for c in cn_tracker(&cn) {
            s.push_str(&format!("C_n n={}: mean {:.4} var {:.4} ({} replicates)\n", c.n, c.mean, c.variance, c.count));
        }
    }
    emit(out, a.out.as_ref(), &s)
}

fn calibrate(a: CalibrateArgs, out: &mut dyn Write) -> Result<(), Failure> {
    if !(a.target > 0.0 && a.target.is_finite()) {
        return Err(Failure::Usage("--target must be positive".into()));
    }
    if !(a.split > 0.0 && a.split.is_finite()) {
        return Err(Failure::Usage("--split must be positive".into()));
    }
    let truth = DgpTruth::default();
    let mut cal = Calibration::compute(&truth, a.target, a.split);
    if a.mc_draws > 0 {
        if a.mc_draws < 2 {
            return Err(Failure::Usage("--mc-draws must be 0 or at least 2".into()));
        }
        cal = cal.with_monte_carlo(&truth, a.mc_draws, SeedPath::root(a.seed).child(purpose::MONTE_CARLO));
    }
    emit(out, a.out.as_ref(), &calibration_file::render(&cal))
}
