//! CSV and markdown renderings of a [`StudyReport`], plus the per-replicate
//! records file consumed by `diagnose`.

use super::config::OutputFormat;
use super::study::{Failure, Method, ReplicateRecord, StudyReport, StudyRow, METHODS};
use crate::resampling::VarianceReport;
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("cannot write {path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub const CSV_HEADER: &str = "size,icc,bias,mcsd,cp_sand,cp_jk,cp_boot,cp_bca,cp_hc,rho_hat,n_failures";

/// Formats like C's `%.6g`.
pub fn fmt6(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", strip_zeros(mantissa), exp.abs())
    } else {
        strip_zeros(&format!("{:.*}", (5 - exp) as usize, x))
    }
}

fn strip_zeros(s: &str) -> String {
    if !s.contains('.') {
        return s.to_string();
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt6).unwrap_or_else(|| "NA".into())
}

/// The CSV projection of a [`StudyRow`].
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub size: usize,
    pub icc: f64,
    pub bias: f64,
    pub mcsd: f64,
    pub cp: [Option<f64>; 5],
    pub rho_hat: f64,
    pub n_failures: usize,
}

impl From<&StudyRow> for CsvRow {
    fn from(r: &StudyRow) -> Self {
        CsvRow { size: r.size, icc: r.icc, bias: r.bias, mcsd: r.mcsd, cp: r.cp, rho_hat: r.rho_hat, n_failures: r.n_failures }
    }
}

pub fn render_csv(rows: &[CsvRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let mut fields = vec![r.size.to_string(), fmt6(r.icc), fmt6(r.bias), fmt6(r.mcsd)];
        fields.extend(r.cp.iter().map(|&c| fmt_opt(c)));
        fields.push(fmt6(r.rho_hat));
        fields.push(r.n_failures.to_string());
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

fn parse_f64(s: &str, line: usize) -> Result<f64, ReportError> {
    s.parse().map_err(|_| ReportError::Parse { line, message: format!("bad number `{s}`") })
}

fn parse_usize(s: &str, line: usize) -> Result<usize, ReportError> {
    s.parse().map_err(|_| ReportError::Parse { line, message: format!("bad count `{s}`") })
}

fn parse_opt(s: &str, line: usize) -> Result<Option<f64>, ReportError> {
    if s == "NA" {
        Ok(None)
    } else {
        parse_f64(s, line).map(Some)
    }
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>, ReportError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => return Err(ReportError::Parse { line: 1, message: "missing or unexpected header".into() }),
    }
    let mut rows = Vec::new();
    for (i, l) in lines {
        let line = i + 1;
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != 11 {
            return Err(ReportError::Parse { line, message: format!("expected 11 fields, found {}", f.len()) });
        }
        let mut cp = [None; 5];
        for (k, slot) in cp.iter_mut().enumerate() {
            *slot = parse_opt(f[4 + k], line)?;
        }
        rows.push(CsvRow {
            size: parse_usize(f[0], line)?,
            icc: parse_f64(f[1], line)?,
            bias: parse_f64(f[2], line)?,
            mcsd: parse_f64(f[3], line)?,
            cp,
            rho_hat: parse_f64(f[9], line)?,
            n_failures: parse_usize(f[10], line)?,
        });
    }
    Ok(rows)
}

fn md3(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.3}")
    } else {
        "NA".into()
    }
}

fn md_opt(x: Option<f64>) -> String {
    x.map(md3).unwrap_or_else(|| "---".into())
}

fn md_signed(x: f64) -> String {
    if x.is_finite() {
        format!("{x:+.3}")
    } else {
        "NA".into()
    }
}

fn md_sci(x: Option<f64>) -> String {
    match x {
        Some(v) if v.is_finite() => format!("{v:.4e}"),
        _ => "---".into(),
    }
}

pub fn render_markdown(report: &StudyReport) -> String {
    let cfg = &report.config;
    let size_label = if cfg.study_kind.is_clustered() { "J" } else { "n" };
    let mut out = format!("## {} study\n\n", cfg.study_kind);
    out.push_str(&format!(
        "| {size_label} | ICC | Bias | MCSD | CP(Sand) | CP(JK) | ρ̂ | CP(Boot) | CP(BCa) | CP(HC) | Failures |\n"
    ));
    out.push_str("|---:|---:|---:|---:|---:|---:|---:|---:|---:|---:|---:|\n");
    for r in &report.rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
            r.size,
            fmt6(r.icc),
            md_signed(r.bias),
            md3(r.mcsd),
            md_opt(r.cp[Method::Sand.index()]),
            md_opt(r.cp[Method::Jk.index()]),
            md3(r.rho_hat),
            md_opt(r.cp[Method::Boot.index()]),
            md_opt(r.cp[Method::Bca.index()]),
            md_opt(r.cp[Method::Hc.index()]),
            r.n_failures
        ));
    }
    out.push_str(&format!("\n### Diagnostics\n\n| {size_label} | ICC | mean VarSand | mean VarJK | mean VarBoot | n·Var(R) | mean C_n | Var(C_n) | d₂ | boot retries |\n"));
    out.push_str("|---:|---:|---:|---:|---:|---:|---:|---:|---:|---:|\n");
    for r in &report.rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
            r.size,
            fmt6(r.icc),
            md_sci(Some(r.mean_var_sand)),
            md_sci(Some(r.mean_var_jk)),
            md_sci(r.mean_var_boot),
            md_sci(r.scaled_var_rem),
            md_sci(r.mean_c_n),
            md_sci(r.var_c_n),
            md_sci(r.d2),
            r.boot_retries
        ));
    }
    out.push_str("\n### Run\n\n```\n");
    out.push_str(&cfg.echo());
    out.push_str(&format!("build={}\nwall_time_secs={:.1}\n```\n", report.build_id, report.wall_time_secs));
    out
}

pub fn render(report: &StudyReport, format: OutputFormat) -> String {
    match format {
        OutputFormat::Csv => render_csv(&report.rows.iter().map(CsvRow::from).collect::<Vec<_>>()),
        OutputFormat::Markdown => render_markdown(report),
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<(), ReportError> {
    std::fs::write(path, text).map_err(|e| ReportError::Io { path: path.display().to_string(), message: e.to_string() })
}

pub fn emit_report(report: &StudyReport, format: OutputFormat, path: &Path) -> Result<(), ReportError> {
    write_text(path, &render(report, format))
}

pub const RECORDS_HEADER: &str = "size,icc,replicate,psi_hat,var_sand,var_jk,var_boot,var_hc,rho_hat,\
in_sand,in_jk,in_boot,in_bca,in_hc,mean_true_d,r_rem,c_n,boot_retries,bca_clamped,failure,method_failures,boot_replicates";

/// Per-replicate records with the metadata `diagnose` needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordsFile {
    pub meta: BTreeMap<String, String>,
    pub records: Vec<ReplicateRecord>,
}

impl RecordsFile {
    pub fn meta_f64(&self, key: &str) -> Option<f64> {
        self.meta.get(key).and_then(|v| v.parse().ok())
    }
}

fn num(x: f64) -> String {
    format!("{x:e}")
}

fn num_opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_else(|| "NA".into())
}

fn flag(x: Option<bool>) -> &'static str {
    match x {
        Some(true) => "1",
        Some(false) => "0",
        None => "NA",
    }
}

/// Reasons are free text; keep them out of the field and list separators.
fn sanitize(s: &str) -> String {
    s.chars().map(|c| if matches!(c, ',' | '|' | '=' | '\n' | '\r') { ' ' } else { c }).collect()
}

pub fn render_records(report: &StudyReport) -> String {
    let cfg = &report.config;
    let psi0 = cfg.truth.psi0();
    let mut out = format!(
        "# study_kind={}\n# psi0={}\n# base_seed={}\n# build={}\n{RECORDS_HEADER}\n",
        cfg.study_kind,
        num(psi0),
        cfg.base_seed,
        report.build_id
    );
    for r in &report.records {
        let v = r.variance.as_ref();
        let mut f = vec![
            r.size.to_string(),
            num(r.icc),
            r.replicate_index.to_string(),
            num(r.psi_hat),
            num_opt(v.map(|v| v.var_sand)),
            num_opt(v.map(|v| v.var_jk)),
            num_opt(v.and_then(|v| v.var_boot)),
            num_opt(v.map(|v| v.var_hc)),
            num_opt(v.map(|v| v.rho_hat)),
        ];
        f.extend(METHODS.iter().map(|m| flag(r.contains[m.index()]).to_string()));
        f.push(num_opt(r.mean_true_d));
        f.push(num_opt(r.r_rem));
        f.push(num_opt(r.c_n));
        f.push(r.boot_retries.to_string());
        f.push(if r.bca_clamped { "1" } else { "0" }.into());
        f.push(r.failure.as_ref().map(|x| format!("{}: {}", x.code, sanitize(&x.message))).unwrap_or_default());
        f.push(
            r.method_failures
                .iter()
                .map(|(m, code)| format!("{}={}", m.as_str(), sanitize(code)))
                .collect::<Vec<_>>()
                .join("|"),
        );
        f.push(
            v.and_then(|v| v.boot_replicates.as_ref())
                .map(|b| b.iter().map(|&x| num(x)).collect::<Vec<_>>().join(";"))
                .unwrap_or_default(),
        );
        out.push_str(&f.join(","));
        out.push('\n');
    }
    out
}

fn parse_flag(s: &str, line: usize) -> Result<Option<bool>, ReportError> {
    match s {
        "1" => Ok(Some(true)),
        "0" => Ok(Some(false)),
        "NA" => Ok(None),
        _ => Err(ReportError::Parse { line, message: format!("bad flag `{s}`") }),
    }
}

fn parse_method(s: &str, line: usize) -> Result<Method, ReportError> {
    METHODS
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| ReportError::Parse { line, message: format!("unknown method `{s}`") })
}

pub fn parse_records(text: &str) -> Result<RecordsFile, ReportError> {
    let mut meta = BTreeMap::new();
    let mut records = Vec::new();
    let mut header_seen = false;
    for (i, l) in text.lines().enumerate() {
        let line = i + 1;
        if let Some(rest) = l.strip_prefix('#') {
            if let Some((k, v)) = rest.trim().split_once('=') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
            continue;
        }
        if !header_seen {
            if l != RECORDS_HEADER {
                return Err(ReportError::Parse { line, message: "missing or unexpected records header".into() });
            }
            header_seen = true;
            continue;
        }
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != 22 {
            return Err(ReportError::Parse { line, message: format!("expected 22 fields, found {}", f.len()) });
        }
        let var_sand = parse_opt(f[4], line)?;
        let variance = match var_sand {
            None => None,
            Some(var_sand) => Some(VarianceReport {
                var_sand,
                var_jk: parse_f64(f[5], line)?,
                var_boot: parse_opt(f[6], line)?,
                var_hc: parse_f64(f[7], line)?,
                rho_hat: parse_f64(f[8], line)?,
                boot_replicates: if f[21].is_empty() {
                    None
                } else {
                    Some(f[21].split(';').map(|x| parse_f64(x, line)).collect::<Result<_, _>>()?)
                },
            }),
        };
        let mut contains = [None; 5];
        for (k, slot) in contains.iter_mut().enumerate() {
            *slot = parse_flag(f[9 + k], line)?;
        }
        let method_failures = if f[20].is_empty() {
            Vec::new()
        } else {
            f[20]
                .split('|')
                .map(|item| {
                    let (m, why) = item
                        .split_once('=')
                        .ok_or_else(|| ReportError::Parse { line, message: format!("bad method failure `{item}`") })?;
                    Ok((parse_method(m, line)?, why.to_string()))
                })
                .collect::<Result<_, ReportError>>()?
        };
        records.push(ReplicateRecord {
            size: parse_usize(f[0], line)?,
            icc: parse_f64(f[1], line)?,
            replicate_index: parse_usize(f[2], line)?,
            psi_hat: parse_f64(f[3], line)?,
            variance,
            contains,
            method_failures,
            mean_true_d: parse_opt(f[14], line)?,
            r_rem: parse_opt(f[15], line)?,
            c_n: parse_opt(f[16], line)?,
            boot_retries: parse_usize(f[17], line)?,
            bca_clamped: parse_flag(f[18], line)? == Some(true),
            failure: (!f[19].is_empty()).then(|| {
                let (code, message) = f[19].split_once(": ").unwrap_or((f[19], ""));
                Failure { code: code.to_string(), message: message.to_string() }
            }),
        });
    }
    if !header_seen {
        return Err(ReportError::Parse { line: 1, message: "missing records header".into() });
    }
    Ok(RecordsFile { meta, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt6_matches_printf_g() {
        let cases = [
            (0.4, "0.4"),
            (1.0, "1"),
            (0.0123456789, "0.0123457"),
            (1.0399999, "1.04"),
            (123456.7, "123457"),
            (1234567.0, "1.23457e+06"),
            (0.00001234, "1.234e-05"),
            (-0.0021, "-0.0021"),
            (9.9999996, "10"),
            (0.0, "0"),
        ];
        for (x, s) in cases {
            assert_eq!(fmt6(x), s, "{x}");
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        assert_eq!(render_csv(&[]), format!("{CSV_HEADER}\n"));
        assert!(parse_csv(&render_csv(&[])).unwrap().is_empty());
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            CsvRow { size: 200, icc: 0.0, bias: -0.00123, mcsd: 0.0712, cp: [Some(0.964), Some(0.968), None, None, Some(0.968)], rho_hat: 1.04012, n_failures: 0 },
            CsvRow { size: 30, icc: 0.2, bias: 2.5e-05, mcsd: 0.05, cp: [Some(0.9), Some(0.95), Some(0.93), Some(0.94), Some(0.95)], rho_hat: 1.3, n_failures: 3 },
        ];
        assert_eq!(parse_csv(&render_csv(&rows)).unwrap(), rows);
    }
}
