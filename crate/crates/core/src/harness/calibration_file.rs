//! Versioned on-disk form of [`Calibration`].

use super::config::{parse_key_values, read_file, ConfigError};
use crate::calibration::Calibration;
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

pub fn render(cal: &Calibration) -> String {
    let mut s = String::from("# near-boundary calibration constants\n");
    s.push_str(&format!("schema_version={SCHEMA_VERSION}\n"));
    s.push_str(&format!("kappa={}\n", cal.kappa));
    s.push_str(&format!("sigma2_eif={}\n", cal.sigma2_eif));
    if let Some(mc) = cal.sigma2_eif_mc {
        s.push_str(&format!("sigma2_eif_mc={mc}\n"));
    }
    s.push_str(&format!("target_ratio={}\n", cal.target_ratio));
    s.push_str(&format!("lambda_split={}\n", cal.lambda_split));
    s.push_str(&format!("lambda_q={}\n", cal.lambda_q));
    s.push_str(&format!("lambda_g={}\n", cal.lambda_g));
    s.push_str(&format!("c_r={}\n", cal.c_r));
    s
}

pub fn parse(text: &str) -> Result<Calibration, ConfigError> {
    let kv = parse_key_values(text)?;
    let get = |k: &str| -> Result<f64, ConfigError> {
        let v = kv.get(k).ok_or_else(|| ConfigError::Invalid(format!("calibration file lacks `{k}`")))?;
        v.parse().map_err(|e: std::num::ParseFloatError| ConfigError::Value { key: k.into(), message: e.to_string() })
    };
    let version: u32 = kv
        .get("schema_version")
        .ok_or_else(|| ConfigError::Invalid("calibration file lacks `schema_version`".into()))?
        .parse()
        .map_err(|e: std::num::ParseIntError| ConfigError::Value { key: "schema_version".into(), message: e.to_string() })?;
    if version != SCHEMA_VERSION {
        return Err(ConfigError::Invalid(format!(
            "calibration schema version {version} is not supported (expected {SCHEMA_VERSION})"
        )));
    }
    Ok(Calibration {
        kappa: get("kappa")?,
        sigma2_eif: get("sigma2_eif")?,
        target_ratio: get("target_ratio")?,
        lambda_split: get("lambda_split")?,
        lambda_q: get("lambda_q")?,
        lambda_g: get("lambda_g")?,
        c_r: get("c_r")?,
        sigma2_eif_mc: if kv.contains_key("sigma2_eif_mc") { Some(get("sigma2_eif_mc")?) } else { None },
    })
}

pub fn read(path: &Path) -> Result<Calibration, ConfigError> {
    parse(&read_file(path)?)
}
