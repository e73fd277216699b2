//! Long-format CSV ingestion and export.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use lirt_core::dataset::reverse_level;
use lirt_core::{ItemDef, LongDataset, Observation};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Names of the CSV columns holding each field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMapping {
    pub subject: String,
    pub item: String,
    pub time: String,
    pub response: String,
    /// Time-independent covariates; constant within a subject.
    #[serde(default)]
    pub subject_covariates: Vec<String>,
    /// Time-dependent covariates, carried per row.
    #[serde(default)]
    pub row_covariates: Vec<String>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        ColumnMapping {
            subject: "subject".into(),
            item: "item".into(),
            time: "time".into(),
            response: "response".into(),
            subject_covariates: Vec::new(),
            row_covariates: Vec::new(),
        }
    }
}

fn parse_float(raw: &str, line: u64, column: &str) -> CliResult<f64> {
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    s.parse::<f64>().map_err(|_| CliError::Parse {
        line,
        column: column.into(),
        value: raw.into(),
    })
}

/// Reads a long-format file. Reversed items are recoded `l -> L-1-l`; row
/// order is preserved. Line numbers in errors count the header as line 1.
pub fn load_long_csv(path: &Path, mapping: &ColumnMapping, items: &[ItemDef]) -> CliResult<LongDataset> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers()?.clone();
    let find = |name: &str| -> CliResult<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::MissingColumn { column: name.into() })
    };
    let subject_col = find(&mapping.subject)?;
    let item_col = find(&mapping.item)?;
    let time_col = find(&mapping.time)?;
    let response_col = find(&mapping.response)?;
    let subject_cov_cols: Vec<usize> = mapping.subject_covariates.iter().map(|c| find(c)).collect::<CliResult<_>>()?;
    let row_cov_cols: Vec<usize> = mapping.row_covariates.iter().map(|c| find(c)).collect::<CliResult<_>>()?;

    let mut observations = Vec::new();
    let mut subject_table: BTreeMap<String, (u64, Vec<f64>)> = BTreeMap::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(idx as u64 + 2);
        let subject = record.get(subject_col).unwrap_or("").to_string();
        let item_id = record.get(item_col).unwrap_or("");
        let item = items.iter().find(|it| it.item_id == item_id).ok_or_else(|| CliError::UnknownItem {
            line,
            item: item_id.into(),
        })?;
        let time = parse_float(record.get(time_col).unwrap_or(""), line, &mapping.time)?;
        let raw = record.get(response_col).unwrap_or("");
        let level: i64 = raw.trim().parse().map_err(|_| CliError::Parse {
            line,
            column: mapping.response.clone(),
            value: raw.into(),
        })?;
        if level < 0 || level as usize >= item.n_levels {
            return Err(CliError::Level {
                line,
                item: item.item_id.clone(),
                level,
                n_levels: item.n_levels,
            });
        }
        let response = item.recode(level as usize);
        let covs: Vec<f64> = row_cov_cols
            .iter()
            .zip(&mapping.row_covariates)
            .map(|(&c, name)| parse_float(record.get(c).unwrap_or(""), line, name))
            .collect::<CliResult<_>>()?;
        let subj_covs: Vec<f64> = subject_cov_cols
            .iter()
            .zip(&mapping.subject_covariates)
            .map(|(&c, name)| parse_float(record.get(c).unwrap_or(""), line, name))
            .collect::<CliResult<_>>()?;
        match subject_table.get(&subject) {
            Some((first_line, prev)) => {
                for ((a, b), name) in prev.iter().zip(&subj_covs).zip(&mapping.subject_covariates) {
                    if a.to_bits() != b.to_bits() && !(a.is_nan() && b.is_nan()) {
                        return Err(CliError::InconsistentCovariate {
                            line,
                            first_line: *first_line,
                            subject: subject.clone(),
                            covariate: name.clone(),
                        });
                    }
                }
            }
            None => {
                subject_table.insert(subject.clone(), (line, subj_covs));
            }
        }
        let mut obs = Observation::new(subject, item.item_id.clone(), time, response);
        obs.covariates = covs;
        observations.push(obs);
    }
    let table = subject_table.into_iter().map(|(k, (_, v))| (k, v)).collect();
    Ok(LongDataset::with_covariates(
        items.to_vec(),
        observations,
        mapping.row_covariates.clone(),
        mapping.subject_covariates.clone(),
        table,
    )?)
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        String::from("NA")
    } else if x.is_infinite() {
        String::from(if x > 0.0 { "Inf" } else { "-Inf" })
    } else {
        format!("{x:.16e}")
    }
}

/// Writes a dataset in the layout [`load_long_csv`] reads with
/// [`ColumnMapping::default`] plus the dataset's covariate names. Reversed
/// items are written on their raw scale.
pub fn write_long_csv(ds: &LongDataset, path: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Csv(e.to_string()))?;
    let mut header = vec!["subject".to_string(), "item".into(), "time".into(), "response".into()];
    header.extend(ds.subject_covariate_names().iter().cloned());
    header.extend(ds.row_covariate_names().iter().cloned());
    w.write_record(&header)?;
    for obs in ds.observations() {
        let item = ds.item(&obs.item_id).expect("validated dataset");
        let raw = if item.reversed {
            reverse_level(item.n_levels, obs.response)
        } else {
            obs.response
        };
        let mut row = vec![obs.subject_id.clone(), obs.item_id.clone(), fmt_f64(obs.time), raw.to_string()];
        for name in ds.subject_covariate_names() {
            row.push(ds.subject_covariate(&obs.subject_id, name).map(fmt_f64).unwrap_or_else(|| "NA".into()));
        }
        row.extend(obs.covariates.iter().map(|v| fmt_f64(*v)));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

/// Writes rows of already formatted cells.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Csv(e.to_string()))?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

/// Writes a JSON document followed by a newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut f = File::create(path).map_err(|e| CliError::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    Ok(())
}
