//! CSV ingestion and dumps.
//!
//! Every file has a header row. Outcome datasets need an `outcome` column and
//! may carry `weight` and `provenance`; any other column is a covariate, in
//! header order.

use std::path::Path;

use fprior::estimators::gp::GpData;
use fprior::estimators::mnl::{ChoiceDataset, ChoiceRow};
use fprior::{Dataset, Observation, Provenance};
use log::warn;
use nalgebra::DMatrix;

use crate::error::CliError;

struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Table, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(CliError::Data(format!("{}: missing header row", path.display())));
    }
    let rows = reader
        .records()
        .map(|r| {
            r.map(|rec| rec.iter().map(str::to_string).collect())
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
        })
        .collect::<Result<_, _>>()?;
    Ok(Table { headers, rows })
}

impl Table {
    fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    fn number(&self, path: &Path, row: usize, col: usize) -> Result<f64, CliError> {
        let s = &self.rows[row][col];
        s.parse::<f64>().map_err(|_| {
            CliError::Data(format!(
                "{}: row {} column `{}`: `{s}` is not a number",
                path.display(),
                row + 2,
                self.headers[col]
            ))
        })
    }

    /// The single provenance shared by every row, or `Real` when the
    /// column is missing.
    fn provenance(&self, path: &Path) -> Result<Provenance, CliError> {
        let Some(col) = self.column("provenance") else {
            warn!("{}: no provenance column; treating rows as real", path.display());
            return Ok(Provenance::Real);
        };
        let mut found: Option<Provenance> = None;
        for (i, row) in self.rows.iter().enumerate() {
            let p: Provenance = row[col]
                .parse()
                .map_err(|e| CliError::Data(format!("{}: row {}: {e}", path.display(), i + 2)))?;
            match found {
                None => found = Some(p),
                Some(prev) if prev != p => {
                    return Err(CliError::Data(format!(
                        "{}: mixed provenance ({prev} and {p}) in one file",
                        path.display()
                    )))
                }
                _ => {}
            }
        }
        Ok(found.unwrap_or(Provenance::Real))
    }
}

pub fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    let t = read_table(path)?;
    let outcome = t
        .column("outcome")
        .ok_or_else(|| CliError::Data(format!("{}: missing `outcome` column", path.display())))?;
    let weight = t.column("weight");
    let prov_col = t.column("provenance");
    let provenance = t.provenance(path)?;
    let covariate_cols: Vec<usize> = (0..t.headers.len())
        .filter(|&c| c != outcome && Some(c) != weight && Some(c) != prov_col)
        .collect();
    let mut obs = Vec::with_capacity(t.rows.len());
    let mut weights = Vec::with_capacity(t.rows.len());
    for r in 0..t.rows.len() {
        let covs = covariate_cols
            .iter()
            .map(|&c| t.number(path, r, c))
            .collect::<Result<Vec<_>, _>>()?;
        obs.push(Observation::with_covariates(t.number(path, r, outcome)?, covs));
        weights.push(match weight {
            Some(c) => t.number(path, r, c)?,
            None => 1.0,
        });
    }
    Ok(Dataset::with_weights(obs, weights, provenance)?)
}

/// Choice data: a 1-based `choice` column and covariates named `x<j>_<k>`
/// (alternative `j`, covariate `k`, both 1-based).
pub fn read_choices(path: &Path) -> Result<(ChoiceDataset, Provenance), CliError> {
    let t = read_table(path)?;
    let choice = t
        .column("choice")
        .ok_or_else(|| CliError::Data(format!("{}: missing `choice` column", path.display())))?;
    let mut cells = Vec::new();
    for (c, h) in t.headers.iter().enumerate() {
        if let Some(rest) = h.strip_prefix('x') {
            let parsed = rest
                .split_once('_')
                .and_then(|(j, k)| Some((j.parse::<usize>().ok()?, k.parse::<usize>().ok()?)));
            match parsed {
                Some((j, k)) if j >= 1 && k >= 1 => cells.push((j - 1, k - 1, c)),
                _ => return Err(CliError::Data(format!("{}: bad covariate column `{h}`", path.display()))),
            }
        }
    }
    let n_alt = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
    let n_cov = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
    if cells.len() != n_alt * n_cov || n_alt < 2 || n_cov < 1 {
        return Err(CliError::Data(format!(
            "{}: covariate columns must cover x1_1..xJ_K with J >= 2",
            path.display()
        )));
    }
    let provenance = t.provenance(path)?;
    let mut rows = Vec::with_capacity(t.rows.len());
    for r in 0..t.rows.len() {
        let mut x = DMatrix::zeros(n_alt, n_cov);
        for &(j, k, c) in &cells {
            x[(j, k)] = t.number(path, r, c)?;
        }
        let ch = t.number(path, r, choice)?;
        if ch.fract() != 0.0 || ch < 1.0 || ch > n_alt as f64 {
            return Err(CliError::Data(format!(
                "{}: row {}: choice {ch} outside 1..={n_alt}",
                path.display(),
                r + 2
            )));
        }
        rows.push(ChoiceRow {
            x,
            choice: ch as usize - 1,
        });
    }
    Ok((ChoiceDataset::new(rows, n_alt, n_cov)?, provenance))
}

/// Named numeric columns, in the order requested.
pub fn read_columns(path: &Path, names: &[&str]) -> Result<Vec<Vec<f64>>, CliError> {
    let t = read_table(path)?;
    names
        .iter()
        .map(|name| {
            let c = t
                .column(name)
                .ok_or_else(|| CliError::Data(format!("{}: missing `{name}` column", path.display())))?;
            (0..t.rows.len()).map(|r| t.number(path, r, c)).collect()
        })
        .collect()
}

/// GP points: output column `y`, every other column (except `provenance`)
/// is an input coordinate.
pub fn read_gp(path: &Path) -> Result<GpData, CliError> {
    let t = read_table(path)?;
    let y = t
        .column("y")
        .ok_or_else(|| CliError::Data(format!("{}: missing `y` column", path.display())))?;
    let prov = t.column("provenance");
    let _ = t.provenance(path)?;
    let inputs_cols: Vec<usize> = (0..t.headers.len()).filter(|&c| c != y && Some(c) != prov).collect();
    if inputs_cols.is_empty() {
        return Err(CliError::Data(format!("{}: no input columns", path.display())));
    }
    let mut inputs = Vec::with_capacity(t.rows.len());
    let mut outputs = Vec::with_capacity(t.rows.len());
    for r in 0..t.rows.len() {
        inputs.push(
            inputs_cols
                .iter()
                .map(|&c| t.number(path, r, c))
                .collect::<Result<Vec<_>, _>>()?,
        );
        outputs.push(t.number(path, r, y)?);
    }
    Ok(GpData::new(inputs, outputs)?)
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// CSV text for a dataset; `group` adds a leading column (e.g. dataset index).
pub fn dataset_csv(data: &Dataset, group: Option<&[usize]>, group_name: &str) -> String {
    let n_cov = data.observations().first().map_or(0, |o| o.covariates.len());
    let mut header: Vec<String> = Vec::new();
    if group.is_some() {
        header.push(group_name.to_string());
    }
    header.push("outcome".into());
    header.extend((1..=n_cov).map(|k| format!("covariate_{k}")));
    header.push("weight".into());
    header.push("provenance".into());
    let mut out = header.join(",");
    out.push('\n');
    for (i, (o, w)) in data.iter().enumerate() {
        let mut fields = Vec::new();
        if let Some(g) = group {
            fields.push(g[i].to_string());
        }
        fields.push(fmt_f64(o.outcome));
        fields.extend(o.covariates.iter().map(|c| fmt_f64(*c)));
        fields.push(fmt_f64(w));
        fields.push(data.provenance().to_string());
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// CSV text with a header and rows of floats.
pub fn table_csv(header: &[&str], rows: &[Vec<f64>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}
