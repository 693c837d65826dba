//! CSV ingestion. Files need a header row; fields are parsed as plain
//! decimal floats with no locale handling.

use std::path::Path;

use condchi_core::{Covariates, Dataset};

use crate::CliError;

/// Selected numeric columns, row-major.
#[derive(Debug, Clone)]
pub struct Columns {
    pub names: Vec<String>,
    pub rows: usize,
    pub values: Vec<f64>,
}

/// Reads the named columns from `path`. Row numbers in messages count data
/// rows from 1 (the header is not counted).
pub fn read_columns(path: &Path, wanted: &[String]) -> Result<Columns, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let header = reader
        .headers()
        .map_err(|e| CliError::Data(format!("{}: bad header: {e}", path.display())))?
        .clone();
    if header.is_empty() || header.iter().all(str::is_empty) {
        return Err(CliError::Data(format!("{}: empty file, expected a header row", path.display())));
    }
    let mut index = Vec::with_capacity(wanted.len());
    for name in wanted {
        match header.iter().position(|h| h == name) {
            Some(i) => index.push(i),
            None => {
                return Err(CliError::Data(format!(
                    "column \"{name}\" not found in the header of {}",
                    path.display()
                )))
            }
        }
    }

    let mut values = Vec::new();
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| CliError::Data(format!("row {row}: {e}")))?;
        for (name, &i) in wanted.iter().zip(&index) {
            let field = record.get(i).unwrap_or("");
            let v: f64 = field.parse().map_err(|_| {
                CliError::Data(format!("row {row}, column \"{name}\": {field:?} is not a number"))
            })?;
            if !v.is_finite() {
                return Err(CliError::Data(format!("row {row}, column \"{name}\": {field:?} is not finite")));
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(CliError::Data(format!("{}: no data rows", path.display())));
    }
    Ok(Columns { names: wanted.to_vec(), rows, values })
}

/// Covariates from the `x` columns.
pub fn read_covariates(path: &Path, x: &[String]) -> Result<Covariates, CliError> {
    if x.is_empty() {
        return Err(CliError::Usage("at least one x column is required".into()));
    }
    let cols = read_columns(path, x)?;
    Covariates::new(cols.values, x.len()).map_err(|e| CliError::Data(e.to_string()))
}

/// Response `y` and covariates `x`.
pub fn read_dataset(path: &Path, y: &str, x: &[String]) -> Result<Dataset, CliError> {
    if x.is_empty() {
        return Err(CliError::Usage("at least one x column is required".into()));
    }
    let mut wanted = vec![y.to_string()];
    wanted.extend(x.iter().cloned());
    let cols = read_columns(path, &wanted)?;
    let width = wanted.len();
    let mut ys = Vec::with_capacity(cols.rows);
    let mut xs = Vec::with_capacity(cols.rows * x.len());
    for row in cols.values.chunks_exact(width) {
        ys.push(row[0]);
        xs.extend_from_slice(&row[1..]);
    }
    let x = Covariates::new(xs, width - 1).map_err(|e| CliError::Data(e.to_string()))?;
    Dataset::new(ys, x).map_err(|e| CliError::Data(e.to_string()))
}
