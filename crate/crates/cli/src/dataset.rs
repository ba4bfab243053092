//! Delimited survival tables: `time`, `status`, then covariates; `NA` or an
//! empty field marks a missing covariate.

use std::path::Path;

use npcox::{Dataset, MissingMask, ObservedSubject};

use crate::error::CliError;

pub const TIME: &str = "time";
pub const STATUS: &str = "status";

#[derive(Clone, Debug)]
pub struct ParsedDataset {
    pub data: Dataset<f64>,
    /// Gaussian covariates first, then the conditioned-on columns.
    pub names: Vec<String>,
    pub missing_fractions: Vec<f64>,
    pub warnings: Vec<String>,
}

fn delimiter(path: &Path, header: &str) -> u8 {
    match path.extension().and_then(|e| e.to_str()) {
        Some("tsv") | Some("tab") => b'\t',
        _ if header.contains('\t') && !header.contains(',') => b'\t',
        _ => b',',
    }
}

fn is_missing(field: &str) -> bool {
    let f = field.trim();
    f.is_empty() || f == "NA"
}

pub fn parse_dataset(path: &Path, condition_on: &[String]) -> Result<ParsedDataset, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_dataset_str(&text, delimiter(path, text.lines().next().unwrap_or("")), condition_on)
}

pub fn parse_dataset_str(text: &str, delim: u8, condition_on: &[String]) -> Result<ParsedDataset, CliError> {
    let mut reader = csv::ReaderBuilder::new().delimiter(delim).has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::data(format!("cannot read header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let find = |name: &str| header.iter().position(|h| h == name);
    let (Some(t_col), Some(s_col)) = (find(TIME), find(STATUS)) else {
        return Err(CliError::data(format!("header must contain `{TIME}` and `{STATUS}` columns")));
    };
    for c in condition_on {
        if find(c).is_none() || c == TIME || c == STATUS {
            return Err(CliError::data(format!("--condition-on column {c:?} is not a covariate column")));
        }
    }
    let gaussian: Vec<usize> =
        (0..header.len()).filter(|&j| j != t_col && j != s_col && !condition_on.contains(&header[j])).collect();
    let fixed: Vec<usize> = condition_on.iter().map(|c| find(c).unwrap()).collect();
    if gaussian.is_empty() && fixed.is_empty() {
        return Err(CliError::data("no covariate columns"));
    }
    let mut subjects = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| CliError::data(format!("line {line}: {e}")))?;
        if rec.len() != header.len() {
            return Err(CliError::data(format!("line {line}: expected {} fields, found {}", header.len(), rec.len())));
        }
        let num = |j: usize| -> Result<Option<f64>, CliError> {
            let f = rec[j].trim();
            if is_missing(f) {
                return Ok(None);
            }
            match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Some(v)),
                _ => Err(CliError::data(format!("line {line}: column {:?} has non-numeric value {f:?}", header[j]))),
            }
        };
        let time = num(t_col)?.ok_or_else(|| CliError::data(format!("line {line}: missing time")))?;
        if !(time > 0.0) {
            return Err(CliError::data(format!("line {line}: time must be positive, got {time}")));
        }
        let status = match rec[s_col].trim() {
            "0" => false,
            "1" => true,
            other => return Err(CliError::data(format!("line {line}: status must be 0 or 1, got {other:?}"))),
        };
        let row: Vec<Option<f64>> = gaussian.iter().map(|&j| num(j)).collect::<Result<_, _>>()?;
        let mut z = Vec::with_capacity(fixed.len());
        for &j in &fixed {
            z.push(num(j)?.ok_or_else(|| {
                CliError::data(format!("line {line}: conditioned-on column {:?} must be observed", header[j]))
            })?);
        }
        subjects.push(ObservedSubject::from_row(time, status, &row).with_fixed(z));
    }
    if subjects.is_empty() {
        return Err(CliError::data("no data rows"));
    }
    let names: Vec<String> = gaussian.iter().chain(&fixed).map(|&j| header[j].clone()).collect();
    let data = Dataset::with_names(subjects, gaussian.len(), fixed.len(), names.clone()).map_err(CliError::from)?;
    let missing_fractions = data.missing_fractions();
    let warnings = missing_fractions
        .iter()
        .zip(&names)
        .filter(|(&f, _)| f >= 1.0)
        .map(|(_, n)| format!("column {n:?} is entirely missing; kept in the model"))
        .collect();
    Ok(ParsedDataset { data, names, missing_fractions, warnings })
}

fn fmt_value(v: f64) -> String {
    format!("{v}")
}

/// Writes a dataset back in the same format (`NA` for missing entries).
pub fn write_dataset_string(data: &Dataset<f64>, names: &[String]) -> String {
    let mut out = String::from("time,status");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    let p = data.p();
    for s in data.subjects() {
        out.push_str(&fmt_value(s.y));
        out.push_str(if s.delta { ",1" } else { ",0" });
        for j in 0..data.dim() {
            out.push(',');
            match s.value(j, p) {
                Some(v) => out.push_str(&fmt_value(v)),
                None => out.push_str("NA"),
            }
        }
        out.push('\n');
    }
    out
}

/// One subject's covariates ordered as a model expects them.
#[derive(Clone, Debug)]
pub struct AlignedRow {
    pub mask: MissingMask,
    pub observed: Vec<f64>,
    pub fixed: Vec<f64>,
}

/// Rows reordered by column name to match a saved model.
pub fn aligned_rows(
    parsed: &ParsedDataset,
    model_gaussian: &[String],
    model_fixed: &[String],
) -> Result<Vec<AlignedRow>, CliError> {
    let pos = |n: &String| {
        parsed.names.iter().position(|m| m == n).ok_or_else(|| CliError::data(format!("dataset lacks column {n:?}")))
    };
    let g: Vec<usize> = model_gaussian.iter().map(pos).collect::<Result<_, _>>()?;
    let f: Vec<usize> = model_fixed.iter().map(pos).collect::<Result<_, _>>()?;
    let p = parsed.data.p();
    parsed
        .data
        .subjects()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let row: Vec<Option<f64>> = g.iter().map(|&j| s.value(j, p)).collect();
            let mask = MissingMask::new(row.iter().map(|v| v.is_none()).collect());
            let obs = row.iter().flatten().copied().collect();
            let fixed = f
                .iter()
                .map(|&j| {
                    s.value(j, p).ok_or_else(|| {
                        CliError::data(format!("row {}: column {:?} is missing", i + 1, parsed.names[j]))
                    })
                })
                .collect::<Result<_, _>>()?;
            Ok(AlignedRow { mask, observed: obs, fixed })
        })
        .collect()
}
