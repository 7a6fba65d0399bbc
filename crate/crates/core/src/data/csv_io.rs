use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bundle::{ColumnData, DatasetBundle};
use super::schema::{ColumnKind, Schema, TaskType};
use crate::error::{Error, Result};

/// JSON manifest accompanying a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(flatten)]
    pub schema: Schema,
    /// Ground-truth mixture weights, present for exported synthetic datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture_weights: Option<Vec<f64>>,
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    manifest.schema.validate()?;
    Ok(manifest)
}

/// Loads a CSV file with a header row, interpreting columns per the manifest.
///
/// Categorical values outside the vocabulary map to the reserved unknown index and
/// are counted in `unknown_categories`.
pub fn load_csv(csv_path: &Path, manifest_path: &Path) -> Result<DatasetBundle> {
    let manifest = read_manifest(manifest_path)?;
    let file = fs::File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.iter().all(|h| h.is_empty()) {
        return Err(Error::Data(format!("{}: empty file", csv_path.display())));
    }
    let schema = manifest.schema;
    let position: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    for c in &schema.columns {
        if !position.contains_key(c.name.as_str()) {
            return Err(Error::Data(format!(
                "{}: manifest column `{}` missing from CSV header",
                csv_path.display(),
                c.name
            )));
        }
    }
    if let Some(extra) = header
        .iter()
        .find(|h| !schema.columns.iter().any(|c| &c.name == *h))
    {
        return Err(Error::Data(format!(
            "{}: CSV column `{extra}` is not listed in the manifest",
            csv_path.display()
        )));
    }

    let feature_specs: Vec<_> = schema.feature_columns().cloned().collect();
    let target_spec = schema.target_column().cloned().expect("validated");
    let lookups: Vec<Option<HashMap<&str, usize>>> = feature_specs
        .iter()
        .map(|c| {
            c.vocabulary
                .as_ref()
                .map(|v| v.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect())
        })
        .collect();
    let mut columns: Vec<ColumnData> = feature_specs
        .iter()
        .map(|c| match c.kind {
            ColumnKind::Categorical => ColumnData::Categorical(Vec::new()),
            _ => ColumnData::Numeric(Vec::new()),
        })
        .collect();
    let mut targets = Vec::new();
    let mut unknown = 0usize;

    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row + 2;
        let field = |name: &str| record.get(position[name]).unwrap_or("").trim();
        for ((spec, col), lookup) in feature_specs.iter().zip(&mut columns).zip(&lookups) {
            let raw = field(&spec.name);
            match col {
                ColumnData::Numeric(v) => v.push(parse_number(raw, line, &spec.name)?),
                ColumnData::Categorical(v) => {
                    let lookup = lookup.as_ref().expect("categorical vocabulary");
                    match lookup.get(raw) {
                        Some(&i) => v.push(i),
                        None => {
                            unknown += 1;
                            v.push(lookup.len());
                        }
                    }
                }
            }
        }
        let raw = field(&target_spec.name);
        let y = match (&target_spec.vocabulary, schema.task) {
            (Some(vocab), TaskType::Binary) => match vocab.iter().position(|v| v == raw) {
                Some(i) if vocab.len() == 2 => i as f64,
                _ => {
                    return Err(Error::Data(format!(
                        "line {line}, column `{}`: label `{raw}` is not one of {vocab:?}",
                        target_spec.name
                    )))
                }
            },
            _ => parse_number(raw, line, &target_spec.name)?,
        };
        if schema.task == TaskType::Binary && y != 0.0 && y != 1.0 {
            return Err(Error::Data(format!(
                "line {line}, column `{}`: binary target {raw} is not 0 or 1",
                target_spec.name
            )));
        }
        targets.push(y);
    }
    if targets.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", csv_path.display())));
    }
    let mut bundle = DatasetBundle::new(schema, columns, targets)?;
    bundle.unknown_categories = unknown;
    bundle.mixture_weights = manifest.mixture_weights;
    Ok(bundle)
}

fn parse_number(raw: &str, line: usize, column: &str) -> Result<f64> {
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Data(format!(
            "line {line}, column `{column}`: cannot parse `{raw}` as a number"
        ))),
    }
}

/// Writes the raw rows of `bundle` as CSV plus its manifest.
pub fn write_csv(bundle: &DatasetBundle, csv_path: &Path, manifest_path: &Path) -> Result<()> {
    let schema = &bundle.schema;
    let mut writer = csv::Writer::from_path(csv_path)?;
    writer.write_record(schema.columns.iter().map(|c| c.name.as_str()))?;
    let features: Vec<_> = schema.feature_columns().collect();
    for row in 0..bundle.rows() {
        let mut fields = Vec::with_capacity(schema.columns.len());
        let mut f = 0;
        for c in &schema.columns {
            let s = if c.kind == ColumnKind::Target {
                match (&c.vocabulary, schema.task) {
                    (Some(v), TaskType::Binary) => v[bundle.targets[row] as usize].clone(),
                    _ => bundle.targets[row].to_string(),
                }
            } else {
                let s = match &bundle.features[f] {
                    ColumnData::Numeric(v) => v[row].to_string(),
                    ColumnData::Categorical(v) => {
                        let vocab = features[f].vocabulary.as_ref().expect("vocabulary");
                        vocab.get(v[row]).cloned().unwrap_or_default()
                    }
                };
                f += 1;
                s
            };
            fields.push(s);
        }
        writer.write_record(&fields)?;
    }
    writer.flush().map_err(|e| Error::io(csv_path, e))?;
    let manifest = Manifest {
        schema: schema.clone(),
        mixture_weights: bundle.mixture_weights.clone(),
    };
    fs::write(manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| Error::io(manifest_path, e))?;
    Ok(())
}
