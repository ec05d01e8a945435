//! Manifest-driven CSV ingestion and the matching writer.
//!
//! A manifest (TOML) names a schema descriptor, a labels CSV and one CSV per
//! modality. Modality CSVs carry the sample id in their first column; an
//! empty cell is the only missing marker unless the manifest lists extra
//! tokens.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FeatureKind, FeatureSchema, Modality, MultimodalDataset};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownCategoryPolicy {
    /// A category string absent from the schema is a load error.
    #[default]
    Error,
    /// Such strings map to the feature's reserved unknown index.
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestModality {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: PathBuf,
    pub labels: PathBuf,
    #[serde(default = "default_id_column")]
    pub id_column: String,
    #[serde(default = "default_label_column")]
    pub label_column: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing_tokens: Vec<String>,
    #[serde(default)]
    pub unknown_categories: UnknownCategoryPolicy,
    pub modalities: Vec<ManifestModality>,
}

fn default_id_column() -> String {
    "id".into()
}

fn default_label_column() -> String {
    "label".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemaModality {
    pub name: String,
    pub features: Vec<FeatureSchema>,
}

/// Feature kinds and categories for every modality, plus the ordered class list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemaDescriptor {
    pub classes: Vec<String>,
    pub modalities: Vec<SchemaModality>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_csv(path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let header = rdr
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(Table { header, rows })
}

pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<MultimodalDataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest: Manifest = toml::from_str(&read_text(manifest_path)?)
        .map_err(|e| Error::format(manifest_path, e.to_string()))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let schema_path = resolve(base, &manifest.schema);
    let schema: SchemaDescriptor = toml::from_str(&read_text(&schema_path)?)
        .map_err(|e| Error::format(&schema_path, e.to_string()))?;

    let labels_path = resolve(base, &manifest.labels);
    let labels_tbl = read_csv(&labels_path)?;
    let col = |name: &str| labels_tbl.header.iter().position(|h| h == name);
    let (id_col, label_col) = match (col(&manifest.id_column), col(&manifest.label_column)) {
        (Some(i), Some(l)) => (i, l),
        _ => {
            return Err(Error::format(
                &labels_path,
                format!(
                    "labels file needs `{}` and `{}` columns",
                    manifest.id_column, manifest.label_column
                ),
            ))
        }
    };
    let mut sample_ids = Vec::with_capacity(labels_tbl.rows.len());
    let mut labels = Vec::with_capacity(labels_tbl.rows.len());
    let mut id_pos: HashMap<String, usize> = HashMap::new();
    for (r, row) in labels_tbl.rows.iter().enumerate() {
        let id = row[id_col].clone();
        let label = schema
            .classes
            .iter()
            .position(|c| *c == row[label_col])
            .ok_or_else(|| {
                Error::format(&labels_path, format!("row {}: unknown class `{}`", r + 1, row[label_col]))
            })?;
        if id_pos.insert(id.clone(), r).is_some() {
            return Err(Error::format(&labels_path, format!("duplicate sample id `{id}`")));
        }
        sample_ids.push(id);
        labels.push(label);
    }
    let n = sample_ids.len();

    let mut modalities = Vec::with_capacity(manifest.modalities.len());
    for entry in &manifest.modalities {
        let spec = schema
            .modalities
            .iter()
            .find(|m| m.name == entry.name)
            .ok_or_else(|| {
                Error::format(&schema_path, format!("no schema for modality `{}`", entry.name))
            })?;
        let path = resolve(base, &entry.path);
        let tbl = read_csv(&path)?;
        if tbl.header.first().map(String::as_str) != Some(manifest.id_column.as_str()) {
            return Err(Error::format(
                &path,
                format!("first column must be `{}`", manifest.id_column),
            ));
        }
        let mut col_of = Vec::with_capacity(spec.features.len());
        for f in &spec.features {
            let c = tbl.header.iter().skip(1).position(|h| *h == f.name).ok_or_else(|| {
                Error::format(&path, format!("missing column for feature `{}`", f.name))
            })?;
            col_of.push(c + 1);
        }
        if tbl.header.len() != spec.features.len() + 1 {
            return Err(Error::format(&path, "header has columns not declared in the schema"));
        }

        let w = spec.features.len();
        let mut values = vec![0.0; n * w];
        let mut observed = vec![false; n * w];
        let mut seen = vec![false; n];
        for (r, row) in tbl.rows.iter().enumerate() {
            let id = &row[0];
            let &s = id_pos.get(id).ok_or_else(|| {
                Error::Data(format!(
                    "{}: sample id `{id}` (row {}) has no label",
                    path.display(),
                    r + 1
                ))
            })?;
            if std::mem::replace(&mut seen[s], true) {
                return Err(Error::format(&path, format!("duplicate sample id `{id}`")));
            }
            for (f, (feat, &c)) in spec.features.iter().zip(&col_of).enumerate() {
                let cell = row[c].trim();
                if cell.is_empty() || manifest.missing_tokens.iter().any(|t| t == cell) {
                    continue;
                }
                let v = match feat.kind {
                    FeatureKind::Numerical => cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                        Error::format(
                            &path,
                            format!("row {}: non-numeric value `{cell}` in `{}`", r + 1, feat.name),
                        )
                    })?,
                    FeatureKind::Categorical => match (feat.category_index(cell), manifest.unknown_categories) {
                        (Some(i), _) => i as f64,
                        (None, UnknownCategoryPolicy::Unknown) => feat.unknown_index() as f64,
                        (None, UnknownCategoryPolicy::Error) => {
                            return Err(Error::format(
                                &path,
                                format!("row {}: unknown category `{cell}` in `{}`", r + 1, feat.name),
                            ))
                        }
                    },
                };
                values[s * w + f] = v;
                observed[s * w + f] = true;
            }
        }
        if let Some(s) = seen.iter().position(|&x| !x) {
            return Err(Error::Data(format!(
                "{}: sample id `{}` is missing",
                path.display(),
                sample_ids[s]
            )));
        }
        modalities.push(Modality::new(entry.name.clone(), spec.features.clone(), values, observed)?);
    }
    MultimodalDataset::new(modalities, labels, schema.classes, sample_ids)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn format_cell(feat: &FeatureSchema, value: f64) -> Result<String> {
    match feat.kind {
        FeatureKind::Numerical => Ok(format!("{value}")),
        FeatureKind::Categorical => feat
            .categories
            .get(value as usize)
            .cloned()
            .ok_or_else(|| Error::Data(format!("category index {value} of `{}` has no name", feat.name))),
    }
}

/// Writes the dataset as `schema.toml`, `labels.csv`, one CSV per modality
/// and `manifest.toml` inside `dir`, returning the manifest path.
pub fn write_dataset(ds: &MultimodalDataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let id_column = default_id_column();

    let schema = SchemaDescriptor {
        classes: ds.class_names.clone(),
        modalities: ds
            .modalities
            .iter()
            .map(|m| SchemaModality {
                name: m.name.clone(),
                features: m.schema().to_vec(),
            })
            .collect(),
    };
    let schema_txt = toml::to_string(&schema).map_err(|e| Error::format(dir, e.to_string()))?;
    write_file(&dir.join("schema.toml"), &schema_txt)?;

    let csv_err = |p: &Path, e: csv::Error| Error::format(p, e.to_string());
    let labels_path = dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&labels_path).map_err(|e| csv_err(&labels_path, e))?;
    w.write_record([id_column.as_str(), "label"]).map_err(|e| csv_err(&labels_path, e))?;
    for (id, &l) in ds.sample_ids.iter().zip(&ds.labels) {
        w.write_record([id.as_str(), ds.class_names[l].as_str()])
            .map_err(|e| csv_err(&labels_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&labels_path, e))?;

    let mut entries = Vec::new();
    for m in &ds.modalities {
        let file = format!("{}.csv", m.name);
        let path = dir.join(&file);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        let mut header = vec![id_column.clone()];
        header.extend(m.schema().iter().map(|f| f.name.clone()));
        w.write_record(&header).map_err(|e| csv_err(&path, e))?;
        for (s, id) in ds.sample_ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            for (f, feat) in m.schema().iter().enumerate() {
                rec.push(if m.is_observed(s, f) {
                    format_cell(feat, m.value(s, f))?
                } else {
                    String::new()
                });
            }
            w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestModality {
            name: m.name.clone(),
            path: PathBuf::from(file),
        });
    }

    let manifest = Manifest {
        schema: "schema.toml".into(),
        labels: "labels.csv".into(),
        id_column,
        label_column: "label".into(),
        missing_tokens: Vec::new(),
        unknown_categories: UnknownCategoryPolicy::Error,
        modalities: entries,
    };
    let manifest_path = dir.join("manifest.toml");
    let txt = toml::to_string(&manifest).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    write_file(&manifest_path, &txt)?;
    Ok(manifest_path)
}
