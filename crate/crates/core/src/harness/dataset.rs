use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::encoder::{load_features, pool_quarter, toy_encode, AnnotationSet, Raster, ToyEncoderParams};
use crate::error::{Error, Result};
use crate::metrics::tokenize;

/// Overrides the directory that relative manifest paths resolve against.
pub const DATA_ROOT_ENV: &str = "EMBCAP_DATA_ROOT";

pub const MAX_CAPTIONS: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Source {
    Features(PathBuf),
    Image(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub source: Source,
    /// Tokenized captions in manifest order.
    pub captions: Vec<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: String,
    #[serde(default)]
    features: Option<PathBuf>,
    #[serde(default)]
    image: Option<PathBuf>,
    captions: Vec<String>,
}

/// Reads a JSON-lines manifest; relative paths resolve against
/// `$EMBCAP_DATA_ROOT` when set, else the manifest's directory.
pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
    load_dataset_with_root(manifest, root.as_deref())
}

pub fn load_dataset_with_root(manifest: &Path, root: Option<&Path>) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let root = match root {
        Some(r) => r.to_path_buf(),
        None => manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let parse_err = |line: usize, detail: String| Error::Parse {
        path: manifest.to_path_buf(),
        line,
        detail,
    };
    let mut out = Dataset::default();
    let mut seen = HashSet::new();
    let mut missing = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: ManifestLine = serde_json::from_str(raw).map_err(|e| parse_err(line, e.to_string()))?;
        let source = match (rec.features, rec.image) {
            (Some(f), None) => Source::Features(root.join(f)),
            (None, Some(p)) => Source::Image(root.join(p)),
            _ => {
                return Err(parse_err(line, "exactly one of \"features\" or \"image\" is required".into()));
            }
        };
        if !seen.insert(rec.id.clone()) {
            return Err(parse_err(line, format!("duplicate id {:?}", rec.id)));
        }
        let captions: Vec<Vec<String>> = rec.captions.iter().map(|c| tokenize(c)).collect();
        if captions.is_empty() || captions.iter().any(Vec::is_empty) {
            return Err(parse_err(line, format!("record {:?} needs non-empty captions", rec.id)));
        }
        if captions.len() > MAX_CAPTIONS {
            out.warnings.push(format!(
                "record {:?} has {} captions (more than {MAX_CAPTIONS}); keeping all",
                rec.id,
                captions.len()
            ));
        }
        let path = match &source {
            Source::Features(p) | Source::Image(p) => p,
        };
        if !path.is_file() {
            missing.push(format!("{} ({})", rec.id, path.display()));
        }
        out.records.push(DatasetRecord {
            id: rec.id,
            source,
            captions,
        });
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!("missing files for records: {}", missing.join(", "))));
    }
    Ok(out)
}

/// Loads or computes the annotation set of one record.
pub fn annotations_for(
    record: &DatasetRecord,
    encoder: &ToyEncoderParams,
    pool: bool,
) -> Result<AnnotationSet> {
    let full = match &record.source {
        Source::Features(p) => {
            let mut a = load_features(p)?;
            if a.image_id() != record.id {
                a = AnnotationSet::new(record.id.clone(), a.rows(), a.cols(), a.dim(), a.data().to_vec())?;
            }
            a
        }
        Source::Image(p) => toy_encode(&Raster::load(p)?, encoder)?.into_annotations(record.id.clone())?,
    };
    if pool {
        pool_quarter(&full)
    } else {
        Ok(full)
    }
}
