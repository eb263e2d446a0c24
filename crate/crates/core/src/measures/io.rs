//! Measure CSV files and dataset manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DiscreteMeasure, LabeledDataset, Responses};
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "sinkgp-manifest/1";

/// Reads a measure CSV with header `x1,...,xd,weight`.
///
/// Row numbers in parse errors count data rows from 1 (the header is row 0).
pub fn load_measure(path: impl AsRef<Path>) -> Result<DiscreteMeasure> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_measure_csv(&text)
}

pub(crate) fn parse_measure_csv(text: &str) -> Result<DiscreteMeasure> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let cols = header.len();
    if cols < 2 {
        return Err(Error::Parse {
            row: 0,
            message: "expected header x1,...,xd,weight".into(),
        });
    }
    for (k, name) in header.iter().enumerate() {
        let expected = if k + 1 == cols {
            "weight".to_string()
        } else {
            format!("x{}", k + 1)
        };
        if name != expected {
            return Err(Error::Parse {
                row: 0,
                message: format!("column {} is {name:?}, expected {expected:?}", k + 1),
            });
        }
    }
    let dim = cols - 1;
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        if record.len() != cols {
            return Err(Error::Parse {
                row,
                message: format!("expected {cols} fields, found {}", record.len()),
            });
        }
        for (k, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                row,
                message: format!("field {} ({field:?}) is not a number", k + 1),
            })?;
            if k + 1 == cols {
                if v < 0.0 {
                    return Err(Error::validation(format!("negative weight {v} at row {row}")));
                }
                weights.push(v);
            } else {
                points.push(v);
            }
        }
    }
    DiscreteMeasure::new(points, dim, weights)
}

/// Writes a measure as CSV. Floats use the shortest representation that
/// parses back to the identical value.
pub fn write_measure(path: impl AsRef<Path>, m: &DiscreteMeasure) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, measure_csv(m)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub(crate) fn measure_csv(m: &DiscreteMeasure) -> String {
    let mut out = String::new();
    for k in 1..=m.dim() {
        out.push_str(&format!("x{k},"));
    }
    out.push_str("weight\n");
    for i in 0..m.len() {
        for x in m.point(i) {
            out.push_str(&format!("{x:?},"));
        }
        out.push_str(&format!("{:?}\n", m.weights()[i]));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

/// Dataset manifest: `{"dim": d, "items": [{"path": ..., "target"|"label": ...}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
    pub dim: usize,
    pub items: Vec<ManifestItem>,
}

impl Manifest {
    /// Responses when every item carries one kind; `None` for unlabeled or
    /// empty manifests.
    pub fn responses(&self) -> Result<Option<Responses>> {
        if self.items.is_empty() {
            return Ok(None);
        }
        let targets: Vec<Option<f64>> = self.items.iter().map(|i| i.target).collect();
        let labels: Vec<Option<u8>> = self.items.iter().map(|i| i.label).collect();
        if self.items.iter().any(|i| i.target.is_some() && i.label.is_some()) {
            return Err(Error::validation("manifest item has both target and label"));
        }
        if targets.iter().all(Option::is_some) {
            Ok(Some(Responses::Targets(targets.into_iter().flatten().collect())))
        } else if labels.iter().all(Option::is_some) {
            Ok(Some(Responses::Labels(labels.into_iter().flatten().collect())))
        } else if targets.iter().all(Option::is_none) && labels.iter().all(Option::is_none) {
            Ok(None)
        } else {
            Err(Error::validation(
                "manifest mixes items with and without responses",
            ))
        }
    }
}

/// Loads a manifest and every measure it lists. Relative item paths resolve
/// against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<(Manifest, Vec<DiscreteMeasure>, Option<Responses>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if let Some(f) = &manifest.format {
        if f != MANIFEST_FORMAT {
            return Err(Error::Format {
                expected: MANIFEST_FORMAT.into(),
                found: f.clone(),
            });
        }
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut measures = Vec::with_capacity(manifest.items.len());
    for item in &manifest.items {
        let p = if item.path.is_absolute() {
            item.path.clone()
        } else {
            base.join(&item.path)
        };
        let m = load_measure(&p)?;
        if m.dim() != manifest.dim {
            return Err(Error::validation(format!(
                "{} has dimension {} but the manifest declares {}",
                p.display(),
                m.dim(),
                manifest.dim
            )));
        }
        measures.push(m);
    }
    let responses = manifest.responses()?;
    Ok((manifest, measures, responses))
}

/// Writes each measure of `ds` as `<stem>_<i>.csv` under `dir` plus a
/// `manifest.json` listing them; returns the manifest path.
pub fn write_manifest(dir: impl AsRef<Path>, stem: &str, ds: &LabeledDataset) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let width = ds.len().max(1).to_string().len();
    let mut items = Vec::with_capacity(ds.len());
    for (i, m) in ds.measures().iter().enumerate() {
        let name = format!("{stem}_{i:0width$}.csv");
        write_measure(dir.join(&name), m)?;
        let (target, label) = match ds.responses() {
            Responses::Targets(t) => (Some(t[i]), None),
            Responses::Labels(l) => (None, Some(l[i])),
        };
        items.push(ManifestItem {
            path: PathBuf::from(name),
            target,
            label,
        });
    }
    let manifest = Manifest {
        format: Some(MANIFEST_FORMAT.into()),
        dim: ds.dim(),
        items,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_and_renormalizes() {
        let m = parse_measure_csv("x1,x2,weight\n0,0,2\n1,1,2\n").unwrap();
        assert_eq!(m.points(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(m.weights(), &[0.5, 0.5]);

        let m = parse_measure_csv("x1,x2,weight\n0,0,1\n1,1,0\n").unwrap();
        assert_eq!(m.points(), &[0.0, 0.0]);
        assert_eq!(m.weights(), &[1.0]);

        let m = parse_measure_csv("x1,weight\n0.3,1\n0.7,3\n").unwrap();
        assert_eq!(m.weights(), &[0.25, 0.75]);
    }

    #[test]
    fn reports_row_of_malformed_line() {
        let err = parse_measure_csv("x1,weight\n0.3,1\nabc,3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, .. }), "{err}");
        let err = parse_measure_csv("x1,weight\n0.3,1\n1,2,3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, .. }), "{err}");
    }

    #[test]
    fn rejects_zero_and_negative_weights() {
        assert!(matches!(
            parse_measure_csv("x1,weight\n0,0\n1,0\n"),
            Err(Error::EmptyMeasure)
        ));
        assert!(matches!(
            parse_measure_csv("x1,weight\n0,1\n1,-1\n"),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            parse_measure_csv("y1,weight\n0,1\n"),
            Err(Error::Parse { row: 0, .. })
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ms = vec![
            DiscreteMeasure::dirac(&[0.25]).unwrap(),
            DiscreteMeasure::new(vec![0.0, 1.0], 1, vec![1.0, 3.0]).unwrap(),
        ];
        let ds = LabeledDataset::new(ms, Responses::Labels(vec![0, 1]), 1).unwrap();
        let path = write_manifest(dir.path(), "m", &ds).unwrap();
        let (manifest, measures, responses) = load_manifest(&path).unwrap();
        assert_eq!(manifest.dim, 1);
        assert_eq!(measures, ds.measures());
        assert_eq!(responses, Some(Responses::Labels(vec![0, 1])));
    }

    #[test]
    fn manifest_rejects_unknown_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(&path, r#"{"format":"sinkgp-manifest/99","dim":1,"items":[]}"#).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Format { .. })));
        fs::write(&path, r#"{"dim":1,"items":[]}"#).unwrap();
        let (_, ms, r) = load_manifest(&path).unwrap();
        assert!(ms.is_empty() && r.is_none());
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_bit_exact(
            rows in proptest::collection::vec(
                (proptest::collection::vec(-1e6f64..1e6, 3), 1e-6f64..10.0), 1..20)
        ) {
            let points: Vec<f64> = rows.iter().flat_map(|(p, _)| p.clone()).collect();
            let weights: Vec<f64> = rows.iter().map(|(_, w)| *w).collect();
            let m = DiscreteMeasure::new(points, 3, weights).unwrap();
            let back = parse_measure_csv(&measure_csv(&m)).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
