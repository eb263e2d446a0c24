//! On-disk formats for references, models, embeddings, Gram exports and
//! training traces.
//!
//! JSON documents carry a `format` tag and readers reject tags they do not
//! know. CSV outputs are identified by their header row.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{realize_reference, Embedding, RefVersion, ReferenceParams};
use crate::error::{Error, Result};
use crate::gp::{fit, GPModel, GpKind, PredictionResult};
use crate::kernels::KernelSpec;
use crate::measures::{AffineMap, Responses};
use crate::optimize::IterRecord;
use crate::sinkhorn::SinkhornConfig;

pub const REFERENCE_FORMAT: &str = "sinkgp-reference/1";
pub const MODEL_FORMAT: &str = "sinkgp-model/1";
pub const GRAM_FORMAT: &str = "sinkgp-gram/1";
pub const TRACE_FORMAT: &str = "sinkgp-trace/1";

fn check_tag(found: &Option<String>, expected: &str) -> Result<()> {
    match found {
        Some(f) if f != expected => Err(Error::Format {
            expected: expected.into(),
            found: f.clone(),
        }),
        _ => Ok(()),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reference JSON: `{"scale": S, "x_raw": [[..], ..], "w_raw": [..]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
    pub scale: f64,
    pub x_raw: Vec<Vec<f64>>,
    pub w_raw: Vec<f64>,
}

impl ReferenceFile {
    pub fn from_params(rp: &ReferenceParams) -> Self {
        Self {
            format: Some(REFERENCE_FORMAT.into()),
            scale: rp.scale,
            x_raw: rp.x_raw.chunks(rp.dim).map(<[f64]>::to_vec).collect(),
            w_raw: rp.w_raw.clone(),
        }
    }

    pub fn to_params(&self) -> Result<ReferenceParams> {
        check_tag(&self.format, REFERENCE_FORMAT)?;
        let dim = self.x_raw.first().map_or(0, Vec::len);
        if self.x_raw.iter().any(|r| r.len() != dim) {
            return Err(Error::validation("reference x_raw rows have different lengths"));
        }
        if self.x_raw.len() != self.w_raw.len() {
            return Err(Error::validation(format!(
                "reference has {} atoms but {} raw weights",
                self.x_raw.len(),
                self.w_raw.len()
            )));
        }
        ReferenceParams::new(self.x_raw.concat(), dim, self.w_raw.clone(), self.scale)
    }
}

pub fn load_reference(path: impl AsRef<Path>) -> Result<ReferenceParams> {
    let file: ReferenceFile = serde_json::from_str(&read_text(path.as_ref())?)?;
    file.to_params()
}

pub fn write_reference(path: impl AsRef<Path>, rp: &ReferenceParams) -> Result<()> {
    let text = serde_json::to_string_pretty(&ReferenceFile::from_params(rp))?;
    write_text(path.as_ref(), &(text + "\n"))
}

/// Model JSON. Factorizations are recomputed on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
    pub kind: GpKind,
    pub spec: KernelSpec,
    pub noise: f64,
    #[serde(rename = "ref")]
    pub reference: ReferenceFile,
    pub sinkhorn: SinkhornConfig,
    pub ref_version: RefVersion,
    pub embeddings: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_map: Option<Vec<f64>>,
    /// Map applied to input points before embedding, if the model was fit on
    /// normalized data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<AffineMap>,
}

/// A model restored from disk along with what is needed to embed new data.
#[derive(Debug, Clone)]
pub struct SavedModel {
    pub model: GPModel,
    pub reference: ReferenceParams,
    pub sinkhorn: SinkhornConfig,
    pub normalization: Option<AffineMap>,
}

impl SavedModel {
    pub fn to_file(&self) -> ModelFile {
        let (targets, labels) = match &self.model.responses {
            Responses::Targets(t) => (Some(t.clone()), None),
            Responses::Labels(l) => (None, Some(l.clone())),
        };
        ModelFile {
            format: Some(MODEL_FORMAT.into()),
            kind: self.model.kind(),
            spec: self.model.spec,
            noise: self.model.noise,
            reference: ReferenceFile::from_params(&self.reference),
            sinkhorn: self.sinkhorn,
            ref_version: self
                .model
                .embeddings
                .first()
                .map(|e| e.ref_version.clone())
                .unwrap_or_else(|| RefVersion::of(&self.model.reference, self.sinkhorn.epsilon)),
            embeddings: self.model.embeddings.iter().map(|e| e.values.clone()).collect(),
            targets,
            labels,
            latent_map: self.model.latent_map().map(<[f64]>::to_vec),
            normalization: self.normalization.clone(),
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        check_tag(&file.format, MODEL_FORMAT)?;
        file.spec.validate()?;
        file.sinkhorn.validate()?;
        let reference = file.reference.to_params()?;
        let realized = realize_reference(&reference)?;
        let version = RefVersion::of(&realized, file.sinkhorn.epsilon);
        if version != file.ref_version {
            return Err(Error::RefVersionMismatch(
                file.ref_version.to_string(),
                version.to_string(),
            ));
        }
        let responses = match (file.kind, file.targets, file.labels) {
            (GpKind::Regression, Some(t), None) => Responses::Targets(t),
            (GpKind::Classification, None, Some(l)) => Responses::Labels(l),
            _ => return Err(Error::validation("model responses do not match its kind")),
        };
        let embeddings: Vec<Embedding> = file
            .embeddings
            .into_iter()
            .map(|values| Embedding {
                values,
                ref_version: version.clone(),
                converged: true,
            })
            .collect();
        let model = fit(&embeddings, &realized, &responses, &file.spec, file.noise)?;
        Ok(Self {
            model,
            reference,
            sinkhorn: file.sinkhorn,
            normalization: file.normalization,
        })
    }
}

pub fn write_model(path: impl AsRef<Path>, saved: &SavedModel) -> Result<()> {
    let text = serde_json::to_string_pretty(&saved.to_file())?;
    write_text(path.as_ref(), &(text + "\n"))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SavedModel> {
    let file: ModelFile = serde_json::from_str(&read_text(path.as_ref())?)?;
    SavedModel::from_file(file)
}

/// Embedding CSV with columns `id,g_1..g_q,converged`.
pub fn embeddings_csv(ids: &[String], embeddings: &[Embedding]) -> String {
    let q = embeddings.first().map_or(0, |e| e.values.len());
    let mut out = String::from("id");
    for j in 1..=q {
        let _ = write!(out, ",g_{j}");
    }
    out.push_str(",converged\n");
    for (id, e) in ids.iter().zip(embeddings) {
        out.push_str(id);
        for v in &e.values {
            let _ = write!(out, ",{v:?}");
        }
        let _ = writeln!(out, ",{}", e.converged);
    }
    out
}

/// Prediction CSV: `id,mean,variance` plus `probability` for classifiers.
pub fn predictions_csv(ids: &[String], preds: &[PredictionResult], kind: GpKind) -> String {
    let mut out = String::from("id,mean,variance");
    if kind == GpKind::Classification {
        out.push_str(",probability");
    }
    out.push('\n');
    for (id, p) in ids.iter().zip(preds) {
        let _ = write!(out, "{id},{:?},{:?}", p.mean, p.variance);
        if let Some(prob) = p.probability {
            let _ = write!(out, ",{prob:?}");
        }
        out.push('\n');
    }
    out
}

/// Dense headerless CSV of a square matrix.
pub fn matrix_csv(values: &[f64], n: usize) -> String {
    let mut out = String::new();
    for row in values.chunks(n.max(1)).take(n) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Parameterization of an exported Gram matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kernel", rename_all = "snake_case")]
pub enum GramKernel {
    Sinkhorn {
        spec: KernelSpec,
        ref_version: RefVersion,
        #[serde(rename = "ref")]
        reference: ReferenceFile,
        sinkhorn: SinkhornConfig,
    },
    Mmd {
        rbf_sigma: f64,
        hat_sigma: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramSidecar {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
    pub n: usize,
    #[serde(flatten)]
    pub kernel: GramKernel,
}

impl GramSidecar {
    pub fn new(n: usize, kernel: GramKernel) -> Self {
        Self {
            format: Some(GRAM_FORMAT.into()),
            n,
            kernel,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let s: GramSidecar = serde_json::from_str(text)?;
        check_tag(&s.format, GRAM_FORMAT)?;
        Ok(s)
    }
}

/// Writes `<path>` (CSV) and `<path>.json` (sidecar).
pub fn write_gram(path: impl AsRef<Path>, values: &[f64], sidecar: &GramSidecar) -> Result<()> {
    let path = path.as_ref();
    write_text(path, &matrix_csv(values, sidecar.n))?;
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    let text = serde_json::to_string_pretty(sidecar)?;
    write_text(Path::new(&side), &(text + "\n"))
}

#[derive(Serialize, Deserialize)]
struct TraceLine {
    format: String,
    #[serde(flatten)]
    record: IterRecord,
}

/// One JSON object per line: `{format, iter, nll, grad_norm, step, wallclock_ms}`.
pub fn trace_jsonl(trace: &[IterRecord]) -> Result<String> {
    let mut out = String::new();
    for rec in trace {
        let line = TraceLine {
            format: TRACE_FORMAT.into(),
            record: *rec,
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_trace_jsonl(text: &str) -> Result<Vec<IterRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let line: TraceLine = serde_json::from_str(l)?;
            check_tag(&Some(line.format), TRACE_FORMAT)?;
            Ok(line.record)
        })
        .collect()
}
