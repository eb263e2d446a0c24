use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::json;
use sinkgp::bench::{bench_csv, run_benchmark, BenchConfig};
use sinkgp::embedding::{embed_all, realize_reference, Embedding, RefVersion, ReferenceParams};
use sinkgp::formats::{
    embeddings_csv, load_model, load_reference, predictions_csv, trace_jsonl, write_gram, write_model,
    write_reference, GramKernel, GramSidecar, ReferenceFile, SavedModel,
};
use sinkgp::gp::evs;
use sinkgp::kernels::{gram as sinkhorn_gram, mmd_gram, KernelFamily, KernelSpec};
use sinkgp::measures::{
    load_manifest, normalize_dataset, sample_toy_dataset, sample_two_class_dataset, write_manifest,
    DiscreteMeasure, LabeledDataset, Manifest, Responses,
};
use sinkgp::optimize::{default_init, train, OptimizeConfig};
use sinkgp::Error;

use crate::{CliError, CliResult, GlobalOpts};

#[derive(Args, Debug)]
pub struct ToygenArgs {
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 30)]
    cloud_size: usize,
    /// Generate the two-class mixture task instead of the regression field.
    #[arg(long)]
    classification: bool,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    manifest: PathBuf,
    #[command(flatten)]
    reference: RefSource,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    manifest: PathBuf,
    /// Number of reference atoms.
    #[arg(long, default_value_t = 6)]
    q: usize,
    /// L-BFGS iterations.
    #[arg(long, default_value_t = 30)]
    max_iters: usize,
    /// Standardize coordinates before training; the map is stored in the model.
    #[arg(long)]
    normalize: bool,
    /// Trace output (defaults to the model path with a `.trace.jsonl` suffix).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Also write the trained reference as JSON.
    #[arg(long)]
    ref_out: Option<PathBuf>,
    /// Optimize the noise too, starting from --noise (or 1e-3 times the
    /// initial variance).
    #[arg(long)]
    train_noise: bool,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    model: PathBuf,
    manifest: PathBuf,
}

#[derive(Args, Debug)]
pub struct GramArgs {
    manifest: PathBuf,
    #[command(flatten)]
    reference: RefSource,
    #[arg(long, default_value_t = 1.0)]
    variance: f64,
    #[arg(long, default_value_t = 1.0)]
    lengthscale: f64,
    /// Point-kernel bandwidth of the MMD kernel.
    #[arg(long, default_value_t = 0.1)]
    rbf_sigma: f64,
    /// Prefactor of the MMD kernel.
    #[arg(long, default_value_t = 1.0)]
    hat_sigma: f64,
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    /// Comma-separated `NxM` pairs: N clouds of M points.
    #[arg(long, default_value = "50x100,100x100,400x400")]
    sizes: String,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
}

/// Either a reference file or a random reference of `q` atoms.
#[derive(Args, Debug)]
pub struct RefSource {
    /// Reference JSON.
    #[arg(long = "ref", conflicts_with = "q")]
    path: Option<PathBuf>,
    /// Draw a random reference with this many atoms (seeded by --seed).
    #[arg(long)]
    q: Option<usize>,
}

impl RefSource {
    fn resolve(&self, measures: &[DiscreteMeasure], dim: usize, seed: u64) -> CliResult<ReferenceParams> {
        let rp = match (&self.path, self.q) {
            (Some(p), _) => load_reference(p)?,
            (None, Some(q)) => {
                let span = measures
                    .iter()
                    .flat_map(|m| m.points().iter())
                    .fold(0.0f64, |a, x| a.max(x.abs()));
                ReferenceParams::random(q, dim, if span > 0.0 { span } else { 1.0 }, seed)?
            }
            (None, None) => return Err(Error::Validation("pass --ref <file> or --q <atoms>".into()).into()),
        };
        if rp.dim != dim {
            return Err(Error::DimensionMismatch(dim, rp.dim).into());
        }
        warn_small_q(rp.q());
        Ok(rp)
    }
}

fn warn_small_q(q: usize) {
    if q < 2 {
        log::warn!("reference has {q} atom(s); centered embeddings are identically zero");
    }
}

fn item_ids(manifest: &Manifest) -> Vec<String> {
    manifest
        .items
        .iter()
        .map(|i| {
            i.path.file_stem().map_or_else(
                || i.path.display().to_string(),
                |s| s.to_string_lossy().into_owned(),
            )
        })
        .collect()
}

fn write_or_print(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| {
            CliError::Lib(Error::Io {
                context: format!("writing {}", p.display()),
                source: e,
            })
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn check_converged(strict: bool, embeddings: &[Embedding], ids: &[String]) -> CliResult<()> {
    let failed: Vec<&str> = embeddings
        .iter()
        .zip(ids)
        .filter(|(e, _)| !e.converged)
        .map(|(_, id)| id.as_str())
        .collect();
    if failed.is_empty() {
        return Ok(());
    }
    let msg = format!(
        "{} Sinkhorn solve(s) did not converge: {}",
        failed.len(),
        failed.join(", ")
    );
    if strict {
        Err(CliError::NotConverged(msg))
    } else {
        log::warn!("{msg}");
        Ok(())
    }
}

fn kernel_family(g: &GlobalOpts) -> CliResult<KernelFamily> {
    match g.kernel.as_deref() {
        None | Some("sinkhorn") => Ok(KernelFamily::Sqexp),
        Some(name) => Ok(name.parse()?),
    }
}

pub fn toygen(g: &GlobalOpts, a: &ToygenArgs) -> CliResult<()> {
    let ds = if a.classification {
        sample_two_class_dataset(a.count, a.cloud_size, g.seed)?
    } else {
        sample_toy_dataset(a.count, a.cloud_size, g.seed)?
    };
    let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("toy"));
    let path = write_manifest(&dir, "cloud", &ds)?;
    println!("{}", path.display());
    Ok(())
}

pub fn embed(g: &GlobalOpts, a: &EmbedArgs) -> CliResult<()> {
    let (manifest, measures, _) = load_manifest(&a.manifest)?;
    let rp = a.reference.resolve(&measures, manifest.dim, g.seed)?;
    let reference = realize_reference(&rp)?;
    let embeddings = embed_all(&measures, &reference, &g.sinkhorn(), None)?;
    let ids = item_ids(&manifest);
    write_or_print(g.out.as_deref(), &embeddings_csv(&ids, &embeddings))?;
    check_converged(g.strict, &embeddings, &ids)
}

pub fn fit(g: &GlobalOpts, a: &FitArgs) -> CliResult<()> {
    let (_, measures, responses) = load_manifest(&a.manifest)?;
    let responses = responses.ok_or_else(|| {
        Error::Validation("fit needs a manifest whose items all carry targets or labels".into())
    })?;
    let dim = measures.first().map_or(1, DiscreteMeasure::dim);
    let ds = LabeledDataset::new(measures, responses, dim)?;
    let (ds, normalization) = if a.normalize {
        let (ds, map) = normalize_dataset(&ds)?;
        (ds, Some(map))
    } else {
        (ds, None)
    };
    warn_small_q(a.q);
    let family = kernel_family(g)?;
    let cfg = g.sinkhorn();
    let mut init = default_init(&ds, a.q, &cfg, g.seed)?;
    if a.train_noise {
        let start = g.noise.unwrap_or(1e-3 * init.log_variance.exp());
        if !(start > 0.0 && start.is_finite()) {
            return Err(Error::Validation("a trained noise must start positive".into()).into());
        }
        init.log_noise = Some(start.ln());
    } else {
        init.fixed_noise = g.noise;
    }
    let opt = OptimizeConfig {
        max_iters: a.max_iters,
        ..OptimizeConfig::default()
    };
    let outcome = train(&ds, &init, family, &opt, &cfg)?;

    let model_path = g.out.clone().unwrap_or_else(|| PathBuf::from("model.json"));
    let trace_path = a.trace.clone().unwrap_or_else(|| {
        let mut p = model_path.clone().into_os_string();
        p.push(".trace.jsonl");
        PathBuf::from(p)
    });
    let saved = SavedModel {
        model: outcome.model,
        reference: outcome.state.reference.clone(),
        sinkhorn: cfg,
        normalization,
    };
    write_model(&model_path, &saved)?;
    write_or_print(Some(&trace_path), &trace_jsonl(&outcome.trace)?)?;
    if let Some(p) = &a.ref_out {
        write_reference(p, &outcome.state.reference)?;
    }
    let spec = outcome.state.spec(family);
    let summary = json!({
        "kind": saved.model.kind(),
        "kernel": family.name(),
        "q": outcome.state.reference.q(),
        "status": outcome.status,
        "iterations": outcome.trace.len() - 1,
        "initial_nll": outcome.initial_nll,
        "final_nll": outcome.final_nll,
        "variance": spec.variance,
        "lengthscale": spec.lengthscale,
        "noise": saved.model.noise,
        "converged_embeddings": outcome.converged_embeddings,
        "model": model_path,
        "trace": trace_path,
    });
    println!("{summary}");
    if g.strict && !outcome.converged_embeddings {
        return Err(CliError::NotConverged(
            "final embeddings include a non-converged Sinkhorn solve".into(),
        ));
    }
    Ok(())
}

pub fn predict(g: &GlobalOpts, a: &PredictArgs) -> CliResult<()> {
    let saved = load_model(&a.model)?;
    let (manifest, measures, responses) = load_manifest(&a.manifest)?;
    if !measures.is_empty() && manifest.dim != saved.reference.dim {
        return Err(Error::DimensionMismatch(saved.reference.dim, manifest.dim).into());
    }
    let measures = match &saved.normalization {
        Some(map) => measures
            .iter()
            .map(|m| map.apply_measure(m))
            .collect::<sinkgp::Result<Vec<_>>>()?,
        None => measures,
    };
    let embeddings = embed_all(&measures, &saved.model.reference, &saved.sinkhorn, None)?;
    let preds = saved.model.predict(&embeddings)?;
    let ids = item_ids(&manifest);
    write_or_print(
        g.out.as_deref(),
        &predictions_csv(&ids, &preds, saved.model.kind()),
    )?;

    let metric = match (&responses, preds.is_empty()) {
        (Some(Responses::Targets(y)), false) => {
            let mean: Vec<f64> = preds.iter().map(|p| p.mean).collect();
            Some(json!({ "evs": evs(y, &mean)? }))
        }
        (Some(Responses::Labels(y)), false) => {
            let hits = preds
                .iter()
                .zip(y)
                .filter(|(p, &y)| (p.probability.unwrap_or(0.5) > 0.5) == (y == 1))
                .count();
            Some(json!({ "accuracy": hits as f64 / y.len() as f64 }))
        }
        _ => None,
    };
    if let Some(m) = metric {
        // Keep stdout clean when it carries the CSV.
        if g.out.is_some() {
            println!("{m}");
        } else {
            eprintln!("{m}");
        }
    }
    check_converged(g.strict, &embeddings, &ids)
}

pub fn gram(g: &GlobalOpts, a: &GramArgs) -> CliResult<()> {
    let (manifest, measures, _) = load_manifest(&a.manifest)?;
    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("gram.csv"));
    let n = measures.len();
    if g.kernel.as_deref() == Some("mmd") {
        let values = mmd_gram(&measures, a.rbf_sigma, a.hat_sigma)?;
        let side = GramSidecar::new(
            n,
            GramKernel::Mmd {
                rbf_sigma: a.rbf_sigma,
                hat_sigma: a.hat_sigma,
            },
        );
        write_gram(&out, &values, &side)?;
        return Ok(());
    }
    let family = kernel_family(g)?;
    let spec = KernelSpec::new(family, a.variance, a.lengthscale)?;
    let rp = a.reference.resolve(&measures, manifest.dim, g.seed)?;
    let reference = realize_reference(&rp)?;
    let cfg = g.sinkhorn();
    let embeddings = embed_all(&measures, &reference, &cfg, None)?;
    let ids = item_ids(&manifest);
    check_converged(g.strict, &embeddings, &ids)?;
    let k = sinkhorn_gram(&embeddings, &reference, &spec)?;
    let side = GramSidecar::new(
        n,
        GramKernel::Sinkhorn {
            spec,
            ref_version: RefVersion::of(&reference, cfg.epsilon),
            reference: ReferenceFile::from_params(&rp),
            sinkhorn: cfg,
        },
    );
    write_gram(&out, &k.values, &side)?;
    Ok(())
}

fn parse_sizes(s: &str) -> CliResult<Vec<(usize, usize)>> {
    s.split(',')
        .map(|pair| {
            let (n, m) = pair
                .trim()
                .split_once('x')
                .ok_or_else(|| Error::Validation(format!("size {pair:?} is not NxM")))?;
            let parse = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::Validation(format!("size {pair:?} is not NxM")))
            };
            Ok((parse(n)?, parse(m)?))
        })
        .collect()
}

pub fn benchmark(g: &GlobalOpts, a: &BenchmarkArgs) -> CliResult<()> {
    let cfg = BenchConfig {
        repeats: a.repeats,
        sinkhorn: g.sinkhorn(),
        seed: g.seed,
        ..BenchConfig::default()
    };
    let rows = run_benchmark(&parse_sizes(&a.sizes)?, &cfg)?;
    write_or_print(g.out.as_deref(), &bench_csv(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!(
            parse_sizes("50x100, 400x400").unwrap(),
            vec![(50, 100), (400, 400)]
        );
        assert!(parse_sizes("50by100").is_err());
        assert!(parse_sizes("x4").is_err());
    }
}
