//! Wall-clock comparison of Gram construction: Sinkhorn embedding kernel
//! against the MMD baseline on clouds that share one grid of coordinates.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::embedding::embed_all;
use crate::error::{Error, Result};
use crate::kernels::{gram, mmd_gram_shared, KernelFamily, KernelSpec};
use crate::measures::DiscreteMeasure;
use crate::sinkhorn::SinkhornConfig;

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub reference_sizes: Vec<usize>,
    pub repeats: usize,
    pub sinkhorn: SinkhornConfig,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            reference_sizes: vec![6, 12],
            repeats: 5,
            sinkhorn: SinkhornConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub n_clouds: usize,
    pub cloud_size: usize,
    pub method: String,
    pub median_secs: f64,
}

/// `side × side` grid on the unit square with `side = ⌈√m⌉`, truncated to `m`
/// points.
pub fn grid_points(m: usize) -> Vec<f64> {
    let side = (m as f64).sqrt().ceil() as usize;
    let step = if side > 1 { 1.0 / (side - 1) as f64 } else { 0.0 };
    (0..m)
        .flat_map(|k| [(k % side) as f64 * step, (k / side) as f64 * step])
        .collect()
}

/// Clouds over shared grid coordinates, each with its own random weights.
pub fn grid_clouds(n: usize, m: usize, rng: &mut impl Rng) -> (Vec<f64>, Vec<Vec<f64>>) {
    let points = grid_points(m);
    let weights = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|w| w / total).collect()
        })
        .collect();
    (points, weights)
}

fn median_secs(repeats: usize, mut run: impl FnMut() -> Result<()>) -> Result<f64> {
    run()?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        run()?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Times full Gram construction for each `(n_clouds, cloud_size)`. Emits one
/// row per Sinkhorn reference size plus one MMD row, per size.
pub fn run_benchmark(sizes: &[(usize, usize)], cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.repeats == 0 {
        return Err(Error::validation("repeats must be positive"));
    }
    cfg.sinkhorn.validate()?;
    let spec = KernelSpec::new(KernelFamily::Sqexp, 1.0, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for &(n, m) in sizes {
        if n == 0 || m == 0 {
            return Err(Error::validation("benchmark sizes must be positive"));
        }
        let (points, weights) = grid_clouds(n, m, &mut rng);
        let measures = weights
            .iter()
            .map(|w| DiscreteMeasure::new(points.clone(), 2, w.clone()))
            .collect::<Result<Vec<_>>>()?;
        for &q in &cfg.reference_sizes {
            let atoms: Vec<f64> = (0..2 * q).map(|_| rng.random_range(0.0..1.0)).collect();
            let reference = DiscreteMeasure::uniform(atoms, 2)?;
            let secs = median_secs(cfg.repeats, || {
                let e = embed_all(&measures, &reference, &cfg.sinkhorn, None)?;
                gram(&e, &reference, &spec).map(drop)
            })?;
            log::info!("n={n} m={m} sinkhorn q={q}: {secs:.4}s");
            rows.push(BenchRow {
                n_clouds: n,
                cloud_size: m,
                method: format!("sinkhorn_q{q}"),
                median_secs: secs,
            });
        }
        let secs = median_secs(cfg.repeats, || {
            mmd_gram_shared(&points, 2, &weights, 0.1, 1.0).map(drop)
        })?;
        log::info!("n={n} m={m} mmd: {secs:.4}s");
        rows.push(BenchRow {
            n_clouds: n,
            cloud_size: m,
            method: "mmd".into(),
            median_secs: secs,
        });
    }
    Ok(rows)
}

/// CSV with columns `n_clouds,cloud_size,method,median_secs`.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("n_clouds,cloud_size,method,median_secs\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:?}\n",
            r.n_clouds, r.cloud_size, r.method, r.median_secs
        ));
    }
    out
}
