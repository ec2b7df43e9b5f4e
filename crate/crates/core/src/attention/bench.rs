//! Naive-vs-streaming comparison of paired attention with map replacement.

use std::time::{Duration, Instant};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{attn_amr, attn_amr_naive, max_rel_err, AttnInputs, ReplacementSpec};
use crate::alloc_meter::measure_peak;
use crate::error::{Error, Result};
use crate::rng::{Purpose, RngStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Square sizes `n = m` to time.
    pub sizes: Vec<usize>,
    pub d: usize,
    pub dv: usize,
    pub reps: usize,
    /// Fixed query count for the aux-bytes-versus-m sweep.
    pub aux_n: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![128, 256, 512, 1024, 2048, 4096],
            d: 64,
            dv: 64,
            reps: 5,
            aux_n: 256,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return Err(Error::Config("bench.sizes must be a non-empty list of positive sizes".into()));
        }
        if self.d == 0 || self.dv == 0 || self.reps == 0 || self.aux_n == 0 {
            return Err(Error::Config("bench.d, bench.dv, bench.reps and bench.aux_n must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub size: usize,
    pub naive_secs: f64,
    pub streaming_secs: f64,
    /// `naive_secs / streaming_secs`.
    pub speedup: f64,
    pub naive_aux_bytes: Option<usize>,
    pub streaming_aux_bytes: Option<usize>,
    pub max_rel_dev: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxPoint {
    pub n: usize,
    pub m: usize,
    pub naive_aux_bytes: Option<usize>,
    pub streaming_aux_bytes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
    pub aux_vs_m: Vec<AuxPoint>,
}

/// A random paired instance of size `n x m` with a replacement spec that
/// overwrites every fourth column of the second map from a shifted column of
/// the first.
pub fn bench_instance(n: usize, m: usize, d: usize, dv: usize, seed: u64) -> Result<(AttnInputs, AttnInputs, ReplacementSpec)> {
    let mut s = RngStream::new(seed, Purpose::Sampling).fork(((n as u64) << 32) | m as u64);
    let mut mat = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| s.gaussian() as f32);
    let a1 = AttnInputs::new(mat(n, d), mat(m, d), mat(m, dv))?;
    let a2 = AttnInputs::new(mat(n, d), mat(m, d), mat(m, dv))?;
    let pairs = (0..m).step_by(4).map(|j| ((j + 1) % m, j)).collect();
    Ok((a1, a2, ReplacementSpec::new(pairs)?))
}

fn output_bytes(n: usize, dv: usize) -> usize {
    2 * n * dv * std::mem::size_of::<f32>()
}

/// Peak auxiliary heap bytes (excluding the two outputs) of the naive and
/// streaming kernels on one instance.
pub fn aux_bytes(n: usize, m: usize, d: usize, dv: usize, seed: u64) -> Result<(Option<usize>, Option<usize>)> {
    let (a1, a2, spec) = bench_instance(n, m, d, dv, seed)?;
    let out = output_bytes(n, dv);
    let (r, naive) = measure_peak(|| attn_amr_naive(a1.view(), a2.view(), &spec));
    r?;
    let (r, streaming) = measure_peak(|| attn_amr(a1.view(), a2.view(), &spec));
    r?;
    Ok((naive.map(|b| b.saturating_sub(out)), streaming.map(|b| b.saturating_sub(out))))
}

fn median(mut xs: Vec<Duration>) -> f64 {
    xs.sort();
    let mid = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[mid].as_secs_f64()
    } else {
        0.5 * (xs[mid - 1].as_secs_f64() + xs[mid].as_secs_f64())
    }
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(cfg.sizes.len());
    for &size in &cfg.sizes {
        let (a1, a2, spec) = bench_instance(size, size, cfg.d, cfg.dv, cfg.seed)?;
        let mut naive_t = Vec::with_capacity(cfg.reps);
        let mut stream_t = Vec::with_capacity(cfg.reps);
        let mut dev = 0.0f64;
        for _ in 0..cfg.reps {
            let t = Instant::now();
            let (n1, n2) = attn_amr_naive(a1.view(), a2.view(), &spec)?;
            naive_t.push(t.elapsed());
            let t = Instant::now();
            let (s1, s2) = attn_amr(a1.view(), a2.view(), &spec)?;
            stream_t.push(t.elapsed());
            dev = dev.max(max_rel_err(&s1, &n1)).max(max_rel_err(&s2, &n2));
        }
        let (naive_aux, streaming_aux) = aux_bytes(size, size, cfg.d, cfg.dv, cfg.seed)?;
        let (naive_secs, streaming_secs) = (median(naive_t), median(stream_t));
        rows.push(BenchRow {
            size,
            naive_secs,
            streaming_secs,
            speedup: naive_secs / streaming_secs.max(1e-12),
            naive_aux_bytes: naive_aux,
            streaming_aux_bytes: streaming_aux,
            max_rel_dev: dev,
        });
    }
    let mut aux_vs_m = Vec::with_capacity(cfg.sizes.len());
    for &m in &cfg.sizes {
        let (naive, streaming) = aux_bytes(cfg.aux_n, m, cfg.d, cfg.dv, cfg.seed)?;
        aux_vs_m.push(AuxPoint {
            n: cfg.aux_n,
            m,
            naive_aux_bytes: naive,
            streaming_aux_bytes: streaming,
        });
    }
    Ok(BenchReport {
        config: cfg.clone(),
        rows,
        aux_vs_m,
    })
}

/// Least-squares slope of `y` against `x`.
pub fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}
