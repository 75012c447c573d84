//! Report documents, CSV extracts and auxiliary JSON dumps.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use splitcache_core::cache::CacheSnapshot;
use splitcache_core::{AllocationResult, CacheConfig, Mode, Policy, SimReport, StatsAccumulator};

use crate::config::ResolvedConfig;

/// Bumped on any incompatible change to a JSON document below.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub schema_version: u32,
    pub config: ResolvedConfig,
    pub report: SimReport,
}

impl ReportDocument {
    pub fn new(config: ResolvedConfig, report: SimReport) -> Self {
        Self { schema_version: SCHEMA_VERSION, config, report }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsDocument {
    pub schema_version: u32,
    pub stats: StatsAccumulator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigureDocument {
    pub schema_version: u32,
    pub total_budget: f64,
    pub zeta: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Modelled total exposed latency after each accepted move, ms.
    pub history: Vec<f64>,
    pub config: CacheConfig,
}

impl ConfigureDocument {
    pub fn new(total_budget: f64, zeta: f64, res: &AllocationResult) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            total_budget,
            zeta,
            iterations: res.iterations,
            converged: res.converged,
            history: res.history.clone(),
            config: res.to_config(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotDocument {
    pub schema_version: u32,
    pub layers: Vec<CacheSnapshot>,
}

/// Pretty-printed JSON with a trailing newline. Field order follows the type
/// definitions, so equal values always give equal bytes.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()
}

#[derive(Debug, Serialize)]
struct TokenRow {
    token: usize,
    latency_ms: f64,
}

#[derive(Debug, Serialize)]
struct LayerRow {
    layer: usize,
    budget: f64,
    cache_size: usize,
    theta: f64,
    hit_rate: f64,
    prediction_accuracy: f64,
    mean_exposed_ms: f64,
}

pub fn write_token_csv<W: Write>(w: W, report: &SimReport) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for (token, &latency_ms) in report.token_latencies.iter().enumerate() {
        out.serialize(TokenRow { token, latency_ms })?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_layer_csv<W: Write>(w: W, report: &SimReport) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for (layer, s) in report.layers.iter().enumerate() {
        out.serialize(LayerRow {
            layer,
            budget: s.budget,
            cache_size: s.cache_size,
            theta: s.theta,
            hit_rate: s.hit_rate,
            prediction_accuracy: s.prediction_accuracy,
            mean_exposed_ms: s.mean_exposed,
        })?;
    }
    out.flush()?;
    Ok(())
}

/// One line of a `compare` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub mode: Mode,
    pub policy: Policy,
    /// Total budget of the resulting per-layer split, in expert units.
    pub budget: f64,
    pub tpot_mean_ms: f64,
    pub tpot_p50_ms: f64,
    pub tpot_p95_ms: f64,
    pub tpot_p99_ms: f64,
    pub ttft_ms: Option<f64>,
    pub compute_floor_ms: f64,
    pub hit_rate: f64,
    pub prefetch_loads: f64,
    pub miss_loads: f64,
}

impl CompareRow {
    pub fn new(report: &SimReport) -> Self {
        Self {
            mode: report.mode,
            policy: report.policy,
            budget: report.layers.iter().map(|l| l.budget).sum(),
            tpot_mean_ms: report.tpot_mean,
            tpot_p50_ms: report.tpot_p50,
            tpot_p95_ms: report.tpot_p95,
            tpot_p99_ms: report.tpot_p99,
            ttft_ms: report.ttft,
            compute_floor_ms: report.compute_floor,
            hit_rate: report.mean_hit_rate(),
            prefetch_loads: report.prefetch_loads,
            miss_loads: report.miss_loads,
        }
    }
}

/// One line of a `sweep-theta` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub theta: f64,
    pub budget_per_layer: f64,
    pub cache_size: usize,
    pub tpot_mean_ms: f64,
    pub tpot_p50_ms: f64,
    pub tpot_p95_ms: f64,
    pub tpot_p99_ms: f64,
    pub hit_rate: f64,
}

impl SweepRow {
    pub fn new(theta: f64, budget_per_layer: f64, report: &SimReport) -> Self {
        Self {
            theta,
            budget_per_layer,
            cache_size: report.layers.first().map_or(0, |l| l.cache_size),
            tpot_mean_ms: report.tpot_mean,
            tpot_p50_ms: report.tpot_p50,
            tpot_p95_ms: report.tpot_p95,
            tpot_p99_ms: report.tpot_p99,
            hit_rate: report.mean_hit_rate(),
        }
    }
}

pub fn write_rows<W: Write, T: Serialize>(w: W, rows: &[T]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use splitcache_core::{generate_trace, run, DeviceSpec, ModelSpec, RunOptions, TraceGenConfig};

    fn report() -> SimReport {
        let model = ModelSpec { layers: 2, ..ModelSpec::qwen_like() };
        let trace = generate_trace(&model, &TraceGenConfig { tokens: 3, ..TraceGenConfig::default() }).unwrap();
        run(&trace, &model, &DeviceSpec::a6000(), &RunOptions::default()).unwrap()
    }

    fn header(bytes: &[u8]) -> &str {
        std::str::from_utf8(bytes).unwrap().lines().next().unwrap()
    }

    #[test]
    fn csv_columns_are_fixed() {
        let r = report();
        let mut buf = Vec::new();
        write_token_csv(&mut buf, &r).unwrap();
        assert_eq!(header(&buf), "token,latency_ms");
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 4);

        let mut buf = Vec::new();
        write_layer_csv(&mut buf, &r).unwrap();
        assert_eq!(header(&buf), "layer,budget,cache_size,theta,hit_rate,prediction_accuracy,mean_exposed_ms");

        let mut buf = Vec::new();
        write_rows(&mut buf, &[CompareRow::new(&r)]).unwrap();
        assert_eq!(
            header(&buf),
            "mode,policy,budget,tpot_mean_ms,tpot_p50_ms,tpot_p95_ms,tpot_p99_ms,ttft_ms,compute_floor_ms,hit_rate,prefetch_loads,miss_loads"
        );
        assert!(std::str::from_utf8(&buf).unwrap().contains("moepic,lcp,"));
    }
}
