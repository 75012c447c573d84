//! Token-by-token, layer-by-layer latency simulation.
//!
//! Per layer the model is closed-form. Activated experts are split into
//! `α` fully resident (whole expert cached, or top cached and bottom
//! prefetched, or whole expert prefetched), `β` with only the top segment
//! resident and `γ` fully offloaded. Then
//!
//! ```text
//! t_hide  = (α + β·θ) · t_comp_exp
//! t_miss  = (β·(1 − θ) + γ) · t_load_exp
//! exposed = max(0, t_miss − t_hide)
//! window' = (t_comp_moe − min(t_hide, t_miss)) + t_comp_att
//! ```
//!
//! and the next layer's prefetches are planned greedily inside `window'`.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cache::{CacheError, CacheSnapshot, LayerCacheState, LcpParams, Policy};
use crate::configurator::{vram_allocation, ConfigError, FIT_EPS};
use crate::specs::{derive_timing, DeviceSpec, ModelSpec, SpecError, TimingProfile};
use crate::stats::{StatsAccumulator, StatsError};
use crate::trace::{validate_record, ActivationTrace, TokenRecord, TraceError};
use crate::ExpertId;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("prefill needs at least one prompt token")]
    EmptyPrompt,
    #[error("invalid run options: {0}")]
    Options(String),
}

/// One planned prefetch: `fraction` of the expert is loaded at `cost` ms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefetchEntry {
    pub expert: ExpertId,
    pub fraction: f64,
    pub cost: f64,
}

/// Prefetched segments for the upcoming layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrefetchBuffer {
    pub entries: Vec<PrefetchEntry>,
    /// Capacity in complete-expert units.
    pub capacity: usize,
}

impl PrefetchBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { entries: Vec::new(), capacity }
    }

    pub fn get(&self, expert: ExpertId) -> Option<&PrefetchEntry> {
        self.entries.iter().find(|e| e.expert == expert)
    }

    pub fn total_fraction(&self) -> f64 {
        self.entries.iter().map(|e| e.fraction).sum()
    }

    pub fn total_cost(&self) -> f64 {
        self.entries.iter().map(|e| e.cost).sum()
    }
}

/// Greedy prefix of `ranking` that fits both the time window and the buffer.
///
/// An expert whose top segment is cached costs `(1 − θ)·t_load`; otherwise the
/// whole expert is loaded. Experts already fully resident are skipped.
pub fn plan_prefetch(
    ranking: &[ExpertId],
    cache: &LayerCacheState,
    window: f64,
    timing: &TimingProfile,
    capacity: usize,
) -> Vec<PrefetchEntry> {
    let mut plan = Vec::new();
    if window <= 0.0 {
        return plan;
    }
    let (mut cost, mut fraction) = (0.0, 0.0);
    for &expert in ranking {
        if cache.is_fully_resident(expert) {
            continue;
        }
        let f = 1.0 - cache.residency(expert);
        let c = f * timing.t_load_exp;
        if cost + c > window + FIT_EPS || fraction + f > capacity as f64 + FIT_EPS {
            break;
        }
        cost += c;
        fraction += f;
        plan.push(PrefetchEntry { expert, fraction: f, cost: c });
    }
    plan
}

/// Splits the activated experts into `(α, β, γ)`.
pub fn classify_activation(
    activated: &[ExpertId],
    cache: &LayerCacheState,
    buffer: &PrefetchBuffer,
) -> (usize, usize, usize) {
    let (mut alpha, mut beta, mut gamma) = (0, 0, 0);
    for &e in activated {
        let buffered = buffer.get(e);
        if cache.is_fully_resident(e) {
            alpha += 1;
        } else if cache.is_cached(e) {
            if buffered.is_some() {
                alpha += 1;
            } else {
                beta += 1;
            }
        } else if buffered.is_some_and(|b| b.fraction >= 1.0) {
            alpha += 1;
        } else {
            gamma += 1;
        }
    }
    (alpha, beta, gamma)
}

/// `(t_hide, t_miss, exposed)` for one layer.
pub fn layer_latency(alpha: usize, beta: usize, gamma: usize, theta: f64, timing: &TimingProfile) -> (f64, f64, f64) {
    let t_hide = (alpha as f64 + beta as f64 * theta) * timing.t_comp_exp;
    let t_miss = (beta as f64 * (1.0 - theta) + gamma as f64) * timing.t_load_exp;
    (t_hide, t_miss, (t_miss - t_hide).max(0.0))
}

pub fn next_window(t_hide: f64, t_miss: f64, timing: &TimingProfile) -> f64 {
    (timing.t_comp_moe - t_hide.min(t_miss)) + timing.t_comp_att
}

/// Window for the first layer: the previous token's head plus the first attention.
pub fn first_window(timing: &TimingProfile) -> f64 {
    timing.t_comp_head + timing.t_comp_att
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerResult {
    pub alpha: usize,
    pub beta: usize,
    pub gamma: usize,
    /// Split ratio in force when the layer ran.
    pub theta: f64,
    pub t_hide: f64,
    pub t_miss: f64,
    pub exposed: f64,
    pub window_next: f64,
    /// Activated experts whose top segment was cached.
    pub hits: usize,
    /// Expert units prefetched into this layer's buffer.
    pub prefetched: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Split experts, speculative prefetch and periodic reconfiguration.
    Moepic,
    /// Whole experts cached, no prefetch.
    CacheOnly,
    /// No cache, prefetch only.
    PrefetchOnly,
    /// Whole experts cached plus prefetch.
    FullCachePrefetch,
    /// Uniform budget, fixed split ratio, prefetch, no reconfiguration.
    FixedSplit,
}

impl Mode {
    pub const ALL: [Mode; 5] =
        [Mode::Moepic, Mode::CacheOnly, Mode::PrefetchOnly, Mode::FullCachePrefetch, Mode::FixedSplit];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Moepic => "moepic",
            Mode::CacheOnly => "cache_only",
            Mode::PrefetchOnly => "prefetch_only",
            Mode::FullCachePrefetch => "full_cache_prefetch",
            Mode::FixedSplit => "fixed_split",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s || m.name().replace('_', "-") == s)
            .ok_or_else(|| alloc::format!("unknown mode `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunOptions {
    pub mode: Mode,
    pub policy: Policy,
    pub lcp: LcpParams,
    /// Allocation granularity ζ.
    pub zeta: f64,
    /// Decode tokens between reconfigurations τ.
    pub tau: usize,
    /// Split ratio for `fixed_split`, and the initial ratio for `moepic`.
    pub theta: f64,
    /// Per-layer budget in expert units; defaults to `V_e / L`.
    pub budget_per_layer: Option<f64>,
    /// Pins the split ratio in `moepic` mode.
    pub force_theta: Option<f64>,
    /// Overrides whether `moepic` runs the configurator.
    pub configurator: Option<bool>,
    /// Prefetch for the very first token's first layer using its ranking.
    pub cold_start_prefetch: bool,
    /// Compute multiplier for the prompt batch.
    pub prefill_scale: f64,
    /// Only admit a missed expert if it outranks the victim.
    pub gated_admission: bool,
    pub seed: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Moepic,
            policy: Policy::Lcp,
            lcp: LcpParams::default(),
            zeta: 0.01,
            tau: 5000,
            theta: 0.5,
            budget_per_layer: None,
            force_theta: None,
            configurator: None,
            cold_start_prefetch: true,
            prefill_scale: 1.0,
            gated_admission: false,
            seed: 0,
        }
    }
}

impl RunOptions {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::Options(m.into()));
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return bad("theta must lie in (0, 1]");
        }
        if let Some(t) = self.force_theta {
            if !(t > 0.0 && t <= 1.0) {
                return bad("force_theta must lie in (0, 1]");
            }
        }
        if !(self.zeta > 0.0 && self.zeta < 1.0) {
            return bad("zeta must lie in (0, 1)");
        }
        if self.tau == 0 {
            return bad("tau must be >= 1");
        }
        if let Some(b) = self.budget_per_layer {
            if !(b >= 0.0) || !b.is_finite() {
                return bad("budget_per_layer must be finite and >= 0");
            }
        }
        if !(self.prefill_scale > 0.0) || !self.prefill_scale.is_finite() {
            return bad("prefill_scale must be finite and > 0");
        }
        self.lcp.validate()?;
        Ok(())
    }
}

/// One configurator invocation during a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconfiguration {
    pub after_token: usize,
    pub budgets: Vec<f64>,
    pub thetas: Vec<f64>,
    pub cache_sizes: Vec<usize>,
    pub predicted_exposed: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub mean_exposed: f64,
    pub hit_rate: f64,
    pub prediction_accuracy: f64,
    pub budget: f64,
    pub theta: f64,
    pub cache_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub mode: Mode,
    pub policy: Policy,
    pub decode_tokens: usize,
    pub prompt_tokens: usize,
    /// Prefill latency, ms; `None` without prompt tokens.
    pub ttft: Option<f64>,
    pub tpot_mean: f64,
    pub tpot_p50: f64,
    pub tpot_p95: f64,
    pub tpot_p99: f64,
    pub compute_floor: f64,
    /// Set when one expert loads slower than it computes.
    pub load_bound: bool,
    pub timing: TimingProfile,
    pub layers: Vec<LayerSummary>,
    /// Expert units moved by prefetch.
    pub prefetch_loads: f64,
    /// Expert units loaded on demand after routing.
    pub miss_loads: f64,
    pub reconfigurations: Vec<Reconfiguration>,
    /// Per-token decode latency, ms.
    pub token_latencies: Vec<f64>,
}

impl SimReport {
    pub fn mean_hit_rate(&self) -> f64 {
        self.layers.iter().map(|l| l.hit_rate).sum::<f64>() / self.layers.len() as f64
    }
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], pct: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = libm::ceil(pct / 100.0 * sorted.len() as f64) as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, Default)]
struct LayerTotals {
    exposed: f64,
    hits: u64,
    activations: u64,
    predicted_hits: u64,
}

/// Mutable state of one run.
#[derive(Debug, Clone)]
pub struct Simulation {
    model: ModelSpec,
    timing: TimingProfile,
    opts: RunOptions,
    caches: Vec<LayerCacheState>,
    stats: StatsAccumulator,
    budgets: Vec<f64>,
    total_budget: f64,
    prefetch: bool,
    reconfigure: bool,
    buffer: PrefetchBuffer,
    decoded: usize,
    totals: Vec<LayerTotals>,
    latencies: Vec<f64>,
    prefetch_loads: f64,
    miss_loads: f64,
    reconfigurations: Vec<Reconfiguration>,
    ttft: Option<f64>,
    prompt_tokens: usize,
}

impl Simulation {
    pub fn new(model: &ModelSpec, device: &DeviceSpec, prediction_len: usize, opts: RunOptions) -> Result<Self, EngineError> {
        let model = model.clone().validate()?;
        let timing = derive_timing(&model, device)?;
        opts.validate()?;
        let l = model.layers;
        let n = model.experts_per_layer;
        let per_layer = opts.budget_per_layer.unwrap_or(device.vram_budget_experts / l as f64);

        let (budget, theta, prefetch, reconfigure) = match opts.mode {
            Mode::Moepic => (
                per_layer,
                opts.force_theta.unwrap_or(opts.theta),
                true,
                opts.configurator.unwrap_or(opts.force_theta.is_none()),
            ),
            Mode::CacheOnly => (per_layer, 1.0, false, false),
            Mode::PrefetchOnly => (0.0, 1.0, true, false),
            Mode::FullCachePrefetch => (per_layer, 1.0, true, false),
            Mode::FixedSplit => (per_layer, opts.theta, true, false),
        };

        let mut caches: Vec<LayerCacheState> = (0..l)
            .map(|i| LayerCacheState::new(i, n, opts.policy, opts.lcp, opts.seed).with_gated_admission(opts.gated_admission))
            .collect();
        for cache in &mut caches {
            configure_layer(cache, budget, theta);
        }

        Ok(Self {
            stats: StatsAccumulator::new(l, n, model.activated_per_token, prediction_len),
            buffer: PrefetchBuffer::new(model.buffer_experts),
            budgets: alloc::vec![budget; l],
            total_budget: per_layer * l as f64,
            totals: alloc::vec![LayerTotals::default(); l],
            model,
            timing,
            opts,
            caches,
            prefetch,
            reconfigure,
            decoded: 0,
            latencies: Vec::new(),
            prefetch_loads: 0.0,
            miss_loads: 0.0,
            reconfigurations: Vec::new(),
            ttft: None,
            prompt_tokens: 0,
        })
    }

    pub fn timing(&self) -> &TimingProfile {
        &self.timing
    }

    pub fn caches(&self) -> &[LayerCacheState] {
        &self.caches
    }

    pub fn cache_snapshots(&self) -> Vec<CacheSnapshot> {
        self.caches.iter().map(|c| c.snapshot()).collect()
    }

    pub fn stats(&self) -> &StatsAccumulator {
        &self.stats
    }

    pub fn budgets(&self) -> &[f64] {
        &self.budgets
    }

    fn check_record(&self, rec: &TokenRecord) -> Result<(), EngineError> {
        let header = crate::trace::TraceHeader {
            layers: self.model.layers,
            experts: self.model.experts_per_layer,
            activated: self.model.activated_per_token,
            prediction_len: rec.per_layer.first().map_or(0, |a| a.predicted.len()),
            prompt_tokens: 0,
            seed: None,
            generator: None,
        };
        validate_record(&header, rec)?;
        Ok(())
    }

    /// Prefill latency for the prompt; also warms caches and statistics.
    pub fn simulate_prefill(&mut self, prompt: &[TokenRecord]) -> Result<f64, EngineError> {
        if prompt.is_empty() {
            return Err(EngineError::EmptyPrompt);
        }
        for rec in prompt {
            self.check_record(rec)?;
        }
        let t = self.timing;
        let s = self.opts.prefill_scale;
        let mut ttft = 0.0;
        for (i, cache) in self.caches.iter().enumerate() {
            let mut union = alloc::vec![false; self.model.experts_per_layer];
            for rec in prompt {
                for &e in &rec.per_layer[i].activated {
                    union[e] = true;
                }
            }
            let theta = cache.split_ratio();
            let (mut size, mut resident) = (0usize, 0usize);
            for (e, _) in union.iter().enumerate().filter(|(_, &u)| u) {
                size += 1;
                if cache.is_cached(e) {
                    resident += 1;
                }
            }
            let missing_units = (size - resident) as f64 + resident as f64 * (1.0 - theta);
            let missing_load = missing_units * t.t_load_exp;
            let resident_compute = resident as f64 * theta * t.t_comp_exp;
            ttft += s * (t.t_comp_att + t.t_comp_moe) + (missing_load - s * resident_compute).max(0.0);
        }
        ttft += s * t.t_comp_head;

        for rec in prompt {
            for (i, act) in rec.per_layer.iter().enumerate() {
                let cache = &mut self.caches[i];
                cache.update_on_token(&act.activated)?;
                for &e in &act.activated {
                    if !cache.is_cached(e) {
                        cache.admit(e)?;
                    }
                }
                self.stats.observe(i, &act.activated, &act.predicted);
            }
        }
        self.prompt_tokens += prompt.len();
        self.ttft = Some(ttft);
        Ok(ttft)
    }

    fn plan(&self, layer: usize, ranking: &[ExpertId], window: f64) -> PrefetchBuffer {
        let entries = plan_prefetch(ranking, &self.caches[layer], window, &self.timing, self.model.buffer_experts);
        PrefetchBuffer { entries, capacity: self.model.buffer_experts }
    }

    /// Runs the configurator on current statistics and applies the result.
    /// A run without expert budget has nothing to allocate and is left as is.
    pub fn reconfigure_now(&mut self) -> Result<(), EngineError> {
        if self.total_budget <= 0.0 {
            return Ok(());
        }
        let snapshot = self.stats.snapshot()?;
        let result = vram_allocation(
            self.total_budget,
            self.opts.zeta,
            &snapshot,
            &self.timing,
            self.model.buffer_experts,
        )?;
        let config = result.to_config();
        for (cache, layer) in self.caches.iter_mut().zip(&config.layers) {
            if layer.cache_size == 0 {
                cache.disable();
            } else {
                cache.set_size(layer.cache_size, layer.theta);
            }
        }
        self.budgets.clone_from(&result.budgets);
        self.reconfigurations.push(Reconfiguration {
            after_token: self.decoded,
            budgets: result.budgets.clone(),
            thetas: result.split.thetas(),
            cache_sizes: result.split.cache_sizes(),
            predicted_exposed: result.split.total_exposed(),
            iterations: result.iterations,
            converged: result.converged,
        });
        Ok(())
    }

    /// Simulates one decode token; returns its latency and per-layer results.
    pub fn decode_token(&mut self, rec: &TokenRecord) -> Result<(f64, Vec<LayerResult>), EngineError> {
        self.check_record(rec)?;
        if self.reconfigure && self.decoded > 0 && self.decoded % self.opts.tau == 0 {
            self.reconfigure_now()?;
        }
        let t = self.timing;
        let l = self.model.layers;
        let k = self.model.activated_per_token;

        self.buffer = if self.prefetch && (self.decoded > 0 || self.prompt_tokens > 0 || self.opts.cold_start_prefetch) {
            self.plan(0, &rec.per_layer[0].predicted, first_window(&t))
        } else {
            PrefetchBuffer::new(self.model.buffer_experts)
        };

        let mut latency = 0.0;
        let mut results = Vec::with_capacity(l);
        for i in 0..l {
            let act = &rec.per_layer[i];
            let cache = &self.caches[i];
            let theta = cache.split_ratio();
            let (alpha, beta, gamma) = classify_activation(&act.activated, cache, &self.buffer);
            let hits = act.activated.iter().filter(|&&e| cache.is_cached(e)).count();
            let (t_hide, t_miss, exposed) = layer_latency(alpha, beta, gamma, theta, &t);
            latency += t.t_comp_att + t.t_comp_moe + exposed;

            let prefetched = self.buffer.total_fraction();
            self.prefetch_loads += prefetched;
            self.miss_loads += beta as f64 * (1.0 - theta) + gamma as f64;

            let cache = &mut self.caches[i];
            cache.update_on_token(&act.activated)?;
            for &e in &act.activated {
                if !cache.is_cached(e) {
                    cache.admit(e)?;
                }
            }
            self.stats.observe(i, &act.activated, &act.predicted);

            let totals = &mut self.totals[i];
            totals.exposed += exposed;
            totals.hits += hits as u64;
            totals.activations += k as u64;
            totals.predicted_hits += act.top_k_hits(k) as u64;

            let window_next = next_window(t_hide, t_miss, &t);
            self.buffer = if self.prefetch && i + 1 < l {
                self.plan(i + 1, &rec.per_layer[i + 1].predicted, window_next)
            } else {
                PrefetchBuffer::new(self.model.buffer_experts)
            };
            results.push(LayerResult { alpha, beta, gamma, theta, t_hide, t_miss, exposed, window_next, hits, prefetched });
        }
        latency += t.t_comp_head;
        self.latencies.push(latency);
        self.decoded += 1;
        Ok((latency, results))
    }

    pub fn report(&self) -> SimReport {
        let mut sorted = self.latencies.clone();
        sorted.sort_by(f64::total_cmp);
        let n = self.latencies.len().max(1) as f64;
        let layers = self
            .totals
            .iter()
            .zip(&self.caches)
            .zip(&self.budgets)
            .map(|((tot, cache), &budget)| LayerSummary {
                mean_exposed: tot.exposed / n,
                hit_rate: if tot.activations == 0 { 0.0 } else { tot.hits as f64 / tot.activations as f64 },
                prediction_accuracy: if tot.activations == 0 {
                    0.0
                } else {
                    tot.predicted_hits as f64 / tot.activations as f64
                },
                budget,
                theta: if cache.capacity() == 0 { 0.0 } else { cache.split_ratio() },
                cache_size: cache.capacity(),
            })
            .collect();
        SimReport {
            mode: self.opts.mode,
            policy: self.opts.policy,
            decode_tokens: self.decoded,
            prompt_tokens: self.prompt_tokens,
            ttft: self.ttft,
            tpot_mean: self.latencies.iter().sum::<f64>() / n,
            tpot_p50: percentile(&sorted, 50.0),
            tpot_p95: percentile(&sorted, 95.0),
            tpot_p99: percentile(&sorted, 99.0),
            compute_floor: self.timing.compute_floor(self.model.layers),
            load_bound: self.timing.is_load_bound(),
            timing: self.timing,
            layers,
            prefetch_loads: self.prefetch_loads,
            miss_loads: self.miss_loads,
            reconfigurations: self.reconfigurations.clone(),
            token_latencies: self.latencies.clone(),
        }
    }
}

/// Sizes a layer's cache for budget `budget` at split ratio `theta`; a zero
/// budget leaves the layer prefetch-only. The size is capped at N, leaving any
/// excess budget unused.
fn configure_layer(cache: &mut LayerCacheState, budget: f64, theta: f64) {
    if budget <= 0.0 {
        cache.disable();
        return;
    }
    let n = cache.experts();
    let size = (libm::round(budget / theta) as usize).clamp(1, n);
    cache.set_size(size, theta);
}

/// Prefill (if the trace has prompt tokens) followed by decode of every
/// remaining token.
pub fn run(trace: &ActivationTrace, model: &ModelSpec, device: &DeviceSpec, opts: &RunOptions) -> Result<SimReport, EngineError> {
    trace.check_model(model)?;
    if trace.decode().is_empty() {
        return Err(TraceError::ZeroTokens.into());
    }
    let mut sim = Simulation::new(model, device, trace.header.prediction_len, opts.clone())?;
    if !trace.prompt().is_empty() {
        sim.simulate_prefill(trace.prompt())?;
    }
    for rec in trace.decode() {
        sim.decode_token(rec)?;
    }
    Ok(sim.report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn timing() -> TimingProfile {
        TimingProfile { t_load_exp: 40.0, t_comp_exp: 10.0, t_comp_att: 15.0, t_comp_moe: 40.0, t_comp_head: 5.0 }
    }

    fn empty_cache(n: usize) -> LayerCacheState {
        LayerCacheState::new(0, n, Policy::Lcp, LcpParams::default(), 0)
    }

    #[test]
    fn plan_examples() {
        let cache = empty_cache(10);
        assert!(plan_prefetch(&[7, 3, 9], &cache, 0.0, &timing(), 4).is_empty());
        let plan = plan_prefetch(&[7, 3, 9], &cache, 100.0, &timing(), 4);
        assert_eq!(
            plan,
            vec![
                PrefetchEntry { expert: 7, fraction: 1.0, cost: 40.0 },
                PrefetchEntry { expert: 3, fraction: 1.0, cost: 40.0 },
            ]
        );

        let mut cache = empty_cache(10);
        cache.update_on_token(&[7]).unwrap();
        cache.set_size(1, 0.5);
        assert_eq!(cache.cached_ids(), vec![7]);
        let plan = plan_prefetch(&[7, 3], &cache, 60.0, &timing(), 4);
        assert_eq!(
            plan,
            vec![
                PrefetchEntry { expert: 7, fraction: 0.5, cost: 20.0 },
                PrefetchEntry { expert: 3, fraction: 1.0, cost: 40.0 },
            ]
        );
    }

    #[test]
    fn plan_respects_buffer() {
        let cache = empty_cache(10);
        let plan = plan_prefetch(&[1, 2, 3, 4, 5], &cache, 1e9, &timing(), 2);
        assert_eq!(plan.len(), 2);
    }

    #[test]
    fn classify_examples() {
        let mut cache = empty_cache(10);
        // Cache experts 1 and 2 at θ = 0.5.
        cache.update_on_token(&[1, 2]).unwrap();
        cache.set_size(2, 0.5);
        assert_eq!(cache.cached_ids(), vec![1, 2]);

        let mut buffer = PrefetchBuffer::new(4);
        assert_eq!(classify_activation(&[5, 6, 7, 8], &cache, &buffer), (0, 0, 4));
        buffer.entries = [5, 6, 7, 8]
            .iter()
            .map(|&e| PrefetchEntry { expert: e, fraction: 1.0, cost: 40.0 })
            .collect();
        assert_eq!(classify_activation(&[5, 6, 7, 8], &cache, &buffer), (4, 0, 0));
        buffer.entries = vec![PrefetchEntry { expert: 0, fraction: 1.0, cost: 40.0 }];
        assert_eq!(classify_activation(&[0, 1, 2, 3], &cache, &buffer), (1, 2, 1));
    }

    #[test]
    fn latency_examples() {
        let t = timing();
        assert_eq!(layer_latency(4, 0, 0, 0.5, &t), (40.0, 0.0, 0.0));
        assert_eq!(layer_latency(0, 0, 4, 0.5, &t), (0.0, 160.0, 160.0));
        assert_eq!(layer_latency(1, 2, 1, 0.5, &t), (20.0, 80.0, 60.0));
    }

    #[test]
    fn window_examples() {
        let t = timing();
        assert_eq!(next_window(0.0, 0.0, &t), 55.0);
        assert_eq!(next_window(20.0, 80.0, &t), 35.0);
        assert_eq!(next_window(40.0, 50.0, &t), t.t_comp_att);
        assert_eq!(first_window(&t), 20.0);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 50.0);
        assert_eq!(percentile(&v, 95.0), 95.0);
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert_eq!(percentile(&[3.0], 99.0), 3.0);
    }

    #[test]
    fn mode_names_parse() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>(), Ok(m));
        }
        assert_eq!("cache-only".parse::<Mode>(), Ok(Mode::CacheOnly));
        assert!("hybrid".parse::<Mode>().is_err());
    }

    #[test]
    fn options_validation() {
        let mut o = RunOptions::default();
        o.validate().unwrap();
        o.theta = 0.0;
        assert!(o.validate().is_err());
        let o = RunOptions { tau: 0, ..RunOptions::default() };
        assert!(o.validate().is_err());
    }
}
