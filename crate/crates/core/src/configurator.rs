//! Cache configuration: per-layer split-ratio search and cross-layer VRAM allocation.
//!
//! [`solve_subproblem`] picks, for one layer with budget `V` and prefetch window
//! `W`, the cache size `C` (and so `θ = V / C`) that maximises the expected
//! number `m` of activated experts resident when the router fires:
//!
//! ```text
//! m(C) = K·H(C)·θ + Σ_{y ≤ Y} (1 − PH(y,C)·θ)·P(y)
//! ```
//!
//! where `Y` is the longest prefix of predicted experts whose expected load time
//! `Σ (1 − PH(y,C)·θ)·t_load` fits in `W` (and in the prefetch buffer). Exposed
//! latency and the next layer's window then follow from the overlap model with
//! `m` standing in for `α + βθ` and `K − m` for `β(1 − θ) + γ`.
//!
//! [`expert_split`] chains the sub-problem through all layers, and
//! [`vram_allocation`] moves budget in steps of `ζ·V_e` from the layer that loses
//! least to the layer that gains most until no move lowers total exposed latency.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::specs::TimingProfile;
use crate::stats::{StatsError, StatsSnapshot};

/// Slack for floating-point comparisons against the window and buffer capacity.
pub(crate) const FIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("budget must be finite and >= 0, got {0}")]
    InvalidBudget(f64),
    #[error("prefetch window must be finite and >= 0, got {0}")]
    InvalidWindow(f64),
    #[error("allocation granularity must lie in (0, 1), got {0}")]
    InvalidGranularity(f64),
    #[error("expected {expected} layer budgets, got {got}")]
    LayerCount { expected: usize, got: usize },
    #[error("invalid cache config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubproblemResult {
    /// Best cache size `C*`.
    pub cache_size: usize,
    /// Split ratio `V / C*`; 0 when the layer has no budget.
    pub theta: f64,
    /// Expected resident activated experts, in `[0, K]`.
    pub m: f64,
    /// Expected exposed loading latency, ms.
    pub exposed: f64,
    /// Prefetch window handed to the next layer, ms.
    pub window_next: f64,
    /// Prefetches that fit the window.
    pub prefetches: usize,
}

fn evaluate(
    stats: &StatsSnapshot,
    layer: usize,
    c: usize,
    theta: f64,
    window: f64,
    timing: &TimingProfile,
    buffer_experts: usize,
) -> (f64, usize) {
    let k = stats.activated() as f64;
    let mut cost = 0.0;
    let mut amount = 0.0;
    let mut prefetched = 0.0;
    let mut y_fit = 0;
    for y in 1..=stats.prediction_len() {
        let fraction = 1.0 - stats.ph(layer, y, c) * theta;
        let next_cost = cost + fraction * timing.t_load_exp;
        let next_amount = amount + fraction;
        if next_cost > window + FIT_EPS || next_amount > buffer_experts as f64 + FIT_EPS {
            break;
        }
        cost = next_cost;
        amount = next_amount;
        prefetched += fraction * stats.p(layer, y);
        y_fit = y;
    }
    let m = (k * stats.h(layer, c) * theta + prefetched).min(k);
    (m, y_fit)
}

/// Overlap-model exposed latency and next window for `m` resident experts.
pub fn exposed_and_window(m: f64, k: usize, timing: &TimingProfile) -> (f64, f64) {
    let hide = m * timing.t_comp_exp;
    let miss = (k as f64 - m) * timing.t_load_exp;
    let exposed = (miss - hide).max(0.0);
    let window_next = (timing.t_comp_moe - hide.min(miss)) + timing.t_comp_att;
    (exposed, window_next)
}

/// Smallest cache size consistent with `θ ≤ 1`.
fn min_cache_size(budget: f64, n: usize) -> usize {
    if budget <= 0.0 {
        return 1;
    }
    (libm::ceil(budget - FIT_EPS) as usize).clamp(1, n)
}

/// Exhaustive search over cache sizes for one layer.
pub fn solve_subproblem(
    stats: &StatsSnapshot,
    layer: usize,
    budget: f64,
    window: f64,
    timing: &TimingProfile,
    buffer_experts: usize,
) -> Result<SubproblemResult, ConfigError> {
    if !(budget >= 0.0) || !budget.is_finite() {
        return Err(ConfigError::InvalidBudget(budget));
    }
    if !(window >= 0.0) || !window.is_finite() {
        return Err(ConfigError::InvalidWindow(window));
    }
    let n = stats.experts();
    let scored: Vec<(usize, f64, f64, usize)> = (min_cache_size(budget, n)..=n)
        .map(|c| {
            let theta = if budget <= 0.0 { 0.0 } else { (budget / c as f64).min(1.0) };
            let (m, y) = evaluate(stats, layer, c, theta, window, timing, buffer_experts);
            (c, theta, m, y)
        })
        .collect();
    // Near-ties go to the smallest cache size.
    let best_m = scored.iter().map(|s| s.2).fold(f64::NEG_INFINITY, f64::max);
    let &(cache_size, theta, m, prefetches) = scored
        .iter()
        .find(|s| s.2 >= best_m - FIT_EPS)
        .expect("cache size range is never empty");
    let (exposed, window_next) = exposed_and_window(m, stats.activated(), timing);
    Ok(SubproblemResult { cache_size, theta, m, exposed, window_next, prefetches })
}

/// Per-layer results of one pass through the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitOutcome {
    pub layers: Vec<SubproblemResult>,
}

impl SplitOutcome {
    pub fn exposed(&self) -> Vec<f64> {
        self.layers.iter().map(|r| r.exposed).collect()
    }

    pub fn total_exposed(&self) -> f64 {
        self.layers.iter().map(|r| r.exposed).sum()
    }

    pub fn thetas(&self) -> Vec<f64> {
        self.layers.iter().map(|r| r.theta).collect()
    }

    pub fn cache_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|r| r.cache_size).collect()
    }
}

/// Solves the sub-problem layer by layer, threading the prefetch window.
pub fn expert_split(
    budgets: &[f64],
    stats: &StatsSnapshot,
    timing: &TimingProfile,
    buffer_experts: usize,
) -> Result<SplitOutcome, ConfigError> {
    if budgets.len() != stats.layers() {
        return Err(ConfigError::LayerCount { expected: stats.layers(), got: budgets.len() });
    }
    let mut window = timing.t_comp_head + timing.t_comp_att;
    let mut layers = Vec::with_capacity(budgets.len());
    for (i, &v) in budgets.iter().enumerate() {
        let r = solve_subproblem(stats, i, v, window, timing, buffer_experts)?;
        window = r.window_next;
        layers.push(r);
    }
    Ok(SplitOutcome { layers })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationResult {
    pub budgets: Vec<f64>,
    pub split: SplitOutcome,
    /// Accepted budget moves.
    pub iterations: usize,
    /// False when the iteration cap stopped the search.
    pub converged: bool,
    /// Total exposed latency before the first move and after each accepted move.
    pub history: Vec<f64>,
    /// `Σ V_i` at the same points as `history`.
    pub budget_sums: Vec<f64>,
}

impl AllocationResult {
    pub fn to_config(&self) -> CacheConfig {
        CacheConfig {
            layers: self
                .budgets
                .iter()
                .zip(&self.split.layers)
                .map(|(&budget, r)| {
                    if budget <= 0.0 {
                        LayerConfig { budget: 0.0, cache_size: 0, theta: 0.0 }
                    } else {
                        LayerConfig { budget, cache_size: r.cache_size, theta: r.theta }
                    }
                })
                .collect(),
        }
    }
}

/// Fixed-point budget allocation starting from the uniform split `V_e / L`.
pub fn vram_allocation(
    total_budget: f64,
    granularity: f64,
    stats: &StatsSnapshot,
    timing: &TimingProfile,
    buffer_experts: usize,
) -> Result<AllocationResult, ConfigError> {
    let l = stats.layers();
    let uniform = alloc::vec![total_budget / l as f64; l];
    vram_allocation_from(uniform, total_budget, granularity, stats, timing, buffer_experts)
}

/// Fixed-point budget allocation from an explicit starting point.
pub fn vram_allocation_from(
    mut budgets: Vec<f64>,
    total_budget: f64,
    granularity: f64,
    stats: &StatsSnapshot,
    timing: &TimingProfile,
    buffer_experts: usize,
) -> Result<AllocationResult, ConfigError> {
    if !(total_budget > 0.0) || !total_budget.is_finite() {
        return Err(ConfigError::InvalidBudget(total_budget));
    }
    if !(granularity > 0.0 && granularity < 1.0) {
        return Err(ConfigError::InvalidGranularity(granularity));
    }
    let l = stats.layers();
    if budgets.len() != l {
        return Err(ConfigError::LayerCount { expected: l, got: budgets.len() });
    }
    let step = granularity * total_budget;
    let cap = 10 * l * libm::ceil(1.0 / granularity) as usize;

    let mut current = expert_split(&budgets, stats, timing, buffer_experts)?;
    let mut history = alloc::vec![current.total_exposed()];
    let mut budget_sums = alloc::vec![budgets.iter().sum()];
    let mut iterations = 0;
    loop {
        if iterations >= cap {
            return Ok(AllocationResult { budgets, split: current, iterations, converged: false, history, budget_sums });
        }
        let t1 = current.exposed();
        let plus: Vec<f64> = budgets.iter().map(|v| v + step).collect();
        let minus: Vec<f64> = budgets.iter().map(|v| (v - step).max(0.0)).collect();
        let t2 = expert_split(&plus, stats, timing, buffer_experts)?.exposed();
        let t3 = expert_split(&minus, stats, timing, buffer_experts)?.exposed();

        let mut gainer = 0;
        for i in 1..l {
            if t1[i] - t2[i] > t1[gainer] - t2[gainer] {
                gainer = i;
            }
        }
        let mut donor: Option<usize> = None;
        for i in 0..l {
            if i == gainer || budgets[i] < step - FIT_EPS {
                continue;
            }
            if donor.map_or(true, |d| t3[i] - t1[i] < t3[d] - t1[d]) {
                donor = Some(i);
            }
        }
        let Some(donor) = donor else {
            return Ok(AllocationResult { budgets, split: current, iterations, converged: true, history, budget_sums });
        };

        let mut moved = budgets.clone();
        moved[gainer] += step;
        moved[donor] = (moved[donor] - step).max(0.0);
        let next = expert_split(&moved, stats, timing, buffer_experts)?;
        let delta: f64 = next.exposed().iter().zip(&t1).map(|(a, b)| a - b).sum();
        if delta >= 0.0 {
            return Ok(AllocationResult { budgets, split: current, iterations, converged: true, history, budget_sums });
        }
        budgets = moved;
        current = next;
        iterations += 1;
        history.push(current.total_exposed());
        budget_sums.push(budgets.iter().sum());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    /// Allocated budget `V_i`, in expert units.
    pub budget: f64,
    /// Cached experts `C_i`; 0 for a prefetch-only layer.
    pub cache_size: usize,
    /// Split ratio `θ_i`; 0 for a prefetch-only layer.
    pub theta: f64,
}

/// Per-layer cache configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub layers: Vec<LayerConfig>,
}

impl CacheConfig {
    pub fn total_budget(&self) -> f64 {
        self.layers.iter().map(|l| l.budget).sum()
    }

    pub fn validate(&self, total_budget: f64, experts: usize) -> Result<(), ConfigError> {
        if self.total_budget() > total_budget + FIT_EPS {
            return Err(ConfigError::InvalidConfig("budgets exceed the VRAM budget"));
        }
        for l in &self.layers {
            if l.budget < 0.0 {
                return Err(ConfigError::InvalidConfig("negative budget"));
            }
            if l.cache_size == 0 {
                if l.budget != 0.0 || l.theta != 0.0 {
                    return Err(ConfigError::InvalidConfig("empty cache needs zero budget and ratio"));
                }
                continue;
            }
            if l.cache_size > experts {
                return Err(ConfigError::InvalidConfig("cache size exceeds N"));
            }
            if !(l.theta > 0.0 && l.theta <= 1.0) {
                return Err(ConfigError::InvalidConfig("split ratio outside (0, 1]"));
            }
            let used = l.cache_size as f64 * l.theta;
            if used > l.budget + FIT_EPS || (l.theta < 1.0 && (used - l.budget).abs() > FIT_EPS) {
                return Err(ConfigError::InvalidConfig("cache size times split ratio must equal the budget"));
            }
        }
        Ok(())
    }
}
