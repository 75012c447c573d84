//! Trace-driven model of Mixture-of-Experts inference with expert offloading.
//!
//! Experts are split vertically: a top segment of fraction `θ` stays cached in
//! VRAM, the bottom segment is prefetched into a small buffer ahead of each
//! layer. This crate holds the pure model:
//!
//! - [`specs`]: model and device descriptions, derived timing constants.
//! - [`trace`]: synthetic activation traces with long-tail and temporal locality.
//! - [`cache`]: per-layer split-expert cache with LCP, LRU, LFU and RND policies.
//! - [`stats`]: counterfactual hit-rate / prediction statistics.
//! - [`engine`]: per-layer latency and overlap model, prefill and decode simulation.
//! - [`configurator`]: per-layer split-ratio search and fixed-point VRAM allocation.
//!
//! The crate is `no_std` (with `alloc`); file formats and the CLI live in the
//! `splitcache` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod cache;
pub mod configurator;
pub mod engine;
pub mod specs;
pub mod stats;
pub mod trace;

mod sampling;

/// Index of an expert within one MoE layer, in `[0, N)`.
pub type ExpertId = usize;

pub use cache::{CacheError, ExpertStat, LayerCacheState, LcpParams, Policy};
pub use configurator::{
    expert_split, solve_subproblem, vram_allocation, AllocationResult, CacheConfig,
    ConfigError, LayerConfig, SplitOutcome, SubproblemResult,
};
pub use engine::{
    classify_activation, first_window, layer_latency, next_window, plan_prefetch, run,
    EngineError, LayerResult, Mode, PrefetchBuffer, PrefetchEntry, RunOptions, Simulation,
    SimReport,
};
pub use specs::{derive_timing, DeviceSpec, ModelSpec, SpecError, TimingProfile};
pub use stats::{StatsAccumulator, StatsError, StatsSnapshot};
pub use trace::{
    generate_trace, ActivationTrace, LayerActivation, TokenRecord, TraceError, TraceGenConfig,
    TraceHeader,
};
