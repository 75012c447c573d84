//! Per-layer split-expert cache and its replacement policies.
//!
//! The cache holds the top segment (fraction `θ`) of up to `C` experts. LCP
//! ranks experts by `μ · ρ^(ν/ω)`, where `μ` counts activations and `ν` counts
//! tokens since the last one; LRU, LFU and RND are the usual baselines.

use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;
use core::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ExpertId;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CacheError {
    #[error("expert id {id} out of range [0, {n})")]
    IdOutOfRange { id: ExpertId, n: usize },
    #[error("cache size {size} out of range [1, {n}] (budget {budget}, split ratio {theta})")]
    InvalidSize { size: i64, n: usize, budget: f64, theta: f64 },
    #[error("split ratio {0} outside (0, 1]")]
    InvalidSplitRatio(f64),
    #[error("invalid LCP parameters: {0}")]
    InvalidParams(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LcpParams {
    /// Observation window ω, in tokens.
    pub omega: u32,
    /// Recency decay ρ per window, in (0, 1).
    pub rho: f64,
}

impl Default for LcpParams {
    fn default() -> Self {
        Self { omega: 128, rho: 0.25 }
    }
}

impl LcpParams {
    pub fn validate(self) -> Result<Self, CacheError> {
        if self.omega == 0 {
            return Err(CacheError::InvalidParams("omega must be >= 1"));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(CacheError::InvalidParams("rho must lie in (0, 1)"));
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertStat {
    /// Accumulated activation count.
    pub mu: u64,
    /// Tokens since the last activation.
    pub nu: u64,
}

/// LCP cache priority `μ · ρ^(ν/ω)`.
pub fn priority(stat: ExpertStat, params: LcpParams) -> f64 {
    stat.mu as f64 * libm::pow(params.rho, stat.nu as f64 / params.omega as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Lcp,
    Lru,
    Lfu,
    Rnd,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Lcp, Policy::Lru, Policy::Lfu, Policy::Rnd];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Lcp => "lcp",
            Policy::Lru => "lru",
            Policy::Lfu => "lfu",
            Policy::Rnd => "rnd",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownPolicy;

impl fmt::Display for UnknownPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("unknown cache policy (expected lcp, lru, lfu or rnd)")
    }
}

impl FromStr for Policy {
    type Err = UnknownPolicy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lcp" => Ok(Policy::Lcp),
            "lru" => Ok(Policy::Lru),
            "lfu" => Ok(Policy::Lfu),
            "rnd" | "random" => Ok(Policy::Rnd),
            _ => Err(UnknownPolicy),
        }
    }
}

/// Serializable view of one layer's cache, for debugging dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheSnapshot {
    pub layer: usize,
    pub policy: Policy,
    pub split_ratio: f64,
    pub capacity: usize,
    pub cached: Vec<ExpertId>,
    pub stats: Vec<ExpertStat>,
}

/// Cache contents and replacement bookkeeping for one MoE layer.
#[derive(Debug, Clone)]
pub struct LayerCacheState {
    layer_index: usize,
    split_ratio: f64,
    capacity: usize,
    cached: Vec<bool>,
    cached_count: usize,
    stats: Vec<ExpertStat>,
    policy: Policy,
    lcp: LcpParams,
    /// Experts activated by the token being processed; never evicted.
    current: Vec<ExpertId>,
    gated_admission: bool,
    rng: ChaCha8Rng,
}

impl LayerCacheState {
    /// An empty cache (capacity 0) over `n` experts.
    pub fn new(layer_index: usize, n: usize, policy: Policy, lcp: LcpParams, seed: u64) -> Self {
        Self {
            layer_index,
            split_ratio: 1.0,
            capacity: 0,
            cached: alloc::vec![false; n],
            cached_count: 0,
            stats: alloc::vec![ExpertStat::default(); n],
            policy,
            lcp,
            current: Vec::new(),
            gated_admission: false,
            // Distinct stream per layer.
            rng: ChaCha8Rng::seed_from_u64(seed ^ (layer_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        }
    }

    /// Only admit a missed expert when it outranks the victim. Off by default.
    pub fn with_gated_admission(mut self, gated: bool) -> Self {
        self.gated_admission = gated;
        self
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn experts(&self) -> usize {
        self.cached.len()
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn split_ratio(&self) -> f64 {
        self.split_ratio
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.cached_count
    }

    pub fn is_empty(&self) -> bool {
        self.cached_count == 0
    }

    pub fn is_cached(&self, expert: ExpertId) -> bool {
        self.cached.get(expert).copied().unwrap_or(false)
    }

    /// Resident fraction of `expert`: `θ` if its top segment is cached, else 0.
    pub fn residency(&self, expert: ExpertId) -> f64 {
        if self.is_cached(expert) {
            self.split_ratio
        } else {
            0.0
        }
    }

    /// Whether a cached expert is resident in full (`θ = 1`).
    pub fn is_fully_resident(&self, expert: ExpertId) -> bool {
        self.is_cached(expert) && self.split_ratio >= 1.0
    }

    pub fn cached_ids(&self) -> Vec<ExpertId> {
        (0..self.cached.len()).filter(|&e| self.cached[e]).collect()
    }

    pub fn stat(&self, expert: ExpertId) -> ExpertStat {
        self.stats[expert]
    }

    pub fn stats(&self) -> &[ExpertStat] {
        &self.stats
    }

    pub fn priority_of(&self, expert: ExpertId) -> f64 {
        priority(self.stats[expert], self.lcp)
    }

    pub fn snapshot(&self) -> CacheSnapshot {
        CacheSnapshot {
            layer: self.layer_index,
            policy: self.policy,
            split_ratio: self.split_ratio,
            capacity: self.capacity,
            cached: self.cached_ids(),
            stats: self.stats.clone(),
        }
    }

    /// Policy key: the victim is the cached expert with the smallest key.
    fn key(&self, expert: ExpertId) -> f64 {
        let s = self.stats[expert];
        match self.policy {
            Policy::Lcp => priority(s, self.lcp),
            Policy::Lru => -(s.nu as f64),
            Policy::Lfu => s.mu as f64,
            Policy::Rnd => 0.0,
        }
    }

    /// Eviction order: smaller key first, then larger ν, then smaller id.
    fn eviction_order(&self, a: ExpertId, b: ExpertId) -> Ordering {
        self.key(a)
            .total_cmp(&self.key(b))
            .then_with(|| self.stats[b].nu.cmp(&self.stats[a].nu))
            .then_with(|| a.cmp(&b))
    }

    /// Retention order: larger key first, then smaller ν, then smaller id.
    fn retention_order(&self, a: ExpertId, b: ExpertId) -> Ordering {
        self.key(b)
            .total_cmp(&self.key(a))
            .then_with(|| self.stats[a].nu.cmp(&self.stats[b].nu))
            .then_with(|| a.cmp(&b))
    }

    fn check_ids(&self, ids: &[ExpertId]) -> Result<(), CacheError> {
        let n = self.cached.len();
        match ids.iter().find(|&&id| id >= n) {
            Some(&id) => Err(CacheError::IdOutOfRange { id, n }),
            None => Ok(()),
        }
    }

    /// Advances the activation counters by one token.
    ///
    /// For RND the cached set is redrawn uniformly here, so its contents stay
    /// independent of the trace.
    pub fn update_on_token(&mut self, activated: &[ExpertId]) -> Result<(), CacheError> {
        self.check_ids(activated)?;
        for (e, stat) in self.stats.iter_mut().enumerate() {
            if activated.contains(&e) {
                stat.mu += 1;
                stat.nu = 0;
            } else {
                stat.nu += 1;
            }
        }
        self.current.clear();
        self.current.extend_from_slice(activated);
        if self.policy == Policy::Rnd {
            self.resample_random();
        }
        Ok(())
    }

    fn resample_random(&mut self) {
        let n = self.cached.len();
        self.cached.iter_mut().for_each(|c| *c = false);
        let take = self.capacity.min(n);
        for e in index::sample(&mut self.rng, n, take) {
            self.cached[e] = true;
        }
        self.cached_count = take;
    }

    /// The cached, unprotected expert with the lowest policy key.
    pub fn select_victim(&mut self, protected: &[ExpertId]) -> Option<ExpertId> {
        let candidates: Vec<ExpertId> = self
            .cached_ids()
            .into_iter()
            .filter(|e| !protected.contains(e))
            .collect();
        if candidates.is_empty() {
            return None;
        }
        if self.policy == Policy::Rnd {
            return candidates.choose(&mut self.rng).copied();
        }
        candidates.into_iter().min_by(|&a, &b| self.eviction_order(a, b))
    }

    /// Inserts the top segment of a just-loaded expert, evicting if full.
    ///
    /// Returns the evicted expert. RND does not admit: its contents are redrawn
    /// every token instead.
    pub fn admit(&mut self, expert: ExpertId) -> Result<Option<ExpertId>, CacheError> {
        self.check_ids(&[expert])?;
        if self.is_cached(expert) || self.capacity == 0 || self.policy == Policy::Rnd {
            return Ok(None);
        }
        if self.cached_count < self.capacity {
            self.cached[expert] = true;
            self.cached_count += 1;
            return Ok(None);
        }
        let protected = core::mem::take(&mut self.current);
        let victim = self.select_victim(&protected);
        self.current = protected;
        let Some(victim) = victim else {
            return Ok(None);
        };
        if self.gated_admission && self.eviction_order(expert, victim) != Ordering::Greater {
            return Ok(None);
        }
        self.cached[victim] = false;
        self.cached[expert] = true;
        Ok(Some(victim))
    }

    /// Caches the top `C = round(budget / θ)` experts by policy rank, split at `θ`.
    pub fn apply_cache_config(&mut self, budget: f64, theta: f64) -> Result<(), CacheError> {
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(CacheError::InvalidSplitRatio(theta));
        }
        let n = self.cached.len();
        let size = libm::round(budget / theta);
        if !(size >= 1.0 && size <= n as f64) {
            return Err(CacheError::InvalidSize { size: size as i64, n, budget, theta });
        }
        self.set_size(size as usize, theta);
        Ok(())
    }

    /// Same as [`apply_cache_config`](Self::apply_cache_config) but with an explicit cache size.
    pub fn set_size(&mut self, size: usize, theta: f64) {
        let n = self.cached.len();
        let size = size.min(n);
        self.capacity = size;
        self.split_ratio = theta;
        if self.policy == Policy::Rnd {
            self.resample_random();
            return;
        }
        let mut order: Vec<ExpertId> = (0..n).collect();
        order.sort_by(|&a, &b| self.retention_order(a, b));
        self.cached.iter_mut().for_each(|c| *c = false);
        for &e in &order[..size] {
            self.cached[e] = true;
        }
        self.cached_count = size;
    }

    /// Drops every cached segment; the layer runs prefetch-only.
    pub fn disable(&mut self) {
        self.capacity = 0;
        self.cached.iter_mut().for_each(|c| *c = false);
        self.cached_count = 0;
    }
}

/// Replays activation sets through a cache of fixed size and returns the hit
/// rate (fraction of activated experts found cached at lookup time).
pub fn replay_hit_rate<'a>(
    n: usize,
    policy: Policy,
    lcp: LcpParams,
    capacity: usize,
    seed: u64,
    activations: impl IntoIterator<Item = &'a [ExpertId]>,
) -> Result<f64, CacheError> {
    let mut state = LayerCacheState::new(0, n, policy, lcp, seed);
    state.set_size(capacity, 1.0);
    let (mut hits, mut total) = (0u64, 0u64);
    for activated in activations {
        hits += activated.iter().filter(|&&e| state.is_cached(e)).count() as u64;
        total += activated.len() as u64;
        state.update_on_token(activated)?;
        for &e in activated {
            state.admit(e)?;
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn lcp() -> LcpParams {
        LcpParams::default()
    }

    #[test]
    fn priority_examples() {
        assert_eq!(priority(ExpertStat { mu: 10, nu: 0 }, lcp()), 10.0);
        assert_eq!(priority(ExpertStat { mu: 8, nu: 128 }, lcp()), 2.0);
        assert_eq!(priority(ExpertStat { mu: 4, nu: 256 }, lcp()), 0.25);
    }

    #[test]
    fn params_validation() {
        assert!(LcpParams { omega: 0, rho: 0.5 }.validate().is_err());
        assert!(LcpParams { omega: 4, rho: 1.0 }.validate().is_err());
        assert!(LcpParams::default().validate().is_ok());
    }

    #[test]
    fn update_counts() {
        let mut s = LayerCacheState::new(0, 4, Policy::Lcp, lcp(), 0);
        s.update_on_token(&[0, 1]).unwrap();
        let mu: Vec<u64> = s.stats().iter().map(|x| x.mu).collect();
        let nu: Vec<u64> = s.stats().iter().map(|x| x.nu).collect();
        assert_eq!(mu, vec![1, 1, 0, 0]);
        assert_eq!(nu, vec![0, 0, 1, 1]);

        let mut s = LayerCacheState::new(0, 4, Policy::Lcp, lcp(), 0);
        s.update_on_token(&[0]).unwrap();
        s.update_on_token(&[0]).unwrap();
        assert_eq!(s.stat(0), ExpertStat { mu: 2, nu: 0 });
        assert_eq!(s.stat(1).nu, 2);
        assert_eq!(
            s.update_on_token(&[4]),
            Err(CacheError::IdOutOfRange { id: 4, n: 4 })
        );
    }

    #[test]
    fn priority_decays_by_rho_per_window() {
        let mut s = LayerCacheState::new(0, 4, Policy::Lcp, lcp(), 0);
        s.update_on_token(&[2]).unwrap();
        s.update_on_token(&[2]).unwrap();
        let fresh = s.priority_of(2);
        for _ in 0..128 {
            s.update_on_token(&[0]).unwrap();
        }
        // Direct evaluation: 2 * 0.25^(128/128).
        assert_eq!(s.priority_of(2), fresh * 0.25);
    }

    fn state_with(cached: &[ExpertId], stats: &[(ExpertId, u64, u64)]) -> LayerCacheState {
        let mut s = LayerCacheState::new(0, 8, Policy::Lcp, lcp(), 0);
        s.capacity = cached.len();
        for &e in cached {
            s.cached[e] = true;
        }
        s.cached_count = cached.len();
        for &(e, mu, nu) in stats {
            s.stats[e] = ExpertStat { mu, nu };
        }
        s
    }

    #[test]
    fn victim_is_strict_minimum() {
        // Priorities 0.5 and 3.0 at nu = 0.
        let mut s = LayerCacheState::new(0, 8, Policy::Lcp, LcpParams { omega: 1, rho: 0.5 }, 0);
        s.capacity = 2;
        s.cached[2] = true;
        s.cached[5] = true;
        s.cached_count = 2;
        s.stats[2] = ExpertStat { mu: 1, nu: 1 };
        s.stats[5] = ExpertStat { mu: 3, nu: 0 };
        assert_eq!(s.priority_of(2), 0.5);
        assert_eq!(s.select_victim(&[]), Some(2));
        assert_eq!(s.select_victim(&[2, 5]), None);
    }

    #[test]
    fn tie_break_prefers_larger_nu_then_smaller_id() {
        // Exhaustive pairwise check over small (mu, nu) grids where priorities tie.
        for nu_a in 0..4u64 {
            for nu_b in 0..4u64 {
                let mut s = state_with(&[2, 5], &[(2, 0, nu_a), (5, 0, nu_b)]);
                let expect = if nu_a > nu_b {
                    2
                } else if nu_b > nu_a {
                    5
                } else {
                    2
                };
                assert_eq!(s.select_victim(&[]), Some(expect), "nu {nu_a} vs {nu_b}");
            }
        }
        let mut s = state_with(&[2, 5], &[(2, 0, 10), (5, 0, 3)]);
        assert_eq!(s.select_victim(&[]), Some(2));
    }

    #[test]
    fn admit_fills_then_evicts_unprotected() {
        let mut s = LayerCacheState::new(0, 6, Policy::Lfu, lcp(), 0);
        s.set_size(2, 1.0);
        assert_eq!(s.cached_ids(), vec![0, 1]);
        s.update_on_token(&[0, 3]).unwrap();
        // 0 is protected by the current token, 1 is the victim.
        assert_eq!(s.admit(3).unwrap(), Some(1));
        assert_eq!(s.cached_ids(), vec![0, 3]);
        assert!(s.len() <= s.capacity());
        // Both cached experts protected: nothing admitted.
        s.update_on_token(&[0, 3, 4]).unwrap();
        assert_eq!(s.admit(4).unwrap(), None);
        assert_eq!(s.cached_ids(), vec![0, 3]);
    }

    #[test]
    fn apply_config_examples() {
        let mut s = LayerCacheState::new(0, 60, Policy::Lcp, lcp(), 0);
        for e in 20..30 {
            s.stats[e].mu = 100 + e as u64;
        }
        s.apply_cache_config(5.0, 0.5).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(s.cached_ids(), (20..30).collect::<Vec<_>>());
        assert_eq!(s.residency(20), 0.5);

        let mut s = LayerCacheState::new(0, 60, Policy::Lcp, lcp(), 0);
        s.apply_cache_config(7.0, 1.0).unwrap();
        assert_eq!(s.cached_ids(), (0..7).collect::<Vec<_>>());
        assert!(s.is_fully_resident(3));

        assert!(matches!(s.apply_cache_config(0.2, 1.0), Err(CacheError::InvalidSize { .. })));
        assert!(matches!(s.apply_cache_config(40.0, 0.5), Err(CacheError::InvalidSize { .. })));
        assert!(matches!(s.apply_cache_config(4.0, 0.0), Err(CacheError::InvalidSplitRatio(_))));
    }

    #[test]
    fn rnd_is_trace_oblivious() {
        // Always activate the same experts: a random cache still hits C/N.
        let acts: Vec<Vec<ExpertId>> = (0..50_000).map(|_| vec![0usize]).collect();
        let hr = replay_hit_rate(10, Policy::Rnd, lcp(), 3, 9, acts.iter().map(|v| v.as_slice()))
            .unwrap();
        assert!((hr - 0.3).abs() < 0.02, "{hr}");
    }

    #[test]
    fn policy_names_roundtrip() {
        for p in Policy::ALL {
            assert_eq!(p.name().parse::<Policy>(), Ok(p));
        }
        assert!("mru".parse::<Policy>().is_err());
    }
}
