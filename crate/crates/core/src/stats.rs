//! Counterfactual cache and prediction statistics.
//!
//! For every layer the accumulator tracks, over the `q` tokens seen so far:
//!
//! - `H(C)`: fraction of activated experts that a size-`C` cache would have held,
//! - `P(y)`: fraction of tokens whose `y`-th predicted expert was activated,
//! - `PH(y, C)`: fraction of tokens whose `y`-th predicted expert a size-`C`
//!   cache would have held.
//!
//! The counterfactual cache of size `C` is the set of `C` experts with the highest
//! running activation count (ties to the smaller id), evaluated on counts before
//! the current token. Recording the frequency rank of each looked-up expert gives
//! all cache sizes at once: `H(C)` is a prefix sum of the rank histogram.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::ExpertId;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("empty accumulator")]
    Empty,
    #[error("layer {0} out of range")]
    Layer(usize),
    #[error("cache size {c} out of range [1, {n}]")]
    CacheSize { c: usize, n: usize },
    #[error("prediction rank {y} out of range [1, {p}]")]
    Rank { y: usize, p: usize },
    #[error("malformed statistics: {0}")]
    Malformed(&'static str),
}

/// Raw counters of one layer; the serialized form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCounts {
    pub q: u64,
    pub freq: Vec<u64>,
    /// `rank_hits[r]`: activated experts whose frequency rank was `r + 1`.
    pub rank_hits: Vec<u64>,
    /// `pred_hits[y]`: tokens whose `(y + 1)`-th predicted expert was activated.
    pub pred_hits: Vec<u64>,
    /// `pred_ranks[y][r]`: tokens whose `(y + 1)`-th predicted expert had frequency rank `r + 1`.
    pub pred_ranks: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "LayerCounts", into = "LayerCounts")]
struct LayerStats {
    counts: LayerCounts,
    /// Experts sorted by (count desc, id asc).
    order: Vec<ExpertId>,
    rank_of: Vec<usize>,
}

impl From<LayerCounts> for LayerStats {
    fn from(counts: LayerCounts) -> Self {
        let n = counts.freq.len();
        let mut order: Vec<ExpertId> = (0..n).collect();
        order.sort_by(|&a, &b| counts.freq[b].cmp(&counts.freq[a]).then(a.cmp(&b)));
        let mut rank_of = alloc::vec![0; n];
        for (r, &e) in order.iter().enumerate() {
            rank_of[e] = r;
        }
        Self { counts, order, rank_of }
    }
}

impl From<LayerStats> for LayerCounts {
    fn from(s: LayerStats) -> Self {
        s.counts
    }
}

impl LayerStats {
    fn new(n: usize, p: usize) -> Self {
        LayerCounts {
            q: 0,
            freq: alloc::vec![0; n],
            rank_hits: alloc::vec![0; n],
            pred_hits: alloc::vec![0; p],
            pred_ranks: alloc::vec![alloc::vec![0; n]; p],
        }
        .into()
    }

    fn bump(&mut self, e: ExpertId) {
        let freq = &mut self.counts.freq;
        freq[e] += 1;
        let mut pos = self.rank_of[e];
        while pos > 0 {
            let ahead = self.order[pos - 1];
            if freq[ahead] > freq[e] || (freq[ahead] == freq[e] && ahead < e) {
                break;
            }
            self.order[pos] = ahead;
            self.rank_of[ahead] = pos;
            pos -= 1;
        }
        self.order[pos] = e;
        self.rank_of[e] = pos;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsAccumulator {
    experts: usize,
    activated: usize,
    prediction_len: usize,
    layers: Vec<LayerStats>,
}

impl StatsAccumulator {
    pub fn new(layers: usize, experts: usize, activated: usize, prediction_len: usize) -> Self {
        Self {
            experts,
            activated,
            prediction_len,
            layers: (0..layers).map(|_| LayerStats::new(experts, prediction_len)).collect(),
        }
    }

    pub fn layers(&self) -> usize {
        self.layers.len()
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn activated(&self) -> usize {
        self.activated
    }

    pub fn prediction_len(&self) -> usize {
        self.prediction_len
    }

    /// Tokens observed at `layer`.
    pub fn tokens(&self, layer: usize) -> u64 {
        self.layers.get(layer).map_or(0, |l| l.counts.q)
    }

    pub fn counts(&self, layer: usize) -> Option<&LayerCounts> {
        self.layers.get(layer).map(|l| &l.counts)
    }

    /// Checks internal consistency after deserialization.
    pub fn check(&self) -> Result<(), StatsError> {
        for l in &self.layers {
            let c = &l.counts;
            if c.freq.len() != self.experts || c.rank_hits.len() != self.experts {
                return Err(StatsError::Malformed("per-expert vectors must have length N"));
            }
            if c.pred_hits.len() != self.prediction_len || c.pred_ranks.len() != self.prediction_len {
                return Err(StatsError::Malformed("per-rank vectors must have length P"));
            }
            if c.pred_ranks.iter().any(|h| h.len() != self.experts) {
                return Err(StatsError::Malformed("rank histograms must have length N"));
            }
        }
        Ok(())
    }

    /// Records one token's routing at `layer`.
    pub fn observe(&mut self, layer: usize, activated: &[ExpertId], predicted: &[ExpertId]) {
        let s = &mut self.layers[layer];
        for &e in activated {
            s.counts.rank_hits[s.rank_of[e]] += 1;
        }
        for (y, &e) in predicted.iter().take(self.prediction_len).enumerate() {
            if activated.contains(&e) {
                s.counts.pred_hits[y] += 1;
            }
            s.counts.pred_ranks[y][s.rank_of[e]] += 1;
        }
        for &e in activated {
            s.bump(e);
        }
        s.counts.q += 1;
    }

    fn layer_checked(&self, layer: usize) -> Result<&LayerStats, StatsError> {
        let s = self.layers.get(layer).ok_or(StatsError::Layer(layer))?;
        if s.counts.q == 0 {
            return Err(StatsError::Empty);
        }
        Ok(s)
    }

    fn check_c(&self, c: usize) -> Result<(), StatsError> {
        if c == 0 || c > self.experts {
            return Err(StatsError::CacheSize { c, n: self.experts });
        }
        Ok(())
    }

    fn check_y(&self, y: usize) -> Result<(), StatsError> {
        if y == 0 || y > self.prediction_len {
            return Err(StatsError::Rank { y, p: self.prediction_len });
        }
        Ok(())
    }

    /// `H(C)`.
    pub fn hit_rate(&self, layer: usize, c: usize) -> Result<f64, StatsError> {
        let s = self.layer_checked(layer)?;
        self.check_c(c)?;
        let hits: u64 = s.counts.rank_hits[..c].iter().sum();
        Ok(hits as f64 / (s.counts.q * self.activated as u64) as f64)
    }

    /// `P(y)`, with `y` 1-based.
    pub fn pred_accuracy(&self, layer: usize, y: usize) -> Result<f64, StatsError> {
        let s = self.layer_checked(layer)?;
        self.check_y(y)?;
        Ok(s.counts.pred_hits[y - 1] as f64 / s.counts.q as f64)
    }

    /// `PH(y, C)`, with `y` 1-based.
    pub fn pred_hit(&self, layer: usize, y: usize, c: usize) -> Result<f64, StatsError> {
        let s = self.layer_checked(layer)?;
        self.check_y(y)?;
        self.check_c(c)?;
        let hits: u64 = s.counts.pred_ranks[y - 1][..c].iter().sum();
        Ok(hits as f64 / s.counts.q as f64)
    }

    /// Precomputes every `H`, `P` and `PH` value for the configurator.
    pub fn snapshot(&self) -> Result<StatsSnapshot, StatsError> {
        let layers = (0..self.layers.len())
            .map(|i| {
                let s = self.layer_checked(i)?;
                let q = s.counts.q as f64;
                let qk = (s.counts.q * self.activated as u64) as f64;
                Ok(LayerTables {
                    hit: prefix_ratios(&s.counts.rank_hits, qk),
                    pred: s.counts.pred_hits.iter().map(|&h| h as f64 / q).collect(),
                    pred_hit: s.counts.pred_ranks.iter().map(|h| prefix_ratios(h, q)).collect(),
                })
            })
            .collect::<Result<Vec<_>, StatsError>>()?;
        StatsSnapshot::new(self.experts, self.activated, layers)
    }
}

/// `out[c] = Σ_{r<c} counts[r] / denom` for `c = 0..=len`.
fn prefix_ratios(counts: &[u64], denom: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(counts.len() + 1);
    let mut acc = 0u64;
    out.push(0.0);
    for &c in counts {
        acc += c;
        out.push(acc as f64 / denom);
    }
    out
}

/// Probability tables of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTables {
    /// `hit[C]` for `C = 0..=N`.
    pub hit: Vec<f64>,
    /// `pred[y - 1]` for `y = 1..=P`.
    pub pred: Vec<f64>,
    /// `pred_hit[y - 1][C]` for `C = 0..=N`.
    pub pred_hit: Vec<Vec<f64>>,
}

/// Immutable statistics handed to the configurator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    experts: usize,
    activated: usize,
    layers: Vec<LayerTables>,
}

impl StatsSnapshot {
    pub fn new(experts: usize, activated: usize, layers: Vec<LayerTables>) -> Result<Self, StatsError> {
        if layers.is_empty() {
            return Err(StatsError::Empty);
        }
        let p = layers[0].pred.len();
        for t in &layers {
            if t.hit.len() != experts + 1 {
                return Err(StatsError::Malformed("hit table must have N + 1 entries"));
            }
            if t.pred.len() != p || t.pred_hit.len() != p {
                return Err(StatsError::Malformed("prediction tables must have P entries"));
            }
            if t.pred_hit.iter().any(|row| row.len() != experts + 1) {
                return Err(StatsError::Malformed("pred_hit rows must have N + 1 entries"));
            }
        }
        Ok(Self { experts, activated, layers })
    }

    pub fn layers(&self) -> usize {
        self.layers.len()
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn activated(&self) -> usize {
        self.activated
    }

    pub fn prediction_len(&self) -> usize {
        self.layers[0].pred.len()
    }

    pub fn tables(&self, layer: usize) -> &LayerTables {
        &self.layers[layer]
    }

    pub fn h(&self, layer: usize, c: usize) -> f64 {
        self.layers[layer].hit[c]
    }

    pub fn p(&self, layer: usize, y: usize) -> f64 {
        self.layers[layer].pred[y - 1]
    }

    pub fn ph(&self, layer: usize, y: usize, c: usize) -> f64 {
        self.layers[layer].pred_hit[y - 1][c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn empty_accumulator_errors() {
        let acc = StatsAccumulator::new(1, 8, 4, 8);
        assert_eq!(acc.hit_rate(0, 4), Err(StatsError::Empty));
        assert_eq!(acc.snapshot().unwrap_err(), StatsError::Empty);
    }

    #[test]
    fn single_cold_token() {
        // Cold counts: ranks follow ids, so experts 0..3 sit at ranks 1..4.
        let mut acc = StatsAccumulator::new(1, 8, 4, 8);
        acc.observe(0, &[0, 1, 2, 3], &[0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(acc.hit_rate(0, 4).unwrap(), 1.0);
        assert_eq!(acc.hit_rate(0, 2).unwrap(), 0.5);
        assert_eq!(acc.hit_rate(0, 8).unwrap(), 1.0);
        for y in 1..=8 {
            assert_eq!(acc.pred_hit(0, y, 8).unwrap(), 1.0);
        }
    }

    #[test]
    fn perfect_predictor_accuracy_profile() {
        let mut acc = StatsAccumulator::new(1, 8, 2, 4);
        acc.observe(0, &[3, 5], &[5, 3, 0, 1]);
        acc.observe(0, &[1, 2], &[2, 1, 0, 7]);
        assert_eq!(acc.pred_accuracy(0, 1).unwrap(), 1.0);
        assert_eq!(acc.pred_accuracy(0, 2).unwrap(), 1.0);
        assert_eq!(acc.pred_accuracy(0, 3).unwrap(), 0.0);
        assert_eq!(acc.pred_accuracy(0, 4).unwrap(), 0.0);
        assert!(acc.pred_accuracy(0, 5).is_err());
        assert!(acc.hit_rate(0, 0).is_err());
    }

    #[test]
    fn ranks_use_pre_increment_counts() {
        let mut acc = StatsAccumulator::new(1, 4, 1, 2);
        acc.observe(0, &[3], &[3, 0]); // rank 4 (cold)
        acc.observe(0, &[3], &[3, 0]); // now rank 1
        assert_eq!(acc.counts(0).unwrap().rank_hits, vec![1, 0, 0, 1]);
        assert_eq!(acc.hit_rate(0, 1).unwrap(), 0.5);
        // Expert 0 was rank 1 then rank 2.
        assert_eq!(acc.counts(0).unwrap().pred_ranks[1], vec![1, 1, 0, 0]);
    }

    #[test]
    fn snapshot_matches_queries() {
        let mut acc = StatsAccumulator::new(2, 6, 2, 3);
        let acts = [[0, 1], [1, 2], [2, 3], [1, 4], [5, 1]];
        for a in acts {
            for l in 0..2 {
                acc.observe(l, &a, &[a[1], 0, a[0]]);
            }
        }
        let snap = acc.snapshot().unwrap();
        for l in 0..2 {
            for c in 1..=6 {
                assert_eq!(snap.h(l, c), acc.hit_rate(l, c).unwrap());
                for y in 1..=3 {
                    assert_eq!(snap.ph(l, y, c), acc.pred_hit(l, y, c).unwrap());
                }
            }
            for y in 1..=3 {
                assert_eq!(snap.p(l, y), acc.pred_accuracy(l, y).unwrap());
            }
        }
    }
}
