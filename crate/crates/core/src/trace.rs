//! Expert-activation traces: data model, validation and a synthetic generator.
//!
//! The generator reproduces the two structural properties expert routing shows
//! in practice: a long-tailed popularity distribution per layer (Zipf over a
//! per-layer random permutation of experts) and token-to-token reuse (each
//! expert of the previous token is re-activated with `repeat_prob`). Predicted
//! rankings are the true ranking with calibrated rank noise.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::sampling::{sample_without_replacement, weighted_choice, zipf_weights};
use crate::specs::{ModelSpec, SpecError};
use crate::ExpertId;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TraceError {
    #[error("trace must contain at least one decode token")]
    ZeroTokens,
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("invalid generator config `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("token {token}: {reason}")]
    Record { token: u64, reason: String },
    #[error("token {token}, layer {layer}: expert id {id} out of range [0, {n})")]
    IdOutOfRange { token: u64, layer: usize, id: ExpertId, n: usize },
    #[error("trace header does not match model: {0}")]
    ShapeMismatch(String),
}

/// Routing outcome of one layer for one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerActivation {
    /// The K experts the router selected, in descending score order.
    #[serde(rename = "act")]
    pub activated: Vec<ExpertId>,
    /// Router scores of `activated`, same order.
    #[serde(rename = "sc")]
    pub scores: Vec<f64>,
    /// Speculative ranking for this layer, most likely first.
    #[serde(rename = "pred")]
    pub predicted: Vec<ExpertId>,
}

impl LayerActivation {
    /// Number of activated experts found in the first `k` predicted slots.
    pub fn top_k_hits(&self, k: usize) -> usize {
        self.predicted
            .iter()
            .take(k)
            .filter(|e| self.activated.contains(e))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    #[serde(rename = "t")]
    pub token_index: u64,
    #[serde(rename = "layers")]
    pub per_layer: Vec<LayerActivation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceGenConfig {
    /// Popularity skew applied to every layer without an override.
    pub zipf_exponent: f64,
    /// Optional per-layer skew; length must equal L.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_zipf: Option<Vec<f64>>,
    pub repeat_prob: f64,
    /// Target top-K prediction accuracy; either one value for all layers or one per layer.
    pub predictor_accuracy: Vec<f64>,
    pub seed: u64,
    /// Decode tokens.
    pub tokens: usize,
    /// Prompt tokens, emitted before the decode tokens.
    pub prompt_tokens: usize,
    /// Predicted ranking length P; defaults to min(N, 2K).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction_len: Option<usize>,
}

impl Default for TraceGenConfig {
    fn default() -> Self {
        Self {
            // Mild skew: full-expert LFU hit rate on N=60 is about 21% at C=10.
            zipf_exponent: 0.2,
            layer_zipf: None,
            repeat_prob: 0.0,
            predictor_accuracy: alloc::vec![0.8],
            seed: 0,
            tokens: 10_000,
            prompt_tokens: 0,
            prediction_len: None,
        }
    }
}

impl TraceGenConfig {
    pub fn accuracy_for(&self, layer: usize) -> f64 {
        match self.predictor_accuracy.len() {
            1 => self.predictor_accuracy[0],
            _ => self.predictor_accuracy[layer],
        }
    }

    pub fn zipf_for(&self, layer: usize) -> f64 {
        self.layer_zipf.as_ref().map_or(self.zipf_exponent, |z| z[layer])
    }

    pub fn prediction_len_for(&self, model: &ModelSpec) -> usize {
        self.prediction_len
            .unwrap_or(2 * model.activated_per_token)
            .min(model.experts_per_layer)
    }

    pub fn validate(&self, model: &ModelSpec) -> Result<(), TraceError> {
        let bad = |field, reason: &str| Err(TraceError::Config { field, reason: reason.into() });
        if self.tokens == 0 {
            return Err(TraceError::ZeroTokens);
        }
        if !(self.zipf_exponent >= 0.0) || !self.zipf_exponent.is_finite() {
            return bad("zipf_exponent", "must be finite and >= 0");
        }
        if let Some(z) = &self.layer_zipf {
            if z.len() != model.layers {
                return bad("layer_zipf", "length must equal the layer count");
            }
            if z.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
                return bad("layer_zipf", "entries must be finite and >= 0");
            }
        }
        if !(0.0..=1.0).contains(&self.repeat_prob) {
            return bad("repeat_prob", "must lie in [0, 1]");
        }
        let n_acc = self.predictor_accuracy.len();
        if n_acc != 1 && n_acc != model.layers {
            return bad("predictor_accuracy", "needs one value or one per layer");
        }
        if self.predictor_accuracy.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return bad("predictor_accuracy", "entries must lie in [0, 1]");
        }
        let p = self.prediction_len_for(model);
        if p < model.activated_per_token {
            return bad("prediction_len", "must be >= K");
        }
        Ok(())
    }
}

/// First line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "N")]
    pub experts: usize,
    #[serde(rename = "K")]
    pub activated: usize,
    #[serde(rename = "P")]
    pub prediction_len: usize,
    #[serde(default)]
    pub prompt_tokens: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub generator: Option<TraceGenConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub header: TraceHeader,
    pub tokens: Vec<TokenRecord>,
}

impl ActivationTrace {
    pub fn prompt(&self) -> &[TokenRecord] {
        &self.tokens[..self.header.prompt_tokens.min(self.tokens.len())]
    }

    pub fn decode(&self) -> &[TokenRecord] {
        &self.tokens[self.header.prompt_tokens.min(self.tokens.len())..]
    }

    /// Checks that the header agrees with `model` in L, N and K.
    pub fn check_model(&self, model: &ModelSpec) -> Result<(), TraceError> {
        let h = &self.header;
        if h.layers != model.layers
            || h.experts != model.experts_per_layer
            || h.activated != model.activated_per_token
        {
            return Err(TraceError::ShapeMismatch(alloc::format!(
                "trace (L={}, N={}, K={}) vs model (L={}, N={}, K={})",
                h.layers,
                h.experts,
                h.activated,
                model.layers,
                model.experts_per_layer,
                model.activated_per_token
            )));
        }
        Ok(())
    }

    /// Fraction of activated experts present in the predicted top-K, per layer.
    pub fn prediction_accuracy(&self, layer: usize) -> f64 {
        let k = self.header.activated;
        let hits: usize = self.tokens.iter().map(|t| t.per_layer[layer].top_k_hits(k)).sum();
        hits as f64 / (self.tokens.len() * k) as f64
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        for record in &self.tokens {
            validate_record(&self.header, record)?;
        }
        Ok(())
    }
}

fn has_duplicates(ids: &[ExpertId]) -> bool {
    ids.iter().enumerate().any(|(i, a)| ids[..i].contains(a))
}

/// Validates one record against the header's shape.
pub fn validate_record(header: &TraceHeader, record: &TokenRecord) -> Result<(), TraceError> {
    let token = record.token_index;
    let fail = |reason: String| Err(TraceError::Record { token, reason });
    if record.per_layer.len() != header.layers {
        return fail(alloc::format!(
            "expected {} layer entries, found {}",
            header.layers,
            record.per_layer.len()
        ));
    }
    for (layer, act) in record.per_layer.iter().enumerate() {
        if act.activated.len() != header.activated {
            return fail(alloc::format!(
                "layer {layer}: expected {} activated experts, found {}",
                header.activated,
                act.activated.len()
            ));
        }
        if act.scores.len() != act.activated.len() {
            return fail(alloc::format!("layer {layer}: scores and activated lengths differ"));
        }
        if act.predicted.len() != header.prediction_len {
            return fail(alloc::format!(
                "layer {layer}: expected {} predicted experts, found {}",
                header.prediction_len,
                act.predicted.len()
            ));
        }
        for &id in act.activated.iter().chain(act.predicted.iter()) {
            if id >= header.experts {
                return Err(TraceError::IdOutOfRange { token, layer, id, n: header.experts });
            }
        }
        if has_duplicates(&act.activated) || has_duplicates(&act.predicted) {
            return fail(alloc::format!("layer {layer}: duplicate expert ids"));
        }
        let sum: f64 = act.scores.iter().sum();
        if act.scores.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) || sum > 1.0 + 1e-9 {
            return fail(alloc::format!("layer {layer}: scores must lie in (0, 1] and sum to <= 1"));
        }
    }
    Ok(())
}

struct LayerGen {
    /// Zipf weight of each expert id.
    weight: Vec<f64>,
    previous: Vec<ExpertId>,
    accuracy: f64,
}

/// Generates a deterministic synthetic trace of `prompt_tokens + tokens` records.
pub fn generate_trace(model: &ModelSpec, cfg: &TraceGenConfig) -> Result<ActivationTrace, TraceError> {
    let model = model.clone().validate()?;
    cfg.validate(&model)?;
    let n = model.experts_per_layer;
    let k = model.activated_per_token;
    let p = cfg.prediction_len_for(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut layers: Vec<LayerGen> = (0..model.layers)
        .map(|i| {
            let by_rank = zipf_weights(n, cfg.zipf_for(i));
            let mut perm: Vec<ExpertId> = (0..n).collect();
            perm.shuffle(&mut rng);
            let mut weight = alloc::vec![0.0; n];
            for (rank, &e) in perm.iter().enumerate() {
                weight[e] = by_rank[rank];
            }
            LayerGen { weight, previous: Vec::new(), accuracy: cfg.accuracy_for(i) }
        })
        .collect();

    let total = cfg.prompt_tokens + cfg.tokens;
    let mut tokens = Vec::with_capacity(total);
    for t in 0..total {
        let per_layer = layers
            .iter_mut()
            .map(|layer| generate_layer(&mut rng, layer, n, k, p, cfg.repeat_prob))
            .collect();
        tokens.push(TokenRecord { token_index: t as u64, per_layer });
    }

    Ok(ActivationTrace {
        header: TraceHeader {
            layers: model.layers,
            experts: n,
            activated: k,
            prediction_len: p,
            prompt_tokens: cfg.prompt_tokens,
            seed: Some(cfg.seed),
            generator: Some(cfg.clone()),
        },
        tokens,
    })
}

fn generate_layer(
    rng: &mut ChaCha8Rng,
    layer: &mut LayerGen,
    n: usize,
    k: usize,
    p: usize,
    repeat_prob: f64,
) -> LayerActivation {
    let mut activated: Vec<ExpertId> = Vec::with_capacity(k);
    for &e in &layer.previous {
        if rng.gen_bool(repeat_prob) {
            activated.push(e);
        }
    }
    let mut pool: Vec<ExpertId> = (0..n).filter(|e| !activated.contains(e)).collect();
    let weight = &layer.weight;
    let fill = sample_without_replacement(rng, &mut pool, |e| weight[e], k - activated.len());
    activated.extend(fill);
    activated.shuffle(rng);
    layer.previous.clone_from(&activated);

    // Softmax over K exponential draws, sorted descending.
    let draws: Vec<f64> = (0..k)
        .map(|_| libm::exp(-libm::log(1.0 - rng.gen::<f64>())))
        .collect();
    let norm: f64 = draws.iter().sum();
    let mut scores: Vec<f64> = draws.iter().map(|d| d / norm).collect();
    scores.sort_by(|a, b| b.total_cmp(a));

    let predicted = predict(rng, weight, &activated, n, k, p, layer.accuracy);
    LayerActivation { activated, scores, predicted }
}

/// Noisy predicted ranking: each activated expert is displaced from the top-K
/// with probability `1 - accuracy`, replaced by a popularity-sampled distractor
/// and demoted to a uniform rank in `K+1..=P`.
fn predict(
    rng: &mut ChaCha8Rng,
    weight: &[f64],
    activated: &[ExpertId],
    n: usize,
    k: usize,
    p: usize,
    accuracy: f64,
) -> Vec<ExpertId> {
    let mut top: Vec<ExpertId> = activated.to_vec();
    let mut demoted: Vec<ExpertId> = Vec::new();
    let mut used: Vec<bool> = alloc::vec![false; n];
    for &e in activated {
        used[e] = true;
    }
    for slot in 0..k {
        if rng.gen_bool(accuracy) {
            continue;
        }
        let free: Vec<ExpertId> = (0..n).filter(|&e| !used[e]).collect();
        let Some(distractor) = weighted_choice(rng, &free, |e| weight[e]) else {
            continue;
        };
        used[distractor] = true;
        demoted.push(top[slot]);
        top[slot] = distractor;
    }

    let mut tail: Vec<ExpertId> = Vec::with_capacity(p - k);
    while tail.len() < p - k {
        let free: Vec<ExpertId> = (0..n).filter(|&e| !used[e]).collect();
        let Some(d) = weighted_choice(rng, &free, |e| weight[e]) else {
            break;
        };
        used[d] = true;
        tail.push(d);
    }
    for e in demoted {
        if tail.len() >= p - k {
            // Make room by dropping the lowest-ranked distractor.
            match tail.iter().rposition(|x| !activated.contains(x)) {
                Some(pos) => {
                    tail.remove(pos);
                }
                None => continue,
            }
        }
        let pos = rng.gen_range(0..=tail.len());
        tail.insert(pos, e);
    }
    top.extend(tail);
    top
}
