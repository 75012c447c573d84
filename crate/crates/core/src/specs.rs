//! Static model and device descriptions and the timing constants derived from them.
//!
//! All VRAM quantities downstream of this module are in *expert units*: one
//! unit is the size of one complete expert.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SpecError {
    #[error("invalid model spec field `{field}`: {reason}")]
    Model { field: &'static str, reason: &'static str },
    #[error("invalid device spec field `{field}`: {reason}")]
    Device { field: &'static str, reason: &'static str },
    #[error("unknown {kind} profile `{name}`")]
    UnknownProfile { kind: &'static str, name: alloc::string::String },
}

/// Shape of an MoE model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Number of MoE layers `L`.
    pub layers: usize,
    /// Experts per layer `N`.
    pub experts_per_layer: usize,
    /// Experts activated per token per layer `K`.
    pub activated_per_token: usize,
    pub expert_size_bytes: u64,
    pub nonexpert_size_bytes: u64,
    /// Prefetch buffer size in complete-expert slots.
    pub buffer_experts: usize,
}

impl ModelSpec {
    /// Qwen1.5-MoE-shaped model: 24 layers, 60 experts, top-4 routing.
    pub fn qwen_like() -> Self {
        Self {
            layers: 24,
            experts_per_layer: 60,
            activated_per_token: 4,
            // 2048 x 1408 gate/up/down projections at 16 bits.
            expert_size_bytes: 17_301_504,
            nonexpert_size_bytes: 3_400_000_000,
            buffer_experts: 4,
        }
    }

    /// Mixtral-8x7B-shaped model: 32 layers, 8 experts, top-2 routing, 2-bit experts.
    pub fn mixtral_like() -> Self {
        Self {
            layers: 32,
            experts_per_layer: 8,
            activated_per_token: 2,
            expert_size_bytes: 44_040_192,
            nonexpert_size_bytes: 1_600_000_000,
            buffer_experts: 2,
        }
    }

    pub fn builtin(name: &str) -> Result<Self, SpecError> {
        match name {
            "qwen-like" => Ok(Self::qwen_like()),
            "mixtral-like" => Ok(Self::mixtral_like()),
            other => Err(SpecError::UnknownProfile { kind: "model", name: other.into() }),
        }
    }

    pub const BUILTIN_NAMES: &'static [&'static str] = &["qwen-like", "mixtral-like"];

    pub fn validate(self) -> Result<Self, SpecError> {
        let err = |field, reason| Err(SpecError::Model { field, reason });
        if self.layers < 1 {
            return err("layers", "L must be >= 1");
        }
        if self.activated_per_token < 1 {
            return err("activated_per_token", "K must be >= 1");
        }
        if self.activated_per_token >= self.experts_per_layer {
            return err("activated_per_token", "K must be < N");
        }
        if self.expert_size_bytes == 0 {
            return err("expert_size_bytes", "U_e must be > 0");
        }
        if self.buffer_experts < self.activated_per_token {
            return err("buffer_experts", "buffer must hold at least K experts");
        }
        Ok(self)
    }
}

/// Target hardware costs. Times are per layer per token, in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    /// Effective host-to-device bandwidth in bytes per second.
    pub pcie_bandwidth: f64,
    /// Expert-cache VRAM budget `V_e` in complete-expert units, after the
    /// non-expert parameters and the prefetch buffer are reserved.
    pub vram_budget_experts: f64,
    pub t_comp_att: f64,
    pub t_comp_moe: f64,
    pub t_comp_head: f64,
}

impl DeviceSpec {
    /// Calibrated so that, with [`ModelSpec::qwen_like`], loading the K activated
    /// experts of a layer takes 165 ms against 57 ms of attention + MoE compute.
    /// The head-layer time is an assumption.
    pub fn a6000() -> Self {
        Self {
            pcie_bandwidth: 419_430_400.0,
            vram_budget_experts: 240.0,
            t_comp_att: 17.0,
            t_comp_moe: 40.0,
            t_comp_head: 5.0,
        }
    }

    pub fn fast_pcie() -> Self {
        Self { pcie_bandwidth: 4.0 * 419_430_400.0, ..Self::a6000() }
    }

    pub fn slow_pcie() -> Self {
        Self { pcie_bandwidth: 0.5 * 419_430_400.0, ..Self::a6000() }
    }

    pub const BUILTIN_NAMES: &'static [&'static str] = &["a6000", "fast-pcie", "slow-pcie"];

    pub fn builtin(name: &str) -> Result<Self, SpecError> {
        match name {
            "a6000" => Ok(Self::a6000()),
            "fast-pcie" => Ok(Self::fast_pcie()),
            "slow-pcie" => Ok(Self::slow_pcie()),
            other => Err(SpecError::UnknownProfile { kind: "device", name: other.into() }),
        }
    }

    pub fn validate(self) -> Result<Self, SpecError> {
        let checks: [(&'static str, f64); 5] = [
            ("pcie_bandwidth", self.pcie_bandwidth),
            ("vram_budget_experts", self.vram_budget_experts),
            ("t_comp_att", self.t_comp_att),
            ("t_comp_moe", self.t_comp_moe),
            ("t_comp_head", self.t_comp_head),
        ];
        for (field, value) in checks {
            // `!(v > 0)` also rejects NaN.
            if !(value > 0.0) || !value.is_finite() {
                return Err(SpecError::Device { field, reason: "must be finite and > 0" });
            }
        }
        Ok(self)
    }
}

/// Timing constants consumed by the engine and the configurator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingProfile {
    /// Time to load one complete expert over PCIe, ms.
    pub t_load_exp: f64,
    /// Time to compute one expert, ms (`t_comp_moe / K`).
    pub t_comp_exp: f64,
    pub t_comp_att: f64,
    pub t_comp_moe: f64,
    pub t_comp_head: f64,
}

impl TimingProfile {
    /// Per-token latency with every load hidden.
    pub fn compute_floor(&self, layers: usize) -> f64 {
        let mut total = 0.0;
        for _ in 0..layers {
            total += self.t_comp_att + self.t_comp_moe;
        }
        total + self.t_comp_head
    }

    /// True when one expert loads slower than it computes, the regime where
    /// offloading latency dominates.
    pub fn is_load_bound(&self) -> bool {
        self.t_load_exp > self.t_comp_exp
    }
}

pub fn derive_timing(model: &ModelSpec, device: &DeviceSpec) -> Result<TimingProfile, SpecError> {
    let model = model.clone().validate()?;
    let device = device.clone().validate()?;
    Ok(TimingProfile {
        t_load_exp: model.expert_size_bytes as f64 / device.pcie_bandwidth * 1000.0,
        t_comp_exp: device.t_comp_moe / model.activated_per_token as f64,
        t_comp_att: device.t_comp_att,
        t_comp_moe: device.t_comp_moe,
        t_comp_head: device.t_comp_head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(l: usize, n: usize, k: usize) -> ModelSpec {
        ModelSpec {
            layers: l,
            experts_per_layer: n,
            activated_per_token: k,
            expert_size_bytes: 1,
            nonexpert_size_bytes: 0,
            buffer_experts: k,
        }
    }

    #[test]
    fn table_shapes_validate() {
        assert!(model(24, 60, 4).validate().is_ok());
        assert!(model(32, 8, 2).validate().is_ok());
        assert!(ModelSpec::qwen_like().validate().is_ok());
        assert!(ModelSpec::mixtral_like().validate().is_ok());
    }

    #[test]
    fn k_equal_n_is_rejected() {
        let err = model(4, 8, 8).validate().unwrap_err();
        assert_eq!(
            err,
            SpecError::Model { field: "activated_per_token", reason: "K must be < N" }
        );
        assert!(alloc::format!("{err}").contains("K must be < N"));
    }

    #[test]
    fn small_buffer_and_zero_size_rejected() {
        let mut m = model(4, 8, 2);
        m.buffer_experts = 1;
        assert!(matches!(m.validate(), Err(SpecError::Model { field: "buffer_experts", .. })));
        let mut m = model(4, 8, 2);
        m.expert_size_bytes = 0;
        assert!(matches!(m.validate(), Err(SpecError::Model { field: "expert_size_bytes", .. })));
        assert!(model(0, 8, 2).validate().is_err());
    }

    #[test]
    fn device_rejects_nonpositive() {
        let mut d = DeviceSpec::a6000();
        d.t_comp_head = 0.0;
        assert!(matches!(d.validate(), Err(SpecError::Device { field: "t_comp_head", .. })));
        let mut d = DeviceSpec::a6000();
        d.pcie_bandwidth = f64::NAN;
        assert!(d.validate().is_err());
    }

    #[test]
    fn direct_division() {
        let mut m = model(1, 8, 4);
        m.expert_size_bytes = 320_000_000;
        let d = DeviceSpec {
            pcie_bandwidth: 16e9,
            vram_budget_experts: 1.0,
            t_comp_att: 1.0,
            t_comp_moe: 40.0,
            t_comp_head: 1.0,
        };
        let t = derive_timing(&m, &d).unwrap();
        assert_eq!(t.t_load_exp, 20.0);
        assert_eq!(t.t_comp_exp, 10.0);
        assert_eq!(t.t_comp_exp * 4.0, d.t_comp_moe);
    }

    #[test]
    fn a6000_matches_observed_ratio() {
        let m = ModelSpec::qwen_like();
        let d = DeviceSpec::a6000();
        let t = derive_timing(&m, &d).unwrap();
        assert!((4.0 * t.t_load_exp - 165.0).abs() < 1e-9);
        assert!((d.t_comp_att + d.t_comp_moe - 57.0).abs() < 1e-12);
    }

    #[test]
    fn builtin_devices_are_load_bound() {
        let m = ModelSpec::qwen_like();
        for name in DeviceSpec::BUILTIN_NAMES {
            let t = derive_timing(&m, &DeviceSpec::builtin(name).unwrap()).unwrap();
            assert!(t.is_load_bound(), "{name}");
            assert_eq!(t, derive_timing(&m, &DeviceSpec::builtin(name).unwrap()).unwrap());
        }
        assert!(DeviceSpec::builtin("h100").is_err());
    }
}
