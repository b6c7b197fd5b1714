use serde::{Deserialize, Serialize};

use crate::SimError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Weights loaded on chip once per kernel.
    Preload,
    /// Weights streamed from off-chip memory per token group.
    Stream,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KPolicy {
    /// K and V fetched once per head and broadcast to every PE.
    Broadcast,
    /// Every PE fetches its own copy of K and V.
    Naive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearPolicy {
    /// Round-robin router: `n_l` tokens share each weight fetch.
    RrRouter,
    /// Every token re-fetches the full weight matrix.
    PerPatchRefetch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Attention processing elements.
    pub n_pe: u64,
    /// Linear compute units.
    pub n_l: u64,
    /// Pass-3 scale multipliers.
    pub t_s: u64,
    pub macs_per_unit_per_cycle: u64,
    pub offchip_bytes_per_cycle: f64,
    pub onchip_capacity_bytes: u64,
    pub bytes_per_activation: u64,
    pub bytes_per_weight: u64,
    pub weight_mode: WeightMode,
    pub attention_k_policy: KPolicy,
    pub linear_fetch_policy: LinearPolicy,
    /// Burst size; one burst is one transaction.
    pub tile_bytes: u64,
    /// Overlap compute and memory within a kernel (`max`) instead of adding them.
    pub double_buffer: bool,
    /// Pipeline fill of the 3-pass softmax, in cycles per attention kernel.
    pub softmax_fill_cycles: u64,
    /// Stream weights that do not fit on chip instead of failing in preload mode.
    pub preload_fallback: bool,
    pub clock_mhz: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_pe: 4,
            n_l: 4,
            t_s: 4,
            macs_per_unit_per_cycle: 16,
            offchip_bytes_per_cycle: 16.0,
            onchip_capacity_bytes: 4 << 20,
            bytes_per_activation: 1,
            bytes_per_weight: 1,
            weight_mode: WeightMode::Stream,
            attention_k_policy: KPolicy::Broadcast,
            linear_fetch_policy: LinearPolicy::RrRouter,
            tile_bytes: 64,
            double_buffer: true,
            softmax_fill_cycles: 3,
            preload_fallback: false,
            clock_mhz: 300.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let counts = [
            ("n_pe", self.n_pe),
            ("n_l", self.n_l),
            ("t_s", self.t_s),
            ("macs_per_unit_per_cycle", self.macs_per_unit_per_cycle),
            ("bytes_per_activation", self.bytes_per_activation),
            ("bytes_per_weight", self.bytes_per_weight),
            ("tile_bytes", self.tile_bytes),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(SimError::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.offchip_bytes_per_cycle.is_finite() && self.offchip_bytes_per_cycle > 0.0) {
            return Err(SimError::Config(format!(
                "offchip_bytes_per_cycle must be positive, got {}",
                self.offchip_bytes_per_cycle
            )));
        }
        if !(self.clock_mhz.is_finite() && self.clock_mhz > 0.0) {
            return Err(SimError::Config(format!("clock_mhz must be positive, got {}", self.clock_mhz)));
        }
        Ok(())
    }
}
