//! Analytical traffic and latency model of a MoE-ViT accelerator.
//!
//! Attention runs on `n_pe` processing elements that either share one
//! broadcast copy of K and V per head or fetch their own. Linear layers,
//! dense or per expert, run on `n_l` compute units fed by a round-robin
//! router so that each weight fetch serves up to `n_l` tokens. Each kernel's
//! latency is the larger (or, without double buffering, the sum) of its
//! compute and off-chip transfer cycles.

mod config;
mod kernels;
mod stats;

use qmoe_core::model::{GateDecision, ModelConfig};
use thiserror::Error;

pub use config::{KPolicy, LinearPolicy, SimConfig, WeightMode};
pub use kernels::{sim_attention, sim_linear, AttentionShape, ExpertLoad};
pub use stats::{Counters, KernelStats, SimStats, TensorRole};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error("invalid kernel shape: {0}")]
    Shape(String),
    #[error("invalid expert assignment: {0}")]
    Assignment(String),
    #[error("weights need {need} bytes on chip but only {have} are available")]
    Capacity { need: u64, have: u64 },
    #[error("gate trace does not match the model: {0}")]
    Trace(String),
}

impl AttentionShape {
    pub fn of(cfg: &ModelConfig) -> Self {
        Self {
            tokens: cfg.n_tokens as u64,
            head_dim: cfg.head_dim as u64,
            heads: cfg.n_heads as u64,
        }
    }
}

/// Tokens per expert for one MoE block's routing.
pub fn expert_load(decisions: &[GateDecision], n_experts: usize, top_k: usize) -> Result<ExpertLoad, SimError> {
    let mut counts = vec![0u64; n_experts];
    for (t, d) in decisions.iter().enumerate() {
        if d.experts.len() != top_k {
            return Err(SimError::Trace(format!("token {t} routed to {} experts, expected {top_k}", d.experts.len())));
        }
        for &e in &d.experts {
            *counts
                .get_mut(e)
                .ok_or_else(|| SimError::Trace(format!("token {t} routed to expert {e} of {n_experts}")))? += 1;
        }
    }
    Ok(ExpertLoad {
        counts,
        top_k: top_k as u64,
    })
}

/// Runs every kernel of the model in order, one block after another.
///
/// `gates[b]` holds block `b`'s routing (one decision per token) for MoE
/// blocks and `None` for dense ones.
pub fn sim_model(cfg: &ModelConfig, gates: &[Option<Vec<GateDecision>>], sim: &SimConfig) -> Result<SimStats, SimError> {
    sim.validate()?;
    cfg.validate().map_err(|e| SimError::Config(e.to_string()))?;
    if gates.len() != cfg.n_blocks {
        return Err(SimError::Trace(format!("{} gate entries for {} blocks", gates.len(), cfg.n_blocks)));
    }
    let n = cfg.n_tokens as u64;
    let d = cfg.dim as u64;
    let hidden = cfg.hidden() as u64;
    let mut kernels = Vec::new();
    for (b, gate) in gates.iter().enumerate() {
        let mut block = vec![
            kernels::linear_kernel("qkv", n, d, 3 * d, sim, None)?,
            kernels::attention_kernel(AttentionShape::of(cfg), sim)?,
            kernels::linear_kernel("proj", n, d, d, sim, None)?,
        ];
        match (cfg.is_moe(b), gate) {
            (false, None) => {
                block.push(kernels::linear_kernel("fc1", n, d, hidden, sim, None)?);
                block.push(kernels::linear_kernel("fc2", n, hidden, d, sim, None)?);
            }
            (true, Some(decisions)) => {
                if decisions.len() != cfg.n_tokens {
                    return Err(SimError::Trace(format!(
                        "block {b}: {} decisions for {} tokens",
                        decisions.len(),
                        cfg.n_tokens
                    )));
                }
                let load = expert_load(decisions, cfg.n_experts, cfg.top_k)?;
                block.push(kernels::linear_kernel("gate", n, d, cfg.n_experts as u64, sim, None)?);
                block.push(kernels::linear_kernel("expert_fc1", n, d, hidden, sim, Some(&load))?);
                block.push(kernels::linear_kernel("expert_fc2", n, hidden, d, sim, Some(&load))?);
            }
            (moe, _) => {
                return Err(SimError::Trace(format!(
                    "block {b} is {} but its gate entry {}",
                    if moe { "MoE" } else { "dense" },
                    if moe { "is missing" } else { "is present" }
                )))
            }
        }
        for mut k in block {
            k.block = Some(b);
            kernels.push(k);
        }
    }
    Ok(SimStats::from_kernels(kernels, sim.clock_mhz))
}
