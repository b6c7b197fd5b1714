use std::collections::BTreeMap;

use crate::config::{KPolicy, LinearPolicy, SimConfig, WeightMode};
use crate::stats::{Counters, KernelStats, SimStats, TensorRole};
use crate::SimError;

/// Tokens routed to each expert of one MoE layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpertLoad {
    pub counts: Vec<u64>,
    pub top_k: u64,
}

impl ExpertLoad {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Shape of the attention kernel: `heads` heads of `tokens × head_dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub tokens: u64,
    pub head_dim: u64,
    pub heads: u64,
}

fn finish(name: &str, sim: &SimConfig, compute_cycles: u64, macs: u64, roles: BTreeMap<TensorRole, u64>, writes: &[TensorRole]) -> KernelStats {
    let total: u64 = roles.values().sum();
    let written: u64 = writes.iter().map(|r| roles.get(r).copied().unwrap_or(0)).sum();
    let memory_cycles = (total as f64 / sim.offchip_bytes_per_cycle).ceil() as u64;
    let est_cycles = if sim.double_buffer {
        compute_cycles.max(memory_cycles)
    } else {
        compute_cycles + memory_cycles
    };
    let transactions = roles.values().map(|b| b.div_ceil(sim.tile_bytes)).sum();
    KernelStats {
        name: name.to_string(),
        block: None,
        counters: Counters {
            offchip_read_bytes: total - written,
            offchip_write_bytes: written,
            transactions,
            compute_cycles,
            memory_cycles,
            est_cycles,
            macs,
            bytes_by_role: roles,
        },
    }
}

/// Attention kernel: `Q Kᵀ`, 3-pass softmax and `P V` over every head.
pub fn sim_attention(shape: AttentionShape, sim: &SimConfig) -> Result<SimStats, SimError> {
    sim.validate()?;
    Ok(SimStats::from_kernels(vec![attention_kernel(shape, sim)?], sim.clock_mhz))
}

pub(crate) fn attention_kernel(shape: AttentionShape, sim: &SimConfig) -> Result<KernelStats, SimError> {
    let AttentionShape { tokens: n, head_dim: dh, heads: h } = shape;
    if n == 0 || dh == 0 || h == 0 {
        return Err(SimError::Shape(format!("attention needs positive sizes, got N={n} D_h={dh} h={h}")));
    }
    let per_head = n * dh * sim.bytes_per_activation;
    let copies = match sim.attention_k_policy {
        KPolicy::Broadcast => 1,
        KPolicy::Naive => sim.n_pe,
    };
    let roles = BTreeMap::from([
        (TensorRole::Q, h * per_head),
        (TensorRole::K, h * per_head * copies),
        (TensorRole::V, h * per_head * copies),
        (TensorRole::Outputs, h * per_head),
    ]);
    let rows_per_pe = n.div_ceil(sim.n_pe);
    let mac_cycles = (h * rows_per_pe * n * dh * 2).div_ceil(sim.macs_per_unit_per_cycle);
    let scale_cycles = h * rows_per_pe * dh.div_ceil(sim.t_s);
    let compute = mac_cycles.max(scale_cycles) + sim.softmax_fill_cycles;
    let macs = 2 * h * n * n * dh;
    Ok(finish("attention", sim, compute, macs, roles, &[TensorRole::Outputs]))
}

/// Weight bytes fetched for one weight matrix shared by `tokens` tokens.
fn weight_traffic(tokens: u64, w_bytes: u64, sim: &SimConfig, preload: bool) -> u64 {
    if preload {
        return w_bytes;
    }
    match sim.linear_fetch_policy {
        LinearPolicy::RrRouter => tokens.div_ceil(sim.n_l) * w_bytes,
        LinearPolicy::PerPatchRefetch => tokens * w_bytes,
    }
}

/// Dense linear layer over `tokens` tokens, or one expert layer per entry of
/// `assignment` in sparse mode.
pub fn sim_linear(
    tokens: u64,
    in_dim: u64,
    out_dim: u64,
    sim: &SimConfig,
    assignment: Option<&ExpertLoad>,
) -> Result<SimStats, SimError> {
    sim.validate()?;
    let k = linear_kernel("linear", tokens, in_dim, out_dim, sim, assignment)?;
    Ok(SimStats::from_kernels(vec![k], sim.clock_mhz))
}

pub(crate) fn linear_kernel(
    name: &str,
    tokens: u64,
    in_dim: u64,
    out_dim: u64,
    sim: &SimConfig,
    assignment: Option<&ExpertLoad>,
) -> Result<KernelStats, SimError> {
    if tokens == 0 || in_dim == 0 || out_dim == 0 {
        return Err(SimError::Shape(format!(
            "linear needs positive sizes, got tokens={tokens} in={in_dim} out={out_dim}"
        )));
    }
    let w_bytes = in_dim * out_dim * sim.bytes_per_weight;
    let groups: Vec<u64> = match assignment {
        None => vec![tokens],
        Some(load) => {
            if load.counts.is_empty() {
                return Err(SimError::Assignment("no experts in assignment".into()));
            }
            if load.total() != tokens * load.top_k {
                return Err(SimError::Assignment(format!(
                    "expert loads sum to {} but tokens·k = {}",
                    load.total(),
                    tokens * load.top_k
                )));
            }
            load.counts.clone()
        }
    };
    let resident: u64 = groups.iter().filter(|&&n| n > 0).count() as u64 * w_bytes;
    let preload = match sim.weight_mode {
        WeightMode::Stream => false,
        WeightMode::Preload if resident <= sim.onchip_capacity_bytes => true,
        WeightMode::Preload if sim.preload_fallback => false,
        WeightMode::Preload => {
            return Err(SimError::Capacity {
                need: resident,
                have: sim.onchip_capacity_bytes,
            })
        }
    };
    let per_group_cycles = (in_dim * out_dim).div_ceil(sim.macs_per_unit_per_cycle);
    let mut weights = 0;
    let mut compute = 0;
    let mut routed = 0;
    for &n in &groups {
        if n == 0 {
            continue;
        }
        weights += weight_traffic(n, w_bytes, sim, preload);
        compute += n.div_ceil(sim.n_l) * per_group_cycles;
        routed += n;
    }
    let bpa = sim.bytes_per_activation;
    let roles = BTreeMap::from([
        (TensorRole::Weights, weights),
        (TensorRole::Activations, routed * in_dim * bpa),
        (TensorRole::Outputs, routed * out_dim * bpa),
    ]);
    let macs = routed * in_dim * out_dim;
    Ok(finish(name, sim, compute, macs, roles, &[TensorRole::Outputs]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_byte() -> SimConfig {
        SimConfig {
            bytes_per_activation: 1,
            bytes_per_weight: 1,
            ..SimConfig::default()
        }
    }

    #[test]
    fn k_bytes_are_constant_under_broadcast() {
        let shape = AttentionShape { tokens: 4, head_dim: 2, heads: 1 };
        for n_pe in [1, 2, 4, 8] {
            let mut sim = SimConfig { n_pe, ..one_byte() };
            let s = sim_attention(shape, &sim).unwrap();
            assert_eq!(s.total.role_bytes(TensorRole::K), 8);
            sim.attention_k_policy = KPolicy::Naive;
            let s = sim_attention(shape, &sim).unwrap();
            assert_eq!(s.total.role_bytes(TensorRole::K), 8 * n_pe);
        }
    }

    #[test]
    fn single_pe_policies_agree() {
        let shape = AttentionShape { tokens: 6, head_dim: 3, heads: 2 };
        let a = SimConfig { n_pe: 1, ..one_byte() };
        let b = SimConfig { attention_k_policy: KPolicy::Naive, ..a.clone() };
        assert_eq!(sim_attention(shape, &a).unwrap(), sim_attention(shape, &b).unwrap());
    }

    #[test]
    fn rr_router_examples() {
        let sim = SimConfig { n_l: 4, ..one_byte() };
        let s = sim_linear(8, 10, 10, &sim, None).unwrap();
        assert_eq!(s.total.role_bytes(TensorRole::Weights), 200);
        let base = SimConfig { linear_fetch_policy: LinearPolicy::PerPatchRefetch, ..sim.clone() };
        assert_eq!(sim_linear(8, 10, 10, &base, None).unwrap().total.role_bytes(TensorRole::Weights), 800);
        // one group when n_l covers every token
        let wide = SimConfig { n_l: 16, ..sim.clone() };
        assert_eq!(sim_linear(8, 10, 10, &wide, None).unwrap().total.role_bytes(TensorRole::Weights), 100);
    }

    #[test]
    fn sparse_example() {
        let sim = SimConfig { n_l: 4, ..one_byte() };
        let load = ExpertLoad { counts: vec![5, 3], top_k: 1 };
        let s = sim_linear(8, 10, 10, &sim, Some(&load)).unwrap();
        assert_eq!(s.total.role_bytes(TensorRole::Weights), 300);
        let bad = ExpertLoad { counts: vec![5, 2], top_k: 1 };
        assert!(matches!(sim_linear(8, 10, 10, &sim, Some(&bad)), Err(SimError::Assignment(_))));
    }

    #[test]
    fn preload_reads_weights_once_or_fails() {
        let sim = SimConfig { weight_mode: WeightMode::Preload, onchip_capacity_bytes: 100, ..one_byte() };
        let s = sim_linear(64, 10, 10, &sim, None).unwrap();
        assert_eq!(s.total.role_bytes(TensorRole::Weights), 100);
        assert!(matches!(sim_linear(64, 10, 11, &sim, None), Err(SimError::Capacity { need: 110, have: 100 })));
        let fb = SimConfig { preload_fallback: true, ..sim };
        assert_eq!(sim_linear(8, 10, 11, &fb, None).unwrap().total.role_bytes(TensorRole::Weights), 220);
    }

    #[test]
    fn double_buffer_overlaps() {
        let on = one_byte();
        let off = SimConfig { double_buffer: false, ..one_byte() };
        let a = sim_linear(8, 32, 32, &on, None).unwrap().total;
        let b = sim_linear(8, 32, 32, &off, None).unwrap().total;
        assert_eq!(a.est_cycles, a.compute_cycles.max(a.memory_cycles));
        assert_eq!(b.est_cycles, b.compute_cycles + b.memory_cycles);
    }

    #[test]
    fn transactions_count_bursts() {
        let sim = SimConfig { tile_bytes: 64, ..one_byte() };
        let s = sim_attention(AttentionShape { tokens: 4, head_dim: 2, heads: 1 }, &sim).unwrap();
        // four roles of 8 bytes, one burst each
        assert_eq!(s.total.transactions, 4);
    }

    #[test]
    fn zero_sizes_are_rejected() {
        assert!(sim_linear(0, 4, 4, &one_byte(), None).is_err());
        assert!(sim_attention(AttentionShape { tokens: 0, head_dim: 2, heads: 1 }, &one_byte()).is_err());
    }
}
