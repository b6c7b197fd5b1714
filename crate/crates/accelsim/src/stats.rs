use std::collections::BTreeMap;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Q,
    K,
    V,
    Weights,
    Activations,
    Outputs,
}

/// Traffic and cycle counters. Bytes are off-chip.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub offchip_read_bytes: u64,
    pub offchip_write_bytes: u64,
    pub transactions: u64,
    pub compute_cycles: u64,
    pub memory_cycles: u64,
    pub est_cycles: u64,
    pub macs: u64,
    pub bytes_by_role: BTreeMap<TensorRole, u64>,
}

impl Counters {
    pub fn role_bytes(&self, role: TensorRole) -> u64 {
        self.bytes_by_role.get(&role).copied().unwrap_or(0)
    }
}

impl AddAssign<&Counters> for Counters {
    fn add_assign(&mut self, o: &Counters) {
        self.offchip_read_bytes += o.offchip_read_bytes;
        self.offchip_write_bytes += o.offchip_write_bytes;
        self.transactions += o.transactions;
        self.compute_cycles += o.compute_cycles;
        self.memory_cycles += o.memory_cycles;
        self.est_cycles += o.est_cycles;
        self.macs += o.macs;
        for (r, b) in &o.bytes_by_role {
            *self.bytes_by_role.entry(*r).or_insert(0) += b;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelStats {
    /// e.g. `"qkv"`, `"attention"`, `"expert_fc1"`.
    pub name: String,
    /// Owning block, if the kernel was produced by [`crate::sim_model`].
    pub block: Option<usize>,
    #[serde(flatten)]
    pub counters: Counters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimStats {
    pub kernels: Vec<KernelStats>,
    /// Sum of every kernel's counters.
    pub total: Counters,
    /// `2 · macs / est_cycles · clock`, in GOPS.
    pub gops_est: f64,
}

impl SimStats {
    pub fn from_kernels(kernels: Vec<KernelStats>, clock_mhz: f64) -> Self {
        let mut total = Counters::default();
        for k in &kernels {
            total += &k.counters;
        }
        let gops_est = if total.est_cycles == 0 {
            0.0
        } else {
            2.0 * total.macs as f64 * clock_mhz * 1e6 / total.est_cycles as f64 / 1e9
        };
        Self {
            kernels,
            total,
            gops_est,
        }
    }

    /// Concatenates kernel lists and recomputes the totals.
    pub fn merge(parts: impl IntoIterator<Item = SimStats>, clock_mhz: f64) -> Self {
        let kernels = parts.into_iter().flat_map(|s| s.kernels).collect();
        Self::from_kernels(kernels, clock_mhz)
    }

    pub fn kernel(&self, name: &str) -> Option<&KernelStats> {
        self.kernels.iter().find(|k| k.name == name)
    }
}
