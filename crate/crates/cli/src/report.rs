//! JSON documents written by `quantize`, `eval` and `sim`.
//!
//! Inputs are identified by the SHA-256 of their archive blob, never by
//! path, so a re-run from another directory produces the same bytes.

use std::path::Path;

use qmoe_accelsim::{SimConfig, SimStats, TensorRole};
use qmoe_core::model::ModelConfig;
use qmoe_core::qinfer::{AgreementReport, QuantOptions, QuantizedModel};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteFactors {
    pub site: String,
    pub r1: Vec<f64>,
    pub r2: Vec<i64>,
    pub s_tilde: f64,
}

pub fn site_factors(qm: &QuantizedModel) -> Vec<SiteFactors> {
    qm.factors()
        .into_iter()
        .map(|(id, f)| SiteFactors {
            site: id.to_string(),
            r1: f.r1.clone(),
            r2: f.r2.clone(),
            s_tilde: f.s_tilde,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizeAudit {
    pub schema_version: u32,
    pub seed: u64,
    pub config: ModelConfig,
    pub options: QuantOptions,
    pub model_sha256: String,
    pub calib_sha256: String,
    pub n_calib: usize,
    pub output_sha256: String,
    pub rewritten_sites: Vec<SiteFactors>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteRow {
    pub site: String,
    pub mse: f64,
    pub baseline_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRun {
    pub options: QuantOptions,
    pub quant_sha256: String,
    pub agreement: AgreementReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub seed: u64,
    pub config: ModelConfig,
    pub options: QuantOptions,
    pub float_sha256: String,
    pub quant_sha256: String,
    pub inputs_sha256: String,
    pub agreement: AgreementReport,
    pub baseline: Option<BaselineRun>,
    pub site_table: Vec<SiteRow>,
    pub factors: Vec<SiteFactors>,
    pub checks: Vec<Check>,
}

impl EvalReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// One point of a simulator sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimPoint {
    pub sim: SimConfig,
    pub stats: SimStats,
}

impl SimPoint {
    pub fn role_bytes(&self, role: TensorRole) -> u64 {
        self.stats.total.role_bytes(role)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub schema_version: u32,
    pub seed: u64,
    pub config: ModelConfig,
    pub model_sha256: String,
    pub inputs_sha256: String,
    pub input_index: usize,
    /// Whether routing came from the quantized model rather than the float one.
    pub quantized_routing: bool,
    pub points: Vec<SimPoint>,
}

pub const CSV_HEADER: &str = "n_pe,n_l,offchip_bytes_per_cycle,k_policy,linear_policy,weight_mode,\
q_bytes,k_bytes,v_bytes,weight_bytes,activation_bytes,output_bytes,read_bytes,write_bytes,\
transactions,compute_cycles,memory_cycles,est_cycles,macs,gops_est";

fn snake<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_string))
        .unwrap_or_default()
}

impl SimReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for p in &self.points {
            let t = &p.stats.total;
            let row = [
                p.sim.n_pe.to_string(),
                p.sim.n_l.to_string(),
                p.sim.offchip_bytes_per_cycle.to_string(),
                snake(&p.sim.attention_k_policy),
                snake(&p.sim.linear_fetch_policy),
                snake(&p.sim.weight_mode),
                p.role_bytes(TensorRole::Q).to_string(),
                p.role_bytes(TensorRole::K).to_string(),
                p.role_bytes(TensorRole::V).to_string(),
                p.role_bytes(TensorRole::Weights).to_string(),
                p.role_bytes(TensorRole::Activations).to_string(),
                p.role_bytes(TensorRole::Outputs).to_string(),
                t.offchip_read_bytes.to_string(),
                t.offchip_write_bytes.to_string(),
                t.transactions.to_string(),
                t.compute_cycles.to_string(),
                t.memory_cycles.to_string(),
                t.est_cycles.to_string(),
                t.macs.to_string(),
                p.stats.gops_est.to_string(),
            ];
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn to_json<T: Serialize>(v: &T) -> anyhow::Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

/// Writes `text` to `path`, or to stdout when no path is given.
pub fn emit(text: &str, path: Option<&Path>) -> anyhow::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| anyhow::anyhow!("writing {}: {e}", p.display())),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use qmoe_accelsim::sim_model;

    #[test]
    fn sim_report_round_trips_and_has_one_csv_row_per_point() {
        let cfg = ModelConfig::tiny();
        let gates: Vec<_> = (0..cfg.n_blocks).map(|_| None).collect();
        let mut cfg_dense = cfg.clone();
        cfg_dense.moe_blocks.clear();
        let points = [1, 2]
            .iter()
            .map(|&n| {
                let sim = SimConfig { n_pe: n, ..SimConfig::default() };
                SimPoint { stats: sim_model(&cfg_dense, &gates, &sim).unwrap(), sim }
            })
            .collect();
        let r = SimReport {
            schema_version: SCHEMA_VERSION,
            seed: 3,
            config: cfg_dense,
            model_sha256: "m".into(),
            inputs_sha256: "i".into(),
            input_index: 0,
            quantized_routing: false,
            points,
        };
        let text = to_json(&r).unwrap();
        let back: SimReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(to_json(&back).unwrap(), text);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("1,4,16,broadcast,rr_router,stream,"));
    }
}
