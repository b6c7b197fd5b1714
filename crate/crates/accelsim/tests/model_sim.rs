use proptest::prelude::*;
use qmoe_accelsim::{
    expert_load, sim_attention, sim_linear, sim_model, AttentionShape, KPolicy, LinearPolicy, SimConfig, SimError,
    SimStats, TensorRole, WeightMode,
};
use qmoe_core::model::{forward, GateDecision, InitOptions, ModelConfig, ModelWeights};
use qmoe_core::numerics::Rng;

fn traced_gates(cfg: &ModelConfig, seed: u64) -> Vec<Option<Vec<GateDecision>>> {
    let mut rng = Rng::new(seed);
    let w = ModelWeights::random(cfg, &mut rng, &InitOptions::default()).unwrap();
    let x = rng.normal_matrix(cfg.n_tokens, cfg.dim, 1.0);
    forward(&x, &w, cfg).unwrap().trace.gates
}

fn closed_form_macs(cfg: &ModelConfig) -> u64 {
    let (n, d, h, hid) = (cfg.n_tokens as u64, cfg.dim as u64, cfg.n_heads as u64, cfg.hidden() as u64);
    let dh = cfg.head_dim as u64;
    (0..cfg.n_blocks)
        .map(|b| {
            let common = n * d * 3 * d + 2 * h * n * n * dh + n * d * d;
            let ffn = if cfg.is_moe(b) {
                n * d * cfg.n_experts as u64 + cfg.top_k as u64 * n * 2 * d * hid
            } else {
                2 * n * d * hid
            };
            common + ffn
        })
        .sum()
}

fn check_totals(s: &SimStats) {
    let sum = |f: fn(&qmoe_accelsim::KernelStats) -> u64| s.kernels.iter().map(f).sum::<u64>();
    assert_eq!(s.total.offchip_read_bytes, sum(|k| k.counters.offchip_read_bytes));
    assert_eq!(s.total.offchip_write_bytes, sum(|k| k.counters.offchip_write_bytes));
    assert_eq!(s.total.est_cycles, sum(|k| k.counters.est_cycles));
    assert_eq!(s.total.macs, sum(|k| k.counters.macs));
    let roles: u64 = s.total.bytes_by_role.values().sum();
    assert_eq!(roles, s.total.offchip_read_bytes + s.total.offchip_write_bytes);
}

#[test]
fn single_dense_block_is_attention_plus_four_linears() {
    let cfg = ModelConfig {
        moe_blocks: vec![],
        ..ModelConfig::new(8, 16, 2, 1, 4, 4, 2, 10)
    };
    let sim = SimConfig::default();
    let whole = sim_model(&cfg, &[None], &sim).unwrap();
    let parts = [
        sim_linear(8, 16, 48, &sim, None).unwrap(),
        sim_attention(AttentionShape::of(&cfg), &sim).unwrap(),
        sim_linear(8, 16, 16, &sim, None).unwrap(),
        sim_linear(8, 16, 64, &sim, None).unwrap(),
        sim_linear(8, 64, 16, &sim, None).unwrap(),
    ];
    assert_eq!(whole.total, SimStats::merge(parts, sim.clock_mhz).total);
    check_totals(&whole);
}

#[test]
fn mac_count_matches_closed_form() {
    let cfg = ModelConfig::tiny();
    let s = sim_model(&cfg, &traced_gates(&cfg, 4), &SimConfig::default()).unwrap();
    assert_eq!(s.total.macs, closed_form_macs(&cfg));
    check_totals(&s);
    assert!(s.gops_est > 0.0);
}

#[test]
fn real_gate_traces_conserve_routed_tokens() {
    let cfg = ModelConfig::new(16, 32, 4, 4, 4, 4, 2, 10);
    let gates = traced_gates(&cfg, 9);
    let sim = SimConfig { n_l: 4, ..SimConfig::default() };
    let s = sim_model(&cfg, &gates, &sim).unwrap();
    let w_bytes = (cfg.dim * cfg.hidden()) as u64;
    for (b, g) in gates.iter().enumerate() {
        let Some(dec) = g else { continue };
        let load = expert_load(dec, cfg.n_experts, cfg.top_k).unwrap();
        assert_eq!(load.total(), (cfg.n_tokens * cfg.top_k) as u64);
        let fc1 = s.kernels.iter().find(|k| k.block == Some(b) && k.name == "expert_fc1").unwrap();
        let want: u64 = load.counts.iter().map(|n| n.div_ceil(4) * w_bytes).sum();
        assert_eq!(fc1.counters.role_bytes(TensorRole::Weights), want);
    }
}

#[test]
fn trace_mismatches_are_rejected() {
    let cfg = ModelConfig::tiny();
    let sim = SimConfig::default();
    let mut gates = traced_gates(&cfg, 1);
    assert!(matches!(sim_model(&cfg, &gates[..1], &sim), Err(SimError::Trace(_))));
    gates.swap(0, 1);
    assert!(matches!(sim_model(&cfg, &gates, &sim), Err(SimError::Trace(_))));
    let mut gates = traced_gates(&cfg, 1);
    if let Some(d) = gates[1].as_mut() {
        d[0].experts = vec![0];
    }
    assert!(matches!(sim_model(&cfg, &gates, &sim), Err(SimError::Trace(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = SimConfig { n_pe: 0, ..SimConfig::default() };
    assert!(matches!(bad.validate(), Err(SimError::Config(_))));
    let bad = SimConfig { offchip_bytes_per_cycle: 0.0, ..SimConfig::default() };
    assert!(matches!(bad.validate(), Err(SimError::Config(_))));
}

fn sim_strategy() -> impl Strategy<Value = SimConfig> {
    (1u64..17, 1u64..17, 1u64..9, 1u64..64, 0.5f64..64.0, any::<bool>(), any::<bool>()).prop_map(
        |(n_pe, n_l, t_s, macs, bw, rr, db)| SimConfig {
            n_pe,
            n_l,
            t_s,
            macs_per_unit_per_cycle: macs,
            offchip_bytes_per_cycle: bw,
            linear_fetch_policy: if rr { LinearPolicy::RrRouter } else { LinearPolicy::PerPatchRefetch },
            double_buffer: db,
            ..SimConfig::default()
        },
    )
}

proptest! {
    #[test]
    fn more_bandwidth_never_slows_the_model(sim in sim_strategy(), seed in 0u64..50) {
        let cfg = ModelConfig::tiny();
        let gates = traced_gates(&cfg, seed);
        let a = sim_model(&cfg, &gates, &sim).unwrap();
        let fast = SimConfig { offchip_bytes_per_cycle: sim.offchip_bytes_per_cycle * 2.0, ..sim.clone() };
        let b = sim_model(&cfg, &gates, &fast).unwrap();
        prop_assert!(b.total.est_cycles <= a.total.est_cycles);
    }

    #[test]
    fn more_units_never_slow_the_model(sim in sim_strategy(), seed in 0u64..50) {
        let cfg = ModelConfig::tiny();
        let gates = traced_gates(&cfg, seed);
        let base = sim_model(&cfg, &gates, &sim).unwrap().total.est_cycles;
        let pe = SimConfig { n_pe: sim.n_pe * 2, ..sim.clone() };
        prop_assert!(sim_model(&cfg, &gates, &pe).unwrap().total.est_cycles <= base);
        let nl = SimConfig { n_l: sim.n_l * 2, ..sim.clone() };
        prop_assert!(sim_model(&cfg, &gates, &nl).unwrap().total.est_cycles <= base);
    }

    #[test]
    fn rr_router_never_fetches_more_weights(tokens in 1u64..64, n_l in 1u64..16, i in 1u64..64, o in 1u64..64) {
        let rr = SimConfig { n_l, ..SimConfig::default() };
        let pp = SimConfig { linear_fetch_policy: LinearPolicy::PerPatchRefetch, ..rr.clone() };
        let a = sim_linear(tokens, i, o, &rr, None).unwrap().total.role_bytes(TensorRole::Weights);
        let b = sim_linear(tokens, i, o, &pp, None).unwrap().total.role_bytes(TensorRole::Weights);
        prop_assert!(a <= b);
    }

    #[test]
    fn identical_inputs_give_identical_stats(sim in sim_strategy()) {
        let cfg = ModelConfig::tiny();
        let gates = traced_gates(&cfg, 3);
        prop_assert_eq!(sim_model(&cfg, &gates, &sim).unwrap(), sim_model(&cfg, &gates, &sim).unwrap());
    }
}

#[test]
fn naive_policy_can_be_slower_with_more_pes() {
    // with per-PE K/V copies, traffic grows with n_pe; this is the cost broadcast removes
    let shape = AttentionShape { tokens: 64, head_dim: 16, heads: 4 };
    let sim = |n_pe| SimConfig {
        n_pe,
        attention_k_policy: KPolicy::Naive,
        offchip_bytes_per_cycle: 1.0,
        weight_mode: WeightMode::Stream,
        ..SimConfig::default()
    };
    let a = sim_attention(shape, &sim(1)).unwrap().total.est_cycles;
    let b = sim_attention(shape, &sim(16)).unwrap().total.est_cycles;
    assert!(b > a);
}
