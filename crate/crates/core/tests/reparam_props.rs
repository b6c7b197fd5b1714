use proptest::prelude::*;
use qmoe_core::model::{top_k_gate, InitOptions, ModelConfig, ModelWeights};
use qmoe_core::numerics::{layernorm, linear, Matrix, Rng, LN_EPS};
use qmoe_core::quant::{quantize, QuantParams};
use qmoe_core::reparam::{
    compute_factors, restore_activations, restore_layernorm, restore_next_linear, rewrite_layernorm,
    rewrite_next_linear, transform_activations, ReparamFactors,
};

fn random_factors(rng: &mut Rng, d: usize, bits: u32) -> ReparamFactors {
    let hi = (1i64 << bits) - 1;
    let s: Vec<f64> = (0..d).map(|_| rng.uniform_range(0.001, 2.0)).collect();
    let z: Vec<i64> = (0..d).map(|_| rng.int_range(0, hi)).collect();
    compute_factors(&QuantParams::per_channel_asymmetric(bits, s, z)).unwrap()
}

fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    a.max_abs_diff(b) / b.max_abs().max(1e-300)
}

proptest! {
    #[test]
    fn rewritten_codes_are_shifted_asymmetric_codes(seed in any::<u64>(), d in 1usize..64, n in 1usize..8) {
        let mut rng = Rng::new(seed);
        let f = random_factors(&mut rng, d, 8);
        let x = Matrix::from_fn(n, d, |_, c| rng.uniform_range(-300.0, 300.0) * f.source.scales[c]);
        let asym = quantize(&x, &f.source).unwrap();
        let sym = quantize(&transform_activations(&x, &f).unwrap(), &f.symmetric_params()).unwrap();
        for (a, s) in asym.codes().iter().zip(sym.codes()) {
            prop_assert_eq!(a - 128, *s);
        }
    }

    #[test]
    fn next_linear_output_is_invariant(seed in any::<u64>(), d in 1usize..32, m in 1usize..16) {
        let mut rng = Rng::new(seed);
        let f = random_factors(&mut rng, d, 8);
        let x = rng.normal_matrix(4, d, 1.0);
        let w = rng.normal_matrix(d, m, 0.5);
        let b = rng.normal_vec(m, 0.1);
        let (w2, b2) = rewrite_next_linear(&w, &b, &f).unwrap();
        let want = linear(&x, &w, &b).unwrap();
        let got = linear(&transform_activations(&x, &f).unwrap(), &w2, &b2).unwrap();
        prop_assert!(rel_err(&got, &want) <= 1e-10);
    }

    #[test]
    fn layernorm_rewrite_transforms_its_output(seed in any::<u64>(), d in 2usize..32) {
        let mut rng = Rng::new(seed);
        let f = random_factors(&mut rng, d, 8);
        let x = rng.normal_matrix(3, d, 2.0);
        let g = rng.normal_vec(d, 1.0);
        let be = rng.normal_vec(d, 1.0);
        let (g2, b2) = rewrite_layernorm(&g, &be, &f).unwrap();
        let y = layernorm(&x, &g, &be, LN_EPS).unwrap();
        let y2 = layernorm(&x, &g2, &b2, LN_EPS).unwrap();
        prop_assert!(rel_err(&y2, &transform_activations(&y, &f).unwrap()) <= 1e-10);
        prop_assert!(rel_err(&restore_activations(&y2, &f).unwrap(), &y) <= 1e-10);
    }

    #[test]
    fn rewrite_then_restore_round_trips(seed in any::<u64>(), d in 1usize..24, m in 1usize..8) {
        let mut rng = Rng::new(seed);
        let f = random_factors(&mut rng, d, 8);
        let g = rng.normal_vec(d, 1.0);
        let be = rng.normal_vec(d, 1.0);
        let (g2, b2) = rewrite_layernorm(&g, &be, &f).unwrap();
        let (g3, b3) = restore_layernorm(&g2, &b2, &f).unwrap();
        for (a, b) in g.iter().zip(&g3).chain(be.iter().zip(&b3)) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        let w = rng.normal_matrix(d, m, 1.0);
        let b = rng.normal_vec(m, 1.0);
        let (w2, bb2) = rewrite_next_linear(&w, &b, &f).unwrap();
        let (w3, bb3) = restore_next_linear(&w2, &bb2, &f).unwrap();
        prop_assert!(rel_err(&w3, &w) <= 1e-12);
        for (a, c) in b.iter().zip(&bb3) {
            prop_assert!((a - c).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn gate_routing_is_invariant(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (d, m) = (16, 4);
        let f = random_factors(&mut rng, d, 8);
        let y = rng.normal_matrix(8, d, 1.0);
        let wg = rng.normal_matrix(d, m, 0.25);
        let bg = rng.normal_vec(m, 0.02);
        let (wg2, bg2) = rewrite_next_linear(&wg, &bg, &f).unwrap();
        let y2 = transform_activations(&y, &f).unwrap();
        for t in 0..y.rows() {
            let a = top_k_gate(y.row(t), &wg, &bg, 2).unwrap();
            let b = top_k_gate(y2.row(t), &wg2, &bg2, 2).unwrap();
            prop_assert_eq!(a.expert_set(), b.expert_set());
        }
    }
}

#[test]
fn identity_factors_leave_weights_alone() {
    let cfg = ModelConfig::tiny();
    let w = ModelWeights::random(&cfg, &mut Rng::new(5), &InitOptions::default()).unwrap();
    let d = cfg.dim;
    let f = compute_factors(&QuantParams::per_channel_asymmetric(8, vec![0.0625; d], vec![128; d])).unwrap();
    let b = &w.blocks[0];
    let (w2, b2) = rewrite_next_linear(&b.w_qkv, &b.b_qkv, &f).unwrap();
    assert_eq!((w2, b2), (b.w_qkv.clone(), b.b_qkv.clone()));
}
