use proptest::prelude::*;
use qmoe_core::logquant::{fused_softmax_av, log_sqrt2_code, max_code, shift_av_row, shift_dequant};
use qmoe_core::numerics::Rng;
use qmoe_core::quant::{ChannelAxis, QTensor, QuantParams};

fn oracle(codes: &[i32], v: &[i64]) -> (f64, f64) {
    let terms = codes.iter().zip(v).map(|(&c, &x)| x as f64 * (-(c as f64) / 2.0).exp2());
    terms.fold((0.0, 0.0), |(s, a), t| (s + t, a + t.abs()))
}

#[test]
fn every_four_bit_code_squares_to_a_power_of_two() {
    for c in 0..=max_code(4) {
        let d = shift_dequant(c, 4).unwrap();
        assert!(d.square_is_pow2_neg(c as u32), "code {c}");
        assert!((d.value() - (-(c as f64) / 2.0).exp2()).abs() < 1e-15);
    }
}

proptest! {
    #[test]
    fn shift_product_matches_float_oracle(seed in any::<u64>(), len in 1usize..64, bits in 2u32..7) {
        let mut rng = Rng::new(seed);
        let codes: Vec<i32> = (0..len).map(|_| rng.int_range(0, max_code(bits) as i64) as i32).collect();
        let v: Vec<i64> = (0..len).map(|_| rng.int_range(-128, 127)).collect();
        let got = shift_av_row(&codes, &v, bits).unwrap().value();
        let (want, mag) = oracle(&codes, &v);
        prop_assert!((got - want).abs() <= 1e-12 * mag.max(1e-300));
    }

    #[test]
    fn max_score_always_gets_code_zero(seed in any::<u64>(), len in 1usize..32) {
        let mut rng = Rng::new(seed);
        let scores: Vec<f64> = (0..len).map(|_| rng.normal() * 4.0).collect();
        let v = QTensor::from_codes(len, 1, vec![1; len], QuantParams::symmetric(8, 1.0), ChannelAxis::Col).unwrap();
        let (_, trace) = fused_softmax_av(&scores, &v, 4).unwrap();
        let best = scores.iter().enumerate().fold(0, |b, (i, s)| if *s > scores[b] { i } else { b });
        prop_assert_eq!(trace.codes[best], 0);
        prop_assert!(trace.denominator >= 1.0);
    }

    #[test]
    fn larger_probabilities_never_get_larger_codes(a in 1e-12f64..1.0, b in 1e-12f64..1.0, bits in 1u32..9) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(log_sqrt2_code(hi, bits).unwrap() <= log_sqrt2_code(lo, bits).unwrap());
    }
}
