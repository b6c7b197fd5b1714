//! Log-base-√2 quantization of softmax numerators and the shift-only
//! attention-value product.
//!
//! A code `c` stands for `2^{-c/2}`. Splitting on parity,
//! `2^{-c/2} = 2^{-⌈c/2⌉} · (√2 if c odd else 1)`, so multiplying an integer
//! `v` by a dequantized probability is a right shift by `⌈c/2⌉`, with odd codes
//! routed to a separate accumulator whose total is scaled by `√2` once at the
//! end. [`DyadicRoot2`] holds both accumulators at a fixed fractional width so
//! every shift is exact.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::Matrix;
use crate::quant::{Granularity, QTensor};

pub const DEFAULT_ATTN_BITS: u32 = 4;

/// Fractional width cap. Widths up to 6 bits fit under it and stay exact;
/// above that, shifts past the cap truncate like a hardware shifter.
pub const MAX_FRAC_BITS: u32 = 32;

pub fn max_code(bits: u32) -> i32 {
    ((1i64 << bits) - 1) as i32
}

/// Fractional width `⌈(2^b − 1)/2⌉`, capped at [`MAX_FRAC_BITS`].
pub fn frac_bits(bits: u32) -> u32 {
    let full = (max_code(bits) as u32).div_ceil(2);
    full.min(MAX_FRAC_BITS)
}

fn check_bits(bits: u32) -> Result<()> {
    if !(1..=16).contains(&bits) {
        return Err(Error::InvalidArgument(format!("attention bit width {bits} outside [1, 16]")));
    }
    Ok(())
}

/// `clip(⌊−2·log2 a⌉, 0, 2^b − 1)`; `a = 0` maps to the largest code.
pub fn log_sqrt2_code(a: f64, bits: u32) -> Result<i32> {
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::OutOfRange(format!("log-sqrt2 quantizer input {a} outside [0, 1]")));
    }
    let hi = max_code(bits);
    if a == 0.0 {
        return Ok(hi);
    }
    let c = (-2.0 * a.log2()).round_ties_even();
    Ok(c.clamp(0.0, hi as f64) as i32)
}

/// Codes of a log-√2 quantized matrix; the scale is fixed at 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogQTensor {
    pub rows: usize,
    pub cols: usize,
    pub bits: u32,
    pub codes: Vec<i32>,
}

impl LogQTensor {
    pub fn code(&self, r: usize, c: usize) -> i32 {
        self.codes[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[i32] {
        &self.codes[r * self.cols..(r + 1) * self.cols]
    }

    /// `2^{-c/2}` per element in floating point.
    pub fn dequantize(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |r, c| (-(self.code(r, c) as f64) / 2.0).exp2())
    }
}

pub fn log_sqrt2_quantize(a: &Matrix, bits: u32) -> Result<LogQTensor> {
    check_bits(bits)?;
    let codes = a
        .data()
        .iter()
        .map(|&v| log_sqrt2_code(v, bits))
        .collect::<Result<Vec<_>>>()?;
    Ok(LogQTensor {
        rows: a.rows(),
        cols: a.cols(),
        bits,
        codes,
    })
}

/// `(even + √2 · odd) / 2^frac_bits` with integer accumulators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DyadicRoot2 {
    pub even: i64,
    pub odd: i64,
    pub frac_bits: u32,
}

impl DyadicRoot2 {
    pub fn zero(frac_bits: u32) -> Self {
        Self {
            even: 0,
            odd: 0,
            frac_bits,
        }
    }

    pub fn value(&self) -> f64 {
        (self.even as f64 + std::f64::consts::SQRT_2 * self.odd as f64) / (self.frac_bits as f64).exp2()
    }

    /// The exact square as `(rational, sqrt2_coeff)` over `2^{2·frac_bits}`:
    /// `(e + √2 o)² = (e² + 2o²) + √2 · 2eo`.
    pub fn square(&self) -> (i128, i128) {
        let e = self.even as i128;
        let o = self.odd as i128;
        (e * e + 2 * o * o, 2 * e * o)
    }

    /// True when the value squared equals `2^{-k}` exactly.
    pub fn square_is_pow2_neg(&self, k: u32) -> bool {
        let (rat, root) = self.square();
        if root != 0 || rat <= 0 {
            return false;
        }
        // rat / 2^{2F} == 2^{-k}  ⇔  rat · 2^k == 2^{2F}
        let two_f = 2 * self.frac_bits;
        match (rat.checked_shl(k), 1i128.checked_shl(two_f)) {
            (Some(lhs), Some(rhs)) if k < 127 && two_f < 127 => lhs == rhs,
            _ => false,
        }
    }
}

/// Adds `v · 2^{-⌈c/2⌉}` into one accumulator by shifting.
fn shift_term(v: i64, shift: u32, frac: u32) -> Result<i64> {
    if shift <= frac {
        let up = frac - shift;
        let t = v.checked_shl(up).filter(|t| (t >> up) == v);
        t.ok_or_else(|| Error::Overflow(format!("{v} << {up} exceeds 64 bits")))
    } else {
        // truncating right shift for widths above the exact-shift cap
        let down = shift - frac;
        Ok(if down >= 63 { v >> 63 } else { v >> down })
    }
}

/// Value of a single code, `2^{-code/2}`.
pub fn shift_dequant(code: i32, bits: u32) -> Result<DyadicRoot2> {
    shift_av_row(&[code], &[1], bits)
}

/// `Σ v[i] · 2^{-codes[i]/2}` using only shifts and adds.
pub fn shift_av_row(codes: &[i32], v: &[i64], bits: u32) -> Result<DyadicRoot2> {
    check_bits(bits)?;
    if codes.len() != v.len() {
        return shape_err("shift_av_row", format!("{} codes vs {} values", codes.len(), v.len()));
    }
    let hi = max_code(bits);
    let frac = frac_bits(bits);
    let mut acc = DyadicRoot2::zero(frac);
    for (&c, &x) in codes.iter().zip(v) {
        if !(0..=hi).contains(&c) {
            return Err(Error::OutOfRange(format!("code {c} outside [0, {hi}]")));
        }
        let shift = (c as u32).div_ceil(2);
        let t = shift_term(x, shift, frac)?;
        let slot = if c % 2 == 0 { &mut acc.even } else { &mut acc.odd };
        *slot = slot
            .checked_add(t)
            .ok_or_else(|| Error::Overflow("shift accumulator overflow".into()))?;
    }
    Ok(acc)
}

/// What the fused softmax pipeline did for one row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub row_len: usize,
    pub out_channels: usize,
    /// Pass 1 output.
    pub max_score: f64,
    /// Pass 2 full-precision sum of numerators.
    pub denominator: f64,
    /// Pass 2 quantized numerators.
    pub codes: Vec<i32>,
    pub exp_evals: usize,
    pub shift_adds: usize,
    /// Pass 3 final `recip(l) · s_v` multiplies.
    pub scale_multiplies: usize,
}

/// One attention row: softmax numerators quantized to log-√2 codes, then
/// shift-accumulated against integer `V` and scaled once by `s_v / l`.
///
/// `v_q` is `len × D_h`, symmetric, with per-layer or per-column scales.
pub fn fused_softmax_av(scores: &[f64], v_q: &QTensor, attn_bits: u32) -> Result<(Vec<f64>, PipelineTrace)> {
    if scores.is_empty() {
        return Err(Error::Empty("fused_softmax_av scores"));
    }
    if v_q.rows() != scores.len() {
        return shape_err(
            "fused_softmax_av",
            format!("{} scores vs V with {} rows", scores.len(), v_q.rows()),
        );
    }
    let vp = v_q.params();
    if !vp.symmetric {
        return Err(Error::InvalidArgument("V must be symmetrically quantized".into()));
    }
    if vp.granularity == Granularity::PerChannel && v_q.axis() == crate::quant::ChannelAxis::Row {
        return Err(Error::InvalidArgument("V scales must be per-layer or per-column".into()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite score {s}")));
    }

    // pass 1
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    // pass 2
    let mut l = 0.0;
    let mut codes = Vec::with_capacity(scores.len());
    for &s in scores {
        let f = (s - m).exp();
        l += f;
        codes.push(log_sqrt2_code(f, attn_bits)?);
    }

    // pass 3
    let d = v_q.cols();
    let recip = 1.0 / l;
    let mut out = Vec::with_capacity(d);
    let mut column = vec![0i64; scores.len()];
    for c in 0..d {
        for (r, slot) in column.iter_mut().enumerate() {
            *slot = v_q.code(r, c) as i64;
        }
        let acc = shift_av_row(&codes, &column, attn_bits)?;
        out.push(acc.value() * (recip * vp.scale(c)));
    }
    let trace = PipelineTrace {
        row_len: scores.len(),
        out_channels: d,
        max_score: m,
        denominator: l,
        codes,
        exp_evals: scores.len(),
        shift_adds: scores.len() * d,
        scale_multiplies: d,
    };
    Ok((out, trace))
}
