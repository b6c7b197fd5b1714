//! Uniform quantizers, min-max calibration and integer matrix products.
//!
//! Rounding is round-half-to-even everywhere. Codes are stored as `i32` and
//! range-checked against the bit width; integer products accumulate in `i64`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::Matrix;

/// Scale used for channels whose calibration range is empty.
pub const SCALE_FLOOR: f64 = 1e-8;

/// Largest inner dimension accepted by [`int_matmul`].
pub const MAX_INNER_DIM: usize = 1 << 15;

pub const MAX_BITS: u32 = 16;

#[inline]
pub fn round_half_even(x: f64) -> f64 {
    x.round_ties_even()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerLayer,
    PerChannel,
}

/// Which matrix axis indexes channels for per-channel parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelAxis {
    Row,
    Col,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u32,
    pub symmetric: bool,
    pub granularity: Granularity,
    pub scales: Vec<f64>,
    /// Empty when symmetric.
    #[serde(default)]
    pub zero_points: Vec<i64>,
}

impl QuantParams {
    pub fn symmetric(bits: u32, scale: f64) -> Self {
        Self {
            bits,
            symmetric: true,
            granularity: Granularity::PerLayer,
            scales: vec![scale],
            zero_points: Vec::new(),
        }
    }

    pub fn asymmetric(bits: u32, scale: f64, zero_point: i64) -> Self {
        Self {
            bits,
            symmetric: false,
            granularity: Granularity::PerLayer,
            scales: vec![scale],
            zero_points: vec![zero_point],
        }
    }

    pub fn per_channel_symmetric(bits: u32, scales: Vec<f64>) -> Self {
        Self {
            bits,
            symmetric: true,
            granularity: Granularity::PerChannel,
            scales,
            zero_points: Vec::new(),
        }
    }

    pub fn per_channel_asymmetric(bits: u32, scales: Vec<f64>, zero_points: Vec<i64>) -> Self {
        Self {
            bits,
            symmetric: false,
            granularity: Granularity::PerChannel,
            scales,
            zero_points,
        }
    }

    /// Inclusive code range.
    pub fn code_range(&self) -> (i64, i64) {
        code_range(self.bits, self.symmetric)
    }

    pub fn scale(&self, channel: usize) -> f64 {
        match self.granularity {
            Granularity::PerLayer => self.scales[0],
            Granularity::PerChannel => self.scales[channel],
        }
    }

    pub fn zero_point(&self, channel: usize) -> i64 {
        if self.symmetric {
            return 0;
        }
        match self.granularity {
            Granularity::PerLayer => self.zero_points[0],
            Granularity::PerChannel => self.zero_points[channel],
        }
    }

    pub fn n_params(&self) -> usize {
        self.scales.len()
    }

    /// Checks internal consistency, and the channel count when per-channel.
    pub fn validate(&self, n_channels: Option<usize>) -> Result<()> {
        if self.bits < 2 || self.bits > MAX_BITS {
            return Err(Error::InvalidArgument(format!(
                "bit width {} outside [2, {MAX_BITS}]",
                self.bits
            )));
        }
        if self.scales.is_empty() {
            return Err(Error::Empty("quantization scales"));
        }
        if let Some(s) = self.scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {s}")));
        }
        match self.granularity {
            Granularity::PerLayer if self.scales.len() != 1 => {
                return Err(Error::InvalidArgument("per-layer params need exactly one scale".into()))
            }
            Granularity::PerChannel => {
                if let Some(n) = n_channels {
                    if self.scales.len() != n {
                        return shape_err(
                            "QuantParams::validate",
                            format!("{} scales for {n} channels", self.scales.len()),
                        );
                    }
                }
            }
            _ => {}
        }
        if self.symmetric {
            if !self.zero_points.is_empty() {
                return Err(Error::InvalidArgument("symmetric params carry zero points".into()));
            }
        } else {
            if self.zero_points.len() != self.scales.len() {
                return Err(Error::InvalidArgument("one zero point per scale required".into()));
            }
            let hi = (1i64 << self.bits) - 1;
            if let Some(z) = self.zero_points.iter().find(|z| **z < 0 || **z > hi) {
                return Err(Error::OutOfRange(format!("zero point {z} outside [0, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Inclusive code range for a bit width.
pub fn code_range(bits: u32, symmetric: bool) -> (i64, i64) {
    if symmetric {
        (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1)
    } else {
        (0, (1i64 << bits) - 1)
    }
}

/// Integer-coded matrix with the parameters that govern it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTensor {
    rows: usize,
    cols: usize,
    codes: Vec<i32>,
    params: QuantParams,
    axis: ChannelAxis,
}

impl QTensor {
    /// Wraps existing codes, rejecting any outside the parameters' range.
    pub fn from_codes(
        rows: usize,
        cols: usize,
        codes: Vec<i32>,
        params: QuantParams,
        axis: ChannelAxis,
    ) -> Result<Self> {
        if codes.len() != rows * cols {
            return shape_err("QTensor::from_codes", format!("{} codes for {rows}x{cols}", codes.len()));
        }
        let n_channels = match axis {
            ChannelAxis::Row => rows,
            ChannelAxis::Col => cols,
        };
        params.validate(Some(n_channels))?;
        let (lo, hi) = params.code_range();
        if let Some(c) = codes.iter().find(|&&c| (c as i64) < lo || (c as i64) > hi) {
            return Err(Error::OutOfRange(format!("code {c} outside [{lo}, {hi}]")));
        }
        Ok(Self {
            rows,
            cols,
            codes,
            params,
            axis,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }

    pub fn axis(&self) -> ChannelAxis {
        self.axis
    }

    #[inline]
    pub fn code(&self, r: usize, c: usize) -> i32 {
        self.codes[r * self.cols + c]
    }

    #[inline]
    fn channel(&self, r: usize, c: usize) -> usize {
        match self.axis {
            ChannelAxis::Row => r,
            ChannelAxis::Col => c,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut codes = Vec::with_capacity(self.codes.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                codes.push(self.code(r, c));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            codes,
            params: self.params.clone(),
            axis: match self.axis {
                ChannelAxis::Row => ChannelAxis::Col,
                ChannelAxis::Col => ChannelAxis::Row,
            },
        }
    }

    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        if self.params.granularity == Granularity::PerChannel && self.axis == ChannelAxis::Row {
            return Err(Error::InvalidArgument("select_rows needs column-wise params".into()));
        }
        let mut codes = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            codes.extend_from_slice(&self.codes[i * self.cols..(i + 1) * self.cols]);
        }
        Ok(Self {
            rows: indices.len(),
            cols: self.cols,
            codes,
            params: self.params.clone(),
            axis: self.axis,
        })
    }

    /// Columns `[start, end)`; only valid for per-layer parameters.
    pub fn col_slice(&self, start: usize, end: usize) -> Result<Self> {
        if self.params.granularity != Granularity::PerLayer {
            return Err(Error::InvalidArgument("col_slice needs per-layer params".into()));
        }
        let mut codes = Vec::with_capacity(self.rows * (end - start));
        for r in 0..self.rows {
            codes.extend_from_slice(&self.codes[r * self.cols + start..r * self.cols + end]);
        }
        Ok(Self {
            rows: self.rows,
            cols: end - start,
            codes,
            params: self.params.clone(),
            axis: self.axis,
        })
    }
}

/// Min-max calibration over all rows of `samples`.
///
/// Per-channel parameters are computed per column.
pub fn calibrate(
    samples: &[Matrix],
    bits: u32,
    symmetric: bool,
    granularity: Granularity,
) -> Result<QuantParams> {
    let first = samples.first().ok_or(Error::Empty("calibration samples"))?;
    let cols = first.cols();
    if samples.iter().any(|s| s.cols() != cols) {
        return shape_err("calibrate", "samples have different widths");
    }
    if samples.iter().all(|s| s.rows() == 0) {
        return Err(Error::Empty("calibration samples"));
    }
    let n_ch = match granularity {
        Granularity::PerLayer => 1,
        Granularity::PerChannel => cols,
    };
    let mut lo = vec![f64::INFINITY; n_ch];
    let mut hi = vec![f64::NEG_INFINITY; n_ch];
    for s in samples {
        for r in 0..s.rows() {
            for (c, &v) in s.row(r).iter().enumerate() {
                let ch = if n_ch == 1 { 0 } else { c };
                lo[ch] = lo[ch].min(v);
                hi[ch] = hi[ch].max(v);
            }
        }
    }
    let params = minmax_params(&lo, &hi, bits, symmetric, granularity);
    params.validate(Some(n_ch))?;
    Ok(params)
}

/// Parameters from per-channel (or single) observed ranges.
pub fn minmax_params(lo: &[f64], hi: &[f64], bits: u32, symmetric: bool, granularity: Granularity) -> QuantParams {
    let levels = ((1i64 << bits) - 1) as f64;
    let half = ((1i64 << (bits - 1)) - 1) as f64;
    let mut scales = Vec::with_capacity(lo.len());
    let mut zps = Vec::new();
    for (&l, &h) in lo.iter().zip(hi) {
        // the range always covers zero so z never clips
        let (l, h) = (l.min(0.0), h.max(0.0));
        if symmetric {
            scales.push((l.abs().max(h.abs()) / half).max(SCALE_FLOOR));
        } else {
            let s = ((h - l) / levels).max(SCALE_FLOOR);
            let z = round_half_even(-l / s).clamp(0.0, levels) as i64;
            scales.push(s);
            zps.push(z);
        }
    }
    QuantParams {
        bits,
        symmetric,
        granularity,
        scales,
        zero_points: zps,
    }
}

/// Quantizes one value with scale `s` and zero point `z`.
#[inline]
pub fn quantize_value(x: f64, s: f64, z: i64, range: (i64, i64)) -> i64 {
    let q = round_half_even(x / s) + z as f64;
    q.clamp(range.0 as f64, range.1 as f64) as i64
}

/// `clip(⌊x/s⌉ + z)` elementwise, channels along columns.
pub fn quantize(x: &Matrix, p: &QuantParams) -> Result<QTensor> {
    quantize_along(x, p, ChannelAxis::Col)
}

pub fn quantize_along(x: &Matrix, p: &QuantParams, axis: ChannelAxis) -> Result<QTensor> {
    let n_ch = match axis {
        ChannelAxis::Row => x.rows(),
        ChannelAxis::Col => x.cols(),
    };
    p.validate(Some(n_ch))?;
    let range = p.code_range();
    let mut codes = Vec::with_capacity(x.rows() * x.cols());
    for r in 0..x.rows() {
        for (c, &v) in x.row(r).iter().enumerate() {
            let ch = if axis == ChannelAxis::Row { r } else { c };
            codes.push(quantize_value(v, p.scale(ch), p.zero_point(ch), range) as i32);
        }
    }
    Ok(QTensor {
        rows: x.rows(),
        cols: x.cols(),
        codes,
        params: p.clone(),
        axis,
    })
}

/// `s · (q − z)` elementwise.
pub fn dequantize(q: &QTensor) -> Matrix {
    Matrix::from_fn(q.rows, q.cols, |r, c| {
        let ch = q.channel(r, c);
        q.params.scale(ch) * (q.code(r, c) as i64 - q.params.zero_point(ch)) as f64
    })
}

/// `dequantize(quantize(x))`.
pub fn fake_quant(x: &Matrix, p: &QuantParams) -> Result<Matrix> {
    Ok(dequantize(&quantize(x, p)?))
}

/// Row-major `i64` matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i64>,
}

impl IntMatrix {
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> i64 {
        self.data[r * self.cols + c]
    }
}

/// Integer product and the per-output-column real scale it carries.
#[derive(Clone, Debug, PartialEq)]
pub struct IntProduct {
    pub acc: IntMatrix,
    /// `s_x · s_w[j]`; one entry per output column (all equal for per-layer weights).
    pub scales: Vec<f64>,
}

impl IntProduct {
    /// Output columns `[start, end)`.
    pub fn col_slice(&self, start: usize, end: usize) -> Self {
        let mut data = Vec::with_capacity(self.acc.rows * (end - start));
        for r in 0..self.acc.rows {
            data.extend_from_slice(&self.acc.data[r * self.acc.cols + start..r * self.acc.cols + end]);
        }
        Self {
            acc: IntMatrix {
                rows: self.acc.rows,
                cols: end - start,
                data,
            },
            scales: self.scales[start..end].to_vec(),
        }
    }

    pub fn dequantize(&self) -> Matrix {
        Matrix::from_fn(self.acc.rows, self.acc.cols, |r, c| {
            self.acc.get(r, c) as f64 * self.scales[c]
        })
    }
}

fn check_product(xq: &QTensor, wq: &QTensor, op: &'static str) -> Result<()> {
    if xq.cols != wq.rows {
        return shape_err(op, format!("{}x{} · {}x{}", xq.rows, xq.cols, wq.rows, wq.cols));
    }
    if xq.cols > MAX_INNER_DIM {
        return Err(Error::Overflow(format!(
            "inner dimension {} exceeds {MAX_INNER_DIM}",
            xq.cols
        )));
    }
    if xq.params.granularity == Granularity::PerChannel && xq.axis == ChannelAxis::Col {
        return Err(Error::InvalidArgument(
            "activation scales along the reduction axis cannot be factored out".into(),
        ));
    }
    if wq.params.granularity == Granularity::PerChannel && wq.axis == ChannelAxis::Row {
        return Err(Error::InvalidArgument(
            "weight scales along the reduction axis cannot be factored out".into(),
        ));
    }
    Ok(())
}

fn raw_product(xq: &QTensor, wq: &QTensor) -> IntMatrix {
    let mut data = vec![0i64; xq.rows * wq.cols];
    for i in 0..xq.rows {
        let out = &mut data[i * wq.cols..(i + 1) * wq.cols];
        for k in 0..xq.cols {
            let a = xq.code(i, k) as i64;
            if a == 0 {
                continue;
            }
            let w_row = &wq.codes[k * wq.cols..(k + 1) * wq.cols];
            for (o, &w) in out.iter_mut().zip(w_row) {
                *o += a * w as i64;
            }
        }
    }
    IntMatrix {
        rows: xq.rows,
        cols: wq.cols,
        data,
    }
}

/// Symmetric integer product `X_q · W_q` with its single scale per column.
///
/// `X` must be per-layer (or per-row); `W` per-layer or per-output-column.
/// With codes of at most 16 bits and inner dimension at most 2^15 the `i64`
/// accumulator cannot overflow.
pub fn int_matmul(xq: &QTensor, wq: &QTensor) -> Result<IntProduct> {
    if !(xq.params.symmetric && wq.params.symmetric) {
        return Err(Error::InvalidArgument("int_matmul needs symmetric operands".into()));
    }
    if xq.params.granularity == Granularity::PerChannel {
        return Err(Error::InvalidArgument("int_matmul needs per-layer activations".into()));
    }
    check_product(xq, wq, "int_matmul")?;
    let sx = xq.params.scale(0);
    let scales = (0..wq.cols).map(|j| sx * wq.params.scale(j)).collect();
    Ok(IntProduct {
        acc: raw_product(xq, wq),
        scales,
    })
}

/// Evaluates the four-term asymmetric product
/// `s_x s_w (X_q W_q − z_x ΣW_q − z_w ΣX_q + K z_x z_w)` with integer partial terms.
pub fn asym_matmul_expansion(xq: &QTensor, wq: &QTensor) -> Result<Matrix> {
    if xq.params.symmetric || wq.params.symmetric {
        return Err(Error::InvalidArgument("asym_matmul_expansion needs asymmetric operands".into()));
    }
    if xq.params.granularity == Granularity::PerChannel {
        return Err(Error::InvalidArgument("asym_matmul_expansion needs per-layer activations".into()));
    }
    check_product(xq, wq, "asym_matmul_expansion")?;
    let inner = xq.cols as i64;
    let zx = xq.params.zero_point(0);
    let sx = xq.params.scale(0);
    let xw = raw_product(xq, wq);
    let row_sums: Vec<i64> = (0..xq.rows)
        .map(|i| (0..xq.cols).map(|k| xq.code(i, k) as i64).sum())
        .collect();
    let col_sums: Vec<i64> = (0..wq.cols)
        .map(|j| (0..wq.rows).map(|k| wq.code(k, j) as i64).sum())
        .collect();
    Ok(Matrix::from_fn(xq.rows, wq.cols, |i, j| {
        let zw = wq.params.zero_point(j);
        let int_term = xw.get(i, j) - zx * col_sums[j] - zw * row_sums[i] + inner * zx * zw;
        sx * wq.params.scale(j) * int_term as f64
    }))
}

/// Bias as integers at the accumulator scale of each output column.
pub fn quantize_bias(bias: &[f64], acc_scales: &[f64]) -> Result<Vec<i64>> {
    if bias.len() != acc_scales.len() {
        return shape_err("quantize_bias", format!("{} vs {}", bias.len(), acc_scales.len()));
    }
    bias.iter()
        .zip(acc_scales)
        .map(|(b, s)| {
            let q = round_half_even(b / s);
            if q.abs() >= i64::MAX as f64 / 4.0 {
                Err(Error::Overflow(format!("bias {b} at scale {s}")))
            } else {
                Ok(q as i64)
            }
        })
        .collect()
}

/// Rescales an accumulator (plus integer bias) into codes of `out`:
/// `clip(⌊(acc + bias) · s_acc / s_out⌉)`.
pub fn requantize(prod: &IntProduct, bias: Option<&[i64]>, out: &QuantParams) -> Result<QTensor> {
    if out.granularity != Granularity::PerLayer || !out.symmetric {
        return Err(Error::InvalidArgument("requantize targets per-layer symmetric params".into()));
    }
    if let Some(b) = bias {
        if b.len() != prod.acc.cols {
            return shape_err("requantize", "bias length");
        }
    }
    let s_out = out.scale(0);
    let range = out.code_range();
    let multipliers: Vec<f64> = prod.scales.iter().map(|s| s / s_out).collect();
    let mut codes = Vec::with_capacity(prod.acc.data.len());
    for r in 0..prod.acc.rows {
        for c in 0..prod.acc.cols {
            let acc = prod.acc.get(r, c) + bias.map_or(0, |b| b[c]);
            let q = round_half_even(acc as f64 * multipliers[c]);
            codes.push(q.clamp(range.0 as f64, range.1 as f64) as i32);
        }
    }
    QTensor::from_codes(prod.acc.rows, prod.acc.cols, codes, out.clone(), ChannelAxis::Col)
}
