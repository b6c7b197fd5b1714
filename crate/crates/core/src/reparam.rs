//! Post-LayerNorm scale reparameterization.
//!
//! Per-channel asymmetric parameters `(s, z)` of a LayerNorm output are folded
//! into the LayerNorm affine and the consuming linear layers so that one
//! per-layer symmetric scale `s̃` produces the same integer codes (shifted by
//! `2^{b-1}`), while the float function of the network is unchanged.
//!
//! With `r1 = s / s̃` and `r2 = z − 2^{b−1}`:
//!
//! ```text
//! X'  = (X + s ⊙ r2) ⊘ r1          γ' = γ / r1,  β' = (β + s ⊙ r2) / r1
//! W'  = diag(r1) · W               b' = b − Wᵀ (s ⊙ r2)
//! ```
//!
//! `X'/s̃ = X/s + r2` column-wise, and since `r2` is an integer the rounding
//! commutes with the shift.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{BlockWeights, Ffn, MlpWeights};
use crate::numerics::Matrix;
use crate::quant::{Granularity, QuantParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMean {
    #[default]
    Arithmetic,
    Geometric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReparamFactors {
    pub r1: Vec<f64>,
    pub r2: Vec<i64>,
    pub s_tilde: f64,
    /// The per-channel asymmetric parameters the factors came from.
    pub source: QuantParams,
}

impl ReparamFactors {
    pub fn dim(&self) -> usize {
        self.r1.len()
    }

    /// `s ⊙ r2`.
    pub fn offsets(&self) -> Vec<f64> {
        self.source
            .scales
            .iter()
            .zip(&self.r2)
            .map(|(s, r)| s * *r as f64)
            .collect()
    }

    /// The per-layer symmetric parameters that quantize the rewritten output.
    pub fn symmetric_params(&self) -> QuantParams {
        QuantParams::symmetric(self.source.bits, self.s_tilde)
    }

    fn check_len(&self, n: usize, op: &'static str) -> Result<()> {
        if n != self.dim() {
            return shape_err(op, format!("length {n} vs {} reparam channels", self.dim()));
        }
        Ok(())
    }
}

pub fn compute_factors(p: &QuantParams) -> Result<ReparamFactors> {
    compute_factors_with(p, ScaleMean::Arithmetic)
}

pub fn compute_factors_with(p: &QuantParams, mean: ScaleMean) -> Result<ReparamFactors> {
    if p.granularity != Granularity::PerChannel || p.symmetric {
        return Err(Error::InvalidArgument(
            "reparameterization needs per-channel asymmetric params".into(),
        ));
    }
    p.validate(None)?;
    let n = p.scales.len() as f64;
    let s_tilde = match mean {
        ScaleMean::Arithmetic => p.scales.iter().sum::<f64>() / n,
        ScaleMean::Geometric => (p.scales.iter().map(|s| s.ln()).sum::<f64>() / n).exp(),
    };
    let mid = 1i64 << (p.bits - 1);
    Ok(ReparamFactors {
        r1: p.scales.iter().map(|s| s / s_tilde).collect(),
        r2: p.zero_points.iter().map(|z| z - mid).collect(),
        s_tilde,
        source: p.clone(),
    })
}

/// `γ' = γ / r1`, `β' = (β + s ⊙ r2) / r1`.
pub fn rewrite_layernorm(gamma: &[f64], beta: &[f64], f: &ReparamFactors) -> Result<(Vec<f64>, Vec<f64>)> {
    f.check_len(gamma.len(), "rewrite_layernorm")?;
    f.check_len(beta.len(), "rewrite_layernorm")?;
    let off = f.offsets();
    let g = gamma.iter().zip(&f.r1).map(|(g, r)| g / r).collect();
    let b = beta
        .iter()
        .zip(&off)
        .zip(&f.r1)
        .map(|((b, o), r)| (b + o) / r)
        .collect();
    Ok((g, b))
}

/// Inverse of [`rewrite_layernorm`].
pub fn restore_layernorm(gamma: &[f64], beta: &[f64], f: &ReparamFactors) -> Result<(Vec<f64>, Vec<f64>)> {
    f.check_len(gamma.len(), "restore_layernorm")?;
    f.check_len(beta.len(), "restore_layernorm")?;
    let off = f.offsets();
    let g = gamma.iter().zip(&f.r1).map(|(g, r)| g * r).collect();
    let b = beta
        .iter()
        .zip(&off)
        .zip(&f.r1)
        .map(|((b, o), r)| b * r - o)
        .collect();
    Ok((g, b))
}

/// `W' = diag(r1)·W`, `b' = b − Wᵀ(s ⊙ r2)`.
pub fn rewrite_next_linear(w: &Matrix, bias: &[f64], f: &ReparamFactors) -> Result<(Matrix, Vec<f64>)> {
    f.check_len(w.rows(), "rewrite_next_linear")?;
    if bias.len() != w.cols() {
        return shape_err("rewrite_next_linear", format!("bias {} vs {} columns", bias.len(), w.cols()));
    }
    let off = f.offsets();
    let w2 = Matrix::from_fn(w.rows(), w.cols(), |r, c| f.r1[r] * w.get(r, c));
    let b2 = (0..w.cols())
        .map(|c| {
            let mut corr = 0.0;
            for (r, o) in off.iter().enumerate() {
                corr += w.get(r, c) * o;
            }
            bias[c] - corr
        })
        .collect();
    Ok((w2, b2))
}

/// Inverse of [`rewrite_next_linear`].
pub fn restore_next_linear(w: &Matrix, bias: &[f64], f: &ReparamFactors) -> Result<(Matrix, Vec<f64>)> {
    f.check_len(w.rows(), "restore_next_linear")?;
    if bias.len() != w.cols() {
        return shape_err("restore_next_linear", format!("bias {} vs {} columns", bias.len(), w.cols()));
    }
    let off = f.offsets();
    let w0 = Matrix::from_fn(w.rows(), w.cols(), |r, c| w.get(r, c) / f.r1[r]);
    let b0 = (0..w.cols())
        .map(|c| {
            let mut corr = 0.0;
            for (r, o) in off.iter().enumerate() {
                corr += w0.get(r, c) * o;
            }
            bias[c] + corr
        })
        .collect();
    Ok((w0, b0))
}

/// `X' = (X + s ⊙ r2) ⊘ r1`, column-wise.
pub fn transform_activations(x: &Matrix, f: &ReparamFactors) -> Result<Matrix> {
    f.check_len(x.cols(), "transform_activations")?;
    let off = f.offsets();
    Ok(Matrix::from_fn(x.rows(), x.cols(), |r, c| (x.get(r, c) + off[c]) / f.r1[c]))
}

/// `X = X' ⊙ r1 − s ⊙ r2`, column-wise.
pub fn restore_activations(x: &Matrix, f: &ReparamFactors) -> Result<Matrix> {
    f.check_len(x.cols(), "restore_activations")?;
    let off = f.offsets();
    Ok(Matrix::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) * f.r1[c] - off[c]))
}

/// Which LayerNorm of a block is reparameterized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LnSite {
    /// Feeds `W^{qkv}`.
    Ln1,
    /// Feeds MLP fc1, or the gate and every expert's fc1.
    Ln2,
}

fn rewrite_mlp_fc1(m: &MlpWeights, f: &ReparamFactors) -> Result<MlpWeights> {
    let (w1, b1) = rewrite_next_linear(&m.w1, &m.b1, f)?;
    Ok(MlpWeights {
        w1,
        b1,
        ..m.clone()
    })
}

/// Rewrites one LayerNorm and every linear layer consuming its output.
pub fn rewrite_block(bw: &BlockWeights, site: LnSite, f: &ReparamFactors) -> Result<BlockWeights> {
    let mut out = bw.clone();
    match site {
        LnSite::Ln1 => {
            let (g, b) = rewrite_layernorm(&bw.ln1_gamma, &bw.ln1_beta, f)?;
            let (w, wb) = rewrite_next_linear(&bw.w_qkv, &bw.b_qkv, f)?;
            out.ln1_gamma = g;
            out.ln1_beta = b;
            out.w_qkv = w;
            out.b_qkv = wb;
        }
        LnSite::Ln2 => {
            let (g, b) = rewrite_layernorm(&bw.ln2_gamma, &bw.ln2_beta, f)?;
            out.ln2_gamma = g;
            out.ln2_beta = b;
            out.ffn = match &bw.ffn {
                Ffn::Mlp(m) => Ffn::Mlp(rewrite_mlp_fc1(m, f)?),
                Ffn::Moe(moe) => {
                    let (w_gate, b_gate) = rewrite_next_linear(&moe.w_gate, &moe.b_gate, f)?;
                    let experts = moe
                        .experts
                        .iter()
                        .map(|e| rewrite_mlp_fc1(e, f))
                        .collect::<Result<Vec<_>>>()?;
                    Ffn::Moe(crate::model::MoeWeights {
                        w_gate,
                        b_gate,
                        experts,
                    })
                }
            };
        }
    }
    Ok(out)
}
