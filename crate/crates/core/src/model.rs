//! Float reference MoE-ViT forward pass.
//!
//! The input is a pre-embedded `N × D` token matrix. Each block applies
//! `x += MSA(LN1(x))` then `x += FFN(LN2(x))` where the FFN is either a GELU MLP
//! or a top-k gated mixture of GELU MLP experts. The classification head
//! mean-pools tokens and applies one linear layer.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{gelu, layernorm, linear, matmul, softmax_row, Matrix, Rng, LN_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_tokens: usize,
    pub dim: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub n_blocks: usize,
    pub mlp_ratio: usize,
    pub n_experts: usize,
    pub top_k: usize,
    /// Blocks whose MLP is replaced by an MoE layer.
    pub moe_blocks: Vec<usize>,
    pub n_classes: usize,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
}

fn default_eps() -> f64 {
    LN_EPS
}

impl ModelConfig {
    /// Config with MoE layers on every odd-indexed block.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_tokens: usize,
        dim: usize,
        n_heads: usize,
        n_blocks: usize,
        mlp_ratio: usize,
        n_experts: usize,
        top_k: usize,
        n_classes: usize,
    ) -> Self {
        Self {
            n_tokens,
            dim,
            n_heads,
            head_dim: dim.checked_div(n_heads).unwrap_or(0),
            n_blocks,
            mlp_ratio,
            n_experts,
            top_k,
            moe_blocks: (0..n_blocks).filter(|b| b % 2 == 1).collect(),
            n_classes,
            ln_eps: LN_EPS,
        }
    }

    /// N=8, D=16, h=2, L=2, m=4, k=2.
    pub fn tiny() -> Self {
        Self::new(8, 16, 2, 2, 4, 4, 2, 10)
    }

    pub fn hidden(&self) -> usize {
        self.mlp_ratio * self.dim
    }

    pub fn is_moe(&self, block: usize) -> bool {
        self.moe_blocks.contains(&block)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_tokens == 0 || self.dim == 0 {
            return fail("n_tokens and dim must be >= 1".into());
        }
        if self.n_heads == 0 || self.n_heads * self.head_dim != self.dim {
            return fail(format!(
                "n_heads * head_dim must equal dim ({} * {} != {})",
                self.n_heads, self.head_dim, self.dim
            ));
        }
        if self.mlp_ratio == 0 || self.n_classes == 0 {
            return fail("mlp_ratio and n_classes must be >= 1".into());
        }
        if !self.moe_blocks.is_empty() && !(1 <= self.top_k && self.top_k <= self.n_experts) {
            return fail(format!(
                "top_k must satisfy 1 <= k <= m (k={}, m={})",
                self.top_k, self.n_experts
            ));
        }
        if let Some(b) = self.moe_blocks.iter().find(|&&b| b >= self.n_blocks) {
            return fail(format!("moe block index {b} out of range for {} blocks", self.n_blocks));
        }
        let mut sorted = self.moe_blocks.clone();
        sorted.dedup();
        if sorted.len() != self.moe_blocks.len() || !self.moe_blocks.windows(2).all(|w| w[0] < w[1]) {
            return fail("moe block indices must be strictly increasing".into());
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return fail("ln_eps must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeWeights {
    pub w_gate: Matrix,
    pub b_gate: Vec<f64>,
    pub experts: Vec<MlpWeights>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Ffn {
    Mlp(MlpWeights),
    Moe(MoeWeights),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    /// `D × 3D`; columns `[0, D)` are Q, `[D, 2D)` K, `[2D, 3D)` V, each split
    /// into consecutive `head_dim` groups per head.
    pub w_qkv: Matrix,
    pub b_qkv: Vec<f64>,
    pub w_o: Matrix,
    pub b_o: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub ffn: Ffn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub blocks: Vec<BlockWeights>,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

/// Routing for one token: the selected experts and their normalized weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub experts: Vec<usize>,
    pub weights: Vec<f64>,
}

impl GateDecision {
    /// Selected expert indices in ascending order.
    pub fn expert_set(&self) -> Vec<usize> {
        let mut s = self.experts.clone();
        s.sort_unstable();
        s
    }
}

/// Options for synthetic weight generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitOptions {
    /// σ of the log-normal LayerNorm γ draw. 0 gives γ = 1.
    pub gamma_sigma: f64,
    /// σ of the Gaussian LayerNorm β draw.
    pub beta_std: f64,
    pub bias_std: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            gamma_sigma: 0.0,
            beta_std: 0.1,
            bias_std: 0.02,
        }
    }
}

impl InitOptions {
    /// Strong inter-channel variance and offset in post-LayerNorm activations.
    pub fn heavy_variance() -> Self {
        Self {
            gamma_sigma: 1.5,
            beta_std: 1.0,
            bias_std: 0.02,
        }
    }
}

fn dense(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Matrix {
    rng.normal_matrix(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
}

impl MlpWeights {
    fn random(rng: &mut Rng, dim: usize, hidden: usize, opts: &InitOptions) -> Self {
        Self {
            w1: dense(rng, dim, hidden),
            b1: rng.normal_vec(hidden, opts.bias_std),
            w2: dense(rng, hidden, dim),
            b2: rng.normal_vec(dim, opts.bias_std),
        }
    }

    fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            w1: Matrix::zeros(dim, hidden),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, dim),
            b2: vec![0.0; dim],
        }
    }
}

impl ModelWeights {
    /// Gaussian weights scaled by `1/√fan_in`; LayerNorm γ log-normal.
    pub fn random(cfg: &ModelConfig, rng: &mut Rng, opts: &InitOptions) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for b in 0..cfg.n_blocks {
            let gamma = |rng: &mut Rng| -> Vec<f64> {
                (0..d).map(|_| (opts.gamma_sigma * rng.normal()).exp()).collect()
            };
            let ln1_gamma = gamma(rng);
            let ln1_beta = rng.normal_vec(d, opts.beta_std);
            let w_qkv = dense(rng, d, 3 * d);
            let b_qkv = rng.normal_vec(3 * d, opts.bias_std);
            let w_o = dense(rng, d, d);
            let b_o = rng.normal_vec(d, opts.bias_std);
            let ln2_gamma = gamma(rng);
            let ln2_beta = rng.normal_vec(d, opts.beta_std);
            let ffn = if cfg.is_moe(b) {
                let w_gate = dense(rng, d, cfg.n_experts);
                let b_gate = rng.normal_vec(cfg.n_experts, opts.bias_std);
                let experts = (0..cfg.n_experts)
                    .map(|_| MlpWeights::random(rng, d, cfg.hidden(), opts))
                    .collect();
                Ffn::Moe(MoeWeights {
                    w_gate,
                    b_gate,
                    experts,
                })
            } else {
                Ffn::Mlp(MlpWeights::random(rng, d, cfg.hidden(), opts))
            };
            blocks.push(BlockWeights {
                ln1_gamma,
                ln1_beta,
                w_qkv,
                b_qkv,
                w_o,
                b_o,
                ln2_gamma,
                ln2_beta,
                ffn,
            });
        }
        Ok(Self {
            blocks,
            head_w: dense(rng, d, cfg.n_classes),
            head_b: rng.normal_vec(cfg.n_classes, opts.bias_std),
        })
    }

    /// All weights and biases zero, LayerNorm γ = 1.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let blocks = (0..cfg.n_blocks)
            .map(|b| BlockWeights {
                ln1_gamma: vec![1.0; d],
                ln1_beta: vec![0.0; d],
                w_qkv: Matrix::zeros(d, 3 * d),
                b_qkv: vec![0.0; 3 * d],
                w_o: Matrix::zeros(d, d),
                b_o: vec![0.0; d],
                ln2_gamma: vec![1.0; d],
                ln2_beta: vec![0.0; d],
                ffn: if cfg.is_moe(b) {
                    Ffn::Moe(MoeWeights {
                        w_gate: Matrix::zeros(d, cfg.n_experts),
                        b_gate: vec![0.0; cfg.n_experts],
                        experts: (0..cfg.n_experts)
                            .map(|_| MlpWeights::zeros(d, cfg.hidden()))
                            .collect(),
                    })
                } else {
                    Ffn::Mlp(MlpWeights::zeros(d, cfg.hidden()))
                },
            })
            .collect();
        Ok(Self {
            blocks,
            head_w: Matrix::zeros(d, cfg.n_classes),
            head_b: vec![0.0; cfg.n_classes],
        })
    }

    /// Checks every tensor shape against `cfg`.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let d = cfg.dim;
        let hid = cfg.hidden();
        let expect = |name: String, m: &Matrix, shape: (usize, usize)| -> Result<()> {
            if m.shape() != shape {
                return shape_err("ModelWeights::check", format!("{name}: {:?} vs {shape:?}", m.shape()));
            }
            Ok(())
        };
        let expect_len = |name: String, v: &[f64], n: usize| -> Result<()> {
            if v.len() != n {
                return shape_err("ModelWeights::check", format!("{name}: length {} vs {n}", v.len()));
            }
            Ok(())
        };
        if self.blocks.len() != cfg.n_blocks {
            return shape_err(
                "ModelWeights::check",
                format!("{} blocks vs config {}", self.blocks.len(), cfg.n_blocks),
            );
        }
        let check_mlp = |p: &str, m: &MlpWeights| -> Result<()> {
            expect(format!("{p}.w1"), &m.w1, (d, hid))?;
            expect_len(format!("{p}.b1"), &m.b1, hid)?;
            expect(format!("{p}.w2"), &m.w2, (hid, d))?;
            expect_len(format!("{p}.b2"), &m.b2, d)
        };
        for (i, b) in self.blocks.iter().enumerate() {
            expect_len(format!("b{i}.ln1_gamma"), &b.ln1_gamma, d)?;
            expect_len(format!("b{i}.ln1_beta"), &b.ln1_beta, d)?;
            expect(format!("b{i}.w_qkv"), &b.w_qkv, (d, 3 * d))?;
            expect_len(format!("b{i}.b_qkv"), &b.b_qkv, 3 * d)?;
            expect(format!("b{i}.w_o"), &b.w_o, (d, d))?;
            expect_len(format!("b{i}.b_o"), &b.b_o, d)?;
            expect_len(format!("b{i}.ln2_gamma"), &b.ln2_gamma, d)?;
            expect_len(format!("b{i}.ln2_beta"), &b.ln2_beta, d)?;
            match (&b.ffn, cfg.is_moe(i)) {
                (Ffn::Mlp(m), false) => check_mlp(&format!("b{i}.mlp"), m)?,
                (Ffn::Moe(moe), true) => {
                    expect(format!("b{i}.gate"), &moe.w_gate, (d, cfg.n_experts))?;
                    expect_len(format!("b{i}.gate_b"), &moe.b_gate, cfg.n_experts)?;
                    if moe.experts.len() != cfg.n_experts {
                        return shape_err("ModelWeights::check", format!("b{i}: expert count"));
                    }
                    for (j, e) in moe.experts.iter().enumerate() {
                        check_mlp(&format!("b{i}.e{j}"), e)?;
                    }
                }
                _ => {
                    return shape_err("ModelWeights::check", format!("b{i}: ffn kind disagrees with moe_blocks"))
                }
            }
        }
        expect("head_w".into(), &self.head_w, (d, cfg.n_classes))?;
        expect_len("head_b".into(), &self.head_b, cfg.n_classes)
    }
}

/// Which activation a trace entry holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SiteKind {
    /// Post-LayerNorm input of the attention module.
    Ln1,
    Query,
    Key,
    Value,
    /// Concatenated per-head attention outputs, input of `W^o`.
    AttnConcat,
    AttnProj,
    /// Post-LayerNorm input of the MLP or MoE module.
    Ln2,
    Fc1Out,
    Fc2In,
    Fc2Out,
    ExpertFc1Out(usize),
    ExpertFc2In(usize),
    ExpertFc2Out(usize),
}

impl SiteKind {
    pub fn is_post_layernorm(&self) -> bool {
        matches!(self, SiteKind::Ln1 | SiteKind::Ln2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SiteId {
    pub block: usize,
    pub kind: SiteKind,
}

impl SiteId {
    pub fn new(block: usize, kind: SiteKind) -> Self {
        Self { block, kind }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.block;
        match self.kind {
            SiteKind::Ln1 => write!(f, "b{b}.ln1"),
            SiteKind::Query => write!(f, "b{b}.q"),
            SiteKind::Key => write!(f, "b{b}.k"),
            SiteKind::Value => write!(f, "b{b}.v"),
            SiteKind::AttnConcat => write!(f, "b{b}.attn_concat"),
            SiteKind::AttnProj => write!(f, "b{b}.attn_proj"),
            SiteKind::Ln2 => write!(f, "b{b}.ln2"),
            SiteKind::Fc1Out => write!(f, "b{b}.fc1_out"),
            SiteKind::Fc2In => write!(f, "b{b}.fc2_in"),
            SiteKind::Fc2Out => write!(f, "b{b}.fc2_out"),
            SiteKind::ExpertFc1Out(j) => write!(f, "b{b}.e{j}.fc1_out"),
            SiteKind::ExpertFc2In(j) => write!(f, "b{b}.e{j}.fc2_in"),
            SiteKind::ExpertFc2Out(j) => write!(f, "b{b}.e{j}.fc2_out"),
        }
    }
}

/// Activations recorded during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub sites: BTreeMap<SiteId, Matrix>,
    /// Post-softmax attention maps, `[block][head]`, each `N × N`.
    pub attention: Vec<Vec<Matrix>>,
    /// Per-token routing for MoE blocks, `None` for MLP blocks.
    pub gates: Vec<Option<Vec<GateDecision>>>,
}

impl Trace {
    pub fn site(&self, block: usize, kind: SiteKind) -> Option<&Matrix> {
        self.sites.get(&SiteId::new(block, kind))
    }
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub trace: Trace,
}

pub(crate) struct MsaParts {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub probs: Vec<Matrix>,
    pub concat: Matrix,
    pub out: Matrix,
}

pub(crate) fn msa_parts(x_norm: &Matrix, bw: &BlockWeights, cfg: &ModelConfig) -> Result<MsaParts> {
    let d = cfg.dim;
    if x_norm.cols() != d {
        return shape_err("msa_forward", format!("input has {} columns, dim is {d}", x_norm.cols()));
    }
    let qkv = linear(x_norm, &bw.w_qkv, &bw.b_qkv)?;
    let q = qkv.col_slice(0, d);
    let k = qkv.col_slice(d, 2 * d);
    let v = qkv.col_slice(2 * d, 3 * d);
    let n = x_norm.rows();
    let hd = cfg.head_dim;
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    let mut concat = Matrix::zeros(n, d);
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = q.col_slice(h * hd, (h + 1) * hd);
        let kh = k.col_slice(h * hd, (h + 1) * hd);
        let vh = v.col_slice(h * hd, (h + 1) * hd);
        let scores = matmul(&qh, &kh.transpose())?.scale(inv_sqrt);
        let mut p = Matrix::zeros(n, n);
        for r in 0..n {
            p.row_mut(r).copy_from_slice(&softmax_row(scores.row(r))?);
        }
        concat.set_col_slice(h * hd, &matmul(&p, &vh)?);
        probs.push(p);
    }
    let out = linear(&concat, &bw.w_o, &bw.b_o)?;
    Ok(MsaParts {
        q,
        k,
        v,
        probs,
        concat,
        out,
    })
}

/// Multi-head self-attention on a LayerNorm output.
pub fn msa_forward(x_norm: &Matrix, bw: &BlockWeights, cfg: &ModelConfig) -> Result<Matrix> {
    Ok(msa_parts(x_norm, bw, cfg)?.out)
}

/// Picks the `k` largest gate logits (ties to the lower expert index) and
/// softmaxes over the retained logits only.
pub fn gate_from_logits(logits: &[f64], k: usize) -> Result<GateDecision> {
    if k == 0 || k > logits.len() {
        return Err(Error::InvalidArgument(format!(
            "top_k {k} with {} experts",
            logits.len()
        )));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    let kept: Vec<f64> = order.iter().map(|&j| logits[j]).collect();
    Ok(GateDecision {
        experts: order,
        weights: softmax_row(&kept)?,
    })
}

/// Top-k gate for one token row.
pub fn top_k_gate(y_row: &[f64], w_g: &Matrix, b_g: &[f64], k: usize) -> Result<GateDecision> {
    if y_row.len() != w_g.rows() || b_g.len() != w_g.cols() {
        return shape_err(
            "top_k_gate",
            format!("row {} · {:?} + bias {}", y_row.len(), w_g.shape(), b_g.len()),
        );
    }
    let logits: Vec<f64> = (0..w_g.cols())
        .map(|j| {
            let mut s = 0.0;
            for (c, y) in y_row.iter().enumerate() {
                s += y * w_g.get(c, j);
            }
            s + b_g[j]
        })
        .collect();
    gate_from_logits(&logits, k)
}

pub(crate) struct MlpParts {
    pub fc1_out: Matrix,
    pub hidden: Matrix,
    pub out: Matrix,
}

pub(crate) fn mlp_parts(y: &Matrix, m: &MlpWeights) -> Result<MlpParts> {
    let fc1_out = linear(y, &m.w1, &m.b1)?;
    let hidden = fc1_out.map(gelu);
    let out = linear(&hidden, &m.w2, &m.b2)?;
    Ok(MlpParts {
        fc1_out,
        hidden,
        out,
    })
}

/// GELU MLP.
pub fn mlp_forward(y: &Matrix, m: &MlpWeights) -> Result<Matrix> {
    Ok(mlp_parts(y, m)?.out)
}

/// Token indices routed to each expert, in token order.
pub fn expert_groups(decisions: &[GateDecision], n_experts: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); n_experts];
    for (t, d) in decisions.iter().enumerate() {
        for &j in &d.experts {
            groups[j].push(t);
        }
    }
    groups
}

pub(crate) struct MoeParts {
    pub out: Matrix,
    pub decisions: Vec<GateDecision>,
    /// Per expert: routed token indices and the expert's intermediate activations on them.
    pub experts: Vec<(Vec<usize>, Option<MlpParts>)>,
}

pub(crate) fn moe_parts(y_norm: &Matrix, w: &MoeWeights, k: usize) -> Result<MoeParts> {
    if w.w_gate.cols() != w.experts.len() {
        return shape_err(
            "moe_forward",
            format!("gate has {} outputs for {} experts", w.w_gate.cols(), w.experts.len()),
        );
    }
    let decisions = (0..y_norm.rows())
        .map(|t| top_k_gate(y_norm.row(t), &w.w_gate, &w.b_gate, k))
        .collect::<Result<Vec<_>>>()?;
    let groups = expert_groups(&decisions, w.experts.len());
    let mut out = Matrix::zeros(y_norm.rows(), y_norm.cols());
    let mut experts = Vec::with_capacity(w.experts.len());
    for (j, tokens) in groups.into_iter().enumerate() {
        if tokens.is_empty() {
            experts.push((tokens, None));
            continue;
        }
        let parts = mlp_parts(&y_norm.select_rows(&tokens), &w.experts[j])?;
        for (local, &t) in tokens.iter().enumerate() {
            let d = &decisions[t];
            let pos = d.experts.iter().position(|&e| e == j).expect("routed expert");
            let g = d.weights[pos];
            for (o, e) in out.row_mut(t).iter_mut().zip(parts.out.row(local)) {
                *o += g * e;
            }
        }
        experts.push((tokens, Some(parts)));
    }
    Ok(MoeParts {
        out,
        decisions,
        experts,
    })
}

/// Mixture-of-experts layer: per token, the gate-weighted sum of the selected
/// experts' outputs. Also returns the routing decisions.
pub fn moe_forward(y_norm: &Matrix, w: &MoeWeights, k: usize) -> Result<(Matrix, Vec<GateDecision>)> {
    let parts = moe_parts(y_norm, w, k)?;
    Ok((parts.out, parts.decisions))
}

/// Mean-pool over tokens followed by the linear classifier.
pub fn head_forward(x: &Matrix, head_w: &Matrix, head_b: &[f64]) -> Result<Vec<f64>> {
    let pooled = Matrix::new(1, x.cols(), x.mean_rows())?;
    Ok(linear(&pooled, head_w, head_b)?.into_data())
}

/// Full forward pass recording every activation site.
pub fn forward(x: &Matrix, weights: &ModelWeights, cfg: &ModelConfig) -> Result<Forward> {
    if x.shape() != (cfg.n_tokens, cfg.dim) {
        return shape_err(
            "forward",
            format!("input {:?}, expected ({}, {})", x.shape(), cfg.n_tokens, cfg.dim),
        );
    }
    weights.check(cfg)?;
    let mut trace = Trace::default();
    let mut x = x.clone();
    for (b, bw) in weights.blocks.iter().enumerate() {
        let site = |kind| SiteId::new(b, kind);
        let x1 = layernorm(&x, &bw.ln1_gamma, &bw.ln1_beta, cfg.ln_eps)?;
        let msa = msa_parts(&x1, bw, cfg)?;
        x = x.add(&msa.out)?;
        trace.sites.insert(site(SiteKind::Ln1), x1);
        trace.sites.insert(site(SiteKind::Query), msa.q);
        trace.sites.insert(site(SiteKind::Key), msa.k);
        trace.sites.insert(site(SiteKind::Value), msa.v);
        trace.sites.insert(site(SiteKind::AttnConcat), msa.concat);
        trace.sites.insert(site(SiteKind::AttnProj), msa.out);
        trace.attention.push(msa.probs);

        let y = layernorm(&x, &bw.ln2_gamma, &bw.ln2_beta, cfg.ln_eps)?;
        match &bw.ffn {
            Ffn::Mlp(m) => {
                let p = mlp_parts(&y, m)?;
                x = x.add(&p.out)?;
                trace.sites.insert(site(SiteKind::Fc1Out), p.fc1_out);
                trace.sites.insert(site(SiteKind::Fc2In), p.hidden);
                trace.sites.insert(site(SiteKind::Fc2Out), p.out);
                trace.gates.push(None);
            }
            Ffn::Moe(moe) => {
                let p = moe_parts(&y, moe, cfg.top_k)?;
                x = x.add(&p.out)?;
                for (j, (_, parts)) in p.experts.into_iter().enumerate() {
                    if let Some(parts) = parts {
                        trace.sites.insert(site(SiteKind::ExpertFc1Out(j)), parts.fc1_out);
                        trace.sites.insert(site(SiteKind::ExpertFc2In(j)), parts.hidden);
                        trace.sites.insert(site(SiteKind::ExpertFc2Out(j)), parts.out);
                    }
                }
                trace.gates.push(Some(p.decisions));
            }
        }
        trace.sites.insert(site(SiteKind::Ln2), y);
    }
    let logits = head_forward(&x, &weights.head_w, &weights.head_b)?;
    Ok(Forward { logits, trace })
}

/// Index of the largest logit (lowest index on ties).
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block_with_ffn(d: usize, ffn: Ffn) -> BlockWeights {
        BlockWeights {
            ln1_gamma: vec![1.0; d],
            ln1_beta: vec![0.0; d],
            w_qkv: Matrix::zeros(d, 3 * d),
            b_qkv: vec![0.0; 3 * d],
            w_o: Matrix::zeros(d, d),
            b_o: vec![0.0; d],
            ln2_gamma: vec![1.0; d],
            ln2_beta: vec![0.0; d],
            ffn,
        }
    }

    #[test]
    fn top_k_examples() {
        let g = gate_from_logits(&[2.0, 1.0, 0.0, -1.0], 2).unwrap();
        assert_eq!(g.experts, vec![0, 1]);
        assert!((g.weights[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((g.weights[1] - 0.2689414213699951).abs() < 1e-12);

        let g = gate_from_logits(&[0.3, 2.0, -1.0], 1).unwrap();
        assert_eq!((g.experts.clone(), g.weights.clone()), (vec![1], vec![1.0]));

        let g = gate_from_logits(&[0.5; 4], 2).unwrap();
        assert_eq!(g.experts, vec![0, 1]);
        assert_eq!(g.weights, vec![0.5, 0.5]);

        assert!(gate_from_logits(&[0.0; 2], 3).is_err());
    }

    #[test]
    fn single_token_attention_passes_value_through() {
        let cfg = ModelConfig {
            n_tokens: 1,
            ..ModelConfig::new(1, 4, 2, 1, 2, 1, 1, 2)
        };
        let mut rng = Rng::new(3);
        let w = ModelWeights::random(&cfg, &mut rng, &InitOptions::default()).unwrap();
        let bw = &w.blocks[0];
        let x = rng.normal_matrix(1, 4, 1.0);
        let v = linear(&x, &bw.w_qkv, &bw.b_qkv).unwrap().col_slice(8, 12);
        let want = linear(&v, &bw.w_o, &bw.b_o).unwrap();
        let got = msa_forward(&x, bw, &cfg).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn zero_qkv_gives_output_bias() {
        let cfg = ModelConfig::new(3, 4, 2, 1, 2, 1, 1, 2);
        let mut bw = block_with_ffn(4, Ffn::Mlp(MlpWeights::zeros(4, 8)));
        bw.b_o = vec![1.0, -2.0, 0.5, 3.0];
        let mut rng = Rng::new(1);
        let x = rng.normal_matrix(3, 4, 1.0);
        let out = msa_forward(&x, &bw, &cfg).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), bw.b_o.as_slice());
        }
    }

    #[test]
    fn moe_identical_experts_is_gate_invariant() {
        let mut rng = Rng::new(11);
        let e = MlpWeights::random(&mut rng, 4, 8, &InitOptions::default());
        let y = rng.normal_matrix(5, 4, 1.0);
        let single = mlp_forward(&y, &e).unwrap();
        for k in 1..=3 {
            let moe = MoeWeights {
                w_gate: rng.normal_matrix(4, 3, 1.0),
                b_gate: rng.normal_vec(3, 1.0),
                experts: vec![e.clone(), e.clone(), e.clone()],
            };
            let (out, dec) = moe_forward(&y, &moe, k).unwrap();
            assert!(out.max_abs_diff(&single) < 1e-12);
            assert!(dec.iter().all(|d| (d.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn moe_k_equals_m_is_dense_weighted_sum() {
        let mut rng = Rng::new(5);
        let m = 3;
        let moe = MoeWeights {
            w_gate: rng.normal_matrix(4, m, 1.0),
            b_gate: rng.normal_vec(m, 0.1),
            experts: (0..m)
                .map(|_| MlpWeights::random(&mut rng, 4, 8, &InitOptions::default()))
                .collect(),
        };
        let y = rng.normal_matrix(6, 4, 1.0);
        let (out, _) = moe_forward(&y, &moe, m).unwrap();
        let logits = linear(&y, &moe.w_gate, &moe.b_gate).unwrap();
        let outs: Vec<Matrix> = moe.experts.iter().map(|e| mlp_forward(&y, e).unwrap()).collect();
        for t in 0..6 {
            let g = softmax_row(logits.row(t)).unwrap();
            for c in 0..4 {
                let want: f64 = (0..m).map(|j| g[j] * outs[j].get(t, c)).sum();
                assert!((out.get(t, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn moe_hand_built_two_experts_top1() {
        // Expert 0 doubles channel 0 after GELU(relu-like region), expert 1 negates.
        let e0 = MlpWeights {
            w1: Matrix::identity(2),
            b1: vec![0.0, 0.0],
            w2: Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap(),
            b2: vec![0.0, 0.0],
        };
        let e1 = MlpWeights {
            w1: Matrix::identity(2),
            b1: vec![0.0, 0.0],
            w2: Matrix::from_rows(&[vec![-1.0, 0.0], vec![0.0, -1.0]]).unwrap(),
            b2: vec![1.0, 1.0],
        };
        // Gate: logit0 = y0, logit1 = y1.
        let moe = MoeWeights {
            w_gate: Matrix::identity(2),
            b_gate: vec![0.0, 0.0],
            experts: vec![e0, e1],
        };
        let y = Matrix::from_rows(&[vec![1.0, -1.0], vec![-0.5, 2.0]]).unwrap();
        let (out, dec) = moe_forward(&y, &moe, 1).unwrap();
        assert_eq!(dec[0].experts, vec![0]);
        assert_eq!(dec[1].experts, vec![1]);
        // token 0 → expert 0: 2·gelu([1,-1])
        let want0 = [2.0 * gelu(1.0), 2.0 * gelu(-1.0)];
        // token 1 → expert 1: 1 - gelu([-0.5, 2])
        let want1 = [1.0 - gelu(-0.5), 1.0 - gelu(2.0)];
        for c in 0..2 {
            assert!((out.get(0, c) - want0[c]).abs() < 1e-12);
            assert!((out.get(1, c) - want1[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_stack_is_head_of_mean() {
        let cfg = ModelConfig::new(3, 4, 2, 0, 2, 2, 1, 3);
        let mut rng = Rng::new(9);
        let w = ModelWeights::random(&cfg, &mut rng, &InitOptions::default()).unwrap();
        let x = rng.normal_matrix(3, 4, 1.0);
        let f = forward(&x, &w, &cfg).unwrap();
        let want = head_forward(&x, &w.head_w, &w.head_b).unwrap();
        assert_eq!(f.logits, want);
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let cfg = ModelConfig::tiny();
        let w = ModelWeights::zeros(&cfg).unwrap();
        let x = Rng::new(2).normal_matrix(cfg.n_tokens, cfg.dim, 1.0);
        let f = forward(&x, &w, &cfg).unwrap();
        assert!(f.logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::tiny();
        cfg.head_dim = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ModelConfig::tiny();
        cfg.top_k = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::tiny();
        cfg.moe_blocks = vec![2];
        assert!(cfg.validate().is_err());
        assert_eq!(ModelConfig::new(4, 8, 2, 4, 4, 4, 2, 10).moe_blocks, vec![1, 3]);
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let cfg = ModelConfig::tiny();
        let w = ModelWeights::zeros(&cfg).unwrap();
        assert!(forward(&Matrix::zeros(3, 16), &w, &cfg).is_err());
    }
}
