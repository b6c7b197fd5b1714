//! End-to-end quantized MoE-ViT inference.
//!
//! Post-LayerNorm activations use per-channel asymmetric calibration folded
//! into per-layer symmetric codes by [`crate::reparam`]; every other linear
//! input is per-layer symmetric; weights are symmetric (per output channel by
//! default); attention probabilities go through the log-√2 quantizer and the
//! shift-only attention-value product. Linear layers run as integer products
//! with integer bias followed by requantization. LayerNorm, GELU, the gate and
//! the residual stream stay in double precision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::logquant::{fused_softmax_av, DEFAULT_ATTN_BITS};
use crate::model::{
    argmax, expert_groups, forward, gate_from_logits, head_forward, mlp_parts, BlockWeights, Ffn, GateDecision,
    MlpWeights, ModelConfig, ModelWeights, SiteId, SiteKind, Trace,
};
use crate::numerics::{gelu, layernorm, linear, Matrix};
use crate::quant::{
    calibrate, dequantize, int_matmul, quantize, quantize_along, quantize_bias, requantize, ChannelAxis,
    Granularity, QTensor, QuantParams,
};
use crate::reparam::{compute_factors_with, restore_activations, rewrite_block, LnSite, ReparamFactors, ScaleMean};

/// Calibration tokens in 32 images of 197 tokens each.
pub const CALIBRATION_TOKEN_BUDGET: usize = 32 * 197;

/// Number of `n_tokens`-row inputs that covers [`CALIBRATION_TOKEN_BUDGET`].
pub fn calibration_inputs_for(n_tokens: usize) -> usize {
    CALIBRATION_TOKEN_BUDGET.div_ceil(n_tokens.max(1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantOptions {
    pub weight_bits: u32,
    pub act_bits: u32,
    pub attn_bits: u32,
    /// Reparameterize post-LayerNorm sites; off gives the plain min-max
    /// per-layer symmetric baseline.
    pub reparam: bool,
    pub per_channel_weights: bool,
    pub scale_mean: ScaleMean,
}

impl Default for QuantOptions {
    /// W8 / A8 / Attn4 with reparameterization.
    fn default() -> Self {
        Self {
            weight_bits: 8,
            act_bits: 8,
            attn_bits: DEFAULT_ATTN_BITS,
            reparam: true,
            per_channel_weights: true,
            scale_mean: ScaleMean::Arithmetic,
        }
    }
}

impl QuantOptions {
    pub fn uniform_bits(bits: u32, reparam: bool) -> Self {
        Self {
            weight_bits: bits,
            act_bits: bits,
            attn_bits: bits,
            reparam,
            ..Self::default()
        }
    }
}

/// Integer linear layer with its input scale already folded into the bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QLinear {
    pub weight: QTensor,
    /// Bias in accumulator units (`b / (s_x · s_w)`).
    pub bias: Vec<i64>,
}

impl QLinear {
    fn build(w: &Matrix, b: &[f64], input: &QuantParams, opts: &QuantOptions) -> Result<Self> {
        let gran = if opts.per_channel_weights {
            Granularity::PerChannel
        } else {
            Granularity::PerLayer
        };
        let wp = calibrate(std::slice::from_ref(w), opts.weight_bits, true, gran)?;
        let weight = quantize_along(w, &wp, ChannelAxis::Col)?;
        let acc_scales: Vec<f64> = (0..w.cols()).map(|j| input.scale(0) * wp.scale(j)).collect();
        Ok(Self {
            weight,
            bias: quantize_bias(b, &acc_scales)?,
        })
    }

    fn apply(&self, x: &QTensor, out: &QuantParams) -> Result<QTensor> {
        requantize(&int_matmul(x, &self.weight)?, Some(&self.bias), out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QMlp {
    pub fc1: QLinear,
    pub fc1_out: QuantParams,
    pub fc2_in: QuantParams,
    pub fc2: QLinear,
    pub fc2_out: QuantParams,
}

struct QMlpRun {
    fc1_out: Matrix,
    fc2_in: Matrix,
    out: Matrix,
}

impl QMlp {
    fn run(&self, x: &QTensor) -> Result<QMlpRun> {
        let h = dequantize(&self.fc1.apply(x, &self.fc1_out)?);
        let hq = quantize(&h.map(gelu), &self.fc2_in)?;
        let out = dequantize(&self.fc2.apply(&hq, &self.fc2_out)?);
        Ok(QMlpRun {
            fc1_out: h,
            fc2_in: dequantize(&hq),
            out,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum QFfn {
    Mlp(QMlp),
    Moe {
        /// Rewritten gate, evaluated in double precision.
        w_gate: Matrix,
        b_gate: Vec<f64>,
        experts: Vec<QMlp>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedBlock {
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub ln1: QuantParams,
    pub ln1_factors: Option<ReparamFactors>,
    pub qkv: QLinear,
    pub query: QuantParams,
    pub key: QuantParams,
    pub value: QuantParams,
    pub attn_concat: QuantParams,
    pub w_o: QLinear,
    pub attn_proj: QuantParams,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub ln2: QuantParams,
    pub ln2_factors: Option<ReparamFactors>,
    pub ffn: QFfn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub config: ModelConfig,
    pub options: QuantOptions,
    pub blocks: Vec<QuantizedBlock>,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
    /// Float weights after reparameterization; the reference for site errors.
    pub reference: ModelWeights,
}

impl QuantizedModel {
    /// Every recorded reparameterization, keyed by site name.
    pub fn factors(&self) -> Vec<(SiteId, &ReparamFactors)> {
        let mut out = Vec::new();
        for (b, blk) in self.blocks.iter().enumerate() {
            if let Some(f) = &blk.ln1_factors {
                out.push((SiteId::new(b, SiteKind::Ln1), f));
            }
            if let Some(f) = &blk.ln2_factors {
                out.push((SiteId::new(b, SiteKind::Ln2), f));
            }
        }
        out
    }
}

fn site_samples(traces: &[Trace], id: SiteId) -> Vec<Matrix> {
    traces.iter().filter_map(|t| t.sites.get(&id).cloned()).collect()
}

fn sym_params(samples: &[Matrix], bits: u32) -> Result<QuantParams> {
    calibrate(samples, bits, true, Granularity::PerLayer)
}

/// Calibrates every site of an MLP from traced activations.
fn build_qmlp(
    m: &MlpWeights,
    input: &QuantParams,
    fc1_out: &[Matrix],
    fc2_in: &[Matrix],
    fc2_out: &[Matrix],
    opts: &QuantOptions,
) -> Result<QMlp> {
    let fc2_in_p = sym_params(fc2_in, opts.act_bits)?;
    Ok(QMlp {
        fc1: QLinear::build(&m.w1, &m.b1, input, opts)?,
        fc1_out: sym_params(fc1_out, opts.act_bits)?,
        fc2: QLinear::build(&m.w2, &m.b2, &fc2_in_p, opts)?,
        fc2_in: fc2_in_p,
        fc2_out: sym_params(fc2_out, opts.act_bits)?,
    })
}

/// Per-channel asymmetric calibration of a LayerNorm output followed by the
/// rewrite of the LayerNorm and its consumers.
fn reparam_site(
    bw: &BlockWeights,
    site: LnSite,
    samples: &[Matrix],
    opts: &QuantOptions,
) -> Result<(BlockWeights, ReparamFactors)> {
    let p = calibrate(samples, opts.act_bits, false, Granularity::PerChannel)?;
    let f = compute_factors_with(&p, opts.scale_mean)?;
    Ok((rewrite_block(bw, site, &f)?, f))
}

/// Calibrates and quantizes a float model.
pub fn build_quantized(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    calib: &[Matrix],
    opts: &QuantOptions,
) -> Result<QuantizedModel> {
    weights.check(cfg)?;
    if calib.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    for x in calib {
        if x.shape() != (cfg.n_tokens, cfg.dim) {
            return shape_err("build_quantized", format!("calibration input {:?}", x.shape()));
        }
    }
    for bits in [opts.weight_bits, opts.act_bits] {
        if !(2..=16).contains(&bits) {
            return Err(Error::InvalidArgument(format!("bit width {bits} outside [2, 16]")));
        }
    }
    if !(1..=16).contains(&opts.attn_bits) {
        return Err(Error::InvalidArgument(format!("attention bit width {} outside [1, 16]", opts.attn_bits)));
    }

    let traces = |w: &ModelWeights| -> Result<Vec<Trace>> {
        calib.iter().map(|x| Ok(forward(x, w, cfg)?.trace)).collect()
    };

    let mut rewritten = weights.clone();
    let mut factors: Vec<(Option<ReparamFactors>, Option<ReparamFactors>)> = vec![(None, None); cfg.n_blocks];
    if opts.reparam {
        let original = traces(weights)?;
        for b in 0..cfg.n_blocks {
            let (bw, f1) = reparam_site(
                &rewritten.blocks[b],
                LnSite::Ln1,
                &site_samples(&original, SiteId::new(b, SiteKind::Ln1)),
                opts,
            )?;
            let (bw, f2) = reparam_site(&bw, LnSite::Ln2, &site_samples(&original, SiteId::new(b, SiteKind::Ln2)), opts)?;
            rewritten.blocks[b] = bw;
            factors[b] = (Some(f1), Some(f2));
        }
    }
    let traces = traces(&rewritten)?;

    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for (b, bw) in rewritten.blocks.iter().enumerate() {
        let samples = |kind| site_samples(&traces, SiteId::new(b, kind));
        let act = |kind| sym_params(&samples(kind), opts.act_bits);
        let (f1, f2) = factors[b].clone();
        let ln1 = match &f1 {
            Some(f) => f.symmetric_params(),
            None => act(SiteKind::Ln1)?,
        };
        let ln2 = match &f2 {
            Some(f) => f.symmetric_params(),
            None => act(SiteKind::Ln2)?,
        };
        let attn_concat = act(SiteKind::AttnConcat)?;
        let ffn = match &bw.ffn {
            Ffn::Mlp(m) => QFfn::Mlp(build_qmlp(
                m,
                &ln2,
                &samples(SiteKind::Fc1Out),
                &samples(SiteKind::Fc2In),
                &samples(SiteKind::Fc2Out),
                opts,
            )?),
            Ffn::Moe(moe) => {
                let mut experts = Vec::with_capacity(moe.experts.len());
                for (j, e) in moe.experts.iter().enumerate() {
                    let mut fc1 = samples(SiteKind::ExpertFc1Out(j));
                    let mut fc2_in = samples(SiteKind::ExpertFc2In(j));
                    let mut fc2_out = samples(SiteKind::ExpertFc2Out(j));
                    if fc1.is_empty() {
                        // never routed during calibration: use every token
                        for t in &traces {
                            let y = t.site(b, SiteKind::Ln2).expect("traced ln2");
                            let p = mlp_parts(y, e)?;
                            fc1.push(p.fc1_out);
                            fc2_in.push(p.hidden);
                            fc2_out.push(p.out);
                        }
                    }
                    experts.push(build_qmlp(e, &ln2, &fc1, &fc2_in, &fc2_out, opts)?);
                }
                QFfn::Moe {
                    w_gate: moe.w_gate.clone(),
                    b_gate: moe.b_gate.clone(),
                    experts,
                }
            }
        };
        blocks.push(QuantizedBlock {
            ln1_gamma: bw.ln1_gamma.clone(),
            ln1_beta: bw.ln1_beta.clone(),
            qkv: QLinear::build(&bw.w_qkv, &bw.b_qkv, &ln1, opts)?,
            ln1,
            ln1_factors: f1,
            query: act(SiteKind::Query)?,
            key: act(SiteKind::Key)?,
            value: act(SiteKind::Value)?,
            w_o: QLinear::build(&bw.w_o, &bw.b_o, &attn_concat, opts)?,
            attn_concat,
            attn_proj: act(SiteKind::AttnProj)?,
            ln2_gamma: bw.ln2_gamma.clone(),
            ln2_beta: bw.ln2_beta.clone(),
            ln2,
            ln2_factors: f2,
            ffn,
        });
    }
    Ok(QuantizedModel {
        config: cfg.clone(),
        options: opts.clone(),
        blocks,
        head_w: rewritten.head_w.clone(),
        head_b: rewritten.head_b.clone(),
        reference: rewritten,
    })
}

/// Output of one quantized forward pass.
#[derive(Clone, Debug)]
pub struct QuantizedForward {
    pub logits: Vec<f64>,
    /// Per-site MSE against the float model on the same input. Post-LayerNorm
    /// sites are compared in the original (un-reparameterized) domain.
    pub site_errors: BTreeMap<SiteId, f64>,
    pub gates: Vec<Option<Vec<GateDecision>>>,
    /// Tokens whose expert set is unchanged when only the gate input is
    /// quantized (float LN output → site quantizer → gate), out of all MoE
    /// tokens.
    pub gate_input_matches: (usize, usize),
}

fn mse(a: &Matrix, b: &Matrix) -> f64 {
    let n = a.data().len().max(1) as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

fn ln_site_error(got: &Matrix, want: &Matrix, f: Option<&ReparamFactors>) -> Result<f64> {
    Ok(match f {
        Some(f) => mse(&restore_activations(got, f)?, &restore_activations(want, f)?),
        None => mse(got, want),
    })
}

/// Runs the integer pipeline on one input.
pub fn forward_quantized(qm: &QuantizedModel, x: &Matrix) -> Result<QuantizedForward> {
    let cfg = &qm.config;
    if x.shape() != (cfg.n_tokens, cfg.dim) {
        return shape_err("forward_quantized", format!("input {:?}", x.shape()));
    }
    let reference = forward(x, &qm.reference, cfg)?;
    let rt = &reference.trace;
    let mut errors = BTreeMap::new();
    let mut gates = Vec::with_capacity(cfg.n_blocks);
    let mut gate_input_matches = (0, 0);
    let d = cfg.dim;
    let hd = cfg.head_dim;
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    let mut x = x.clone();

    for (b, blk) in qm.blocks.iter().enumerate() {
        let id = |kind| SiteId::new(b, kind);
        let refsite = |kind| rt.site(b, kind).expect("reference trace site");

        // attention
        let x1 = layernorm(&x, &blk.ln1_gamma, &blk.ln1_beta, cfg.ln_eps)?;
        let x1q = quantize(&x1, &blk.ln1)?;
        errors.insert(
            id(SiteKind::Ln1),
            ln_site_error(&dequantize(&x1q), refsite(SiteKind::Ln1), blk.ln1_factors.as_ref())?,
        );
        let qkv = int_matmul(&x1q, &blk.qkv.weight)?;
        let seg = |i: usize, p: &QuantParams| requantize(&qkv.col_slice(i * d, (i + 1) * d), Some(&blk.qkv.bias[i * d..(i + 1) * d]), p);
        let q = seg(0, &blk.query)?;
        let k = seg(1, &blk.key)?;
        let v = seg(2, &blk.value)?;
        errors.insert(id(SiteKind::Query), mse(&dequantize(&q), refsite(SiteKind::Query)));
        errors.insert(id(SiteKind::Key), mse(&dequantize(&k), refsite(SiteKind::Key)));
        errors.insert(id(SiteKind::Value), mse(&dequantize(&v), refsite(SiteKind::Value)));

        let mut concat = Matrix::zeros(cfg.n_tokens, d);
        for h in 0..cfg.n_heads {
            let (lo, hi) = (h * hd, (h + 1) * hd);
            let qh = q.col_slice(lo, hi)?;
            let kh = k.col_slice(lo, hi)?;
            let vh = v.col_slice(lo, hi)?;
            let scores = int_matmul(&qh, &kh.transpose())?.dequantize().scale(inv_sqrt);
            for r in 0..cfg.n_tokens {
                let (out, _) = fused_softmax_av(scores.row(r), &vh, qm.options.attn_bits)?;
                concat.row_mut(r)[lo..hi].copy_from_slice(&out);
            }
        }
        let cq = quantize(&concat, &blk.attn_concat)?;
        errors.insert(id(SiteKind::AttnConcat), mse(&dequantize(&cq), refsite(SiteKind::AttnConcat)));
        let proj = dequantize(&blk.w_o.apply(&cq, &blk.attn_proj)?);
        errors.insert(id(SiteKind::AttnProj), mse(&proj, refsite(SiteKind::AttnProj)));
        x = x.add(&proj)?;

        // feed-forward
        let y = layernorm(&x, &blk.ln2_gamma, &blk.ln2_beta, cfg.ln_eps)?;
        let yq = quantize(&y, &blk.ln2)?;
        let y_hat = dequantize(&yq);
        errors.insert(
            id(SiteKind::Ln2),
            ln_site_error(&y_hat, refsite(SiteKind::Ln2), blk.ln2_factors.as_ref())?,
        );
        match &blk.ffn {
            QFfn::Mlp(m) => {
                let run = m.run(&yq)?;
                errors.insert(id(SiteKind::Fc1Out), mse(&run.fc1_out, refsite(SiteKind::Fc1Out)));
                errors.insert(id(SiteKind::Fc2In), mse(&run.fc2_in, refsite(SiteKind::Fc2In)));
                errors.insert(id(SiteKind::Fc2Out), mse(&run.out, refsite(SiteKind::Fc2Out)));
                x = x.add(&run.out)?;
                gates.push(None);
            }
            QFfn::Moe {
                w_gate,
                b_gate,
                experts,
            } => {
                let logits = linear(&y_hat, w_gate, b_gate)?;
                let decisions = (0..cfg.n_tokens)
                    .map(|t| gate_from_logits(logits.row(t), cfg.top_k))
                    .collect::<Result<Vec<_>>>()?;
                let ref_decisions = rt.gates[b].as_ref().expect("reference moe gates");
                let forced = dequantize(&quantize(refsite(SiteKind::Ln2), &blk.ln2)?);
                let forced = linear(&forced, w_gate, b_gate)?;
                for (t, want) in ref_decisions.iter().enumerate() {
                    let got = gate_from_logits(forced.row(t), cfg.top_k)?;
                    gate_input_matches.0 += usize::from(got.expert_set() == want.expert_set());
                    gate_input_matches.1 += 1;
                }
                let groups = expert_groups(&decisions, experts.len());
                let ref_groups = expert_groups(ref_decisions, experts.len());
                let mut moe_out = Matrix::zeros(cfg.n_tokens, d);
                for (j, tokens) in groups.iter().enumerate() {
                    if tokens.is_empty() {
                        continue;
                    }
                    let run = experts[j].run(&yq.select_rows(tokens)?)?;
                    for (local, &t) in tokens.iter().enumerate() {
                        let dsn = &decisions[t];
                        let pos = dsn.experts.iter().position(|&e| e == j).expect("routed expert");
                        let g = dsn.weights[pos];
                        for (o, e) in moe_out.row_mut(t).iter_mut().zip(run.out.row(local)) {
                            *o += g * e;
                        }
                    }
                    // site errors over tokens both models sent to expert j
                    let mut mine = Vec::new();
                    let mut theirs = Vec::new();
                    for (local, t) in tokens.iter().enumerate() {
                        if let Some(rpos) = ref_groups[j].iter().position(|rtk| rtk == t) {
                            mine.push(local);
                            theirs.push(rpos);
                        }
                    }
                    if mine.is_empty() {
                        continue;
                    }
                    let pairs = [
                        (SiteKind::ExpertFc1Out(j), &run.fc1_out),
                        (SiteKind::ExpertFc2In(j), &run.fc2_in),
                        (SiteKind::ExpertFc2Out(j), &run.out),
                    ];
                    for (kind, got) in pairs {
                        let want = refsite(kind).select_rows(&theirs);
                        errors.insert(id(kind), mse(&got.select_rows(&mine), &want));
                    }
                }
                x = x.add(&moe_out)?;
                gates.push(Some(decisions));
            }
        }
    }
    Ok(QuantizedForward {
        logits: head_forward(&x, &qm.head_w, &qm.head_b)?,
        site_errors: errors,
        gates,
        gate_input_matches,
    })
}

/// Anything that classifies a token matrix.
pub trait Classifier {
    fn config(&self) -> &ModelConfig;
    fn run(&self, x: &Matrix) -> Result<RunOutput>;
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub logits: Vec<f64>,
    pub site_errors: BTreeMap<SiteId, f64>,
    pub gates: Vec<Option<Vec<GateDecision>>>,
    pub gate_input_matches: Option<(usize, usize)>,
}

/// A float model paired with its config.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatModel {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

impl Classifier for FloatModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn run(&self, x: &Matrix) -> Result<RunOutput> {
        let f = forward(x, &self.weights, &self.config)?;
        Ok(RunOutput {
            logits: f.logits,
            site_errors: BTreeMap::new(),
            gates: f.trace.gates,
            gate_input_matches: None,
        })
    }
}

impl Classifier for QuantizedModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn run(&self, x: &Matrix) -> Result<RunOutput> {
        let f = forward_quantized(self, x)?;
        Ok(RunOutput {
            logits: f.logits,
            site_errors: f.site_errors,
            gates: f.gates,
            gate_input_matches: Some(f.gate_input_matches),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub n_inputs: usize,
    pub top1_agreement: f64,
    pub logit_rmse: f64,
    /// Mean over inputs of each site's MSE (only sites the candidate reports).
    pub per_site_mse: BTreeMap<String, f64>,
    /// Fraction of MoE tokens whose expert set matches the reference,
    /// end to end.
    pub routing_fidelity: Option<f64>,
    /// Same, with the candidate's gate fed the reference LN output through
    /// the candidate's site quantizer.
    pub gate_input_fidelity: Option<f64>,
}

impl AgreementReport {
    pub fn mean_site_mse(&self) -> f64 {
        if self.per_site_mse.is_empty() {
            return 0.0;
        }
        self.per_site_mse.values().sum::<f64>() / self.per_site_mse.len() as f64
    }
}

/// Paired evaluation of `candidate` against `reference` on the same inputs.
pub fn compare_models(reference: &dyn Classifier, candidate: &dyn Classifier, inputs: &[Matrix]) -> Result<AgreementReport> {
    if reference.config() != candidate.config() {
        return Err(Error::Config("models have different configurations".into()));
    }
    if inputs.is_empty() {
        return Err(Error::Empty("evaluation inputs"));
    }
    let mut agree = 0usize;
    let mut sq = 0.0;
    let mut n_logits = 0usize;
    let mut site_sum: BTreeMap<SiteId, (f64, usize)> = BTreeMap::new();
    let mut routed = 0usize;
    let mut routed_same = 0usize;
    let mut forced = (0usize, 0usize);
    for x in inputs {
        let a = reference.run(x)?;
        let b = candidate.run(x)?;
        if argmax(&a.logits) == argmax(&b.logits) {
            agree += 1;
        }
        for (p, q) in a.logits.iter().zip(&b.logits) {
            sq += (p - q) * (p - q);
            n_logits += 1;
        }
        if let Some((m, n)) = b.gate_input_matches {
            forced.0 += m;
            forced.1 += n;
        }
        for (site, e) in b.site_errors {
            let slot = site_sum.entry(site).or_insert((0.0, 0));
            slot.0 += e;
            slot.1 += 1;
        }
        for (ga, gb) in a.gates.iter().zip(&b.gates) {
            if let (Some(ga), Some(gb)) = (ga, gb) {
                for (da, db) in ga.iter().zip(gb) {
                    routed += 1;
                    if da.expert_set() == db.expert_set() {
                        routed_same += 1;
                    }
                }
            }
        }
    }
    Ok(AgreementReport {
        n_inputs: inputs.len(),
        top1_agreement: agree as f64 / inputs.len() as f64,
        logit_rmse: (sq / n_logits.max(1) as f64).sqrt(),
        per_site_mse: site_sum
            .into_iter()
            .map(|(k, (s, n))| (k.to_string(), s / n as f64))
            .collect(),
        routing_fidelity: (routed > 0).then(|| routed_same as f64 / routed as f64),
        gate_input_fidelity: (forced.1 > 0).then(|| forced.0 as f64 / forced.1 as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InitOptions;
    use crate::numerics::Rng;

    fn setup(seed: u64, opts: &InitOptions) -> (ModelConfig, ModelWeights, Vec<Matrix>) {
        let cfg = ModelConfig::tiny();
        let mut rng = Rng::new(seed);
        let w = ModelWeights::random(&cfg, &mut rng, opts).unwrap();
        let calib = (0..8).map(|_| rng.normal_matrix(cfg.n_tokens, cfg.dim, 1.0)).collect();
        (cfg, w, calib)
    }

    #[test]
    fn reparam_off_has_no_factors() {
        let (cfg, w, calib) = setup(1, &InitOptions::default());
        let opts = QuantOptions {
            reparam: false,
            ..QuantOptions::default()
        };
        let qm = build_quantized(&w, &cfg, &calib, &opts).unwrap();
        assert!(qm.factors().is_empty());
        assert_eq!(qm.reference, w);
        let qm = build_quantized(&w, &cfg, &calib, &QuantOptions::default()).unwrap();
        assert_eq!(qm.factors().len(), 2 * cfg.n_blocks);
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let cfg = ModelConfig::tiny();
        let w = ModelWeights::zeros(&cfg).unwrap();
        let mut rng = Rng::new(3);
        let calib: Vec<Matrix> = (0..4).map(|_| rng.normal_matrix(cfg.n_tokens, cfg.dim, 1.0)).collect();
        for reparam in [false, true] {
            let opts = QuantOptions {
                reparam,
                ..QuantOptions::default()
            };
            let qm = build_quantized(&w, &cfg, &calib, &opts).unwrap();
            let out = forward_quantized(&qm, &calib[0]).unwrap();
            assert!(out.logits.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn empty_calibration_is_rejected() {
        let (cfg, w, _) = setup(2, &InitOptions::default());
        assert!(matches!(
            build_quantized(&w, &cfg, &[], &QuantOptions::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn compare_identical_models() {
        let (cfg, w, calib) = setup(4, &InitOptions::default());
        let m = FloatModel { config: cfg, weights: w };
        let r = compare_models(&m, &m, &calib).unwrap();
        assert_eq!(r.top1_agreement, 1.0);
        assert_eq!(r.logit_rmse, 0.0);
        assert_eq!(r.routing_fidelity, Some(1.0));
    }

    #[test]
    fn compare_rejects_config_mismatch() {
        let (cfg, w, calib) = setup(4, &InitOptions::default());
        let a = FloatModel {
            config: cfg.clone(),
            weights: w.clone(),
        };
        let mut cfg2 = cfg;
        cfg2.n_classes = 3;
        let b = FloatModel {
            config: cfg2.clone(),
            weights: ModelWeights::zeros(&cfg2).unwrap(),
        };
        assert!(matches!(compare_models(&a, &b, &calib), Err(Error::Config(_))));
    }

    #[test]
    fn quantized_run_reports_every_dense_site() {
        let (cfg, w, calib) = setup(6, &InitOptions::default());
        let qm = build_quantized(&w, &cfg, &calib, &QuantOptions::default()).unwrap();
        let out = forward_quantized(&qm, &calib[1]).unwrap();
        for kind in [
            SiteKind::Ln1,
            SiteKind::Query,
            SiteKind::Key,
            SiteKind::Value,
            SiteKind::AttnConcat,
            SiteKind::AttnProj,
            SiteKind::Ln2,
            SiteKind::Fc1Out,
            SiteKind::Fc2In,
            SiteKind::Fc2Out,
        ] {
            assert!(out.site_errors.contains_key(&SiteId::new(0, kind)), "{kind:?}");
        }
        assert!(out.site_errors.values().all(|e| e.is_finite() && *e >= 0.0));
        assert!(out.gates[1].is_some());
    }
}
