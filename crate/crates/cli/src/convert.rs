//! Conversions between core types and [`Archive`]s.

use qmoe_core::model::{BlockWeights, Ffn, MlpWeights, ModelConfig, ModelWeights, MoeWeights};
use qmoe_core::numerics::Matrix;
use qmoe_core::qinfer::{QFfn, QLinear, QMlp, QuantOptions, QuantizedBlock, QuantizedModel};
use qmoe_core::quant::{ChannelAxis, QTensor, QuantParams};
use qmoe_core::reparam::ReparamFactors;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, ArchiveError, TensorData};

pub const FLOAT_KIND: &str = "float_model";
pub const QUANT_KIND: &str = "quantized_model";
pub const INPUTS_KIND: &str = "inputs";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FloatWidth {
    F32,
    F64,
}

fn bad(name: &str, detail: impl Into<String>) -> ArchiveError {
    ArchiveError::Tensor {
        name: name.to_string(),
        detail: detail.into(),
    }
}

fn floats(v: &[f64], width: FloatWidth) -> TensorData {
    match width {
        FloatWidth::F32 => TensorData::F32(v.iter().map(|&x| x as f32).collect()),
        FloatWidth::F64 => TensorData::F64(v.to_vec()),
    }
}

fn push_vec(a: &mut Archive, name: String, v: &[f64], width: FloatWidth) {
    a.push(name, vec![v.len()], floats(v, width));
}

fn push_mat(a: &mut Archive, name: String, m: &Matrix, width: FloatWidth) {
    a.push(name, vec![m.rows(), m.cols()], floats(m.data(), width));
}

fn get_vec(a: &Archive, name: &str, len: usize) -> Result<Vec<f64>, ArchiveError> {
    let t = a.get(name)?;
    if t.shape != [len] {
        return Err(bad(name, format!("shape {:?}, expected [{len}]", t.shape)));
    }
    t.data.to_f64().ok_or_else(|| bad(name, "expected a float tensor"))
}

fn get_mat(a: &Archive, name: &str, rows: usize, cols: usize) -> Result<Matrix, ArchiveError> {
    let t = a.get(name)?;
    if t.shape != [rows, cols] {
        return Err(bad(name, format!("shape {:?}, expected [{rows}, {cols}]", t.shape)));
    }
    let data = t.data.to_f64().ok_or_else(|| bad(name, "expected a float tensor"))?;
    Matrix::new(rows, cols, data).map_err(|e| bad(name, e.to_string()))
}

fn get_ints(a: &Archive, name: &str, shape: &[usize]) -> Result<Vec<i64>, ArchiveError> {
    let t = a.get(name)?;
    if t.shape != shape {
        return Err(bad(name, format!("shape {:?}, expected {shape:?}", t.shape)));
    }
    t.data.to_i64().ok_or_else(|| bad(name, "expected an integer tensor"))
}

/// Rounds every weight to `f32`, the precision float archives store.
pub fn round_to_f32(w: &ModelWeights) -> ModelWeights {
    let v = |x: &[f64]| x.iter().map(|&a| a as f32 as f64).collect::<Vec<_>>();
    let m = |x: &Matrix| x.map(|a| a as f32 as f64);
    let mlp = |e: &MlpWeights| MlpWeights {
        w1: m(&e.w1),
        b1: v(&e.b1),
        w2: m(&e.w2),
        b2: v(&e.b2),
    };
    ModelWeights {
        blocks: w
            .blocks
            .iter()
            .map(|b| BlockWeights {
                ln1_gamma: v(&b.ln1_gamma),
                ln1_beta: v(&b.ln1_beta),
                w_qkv: m(&b.w_qkv),
                b_qkv: v(&b.b_qkv),
                w_o: m(&b.w_o),
                b_o: v(&b.b_o),
                ln2_gamma: v(&b.ln2_gamma),
                ln2_beta: v(&b.ln2_beta),
                ffn: match &b.ffn {
                    Ffn::Mlp(e) => Ffn::Mlp(mlp(e)),
                    Ffn::Moe(moe) => Ffn::Moe(MoeWeights {
                        w_gate: m(&moe.w_gate),
                        b_gate: v(&moe.b_gate),
                        experts: moe.experts.iter().map(mlp).collect(),
                    }),
                },
            })
            .collect(),
        head_w: m(&w.head_w),
        head_b: v(&w.head_b),
    }
}

fn push_mlp(a: &mut Archive, p: &str, e: &MlpWeights, width: FloatWidth) {
    push_mat(a, format!("{p}.w1"), &e.w1, width);
    push_vec(a, format!("{p}.b1"), &e.b1, width);
    push_mat(a, format!("{p}.w2"), &e.w2, width);
    push_vec(a, format!("{p}.b2"), &e.b2, width);
}

fn get_mlp(a: &Archive, p: &str, d: usize, hidden: usize) -> Result<MlpWeights, ArchiveError> {
    Ok(MlpWeights {
        w1: get_mat(a, &format!("{p}.w1"), d, hidden)?,
        b1: get_vec(a, &format!("{p}.b1"), hidden)?,
        w2: get_mat(a, &format!("{p}.w2"), hidden, d)?,
        b2: get_vec(a, &format!("{p}.b2"), d)?,
    })
}

/// Appends every float weight under `prefix`.
pub fn push_weights(a: &mut Archive, prefix: &str, w: &ModelWeights, width: FloatWidth) {
    for (i, b) in w.blocks.iter().enumerate() {
        let p = format!("{prefix}b{i}");
        push_vec(a, format!("{p}.ln1_gamma"), &b.ln1_gamma, width);
        push_vec(a, format!("{p}.ln1_beta"), &b.ln1_beta, width);
        push_mat(a, format!("{p}.w_qkv"), &b.w_qkv, width);
        push_vec(a, format!("{p}.b_qkv"), &b.b_qkv, width);
        push_mat(a, format!("{p}.w_o"), &b.w_o, width);
        push_vec(a, format!("{p}.b_o"), &b.b_o, width);
        push_vec(a, format!("{p}.ln2_gamma"), &b.ln2_gamma, width);
        push_vec(a, format!("{p}.ln2_beta"), &b.ln2_beta, width);
        match &b.ffn {
            Ffn::Mlp(e) => push_mlp(a, &format!("{p}.mlp"), e, width),
            Ffn::Moe(moe) => {
                push_mat(a, format!("{p}.w_gate"), &moe.w_gate, width);
                push_vec(a, format!("{p}.b_gate"), &moe.b_gate, width);
                for (j, e) in moe.experts.iter().enumerate() {
                    push_mlp(a, &format!("{p}.e{j}"), e, width);
                }
            }
        }
    }
    push_mat(a, format!("{prefix}head_w"), &w.head_w, width);
    push_vec(a, format!("{prefix}head_b"), &w.head_b, width);
}

pub fn get_weights(a: &Archive, prefix: &str, cfg: &ModelConfig) -> Result<ModelWeights, ArchiveError> {
    let (d, h) = (cfg.dim, cfg.hidden());
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for i in 0..cfg.n_blocks {
        let p = format!("{prefix}b{i}");
        let ffn = if cfg.is_moe(i) {
            Ffn::Moe(MoeWeights {
                w_gate: get_mat(a, &format!("{p}.w_gate"), d, cfg.n_experts)?,
                b_gate: get_vec(a, &format!("{p}.b_gate"), cfg.n_experts)?,
                experts: (0..cfg.n_experts)
                    .map(|j| get_mlp(a, &format!("{p}.e{j}"), d, h))
                    .collect::<Result<_, _>>()?,
            })
        } else {
            Ffn::Mlp(get_mlp(a, &format!("{p}.mlp"), d, h)?)
        };
        blocks.push(BlockWeights {
            ln1_gamma: get_vec(a, &format!("{p}.ln1_gamma"), d)?,
            ln1_beta: get_vec(a, &format!("{p}.ln1_beta"), d)?,
            w_qkv: get_mat(a, &format!("{p}.w_qkv"), d, 3 * d)?,
            b_qkv: get_vec(a, &format!("{p}.b_qkv"), 3 * d)?,
            w_o: get_mat(a, &format!("{p}.w_o"), d, d)?,
            b_o: get_vec(a, &format!("{p}.b_o"), d)?,
            ln2_gamma: get_vec(a, &format!("{p}.ln2_gamma"), d)?,
            ln2_beta: get_vec(a, &format!("{p}.ln2_beta"), d)?,
            ffn,
        });
    }
    Ok(ModelWeights {
        blocks,
        head_w: get_mat(a, &format!("{prefix}head_w"), d, cfg.n_classes)?,
        head_b: get_vec(a, &format!("{prefix}head_b"), cfg.n_classes)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloatMeta {
    pub config: ModelConfig,
    pub seed: u64,
    pub gamma_variance: String,
}

pub fn float_to_archive(w: &ModelWeights, meta: &FloatMeta) -> Archive {
    let mut a = Archive::new(FLOAT_KIND, serde_json::to_value(meta).expect("meta serializes"));
    push_weights(&mut a, "", w, FloatWidth::F32);
    a
}

fn meta_of<T: for<'de> Deserialize<'de>>(a: &Archive) -> Result<T, ArchiveError> {
    serde_json::from_value(a.meta.clone()).map_err(|e| ArchiveError::Header(format!("meta: {e}")))
}

pub fn float_from_archive(a: &Archive) -> Result<(ModelWeights, FloatMeta), ArchiveError> {
    a.expect_kind(FLOAT_KIND)?;
    let meta: FloatMeta = meta_of(a)?;
    meta.config.validate().map_err(|e| ArchiveError::Header(e.to_string()))?;
    let w = get_weights(a, "", &meta.config)?;
    w.check(&meta.config).map_err(|e| ArchiveError::Header(e.to_string()))?;
    Ok((w, meta))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputsMeta {
    pub seed: u64,
    pub role: String,
    pub n_tokens: usize,
    pub dim: usize,
}

pub fn inputs_to_archive(xs: &[Matrix], meta: &InputsMeta) -> Archive {
    let mut a = Archive::new(INPUTS_KIND, serde_json::to_value(meta).expect("meta serializes"));
    let data: Vec<f64> = xs.iter().flat_map(|x| x.data().iter().copied()).collect();
    a.push("inputs", vec![xs.len(), meta.n_tokens, meta.dim], floats(&data, FloatWidth::F32));
    a
}

pub fn inputs_from_archive(a: &Archive) -> Result<(Vec<Matrix>, InputsMeta), ArchiveError> {
    a.expect_kind(INPUTS_KIND)?;
    let meta: InputsMeta = meta_of(a)?;
    let t = a.get("inputs")?;
    let [n, r, c] = t.shape[..] else {
        return Err(bad("inputs", format!("shape {:?} is not 3-d", t.shape)));
    };
    if (r, c) != (meta.n_tokens, meta.dim) {
        return Err(bad("inputs", format!("shape {:?} disagrees with the manifest", t.shape)));
    }
    let data = t.data.to_f64().ok_or_else(|| bad("inputs", "expected floats"))?;
    let xs = (0..n)
        .map(|i| Matrix::new(r, c, data[i * r * c..(i + 1) * r * c].to_vec()).map_err(|e| bad("inputs", e.to_string())))
        .collect::<Result<_, _>>()?;
    Ok((xs, meta))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MlpMeta {
    fc1_weight: QuantParams,
    fc1_out: QuantParams,
    fc2_in: QuantParams,
    fc2_weight: QuantParams,
    fc2_out: QuantParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum FfnMeta {
    Mlp(MlpMeta),
    Moe(Vec<MlpMeta>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlockMeta {
    ln1: QuantParams,
    ln1_factors: Option<ReparamFactors>,
    qkv_weight: QuantParams,
    query: QuantParams,
    key: QuantParams,
    value: QuantParams,
    attn_concat: QuantParams,
    w_o_weight: QuantParams,
    attn_proj: QuantParams,
    ln2: QuantParams,
    ln2_factors: Option<ReparamFactors>,
    ffn: FfnMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantMeta {
    pub config: ModelConfig,
    pub options: QuantOptions,
    /// Checksum of the float archive blob this model was built from.
    pub source_sha256: String,
    blocks: Vec<BlockMeta>,
}

fn push_qlinear(a: &mut Archive, p: &str, l: &QLinear) {
    let w = &l.weight;
    a.push(
        format!("{p}.codes"),
        vec![w.rows(), w.cols()],
        TensorData::compact_ints(w.codes().iter().map(|&c| c as i64)),
    );
    a.push(format!("{p}.bias"), vec![l.bias.len()], TensorData::compact_ints(l.bias.iter().copied()));
}

fn get_qlinear(a: &Archive, p: &str, rows: usize, cols: usize, params: &QuantParams) -> Result<QLinear, ArchiveError> {
    let name = format!("{p}.codes");
    let codes = get_ints(a, &name, &[rows, cols])?
        .into_iter()
        .map(|c| i32::try_from(c).map_err(|_| bad(&name, "code exceeds 32 bits")))
        .collect::<Result<Vec<_>, _>>()?;
    let weight = QTensor::from_codes(rows, cols, codes, params.clone(), ChannelAxis::Col)
        .map_err(|e| bad(&name, e.to_string()))?;
    Ok(QLinear {
        weight,
        bias: get_ints(a, &format!("{p}.bias"), &[cols])?,
    })
}

fn mlp_meta(m: &QMlp) -> MlpMeta {
    MlpMeta {
        fc1_weight: m.fc1.weight.params().clone(),
        fc1_out: m.fc1_out.clone(),
        fc2_in: m.fc2_in.clone(),
        fc2_weight: m.fc2.weight.params().clone(),
        fc2_out: m.fc2_out.clone(),
    }
}

fn get_qmlp(a: &Archive, p: &str, m: &MlpMeta, d: usize, h: usize) -> Result<QMlp, ArchiveError> {
    Ok(QMlp {
        fc1: get_qlinear(a, &format!("{p}.fc1"), d, h, &m.fc1_weight)?,
        fc1_out: m.fc1_out.clone(),
        fc2_in: m.fc2_in.clone(),
        fc2: get_qlinear(a, &format!("{p}.fc2"), h, d, &m.fc2_weight)?,
        fc2_out: m.fc2_out.clone(),
    })
}

pub fn quantized_to_archive(qm: &QuantizedModel, source_sha256: &str) -> Archive {
    let mut metas = Vec::with_capacity(qm.blocks.len());
    let mut a = Archive::new(QUANT_KIND, serde_json::Value::Null);
    let f64w = FloatWidth::F64;
    for (i, b) in qm.blocks.iter().enumerate() {
        let p = format!("b{i}");
        push_vec(&mut a, format!("{p}.ln1_gamma"), &b.ln1_gamma, f64w);
        push_vec(&mut a, format!("{p}.ln1_beta"), &b.ln1_beta, f64w);
        push_qlinear(&mut a, &format!("{p}.qkv"), &b.qkv);
        push_qlinear(&mut a, &format!("{p}.w_o"), &b.w_o);
        push_vec(&mut a, format!("{p}.ln2_gamma"), &b.ln2_gamma, f64w);
        push_vec(&mut a, format!("{p}.ln2_beta"), &b.ln2_beta, f64w);
        let ffn = match &b.ffn {
            QFfn::Mlp(m) => {
                push_qlinear(&mut a, &format!("{p}.mlp.fc1"), &m.fc1);
                push_qlinear(&mut a, &format!("{p}.mlp.fc2"), &m.fc2);
                FfnMeta::Mlp(mlp_meta(m))
            }
            QFfn::Moe { w_gate, b_gate, experts } => {
                push_mat(&mut a, format!("{p}.w_gate"), w_gate, f64w);
                push_vec(&mut a, format!("{p}.b_gate"), b_gate, f64w);
                for (j, e) in experts.iter().enumerate() {
                    push_qlinear(&mut a, &format!("{p}.e{j}.fc1"), &e.fc1);
                    push_qlinear(&mut a, &format!("{p}.e{j}.fc2"), &e.fc2);
                }
                FfnMeta::Moe(experts.iter().map(mlp_meta).collect())
            }
        };
        metas.push(BlockMeta {
            ln1: b.ln1.clone(),
            ln1_factors: b.ln1_factors.clone(),
            qkv_weight: b.qkv.weight.params().clone(),
            query: b.query.clone(),
            key: b.key.clone(),
            value: b.value.clone(),
            attn_concat: b.attn_concat.clone(),
            w_o_weight: b.w_o.weight.params().clone(),
            attn_proj: b.attn_proj.clone(),
            ln2: b.ln2.clone(),
            ln2_factors: b.ln2_factors.clone(),
            ffn,
        });
    }
    push_mat(&mut a, "head_w".into(), &qm.head_w, f64w);
    push_vec(&mut a, "head_b".into(), &qm.head_b, f64w);
    push_weights(&mut a, "ref.", &qm.reference, f64w);
    let meta = QuantMeta {
        config: qm.config.clone(),
        options: qm.options.clone(),
        source_sha256: source_sha256.to_string(),
        blocks: metas,
    };
    a.meta = serde_json::to_value(meta).expect("meta serializes");
    a
}

pub fn quantized_from_archive(a: &Archive) -> Result<(QuantizedModel, QuantMeta), ArchiveError> {
    a.expect_kind(QUANT_KIND)?;
    let meta: QuantMeta = meta_of(a)?;
    let cfg = &meta.config;
    cfg.validate().map_err(|e| ArchiveError::Header(e.to_string()))?;
    if meta.blocks.len() != cfg.n_blocks {
        return Err(ArchiveError::Header(format!("{} block entries for {} blocks", meta.blocks.len(), cfg.n_blocks)));
    }
    let (d, h) = (cfg.dim, cfg.hidden());
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for (i, bm) in meta.blocks.iter().enumerate() {
        let p = format!("b{i}");
        let ffn = match (&bm.ffn, cfg.is_moe(i)) {
            (FfnMeta::Mlp(m), false) => QFfn::Mlp(get_qmlp(a, &format!("{p}.mlp"), m, d, h)?),
            (FfnMeta::Moe(ms), true) if ms.len() == cfg.n_experts => QFfn::Moe {
                w_gate: get_mat(a, &format!("{p}.w_gate"), d, cfg.n_experts)?,
                b_gate: get_vec(a, &format!("{p}.b_gate"), cfg.n_experts)?,
                experts: ms
                    .iter()
                    .enumerate()
                    .map(|(j, m)| get_qmlp(a, &format!("{p}.e{j}"), m, d, h))
                    .collect::<Result<_, _>>()?,
            },
            _ => return Err(ArchiveError::Header(format!("block {i} feed-forward disagrees with the config"))),
        };
        blocks.push(QuantizedBlock {
            ln1_gamma: get_vec(a, &format!("{p}.ln1_gamma"), d)?,
            ln1_beta: get_vec(a, &format!("{p}.ln1_beta"), d)?,
            ln1: bm.ln1.clone(),
            ln1_factors: bm.ln1_factors.clone(),
            qkv: get_qlinear(a, &format!("{p}.qkv"), d, 3 * d, &bm.qkv_weight)?,
            query: bm.query.clone(),
            key: bm.key.clone(),
            value: bm.value.clone(),
            attn_concat: bm.attn_concat.clone(),
            w_o: get_qlinear(a, &format!("{p}.w_o"), d, d, &bm.w_o_weight)?,
            attn_proj: bm.attn_proj.clone(),
            ln2_gamma: get_vec(a, &format!("{p}.ln2_gamma"), d)?,
            ln2_beta: get_vec(a, &format!("{p}.ln2_beta"), d)?,
            ln2: bm.ln2.clone(),
            ln2_factors: bm.ln2_factors.clone(),
            ffn,
        });
    }
    let qm = QuantizedModel {
        config: cfg.clone(),
        options: meta.options.clone(),
        blocks,
        head_w: get_mat(a, "head_w", d, cfg.n_classes)?,
        head_b: get_vec(a, "head_b", cfg.n_classes)?,
        reference: get_weights(a, "ref.", cfg)?,
    };
    Ok((qm, meta))
}
