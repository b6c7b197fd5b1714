//! The `gen`, `quantize`, `eval` and `sim` subcommands.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, ValueEnum};
use qmoe_accelsim::{sim_model, KPolicy, LinearPolicy, SimConfig, WeightMode};
use qmoe_core::model::{forward, GateDecision, InitOptions, ModelConfig, ModelWeights};
use qmoe_core::numerics::{Matrix, Rng};
use qmoe_core::qinfer::{build_quantized, compare_models, Classifier, FloatModel, QuantOptions, QuantizedModel};
use rayon::prelude::*;

use crate::archive::{split, Archive};
use crate::convert::{
    float_from_archive, float_to_archive, inputs_from_archive, inputs_to_archive, quantized_from_archive,
    quantized_to_archive, round_to_f32, FloatMeta, InputsMeta, QUANT_KIND,
};
use crate::report::{
    emit, site_factors, to_json, BaselineRun, Check, EvalReport, QuantizeAudit, SimPoint, SimReport, SiteRow,
    SCHEMA_VERSION,
};

pub const MODEL_FILE: &str = "model.qmoe";
pub const CALIB_FILE: &str = "calib.qmoe";
pub const EVAL_FILE: &str = "eval.qmoe";

/// Relative logit tolerance for the rewritten float model.
pub const FLOAT_SEMANTICS_TOL: f64 = 1e-8;

/// An archive with the checksum of its blob.
pub struct Loaded {
    pub archive: Archive,
    pub sha256: String,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let archive = Archive::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))?;
    let (manifest, _) = split(&bytes)?;
    Ok(Loaded {
        archive,
        sha256: manifest.blob_sha256,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GammaVariance {
    Low,
    High,
}

impl GammaVariance {
    fn init(self) -> InitOptions {
        match self {
            GammaVariance::Low => InitOptions::default(),
            GammaVariance::High => InitOptions::heavy_variance(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            GammaVariance::Low => "low",
            GammaVariance::High => "high",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Clone, Debug, Args)]
pub struct GenArgs {
    #[arg(long, env = "COQMOE_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub tokens: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// Defaults to dim / heads.
    #[arg(long)]
    pub head_dim: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    #[arg(long, default_value_t = 4)]
    pub mlp_ratio: usize,
    #[arg(long, default_value_t = 4)]
    pub experts: usize,
    #[arg(long, default_value_t = 2)]
    pub top_k: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Comma-separated MoE block indices; defaults to every odd block.
    #[arg(long)]
    pub moe_blocks: Option<String>,
    #[arg(long, value_enum, default_value_t = GammaVariance::Low)]
    pub gamma_variance: GammaVariance,
    #[arg(long, default_value_t = 32)]
    pub n_calib: usize,
    #[arg(long, default_value_t = 256)]
    pub n_eval: usize,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<&str> = s.split(',').map(str::trim).filter(|t| !t.is_empty()).collect();
    items
        .iter()
        .map(|t| t.parse::<T>().map_err(|e| anyhow!("--{flag}: bad value {t:?}: {e}")))
        .collect()
}

impl GenArgs {
    pub fn config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::new(
            self.tokens,
            self.dim,
            self.heads,
            self.blocks,
            self.mlp_ratio,
            self.experts,
            self.top_k,
            self.classes,
        );
        if let Some(hd) = self.head_dim {
            cfg.head_dim = hd;
        }
        if let Some(list) = &self.moe_blocks {
            cfg.moe_blocks = parse_list("moe-blocks", list)?;
        }
        cfg.validate().context("invalid model config")?;
        Ok(cfg)
    }
}

fn gen_inputs(rng: &mut Rng, n: usize, cfg: &ModelConfig) -> Vec<Matrix> {
    (0..n)
        .map(|_| rng.normal_matrix(cfg.n_tokens, cfg.dim, 1.0).map(|v| v as f32 as f64))
        .collect()
}

/// Float weights plus calibration and evaluation inputs, all from one seed.
pub fn generate(
    cfg: &ModelConfig,
    seed: u64,
    init: &InitOptions,
    n_calib: usize,
    n_eval: usize,
) -> Result<(ModelWeights, Vec<Matrix>, Vec<Matrix>)> {
    let root = Rng::new(seed);
    let weights = round_to_f32(&ModelWeights::random(cfg, &mut root.fork(0), init)?);
    let calib = gen_inputs(&mut root.fork(1), n_calib, cfg);
    let eval = gen_inputs(&mut root.fork(2), n_eval, cfg);
    Ok((weights, calib, eval))
}

pub fn cmd_gen(a: &GenArgs) -> Result<()> {
    let cfg = a.config()?;
    if a.n_calib == 0 {
        bail!("--n-calib must be at least 1");
    }
    let (weights, calib, eval) = generate(&cfg, a.seed, &a.gamma_variance.init(), a.n_calib, a.n_eval)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let meta = FloatMeta {
        config: cfg.clone(),
        seed: a.seed,
        gamma_variance: a.gamma_variance.name().into(),
    };
    float_to_archive(&weights, &meta).write(&a.out_dir.join(MODEL_FILE))?;
    for (file, role, xs) in [(CALIB_FILE, "calibration", &calib), (EVAL_FILE, "evaluation", &eval)] {
        let m = InputsMeta {
            seed: a.seed,
            role: role.into(),
            n_tokens: cfg.n_tokens,
            dim: cfg.dim,
        };
        inputs_to_archive(xs, &m).write(&a.out_dir.join(file))?;
    }
    eprintln!(
        "wrote {MODEL_FILE}, {CALIB_FILE} ({} inputs), {EVAL_FILE} ({} inputs) to {}",
        calib.len(),
        eval.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn load_inputs(path: &Path, cfg: &ModelConfig) -> Result<(Vec<Matrix>, String)> {
    let l = load(path)?;
    let (xs, meta) = inputs_from_archive(&l.archive).with_context(|| format!("loading {}", path.display()))?;
    if (meta.n_tokens, meta.dim) != (cfg.n_tokens, cfg.dim) {
        bail!(
            "{}: inputs are {}x{} but the model expects {}x{}",
            path.display(),
            meta.n_tokens,
            meta.dim,
            cfg.n_tokens,
            cfg.dim
        );
    }
    Ok((xs, l.sha256))
}

fn load_float(path: &Path) -> Result<(ModelWeights, FloatMeta, String)> {
    let l = load(path)?;
    if l.archive.kind == QUANT_KIND {
        bail!("{} is already quantized", path.display());
    }
    let (w, meta) = float_from_archive(&l.archive).with_context(|| format!("loading {}", path.display()))?;
    Ok((w, meta, l.sha256))
}

fn load_quantized(path: &Path) -> Result<(QuantizedModel, String, String)> {
    let l = load(path)?;
    let (qm, meta) = quantized_from_archive(&l.archive).with_context(|| format!("loading {}", path.display()))?;
    Ok((qm, meta.source_sha256, l.sha256))
}

#[derive(Clone, Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the reparameterization audit; stdout if omitted.
    #[arg(long)]
    pub audit: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub reparam: Switch,
    #[arg(long, default_value_t = 8)]
    pub wbits: u32,
    #[arg(long, default_value_t = 8)]
    pub abits: u32,
    #[arg(long, default_value_t = 4)]
    pub attnbits: u32,
}

pub fn cmd_quantize(a: &QuantizeArgs) -> Result<()> {
    let (weights, meta, model_sha) = load_float(&a.model)?;
    let (calib, calib_sha) = load_inputs(&a.calib, &meta.config)?;
    let opts = QuantOptions {
        weight_bits: a.wbits,
        act_bits: a.abits,
        attn_bits: a.attnbits,
        reparam: a.reparam == Switch::On,
        ..QuantOptions::default()
    };
    let qm = build_quantized(&weights, &meta.config, &calib, &opts)?;
    let bytes = quantized_to_archive(&qm, &model_sha).to_bytes()?;
    std::fs::write(&a.out, &bytes).with_context(|| format!("writing {}", a.out.display()))?;
    let audit = QuantizeAudit {
        schema_version: SCHEMA_VERSION,
        seed: meta.seed,
        config: meta.config,
        options: opts,
        model_sha256: model_sha,
        calib_sha256: calib_sha,
        n_calib: calib.len(),
        output_sha256: split(&bytes)?.0.blob_sha256,
        rewritten_sites: site_factors(&qm),
    };
    emit(&to_json(&audit)?, a.audit.as_deref())
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    /// The float model the quantized model was built from.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub quant: PathBuf,
    #[arg(long)]
    pub inputs: PathBuf,
    /// A second quantized model (typically `--reparam off`) for a paired run.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Also require this end-to-end fraction of matching expert sets.
    #[arg(long)]
    pub min_routing_fidelity: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

/// Largest relative logit deviation of `rewritten` from `original`.
pub fn float_semantics_error(original: &ModelWeights, rewritten: &ModelWeights, cfg: &ModelConfig, xs: &[Matrix]) -> Result<f64> {
    let mut worst = 0.0f64;
    for x in xs {
        let a = forward(x, original, cfg)?.logits;
        let b = forward(x, rewritten, cfg)?.logits;
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let diff = a.iter().zip(&b).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        worst = worst.max(diff / scale);
    }
    Ok(worst)
}

fn is_post_ln(site: &str) -> bool {
    site.ends_with(".ln1") || site.ends_with(".ln2")
}

/// Returns whether every embedded check passed.
pub fn cmd_eval(a: &EvalArgs) -> Result<bool> {
    let (weights, meta, float_sha) = load_float(&a.model)?;
    let (qm, source_sha, quant_sha) = load_quantized(&a.quant)?;
    if qm.config != meta.config {
        bail!("{} and {} have different model configs", a.model.display(), a.quant.display());
    }
    let (xs, inputs_sha) = load_inputs(&a.inputs, &meta.config)?;
    let float = FloatModel {
        config: meta.config.clone(),
        weights,
    };
    let agreement = compare_models(&float, &qm, &xs)?;

    let mut checks = vec![check(
        "quantized_from_this_model",
        source_sha == float_sha,
        format!("source {source_sha}"),
    )];
    let err = float_semantics_error(&float.weights, &qm.reference, &meta.config, &xs)?;
    checks.push(check(
        "reparam_preserves_float_logits",
        err <= FLOAT_SEMANTICS_TOL,
        format!("max relative logit error {err:e} (limit {FLOAT_SEMANTICS_TOL:e})"),
    ));
    let bad: Vec<&String> = agreement.per_site_mse.iter().filter(|(_, v)| !v.is_finite()).map(|(k, _)| k).collect();
    checks.push(check(
        "site_errors_finite",
        bad.is_empty() && agreement.logit_rmse.is_finite(),
        if bad.is_empty() { "all finite".into() } else { format!("non-finite at {bad:?}") },
    ));
    if let Some(min) = a.min_routing_fidelity {
        let got = agreement.routing_fidelity.unwrap_or(1.0);
        checks.push(check("routing_fidelity", got >= min, format!("{got} (minimum {min})")));
    }

    let mut baseline = None;
    if let Some(path) = &a.baseline {
        let (bm, bsource, bsha) = load_quantized(path)?;
        if bm.config != meta.config {
            bail!("{} has a different model config", path.display());
        }
        checks.push(check("baseline_from_this_model", bsource == float_sha, format!("source {bsource}")));
        let b = compare_models(&float, &bm, &xs)?;
        let worse: Vec<String> = agreement
            .per_site_mse
            .iter()
            .filter(|(site, _)| is_post_ln(site))
            .filter_map(|(site, &m)| {
                let base = *b.per_site_mse.get(site)?;
                (m > base).then(|| format!("{site}: {m:e} > {base:e}"))
            })
            .collect();
        checks.push(check(
            "post_ln_mse_not_above_baseline",
            worse.is_empty(),
            if worse.is_empty() { "every post-LayerNorm site".into() } else { worse.join("; ") },
        ));
        checks.push(check(
            "top1_not_below_baseline",
            agreement.top1_agreement >= b.top1_agreement,
            format!("{} vs baseline {}", agreement.top1_agreement, b.top1_agreement),
        ));
        baseline = Some(BaselineRun {
            options: bm.options.clone(),
            quant_sha256: bsha,
            agreement: b,
        });
    }

    let site_table = agreement
        .per_site_mse
        .iter()
        .map(|(site, &mse)| SiteRow {
            site: site.clone(),
            mse,
            baseline_mse: baseline.as_ref().and_then(|b| b.agreement.per_site_mse.get(site).copied()),
        })
        .collect();
    let report = EvalReport {
        schema_version: SCHEMA_VERSION,
        seed: meta.seed,
        config: meta.config,
        options: qm.options.clone(),
        float_sha256: float_sha,
        quant_sha256: quant_sha,
        inputs_sha256: inputs_sha,
        agreement,
        baseline,
        site_table,
        factors: site_factors(&qm),
        checks,
    };
    emit(&to_json(&report)?, a.out.as_deref())?;
    for c in report.checks.iter().filter(|c| !c.passed) {
        eprintln!("check failed: {}: {}", c.name, c.detail);
    }
    Ok(report.all_passed())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Broadcast,
    Naive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LinearPolicyArg {
    RrRouter,
    PerPatchRefetch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum WeightModeArg {
    Stream,
    Preload,
}

#[derive(Clone, Debug, Args)]
pub struct SimArgs {
    /// Float or quantized model; routing comes from running it.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub inputs: PathBuf,
    /// Which input's routing drives the MoE kernels.
    #[arg(long, default_value_t = 0)]
    pub input_index: usize,
    /// Comma-separated attention PE counts.
    #[arg(long, default_value = "4")]
    pub npe: String,
    /// Comma-separated linear unit counts.
    #[arg(long, default_value = "4")]
    pub nl: String,
    /// Comma-separated off-chip bandwidths in bytes per cycle.
    #[arg(long, default_value = "16")]
    pub bw: String,
    #[arg(long, value_enum, default_value_t = PolicyArg::Broadcast)]
    pub policy: PolicyArg,
    #[arg(long, value_enum, default_value_t = LinearPolicyArg::RrRouter)]
    pub linear_policy: LinearPolicyArg,
    #[arg(long, value_enum, default_value_t = WeightModeArg::Stream)]
    pub weight_mode: WeightModeArg,
    /// Stream weights that do not fit on chip in preload mode.
    #[arg(long)]
    pub preload_fallback: bool,
    #[arg(long)]
    pub no_double_buffer: bool,
    /// Worker threads for independent sweep points.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl SimArgs {
    /// One simulator config per sweep point, in npe-major order.
    pub fn sweep(&self) -> Result<Vec<SimConfig>> {
        let npe: Vec<u64> = parse_list("npe", &self.npe)?;
        let nl: Vec<u64> = parse_list("nl", &self.nl)?;
        let bw: Vec<f64> = parse_list("bw", &self.bw)?;
        for (flag, n) in [("npe", npe.len()), ("nl", nl.len()), ("bw", bw.len())] {
            if n == 0 {
                bail!("empty sweep: --{flag} has no values");
            }
        }
        let base = SimConfig {
            attention_k_policy: match self.policy {
                PolicyArg::Broadcast => KPolicy::Broadcast,
                PolicyArg::Naive => KPolicy::Naive,
            },
            linear_fetch_policy: match self.linear_policy {
                LinearPolicyArg::RrRouter => LinearPolicy::RrRouter,
                LinearPolicyArg::PerPatchRefetch => LinearPolicy::PerPatchRefetch,
            },
            weight_mode: match self.weight_mode {
                WeightModeArg::Stream => WeightMode::Stream,
                WeightModeArg::Preload => WeightMode::Preload,
            },
            preload_fallback: self.preload_fallback,
            double_buffer: !self.no_double_buffer,
            ..SimConfig::default()
        };
        let mut out = Vec::with_capacity(npe.len() * nl.len() * bw.len());
        for &p in &npe {
            for &l in &nl {
                for &b in &bw {
                    let sim = SimConfig {
                        n_pe: p,
                        n_l: l,
                        offchip_bytes_per_cycle: b,
                        ..base.clone()
                    };
                    sim.validate().with_context(|| format!("sweep point npe={p} nl={l} bw={b}"))?;
                    out.push(sim);
                }
            }
        }
        Ok(out)
    }
}

pub fn cmd_sim(a: &SimArgs) -> Result<()> {
    let sweep = a.sweep()?;
    if a.jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    let l = load(&a.model)?;
    let (classifier, seed, quantized): (Box<dyn Classifier>, u64, bool) = if l.archive.kind == QUANT_KIND {
        let (qm, _) = quantized_from_archive(&l.archive)?;
        (Box::new(qm), 0, true)
    } else {
        let (weights, meta) = float_from_archive(&l.archive)?;
        (
            Box::new(FloatModel {
                config: meta.config,
                weights,
            }),
            meta.seed,
            false,
        )
    };
    let cfg = classifier.config().clone();
    let (xs, inputs_sha) = load_inputs(&a.inputs, &cfg)?;
    let x = xs
        .get(a.input_index)
        .ok_or_else(|| anyhow!("--input-index {} but the file holds {} inputs", a.input_index, xs.len()))?;
    let gates: Vec<Option<Vec<GateDecision>>> = classifier.run(x)?.gates;

    let pool = rayon::ThreadPoolBuilder::new().num_threads(a.jobs).build()?;
    let points = pool.install(|| {
        sweep
            .into_par_iter()
            .map(|sim| {
                let stats = sim_model(&cfg, &gates, &sim)?;
                Ok(SimPoint { sim, stats })
            })
            .collect::<Result<Vec<_>, qmoe_accelsim::SimError>>()
    })?;
    let report = SimReport {
        schema_version: SCHEMA_VERSION,
        seed,
        config: cfg,
        model_sha256: l.sha256,
        inputs_sha256: inputs_sha,
        input_index: a.input_index,
        quantized_routing: quantized,
        points,
    };
    if let Some(p) = &a.csv {
        std::fs::write(p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    emit(&to_json(&report)?, a.out.as_deref())
}

