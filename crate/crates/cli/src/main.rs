use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use ssmq_core::archive::{archive_read, archive_write, encode, read_manifest, ArchiveMap};
use ssmq_core::model::{
    gen_toy_model, load_float, load_quant, model_kind, synthetic_tokens, FloatModel, LanguageModel,
    ModelConfig, ModelKind, ToySpec,
};
use ssmq_core::pipeline::{evaluate, prepare, quantize_model, EvalReport, PipelineConfig};
use ssmq_core::search::{evolve, PrecisionPlan, SearchConfig, SearchSpace};
use ssmq_core::ssm::{Site, Variant};

#[derive(Parser)]
#[command(
    name = "ssmq",
    version,
    about = "Post-training quantization for selective state-space models"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a random toy float model (and optionally calibration tokens).
    GenToy(GenToyArgs),
    /// Collect activation statistics and cluster maps; writes JSON.
    Calibrate(PipelineArgs),
    /// Quantize a float model archive.
    Quantize(QuantizeArgs),
    /// Compare a quantized (or float) archive against a float archive.
    Eval(EvalArgs),
    /// Search per-block precision under an A16 budget.
    Search(SearchArgs),
    /// Print an archive's manifest and model summary.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenToyArgs {
    #[arg(long, default_value = "mamba2", value_parser = parse_variant)]
    variant: Variant,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n_blocks: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    /// Block that gets extreme gate rows.
    #[arg(long)]
    sensitive_block: Option<usize>,
    /// Override a model config field, e.g. `dims.d_state=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Also write synthetic calibration tokens here.
    #[arg(long)]
    tokens_out: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    n_samples: usize,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
}

#[derive(Args, Clone)]
struct PipelineArgs {
    /// Pipeline config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Float model archive; overrides `model_path`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// W8A8, W4A8, W4A16 or Mixed.
    #[arg(long)]
    profile: Option<String>,
    /// Override a config field, e.g. `gptq=false` or `calib.seed=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Calibration tokens (JSON array of sequences); synthetic when absent.
    #[arg(long)]
    calib_tokens: Option<PathBuf>,
    /// Output JSON (calibrate) or archive (quantize); overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct TokenArgs {
    /// Evaluation tokens (JSON array of sequences); synthetic when absent.
    #[arg(long)]
    tokens: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    eval_samples: usize,
    #[arg(long, default_value_t = 64)]
    eval_len: usize,
    #[arg(long, default_value_t = 1)]
    eval_seed: u64,
}

#[derive(Args)]
struct QuantizeArgs {
    #[command(flatten)]
    pipe: PipelineArgs,
    /// Evaluation report path; overrides `output.report`.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    eval: TokenArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    float: PathBuf,
    #[arg(long)]
    quant: PathBuf,
    #[command(flatten)]
    tokens: TokenArgs,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    pipe: PipelineArgs,
    /// Most blocks allowed at W4A16.
    #[arg(long)]
    budget: usize,
    /// Search config JSON.
    #[arg(long)]
    search_config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fitness trace JSON.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Also write the best plan's quantized archive.
    #[arg(long)]
    archive: Option<PathBuf>,
    #[command(flatten)]
    eval: TokenArgs,
}

#[derive(Args)]
struct InspectArgs {
    archive: PathBuf,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    match s.to_ascii_lowercase().as_str() {
        "mamba1" => Ok(Variant::Mamba1),
        "mamba2" => Ok(Variant::Mamba2),
        _ => Err(format!("unknown variant `{s}`")),
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Write to `path`, or to stdout when there is none.
fn emit(path: Option<&Path>, v: &Value) -> Result<()> {
    match path {
        Some(p) => write_json(p, v),
        None => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{}", serde_json::to_string_pretty(v)?)?;
            Ok(())
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Apply `a.b.c=value` to an existing field; the value is parsed as JSON,
/// else taken as a string.
fn apply_set(root: &mut Value, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!("expected KEY=VALUE, got `{assignment}`");
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = root;
    for part in key.split('.') {
        let Value::Object(map) = slot else {
            bail!("`{key}` does not name a config field");
        };
        slot = map
            .get_mut(part)
            .with_context(|| format!("unknown config field `{key}`"))?;
    }
    *slot = value;
    Ok(())
}

fn load_config(a: &PipelineArgs) -> Result<PipelineConfig> {
    let mut v = serde_json::to_value(PipelineConfig::default())?;
    if let Some(p) = &a.config {
        merge(&mut v, read_json(p)?);
    }
    for s in &a.sets {
        apply_set(&mut v, s)?;
    }
    if let Some(p) = &a.profile {
        v["profile"] = Value::String(p.clone());
    }
    if let Some(m) = &a.model {
        v["model_path"] = json!(m);
    }
    let cfg: PipelineConfig = serde_json::from_value(v).context("invalid pipeline config")?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_float_path(path: &Path) -> Result<FloatModel> {
    let map = archive_read(path)?;
    Ok(load_float(&map)?)
}

fn read_tokens(path: &Path, vocab: usize) -> Result<Vec<Vec<u32>>> {
    let tokens: Vec<Vec<u32>> = serde_json::from_value(read_json(path)?)?;
    if tokens.is_empty() || tokens.iter().any(|s| s.is_empty()) {
        bail!("{} holds no tokens", path.display());
    }
    if tokens.iter().flatten().any(|&t| t as usize >= vocab) {
        bail!("{} has token ids outside the vocabulary", path.display());
    }
    Ok(tokens)
}

fn calib_tokens(a: &PipelineArgs, cfg: &PipelineConfig, vocab: usize) -> Result<Vec<Vec<u32>>> {
    match &a.calib_tokens {
        Some(p) => read_tokens(p, vocab),
        None => Ok(synthetic_tokens(
            cfg.calib.n_samples,
            cfg.calib.seq_len,
            vocab,
            cfg.calib.seed,
        )),
    }
}

fn eval_tokens(a: &TokenArgs, vocab: usize) -> Result<Vec<Vec<u32>>> {
    match &a.tokens {
        Some(p) => read_tokens(p, vocab),
        None => Ok(synthetic_tokens(
            a.eval_samples,
            a.eval_len,
            vocab,
            a.eval_seed,
        )),
    }
}

fn model_path(cfg: &PipelineConfig) -> Result<&Path> {
    cfg.model_path
        .as_deref()
        .context("no model: pass --model or set model_path")
}

fn gen_toy(a: GenToyArgs) -> Result<()> {
    let mut cfg = ModelConfig::toy(a.variant);
    if let Some(n) = a.n_blocks {
        cfg.n_blocks = n;
    }
    if let Some(v) = a.vocab {
        cfg.vocab = v;
    }
    if !a.sets.is_empty() {
        let mut v = serde_json::to_value(cfg)?;
        for s in &a.sets {
            apply_set(&mut v, s)?;
        }
        cfg = serde_json::from_value(v).context("invalid model config")?;
    }
    let mut spec = ToySpec::new(cfg, a.seed);
    spec.sensitive_block = a.sensitive_block;
    let model = gen_toy_model(&spec)?;
    archive_write(&model.to_archive()?, &a.out)?;
    if let Some(p) = &a.tokens_out {
        write_json(
            p,
            &json!(synthetic_tokens(a.n_samples, a.seq_len, cfg.vocab, a.seed)),
        )?;
    }
    Ok(())
}

fn calibrate(a: PipelineArgs) -> Result<()> {
    let cfg = load_config(&a)?;
    let float = load_float_path(model_path(&cfg)?)?;
    let tokens = calib_tokens(&a, &cfg, float.config.vocab)?;
    let prep = prepare(&float, &tokens, &cfg)?;
    let blocks: Vec<Value> = prep
        .stats
        .blocks
        .iter()
        .enumerate()
        .map(|(i, sites)| {
            let max: serde_json::Map<String, Value> = sites
                .iter()
                .map(|(s, st)| (site_name(*s), json!(st.max())))
                .collect();
            json!({
                "block": i,
                "site_max": max,
                "cluster_map": prep.cmaps[i],
                "reorder_plan": prep.plans[i],
            })
        })
        .collect();
    let out =
        json!({ "n_sequences": tokens.len(), "rotated": prep.model.rotated, "blocks": blocks });
    emit(a.out.as_deref(), &out)
}

fn site_name(s: Site) -> String {
    serde_json::to_value(s)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_else(|| format!("{s:?}"))
}

fn quantize(a: QuantizeArgs) -> Result<()> {
    let cfg = load_config(&a.pipe)?;
    let float_path = model_path(&cfg)?;
    let float_map = archive_read(float_path)?;
    let float = load_float(&float_map)?;
    let tokens = calib_tokens(&a.pipe, &cfg, float.config.vocab)?;
    let out = a
        .pipe
        .out
        .clone()
        .or_else(|| cfg.output.archive.clone())
        .context("no output: pass --out or set output.archive")?;
    let q = quantize_model(&float, &tokens, &cfg)?;
    let qmap = q.to_archive()?;
    archive_write(&qmap, &out)?;
    if let Some(rp) = a.report.clone().or_else(|| cfg.output.report.clone()) {
        let eval = eval_tokens(&a.eval, float.config.vocab)?;
        let mut report = evaluate(
            &float,
            &q.model,
            &eval,
            encode(&float_map)?.len(),
            encode(&qmap)?.len(),
            q.model.profiles(),
        )?;
        report.config = Some(cfg);
        write_json(&rp, &serde_json::to_value(&report)?)?;
    }
    Ok(())
}

fn load_any(map: &ArchiveMap) -> Result<Box<dyn LanguageModel>> {
    Ok(match model_kind(map)? {
        ModelKind::Float => Box::new(load_float(map)?),
        ModelKind::Quant => Box::new(load_quant(map)?),
    })
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let fmap = archive_read(&a.float)?;
    let float = load_float(&fmap)?;
    let qmap = archive_read(&a.quant)?;
    let quant = load_any(&qmap)?;
    let profiles = match model_kind(&qmap)? {
        ModelKind::Quant => load_quant(&qmap)?.profiles(),
        ModelKind::Float => Vec::new(),
    };
    let tokens = eval_tokens(&a.tokens, float.config.vocab)?;
    let report: EvalReport = evaluate(
        &float,
        quant.as_ref(),
        &tokens,
        encode(&fmap)?.len(),
        encode(&qmap)?.len(),
        profiles,
    )?;
    emit(a.out.as_deref(), &serde_json::to_value(&report)?)
}

fn search(a: SearchArgs) -> Result<()> {
    let cfg = load_config(&a.pipe)?;
    let float = load_float_path(model_path(&cfg)?)?;
    let calib = calib_tokens(&a.pipe, &cfg, float.config.vocab)?;
    let eval = eval_tokens(&a.eval, float.config.vocab)?;
    let mut scfg = match &a.search_config {
        Some(p) => serde_json::from_value::<SearchConfig>(read_json(p)?)
            .context("invalid search config")?,
        None => SearchConfig::default(),
    };
    if let Some(s) = a.seed {
        scfg.seed = s;
    }
    let space = SearchSpace::new(&float, &calib, &eval, &cfg)?;
    let result = evolve(&space, a.budget, &scfg, &[])?;
    if let Some(p) = &a.archive {
        let model = space.build(&result.plan)?;
        archive_write(&model.to_archive()?, p)?;
    }
    if let Some(p) = &a.trace {
        let trace = json!({
            "metric": "negative logit MSE vs float",
            "search": scfg,
            "sensitivity": space.sensitivity,
            "generations": result.trace,
        });
        write_json(p, &trace)?;
    }
    let plan: &PrecisionPlan = &result.plan;
    let out = json!({ "plan": plan, "fitness": result.fitness });
    emit(a.pipe.out.as_deref(), &out)
}

fn inspect(a: InspectArgs) -> Result<()> {
    let bytes = fs::read(&a.archive).with_context(|| format!("reading {}", a.archive.display()))?;
    let (manifest, _) = read_manifest(&bytes)?;
    let map = archive_read(&a.archive)?;
    let summary = match model_kind(&map) {
        Ok(ModelKind::Float) => {
            let m = load_float(&map)?;
            json!({
                "kind": "float",
                "config": m.config,
                "rotated": m.rotated,
                "rewrites": m.blocks.iter().map(|b| &b.rewrites).collect::<Vec<_>>(),
            })
        }
        Ok(ModelKind::Quant) => {
            let m = load_quant(&map)?;
            json!({
                "kind": "quant",
                "config": m.config,
                "rotated": m.rotated,
                "profiles": m.profiles(),
                "embedding_bits": m.embedding.bits(),
                "head_bits": m.head.bits(),
                "rewrites": m.blocks.iter().map(|b| &b.base.rewrites).collect::<Vec<_>>(),
            })
        }
        Err(_) => Value::Null,
    };
    let out = json!({ "bytes": bytes.len(), "model": summary, "manifest": manifest });
    emit(None, &out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenToy(a) => gen_toy(a),
        Cmd::Calibrate(a) => calibrate(a),
        Cmd::Quantize(a) => quantize(a),
        Cmd::Eval(a) => eval_cmd(a),
        Cmd::Search(a) => search(a),
        Cmd::Inspect(a) => inspect(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
