//! `nullmark`: embed, extract and attack watermarks in a toy model.
//!
//! Exit codes: 0 success, 2 usage, 3 data or parse error, 4 numeric failure.
//! Errors are printed to stderr as one JSON object.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use config::RunConfig;
use nullmark_core::attacks::parse_attack;
use nullmark_core::eval::{run_sweep, write_reports, SweepManifest};
use nullmark_core::{
    bits_from_hex, builtin_templates, capacity, embed_watermark, extract, load_model, save_model,
    Error, SeedKey,
};

#[derive(Parser)]
#[command(name = "nullmark", version, about = "Multi-bit watermarks in a toy associative-memory model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a fresh model and write it with its run configuration.
    Init(InitArgs),
    /// Embed a hex watermark under a secret seed.
    Embed(EmbedArgs),
    /// Recover a watermark by querying the model.
    Extract(ExtractArgs),
    /// Apply one weight-space attack.
    Attack(AttackArgs),
    /// Run an experiment grid from a JSON manifest.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration JSON (as written by `init --config-out`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Candidate range size per question.
    #[arg(long)]
    n: Option<u32>,
    /// Answer integers per question.
    #[arg(long)]
    m: Option<u32>,
    /// Maximum editing rounds.
    #[arg(long)]
    t: Option<usize>,
    /// Weight of the noisy-key update.
    #[arg(long)]
    lambda: Option<f64>,
    /// Editing-score threshold for early stop.
    #[arg(long)]
    tau: Option<f64>,
    /// Relative clip of each target shift.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Relative std of the key noise matrix.
    #[arg(long)]
    noise_sigma_rel: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_json(&read(p)?)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.n {
            cfg.n = v;
        }
        if let Some(v) = self.m {
            cfg.m = v;
        }
        let e = &mut cfg.edit;
        e.t = self.t.unwrap_or(e.t);
        e.lambda = self.lambda.unwrap_or(e.lambda);
        e.tau = self.tau.unwrap_or(e.tau);
        e.epsilon = self.epsilon.unwrap_or(e.epsilon);
        e.noise_sigma_rel = self.noise_sigma_rel.unwrap_or(e.noise_sigma_rel);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct InitArgs {
    /// Base seed: encoder, decoder and corpus seeds become seed, seed+1, seed+2.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    model_out: PathBuf,
    /// Where to write the resolved run configuration.
    #[arg(long)]
    config_out: Option<PathBuf>,
    #[arg(long)]
    d_k: Option<usize>,
    #[arg(long)]
    preserved_count: Option<usize>,
    #[arg(long)]
    m_max: Option<usize>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    model: PathBuf,
    /// Secret watermark key.
    #[arg(long)]
    seed: u64,
    /// Watermark, most-significant nibble first.
    #[arg(long)]
    watermark: String,
    /// Watermark length in bits when not 4 x hex digits; the leading bits of
    /// the hex string are used.
    #[arg(long)]
    bits: Option<usize>,
    #[arg(long)]
    model_out: PathBuf,
    /// Write the edit trace here instead of stdout.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Include wall-clock timings in the trace.
    #[arg(long)]
    timing: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Watermark length in bits.
    #[arg(long)]
    bits: usize,
    /// Known watermark hex; fills per-question match flags and the ESR.
    #[arg(long)]
    expected: Option<String>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    model_out: PathBuf,
    /// none, noise, prune, quantize, finetune, edit or overwrite.
    #[arg(long)]
    kind: String,
    /// Attack seed; required by noise, finetune, edit and overwrite.
    #[arg(long)]
    seed: Option<u64>,
    /// Noise standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
    /// Fraction of weights to zero.
    #[arg(long)]
    ratio: Option<f64>,
    /// Quantisation width, 4 or 8.
    #[arg(long)]
    quant_bits: Option<u32>,
    /// Fine-tuning steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Fine-tuning learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Number of injected facts for the edit attack.
    #[arg(long)]
    cases: Option<usize>,
    /// Overwrite scenario, A or B.
    #[arg(long)]
    scenario: Option<String>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    csv_out: PathBuf,
    #[arg(long)]
    summary_out: PathBuf,
    /// Override the manifest's worker count.
    #[arg(long)]
    workers: Option<usize>,
    /// Record embedding times in the report.
    #[arg(long)]
    timing: bool,
}

fn read(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Bad hex in a flag is a usage error, not a data error.
fn hex_flag(flag: &str, hex: &str) -> Result<Vec<bool>, Error> {
    bits_from_hex(hex).map_err(|e| Error::Param(format!("{flag}: {e}")))
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_init(args: &InitArgs) -> Result<(), Error> {
    let mut cfg = args.cfg.resolve()?;
    let m = &mut cfg.model;
    m.encoder_seed = args.seed;
    m.decoder_seed = args.seed.wrapping_add(1);
    m.corpus_seed = args.seed.wrapping_add(2);
    m.d_k = args.d_k.unwrap_or(m.d_k);
    m.preserved_count = args.preserved_count.unwrap_or(m.preserved_count);
    m.m_max = args.m_max.unwrap_or(m.m_max);
    cfg.validate()?;
    let model = nullmark_core::init_model(&cfg.model)?;
    save_model(&model, &args.model_out)?;
    if let Some(p) = &args.config_out {
        std::fs::write(p, cfg.to_json()? + "\n")?;
    }
    Ok(())
}

fn cmd_embed(args: &EmbedArgs) -> Result<bool, Error> {
    let cfg = args.cfg.resolve()?;
    let mut bits = hex_flag("--watermark", &args.watermark)?;
    if let Some(len) = args.bits {
        if len == 0 || len > bits.len() {
            return Err(Error::Param(format!("--bits {len} does not fit a {}-bit hex watermark", bits.len())));
        }
        bits.truncate(len);
    }
    let model = load_model(&args.model)?;
    let params = capacity(cfg.n, cfg.m)?;
    let templates = builtin_templates();
    let embedding = embed_watermark(&model, SeedKey(args.seed), &bits, &params, &templates, &cfg.edit)?;
    let check = extract(&embedding.model, SeedKey(args.seed), &params, bits.len(), &templates, Some(&bits))?;
    let esr = check.esr().unwrap_or(0.0);
    save_model(&embedding.model, &args.model_out)?;
    let trace = if args.timing { embedding.trace.clone() } else { embedding.trace.without_timings() };
    let report = json!({
        "questions": embedding.questions.len(),
        "self_extraction_esr": esr,
        "embed_time_seconds": args.timing.then_some(embedding.embed_seconds),
        "trace": trace,
    });
    write_json(&report, args.trace_out.as_deref())?;
    Ok(esr == 1.0)
}

fn cmd_extract(args: &ExtractArgs) -> Result<(), Error> {
    let cfg = args.cfg.resolve()?;
    let model = load_model(&args.model)?;
    let params = capacity(cfg.n, cfg.m)?;
    let expected = match &args.expected {
        Some(hex) => {
            let mut b = hex_flag("--expected", hex)?;
            if b.len() < args.bits {
                return Err(Error::Param(format!("--expected has {} bits, --bits is {}", b.len(), args.bits)));
            }
            b.truncate(args.bits);
            Some(b)
        }
        None => None,
    };
    let result = extract(&model, SeedKey(args.seed), &params, args.bits, &builtin_templates(), expected.as_deref())?;
    let report = json!({
        "watermark": result.hex(),
        "complete": result.complete_bits().is_some(),
        "esr": result.esr(),
        "questions": result.questions,
    });
    write_json(&report, None)
}

fn cmd_attack(args: &AttackArgs) -> Result<(), Error> {
    let cfg = args.cfg.resolve()?;
    let mut flags = BTreeMap::new();
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            flags.insert(k.to_string(), v);
        }
    };
    put("sigma", args.sigma.map(|v| v.to_string()));
    put("ratio", args.ratio.map(|v| v.to_string()));
    put("bits", args.quant_bits.map(|v| v.to_string()));
    put("steps", args.steps.map(|v| v.to_string()));
    put("lr", args.lr.map(|v| v.to_string()));
    put("cases", args.cases.map(|v| v.to_string()));
    put("scenario", args.scenario.clone());
    let spec = parse_attack(&args.kind, &flags)?;
    let seeded = matches!(args.kind.as_str(), "noise" | "finetune" | "edit" | "overwrite");
    let seed = match (args.seed, seeded) {
        (Some(s), _) => s,
        (None, false) => 0,
        (None, true) => return Err(Error::Param(format!("attack {} needs --seed", args.kind))),
    };
    let model = load_model(&args.model)?;
    let attacked = spec.apply(&model, seed, &capacity(cfg.n, cfg.m)?, &cfg.edit)?;
    save_model(&attacked, &args.model_out)
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), Error> {
    let mut manifest = SweepManifest::from_json(&read(&args.manifest)?)?;
    if let Some(w) = args.workers {
        manifest.workers = w;
    }
    manifest.timing |= args.timing;
    let report = run_sweep(&manifest)?;
    write_reports(&report, &args.csv_out, &args.summary_out)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Param(_) | Error::Config(_) | Error::Range(_) => 2,
        e if e.is_numeric() || matches!(e, Error::Init(_)) => 4,
        _ => 3,
    }
}

fn fail(e: &Error) -> ExitCode {
    let mut body = json!({ "error": e.code(), "message": e.to_string() });
    if let Error::Divergence { trace, .. } = e {
        body["trace"] = serde_json::to_value(trace.without_timings()).unwrap_or_default();
    }
    eprintln!("{body}");
    ExitCode::from(exit_code(e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Init(a) => cmd_init(a).map(|_| true),
        Command::Embed(a) => cmd_embed(a),
        Command::Extract(a) => cmd_extract(a).map(|_| true),
        Command::Attack(a) => cmd_attack(a).map(|_| true),
        Command::Sweep(a) => cmd_sweep(a).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}", json!({ "error": "incomplete_embedding", "message": "self-extraction ESR below 1" }));
            ExitCode::from(4)
        }
        Err(e) => fail(&e),
    }
}
