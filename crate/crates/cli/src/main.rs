//! `unirope` command-line front end.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use thiserror::Error;
use unirope::bench::run_bench;
use unirope::checkpoint::Checkpoint;
use unirope::config::{ModelConfig, RunConfig, RunMetadata, TaskSpec};
use unirope::lm::tokenizer::{render, tokenize, tokenize_marked};
use unirope::lm::train::TrainObserver;
use unirope::lm::{generate_streaming, init_params, train, MetricsRecord};
use unirope::tensor::{set_precision, Precision};
use unirope::lm::LmParams;
use unirope::{rope, verify, Rng, Tensor};

/// Overrides the built-in default seed when neither a flag nor the config
/// file sets one.
const SEED_ENV: &str = "UNIROPE_SEED";

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Lib(#[from] unirope::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use unirope::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Lib(E::Config(_) | E::Checkpoint(_) | E::Json(_) | E::Io(_) | E::Overlong { .. }) => 2,
            CliError::Lib(E::InvalidArgument(_)) => 2,
            _ => 1,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "unirope", version, about = "Unified rotary embeddings over attention and SSD layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the registered property suite.
    Verify(VerifyArgs),
    /// Train the toy language model.
    Train(TrainArgs),
    /// Time attention, SSD and hybrid forward passes across lengths.
    Bench(BenchArgs),
    /// Sample text from a checkpoint using incremental caches.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct VerifyArgs {
    /// Run only properties whose name contains this pattern.
    #[arg(long)]
    filter: Option<String>,
    /// Emit one JSON document instead of the text table.
    #[arg(long)]
    json: bool,
    /// Flip a sign inside the rotation (mutation check for the suite).
    #[arg(long, hide = true)]
    inject_sign_fault: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// copy, needle or bytes:<file>.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seq_len: Option<usize>,
    /// Periodic checkpoint interval in steps (0 disables).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Bounded prefetch queue capacity (0 generates data inline).
    #[arg(long)]
    prefetch: Option<usize>,
    /// Log wall-clock tokens/sec (breaks bit-reproducibility of the log).
    #[arg(long)]
    record_timing: bool,
    /// Disable rotary embedding on the SSD layers.
    #[arg(long)]
    ablate_ssd_rope: bool,
    /// Output directory for run.json, metrics.jsonl, checkpoints and summary.json.
    #[arg(long)]
    out: PathBuf,
    /// Print progress every this many steps on stderr (0 silences).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated subset of attention-full, ssd-recurrent, ssd-chunked, hybrid.
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<String>>,
    /// Comma-separated ascending sequence lengths.
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    #[arg(long)]
    batch: Option<usize>,
    /// Time in 32-bit floats.
    #[arg(long)]
    fp32: bool,
    /// Time forward plus backward instead of forward only.
    #[arg(long)]
    backward: bool,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print JSON on stdout instead of CSV.
    #[arg(long)]
    json: bool,
    /// Also write bench.csv and bench.json into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prompt text; `|`, `?` and `<bos>` denote the special tokens unless --raw.
    #[arg(long)]
    prompt: String,
    /// Number of tokens to generate.
    #[arg(long, default_value_t = 32)]
    n: usize,
    /// Sampling temperature; 0 picks the argmax.
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Treat the prompt as plain bytes.
    #[arg(long)]
    raw: bool,
    /// Config whose model section must match the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print per-step cache sizes as JSON lines on stderr.
    #[arg(long)]
    trace: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Train(a) => cmd_train(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Generate(a) => cmd_generate(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Config file (or defaults) with the seed resolved as flag, then file,
/// then environment, then built-in default.
fn load_config(path: Option<&Path>, seed_flag: Option<u64>) -> CliResult<RunConfig> {
    let (mut cfg, file_seed) = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            let cfg = RunConfig::from_json(&text)?;
            let doc: serde_json::Value = serde_json::from_str(&text).map_err(unirope::Error::from)?;
            let has_seed = doc.pointer("/train/seed").is_some();
            (cfg, has_seed)
        }
        None => (RunConfig::default(), false),
    };
    if let Some(s) = seed_flag {
        cfg.train.seed = s;
    } else if !file_seed {
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.train.seed = v.trim().parse().map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
    }
    Ok(cfg)
}

fn header(meta: &RunMetadata) -> String {
    format!("# {}", serde_json::to_string(meta).expect("metadata serialises"))
}

fn cmd_verify(a: VerifyArgs) -> CliResult {
    rope::set_sign_fault(a.inject_sign_fault);
    let cfg = load_config(None, None)?;
    let meta = RunMetadata::new("verify", &cfg, Precision::F64, 1);
    let reports = verify::run(a.filter.as_deref());
    if reports.is_empty() {
        return Err(CliError::Usage(format!("no property matches {:?}", a.filter.unwrap_or_default())));
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    let mut out = io::stdout().lock();
    if a.json {
        let doc = json!({ "metadata": meta, "properties": reports });
        writeln!(out, "{}", serde_json::to_string_pretty(&doc).expect("report serialises"))?;
    } else {
        writeln!(out, "{}", header(&meta))?;
        for r in &reports {
            let status = if r.passed { "PASS" } else { "FAIL" };
            write!(out, "{status} {:<42} instances={:<5} worst={:.3e} tol={:.1e}", r.name, r.instances, r.worst_error, r.tolerance)?;
            if let Some(e) = &r.error {
                write!(out, " error={e}")?;
            }
            writeln!(out)?;
        }
        writeln!(out, "{}/{} properties passed", reports.len() - failed, reports.len())?;
    }
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} properties failed")));
    }
    Ok(())
}

struct TrainOutput {
    model: ModelConfig,
    dir: PathBuf,
    metrics: BufWriter<File>,
    total: usize,
    log_every: usize,
}

impl TrainObserver for TrainOutput {
    fn on_step(&mut self, rec: &MetricsRecord) -> unirope::Result<()> {
        writeln!(self.metrics, "{}", rec.to_line())?;
        if self.log_every > 0 && (rec.step.is_multiple_of(self.log_every) || rec.step + 1 == self.total) {
            eprintln!("step {:>6} loss {:.4} lr {:.3e} grad_norm {:.3}", rec.step, rec.loss, rec.lr, rec.grad_norm);
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, step: usize, params: &LmParams<Tensor>) -> unirope::Result<()> {
        self.metrics.flush()?;
        let name = if step == self.total { "final.ckpt".to_string() } else { format!("checkpoint-{step:06}.ckpt") };
        Checkpoint::from_params(&self.model, params).save(&self.dir.join(name))
    }
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let mut cfg = load_config(a.config.as_deref(), a.seed)?;
    if let Some(t) = &a.task {
        cfg.data.task = TaskSpec::parse(t)?;
    }
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.seq_len {
        cfg.data.seq_len = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.train.checkpoint_every = v;
    }
    if let Some(v) = a.prefetch {
        cfg.train.prefetch = v;
    }
    cfg.train.record_timing |= a.record_timing;
    if a.ablate_ssd_rope {
        cfg.model.use_rope_on_ssd = false;
    }
    cfg.validate()?;

    fs::create_dir_all(&a.out)?;
    let meta = RunMetadata::new("train", &cfg, Precision::F64, 1);
    fs::write(a.out.join("run.json"), serde_json::to_string_pretty(&meta).expect("metadata serialises"))?;
    let mut params = init_params(&cfg)?;
    let mut obs = TrainOutput {
        model: cfg.model.clone(),
        dir: a.out.clone(),
        metrics: BufWriter::new(File::create(a.out.join("metrics.jsonl"))?),
        total: cfg.train.steps,
        log_every: a.log_every,
    };
    let summary = train(&cfg, &mut params, &mut obs)?;
    obs.metrics.flush()?;
    let v = &summary.validation;
    let doc = json!({
        "steps": cfg.train.steps,
        "final_train_loss": summary.records.last().map(|r| r.loss),
        "validation_loss": v.loss,
        "validation_accuracy": v.accuracy,
        "validation_scored_tokens": v.scored,
        "num_params": params.num_params(),
    });
    fs::write(a.out.join("summary.json"), serde_json::to_string_pretty(&doc).expect("summary serialises"))?;
    println!("validation loss {:.6} accuracy {:.4} ({} tokens)", v.loss, v.accuracy, v.scored);
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CliResult {
    let mut cfg = load_config(a.config.as_deref(), a.seed)?;
    let bc = &mut cfg.bench;
    if let Some(v) = a.modes {
        bc.modes = v;
    }
    if let Some(v) = a.lengths {
        bc.lengths = v;
    }
    if let Some(v) = a.batch {
        bc.batch = v;
    }
    if let Some(v) = a.workers {
        bc.workers = v;
    }
    if let Some(v) = a.iters {
        bc.iters = v;
    }
    if let Some(v) = a.warmup {
        bc.warmup = v;
    }
    bc.backward |= a.backward;
    let precision = if a.fp32 { Precision::F32 } else { Precision::F64 };
    set_precision(precision);
    let meta = RunMetadata::new("bench", &cfg, precision, cfg.bench.workers);
    let report = run_bench(&cfg.bench, &cfg.model, precision, cfg.train.seed)?;
    let doc = json!({ "metadata": meta, "records": report.records, "slopes": report.slopes });
    let doc = serde_json::to_string_pretty(&doc).expect("report serialises");
    let csv = format!("{}\n{}", header(&meta), report.to_csv());
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("bench.csv"), &csv)?;
        fs::write(dir.join("bench.json"), &doc)?;
    }
    let mut out = io::stdout().lock();
    if a.json {
        writeln!(out, "{doc}")?;
    } else {
        write!(out, "{csv}")?;
        for s in &report.slopes {
            eprintln!("slope {} {:.3}", s.mode, s.slope);
        }
    }
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> CliResult {
    let (model, params) = Checkpoint::load(&a.checkpoint)?.into_params()?;
    let mut cfg = load_config(a.config.as_deref(), a.seed)?;
    if a.config.is_some() && cfg.model != model {
        return Err(unirope::Error::Config(format!(
            "checkpoint {} was trained with a different model config than {}",
            a.checkpoint.display(),
            a.config.as_deref().unwrap_or(Path::new("")).display()
        ))
        .into());
    }
    cfg.model = model;
    let prompt = if a.raw { tokenize(&a.prompt) } else { tokenize_marked(&a.prompt) };
    if prompt.is_empty() {
        return Err(CliError::Usage("--prompt must not be empty".into()));
    }
    let meta = RunMetadata::new("generate", &cfg, Precision::F64, 1);
    eprintln!("{}", header(&meta));
    let mut out = io::stdout().lock();
    write!(out, "{}", render(&prompt))?;
    out.flush()?;
    let mut rng = Rng::new(cfg.train.seed);
    let trace = a.trace;
    let mut step = 0usize;
    generate_streaming(&params, &cfg.model, &prompt, a.n, a.temperature, &mut rng, &mut |id, t| {
        write!(out, "{}", render(&[id]))?;
        out.flush()?;
        if trace {
            eprintln!("{}", json!({ "step": step, "position": t.position, "ss_bytes": t.ss_bytes, "sa_bytes": t.sa_bytes }));
        }
        step += 1;
        Ok(())
    })?;
    writeln!(out)?;
    Ok(())
}
