//! Command-line front end. [`run`] returns the process exit code:
//! 0 success, 1 usage error, 2 configuration or validation error,
//! 3 runtime failure (I/O, corrupt checkpoint).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{check_variant, load_checkpoint, save_checkpoint, write_atomic};
use crate::config::{load_config, parse_override, RunConfig};
use crate::data::{Batch, Corpus};
use crate::error::{Error, Result};
use crate::eval::{self, ExitSweepReport, TimingSpec};
use crate::model::Model;
use crate::tokenizer::{self, BOS};
use crate::training::{self, StepRecord, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const VERSION: &str = env!("BITSKIP_VERSION");

pub const TOKENIZER_NOTE: &str =
    "byte-level: ids 0-255 are raw bytes, 256 BOS, 257 EOS, 258 PAD (stands in for a BPE vocabulary)";

#[derive(Parser, Debug)]
#[command(name = "bitskip", version = VERSION, about = "Train and evaluate ternary early-exit transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints plus a loss CSV.
    Train(TrainArgs),
    /// Perplexity of a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Perplexity and throughput at several exit layers.
    Sweep(SweepArgs),
    /// Per-layer activation standard deviations.
    Profile(ProfileArgs),
    /// Greedy generation from a prompt.
    Gen(GenArgs),
    /// Rank variants from their sweep CSVs.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    /// Seed for both initialization and data order.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    outdir: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct CorpusArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Evaluate on this trailing fraction of the corpus (1 = all of it).
    #[arg(long, default_value_t = 0.1)]
    holdout: f64,
    /// Evaluation window (defaults to the model's context length).
    #[arg(long)]
    window: Option<usize>,
    /// Report directory (defaults to the run's reports/ when the checkpoint
    /// sits in a run's checkpoints/).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: CorpusArgs,
    #[arg(long)]
    exit_layer: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: CorpusArgs,
    /// Comma-separated exit layers; the full depth is always added.
    #[arg(long, value_delimiter = ',')]
    layers: Vec<usize>,
    #[arg(long, default_value = "Once upon a time")]
    prompt: String,
    #[arg(long, default_value_t = 64)]
    tokens: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

#[derive(Args, Debug)]
struct ProfileArgs {
    #[command(flatten)]
    common: CorpusArgs,
    /// Number of evaluation windows in the probe batch.
    #[arg(long, default_value_t = 4)]
    windows: usize,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 64)]
    tokens: usize,
    #[arg(long)]
    exit_layer: Option<usize>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Sweep CSVs, one per variant.
    #[arg(required = true, num_args = 2..)]
    sweeps: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::VariantMismatch { .. }
        | Error::CorpusTooSmall(_)
        | Error::Empty(_)
        | Error::TransformSize(_)
        | Error::InvalidBits(_)
        | Error::OutOfRange { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Gen(a) => cmd_gen(a),
        Command::Compare(a) => cmd_compare(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn manifest(command: &str, body: &str, started: u64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# bitskip run manifest");
    let _ = writeln!(s, "command = {command}");
    let _ = writeln!(s, "version = {VERSION}");
    let _ = writeln!(s, "started_unix = {started}");
    let _ = writeln!(s, "finished_unix = {}", unix_now());
    let _ = writeln!(s, "threads = {}", eval::thread_count());
    let _ = writeln!(s, "tokenizer = {TOKENIZER_NOTE}");
    s.push_str(body);
    s
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    if !path.exists() {
        return Err(Error::Config(format!("corpus {} does not exist", path.display())));
    }
    let c = Corpus::load(path)?;
    if c.is_empty() {
        return Err(Error::Empty("corpus file is empty"));
    }
    Ok(c)
}

fn loss_csv_header(layers: usize) -> Vec<String> {
    let mut h: Vec<String> = ["step", "lr", "grad_norm", "main", "total"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((1..layers).map(|i| format!("exit_{i}")));
    h
}

fn loss_csv_row(r: &StepRecord) -> Vec<String> {
    let mut row = vec![
        r.step.to_string(),
        r.lr.to_string(),
        r.grad_norm.to_string(),
        r.loss.main_loss.to_string(),
        r.loss.total.to_string(),
    ];
    row.extend(r.loss.exit_losses.iter().map(|e| e.to_string()));
    row
}

fn write_loss_csv(path: &Path, layers: usize, rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(loss_csv_header(layers)).map_err(fmt)?;
    for r in rows {
        w.write_record(r).map_err(fmt)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let started = unix_now();
    let mut overrides = Vec::new();
    let mut push = |k: &str, v: String| overrides.push((k.to_string(), v));
    if let Some(v) = a.variant {
        push("model.variant", v);
    }
    if let Some(c) = &a.corpus {
        push("run.corpus", c.display().to_string());
    }
    if let Some(s) = a.steps {
        push("train.max_steps", s.to_string());
    }
    if let Some(s) = a.seed {
        push("model.seed", s.to_string());
        push("train.seed", s.to_string());
    }
    if let Some(o) = &a.outdir {
        push("run.outdir", o.display().to_string());
    }
    if let Some(n) = a.name {
        push("run.name", n);
    }
    for s in &a.set {
        overrides.push(parse_override(s)?);
    }
    if let Some(p) = &a.config {
        if !p.exists() {
            return Err(Error::Config(format!("config file {} does not exist", p.display())));
        }
    }
    let cfg = load_config(a.config.as_deref(), &overrides)?;
    let corpus_path = cfg
        .run
        .corpus
        .clone()
        .ok_or_else(|| Error::Config("no corpus given (--corpus or run.corpus)".into()))?;
    let corpus = load_corpus(&corpus_path)?;
    let (train_part, _) = corpus.split(cfg.run.holdout);

    let run_dir = cfg.run.outdir.join(&cfg.run.name);
    let ck_dir = run_dir.join("checkpoints");
    let log_dir = run_dir.join("logs");
    for d in [&run_dir, &ck_dir, &log_dir, &run_dir.join("reports")] {
        create_dir(d)?;
    }
    write_atomic(&run_dir.join("config.resolved"), cfg.to_text().as_bytes())?;

    let mut trainer = match &a.resume {
        None => Trainer::new(Model::<f32>::new(cfg.model)?, cfg.train)?,
        Some(p) => {
            let ck = load_checkpoint::<f32>(p)?;
            check_variant(ck.model.config(), cfg.variant())?;
            let mut want = cfg.model;
            want.schedule = ck.model.config().schedule;
            if *ck.model.config() != want {
                return Err(Error::Config("checkpoint architecture differs from config".into()));
            }
            let opt = ck
                .optimizer
                .ok_or_else(|| Error::Format("checkpoint has no optimizer state".into()))?;
            Trainer::resume(ck.model, opt, cfg.train, ck.step)?
        }
    };
    let layers = cfg.model.layers;
    let log_path = log_dir.join("loss.csv");
    let mut rows: Vec<Vec<String>> = Vec::new();
    let max_steps = cfg.train.max_steps;
    let (log_every, ck_every) = (cfg.train.log_every, cfg.train.checkpoint_every);
    let mut on_step = |t: &Trainer<f32>, r: &StepRecord| -> Result<()> {
        if r.step % log_every == 0 || r.step == max_steps {
            rows.push(loss_csv_row(r));
            eprintln!(
                "step {:>6}  lr {:.3e}  main {:.4}  total {:.4}  |g| {:.3}",
                r.step, r.lr, r.loss.main_loss, r.loss.total, r.grad_norm
            );
        }
        if ck_every > 0 && r.step % ck_every == 0 && r.step != max_steps {
            save_checkpoint(
                &ck_dir.join(format!("step_{:06}.ckpt", r.step)),
                &t.model,
                Some(&t.optimizer),
                r.step,
            )?;
            write_loss_csv(&log_path, layers, &rows)?;
        }
        Ok(())
    };
    training::run(&mut trainer, &train_part, &mut on_step)?;
    write_loss_csv(&log_path, layers, &rows)?;
    let final_path = ck_dir.join("final.ckpt");
    save_checkpoint(&final_path, &trainer.model, Some(&trainer.optimizer), trainer.step)?;

    let mut body = String::new();
    let _ = writeln!(body, "seed = {}", cfg.train.seed);
    let _ = writeln!(body, "model_seed = {}", cfg.model.seed);
    let _ = writeln!(body, "corpus_bytes = {}", corpus.byte_count);
    let _ = writeln!(body, "parameters = {}", trainer.model.parameter_count());
    let _ = writeln!(body, "final_step = {}", trainer.step);
    let _ = writeln!(body, "checkpoint = {}", final_path.display());
    if let Some(p) = &a.resume {
        let _ = writeln!(body, "resumed_from = {}", p.display());
    }
    body.push_str("\n# resolved config\n");
    body.push_str(&cfg.to_text());
    write_atomic(&run_dir.join("manifest"), manifest("train", &body, started).as_bytes())?;
    println!("{}", final_path.display());
    Ok(())
}

fn report_dir(common: &CorpusArgs) -> PathBuf {
    if let Some(o) = &common.out {
        return o.clone();
    }
    let parent = common.checkpoint.parent();
    match parent.and_then(|p| p.file_name().map(|n| (p, n))) {
        Some((p, n)) if n == "checkpoints" => p.parent().unwrap_or(Path::new(".")).join("reports"),
        _ => PathBuf::from("reports"),
    }
}

struct Loaded {
    model: Model<f32>,
    corpus: Corpus,
    window: usize,
    out: PathBuf,
}

fn load_for_eval(common: &CorpusArgs) -> Result<Loaded> {
    if !(common.holdout > 0.0 && common.holdout <= 1.0) {
        return Err(Error::Config("--holdout must lie in (0, 1]".into()));
    }
    let model = load_checkpoint::<f32>(&common.checkpoint)?.model;
    let full = load_corpus(&common.corpus)?;
    let corpus = if common.holdout >= 1.0 {
        full
    } else {
        full.split(common.holdout).1
    };
    let window = common.window.unwrap_or(model.config().max_seq_len);
    if window == 0 || window > model.config().max_seq_len {
        return Err(Error::Config(format!(
            "window {window} outside 1..={}",
            model.config().max_seq_len
        )));
    }
    let out = report_dir(common);
    create_dir(&out)?;
    Ok(Loaded {
        model,
        corpus,
        window,
        out,
    })
}

fn check_exit(model: &Model<f32>, k: usize) -> Result<()> {
    let l = model.config().layers;
    if k == 0 || k > l {
        return Err(Error::OutOfRange {
            what: "exit layer",
            value: k,
            lo: 1,
            hi: l,
        });
    }
    Ok(())
}

fn source_lines(common: &CorpusArgs, window: usize) -> String {
    format!(
        "checkpoint = {}\ncorpus = {}\nholdout = {}\nwindow = {window}\n",
        common.checkpoint.display(),
        common.corpus.display(),
        common.holdout
    )
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let started = unix_now();
    let l = load_for_eval(&a.common)?;
    if let Some(k) = a.exit_layer {
        check_exit(&l.model, k)?;
    }
    let (ce, n) = eval::mean_cross_entropy(&l.model, &l.corpus, a.exit_layer, l.window)?;
    let k = a.exit_layer.unwrap_or(l.model.config().layers);
    println!("exit_layer = {k}\ntokens = {n}\ncross_entropy = {ce}\nppl = {}", ce.exp());
    let body = format!(
        "{}exit_layer = {k}\ntokens = {n}\ncross_entropy = {ce}\nppl = {}\n",
        source_lines(&a.common, l.window),
        ce.exp()
    );
    write_atomic(&l.out.join("eval.manifest"), manifest("eval", &body, started).as_bytes())
}

fn prompt_ids(prompt: &str) -> Vec<usize> {
    let mut ids = vec![BOS];
    ids.extend(tokenizer::encode_bytes(prompt.as_bytes()));
    ids
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let started = unix_now();
    let l = load_for_eval(&a.common)?;
    let depth = l.model.config().layers;
    let mut layers = if a.layers.is_empty() {
        l.model.config().exit_layers()
    } else {
        a.layers.clone()
    };
    layers.push(depth);
    layers.sort_unstable();
    layers.dedup();
    for &k in &layers {
        check_exit(&l.model, k)?;
    }
    if a.repeats < 3 {
        return Err(Error::Config("--repeats must be at least 3".into()));
    }
    let timing = TimingSpec {
        prompt: prompt_ids(&a.prompt),
        n_tokens: a.tokens,
        repeats: a.repeats,
    };
    let variant = l.model.config().variant.name.to_string();
    let report = eval::exit_sweep(&l.model, &variant, &l.corpus, &layers, l.window, &timing)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    let path = l.out.join(format!("sweep_{variant}.csv"));
    write_atomic(&path, &buf)?;
    print!("{}", String::from_utf8_lossy(&buf));
    println!("# ppl_delta_pct > 0 means the exit is worse than the full model; tables that");
    println!("# label the column \"PPL decrease\" list the same quantity with the opposite sign.");
    println!("# ratio = ppl_delta_pct / speed_gain_pct, NA when speed_gain_pct <= 0.");
    let body = format!(
        "{}layers = {layers:?}\nprompt = {}\ntokens = {}\nrepeats = {}\nreport = {}\nsign_convention = ppl_delta_pct > 0 is worse; published 'PPL decrease' = -ppl_delta_pct\n",
        source_lines(&a.common, l.window),
        a.prompt,
        a.tokens,
        a.repeats,
        path.display()
    );
    write_atomic(&l.out.join("sweep.manifest"), manifest("sweep", &body, started).as_bytes())
}

fn cmd_profile(a: ProfileArgs) -> Result<()> {
    let started = unix_now();
    let l = load_for_eval(&a.common)?;
    if a.windows == 0 {
        return Err(Error::Config("--windows must be positive".into()));
    }
    let windows = l.corpus.eval_windows(l.window)?;
    let probe = Batch::stack(&windows[..a.windows.min(windows.len())]);
    let profile = eval::variance_profile(&l.model, &probe)?;
    let variant = l.model.config().variant.name.to_string();
    let mut buf = Vec::new();
    profile.write_csv(&variant, &mut buf)?;
    let path = l.out.join(format!("variance_{variant}.csv"));
    write_atomic(&path, &buf)?;
    print!("{}", String::from_utf8_lossy(&buf));
    let body = format!(
        "{}probe_windows = {}\nreport = {}\n",
        source_lines(&a.common, l.window),
        probe.layout.batch,
        path.display()
    );
    write_atomic(&l.out.join("profile.manifest"), manifest("profile", &body, started).as_bytes())
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let model = load_checkpoint::<f32>(&a.checkpoint)?.model;
    if let Some(k) = a.exit_layer {
        check_exit(&model, k)?;
    }
    let g = model.generate(&prompt_ids(&a.prompt), a.tokens, a.exit_layer)?;
    let text = tokenizer::detokenize(&g.tokens)?;
    println!("{}{}", a.prompt, String::from_utf8_lossy(&text));
    eprintln!(
        "tok/s: {:.2} ({} tokens, threads {})",
        a.tokens as f64 / g.elapsed.as_secs_f64().max(1e-12),
        a.tokens,
        eval::thread_count()
    );
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let started = unix_now();
    let reports = a
        .sweeps
        .iter()
        .map(|p| {
            let f = std::fs::File::open(p).map_err(|e| Error::io(p, e))?;
            ExitSweepReport::read_csv(f)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = eval::compare_variants(&reports)?;
    let mut buf = Vec::new();
    eval::write_comparison_csv(&rows, &mut buf)?;
    let out = a.out.unwrap_or_else(|| PathBuf::from("reports"));
    create_dir(&out)?;
    let path = out.join("comparison.csv");
    write_atomic(&path, &buf)?;
    print!("{}", String::from_utf8_lossy(&buf));
    println!("# quality rank: full-model ppl ascending, ties within 1e-9 broken by speed rank");
    let body = format!(
        "sweeps = {:?}\nreport = {}\n",
        a.sweeps.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        path.display()
    );
    write_atomic(&out.join("compare.manifest"), manifest("compare", &body, started).as_bytes())
}

/// Convenience for callers that hold a parsed config.
pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    cfg.run.outdir.join(&cfg.run.name)
}
