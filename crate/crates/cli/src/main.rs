use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ahgn::dataset::{Dataset, Header};
use ahgn::model::AdjacencyNorm;
use ahgn::train::synthetic::{generate, Difficulty, SynthConfig};
use ahgn::train::{build_graphs, evaluate, trace_clip, Checkpoint, TrainConfig, Trainer};
use ahgn::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "ahgn", version, about = "Hierarchical graph reasoning over frame and subtitle features")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic train/val dataset.
    GenData(GenArgs),
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Accuracy and mean losses of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Dump intermediate quantities for one clip.
    Inspect(InspectArgs),
    /// Check every record of a dataset file and report problems.
    Validate(ValidateArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training clips.
    #[arg(long, default_value_t = 2000)]
    train: usize,
    /// Validation clips.
    #[arg(long, default_value_t = 500)]
    val: usize,
    #[arg(long = "d-v", default_value_t = 32)]
    d_v: usize,
    #[arg(long = "d-s", default_value_t = 32)]
    d_s: usize,
    #[arg(long = "d-h", default_value_t = 32)]
    d_h: usize,
    /// easy, default, hard, or a noise level.
    #[arg(long, default_value = "default")]
    difficulty: String,
    /// Output directory; receives train.jsonl and val.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory with train.jsonl and optionally val.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// Flat JSON training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint path. Metrics go to `<stem>.metrics.jsonl` beside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Model width.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Clips per optimizer step.
    #[arg(long)]
    batch: Option<usize>,
    /// Cross-modal coherence weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Cross-level coherence weight.
    #[arg(long)]
    beta: Option<f64>,
    /// Query-count penalty weight.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long = "eps-reg")]
    eps_reg: Option<f64>,
    #[arg(long = "halt-eps")]
    halt_eps: Option<f64>,
    #[arg(long = "n-max")]
    n_max: Option<usize>,
    /// Fix the number of queries instead of halting adaptively.
    #[arg(long = "fixed-n")]
    fixed_n: Option<usize>,
    #[arg(long = "adjacency-norm", value_enum)]
    adjacency_norm: Option<NormArg>,
    #[arg(long = "disable-ger")]
    disable_ger: bool,
    #[arg(long = "disable-gra")]
    disable_gra: bool,
    #[arg(long = "disable-temporal")]
    disable_temporal: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NormArg {
    Softmax,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl SplitArg {
    fn file(self) -> &'static str {
        match self {
            SplitArg::Train => "train.jsonl",
            SplitArg::Val => "val.jsonl",
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Dataset file, or a directory holding `<split>.jsonl`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Split used when --data is a directory.
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Dump {
    Gates,
    Alignment,
    Queries,
    Temporal,
    All,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset file, or a directory whose train and val files are searched.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    clip: String,
    #[arg(long, value_enum, default_value_t = Dump::All)]
    dump: Dump,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    data: PathBuf,
}

/// Failures that end the process with a specific exit code.
enum Failure {
    Usage(String),
    Validation(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numerical(_) | Error::Degenerate(_) => Failure::Numerical(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
        Command::Validate(a) => validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn val<T: serde::Serialize + ?Sized>(v: &T) -> Result<Value, Failure> {
    Ok(serde_json::to_value(v).map_err(Error::from)?)
}

fn print_json(v: &Value) -> CmdResult {
    let s = serde_json::to_string_pretty(v).map_err(Error::from)?;
    println!("{s}");
    Ok(())
}

fn gen_data(a: GenArgs) -> CmdResult {
    let difficulty: Difficulty = a.difficulty.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
    let cfg = SynthConfig {
        seed: a.seed,
        n_train: a.train,
        n_val: a.val,
        dims: Header {
            d_v: a.d_v,
            d_s: a.d_s,
            d_h: a.d_h,
        },
        difficulty,
    };
    if a.train == 0 {
        warn!("--train 0: writing a validation-only dataset");
    }
    let (train, val) = generate(&cfg)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(format!("creating {}", a.out.display()), e))?;
    if a.train > 0 {
        train.save(&a.out.join("train.jsonl"))?;
    }
    val.save(&a.out.join("val.jsonl"))?;
    let positives = |d: &Dataset| d.clips.iter().filter(|c| c.label == 1).count();
    print_json(&json!({
        "out": a.out,
        "train": train.len(),
        "val": val.len(),
        "train_positive": positives(&train),
        "val_positive": positives(&val),
        "dims": cfg.dims,
        "difficulty": cfg.difficulty,
    }))
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag { cfg.$field = v; })*
        };
    }
    set!(epochs => epochs, seed => seed, d => d, lr => lr, batch => effective_batch, alpha => alpha,
         beta => beta, tau => tau, lambda => lambda, eps_reg => eps_reg, halt_eps => halt_eps, n_max => n_max);
    if a.fixed_n.is_some() {
        cfg.fixed_n = a.fixed_n;
    }
    if let Some(n) = a.adjacency_norm {
        cfg.adjacency_norm = match n {
            NormArg::Softmax => AdjacencyNorm::Softmax,
            NormArg::None => AdjacencyNorm::None,
        };
    }
    cfg.disable_ger |= a.disable_ger;
    cfg.disable_gra |= a.disable_gra;
    cfg.disable_temporal |= a.disable_temporal;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn metrics_path(ckpt: &Path) -> PathBuf {
    let stem = ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    ckpt.with_file_name(format!("{stem}.metrics.jsonl"))
}

fn train(a: TrainArgs) -> CmdResult {
    let cfg = train_config(&a)?;
    let train_path = a.data.join("train.jsonl");
    if !train_path.exists() {
        return Err(Failure::Validation(format!("training data not found: {}", train_path.display())));
    }
    let train_set = Dataset::load(&train_path)?;
    let val_path = a.data.join("val.jsonl");
    let val_set = if val_path.exists() { Some(Dataset::load(&val_path)?) } else { None };
    if let Some(v) = &val_set {
        if v.header != train_set.header {
            return Err(Failure::Validation(format!(
                "header mismatch: {} has {:?}, {} has {:?}",
                train_path.display(),
                train_set.header,
                val_path.display(),
                v.header
            )));
        }
    }
    let train_graphs = build_graphs(&train_set.clips)?;
    let val_graphs = val_set.as_ref().map(|v| build_graphs(&v.clips)).transpose()?;

    let mut trainer = Trainer::new(train_set.header, cfg)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    trainer.checkpoint().save(&a.out)?;
    let mpath = metrics_path(&a.out);
    let file = File::create(&mpath).map_err(|e| Error::io(format!("creating {}", mpath.display()), e))?;
    let mut metrics = BufWriter::new(file);

    let out = a.out.clone();
    let history = trainer.run(&train_graphs, val_graphs.as_deref(), |m, t| {
        serde_json::to_writer(&mut metrics, m)?;
        metrics
            .write_all(b"\n")
            .and_then(|_| metrics.flush())
            .map_err(|e| Error::io(format!("writing {}", mpath.display()), e))?;
        t.checkpoint().save(&out)
    })?;
    print_json(&json!({
        "checkpoint": a.out,
        "metrics": mpath,
        "epochs": history.len(),
        "final": history.last(),
    }))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint, Failure> {
    Ok(Checkpoint::load(path)?)
}

fn check_dims(ck: &Checkpoint, data: &Dataset, path: &Path) -> CmdResult {
    if ck.dims != data.header {
        return Err(Failure::Validation(format!(
            "{} declares {:?} but the checkpoint expects {:?}",
            path.display(),
            data.header,
            ck.dims
        )));
    }
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    let ck = load_ckpt(&a.ckpt)?;
    let path = if a.data.is_dir() { a.data.join(a.split.file()) } else { a.data.clone() };
    let data = Dataset::load(&path)?;
    check_dims(&ck, &data, &path)?;
    let graphs = build_graphs(&data.clips)?;
    let report = evaluate(&ck.params, &ck.config, &graphs)?;
    print_json(&serde_json::to_value(&report).map_err(Error::from)?)
}

fn inspect(a: InspectArgs) -> CmdResult {
    let ck = load_ckpt(&a.ckpt)?;
    let paths = if a.data.is_dir() {
        vec![a.data.join("train.jsonl"), a.data.join("val.jsonl")]
    } else {
        vec![a.data.clone()]
    };
    let mut found = None;
    for p in paths.iter().filter(|p| p.exists()) {
        let data = Dataset::load(p)?;
        if let Ok(rec) = data.find(&a.clip) {
            check_dims(&ck, &data, p)?;
            found = Some(rec.clone());
            break;
        }
    }
    let rec = found.ok_or_else(|| Failure::Validation(Error::Lookup(format!("clip {}", a.clip)).to_string()))?;
    let graph = build_graphs(std::slice::from_ref(&rec))?.remove(0);
    let trace = trace_clip(&ck.params, &ck.config, &graph)?;
    let head = json!({
        "clip_id": trace.clip_id,
        "probability": trace.probability,
        "logit": trace.logit,
        "n": trace.n,
    });
    let mut out = head.as_object().cloned().unwrap_or_default();
    match a.dump {
        Dump::Gates => {
            out.insert("segments".into(), val(&trace.segments)?);
            let pools: Vec<_> = trace.temporal.iter().map(|t| &t.pools).collect();
            out.insert("pools".into(), val(&pools)?);
        }
        Dump::Alignment => {
            out.insert("alignment".into(), val(&trace.alignment)?);
        }
        Dump::Queries => {
            out.insert("queries".into(), val(&trace.queries)?);
            out.insert("l_qe_surrogate".into(), json!(trace.l_qe_surrogate));
            out.insert("l_qe_literal".into(), json!(trace.l_qe_literal));
        }
        Dump::Temporal => {
            out.insert("temporal".into(), val(&trace.temporal)?);
        }
        Dump::All => {
            out = serde_json::to_value(&trace)
                .map_err(Error::from)?
                .as_object()
                .cloned()
                .unwrap_or_default();
        }
    }
    print_json(&Value::Object(out))
}

fn validate(a: ValidateArgs) -> CmdResult {
    let report = ahgn::dataset::validate_dataset(&a.data)?;
    let failures = report.failures();
    print_json(&json!({
        "path": a.data,
        "header": report.header,
        "records": report.records.len(),
        "failures": failures,
        "problems": report.records.iter().filter(|r| !r.ok).collect::<Vec<_>>(),
    }))?;
    if failures > 0 || report.header.is_none() {
        return Err(Failure::Validation(format!("{failures} invalid record(s) in {}", a.data.display())));
    }
    Ok(())
}
