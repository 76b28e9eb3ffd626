//! `unihema` command-line tool.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 data or file format,
//! 4 training-stage order, 1 anything else.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use unihema::config::{digest_json, ModelConfig, TrainConfig};
use unihema::data::{generate_dataset, read_dataset, DataError, Split, SynthConfig};
use unihema::domain::{Task, CLASS_NAMES};
use unihema::metrics::evaluate;
use unihema::model::UniHema;
use unihema::nn::ParamStore;
use unihema::tensor::io::{load_tensor, save_tensor, TensorIoError};
use unihema::tensor::Tensor;
use unihema::text::{TaskPrompt, Vocabulary};
use unihema::train::{
    load_checkpoint, run_stage, save_checkpoint, write_log_csv, Checkpoint, CheckpointError,
    RunOptions, StageSpec, TrainData, TrainError,
};
use unihema::ModelError;

#[derive(Parser, Debug)]
#[command(
    name = "unihema",
    version,
    about = "Unified blood-smear model: data, training, evaluation, inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus.
    GenData(GenDataArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one task.
    Eval(EvalArgs),
    /// Run the model on one image; the prompt selects the task.
    Infer(InferArgs),
    /// List checkpoint contents.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training samples per task.
    #[arg(long, default_value_t = 256)]
    per_task: usize,
    /// Evaluation samples per task.
    #[arg(long, default_value_t = 64)]
    eval_per_task: usize,
    /// Comma-separated subset of det,seg,cls,vqa,mlm.
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<String>>,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    stage: u8,
    /// Previous-stage checkpoint, or an incomplete checkpoint of this stage.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// CSV loss log; defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Stop once the stage reaches this many steps.
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    task: String,
    /// train, eval or shift.
    #[arg(long, default_value = "eval")]
    split: String,
    /// Write the report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// UHTN image tensor `[3×H×W]`.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    prompt: Option<String>,
    /// With the detection template, also write the binary mask `[H×W]` here.
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let code = match e {
            ModelError::Usage(_) | ModelError::Lexical(_) | ModelError::Config(_) => 2,
            ModelError::Data(_) | ModelError::Tensor(_) => 3,
            ModelError::Wiring(_) => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::data(e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::data(e.to_string())
    }
}

impl From<TensorIoError> for Failure {
    fn from(e: TensorIoError) -> Self {
        Failure::data(e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Order(_) => Failure {
                code: 4,
                message: e.to_string(),
            },
            TrainError::Model(m) => m.into(),
            TrainError::Checkpoint(c) => c.into(),
        }
    }
}

type CliResult = Result<(), Failure>;

fn io_failure(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::data(format!("{}: {e}", path.display()))
}

fn print_digest(digest: &str) {
    eprintln!("config digest: {digest}");
}

fn parse_split(s: &str) -> Result<Split, Failure> {
    match s {
        "train" => Ok(Split::Train),
        "eval" => Ok(Split::Eval),
        "shift" => Ok(Split::Shift),
        _ => Err(Failure::usage(format!(
            "unknown split {s:?}; expected train, eval or shift"
        ))),
    }
}

fn gen_data(a: GenDataArgs) -> CliResult {
    let tasks = match a.tasks {
        Some(list) => list
            .iter()
            .map(|t| Task::parse(t.trim()))
            .collect::<Result<Vec<_>, _>>()?,
        None => Task::ALL.to_vec(),
    };
    let cfg = SynthConfig {
        seed: a.seed,
        train_per_task: a.per_task,
        eval_per_task: a.eval_per_task,
        tasks,
        ..SynthConfig::default()
    };
    print_digest(&digest_json(&cfg));
    if a.out.exists() {
        let non_empty = fs::read_dir(&a.out)
            .map_err(io_failure(&a.out))?
            .next()
            .is_some();
        if non_empty && !a.force {
            return Err(Failure::usage(format!(
                "{} exists and is not empty; pass --force to overwrite",
                a.out.display()
            )));
        }
    }
    let manifest = generate_dataset(&cfg, &a.out)?;
    let total: usize = manifest
        .tasks
        .values()
        .flat_map(|e| e.splits.values())
        .map(Vec::len)
        .sum();
    println!("wrote {total} samples to {}", a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let text = fs::read_to_string(&a.config)
        .map_err(|e| Failure::usage(format!("{}: {e}", a.config.display())))?;
    let cfg = TrainConfig::from_json(&text)?;
    print_digest(&cfg.digest());
    let spec = StageSpec::standard(a.stage, &cfg)?;
    let init = match &a.resume {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    unihema::train::check_order(spec.id, init.as_ref())?;
    let ds = read_dataset(&a.data)?;
    let data = TrainData::from_dataset(&ds, Split::Train, &spec.tasks)?;
    let opts = RunOptions {
        stop_after: a.stop_after,
    };
    let outcome = run_stage(&cfg, &spec, &data, init, &opts)?;
    save_checkpoint(&a.out, &outcome.checkpoint)?;
    let log = a.log.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.csv");
        PathBuf::from(p)
    });
    write_log_csv(&log, &outcome.log).map_err(io_failure(&log))?;
    println!(
        "stage {} {} at step {}; checkpoint {}; log {}",
        spec.id,
        if outcome.checkpoint.complete {
            "complete"
        } else {
            "paused"
        },
        outcome.checkpoint.step,
        a.out.display(),
        log.display()
    );
    Ok(())
}

fn restore(ck: &Checkpoint) -> Result<(UniHema, ParamStore), Failure> {
    let (model, mut store) = UniHema::build(&ck.config, ck.seed)?;
    ck.restore_params(&mut store)?;
    Ok((model, store))
}

fn eval(a: EvalArgs) -> CliResult {
    let task = Task::parse(&a.task)?;
    let split = parse_split(&a.split)?;
    let ck = load_checkpoint(&a.ckpt)?;
    let digest = digest_json(&ck.config);
    print_digest(&digest);
    let (model, store) = restore(&ck)?;
    let ds = read_dataset(&a.data)?;
    let data = TrainData::from_dataset(&ds, split, &[task])?;
    let examples: Vec<_> = data
        .pools
        .get(&task)
        .map(|v| v.iter().collect())
        .unwrap_or_default();
    if examples.is_empty() {
        return Err(Failure::data(format!(
            "no {task} samples in the {} split",
            a.split
        )));
    }
    let report = evaluate(&model, &store, &ds.vocab, task, &examples, &digest)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    match a.report {
        Some(p) => {
            fs::write(&p, format!("{text}\n")).map_err(io_failure(&p))?;
            println!(
                "{} {} = {:.4} over {} samples",
                task, report.metric, report.value, report.samples
            );
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn infer(a: InferArgs) -> CliResult {
    let prompt = TaskPrompt::route(a.prompt.as_deref())?;
    let ck = load_checkpoint(&a.ckpt)?;
    print_digest(&digest_json(&ck.config));
    let (model, store) = restore(&ck)?;
    let image = load_tensor(&a.image)?;
    let vocab = Vocabulary::synthetic();
    match &prompt {
        TaskPrompt::Detection { disease } | TaskPrompt::Segmentation { disease } => {
            for d in model.infer_detections(&store, &vocab, &image, disease)? {
                println!(
                    "{}",
                    serde_json::to_string(&d).expect("detection serializes")
                );
            }
            if let Some(path) = &a.mask {
                let mask = model.infer_mask(&store, &vocab, &image, disease)?;
                let (h, w) = (image.shape()[1], image.shape()[2]);
                let t = Tensor::new(
                    vec![h, w],
                    mask.iter().map(|&m| f64::from(u8::from(m))).collect(),
                )
                .map_err(ModelError::from)?;
                save_tensor(path, &t).map_err(io_failure(path))?;
            }
        }
        TaskPrompt::Vqa { .. } => {
            let (answer, truncated) = model.infer_text(&store, &vocab, &image, &prompt)?;
            println!("{}", json!({ "answer": answer, "truncated": truncated }));
        }
        TaskPrompt::Mlm { .. } => {
            let (sentence, truncated) = model.infer_text(&store, &vocab, &image, &prompt)?;
            println!(
                "{}",
                json!({ "sentence": sentence, "truncated": truncated })
            );
        }
        TaskPrompt::Classification => {
            let (class, probs) = model.infer_class(&store, &image)?;
            let probs: BTreeMap<&str, f64> = CLASS_NAMES.iter().copied().zip(probs).collect();
            println!("{}", json!({ "class": CLASS_NAMES[class], "probs": probs }));
        }
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> CliResult {
    let ck = load_checkpoint(&a.ckpt)?;
    print_digest(&digest_json(&ck.config));
    let mut total = 0;
    for (name, t) in &ck.params {
        println!("{name} {:?}", t.shape());
        total += t.numel();
    }
    println!("parameters: {} tensors, {total} values", ck.params.len());
    println!(
        "stage: {} ({}), step {}",
        ck.stage,
        if ck.complete {
            "complete"
        } else {
            "incomplete"
        },
        ck.step
    );
    let default = ModelConfig::default();
    if ck.config != default {
        let diffs = ck.config_diff(&default);
        let keys: Vec<&str> = diffs.iter().map(|d| d.key.as_str()).collect();
        println!("architecture differs from default in: {}", keys.join(", "));
    }
    Ok(())
}

fn configure_threads() {
    if let Some(n) = std::env::var("UNIHEMA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if n > 0 {
            // Fails only if a global pool already exists.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    }
}

fn main() -> ExitCode {
    configure_threads();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
