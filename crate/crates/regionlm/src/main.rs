//! Command-line front end: synthesize data, train the curriculum, score a
//! checkpoint, and inspect generations. Exit codes are part of the contract:
//! 0 success, 1 usage or configuration, 2 data or archive, 3 numeric failure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use regionlm::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use regionlm::config::{load_config, ConfigError, RunConfig};
use regionlm::data::{
    generate_toy_dataset, load_dataset, parse_categories, write_dataset, ConversationSample,
    DataError, Role,
};
use regionlm::eval::{
    classify_question, evaluate_model, normalize_answer, render_report, EvalError,
};
use regionlm::model::Model;
use regionlm::train::{run_curriculum, train_stage, TrainError, TrainReport};
use regionlm::ModelError;

#[derive(Parser)]
#[command(name = "regionlm", version, about = "Region-aware vision-language model, desk scale")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Writes a synthetic dataset and prints per-category counts.
    Synth {
        /// Sample count override.
        #[arg(long)]
        n: Option<usize>,
        /// Category filter override: comma list or "all".
        #[arg(long)]
        categories: Option<String>,
        /// Destination path override.
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Trains the three-stage curriculum, or one stage with --stage.
    Train {
        /// Single stage to train (1..=3); the full curriculum when omitted.
        #[arg(long)]
        stage: Option<u8>,
        /// Starting checkpoint; fresh initialization when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Per-stage step count override.
        #[arg(long)]
        steps: Option<usize>,
        /// Training dataset path override.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Scores a checkpoint on a dataset; writes report and trace.
    Eval {
        /// Checkpoint to score; defaults to `<out_dir>/stage3.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluation dataset path override.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Prints raw and normalized answers for the first dataset prompts.
    Generate {
        /// Checkpoint to decode from; defaults to `<out_dir>/stage3.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset path override.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of samples to print.
        #[arg(long, default_value_t = 8)]
        limit: usize,
    },
}

/// Process-level failure with its exit code.
struct AppError {
    code: u8,
    message: String,
}

impl AppError {
    fn usage(message: impl Into<String>) -> Self {
        AppError { code: 1, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        AppError { code: 2, message: message.into() }
    }

    fn numeric(message: impl Into<String>) -> Self {
        AppError { code: 3, message: message.into() }
    }
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError::usage(e.to_string())
    }
}

impl From<DataError> for AppError {
    fn from(e: DataError) -> Self {
        AppError::data(e.to_string())
    }
}

impl From<CheckpointError> for AppError {
    fn from(e: CheckpointError) -> Self {
        AppError::data(e.to_string())
    }
}

impl From<ModelError> for AppError {
    fn from(e: ModelError) -> Self {
        AppError::data(e.to_string())
    }
}

impl From<EvalError> for AppError {
    fn from(e: EvalError) -> Self {
        AppError::data(e.to_string())
    }
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::NonFiniteLoss { .. } => AppError::numeric(e.to_string()),
            TrainError::UnknownStage(_)
            | TrainError::BadCurriculum
            | TrainError::BadTrainableSet { .. }
            | TrainError::BadPlan(_) => AppError::usage(e.to_string()),
            TrainError::EmptyDataset | TrainError::Model(_) | TrainError::Checkpoint(_) => {
                AppError::data(e.to_string())
            }
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let informational =
                matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if informational { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    match cli.cmd {
        Cmd::Synth { n, categories, dest } => cmd_synth(&cfg, n, categories, dest),
        Cmd::Train { stage, checkpoint, steps, data } => {
            cmd_train(&cfg, stage, checkpoint, steps, data)
        }
        Cmd::Eval { checkpoint, data } => {
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out_dir.join("stage3.ckpt"));
            cmd_eval(&cfg, &ckpt, data)
        }
        Cmd::Generate { checkpoint, data, limit } => {
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out_dir.join("stage3.ckpt"));
            cmd_generate(&cfg, &ckpt, data, limit)
        }
    }
}

fn cmd_synth(
    cfg: &RunConfig,
    n: Option<usize>,
    categories: Option<String>,
    dest: Option<PathBuf>,
) -> Result<(), AppError> {
    let n = n.unwrap_or(cfg.synth.n_samples);
    let cats = match &categories {
        Some(arg) => {
            parse_categories(arg).map_err(|e| AppError::usage(format!("--categories: {e}")))?
        }
        None => cfg.categories()?,
    };
    let samples = generate_toy_dataset(cfg.seed, n, &cats, &cfg.synth.scene())?;
    let dest = dest.unwrap_or_else(|| cfg.data.train.clone());
    write_dataset(&samples, &dest)?;
    println!("wrote {} samples to {}", samples.len(), dest.display());
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &samples {
        let name = s.category.map_or("uncategorized", |c| c.as_str());
        *counts.entry(name).or_default() += 1;
    }
    for (name, count) in counts {
        println!("  {name:<12} {count}");
    }
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    stage: Option<u8>,
    checkpoint: Option<PathBuf>,
    steps: Option<usize>,
    data: Option<PathBuf>,
) -> Result<(), AppError> {
    let mut model = match &checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => Model::new(cfg.model_config())?,
    };
    let data_path = data.unwrap_or_else(|| cfg.data.train.clone());
    let samples = load_dataset(&data_path)?;
    let mut prepared = Vec::with_capacity(samples.len());
    for s in &samples {
        prepared.push(model.prepare(s)?);
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let mut plans = cfg.stage_plans()?;
    if let Some(n) = steps {
        for p in &mut plans {
            p.steps = n;
        }
    }
    let reports = match stage {
        Some(id) => {
            if !(1..=3).contains(&id) {
                return Err(AppError::usage(format!("--stage {id} outside 1..=3")));
            }
            let plan = plans[(id - 1) as usize].clone();
            let mut report =
                train_stage(&mut model, &plan, &prepared, cfg.seed.wrapping_add(id as u64))?;
            model.provenance.push(format!("stage{id}"));
            let path = cfg.out_dir.join(format!("stage{id}.ckpt"));
            save_checkpoint(&model, &path)?;
            report.checkpoint = Some(path);
            vec![report]
        }
        None => run_curriculum(&mut model, &plans, &[&prepared, &prepared, &prepared], cfg.seed, &cfg.out_dir)?,
    };
    write_train_outputs(&cfg.out_dir, &reports)?;
    for r in &reports {
        let last = r.loss.last().copied().unwrap_or(f64::NAN);
        let ckpt = r
            .checkpoint
            .as_deref()
            .map_or_else(|| "-".to_string(), |p| p.display().to_string());
        println!(
            "stage {}: steps={} final_loss={:.4} wall={:.1}s checkpoint={}",
            r.plan.stage_id, r.plan.steps, last, r.wall_time_s, ckpt
        );
    }
    Ok(())
}

fn write_train_outputs(out_dir: &Path, reports: &[TrainReport]) -> Result<(), AppError> {
    let mut csv = String::from("stage,step,loss,lr\n");
    for r in reports {
        for (step, (loss, lr)) in r.loss.iter().zip(&r.lr).enumerate() {
            writeln!(csv, "{},{step},{loss},{lr}", r.plan.stage_id).expect("string write");
        }
    }
    fs::write(out_dir.join("loss.csv"), csv)?;
    let json = serde_json::to_string_pretty(reports).expect("reports serialize");
    fs::write(out_dir.join("train_report.json"), json + "\n")?;
    // the plot is a convenience, never a gate
    if let Err(e) = fs::write(out_dir.join("loss.svg"), loss_svg(reports)) {
        eprintln!("warning: could not write loss.svg: {e}");
    }
    Ok(())
}

/// Loss-versus-global-step polyline per stage, self-contained SVG.
fn loss_svg(reports: &[TrainReport]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const ML: f64 = 56.0;
    const MR: f64 = 16.0;
    const MT: f64 = 20.0;
    const MB: f64 = 36.0;
    let all: Vec<f64> = reports.iter().flat_map(|r| r.loss.iter().copied()).collect();
    let total = all.len();
    let (mut lo, mut hi) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let x_of = |i: usize| ML + (W - ML - MR) * i as f64 / (total.max(2) - 1) as f64;
    let y_of = |v: f64| MT + (H - MT - MB) * (1.0 - (v - lo) / (hi - lo));
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"#444\"/>\n\
         <line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#444\"/>",
        H - MB,
        H - MB,
        W - MR,
        H - MB
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" \
         text-anchor=\"end\">{hi:.3}</text>\n\
         <text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" \
         text-anchor=\"end\">{lo:.3}</text>\n\
         <text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" \
         text-anchor=\"middle\">step</text>",
        ML - 4.0,
        MT + 4.0,
        ML - 4.0,
        H - MB + 4.0,
        (ML + W - MR) / 2.0,
        H - 8.0
    );
    let colors = ["#1f77b4", "#d62728", "#2ca02c"];
    let mut offset = 0usize;
    for r in reports {
        let color = colors[(r.plan.stage_id as usize).saturating_sub(1) % colors.len()];
        let points: Vec<String> = r
            .loss
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", x_of(offset + i), y_of(v)))
            .collect();
        if points.len() == 1 {
            let _ = writeln!(
                svg,
                "<circle cx=\"{}\" cy=\"{}\" r=\"2\" fill=\"{color}\"/>",
                x_of(offset),
                y_of(r.loss[0])
            );
        } else if !points.is_empty() {
            let _ = writeln!(
                svg,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" \
                 points=\"{}\"/>",
                points.join(" ")
            );
        }
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" \
             fill=\"{color}\">s{}</text>",
            x_of(offset),
            MT - 6.0,
            r.plan.stage_id
        );
        offset += r.loss.len();
    }
    svg.push_str("</svg>\n");
    svg
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data: Option<PathBuf>) -> Result<(), AppError> {
    let model = load_checkpoint(checkpoint)?;
    let data_path = data.unwrap_or_else(|| cfg.data.eval.clone());
    let samples = load_dataset(&data_path)?;
    let (report, trace) = evaluate_model(&model, &samples, &cfg.eval)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut jsonl = String::new();
    for t in &trace {
        jsonl.push_str(&serde_json::to_string(t).expect("trace record serializes"));
        jsonl.push('\n');
    }
    fs::write(cfg.out_dir.join("trace.jsonl"), jsonl)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(cfg.out_dir.join("report.json"), json + "\n")?;
    let text = render_report(&report);
    fs::write(cfg.out_dir.join("report.txt"), &text)?;
    print!("{text}");
    println!("trace: {}", cfg.out_dir.join("trace.jsonl").display());
    Ok(())
}

fn cmd_generate(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: Option<PathBuf>,
    limit: usize,
) -> Result<(), AppError> {
    let model = load_checkpoint(checkpoint)?;
    let data_path = data.unwrap_or_else(|| cfg.data.eval.clone());
    let samples = load_dataset(&data_path)?;
    for sample in samples.iter().take(limit) {
        let question = last_user_text(sample).unwrap_or("<no user turn>");
        let raw = model.generate_answer(sample, cfg.eval.max_new_tokens)?;
        let extracted = match classify_question(question) {
            Ok(qtype) => match normalize_answer(&raw, qtype) {
                Ok(v) => serde_json::to_string(&v).expect("normalized answer serializes"),
                Err(_) => "unparseable".to_string(),
            },
            Err(_) => "unclassifiable question".to_string(),
        };
        println!("[{}] q: {question}", sample.sample_id);
        println!("  raw: {raw}");
        println!("  extracted: {extracted}");
    }
    Ok(())
}

fn last_user_text(sample: &ConversationSample) -> Option<&str> {
    sample
        .turns
        .iter()
        .rev()
        .find(|t| t.role == Role::User)
        .map(|t| t.text.as_str())
}
