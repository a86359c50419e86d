//! Command-line front end: synthesize datasets, train, generate reports,
//! score predictions against references, run the ablation grid, and dump
//! inference scene graphs.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rrg_core::abnormal::KeywordMap;
use rrg_core::checkpoint::Checkpoint;
use rrg_core::config::TrainingConfig;
use rrg_core::data::{build_vocab, generate_dataset, write_jsonl, SyntheticSpec, VocabBundle};
use rrg_core::metrics::evaluate_reports;
use rrg_core::model::generate_report;
use rrg_core::scene_graph::{GraphRecord, NUM_CATEGORIES};
use rrg_core::train::{
    format_ablation_table, from_checkpoint, gt_detections, run_ablation_suite, to_checkpoint,
    train_to_step, TrainLogEntry, TrainState,
};

#[derive(Parser)]
#[command(
    name = "rrg",
    version,
    about = "Scene-graph-aided radiology report generation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset's annotations as JSON lines.
    Synth(SynthArgs),
    /// Train a model on synthetic data and save a checkpoint.
    Train(TrainArgs),
    /// Generate reports from a checkpoint over a fresh eval set.
    Generate(GenerateArgs),
    /// Score a predictions file against a references file.
    Evaluate(EvaluateArgs),
    /// Train and score every ablation variant.
    Ablate(AblateArgs),
    /// Emit the inference scene graphs a checkpoint predicts.
    Graph(GraphArgs),
}

/// Config file plus inline overrides, shared by the training commands.
#[derive(Args)]
struct ConfigArgs {
    /// TOML file with flat training keys; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set steps=500. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shortcut for --set seed=N, applied last.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainingConfig> {
        let mut cfg = TrainingConfig::load_with_overrides(self.config.as_deref(), &self.set)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

/// Synthetic-data knobs for the set a command works on.
#[derive(Args)]
struct DataArgs {
    /// Number of samples to synthesize.
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Dataset generator seed.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Per-region probability of an abnormal finding.
    #[arg(long, default_value_t = 0.3)]
    abnormal_rate: f64,
}

/// The training-set knobs a checkpoint was fit with; needed to rebuild the
/// exact vocabulary before the parameters can be restored.
#[derive(Args)]
struct TrainSetArgs {
    /// Size of the training set the checkpoint was fit on.
    #[arg(long, default_value_t = 64)]
    train_n: usize,
    /// Generator seed of that training set.
    #[arg(long, default_value_t = 0)]
    train_seed: u64,
    /// Abnormal rate of that training set.
    #[arg(long, default_value_t = 0.3)]
    train_abnormal_rate: f64,
}

#[derive(Args)]
struct SynthArgs {
    /// Where to write the JSON-lines dataset.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-region probability of an abnormal finding.
    #[arg(long, default_value_t = 0.3)]
    abnormal_rate: f64,
    /// Square canvas side in pixels.
    #[arg(long, default_value_t = 48)]
    canvas: usize,
    /// Number of anatomical categories.
    #[arg(long, default_value_t = NUM_CATEGORIES)]
    categories: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Where to write the checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Continue a checkpointed run to its configured step count. Uses the
    /// embedded config; pass the same data flags as the original run.
    #[arg(long, conflicts_with_all = ["config", "set", "seed"])]
    resume: Option<PathBuf>,
    /// Append one JSON loss line per step to this file.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Print only the final summary.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Where to write the JSON-lines predictions.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train_set: TrainSetArgs,
    /// Include the predicted scene graph on every line.
    #[arg(long)]
    emit_graphs: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// JSON-lines file with {"image_id", "report"} per line.
    #[arg(long)]
    predictions: PathBuf,
    /// JSON-lines file the predictions are scored against.
    #[arg(long)]
    references: PathBuf,
    /// Also write the metric report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Training-set size per run.
    #[arg(long, default_value_t = 32)]
    train_n: usize,
    /// Held-out eval-set size.
    #[arg(long, default_value_t = 8)]
    eval_n: usize,
    /// Generator seed for the training split.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Generator seed for the eval split.
    #[arg(long, default_value_t = 1000)]
    eval_seed: u64,
    /// Per-region probability of an abnormal finding.
    #[arg(long, default_value_t = 0.3)]
    abnormal_rate: f64,
    /// Comma-separated model seeds to average over.
    #[arg(long, default_value = "0", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Write the scored rows as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GraphArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Where to write the JSON-lines graphs.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train_set: TrainSetArgs,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Synth(a) => run_synth(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Generate(a) => run_generate(a),
        Cmd::Evaluate(a) => run_evaluate(a),
        Cmd::Ablate(a) => run_ablate(a),
        Cmd::Graph(a) => run_graph(a),
    }
}

fn spec_for(cfg: &TrainingConfig, seed: u64, abnormal_rate: f64) -> SyntheticSpec {
    SyntheticSpec {
        canvas: cfg.canvas,
        n_categories: cfg.n_categories,
        abnormal_rate,
        seed,
        ..SyntheticSpec::default()
    }
}

/// Load a checkpoint together with the vocabulary of the training set it
/// was fit on, rebuilt from the given knobs.
fn load_model(
    path: &Path,
    ts: &TrainSetArgs,
) -> Result<(TrainState<f64>, TrainingConfig, VocabBundle)> {
    let ck = Checkpoint::<f64>::load(path).with_context(|| format!("loading {}", path.display()))?;
    let cfg: TrainingConfig =
        serde_json::from_str(&ck.config_json).context("embedded config does not parse")?;
    let spec = spec_for(&cfg, ts.train_seed, ts.train_abnormal_rate);
    let samples = generate_dataset::<f64>(&spec, ts.train_n);
    let vocab = build_vocab(&samples)?;
    let (state, cfg) = from_checkpoint(&ck, &vocab).context(
        "checkpoint does not match the rebuilt vocabulary; pass the training-set flags it was fit on",
    )?;
    Ok((state, cfg, vocab))
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        canvas: a.canvas,
        n_categories: a.categories,
        abnormal_rate: a.abnormal_rate,
        seed: a.seed,
        ..SyntheticSpec::default()
    };
    let samples = generate_dataset::<f64>(&spec, a.n);
    write_jsonl(&samples, &a.out)?;
    println!("wrote {} records to {}", samples.len(), a.out.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let (loaded, cfg) = match &a.resume {
        Some(path) => {
            let ck =
                Checkpoint::<f64>::load(path).with_context(|| format!("loading {}", path.display()))?;
            let cfg: TrainingConfig =
                serde_json::from_str(&ck.config_json).context("embedded config does not parse")?;
            (Some(ck), cfg)
        }
        None => (None, a.config.load()?),
    };
    let spec = spec_for(&cfg, a.data.data_seed, a.data.abnormal_rate);
    let samples = generate_dataset::<f64>(&spec, a.data.n);
    let vocab = build_vocab(&samples)?;
    let mut state = match &loaded {
        Some(ck) => {
            from_checkpoint(ck, &vocab)
                .context("checkpoint does not match the rebuilt vocabulary; pass the original data flags")?
                .0
        }
        None => TrainState::new(&cfg, &vocab),
    };
    let start = state.step;

    let mut log_file = match &a.log {
        Some(p) => Some(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => None,
    };
    let mut log_err: Option<std::io::Error> = None;
    let quiet = a.quiet;
    let mut on_step = |e: &TrainLogEntry| {
        if !quiet {
            println!(
                "step {:>6}  total {:>9.4}  gen {:>9.4}  rs {:>7.4}  ap {:>7.4}  dr {:>7.4}  con {:>7.4}  lr {:.3e}",
                e.step, e.total, e.losses.gen, e.losses.rs, e.losses.ap, e.losses.dr, e.losses.con, e.lr
            );
        }
        if let (Some(w), None) = (log_file.as_mut(), log_err.as_ref()) {
            let line = serde_json::to_string(e).expect("log entry serializes");
            if let Err(err) = writeln!(w, "{line}") {
                log_err = Some(err);
            }
        }
    };
    train_to_step(&mut state, &samples, &vocab, &cfg, cfg.steps as u64, &mut on_step)?;

    if let Some(err) = log_err {
        return Err(err).context("writing the loss log");
    }
    if let Some(mut w) = log_file {
        w.flush().context("flushing the loss log")?;
    }
    to_checkpoint(&state, &cfg).save(&a.out)?;
    println!(
        "trained to step {} ({} new) over {} samples, {} parameters; checkpoint {}",
        state.step,
        state.step - start,
        samples.len(),
        state.model.num_params(),
        a.out.display()
    );
    Ok(())
}

fn run_generate(a: GenerateArgs) -> Result<()> {
    let (state, cfg, vocab) = load_model(&a.checkpoint, &a.train_set)?;
    let spec = spec_for(&cfg, a.data.data_seed, a.data.abnormal_rate);
    let samples = generate_dataset::<f64>(&spec, a.data.n);

    let file = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut w = BufWriter::new(file);
    for s in &samples {
        let dets = gt_detections(&s.graph);
        let gen = generate_report(&state.model, &s.image, &dets, &vocab, &cfg)?;
        let mut line = serde_json::json!({"image_id": s.image_id, "report": gen.report});
        if a.emit_graphs {
            let rec = GraphRecord::from_graph(&s.image_id, &gen.graph);
            line["objects"] = serde_json::to_value(&rec.objects)?;
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    println!("wrote {} reports to {}", samples.len(), a.out.display());
    Ok(())
}

/// Read `{"image_id", "report"}` pairs off a JSON-lines file, in file order.
/// Extra keys on a line are ignored, so both dataset and prediction files fit.
fn read_report_lines(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = || format!("{}:{}", path.display(), i + 1);
        let v: serde_json::Value = serde_json::from_str(line).with_context(at)?;
        let id = v
            .get("image_id")
            .and_then(|x| x.as_str())
            .with_context(|| format!("{}: missing image_id", at()))?;
        let report = v
            .get("report")
            .and_then(|x| x.as_str())
            .with_context(|| format!("{}: missing report", at()))?;
        out.push((id.to_string(), report.to_string()));
    }
    if out.is_empty() {
        bail!("{} holds no report lines", path.display());
    }
    Ok(out)
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    let pred_lines = read_report_lines(&a.predictions)?;
    let ref_lines = read_report_lines(&a.references)?;
    let mut by_id: BTreeMap<&str, &str> = BTreeMap::new();
    for (id, report) in &ref_lines {
        if by_id.insert(id, report).is_some() {
            bail!("duplicate image_id {id} in {}", a.references.display());
        }
    }
    let mut preds = Vec::with_capacity(pred_lines.len());
    let mut refs = Vec::with_capacity(pred_lines.len());
    for (id, report) in &pred_lines {
        let reference = by_id
            .get(id.as_str())
            .with_context(|| format!("no reference for image_id {id}"))?;
        preds.push(report.as_str());
        refs.push(*reference);
    }
    if pred_lines.len() != ref_lines.len() {
        bail!(
            "{} predictions but {} references",
            pred_lines.len(),
            ref_lines.len()
        );
    }

    let report = evaluate_reports(&preds, &refs, &KeywordMap::default_chest())?;
    println!("{}", report.table());
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(out) = &a.out {
        fs::write(out, json).with_context(|| format!("writing {}", out.display()))?;
        println!("metrics written to {}", out.display());
    }
    Ok(())
}

fn run_ablate(a: AblateArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let train_set = generate_dataset::<f64>(&spec_for(&cfg, a.data_seed, a.abnormal_rate), a.train_n);
    let eval_set = generate_dataset::<f64>(&spec_for(&cfg, a.eval_seed, a.abnormal_rate), a.eval_n);
    let vocab = build_vocab(&train_set)?;
    let map = KeywordMap::default_chest();
    let rows = run_ablation_suite::<f64>(
        &cfg,
        &train_set,
        &eval_set,
        &vocab,
        &a.seeds,
        &map,
        &mut |name, seed| eprintln!("training {name} (seed {seed})"),
    )?;
    print!("{}", format_ablation_table(&rows));
    if let Some(out) = &a.out {
        let json = serde_json::to_string_pretty(&rows)?;
        fs::write(out, json).with_context(|| format!("writing {}", out.display()))?;
        println!("rows written to {}", out.display());
    }
    Ok(())
}

fn run_graph(a: GraphArgs) -> Result<()> {
    let (state, cfg, vocab) = load_model(&a.checkpoint, &a.train_set)?;
    let spec = spec_for(&cfg, a.data.data_seed, a.data.abnormal_rate);
    let samples = generate_dataset::<f64>(&spec, a.data.n);

    let file = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut w = BufWriter::new(file);
    for s in &samples {
        let dets = gt_detections(&s.graph);
        let gen = generate_report(&state.model, &s.image, &dets, &vocab, &cfg)?;
        let rec = GraphRecord::from_graph(&s.image_id, &gen.graph);
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
    }
    w.flush()?;
    println!("wrote {} graphs to {}", samples.len(), a.out.display());
    Ok(())
}
