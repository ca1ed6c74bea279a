use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rubble_core::dsp::Frontend;
use rubble_core::labels::{Decision, Label};
use rubble_core::metrics::{confusion, metrics_from_confusion, parse_percentage_table, reconstruct_counts};
use rubble_core::nn::{ModelSpec, TrainConfig};
use rubble_core::pipeline::Classifier;
use rubble_core::protocol::{encode_line, replay, Envelope, Message, Session, SessionLog};
use rubble_core::sim::{load_map, parse_command_log, SimConfig, Simulator};
use rubble_core::synth::{generate_dataset_with_plan, read_wav, DatasetManifest, DatasetPlan, Split};
use rubble_core::telemetry::{
    calibration_report, emit_prediction_block, emit_sensor_block_stamped, format_timestamp, load_calibration_csv,
    PredictionBlock,
};
use rubble_core::tuner::{enumerate_candidates, leaderboard_csv, tune, DeviceBudget, SearchSpace, TuneConfig};
use serde_json::json;

use crate::server::{self, ServeConfig, Source};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(name = "rubble", version, about = "Rubble probe toolkit: synthetic data, training, evaluation, tuning, simulation and the gateway")]
pub struct Cli {
    /// Global seed for every randomized step.
    #[arg(long, global = true, env = "RUBBLE_SEED", default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Machine-readable JSON output.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic five-class WAV dataset.
    GenData(GenDataArgs),
    /// Train a classifier on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a model on the test split, or rebuild metrics from printed tables.
    Eval(EvalArgs),
    /// Search frontend and model candidates under a device budget.
    Tune(TuneArgs),
    /// Classify one WAV clip and print a serial-monitor prediction block.
    Infer(InferArgs),
    /// Run the probe simulator offline and write a session log.
    Simulate(SimulateArgs),
    /// Serve the probe stream to NDJSON and WebSocket clients.
    Serve(ServeArgs),
    /// Recompute sensor calibration statistics.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 120)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0.84)]
    pub train_fraction: f64,
    /// 8040 training and 1608 test clips, ignoring --per-class.
    #[arg(long)]
    pub full_scale: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FrontendChoice {
    Mfe,
    Mfcc,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "model.rsnn")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = FrontendChoice::Mfe)]
    pub frontend: FrontendChoice,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.0005)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.2)]
    pub validation_split: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "tables")]
    pub model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    pub data: Option<PathBuf>,
    /// Printed percentage tables to rebuild counts and F1 scores from.
    #[arg(long, num_args = 1.., conflicts_with = "model")]
    pub tables: Vec<PathBuf>,
    /// Largest per-class sample count tried when rebuilding counts.
    #[arg(long, default_value_t = 200)]
    pub n_max: usize,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub sram_kb: u64,
    #[arg(long, default_value_t = 1024)]
    pub flash_kb: u64,
    #[arg(long, default_value_t = 1000.0)]
    pub latency_ms: f64,
    /// Write the winning candidate as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    pub wav: PathBuf,
    #[arg(long, default_value = "model.rsnn")]
    pub model: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    pub map: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub ticks: u64,
    /// JSONL drive commands `{t_ms, direction, magnitude}`.
    #[arg(long)]
    pub commands: Option<PathBuf>,
    /// Replay the drive commands recorded in an earlier session log.
    #[arg(long, conflicts_with = "commands")]
    pub replay: Option<PathBuf>,
    /// Session log destination; stdout when omitted.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Print the serial-monitor text instead of NDJSON.
    #[arg(long)]
    pub serial: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    #[arg(long, default_value_t = 7878)]
    pub port: u16,
    #[arg(long, required_unless_present = "serial")]
    pub map: Option<PathBuf>,
    /// Serial-monitor text source; `-` reads stdin.
    #[arg(long, conflicts_with = "map")]
    pub serial: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub tick_ms: u64,
    #[arg(long)]
    pub ticks: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub wait_clients: usize,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(required = true)]
    pub csv: Vec<PathBuf>,
}

/// Parses `argv`, runs the command, and returns the process exit code:
/// 0 on success, 2 on usage errors, 1 on runtime errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            1
        }
    }
}

/// Joins the cause chain, skipping causes already quoted by their parent.
fn error_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

pub fn execute(cli: Cli) -> anyhow::Result<()> {
    let (seed, json) = (cli.seed, cli.json);
    match cli.command {
        Command::GenData(a) => gen_data(a, seed, json),
        Command::Train(a) => train(a, seed, json),
        Command::Eval(a) => eval(a, json),
        Command::Tune(a) => tune_cmd(a, seed, json),
        Command::Infer(a) => infer(a, json),
        Command::Simulate(a) => simulate(a, seed, json),
        Command::Serve(a) => serve(a, seed),
        Command::Calibrate(a) => calibrate(a, json),
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value serializes"));
}

fn gen_data(a: GenDataArgs, seed: u64, json: bool) -> anyhow::Result<()> {
    let plan = if a.full_scale { DatasetPlan::full_scale() } else { DatasetPlan::from_fraction(a.per_class, a.train_fraction)? };
    let manifest = generate_dataset_with_plan(&plan, seed, &a.out)?;
    let (train, test) = (plan.train_total(), plan.test_total());
    if json {
        print_json(&json!({ "out": a.out, "seed": seed, "train": train, "test": test, "files": manifest.entries.len() }));
    } else {
        println!("wrote {train} training and {test} test clips to {}", a.out.display());
    }
    Ok(())
}

fn load_split(dir: &Path, split: Split) -> anyhow::Result<Vec<rubble_core::dsp::AudioClip>> {
    let manifest = DatasetManifest::load(dir).with_context(|| format!("reading dataset at {}", dir.display()))?;
    let clips = manifest.read_split(dir, split)?;
    if clips.is_empty() {
        bail!("dataset at {} has no {} clips", dir.display(), split.dir_name());
    }
    Ok(clips)
}

fn train(a: TrainArgs, seed: u64, json: bool) -> anyhow::Result<()> {
    let clips = load_split(&a.data, Split::Train)?;
    let frontend = match a.frontend {
        FrontendChoice::Mfe => Frontend::default(),
        FrontendChoice::Mfcc => Frontend::mfcc(13, true),
    };
    let shape = frontend.clip_shape().context("frontend produces no frames for a one-second clip")?;
    let cfg = TrainConfig {
        learning_rate: a.learning_rate,
        epochs: a.epochs,
        validation_split: a.validation_split,
        batch_size: a.batch_size,
        seed,
    };
    let (classifier, outcome) = Classifier::train(frontend, ModelSpec::default_audio(shape), &clips, &cfg)?;
    classifier.save(&a.out)?;
    let last = outcome.history.last();
    if json {
        print_json(&json!({ "model": a.out, "clips": clips.len(), "history": outcome.history }));
    } else {
        println!("trained on {} clips for {} epochs", clips.len(), outcome.history.len());
        if let Some(h) = last {
            println!(
                "final: train loss {:.4}, train acc {:.3}, val loss {:.4}, val acc {:.3}",
                h.train_loss, h.train_accuracy, h.val_loss, h.val_accuracy
            );
        }
        println!("saved {}", a.out.display());
    }
    Ok(())
}

fn eval(a: EvalArgs, json: bool) -> anyhow::Result<()> {
    if !a.tables.is_empty() {
        let mut out = Vec::new();
        for path in &a.tables {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let table = parse_percentage_table(&text).with_context(|| path.display().to_string())?;
            let m = reconstruct_counts(&table.rows, table.accuracy_pct, a.n_max)?;
            let report = metrics_from_confusion(&m)?;
            if json {
                out.push(json!({ "table": path, "name": table.name, "counts": m, "metrics": report, "stated_f1": table.stated_f1 }));
            } else {
                let title = if table.name.is_empty() { path.display().to_string() } else { table.name.clone() };
                println!("== {title} ==");
                println!("implied samples per class: {:?} (total {})", (0..m.num_classes()).map(|r| m.row_total(r)).collect::<Vec<_>>(), m.total());
                print!("{}", m.render_table(&report));
                if let Some(stated) = &table.stated_f1 {
                    let worst = report.f1.iter().zip(stated).map(|(g, s)| (g - s).abs()).fold(0.0, f64::max);
                    println!("max |F1 - printed F1| = {worst:.4}");
                }
                println!();
            }
        }
        if json {
            print_json(&serde_json::Value::Array(out));
        }
        return Ok(());
    }
    let (Some(model), Some(data)) = (a.model, a.data) else { bail!("--model needs --data") };
    let classifier = Classifier::load(&model)?;
    let clips = load_split(&data, Split::Test)?;
    let mut decisions = Vec::with_capacity(clips.len());
    let mut truths = Vec::with_capacity(clips.len());
    for c in &clips {
        decisions.push(classifier.predict(c)?.decision);
        truths.push(c.label.context("test clip without label")?);
    }
    let m = confusion(&decisions, &truths)?;
    let report = metrics_from_confusion(&m)?;
    if json {
        print_json(&json!({ "counts": m, "metrics": report }));
    } else {
        print!("{}", m.render_table(&report));
    }
    Ok(())
}

fn tune_cmd(a: TuneArgs, seed: u64, json: bool) -> anyhow::Result<()> {
    let clips = load_split(&a.data, Split::Train)?;
    let (candidates, dropped) = enumerate_candidates(&SearchSpace::desk_default());
    let budget = DeviceBudget {
        sram_bytes: a.sram_kb * 1024,
        flash_bytes: a.flash_kb * 1024,
        latency_budget_ms: a.latency_ms,
        ..DeviceBudget::default()
    };
    let cfg = TuneConfig { epochs: a.epochs, seed, ..TuneConfig::default() };
    let outcome = tune(&candidates, &clips, &budget, &cfg)?;
    if let Some(out) = &a.out {
        std::fs::write(out, serde_json::to_string_pretty(&outcome.best)? + "\n")
            .with_context(|| format!("writing {}", out.display()))?;
    }
    if json {
        print_json(&json!({ "best": outcome.best, "leaderboard": outcome.leaderboard, "dropped": dropped }));
    } else {
        print!("{}", leaderboard_csv(&outcome.leaderboard));
        for d in &dropped {
            eprintln!("skipped {}: {}", d.id, d.reason);
        }
        println!("best: {}", outcome.best.id);
    }
    Ok(())
}

fn infer(a: InferArgs, json: bool) -> anyhow::Result<()> {
    let mut classifier = Classifier::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    if let Some(t) = a.threshold {
        classifier.threshold = t;
    }
    let clip = read_wav(&a.wav).with_context(|| format!("reading {}", a.wav.display()))?;
    let t0 = Instant::now();
    let features = classifier.features(&clip)?;
    let t1 = Instant::now();
    let p = classifier.predict_features(&features)?;
    let t2 = Instant::now();
    let mut probabilities = [0.0; rubble_core::labels::NUM_CLASSES];
    probabilities.copy_from_slice(&p.probabilities);
    let block = PredictionBlock {
        dsp_ms: (t1 - t0).as_millis() as u64,
        classification_ms: (t2 - t1).as_millis() as u64,
        anomaly_ms: 0,
        probabilities,
    };
    let decision = match p.decision {
        Decision::Class(l) => l.name().to_string(),
        Decision::Uncertain => "uncertain".to_string(),
    };
    if json {
        print_json(&json!({ "prediction": block, "decision": decision, "threshold": classifier.threshold }));
    } else {
        print!("{}", emit_prediction_block(&block));
    }
    Ok(())
}

fn load_classifier(path: Option<&Path>) -> anyhow::Result<Option<Arc<Classifier>>> {
    path.map(|p| Classifier::load(p).with_context(|| format!("loading {}", p.display())).map(Arc::new)).transpose()
}

fn simulate(a: SimulateArgs, seed: u64, json: bool) -> anyhow::Result<()> {
    let map = load_map(&a.map)?;
    let classifier = load_classifier(a.model.as_deref())?;
    let commands = match (&a.commands, &a.replay) {
        (Some(p), _) => parse_command_log(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        (None, Some(p)) => rubble_core::protocol::recorded_commands(&rubble_core::protocol::read_session_log(p)?),
        (None, None) => Vec::new(),
    };
    let sim = Simulator::new(map, classifier, SimConfig { seed, ..SimConfig::default() })?;
    let stream = replay(sim, &commands, a.ticks)?;

    if a.serial {
        let mut out = std::io::stdout().lock();
        for e in &stream {
            match &e.message {
                Message::Telemetry(f) => write!(out, "{}", emit_sensor_block_stamped(f))?,
                Message::Prediction(p) => {
                    let ts = format_timestamp(e.t_ms);
                    for l in emit_prediction_block(p).lines() {
                        writeln!(out, "{ts} -> {l}")?;
                    }
                }
                _ => {}
            }
        }
        return Ok(());
    }
    match &a.log {
        Some(path) => {
            let mut log = SessionLog::create(path)?;
            for e in &stream {
                log.append(e)?;
            }
            print_summary(&stream, a.ticks, json);
        }
        None => {
            let mut out = std::io::stdout().lock();
            for e in &stream {
                out.write_all(encode_line(e).as_bytes())?;
            }
        }
    }
    Ok(())
}

fn print_summary(stream: &[Envelope], ticks: u64, json: bool) {
    let mut counts = [0usize; rubble_core::labels::NUM_CLASSES + 1];
    for e in stream {
        if let Message::Prediction(p) = &e.message {
            match p.decision(rubble_core::nn::DEFAULT_THRESHOLD) {
                Decision::Class(l) => counts[l.index()] += 1,
                Decision::Uncertain => counts[rubble_core::labels::NUM_CLASSES] += 1,
            }
        }
    }
    if json {
        let per: serde_json::Map<String, serde_json::Value> = Label::ALL
            .iter()
            .map(|l| (l.name().to_string(), json!(counts[l.index()])))
            .chain(std::iter::once(("uncertain".to_string(), json!(counts[rubble_core::labels::NUM_CLASSES]))))
            .collect();
        print_json(&json!({ "ticks": ticks, "messages": stream.len(), "predictions": per }));
    } else {
        println!("{ticks} ticks, {} messages", stream.len());
        if counts.iter().any(|&c| c > 0) {
            for l in Label::ALL {
                println!("  {:<14} {}", l.name(), counts[l.index()]);
            }
            println!("  {:<14} {}", "uncertain", counts[rubble_core::labels::NUM_CLASSES]);
        }
    }
}

fn serve(a: ServeArgs, seed: u64) -> anyhow::Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let source = match (&a.map, &a.serial) {
            (Some(map), _) => {
                let classifier = load_classifier(a.model.as_deref())?;
                let sim = Simulator::new(load_map(map)?, classifier, SimConfig { seed, cycle_ms: a.tick_ms, ..SimConfig::default() })?;
                Source::Sim(Session::new(sim))
            }
            (None, Some(p)) if p.as_os_str() == "-" => Source::Serial(Box::new(tokio::io::BufReader::new(tokio::io::stdin()))),
            (None, Some(p)) => {
                let f = tokio::fs::File::open(p).await.with_context(|| format!("opening {}", p.display()))?;
                Source::Serial(Box::new(tokio::io::BufReader::new(f)))
            }
            (None, None) => bail!("either --map or --serial is required"),
        };
        let listener = server::bind(&format!("{}:{}", a.bind, a.port)).await?;
        eprintln!("serving on {} (raw NDJSON, or WebSocket at {})", listener.local_addr()?, server::STREAM_PATH);
        let cfg = ServeConfig {
            tick: Duration::from_millis(a.tick_ms),
            max_ticks: a.ticks,
            wait_for_clients: a.wait_clients,
            log_path: a.log.clone(),
            ..ServeConfig::default()
        };
        tokio::select! {
            r = server::serve(listener, source, cfg) => {
                let s = r?;
                eprintln!("session over: {} ticks, {} messages, {} clients", s.ticks, s.messages, s.clients);
            }
            _ = tokio::signal::ctrl_c() => eprintln!("interrupted"),
        }
        Ok(())
    })
}

fn calibrate(a: CalibrateArgs, json: bool) -> anyhow::Result<()> {
    let sensors = a
        .csv
        .iter()
        .map(|p| load_calibration_csv(p).with_context(|| format!("reading {}", p.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let report = calibration_report(&sensors)?;
    if json {
        print_json(&serde_json::to_value(&report)?);
    } else {
        print!("{}", report.render());
    }
    Ok(())
}
