use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use tssrgcn::data::{
    prepare, synth_generate, DataConfig, FlowInput, PrepareInputs, PreparedDataset, SynthParams, WindowSource, SYNTH_FLOW_BIN,
    SYNTH_FLOW_CSV,
};
use tssrgcn::gradcheck::{model_gradcheck_with_step, MODEL_STEP};
use tssrgcn::train::{
    evaluate, historical_average, predict_split, train, Checkpoint, EpochRecord, MetricsReport, StopReason, TrainConfig, TrainData,
};
use tssrgcn::{GraphOperators, W1Mode};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "tssrgcn",
    version,
    about = "Traffic flow forecasting with spatio-temporal graph convolutions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean, window and hash raw sensor data into a prepared directory.
    Prepare(PrepareArgs),
    /// Train a model on a prepared directory.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Write the N×K forecast for one anchor as CSV.
    Predict(PredictArgs),
    /// Compare analytic gradients of a toy model against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic raw dataset.
    Synth(SynthArgs),
    /// Write per-sensor predicted-vs-actual series as CSV and SVG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Raw data directory (flow.csv or flow.bin + flow.json, sensors.txt, edges.csv).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output directory for the prepared dataset.
    #[arg(long)]
    out_dir: PathBuf,
    /// Data config file (TOML or JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Flow table; `.bin` files read their sidecar from the same stem with `.json`.
    #[arg(long)]
    flow: Option<PathBuf>,
    #[arg(long)]
    sensors: Option<PathBuf>,
    #[arg(long)]
    edges: Option<PathBuf>,
    /// Optional full pairwise distance table (CSV: from,to,distance).
    #[arg(long)]
    distances: Option<PathBuf>,
    /// W1 sparsity threshold.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, value_parser = ["connected_only", "full_kernel"])]
    w1_mode: Option<String>,
    /// Neighbors per node in the aggregation step.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Prepared data directory.
    #[arg(long)]
    data_dir: PathBuf,
    /// Run directory for the log and checkpoints.
    #[arg(long)]
    out_dir: PathBuf,
    /// Training config file (TOML or JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lambda: Option<usize>,
    #[arg(long)]
    temporal_dim: Option<usize>,
    #[arg(long)]
    spatial_dim: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    val_max_windows: Option<usize>,
    #[arg(long, conflicts_with = "no_clip")]
    clip_norm: Option<f64>,
    /// Disable gradient clipping.
    #[arg(long)]
    no_clip: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
    /// Also write `metrics_<split>.json` here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
    /// Also score the same-time-last-week baseline.
    #[arg(long)]
    baseline: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Series index of the first predicted step.
    #[arg(long)]
    anchor: usize,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = MODEL_STEP)]
    step: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    nodes: usize,
    #[arg(long, default_value_t = 14)]
    days: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Noise standard deviation in vehicles per step.
    #[arg(long)]
    noise: Option<f64>,
    /// Write flow.bin + flow.json instead of flow.csv.
    #[arg(long)]
    dense: bool,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
    /// Forecast step to plot (1-based).
    #[arg(long, default_value_t = 12)]
    horizon: usize,
    /// Sensor ids to plot; the first few sensors by default.
    #[arg(long, value_delimiter = ',')]
    sensors: Vec<String>,
    #[arg(long, default_value_t = 4)]
    max_sensors: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => cmd_prepare(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn require_file(path: &Path) -> Result<()> {
    ensure!(path.is_file(), "no such file: {}", path.display());
    Ok(())
}

fn cmd_prepare(a: PrepareArgs) -> Result<ExitCode> {
    let mut config = match &a.config {
        Some(p) => DataConfig::load(p)?,
        None => DataConfig::default(),
    };
    if let Some(e) = a.epsilon {
        config.graph.epsilon = e;
    }
    if let Some(m) = &a.w1_mode {
        config.graph.w1_mode = if m == "full_kernel" {
            W1Mode::FullKernel
        } else {
            W1Mode::ConnectedOnly
        };
    }
    if let Some(k) = a.k {
        config.k = k;
    }

    let dir = a.data_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let dense = !dir.join(SYNTH_FLOW_CSV).exists() && dir.join(SYNTH_FLOW_BIN).exists();
    let mut inputs = PrepareInputs::synth_layout(&dir, dense);
    if a.data_dir.is_none() && (a.flow.is_none() || a.sensors.is_none() || a.edges.is_none()) {
        bail!("give --data-dir or all of --flow, --sensors and --edges");
    }
    if let Some(f) = a.flow {
        inputs.flow = if f.extension().is_some_and(|e| e == "bin") {
            FlowInput::Dense {
                sidecar: f.with_extension("json"),
                bin: f,
            }
        } else {
            FlowInput::Csv(f)
        };
    }
    if let Some(s) = a.sensors {
        inputs.sensors = s;
    }
    if let Some(e) = a.edges {
        inputs.edges = e;
    }
    inputs.distances = a.distances;
    match &inputs.flow {
        FlowInput::Csv(p) => require_file(p)?,
        FlowInput::Dense { bin, sidecar } => {
            require_file(bin)?;
            require_file(sidecar)?;
        }
    }
    require_file(&inputs.sensors)?;
    require_file(&inputs.edges)?;
    if let Some(d) = &inputs.distances {
        require_file(d)?;
    }

    let m = prepare(&inputs, &config, &a.out_dir)?;
    info!(
        "{} sensors, {} steps, {} missing; windows train/val/test = {}/{}/{}",
        m.n_nodes, m.steps, m.missing_steps, m.train.windows, m.val.windows, m.test.windows
    );
    println!("config_hash {}", m.config_hash);
    Ok(ExitCode::SUCCESS)
}

fn load_dataset(dir: &Path) -> Result<PreparedDataset> {
    require_file(&dir.join("manifest.json")).context("not a prepared data directory")?;
    PreparedDataset::load(dir).with_context(|| format!("loading {}", dir.display()))
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let ds = load_dataset(&a.data_dir)?;
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag { cfg.$field = v; })*
        };
    }
    set!(seed => seed, epochs => max_epochs, batch_size => batch_size, lr => learning_rate,
         lr_decay => lr_decay, patience => patience, lambda => lambda, temporal_dim => temporal_dim,
         spatial_dim => spatial_dim, k => k, train_fraction => train_fraction);
    if a.val_max_windows.is_some() {
        cfg.val_max_windows = a.val_max_windows;
    }
    if a.clip_norm.is_some() {
        cfg.clip_norm = a.clip_norm;
    }
    if a.no_clip {
        cfg.clip_norm = None;
    }
    ensure!(
        cfg.horizon == ds.manifest.config.layout.horizon,
        "config horizon {} does not match the prepared horizon {}",
        cfg.horizon,
        ds.manifest.config.layout.horizon
    );

    std::fs::create_dir_all(&a.out_dir)?;
    std::fs::write(a.out_dir.join("train_config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let ops = GraphOperators::from_graph(&ds.graph, cfg.k)?;
    let norm = ds.manifest.norm_stats.clone();
    let data = TrainData {
        train: &ds.train,
        val: &ds.val,
        ops: &ops,
        norm: &norm,
    };

    let mut log = BufWriter::new(File::create(a.out_dir.join("train_log.jsonl"))?);
    let mut log_err = None;
    let mut on_epoch = |r: &EpochRecord| {
        info!(
            "epoch {:>4}  train_loss {:.5}  val_mae {:.4}  lr {:.2e}  {} ms",
            r.epoch, r.train_loss, r.val_mae, r.lr, r.wall_ms
        );
        let res = serde_json::to_writer(&mut log, r)
            .map_err(anyhow::Error::from)
            .and_then(|_| writeln!(log).map_err(Into::into))
            .and_then(|_| log.flush().map_err(Into::into));
        if let Err(e) = res {
            log_err.get_or_insert(e);
        }
    };
    let out = train(&data, &cfg, &mut on_epoch)?;
    if let Some(e) = log_err {
        return Err(e.context("writing train_log.jsonl"));
    }

    let hash = Some(ds.manifest.config_hash.clone());
    let best_val = out.best_val_mae.is_finite().then_some(out.best_val_mae);
    let ckpt = Checkpoint::new(out.model, Some(cfg), hash, out.best_epoch, best_val);
    std::fs::write(
        a.out_dir.join("train_summary.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "best_epoch": out.best_epoch,
            "best_val_mae": best_val,
            "epochs_run": out.history.len(),
            "stop": out.stop,
        }))?,
    )?;
    if let StopReason::Diverged { epoch } = out.stop {
        let path = a.out_dir.join("last_good.ckpt");
        ckpt.save(&path)?;
        bail!(
            "training diverged at epoch {epoch}; last good parameters saved to {}",
            path.display()
        );
    }
    let path = a.out_dir.join("best.ckpt");
    ckpt.save(&path)?;
    println!(
        "best epoch {} val_mae {:.4}; checkpoint {}",
        out.best_epoch,
        out.best_val_mae,
        path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_matching(data_dir: &Path, checkpoint: &Path) -> Result<(PreparedDataset, Checkpoint, GraphOperators)> {
    require_file(checkpoint)?;
    let ds = load_dataset(data_dir)?;
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    ckpt.require_dataset(&ds.manifest.config_hash)?;
    let mc = ckpt.model_config();
    ensure!(
        mc.window == ds.manifest.config.layout.window_len() && mc.features == ds.manifest.features,
        "checkpoint expects {}×{} windows, dataset has {}×{}",
        mc.features,
        mc.window,
        ds.manifest.features,
        ds.manifest.config.layout.window_len()
    );
    let ops = GraphOperators::from_graph(&ds.graph, mc.k)?;
    Ok((ds, ckpt, ops))
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<ExitCode> {
    let (ds, ckpt, ops) = load_matching(&a.data_dir, &a.checkpoint)?;
    let src = ds.split(&a.split)?;
    let norm = &ds.manifest.norm_stats;
    let report = evaluate(&ckpt.model, &ops, src, norm, ds.manifest.step_minutes)?;
    let baseline = if a.baseline {
        let (p, t) = historical_average(src, norm)?;
        Some(MetricsReport::from_predictions(
            &p,
            &t,
            ckpt.model_config().horizon,
            ds.manifest.step_minutes,
        )?)
    } else {
        None
    };
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir)?;
        let body = serde_json::json!({ "split": a.split, "model": report, "historical_average": baseline });
        std::fs::write(dir.join(format!("metrics_{}.json", a.split)), serde_json::to_string_pretty(&body)?)?;
    }
    if a.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&serde_json::json!({ "model": report, "historical_average": baseline }))?
        );
    } else {
        println!("{} split, {} windows", a.split, src.len());
        print!("{}", report.table());
        if let Some(b) = &baseline {
            println!("\nhistorical average (same time last week)");
            print!("{}", b.table());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_predict(a: PredictArgs) -> Result<ExitCode> {
    let (ds, ckpt, ops) = load_matching(&a.data_dir, &a.checkpoint)?;
    let layout = ds.manifest.config.layout;
    let src = WindowSource::new(Arc::clone(&ds.normalized), layout, vec![a.anchor])
        .with_context(|| format!("anchor must be in {}..={}", layout.warmup(), ds.manifest.steps - layout.horizon))?;
    let (pred, _) = predict_split(&ckpt.model, &ops, &src, &ds.manifest.norm_stats)?;
    let k = ckpt.model_config().horizon;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    let header: Vec<String> = (1..=k).map(|h| format!("t+{h}")).collect();
    writeln!(out, "sensor_id,{}", header.join(","))?;
    for (node, id) in ds.graph.node_ids().iter().enumerate() {
        let row: Vec<String> = pred[0][node * k..(node + 1) * k].iter().map(|v| format!("{v:.6}")).collect();
        writeln!(out, "{id},{}", row.join(","))?;
    }
    out.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let report = model_gradcheck_with_step(a.seed, a.step)?;
    for p in &report.params {
        println!("{:<32} {:>6} entries  max rel. error {:.3e}", p.name, p.entries, p.max_rel_error);
    }
    let ok = report.max_rel_error < GRADCHECK_TOLERANCE;
    println!(
        "max relative error {:.3e} ({} {GRADCHECK_TOLERANCE:e})",
        report.max_rel_error,
        if ok { "<" } else { ">=" }
    );
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode> {
    let mut params = SynthParams::default();
    if let Some(n) = a.noise {
        params.noise_std = n;
    }
    let d = synth_generate(a.nodes, a.days, a.seed, &params)?;
    d.write(&a.out_dir, a.dense)?;
    println!(
        "{} sensors, {} steps, {} edges written to {}",
        a.nodes,
        d.series.len(),
        d.edges.len(),
        a.out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_plot(a: PlotArgs) -> Result<ExitCode> {
    let (ds, ckpt, ops) = load_matching(&a.data_dir, &a.checkpoint)?;
    let k = ckpt.model_config().horizon;
    ensure!((1..=k).contains(&a.horizon), "--horizon must be in 1..={k}");
    let src = ds.split(&a.split)?;
    let (pred, target) = predict_split(&ckpt.model, &ops, src, &ds.manifest.norm_stats)?;
    let ids = ds.graph.node_ids();
    let nodes: Vec<usize> = if a.sensors.is_empty() {
        (0..ids.len().min(a.max_sensors)).collect()
    } else {
        a.sensors
            .iter()
            .map(|s| ids.iter().position(|i| i == s).with_context(|| format!("unknown sensor {s}")))
            .collect::<Result<_>>()?
    };
    std::fs::create_dir_all(&a.out_dir)?;
    let h = a.horizon - 1;
    for &node in &nodes {
        let id = &ids[node];
        let mut csv = BufWriter::new(File::create(a.out_dir.join(format!("sensor_{id}.csv")))?);
        writeln!(csv, "step,timestamp,actual,predicted")?;
        let mut actual = Vec::with_capacity(src.len());
        let mut predicted = Vec::with_capacity(src.len());
        for (i, &anchor) in src.anchors().iter().enumerate() {
            let t = anchor + h;
            let (y, p) = (target[i][node * k + h], pred[i][node * k + h]);
            writeln!(csv, "{t},{},{y:.6},{p:.6}", ds.series.timestamp(t).format("%Y-%m-%d %H:%M:%S"))?;
            actual.push(y);
            predicted.push(p);
        }
        csv.flush()?;
        let title = format!(
            "sensor {id}, {} split, {} min ahead",
            a.split,
            a.horizon as i64 * ds.manifest.step_minutes
        );
        std::fs::write(a.out_dir.join(format!("sensor_{id}.svg")), svg(&title, &actual, &predicted))?;
    }
    println!("{} sensors plotted to {}", nodes.len(), a.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn svg(title: &str, actual: &[f64], predicted: &[f64]) -> String {
    let (w, h, pad) = (960.0, 320.0, 36.0);
    let lo = actual.iter().chain(predicted).copied().fold(f64::INFINITY, f64::min);
    let hi = actual.iter().chain(predicted).copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = actual.len().max(2) - 1;
    let line = |ys: &[f64]| -> String {
        ys.iter()
            .enumerate()
            .map(|(i, y)| {
                let x = pad + (w - 2.0 * pad) * i as f64 / n as f64;
                let y = h - pad - (h - 2.0 * pad) * (y - lo) / span;
                format!("{x:.1},{y:.1}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">
<rect width="100%" height="100%" fill="white"/>
<text x="{pad}" y="22" font-family="sans-serif" font-size="14">{title}</text>
<text x="{lx}" y="22" font-family="sans-serif" font-size="12" fill="#444">actual</text>
<text x="{lx2}" y="22" font-family="sans-serif" font-size="12" fill="#d62728">predicted</text>
<text x="4" y="{ytop}" font-family="sans-serif" font-size="10">{hi:.0}</text>
<text x="4" y="{ybot}" font-family="sans-serif" font-size="10">{lo:.0}</text>
<polyline fill="none" stroke="#444" stroke-width="1" points="{a}"/>
<polyline fill="none" stroke="#d62728" stroke-width="1" points="{p}"/>
</svg>
"##,
        lx = w - 170.0,
        lx2 = w - 110.0,
        ytop = pad,
        ybot = h - pad,
        a = line(actual),
        p = line(predicted),
    )
}
