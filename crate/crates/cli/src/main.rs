//! `coopdet`: scene generation, training, ablations, robustness sweeps and
//! offline evaluation from the command line.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use coopdet::eval::{evaluate, EvalReport};
use coopdet::geometry::View;
use coopdet::io::checkpoint::ParamMap;
use coopdet::io::records::read_proposals;
use coopdet::io::scene_dir::read_scene;
use coopdet::pipeline::artifacts::write_json;
use coopdet::pipeline::bench::{
    benchmark_scenes, evaluate_detector, load_benchmark, run_ablation, run_robustness, run_variant, score_detectors,
    write_benchmark, GtEvaluator, VariantResult,
};
use coopdet::pipeline::train::build_observations;
use coopdet::pipeline::{resume_training, run_training, LabelEvaluator, PipelineConfig, OUT_DIR_ENV};
use coopdet::scenesim::{PoseNoise, Scene};
use coopdet::weakdet::DetectorModel;
use serde_json::json;

#[derive(Parser)]
#[command(name = "coopdet", version, about = "Label-free cooperative 3D vehicle detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a training and a held-out scene into <out>/train and <out>/test.
    GenScenes(Common),
    /// Self-train both detectors and write the run artifacts.
    Run(RunArgs),
    /// Train once per component combination and tabulate the results.
    Ablate(Common),
    /// Train, then score detectors on the held-out scene under pose noise and latency.
    Robustness(RobustnessArgs),
    /// Score a pseudo-label file or a detector checkpoint against a scene.
    Eval(EvalArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short, env = OUT_DIR_ENV)]
    out: Option<PathBuf>,
    /// Seeds both the scene generator and the pipeline.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Frames in the training scene.
    #[arg(long)]
    frames: Option<usize>,
    /// Frames in the held-out scene.
    #[arg(long)]
    test_frames: Option<usize>,
    /// Read scenes from <dir>/train and <dir>/test instead of generating them.
    #[arg(long)]
    scene_dir: Option<PathBuf>,
    /// Dotted-path override such as `schedule.tau_max=0.3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    no_ppf: bool,
    #[arg(long)]
    no_pps: bool,
    #[arg(long)]
    no_ccl: bool,
    /// Pin the pseudo-label threshold instead of scheduling it.
    #[arg(long)]
    fixed_tau: Option<f64>,
    /// Continue the run in --out from its last completed iteration.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct RobustnessArgs {
    #[command(flatten)]
    common: Common,
    /// Translation noise std (m).
    #[arg(long, default_value_t = 0.2)]
    sigma: f64,
    /// Yaw noise std (degrees).
    #[arg(long, default_value_t = 0.2)]
    yaw_sigma: f64,
    /// Latency in frames.
    #[arg(long, default_value_t = 1)]
    delay: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Scene directory holding frames/ and ground truth.
    #[arg(long)]
    scene: PathBuf,
    /// Proposal CSV, e.g. a pseudo-label file.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    labels: Option<PathBuf>,
    /// Detector checkpoint to run on the scene.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ViewArg::Multi)]
    view: ViewArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ViewArg {
    Multi,
    Ego,
}

impl From<ViewArg> for View {
    fn from(v: ViewArg) -> Self {
        match v {
            ViewArg::Multi => View::Multi,
            ViewArg::Ego => View::Ego,
        }
    }
}

/// Bad flags or configuration; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenScenes(c) => gen_scenes(&c),
        Command::Run(a) => run(&a),
        Command::Ablate(c) => ablate(&c),
        Command::Robustness(a) => robustness(&a),
        Command::Eval(a) => eval(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn load_config(c: &Common) -> Result<PipelineConfig> {
    let base = match &c.config {
        Some(p) => PipelineConfig::load(p).map_err(|e| usage(format!("config: {e}")))?,
        None => PipelineConfig::default(),
    };
    let mut cfg = if c.sets.is_empty() {
        base
    } else {
        let mut table: toml::Table = toml::from_str(&base.to_toml_string()).expect("config round-trips");
        for s in &c.sets {
            apply_set(&mut table, s)?;
        }
        let text = toml::to_string(&table).expect("table serializes");
        PipelineConfig::from_toml_str(&text).map_err(|e| usage(format!("--set: {e}")))?
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.scene.rng_seed = s;
    }
    if let Some(n) = c.iterations {
        cfg.iterations = n;
    }
    if let Some(n) = c.epochs {
        cfg.epochs = n;
    }
    if let Some(n) = c.frames {
        cfg.scene.num_frames = n;
    }
    if let Some(n) = c.test_frames {
        cfg.test_frames = n;
    }
    if let Some(d) = &c.scene_dir {
        cfg.scene_dir = Some(d.clone());
    }
    if let Some(d) = &c.out {
        cfg.output_dir = Some(d.clone());
    }
    cfg.validate().map_err(|e| usage(format!("config: {e}")))?;
    Ok(cfg)
}

/// Sets `a.b.c = value` in `table`. The value is parsed as a TOML literal and
/// falls back to a bare string.
fn apply_set(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| usage(format!("--set {assignment}: expected KEY=VALUE")))?;
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| usage("--set: empty key"))?;
    let mut t = table;
    for p in parts {
        t = t
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| usage(format!("--set {key}: `{p}` is not a table")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

fn require_out(cfg: &PipelineConfig) -> Result<PathBuf> {
    cfg.output_dir
        .clone()
        .ok_or_else(|| usage(format!("an output directory is required (--out or {OUT_DIR_ENV})")))
}

fn scenes(cfg: &PipelineConfig) -> Result<(Scene, Scene)> {
    load_benchmark(cfg).context("loading scenes")
}

fn has_gt(scene: &Scene) -> bool {
    !scene.ground_truth.boxes.is_empty()
}

fn gen_scenes(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let out = require_out(&cfg)?;
    let (train, test) = benchmark_scenes(&cfg).context("scene generation")?;
    write_benchmark(&out, &train, &test).context("writing scenes")?;
    log::info!(
        "wrote {} training and {} held-out frames to {}",
        train.frames.len(),
        test.frames.len(),
        out.display()
    );
    Ok(())
}

fn run(a: &RunArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    cfg.toggles.ppf &= !a.no_ppf;
    cfg.toggles.pps &= !a.no_pps;
    cfg.toggles.ccl &= !a.no_ccl;
    if a.fixed_tau.is_some() {
        cfg.schedule.fixed_tau = a.fixed_tau;
    }
    cfg.validate().map_err(|e| usage(format!("config: {e}")))?;
    let out = require_out(&cfg)?;
    let (train, test) = scenes(&cfg)?;
    let ev = GtEvaluator { gt: &train.ground_truth };
    let evaluator: Option<&dyn LabelEvaluator> = if has_gt(&train) { Some(&ev) } else { None };
    log::info!("training {} ({} frames)", cfg.toggles.label(), train.frames.len());
    let outcome = if a.resume {
        resume_training(&cfg, &train.frames, evaluator).context("resuming training")?
    } else {
        run_training(&cfg, &train.frames, evaluator).context("training")?
    };
    let last = outcome.reports.last();
    let held_out = has_gt(&test).then(|| {
        json!({
            "initial": score_detectors(&cfg, &outcome.initial_multi, &outcome.initial_ego, &test.frames, &test.ground_truth),
            "refined": score_detectors(&cfg, &outcome.multi, &outcome.ego, &test.frames, &test.ground_truth),
        })
    });
    let summary = json!({
        "toggles": cfg.toggles.label(),
        "iterations": outcome.reports.len(),
        "final_tau": last.map(|r| r.tau),
        "final_pseudo_labels": last.map(|r| json!({"multi": r.multi, "ego": r.ego})),
        "held_out": held_out,
    });
    write_json(&out.join("summary.json"), &summary).context("writing summary")?;
    if let Some(r) = last.and_then(|r| r.multi.as_ref()) {
        println!("pseudo labels (multi): AP@0.3 {:.4}  AP@0.5 {:.4}", r.ap_03, r.ap_05);
    }
    if let Some(h) = &summary["held_out"].as_object() {
        for view in ["multi", "ego"] {
            println!(
                "held-out {view}: AP@0.5 {:.4} -> {:.4}",
                h["initial"][view]["ap_05"].as_f64().unwrap_or(f64::NAN),
                h["refined"][view]["ap_05"].as_f64().unwrap_or(f64::NAN)
            );
        }
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

fn require_gt(train: &Scene, test: &Scene) -> Result<()> {
    if !has_gt(train) || !has_gt(test) {
        bail!("this command needs ground truth in both the training and held-out scenes");
    }
    Ok(())
}

fn ablate(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let out = require_out(&cfg)?;
    let (train, test) = scenes(&cfg)?;
    require_gt(&train, &test)?;
    let rows = run_ablation(&cfg, &train, &test).context("ablation")?;
    write_ablation(&out, &rows)?;
    println!("{:<14} {:>5} {:>8} {:>8} {:>8}", "variant", "view", "AP@0.3", "AP@0.5", "label@0.5");
    for r in &rows {
        for (view, test, labels) in [("multi", &r.test.multi, &r.label_multi), ("ego", &r.test.ego, &r.label_ego)] {
            let l = labels.last().map_or(f64::NAN, |x| x.ap_05);
            println!("{:<14} {:>5} {:>8.4} {:>8.4} {:>8.4}", r.label, view, test.ap_03, test.ap_05, l);
        }
    }
    Ok(())
}

fn write_ablation(out: &Path, rows: &[VariantResult]) -> Result<()> {
    let mut csv = String::from("variant,view,ap_03,ap_05,precision_05,recall_05,initial_ap_05,label_ap_05\n");
    for r in rows {
        for (view, test, init, labels) in [
            ("multi", &r.test.multi, &r.initial.multi, &r.label_multi),
            ("ego", &r.test.ego, &r.initial.ego, &r.label_ego),
        ] {
            let l = labels.last().map_or(String::new(), |x| x.ap_05.to_string());
            csv.push_str(&format!(
                "{},{view},{},{},{},{},{},{l}\n",
                r.label, test.ap_03, test.ap_05, test.precision_05, test.recall_05, init.ap_05
            ));
        }
    }
    std::fs::write(out.join("ablation.csv"), csv).context("writing ablation.csv")?;
    write_json(&out.join("ablation.json"), &rows).context("writing ablation.json")
}

fn robustness(a: &RobustnessArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if !(a.sigma >= 0.0 && a.yaw_sigma >= 0.0) {
        return Err(usage("--sigma and --yaw-sigma must be non-negative"));
    }
    let out = require_out(&cfg)?;
    let (train, test) = scenes(&cfg)?;
    require_gt(&train, &test)?;
    cfg.output_dir = Some(out.join("train"));
    let (_, outcome) = run_variant(&cfg, &cfg.toggles.label(), &train, &test).context("training")?;
    let noise = PoseNoise {
        sigma_m: a.sigma,
        yaw_sigma_deg: a.yaw_sigma,
    };
    let rows = run_robustness(&cfg, &outcome.multi, &outcome.initial_multi, &test, &noise, a.delay);
    let mut csv = String::from("condition,detector,ap_03,ap_05,precision_05,recall_05\n");
    println!("{:<18} {:>10} {:>10}", "condition", "refined", "unrefined");
    for r in &rows {
        for (name, rep) in [("refined", &r.refined), ("unrefined", &r.unrefined)] {
            csv.push_str(&format!(
                "{},{name},{},{},{},{}\n",
                r.condition, rep.ap_03, rep.ap_05, rep.precision_05, rep.recall_05
            ));
        }
        println!("{:<18} {:>10.4} {:>10.4}", r.condition, r.refined.ap_05, r.unrefined.ap_05);
    }
    std::fs::write(out.join("robustness.csv"), csv).context("writing robustness.csv")?;
    write_json(&out.join("robustness.json"), &rows).context("writing robustness.json")
}

fn eval(a: &EvalArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let scene = read_scene(&a.scene).with_context(|| format!("reading scene {}", a.scene.display()))?;
    if !has_gt(&scene) {
        bail!("{} holds no ground truth", a.scene.display());
    }
    let view = View::from(a.view);
    let report: EvalReport = if let Some(path) = &a.labels {
        let sets: Vec<_> = read_proposals(path)
            .with_context(|| format!("reading labels {}", path.display()))?
            .into_iter()
            .filter(|s| s.view == view)
            .collect();
        evaluate(&sets, &scene.ground_truth)
    } else {
        let path = a.checkpoint.as_ref().expect("clap enforces labels or checkpoint");
        let model = ParamMap::load(path)
            .and_then(|m| DetectorModel::from_params(&m))
            .with_context(|| format!("loading checkpoint {}", path.display()))?;
        let views = build_observations(&scene.frames, cfg.scene.sensor_height);
        let obs = match view {
            View::Multi => &views.multi,
            View::Ego => &views.ego,
        };
        evaluate_detector(&model, obs, &scene.ground_truth, cfg.eta)
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}
