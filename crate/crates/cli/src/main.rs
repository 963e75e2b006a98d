//! `skd`: dataset generation, training, evaluation, inference and gradient checks.
//!
//! Exit codes: 0 success, 1 missing or unreadable file, 2 usage error,
//! 3 contract or data error, 4 numeric failure (non-finite loss, failed gradient check).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use skd_core::diagnostics::{
    generic_point, model_gradient_check, random_graph_checks, ModelCheckOptions,
};
use skd_core::eval::{evaluate_dataset, predict_scene, write_detections};
use skd_core::model::{Checkpoint, Model, ModelConfig, ModelParams};
use skd_core::scenes::{generate_scene, load_scene, read_meta, write_split, SceneConfig};
use skd_core::strategy::{proposal_sources, StrategyOptions};
use skd_core::trainer::{
    read_metrics, run_training, Networks, PreparedScene, RunConfig, RunOptions, TrainConfig,
};
use skd_core::CoreError;

const AUTODIFF_TOLERANCE: f64 = 1e-4;
const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Parser)]
#[command(
    name = "skd",
    version,
    about = "Self-distilled monocular 3D localization on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate dataset splits.
    GenData {
        /// Scene generator config (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated `name:count` pairs.
        #[arg(long, default_value = "train:200,val:50")]
        splits: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model.
    Train {
        /// Training config (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Distillation gradients are not modulated.
        #[arg(long)]
        no_tms: bool,
        /// Plain SmoothL1 distillation instead of the uncertainty-aware loss.
        #[arg(long)]
        no_ud: bool,
        #[arg(long, conflicts_with = "dsn_only")]
        mdn_only: bool,
        #[arg(long)]
        dsn_only: bool,
        #[arg(long)]
        detach_ud_denominator: bool,
        /// Smooth the modulation losses with this EMA decay.
        #[arg(long)]
        tms_ema: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the newest epoch checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs, leaving a resumable run.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint and write report.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value = "gt-proposals")]
        mode: String,
        /// Output directory; the checkpoint's directory when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print decoded boxes for one scene and write its detection file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        scene: u64,
        #[arg(long, default_value = "gt-proposals")]
        mode: String,
        /// Output directory; `<run>/infer` when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    GradCheck {
        /// Random composite graphs to check.
        #[arg(long, default_value_t = 50)]
        graphs: usize,
        /// Sampled coordinates per model parameter tensor.
        #[arg(long, default_value_t = 10)]
        coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-emit a run's logged metrics.
    ExportMetrics {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

enum Failure {
    Core(CoreError),
    Numeric(String),
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        Self::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Core(CoreError::Io { .. }) => 1,
            Self::Core(CoreError::NonFiniteLoss { .. } | CoreError::Autodiff(_)) => 4,
            Self::Core(_) => 3,
            Self::Numeric(_) => 4,
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CoreError> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| CoreError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_splits(spec: &str) -> Result<Vec<(String, usize)>, CoreError> {
    spec.split(',')
        .map(|part| {
            let (name, count) = part
                .split_once(':')
                .ok_or_else(|| CoreError::contract(format!("split '{part}' is not name:count")))?;
            let count = count
                .trim()
                .parse()
                .map_err(|_| CoreError::contract(format!("split '{part}' has a bad count")))?;
            Ok((name.trim().to_string(), count))
        })
        .collect()
}

fn gen_data(
    config: Option<PathBuf>,
    out: &Path,
    splits: &str,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let mut cfg: SceneConfig = match config {
        Some(p) => read_json(&p)?,
        None => SceneConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    for (name, count) in parse_splits(splits)? {
        let meta = write_split(out, &cfg, &name, count)?;
        println!(
            "{name}: {} scenes, {} regenerated, checksum {}",
            meta.num_scenes,
            meta.regenerated.len(),
            meta.checksum
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: Option<PathBuf>,
    data: &Path,
    out: &Path,
    no_tms: bool,
    no_ud: bool,
    mdn_only: bool,
    dsn_only: bool,
    detach: bool,
    tms_ema: Option<f64>,
    seed: Option<u64>,
    epochs: Option<usize>,
    opts: RunOptions,
) -> Result<(), Failure> {
    let mut cfg: TrainConfig = match config {
        Some(p) => read_json(&p)?,
        None => TrainConfig::default(),
    };
    if no_tms {
        cfg.tms_enabled = false;
    }
    if no_ud {
        cfg.ud_enabled = false;
    }
    if mdn_only {
        cfg.networks = Networks::MdnOnly;
    }
    if dsn_only {
        cfg.networks = Networks::DsnOnly;
    }
    if detach {
        cfg.detach_ud_denominator = true;
    }
    if tms_ema.is_some() {
        cfg.tms_ema = tms_ema;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let start = Instant::now();
    let outcome = run_training(&cfg, data, out, &opts)?;
    println!(
        "trained {} epochs ({} steps) in {:.1}s",
        outcome.epochs_completed,
        outcome.steps,
        start.elapsed().as_secs_f64()
    );
    if let Some(path) = &outcome.final_checkpoint {
        println!("checkpoint {}", path.display());
    }
    if let Some(r) = &outcome.report {
        println!(
            "{} on {} ({}): AP_BEV@0.5 {:.4}  AP_3D@0.5 {:.4}  AP_BEV@0.7 {:.4}  AP_3D@0.7 {:.4}",
            r.network.as_str(),
            r.split,
            r.mode,
            r.ap_bev_05,
            r.ap_3d_05,
            r.ap_bev_07,
            r.ap_3d_07
        );
        if let Some(d) = &r.dsn {
            println!(
                "dsn on {}: AP_BEV@0.5 {:.4}  AP_3D@0.5 {:.4}",
                r.split, d.ap_bev_05, d.ap_3d_05
            );
        }
    }
    Ok(())
}

fn eval(
    checkpoint: &Path,
    data: &Path,
    split: &str,
    mode: &str,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let out = out.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
    let r = evaluate_dataset(checkpoint, data, split, mode, &out)?;
    println!(
        "{} on {} ({}), {} scenes, {} objects",
        r.network.as_str(),
        r.split,
        r.mode,
        r.num_scenes,
        r.num_gts
    );
    println!("AP_BEV@0.5 {:.4}  AP_3D@0.5 {:.4}", r.ap_bev_05, r.ap_3d_05);
    println!("AP_BEV@0.7 {:.4}  AP_3D@0.7 {:.4}", r.ap_bev_07, r.ap_3d_07);
    if let Some(d) = &r.dsn {
        println!(
            "dsn AP_BEV@0.5 {:.4}  AP_3D@0.5 {:.4}",
            d.ap_bev_05, d.ap_3d_05
        );
    }
    println!("report {}", out.join("report.json").display());
    Ok(())
}

fn infer(
    checkpoint: &Path,
    data: &Path,
    split: &str,
    index: u64,
    mode: &str,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let run_dir = checkpoint.parent().unwrap_or(Path::new("."));
    let run_cfg = RunConfig::load(&run_dir.join(RunConfig::FILE))?;
    let dir = data.join(split);
    let meta = read_meta(&dir)?;
    if index >= meta.num_scenes as u64 {
        return Err(CoreError::contract(format!(
            "scene {index} out of range (split has {})",
            meta.num_scenes
        ))
        .into());
    }
    let model_cfg = run_cfg.model_config(&meta.config)?;
    let ckpt = Checkpoint::load(checkpoint, &model_cfg)?;
    let model = Model::new(model_cfg)?;
    let scene = load_scene(&dir, &meta, index)?;
    let source = proposal_sources().create(mode, &StrategyOptions::default())?;
    let dets = predict_scene(
        &model,
        &ckpt.params,
        &scene,
        source.as_ref(),
        run_cfg.report_network(),
    )?;
    println!(
        "scene {index}: {} detections ({})",
        dets.len(),
        run_cfg.report_network().as_str()
    );
    for d in &dets {
        let b = &d.box3d;
        println!(
            "  x {:7.3} y {:7.3} z {:7.3}  h {:.3} w {:.3} l {:.3}  yaw {:+.3}  score {:.4}",
            b.x, b.y, b.z, b.h, b.w, b.l, b.theta, d.score
        );
    }
    let out = out.unwrap_or_else(|| run_dir.join("infer"));
    write_detections(
        &out,
        std::slice::from_ref(&scene),
        std::slice::from_ref(&dets),
    )?;
    println!("wrote {}", out.join(format!("{index:06}.txt")).display());
    Ok(())
}

fn grad_check(graphs: usize, coords: usize, seed: u64) -> Result<(), Failure> {
    let start = Instant::now();
    let reports = random_graph_checks(graphs, seed)?;
    let worst_graph = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let graph_fail = reports
        .iter()
        .filter(|r| !r.passes(AUTODIFF_TOLERANCE))
        .count();
    println!("{graphs} random graphs: max relative error {worst_graph:.3e} ({graph_fail} over {AUTODIFF_TOLERANCE:e})");

    let scene_cfg = SceneConfig {
        seed,
        ..SceneConfig::default()
    };
    let model_cfg = ModelConfig::new(Default::default(), &scene_cfg)?;
    let model = Model::new(model_cfg.clone())?;
    let params = generic_point(&ModelParams::init(&model_cfg, seed)?, seed);
    let scene = generate_scene(&scene_cfg, 0)?;
    let prepared = PreparedScene::new(&model, 0, &scene)?;
    let opts = ModelCheckOptions {
        coords_per_tensor: coords,
        seed,
        ..ModelCheckOptions::default()
    };
    let checks = model_gradient_check(&model, &params, &prepared, &opts)?;
    let mut model_fail = 0;
    for c in &checks {
        let ok = c.max_rel_error < MODEL_TOLERANCE;
        model_fail += usize::from(!ok);
        println!(
            "  {:<20} {:>3} coords  max rel err {:.3e}  {}",
            c.name,
            c.checked,
            c.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        );
    }
    println!(
        "{} parameter tensors, {model_fail} over {MODEL_TOLERANCE:e}; {:.1}s",
        checks.len(),
        start.elapsed().as_secs_f64()
    );
    if graph_fail + model_fail > 0 {
        return Err(Failure::Numeric(format!(
            "{graph_fail} graphs and {model_fail} tensors failed the gradient check"
        )));
    }
    Ok(())
}

fn export_metrics(run: &Path, format: Format) -> Result<(), Failure> {
    let rows = read_metrics(&run.join(skd_core::trainer::METRICS_FILE))?;
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match format {
        Format::Json => {
            let json = serde_json::to_string_pretty(&rows).expect("rows serialize");
            writeln!(lock, "{json}").ok();
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(lock);
            for r in &rows {
                w.serialize(r)
                    .map_err(|e| CoreError::contract(format!("writing metrics: {e}")))?;
            }
            w.flush().ok();
        }
    }
    Ok(())
}

fn configure_threads() {
    if let Some(n) = std::env::var("SKD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("SKD_THREADS ignored: {e}");
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    configure_threads();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            config,
            out,
            splits,
            seed,
        } => gen_data(config, &out, &splits, seed),
        Command::Train {
            config,
            data,
            out,
            no_tms,
            no_ud,
            mdn_only,
            dsn_only,
            detach_ud_denominator,
            tms_ema,
            seed,
            epochs,
            resume,
            stop_after,
        } => train(
            config,
            &data,
            &out,
            no_tms,
            no_ud,
            mdn_only,
            dsn_only,
            detach_ud_denominator,
            tms_ema,
            seed,
            epochs,
            RunOptions {
                resume,
                stop_after,
                skip_eval: false,
            },
        ),
        Command::Eval {
            checkpoint,
            data,
            split,
            mode,
            out,
        } => eval(&checkpoint, &data, &split, &mode, out),
        Command::Infer {
            checkpoint,
            data,
            split,
            scene,
            mode,
            out,
        } => infer(&checkpoint, &data, &split, scene, &mode, out),
        Command::GradCheck {
            graphs,
            coords,
            seed,
        } => grad_check(graphs, coords, seed),
        Command::ExportMetrics { run, format } => export_metrics(&run, format),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Core(e) => eprintln!("error: {e}"),
                Failure::Numeric(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}
