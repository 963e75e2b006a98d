//! The training loop: schedule, checkpoints, metrics and the final evaluation.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use skd_autodiff::{adam_step, AdamState, Tensor};

use super::config::{Networks, TrainConfig};
use super::step::{compute_step, PreparedScene};
use crate::error::{CoreError, Result};
use crate::eval::{evaluate_scenes, write_report, EvalOptions, EvalReport, Network};
use crate::losses::LossBreakdown;
use crate::model::{file_checksum, Checkpoint, Model, ModelConfig, ModelParams};
use crate::scenes::{load_split, SceneConfig};
use crate::strategy::{
    distillation_losses, transfer_modulations, StrategyOptions, TransferModulation,
};

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const REPORT_FILE: &str = "report.json";

/// Everything needed to reproduce a run, echoed into its directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl RunConfig {
    pub const FILE: &'static str = "config.json";

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|source| CoreError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("run config serializes");
        fs::write(path, json).map_err(|e| CoreError::io(path, e))
    }

    /// The model config for scenes generated with `scene`; must equal the recorded one.
    pub fn model_config(&self, scene: &SceneConfig) -> Result<ModelConfig> {
        let cfg = ModelConfig::new(self.train.arch.clone(), scene)?;
        if cfg != self.model {
            return Err(CoreError::Checksum {
                what: "model config of dataset vs run".into(),
                expected: self.model.checksum(),
                found: cfg.checksum(),
            });
        }
        Ok(cfg)
    }

    /// The network evaluated for this run: the MDN unless only the DSN was trained.
    pub fn report_network(&self) -> Network {
        match self.train.networks {
            Networks::DsnOnly => Network::Dsn,
            _ => Network::Mdn,
        }
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub l_ud: f64,
    pub l_dep: f64,
    pub l_base: f64,
    pub l_proj_dsn: f64,
    pub l_proj_mdn: f64,
    pub f_dsn: f64,
    pub f_mdn: f64,
    pub total: f64,
}

impl MetricsRow {
    fn new(step: u64, epoch: usize, lr: f64, b: &LossBreakdown) -> Self {
        Self {
            step,
            epoch,
            lr,
            l_ud: b.l_ud,
            l_dep: b.l_dep,
            l_base: b.l_base,
            l_proj_dsn: b.l_proj_dsn,
            l_proj_mdn: b.l_proj_mdn,
            f_dsn: b.f_dsn,
            f_mdn: b.f_mdn,
            total: b.total,
        }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .map(|r| r.map_err(|e| CoreError::contract(format!("{}: {e}", path.display()))))
        .collect()
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let csv_err = |e: csv::Error| CoreError::contract(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record([
            "step",
            "epoch",
            "lr",
            "l_ud",
            "l_dep",
            "l_base",
            "l_proj_dsn",
            "l_proj_mdn",
            "f_dsn",
            "f_mdn",
            "total",
        ])
        .map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

/// Scene order of an epoch, a pure function of (seed, epoch).
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut h = Sha256::new();
    h.update(b"skd-shuffle");
    h.update(seed.to_le_bytes());
    h.update((epoch as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from the newest epoch checkpoint in the run directory.
    pub resume: bool,
    /// Return after this many completed epochs, as if interrupted.
    pub stop_after: Option<usize>,
    /// Skip the final evaluation.
    pub skip_eval: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub steps: u64,
    pub epochs_completed: usize,
    /// `None` when stopped early.
    pub final_checkpoint: Option<PathBuf>,
    pub report: Option<EvalReport>,
}

struct Trainer {
    params: ModelParams,
    adam: AdamState,
    modulation: Box<dyn TransferModulation>,
    step: u64,
    epoch: usize,
}

impl Trainer {
    fn checkpoint(&self, model_cfg: &ModelConfig) -> Checkpoint {
        let mut state = vec![(
            "adam.step".to_string(),
            Tensor::scalar(self.adam.step as f64),
        )];
        for (name, (m, v)) in self
            .params
            .names()
            .iter()
            .zip(self.adam.m.iter().zip(&self.adam.v))
        {
            state.push((format!("adam.m.{name}"), m.clone()));
            state.push((format!("adam.v.{name}"), v.clone()));
        }
        let mstate = self.modulation.state();
        if !mstate.is_empty() {
            state.push(("modulation".to_string(), Tensor::vector(mstate)));
        }
        Checkpoint {
            config_checksum: model_cfg.checksum(),
            step: self.step,
            epoch: self.epoch as u64,
            params: self.params.clone(),
            state,
        }
    }

    fn restore(&mut self, ckpt: Checkpoint) -> Result<()> {
        let missing =
            |n: &str| CoreError::contract(format!("checkpoint lacks training state '{n}'"));
        let step = ckpt
            .state_tensor("adam.step")
            .ok_or_else(|| missing("adam.step"))?;
        self.adam.step = step.item() as u64;
        for (i, name) in ckpt.params.names().iter().enumerate() {
            let m = format!("adam.m.{name}");
            let v = format!("adam.v.{name}");
            self.adam.m[i] = ckpt.state_tensor(&m).ok_or_else(|| missing(&m))?.clone();
            self.adam.v[i] = ckpt.state_tensor(&v).ok_or_else(|| missing(&v))?.clone();
        }
        let mstate = ckpt
            .state_tensor("modulation")
            .map(|t| t.data().to_vec())
            .unwrap_or_default();
        self.modulation.restore(&mstate)?;
        self.step = ckpt.step;
        self.epoch = ckpt.epoch as usize;
        self.params = ckpt.params;
        Ok(())
    }
}

fn newest_epoch_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in entries {
        let path = entry.map_err(|e| CoreError::io(dir, e))?.path();
        let epoch = path.file_name().and_then(|n| n.to_str()).and_then(|n| {
            n.strip_prefix("epoch_")?
                .strip_suffix(".ckpt")?
                .parse::<usize>()
                .ok()
        });
        if let Some(e) = epoch {
            if best.as_ref().is_none_or(|(b, _)| e > *b) {
                best = Some((e, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Train on `data/<train_split>`, writing everything into `out`.
pub fn run_training(
    cfg: &TrainConfig,
    data: &Path,
    out: &Path,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let (train_meta, train_scenes) = load_split(data, &cfg.train_split)?;
    if train_scenes.is_empty() {
        return Err(CoreError::contract("training split is empty"));
    }
    let model_cfg = ModelConfig::new(cfg.arch.clone(), &train_meta.config)?;
    let run_cfg = RunConfig {
        train: cfg.clone(),
        model: model_cfg.clone(),
    };
    fs::create_dir_all(out).map_err(|e| CoreError::io(out, e))?;
    let cfg_path = out.join(RunConfig::FILE);
    if opts.resume {
        let recorded = RunConfig::load(&cfg_path)?;
        if recorded != run_cfg {
            return Err(CoreError::contract(format!(
                "{} differs from the requested run; refusing to resume",
                cfg_path.display()
            )));
        }
    } else {
        run_cfg.save(&cfg_path)?;
    }

    let model = Model::new(model_cfg.clone())?;
    let prepared: Vec<PreparedScene> = train_scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| PreparedScene::new(&model, i, s))
        .collect::<Result<_>>()?;
    drop(train_scenes);

    let sopts = StrategyOptions {
        alpha: cfg.alpha,
        ema_decay: cfg.tms_ema.unwrap_or(StrategyOptions::default().ema_decay),
        ..StrategyOptions::default()
    };
    let distillation = distillation_losses().create(cfg.distillation_name(), &sopts)?;
    let params = ModelParams::init(&model_cfg, cfg.seed)?;
    let mut tr = Trainer {
        adam: AdamState::new(params.tensors()),
        params,
        modulation: transfer_modulations().create(cfg.modulation_name(), &sopts)?,
        step: 0,
        epoch: 0,
    };

    let metrics_path = out.join(METRICS_FILE);
    let mut rows = Vec::new();
    if opts.resume {
        if let Some(path) = newest_epoch_checkpoint(out)? {
            log::info!("resuming from {}", path.display());
            tr.restore(Checkpoint::load(&path, &model_cfg)?)?;
            rows = read_metrics(&metrics_path)?;
            rows.retain(|r| r.step <= tr.step);
        }
    }
    write_metrics(&metrics_path, &rows)?;

    let spe = cfg.steps_per_epoch(prepared.len());
    let adam_cfg = cfg.adam.into();
    while tr.epoch < cfg.epochs {
        let epoch = tr.epoch;
        let order = epoch_order(cfg.seed, epoch, prepared.len());
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedScene> = chunk.iter().map(|&i| &prepared[i]).collect();
            let lr = cfg.lr_at(tr.step, spe);
            let out = compute_step(
                tr.step,
                &model,
                &tr.params,
                &batch,
                cfg.networks,
                distillation.as_ref(),
                tr.modulation.as_mut(),
            )?;
            adam_step(
                tr.params.tensors_mut(),
                &out.gradients,
                &mut tr.adam,
                lr,
                &adam_cfg,
            )?;
            tr.step += 1;
            if tr.step.is_multiple_of(cfg.log_every as u64) {
                rows.push(MetricsRow::new(tr.step, epoch, lr, &out.breakdown));
            }
        }
        tr.epoch += 1;
        write_metrics(&metrics_path, &rows)?;
        if let Some(last) = rows.last() {
            log::info!(
                "epoch {}/{} step {} lr {:.2e} total {:.4} l_ud {:.4} l_dep {:.4} l_base {:.4} f {:.3}/{:.3}",
                tr.epoch,
                cfg.epochs,
                tr.step,
                last.lr,
                last.total,
                last.l_ud,
                last.l_dep,
                last.l_base,
                last.f_dsn,
                last.f_mdn
            );
        }
        if tr.epoch.is_multiple_of(cfg.checkpoint_every) || tr.epoch == cfg.epochs {
            tr.checkpoint(&model_cfg)
                .save(&out.join(epoch_checkpoint_name(tr.epoch)))?;
        }
        if opts.stop_after == Some(tr.epoch) && tr.epoch < cfg.epochs {
            return Ok(RunOutcome {
                steps: tr.step,
                epochs_completed: tr.epoch,
                final_checkpoint: None,
                report: None,
            });
        }
    }

    let final_path = out.join(FINAL_CHECKPOINT);
    tr.checkpoint(&model_cfg).save(&final_path)?;
    let report = if opts.skip_eval {
        None
    } else {
        let (_, val_scenes) = load_split(data, &cfg.val_split)?;
        let eval_opts = EvalOptions {
            mode: cfg.eval_mode.clone(),
            network: run_cfg.report_network(),
            include_dsn: cfg.networks == Networks::Both,
            detections_dir: Some(out.join("detections")),
        };
        let report = evaluate_scenes(
            &model,
            &tr.params,
            &cfg.val_split,
            &val_scenes,
            file_checksum(&final_path)?,
            &eval_opts,
        )?;
        write_report(&out.join(REPORT_FILE), &report)?;
        Some(report)
    };
    Ok(RunOutcome {
        steps: tr.step,
        epochs_completed: tr.epoch,
        final_checkpoint: Some(final_path),
        report,
    })
}
