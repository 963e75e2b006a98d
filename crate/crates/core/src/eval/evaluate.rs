//! Inference over a split and the AP report.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use skd_autodiff::Tape;

use super::metrics::{ap_r40, match_detections, Detection};
use crate::error::{CoreError, Result};
use crate::geometry::{bev_iou, iou_3d, project_box3d_to_box2d, Box2D, Box3D};
use crate::model::{file_checksum, Checkpoint, Model, ModelParams};
use crate::scenes::{box_to_record, load_split, write_kitti_label, NumberFormat, Scene};
use crate::strategy::{proposal_sources, ProposalSource, StrategyOptions};
use crate::trainer::RunConfig;

/// The subnetwork whose boxes are reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Network {
    Mdn,
    Dsn,
}

impl Network {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mdn => "mdn",
            Self::Dsn => "dsn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ApSet {
    pub ap_bev_05: f64,
    pub ap_3d_05: f64,
    pub ap_bev_07: f64,
    pub ap_3d_07: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub split: String,
    pub network: Network,
    pub ap_bev_05: f64,
    pub ap_3d_05: f64,
    pub ap_bev_07: f64,
    pub ap_3d_07: f64,
    pub num_scenes: usize,
    pub num_gts: usize,
    pub checkpoint_checksum: String,
    /// DSN predictions on the same proposals, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dsn: Option<ApSet>,
}

impl EvalReport {
    pub fn aps(&self) -> ApSet {
        ApSet {
            ap_bev_05: self.ap_bev_05,
            ap_3d_05: self.ap_3d_05,
            ap_bev_07: self.ap_bev_07,
            ap_3d_07: self.ap_3d_07,
        }
    }
}

fn clip_to_image(b: &Box2D, image_size: [usize; 2]) -> Box2D {
    let [w, h] = image_size.map(|v| v as f64);
    Box2D {
        u_min: b.u_min.clamp(0.0, w),
        v_min: b.v_min.clamp(0.0, h),
        u_max: b.u_max.clamp(0.0, w),
        v_max: b.v_max.clamp(0.0, h),
    }
}

/// Detections of one network on one scene.
///
/// The score is the proposal objectness times `exp(-U)`, so confident boxes rank first.
pub fn predict_scene(
    model: &Model,
    params: &ModelParams,
    scene: &Scene,
    source: &dyn ProposalSource,
    network: Network,
) -> Result<Vec<Detection>> {
    let cfg = model.config();
    let mut tape = Tape::with_capacity(512);
    let bound = model.bind(&mut tape, params)?;
    let patches = model.patchify(&scene.features)?;
    let fg = model.encode(&mut tape, &bound, &patches)?;
    let twod = model.twod_forward(&mut tape, &bound, fg)?;
    let proposals = source.proposals(model, scene, tape.value(twod));
    let rois: Vec<Box2D> = proposals.iter().map(|p| p.roi).collect();
    let preds = match network {
        Network::Mdn => model.mdn_forward(&mut tape, &bound, fg, &rois)?,
        Network::Dsn => model.dsn_forward(&mut tape, &bound, fg, &rois)?.preds,
    };
    Ok(preds
        .predictions
        .iter()
        .zip(&proposals)
        .map(|(p, prop)| {
            let box2d = project_box3d_to_box2d(&p.decoded, &cfg.cam)
                .map(|b| clip_to_image(&b, cfg.image_size))
                .unwrap_or(prop.roi);
            Detection {
                box3d: p.decoded,
                box2d,
                score: prop.objectness * (-p.uncertainty).exp(),
            }
        })
        .collect())
}

/// AP at IoU 0.5 and 0.7 for BEV and volume overlap, pooled over scenes.
pub fn average_precisions(scenes: &[(Vec<Detection>, Vec<Box3D>)]) -> ApSet {
    let num_gt: usize = scenes.iter().map(|(_, g)| g.len()).sum();
    let ap = |iou: fn(&Box3D, &Box3D) -> f64, threshold: f64| {
        let scored: Vec<(f64, bool)> = scenes
            .iter()
            .flat_map(|(dets, gts)| {
                let flags = match_detections(dets, gts, iou, threshold);
                dets.iter()
                    .zip(flags)
                    .map(|(d, f)| (d.score, f))
                    .collect::<Vec<_>>()
            })
            .collect();
        ap_r40(&scored, num_gt).ap
    };
    ApSet {
        ap_bev_05: ap(bev_iou, 0.5),
        ap_3d_05: ap(iou_3d, 0.5),
        ap_bev_07: ap(bev_iou, 0.7),
        ap_3d_07: ap(iou_3d, 0.7),
    }
}

/// One 16-field KITTI file per scene, `NNNNNN.txt`.
pub fn write_detections(dir: &Path, scenes: &[Scene], detections: &[Vec<Detection>]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    for (scene, dets) in scenes.iter().zip(detections) {
        let mut text = String::new();
        for d in dets {
            let record = box_to_record(&d.box3d, &d.box2d, Some(d.score))?;
            text.push_str(&write_kitti_label(&record, NumberFormat::TwoDecimals));
            text.push('\n');
        }
        let path = dir.join(format!("{:06}.txt", scene.index));
        fs::write(&path, text).map_err(|e| CoreError::io(&path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub mode: String,
    pub network: Network,
    /// Also score DSN predictions on the same proposals.
    pub include_dsn: bool,
    pub detections_dir: Option<PathBuf>,
}

/// Evaluate loaded parameters on loaded scenes.
pub fn evaluate_scenes(
    model: &Model,
    params: &ModelParams,
    split: &str,
    scenes: &[Scene],
    checkpoint_checksum: String,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let source = proposal_sources().create(&opts.mode, &StrategyOptions::default())?;
    let run = |network: Network| -> Result<Vec<Vec<Detection>>> {
        scenes
            .par_iter()
            .map(|s| predict_scene(model, params, s, source.as_ref(), network))
            .collect()
    };
    let pair = |dets: &[Vec<Detection>]| -> Vec<(Vec<Detection>, Vec<Box3D>)> {
        dets.iter()
            .zip(scenes)
            .map(|(d, s)| (d.clone(), s.gt_boxes3d.clone()))
            .collect()
    };
    let dets = run(opts.network)?;
    let aps = average_precisions(&pair(&dets));
    if let Some(dir) = &opts.detections_dir {
        write_detections(dir, scenes, &dets)?;
    }
    let dsn = if opts.include_dsn && opts.network != Network::Dsn {
        Some(average_precisions(&pair(&run(Network::Dsn)?)))
    } else {
        None
    };
    Ok(EvalReport {
        mode: opts.mode.clone(),
        split: split.to_string(),
        network: opts.network,
        ap_bev_05: aps.ap_bev_05,
        ap_3d_05: aps.ap_3d_05,
        ap_bev_07: aps.ap_bev_07,
        ap_3d_07: aps.ap_3d_07,
        num_scenes: scenes.len(),
        num_gts: scenes.iter().map(|s| s.gt_boxes3d.len()).sum(),
        checkpoint_checksum,
        dsn,
    })
}

/// Evaluate a checkpoint file on a dataset split.
///
/// The run config is read from `config.json` beside the checkpoint. The
/// reported network is the MDN unless the run trained the DSN alone.
/// Detection files go to `out_dir/detections` and the report to `out_dir/report.json`.
pub fn evaluate_dataset(
    checkpoint: &Path,
    data: &Path,
    split: &str,
    mode: &str,
    out_dir: &Path,
) -> Result<EvalReport> {
    let run_dir = checkpoint.parent().unwrap_or(Path::new("."));
    let run_cfg = RunConfig::load(&run_dir.join(RunConfig::FILE))?;
    let (meta, scenes) = load_split(data, split)?;
    let model_cfg = run_cfg.model_config(&meta.config)?;
    let ckpt = Checkpoint::load(checkpoint, &model_cfg)?;
    let model = Model::new(model_cfg)?;
    let opts = EvalOptions {
        mode: mode.to_string(),
        network: run_cfg.report_network(),
        include_dsn: run_cfg.train.networks == crate::trainer::Networks::Both,
        detections_dir: Some(out_dir.join("detections")),
    };
    let report = evaluate_scenes(
        &model,
        &ckpt.params,
        split,
        &scenes,
        file_checksum(checkpoint)?,
        &opts,
    )?;
    write_report(&out_dir.join("report.json"), &report)?;
    Ok(report)
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(path, json).map_err(|e| CoreError::io(path, e))
}
