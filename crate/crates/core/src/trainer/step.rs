//! One optimizer step.
//!
//! The step runs in two phases. Phase A builds every scene's forward graph and
//! all losses except distillation, in parallel. The batch means of the two
//! projection losses then fix the modulation factors. Phase B gates both
//! networks' box and uncertainty outputs with those factors, adds the
//! distillation losses, and runs one backward per scene. Scene gradients are
//! summed in batch order, so the result does not depend on thread count.

use rayon::prelude::*;
use skd_autodiff::{GateFactor, NodeId, Tape, Tensor};

use super::config::Networks;
use crate::error::{CoreError, Result};
use crate::geometry::Box2D;
use crate::losses::{depth_loss, prior_loss, projection_loss, twod_loss, LossBreakdown};
use crate::model::{Bound, DetachedInputs, Model, ModelParams, RoiNodes};
use crate::scenes::Scene;
use crate::strategy::{DistillationLoss, TransferModulation};

/// Model inputs and targets of one scene, computed once per run.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub index: usize,
    pub patches: Tensor,
    pub token_depth: Vec<f64>,
    pub token_valid: Vec<bool>,
    pub anns: Vec<Box2D>,
}

impl PreparedScene {
    pub fn new(model: &Model, index: usize, scene: &Scene) -> Result<Self> {
        let (token_depth, token_valid) =
            model.token_depth_targets(&scene.pseudo_depth, &scene.valid_mask);
        Ok(Self {
            index,
            patches: model.patchify(&scene.features)?,
            token_depth,
            token_valid,
            anns: scene.ann_boxes2d.clone(),
        })
    }
}

/// Which terms enter the objective whose gradient is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermMask {
    pub distillation: bool,
    pub depth: bool,
    pub base: bool,
}

impl TermMask {
    pub const ALL: Self = Self {
        distillation: true,
        depth: true,
        base: true,
    };
    pub const DISTILLATION: Self = Self {
        distillation: true,
        depth: false,
        base: false,
    };
}

/// Gate outputs feeding the distillation loss.
#[derive(Debug, Clone, Copy)]
pub struct GatedOutputs {
    pub dsn_boxes: NodeId,
    pub dsn_uncertainty: NodeId,
    pub mdn_boxes: NodeId,
    pub mdn_uncertainty: NodeId,
}

/// The graph of one scene.
pub struct SceneGraph {
    pub tape: Tape,
    pub bound: Bound,
    pub rois: usize,
    pub l_dep: Option<NodeId>,
    pub l_2d: NodeId,
    pub dsn: Option<RoiNodes>,
    pub mdn: Option<RoiNodes>,
    /// per-RoI projection losses
    pub proj_dsn: Vec<NodeId>,
    pub proj_mdn: Vec<NodeId>,
    /// per-RoI prior losses of both networks
    pub prior: Vec<NodeId>,
    pub gated: Option<GatedOutputs>,
    /// per-RoI distillation losses
    pub l_ud: Vec<NodeId>,
    /// constants the DSN was built with
    pub detached: Option<DetachedInputs>,
}

fn sum_values(tape: &Tape, ids: &[NodeId]) -> f64 {
    ids.iter().map(|&id| tape.item(id)).sum()
}

fn sum_nodes(tape: &mut Tape, ids: &[NodeId]) -> Result<Option<NodeId>> {
    let mut acc: Option<NodeId> = None;
    for &id in ids {
        acc = Some(match acc {
            None => id,
            Some(a) => tape.add(a, id)?,
        });
    }
    Ok(acc)
}

impl SceneGraph {
    /// Phase A: forwards of the enabled networks and every non-distillation loss.
    pub fn forward(
        model: &Model,
        params: &ModelParams,
        scene: &PreparedScene,
        networks: Networks,
    ) -> Result<Self> {
        Self::forward_with(model, params, scene, networks, None)
    }

    /// As [`SceneGraph::forward`] with the DSN's detached inputs optionally fixed.
    pub fn forward_with(
        model: &Model,
        params: &ModelParams,
        scene: &PreparedScene,
        networks: Networks,
        frozen: Option<&DetachedInputs>,
    ) -> Result<Self> {
        let cfg = model.config();
        let mut tape = Tape::with_capacity(1024);
        let bound = model.bind(&mut tape, params)?;
        let fg = model.encode(&mut tape, &bound, &scene.patches)?;
        let twod = model.twod_forward(&mut tape, &bound, fg)?;
        let l_2d = twod_loss(&mut tape, model, twod, &scene.anns)?;
        let mut graph = Self {
            tape,
            bound,
            rois: scene.anns.len(),
            l_dep: None,
            l_2d,
            dsn: None,
            mdn: None,
            proj_dsn: Vec::new(),
            proj_mdn: Vec::new(),
            prior: Vec::new(),
            gated: None,
            l_ud: Vec::new(),
            detached: None,
        };
        let tape = &mut graph.tape;
        if networks.has_dsn() {
            let out = model.dsn_forward_with(tape, &graph.bound, fg, &scene.anns, frozen)?;
            graph.l_dep = Some(depth_loss(
                tape,
                cfg,
                out.depth_logits,
                &scene.token_depth,
                &scene.token_valid,
            )?);
            for i in 0..out.preds.len() {
                let (b, _) = out.preds.row(tape, i)?;
                graph.proj_dsn.push(projection_loss(
                    tape,
                    b,
                    &cfg.cam,
                    &scene.anns[i],
                    cfg.image_size,
                )?);
                let dims = out.preds.log_dims_row(tape, i)?;
                graph.prior.push(prior_loss(tape, dims)?);
            }
            graph.dsn = out.preds.nodes;
            graph.detached = Some(out.detached);
        }
        if networks.has_mdn() {
            let preds = model.mdn_forward(tape, &graph.bound, fg, &scene.anns)?;
            for i in 0..preds.len() {
                let (b, _) = preds.row(tape, i)?;
                graph.proj_mdn.push(projection_loss(
                    tape,
                    b,
                    &cfg.cam,
                    &scene.anns[i],
                    cfg.image_size,
                )?);
                let dims = preds.log_dims_row(tape, i)?;
                graph.prior.push(prior_loss(tape, dims)?);
            }
            graph.mdn = preds.nodes;
        }
        Ok(graph)
    }

    pub fn proj_dsn_sum(&self) -> f64 {
        sum_values(&self.tape, &self.proj_dsn)
    }

    pub fn proj_mdn_sum(&self) -> f64 {
        sum_values(&self.tape, &self.proj_mdn)
    }

    /// Phase B: gate both networks' outputs and add per-RoI distillation losses.
    /// Does nothing unless both networks are present.
    pub fn distill(&mut self, loss: &dyn DistillationLoss, f_dsn: f64, f_mdn: f64) -> Result<()> {
        let (Some(dsn), Some(mdn)) = (self.dsn, self.mdn) else {
            return Ok(());
        };
        let (gd, gm) = (GateFactor::new(f_dsn)?, GateFactor::new(f_mdn)?);
        let tape = &mut self.tape;
        let gated = GatedOutputs {
            dsn_boxes: tape.grad_gate(dsn.boxes, gd),
            dsn_uncertainty: tape.grad_gate(dsn.uncertainty, gd),
            mdn_boxes: tape.grad_gate(mdn.boxes, gm),
            mdn_uncertainty: tape.grad_gate(mdn.uncertainty, gm),
        };
        for i in 0..self.rois {
            let idx: Vec<usize> = (i * 8..i * 8 + 8).collect();
            let db = tape.gather(gated.dsn_boxes, &idx, &[8])?;
            let du = tape.gather(gated.dsn_uncertainty, &[i], &[1])?;
            let mb = tape.gather(gated.mdn_boxes, &idx, &[8])?;
            let mu = tape.gather(gated.mdn_uncertainty, &[i], &[1])?;
            self.l_ud.push(loss.roi_loss(tape, db, du, mb, mu)?);
        }
        self.gated = Some(gated);
        Ok(())
    }

    /// This scene's share of the batch objective.
    ///
    /// Per-scene terms are divided by the batch size, per-RoI terms by the
    /// number of RoIs in the batch, so the batch sum is the batch mean.
    pub fn objective(
        &mut self,
        mask: TermMask,
        batch_size: usize,
        batch_rois: usize,
    ) -> Result<NodeId> {
        let inv_b = 1.0 / batch_size as f64;
        let inv_n = if batch_rois > 0 {
            1.0 / batch_rois as f64
        } else {
            0.0
        };
        let mut terms = Vec::new();
        let tape = &mut self.tape;
        if mask.depth {
            if let Some(l) = self.l_dep {
                terms.push(tape.scale(l, inv_b));
            }
        }
        if mask.base {
            terms.push(tape.scale(self.l_2d, inv_b));
            let roi_terms: Vec<NodeId> = self
                .proj_dsn
                .iter()
                .chain(&self.proj_mdn)
                .chain(&self.prior)
                .copied()
                .collect();
            if let Some(s) = sum_nodes(tape, &roi_terms)? {
                terms.push(tape.scale(s, inv_n));
            }
        }
        if mask.distillation {
            let l_ud = self.l_ud.clone();
            if let Some(s) = sum_nodes(tape, &l_ud)? {
                terms.push(tape.scale(s, inv_n));
            }
        }
        match sum_nodes(tape, &terms)? {
            Some(total) => Ok(total),
            None => Ok(tape.scalar(0.0)),
        }
    }

    /// Gradients of `loss` for every parameter tensor, in parameter order.
    pub fn parameter_gradients(&self, loss: NodeId) -> Result<Vec<Tensor>> {
        let mut grads = self.tape.backward(loss)?;
        Ok(self
            .bound
            .ids()
            .iter()
            .map(|&id| {
                grads
                    .take(id)
                    .unwrap_or_else(|| Tensor::zeros(self.tape.shape(id)))
            })
            .collect())
    }

    fn breakdown_parts(&self) -> [f64; 5] {
        let t = &self.tape;
        [
            self.l_dep.map_or(0.0, |l| t.item(l)),
            t.item(self.l_2d),
            sum_values(t, &self.prior),
            sum_values(t, &self.l_ud),
            self.rois as f64,
        ]
    }
}

/// Result of one step before the optimizer update.
pub struct StepOutput {
    pub breakdown: LossBreakdown,
    /// Summed over the batch, in parameter order.
    pub gradients: Vec<Tensor>,
}

/// Forward, modulation and backward for a batch.
pub fn compute_step(
    step: u64,
    model: &Model,
    params: &ModelParams,
    batch: &[&PreparedScene],
    networks: Networks,
    distillation: &dyn DistillationLoss,
    modulation: &mut dyn TransferModulation,
) -> Result<StepOutput> {
    let mut graphs: Vec<SceneGraph> = batch
        .par_iter()
        .map(|s| SceneGraph::forward(model, params, s, networks))
        .collect::<Result<_>>()?;

    let bad: Vec<usize> = graphs
        .iter()
        .zip(batch)
        .filter(|(g, _)| {
            let [dep, twod, prior, _, _] = g.breakdown_parts();
            ![dep, twod, prior, g.proj_dsn_sum(), g.proj_mdn_sum()]
                .iter()
                .all(|v| v.is_finite())
        })
        .map(|(_, s)| s.index)
        .collect();
    if !bad.is_empty() {
        let detail = graphs
            .iter()
            .zip(batch)
            .filter(|(_, s)| bad.contains(&s.index))
            .map(|(g, s)| {
                let [dep, twod, prior, _, _] = g.breakdown_parts();
                format!(
                    "scene {}: l_dep={dep} l_2d={twod} l_prior={prior} l_proj_dsn={} l_proj_mdn={}",
                    s.index,
                    g.proj_dsn_sum(),
                    g.proj_mdn_sum()
                )
            })
            .collect::<Vec<_>>()
            .join("; ");
        return Err(CoreError::NonFiniteLoss {
            step,
            scenes: bad,
            detail,
        });
    }

    let n: usize = graphs.iter().map(|g| g.rois).sum();
    let b = batch.len();
    let mean = |total: f64| if n > 0 { total / n as f64 } else { 0.0 };
    let l_proj_dsn = mean(graphs.iter().map(SceneGraph::proj_dsn_sum).sum());
    let l_proj_mdn = mean(graphs.iter().map(SceneGraph::proj_mdn_sum).sum());
    let (f_dsn, f_mdn) = if networks == Networks::Both {
        modulation.factors(l_proj_dsn, l_proj_mdn)?
    } else {
        (1.0, 1.0)
    };

    let per_scene: Vec<Vec<Tensor>> = graphs
        .par_iter_mut()
        .map(|g| {
            g.distill(distillation, f_dsn, f_mdn)?;
            let loss = g.objective(TermMask::ALL, b, n)?;
            g.parameter_gradients(loss)
        })
        .collect::<Result<_>>()?;

    let mut parts = [0.0; 5];
    for g in &graphs {
        for (acc, v) in parts.iter_mut().zip(g.breakdown_parts()) {
            *acc += v;
        }
    }
    let [dep, twod, prior, ud, _] = parts;
    let l_prior = mean(prior);
    let l_2d = twod / b as f64;
    let l_base = l_2d + l_proj_dsn + l_proj_mdn + l_prior;
    let l_ud = mean(ud);
    let l_dep = dep / b as f64;
    let breakdown = LossBreakdown {
        l_ud,
        l_dep,
        l_base,
        l_proj_dsn,
        l_proj_mdn,
        l_2d,
        l_prior,
        total: l_ud + l_dep + l_base,
        f_dsn,
        f_mdn,
    };

    if !breakdown.all_finite() {
        return Err(CoreError::NonFiniteLoss {
            step,
            scenes: batch.iter().map(|s| s.index).collect(),
            detail: format!("{breakdown:?}"),
        });
    }

    let mut scenes = per_scene.into_iter();
    let mut gradients = scenes
        .next()
        .ok_or_else(|| CoreError::contract("empty batch"))?;
    for g in scenes {
        for (acc, t) in gradients.iter_mut().zip(g) {
            for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += v;
            }
        }
    }
    Ok(StepOutput {
        breakdown,
        gradients,
    })
}
