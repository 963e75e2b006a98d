//! Loss terms. Each builder appends its graph to a tape and returns a scalar node.
//!
//! total = L_ud + L_dep + L_base, with
//! L_base = L_2d + L_proj(DSN) + L_proj(MDN) + L_prior, all with unit weights.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use skd_autodiff::{NodeId, Tape, Tensor};

use crate::error::{CoreError, Result};
use crate::geometry::{Box2D, CameraIntrinsics};
use crate::model::{Model, ModelConfig};

/// Cap on the mean uncertainty in the distillation loss.
pub const ALPHA: f64 = 0.1;
pub const FOCAL_GAMMA: f64 = 2.0;
/// Corners nearer than this are clamped in the projection loss.
pub const PROJECTION_Z_MIN: f64 = 0.1;

/// Loss values of one optimizer step, batch-averaged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ud: f64,
    pub l_dep: f64,
    pub l_base: f64,
    pub l_proj_dsn: f64,
    pub l_proj_mdn: f64,
    pub l_2d: f64,
    pub l_prior: f64,
    pub total: f64,
    pub f_dsn: f64,
    pub f_mdn: f64,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        [
            self.l_ud,
            self.l_dep,
            self.l_base,
            self.l_proj_dsn,
            self.l_proj_mdn,
            self.l_2d,
            self.l_prior,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Mean SmoothL1 between two metric box vectors.
pub fn distillation_core_loss(tape: &mut Tape, dsn_box: NodeId, mdn_box: NodeId) -> Result<NodeId> {
    Ok(tape.smooth_l1(dsn_box, mdn_box)?)
}

/// `L_d / min(U, alpha) + min(U, alpha)^2` with `U` the mean of the two uncertainties.
///
/// With `detach_denominator` the capped uncertainty enters the first term as a
/// constant, so uncertainties are trained by the regularizer alone.
pub fn uncertainty_distillation_loss(
    tape: &mut Tape,
    l_d: NodeId,
    u_dsn: NodeId,
    u_mdn: NodeId,
    alpha: f64,
    detach_denominator: bool,
) -> Result<NodeId> {
    for (name, u) in [("DSN", u_dsn), ("MDN", u_mdn)] {
        if let Some(bad) = tape.value(u).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(CoreError::contract(format!(
                "{name} uncertainty must be positive, got {bad}"
            )));
        }
    }
    let sum = tape.add(u_dsn, u_mdn)?;
    let mean = tape.scale(sum, 0.5);
    let capped = tape.min_const(mean, alpha);
    let denom = if detach_denominator {
        tape.constant(tape.value(capped).clone())
    } else {
        capped
    };
    let weighted = tape.div(l_d, denom)?;
    let reg = tape.square(capped);
    let total = tape.add(weighted, reg)?;
    Ok(tape.sum(total))
}

/// Focal-weighted cross-entropy over depth bins, averaged over valid tokens.
pub fn depth_loss(
    tape: &mut Tape,
    cfg: &ModelConfig,
    logits: NodeId,
    token_depth: &[f64],
    token_valid: &[bool],
) -> Result<NodeId> {
    let k = cfg.arch.depth_bins;
    let idx: Vec<usize> = token_depth
        .iter()
        .zip(token_valid)
        .enumerate()
        .filter(|(_, (_, &ok))| ok)
        .map(|(t, (&d, _))| t * k + cfg.bin_of(d))
        .collect();
    if idx.is_empty() {
        log::warn!("depth loss: no valid tokens, returning 0");
        return Ok(tape.scalar(0.0));
    }
    let n = idx.len();
    let logp = tape.log_softmax_rows(logits);
    let lp = tape.gather(logp, &idx, &[n])?;
    let p = tape.exp(lp);
    let q = tape.neg(p);
    let q = tape.shift(q, 1.0);
    let w = if FOCAL_GAMMA == 2.0 {
        tape.square(q)
    } else {
        let lq = tape.log(q);
        let s = tape.scale(lq, FOCAL_GAMMA);
        tape.exp(s)
    };
    let nll = tape.neg(lp);
    let per = tape.mul(w, nll)?;
    Ok(tape.mean(per))
}

fn component(tape: &mut Tape, v: NodeId, i: usize) -> Result<NodeId> {
    Ok(tape.pick(v, i)?)
}

/// Projected 2D box `[u_min, v_min, u_max, v_max]` of a metric box vector, with
/// near corners clamped to `PROJECTION_Z_MIN`. Returns (box, clamp penalty).
pub fn project_on_tape(
    tape: &mut Tape,
    boxvec: NodeId,
    cam: &CameraIntrinsics,
) -> Result<(NodeId, NodeId)> {
    let [x, y, z, h, w, l, s, c] = [0, 1, 2, 3, 4, 5, 6, 7].map(|i| component(tape, boxvec, i));
    let (x, y, z, h, w, l, s, c) = (x?, y?, z?, h?, w?, l?, s?, c?);
    let mut al = Vec::with_capacity(8);
    let mut ah = Vec::with_capacity(8);
    let mut aw = Vec::with_capacity(8);
    for sl in [0.5, -0.5] {
        for sh in [0.5, -0.5] {
            for sw in [0.5, -0.5] {
                al.push(sl);
                ah.push(sh);
                aw.push(sw);
            }
        }
    }
    let al = tape.constant(Tensor::vector(al));
    let ah = tape.constant(Tensor::vector(ah));
    let aw = tape.constant(Tensor::vector(aw));
    let lc = tape.mul(l, c)?;
    let ls = tape.mul(l, s)?;
    let wc = tape.mul(w, c)?;
    let ws = tape.mul(w, s)?;
    // x + c lx + s wz,  z - s lx + c wz
    let t1 = tape.mul(al, lc)?;
    let t2 = tape.mul(aw, ws)?;
    let dx = tape.add(t1, t2)?;
    let cx = tape.add(dx, x)?;
    let t3 = tape.mul(al, ls)?;
    let t4 = tape.mul(aw, wc)?;
    let dz = tape.sub(t4, t3)?;
    let cz = tape.add(dz, z)?;
    let t5 = tape.mul(ah, h)?;
    let cy = tape.add(t5, y)?;

    let zc = tape.max_const(cz, PROJECTION_Z_MIN);
    let nz = tape.neg(cz);
    let gap = tape.shift(nz, PROJECTION_Z_MIN);
    let gap = tape.relu(gap);
    let penalty = tape.sum(gap);

    let xr = tape.div(cx, zc)?;
    let xs = tape.scale(xr, cam.fx);
    let u = tape.shift(xs, cam.cx);
    let yr = tape.div(cy, zc)?;
    let ys = tape.scale(yr, cam.fy);
    let v = tape.shift(ys, cam.cy);
    let u_min = tape.reduce_min(u);
    let v_min = tape.reduce_min(v);
    let u_max = tape.reduce_max(u);
    let v_max = tape.reduce_max(v);
    let b = tape.concat(&[u_min, v_min, u_max, v_max], 0)?;
    Ok((b, penalty))
}

/// Mean SmoothL1 between the projected box and the annotation, both divided
/// by the image size, plus the near-corner clamp penalty.
pub fn projection_loss(
    tape: &mut Tape,
    boxvec: NodeId,
    cam: &CameraIntrinsics,
    ann: &Box2D,
    image_size: [usize; 2],
) -> Result<NodeId> {
    let (b, penalty) = project_on_tape(tape, boxvec, cam)?;
    let [w, h] = image_size.map(|v| v as f64);
    let norm = tape.constant(Tensor::vector(vec![1.0 / w, 1.0 / h, 1.0 / w, 1.0 / h]));
    let pred = tape.mul(b, norm)?;
    let target = tape.constant(Tensor::vector(vec![
        ann.u_min / w,
        ann.v_min / h,
        ann.u_max / w,
        ann.v_max / h,
    ]));
    let fit = tape.smooth_l1(pred, target)?;
    Ok(tape.add(fit, penalty)?)
}

/// Mean SmoothL1 of the predicted log dimension ratios against zero.
pub fn prior_loss(tape: &mut Tape, log_dims: NodeId) -> Result<NodeId> {
    let zero = tape.constant(Tensor::zeros(tape.shape(log_dims)));
    Ok(tape.smooth_l1(log_dims, zero)?)
}

/// Offsets `[left, top, right, bottom]` of a box from a token center, divided by the image size.
pub fn box_offsets(center: (f64, f64), b: &Box2D, image_size: [usize; 2]) -> [f64; 4] {
    let [w, h] = image_size.map(|v| v as f64);
    let (tu, tv) = center;
    [
        (tu - b.u_min) / w,
        (tv - b.v_min) / h,
        (b.u_max - tu) / w,
        (b.v_max - tv) / h,
    ]
}

/// Objectness cross-entropy over all tokens plus SmoothL1 on the box offsets of
/// the tokens containing annotated box centers.
pub fn twod_loss(tape: &mut Tape, model: &Model, out: NodeId, anns: &[Box2D]) -> Result<NodeId> {
    let cfg = model.config();
    let t = cfg.tokens();
    let mut positives: BTreeMap<usize, [f64; 4]> = BTreeMap::new();
    for b in anns {
        let (cu, cv) = b.center();
        let tok = model.token_at(cu, cv);
        positives.insert(tok, box_offsets(model.token_center(tok), b, cfg.image_size));
    }
    let mut target = vec![0.0; t];
    for &tok in positives.keys() {
        target[tok] = 1.0;
    }
    let idx: Vec<usize> = (0..t).map(|i| i * 5).collect();
    let logits = tape.gather(out, &idx, &[t])?;
    let target = tape.constant(Tensor::vector(target));
    let sp = tape.softplus(logits);
    let tz = tape.mul(target, logits)?;
    let bce = tape.sub(sp, tz)?;
    let bce = tape.mean(bce);
    if positives.is_empty() {
        return Ok(bce);
    }
    let mut idx = Vec::with_capacity(positives.len() * 4);
    let mut off = Vec::with_capacity(positives.len() * 4);
    for (&tok, o) in &positives {
        idx.extend((1..5).map(|j| tok * 5 + j));
        off.extend_from_slice(o);
    }
    let n = idx.len();
    let pred = tape.gather(out, &idx, &[n])?;
    let target = tape.constant(Tensor::vector(off));
    let reg = tape.smooth_l1(pred, target)?;
    Ok(tape.add(bce, reg)?)
}
