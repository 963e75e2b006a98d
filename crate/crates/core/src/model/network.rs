//! Forward passes of the depth-guided self-teaching network (DSN), the
//! monocular detection network (MDN) and the shared 2D head.
//!
//! ```text
//! patches -> encoder -> F_G ----------------------------+--> RoI pool -> MDN head
//!                        |                              |
//!                        +-> depth head -> F_D -> SA -> CA(F_G) -> FFN -> F_G3D -> RoI pool -> DSN head
//!                        +-> 2D head
//! ```
//!
//! The depth head is trained by the depth loss alone: its features enter the
//! fusion block as constants, and the DSN depth is the pooled soft-argmax of
//! its bin distribution, also a constant. Distillation and projection
//! gradients therefore reach the encoder only through the fusion block, the
//! heads and the MDN.

use skd_autodiff::{NodeId, Tape, Tensor};

use super::config::ModelConfig;
use super::decode::{BoxPrediction, RawTargets};
use super::params::{col, inverse_softplus, ModelParams, UNCERTAINTY_FLOOR};
use super::roi::{bilinear_matrix, nearest_tokens};
use crate::error::{CoreError, Result};
use crate::geometry::{Box2D, Box3D};

/// Parameter leaves of one tape, in [`ModelParams`] order.
#[derive(Debug, Clone)]
pub struct Bound {
    ids: Vec<NodeId>,
}

impl Bound {
    /// Wrap leaves already on a tape, in parameter order.
    pub fn from_ids(ids: Vec<NodeId>) -> Self {
        Self { ids }
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// Graph handles for the predictions of a set of RoIs.
#[derive(Debug, Clone, Copy)]
pub struct RoiNodes {
    /// `[R, 8]` metric vectors `[x, y, z, h, w, l, sin, cos]`
    pub boxes: NodeId,
    /// `[R, 1]`
    pub uncertainty: NodeId,
    /// `[R, 3]`
    pub log_dims: NodeId,
}

#[derive(Debug, Clone)]
pub struct RoiPredictions {
    /// `None` when there are no RoIs.
    pub nodes: Option<RoiNodes>,
    pub predictions: Vec<BoxPrediction>,
}

impl RoiPredictions {
    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    /// Box 8-vector and uncertainty of RoI `i` as `[8]` and `[1]` nodes.
    pub fn row(&self, tape: &mut Tape, i: usize) -> Result<(NodeId, NodeId)> {
        let nodes = self
            .nodes
            .ok_or_else(|| CoreError::contract("no RoI predictions"))?;
        let idx: Vec<usize> = (i * 8..i * 8 + 8).collect();
        let b = tape.gather(nodes.boxes, &idx, &[8])?;
        let u = tape.gather(nodes.uncertainty, &[i], &[1])?;
        Ok((b, u))
    }

    pub fn log_dims_row(&self, tape: &mut Tape, i: usize) -> Result<NodeId> {
        let nodes = self
            .nodes
            .ok_or_else(|| CoreError::contract("no RoI predictions"))?;
        Ok(tape.gather(nodes.log_dims, &[i * 3, i * 3 + 1, i * 3 + 2], &[3])?)
    }
}

/// Values that enter the DSN as constants: the depth features fed to the
/// fusion block and the raw depth of every RoI.
#[derive(Debug, Clone, PartialEq)]
pub struct DetachedInputs {
    pub depth_features: Tensor,
    pub z_raw: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DsnOutput {
    /// `[T, K]`
    pub depth_logits: NodeId,
    /// `[T, d]`, before detaching
    pub depth_features: NodeId,
    pub sa_attention: NodeId,
    pub ca_attention: NodeId,
    /// fused tokens F_G3D, `[T, d]`
    pub tokens: NodeId,
    /// soft-argmax depth per token
    pub token_depth: Vec<f64>,
    /// pooled depth per RoI
    pub anchors: Vec<f64>,
    pub detached: DetachedInputs,
    pub preds: RoiPredictions,
}

pub struct Model {
    cfg: ModelConfig,
    names: Vec<String>,
    /// `[T, P]` 2x2 average pool from patches to tokens
    pool: Tensor,
    bins: Vec<f64>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let names = ModelParams::init(&cfg, 0)?.names().to_vec();
        let g = cfg.grid();
        let pg = 2 * g;
        let mut pool = vec![0.0; g * g * pg * pg];
        for pr in 0..pg {
            for pc in 0..pg {
                let t = (pr / 2) * g + pc / 2;
                pool[t * pg * pg + pr * pg + pc] = 0.25;
            }
        }
        let bins = cfg.bin_centers();
        Ok(Self {
            pool: Tensor::new(vec![g * g, pg * pg], pool)?,
            cfg,
            names,
            bins,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn bin_centers(&self) -> &[f64] {
        &self.bins
    }

    /// Insert every parameter tensor as a gradient leaf.
    pub fn bind(&self, tape: &mut Tape, params: &ModelParams) -> Result<Bound> {
        if params.names() != self.names.as_slice() {
            return Err(CoreError::contract(
                "parameter set does not match the model layout",
            ));
        }
        let ids = params
            .tensors()
            .iter()
            .map(|t| tape.param(t.clone()))
            .collect();
        Ok(Bound { ids })
    }

    fn p(&self, b: &Bound, name: &str) -> NodeId {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        b.ids[i]
    }

    fn linear(&self, tape: &mut Tape, b: &Bound, name: &str, x: NodeId) -> Result<NodeId> {
        let w = self.p(b, &format!("{name}.w"));
        let bias = self.p(b, &format!("{name}.b"));
        let y = tape.matmul(x, w)?;
        Ok(tape.add(y, bias)?)
    }

    fn linear_relu(&self, tape: &mut Tape, b: &Bound, name: &str, x: NodeId) -> Result<NodeId> {
        let y = self.linear(tape, b, name, x)?;
        Ok(tape.relu(y))
    }

    /// `[3, H, W]` image to `[(2G)^2, 3 p^2]` patch rows, channel-major within a patch.
    pub fn patchify(&self, features: &Tensor) -> Result<Tensor> {
        let [w, h] = self.cfg.image_size;
        if features.shape() != [3, h, w] {
            return Err(CoreError::contract(format!(
                "features have shape {:?}, expected [3, {h}, {w}]",
                features.shape()
            )));
        }
        let p = self.cfg.arch.patch;
        let (rows, cols) = (h / p, w / p);
        let dim = self.cfg.patch_dim();
        let src = features.data();
        let mut out = Vec::with_capacity(rows * cols * dim);
        for pr in 0..rows {
            for pc in 0..cols {
                for c in 0..3 {
                    for dy in 0..p {
                        let start = c * h * w + (pr * p + dy) * w + pc * p;
                        out.extend_from_slice(&src[start..start + p]);
                    }
                }
            }
        }
        Ok(Tensor::new(vec![rows * cols, dim], out)?)
    }

    /// Global token grid F_G, `[G*G, d]`.
    pub fn encode(&self, tape: &mut Tape, b: &Bound, patches: &Tensor) -> Result<NodeId> {
        let x = tape.constant(patches.clone());
        let h = self.linear_relu(tape, b, "enc.patch", x)?;
        let h = self.linear_relu(tape, b, "enc.hidden1", h)?;
        let h = self.linear_relu(tape, b, "enc.hidden2", h)?;
        let pool = tape.constant(self.pool.clone());
        Ok(tape.matmul(pool, h)?)
    }

    fn attention(
        &self,
        tape: &mut Tape,
        b: &Bound,
        block: &str,
        q_in: NodeId,
        kv_in: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let q = self.linear(tape, b, &format!("{block}.q"), q_in)?;
        let k = self.linear(tape, b, &format!("{block}.k"), kv_in)?;
        let v = self.linear(tape, b, &format!("{block}.v"), kv_in)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (self.cfg.arch.width as f64).sqrt());
        let attn = tape.softmax_rows(scores);
        Ok((tape.matmul(attn, v)?, attn))
    }

    /// Token rows of all RoIs through a head: `[R, 9]`.
    fn head(
        &self,
        tape: &mut Tape,
        b: &Bound,
        name: &str,
        tokens: NodeId,
        rois: &[Box2D],
    ) -> Result<NodeId> {
        let cfg = &self.cfg;
        let (g, s, d) = (cfg.grid(), cfg.arch.roi_size, cfg.arch.width);
        let t = cfg.tokens();
        let mut m = Vec::with_capacity(rois.len() * s * s * t);
        let mut geo = Vec::with_capacity(rois.len() * 4);
        let [w, h] = cfg.image_size.map(|v| v as f64);
        for roi in rois {
            m.extend_from_slice(bilinear_matrix(roi, g, cfg.cell(), s)?.data());
            let (cu, cv) = roi.center();
            geo.extend_from_slice(&[cu / w, cv / h, roi.width() / w, roi.height() / h]);
        }
        let r = rois.len();
        let m = tape.constant(Tensor::new(vec![r * s * s, t], m)?);
        let tiles = tape.matmul(m, tokens)?;
        let flat = tape.reshape(tiles, &[r, s * s * d])?;
        let geo = tape.constant(Tensor::new(vec![r, 4], geo)?);
        let input = tape.concat(&[flat, geo], 1)?;
        let hidden = self.linear_relu(tape, b, &format!("{name}.hidden"), input)?;
        self.linear(tape, b, &format!("{name}.out"), hidden)
    }

    /// Decode head rows on the tape. `z_raw` replaces the depth column with constants.
    fn decode(
        &self,
        tape: &mut Tape,
        out: NodeId,
        rois: &[Box2D],
        z_raw: Option<&[f64]>,
    ) -> Result<RoiPredictions> {
        let r = rois.len();
        let cfg = &self.cfg;
        let column = |tape: &mut Tape, c: usize| -> Result<NodeId> {
            let idx: Vec<usize> = (0..r).map(|i| i * col::COUNT + c).collect();
            Ok(tape.gather(out, &idx, &[r, 1])?)
        };
        let consts = |tape: &mut Tape, f: &dyn Fn(&Box2D) -> f64| -> Result<NodeId> {
            Ok(tape.constant(Tensor::new(vec![r, 1], rois.iter().map(f).collect())?))
        };
        let du = column(tape, col::DU)?;
        let dv = column(tape, col::DV)?;
        let zr = match z_raw {
            Some(z) => tape.constant(Tensor::new(vec![r, 1], z.to_vec())?),
            None => column(tape, col::Z)?,
        };
        let lh = column(tape, col::LOG_H)?;
        let lw = column(tape, col::LOG_W)?;
        let ll = column(tape, col::LOG_L)?;
        let sn = column(tape, col::SIN)?;
        let cs = column(tape, col::COS)?;
        let lu = column(tape, col::LOG_U)?;

        let cu = consts(tape, &|b| b.center().0)?;
        let cv = consts(tape, &|b| b.center().1)?;
        let rw = consts(tape, &|b| b.width())?;
        let rh = consts(tape, &|b| b.height())?;
        let off_u = tape.mul(du, rw)?;
        let u = tape.add(cu, off_u)?;
        let off_v = tape.mul(dv, rh)?;
        let v = tape.add(cv, off_v)?;

        let sp = tape.softplus(zr);
        let z = tape.shift(sp, cfg.depth_range[0]);
        let uc = tape.shift(u, -cfg.cam.cx);
        let xz = tape.mul(uc, z)?;
        let x = tape.scale(xz, 1.0 / cfg.cam.fx);
        let vc = tape.shift(v, -cfg.cam.cy);
        let yz = tape.mul(vc, z)?;
        let y = tape.scale(yz, 1.0 / cfg.cam.fy);

        let [h0, w0, l0] = cfg.dim_priors;
        let eh = tape.exp(lh);
        let bh = tape.scale(eh, h0);
        let ew = tape.exp(lw);
        let bw = tape.scale(ew, w0);
        let el = tape.exp(ll);
        let bl = tape.scale(el, l0);

        let s2 = tape.square(sn);
        let c2 = tape.square(cs);
        let n2 = tape.add(s2, c2)?;
        let n2 = tape.shift(n2, 1e-12);
        let norm = tape.sqrt(n2);
        let sin = tape.div(sn, norm)?;
        let cos = tape.div(cs, norm)?;
        let unc = tape.softplus(lu);
        let unc = tape.shift(unc, UNCERTAINTY_FLOOR);

        let boxes = tape.concat(&[x, y, z, bh, bw, bl, sin, cos], 1)?;
        let log_dims = tape.concat(&[lh, lw, ll], 1)?;

        let raw = tape.value(out).data();
        let bv = tape.value(boxes).data();
        let uv = tape.value(unc).data();
        let predictions = (0..r)
            .map(|i| {
                let row = &raw[i * col::COUNT..(i + 1) * col::COUNT];
                let mut raw_targets: RawTargets = [0.0; 8];
                raw_targets.copy_from_slice(&row[..8]);
                if let Some(z) = z_raw {
                    raw_targets[col::Z] = z[i];
                }
                let m = &bv[i * 8..(i + 1) * 8];
                BoxPrediction {
                    raw_targets,
                    uncertainty: uv[i],
                    decoded: Box3D {
                        x: m[0],
                        y: m[1],
                        z: m[2],
                        h: m[3],
                        w: m[4],
                        l: m[5],
                        theta: m[6].atan2(m[7]),
                    },
                }
            })
            .collect();
        Ok(RoiPredictions {
            nodes: Some(RoiNodes {
                boxes,
                uncertainty: unc,
                log_dims,
            }),
            predictions,
        })
    }

    /// Depth-bin logits and depth features from F_G.
    pub fn depth_head(&self, tape: &mut Tape, b: &Bound, fg: NodeId) -> Result<(NodeId, NodeId)> {
        let fd = self.linear_relu(tape, b, "depth.feat", fg)?;
        let hidden = self.linear_relu(tape, b, "depth.hidden", fd)?;
        let logits = self.linear(tape, b, "depth.logits", hidden)?;
        Ok((fd, logits))
    }

    /// Soft-argmax depth of every token.
    pub fn expected_depth(&self, logits: &Tensor) -> Vec<f64> {
        let k = self.bins.len();
        logits
            .data()
            .chunks_exact(k)
            .map(|row| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                let mut acc = 0.0;
                for (&z, &c) in row.iter().zip(&self.bins) {
                    let e = (z - max).exp();
                    total += e;
                    acc += e * c;
                }
                acc / total
            })
            .collect()
    }

    pub fn dsn_forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        fg: NodeId,
        rois: &[Box2D],
    ) -> Result<DsnOutput> {
        self.dsn_forward_with(tape, b, fg, rois, None)
    }

    /// As [`Model::dsn_forward`], optionally with the detached inputs fixed to
    /// given values instead of the ones this forward computes. Finite-difference
    /// checks use this to hold them at their unperturbed values.
    pub fn dsn_forward_with(
        &self,
        tape: &mut Tape,
        b: &Bound,
        fg: NodeId,
        rois: &[Box2D],
        frozen: Option<&DetachedInputs>,
    ) -> Result<DsnOutput> {
        let (fd, logits) = self.depth_head(tape, b, fg)?;
        let token_depth = self.expected_depth(tape.value(logits));
        let cfg = &self.cfg;
        let anchors: Vec<f64> = rois
            .iter()
            .map(|roi| {
                let idx = nearest_tokens(roi, cfg.grid(), cfg.cell(), cfg.arch.roi_size);
                idx.iter().map(|&t| token_depth[t]).sum::<f64>() / idx.len() as f64
            })
            .collect();
        let dmin = cfg.depth_range[0];
        let detached = match frozen {
            Some(f) => {
                if f.z_raw.len() != rois.len() {
                    return Err(CoreError::contract(
                        "frozen DSN inputs do not match the RoI count",
                    ));
                }
                f.clone()
            }
            None => DetachedInputs {
                depth_features: tape.value(fd).clone(),
                z_raw: anchors
                    .iter()
                    .map(|&a| inverse_softplus((a - dmin).max(1e-6)))
                    .collect(),
            },
        };

        let fd_const = tape.constant(detached.depth_features.clone());
        let (sa, sa_attention) = self.attention(tape, b, "fusion.sa", fd_const, fd_const)?;
        let x1 = tape.add(fd_const, sa)?;
        let (ca, ca_attention) = self.attention(tape, b, "fusion.ca", x1, fg)?;
        let x2 = tape.add(x1, ca)?;
        let ff = self.linear_relu(tape, b, "fusion.ffn1", x2)?;
        let ff = self.linear(tape, b, "fusion.ffn2", ff)?;
        let tokens = tape.add(x2, ff)?;

        let preds = if rois.is_empty() {
            RoiPredictions {
                nodes: None,
                predictions: Vec::new(),
            }
        } else {
            let out = self.head(tape, b, "dsn_head", tokens, rois)?;
            self.decode(tape, out, rois, Some(&detached.z_raw))?
        };
        Ok(DsnOutput {
            depth_logits: logits,
            depth_features: fd,
            sa_attention,
            ca_attention,
            tokens,
            token_depth,
            anchors,
            detached,
            preds,
        })
    }

    pub fn mdn_forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        fg: NodeId,
        rois: &[Box2D],
    ) -> Result<RoiPredictions> {
        if rois.is_empty() {
            return Ok(RoiPredictions {
                nodes: None,
                predictions: Vec::new(),
            });
        }
        let out = self.head(tape, b, "mdn_head", fg, rois)?;
        self.decode(tape, out, rois, None)
    }

    /// Per-token objectness logit and 4 box offsets, `[T, 5]`.
    pub fn twod_forward(&self, tape: &mut Tape, b: &Bound, fg: NodeId) -> Result<NodeId> {
        self.linear(tape, b, "twod", fg)
    }

    /// Token centers in pixels.
    pub fn token_center(&self, t: usize) -> (f64, f64) {
        let g = self.cfg.grid();
        let cell = self.cfg.cell();
        (((t % g) as f64 + 0.5) * cell, ((t / g) as f64 + 0.5) * cell)
    }

    /// Token whose cell contains a pixel.
    pub fn token_at(&self, u: f64, v: f64) -> usize {
        let g = self.cfg.grid();
        let cell = self.cfg.cell();
        let clamp = |p: f64| ((p / cell).floor().max(0.0) as usize).min(g - 1);
        clamp(v) * g + clamp(u)
    }

    /// Valid-pixel average of the pseudo depth over each token cell.
    pub fn token_depth_targets(&self, pseudo: &Tensor, valid: &[bool]) -> (Vec<f64>, Vec<bool>) {
        let [w, _] = self.cfg.image_size;
        let t = self.cfg.tokens();
        let mut sum = vec![0.0; t];
        let mut count = vec![0usize; t];
        for (px, (&d, &ok)) in pseudo.data().iter().zip(valid).enumerate() {
            if ok {
                let tok = self.token_at((px % w) as f64 + 0.5, (px / w) as f64 + 0.5);
                sum[tok] += d;
                count[tok] += 1;
            }
        }
        let depth = sum
            .iter()
            .zip(&count)
            .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        (depth, count.iter().map(|&c| c > 0).collect())
    }
}
