//! Named, runtime-selectable strategies.
//!
//! Each variation point is a trait; implementations are registered by name in a
//! [`Registry`] and created from [`StrategyOptions`] when a run starts.

use std::collections::BTreeMap;

use skd_autodiff::{sigmoid, NodeId, Tape, Tensor};

use crate::error::{CoreError, Result};
use crate::geometry::Box2D;
use crate::losses::{distillation_core_loss, uncertainty_distillation_loss, ALPHA};
use crate::model::Model;
use crate::scenes::Scene;

/// Knobs shared by all factories. Each strategy reads the fields it needs.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyOptions {
    pub alpha: f64,
    /// Decay of the projection-loss averages in `gradient-targeted-ema`.
    pub ema_decay: f64,
    pub objectness_threshold: f64,
    pub top_k: usize,
}

impl Default for StrategyOptions {
    fn default() -> Self {
        Self {
            alpha: ALPHA,
            ema_decay: 0.9,
            objectness_threshold: 0.5,
            top_k: 4,
        }
    }
}

type Factory<T> = Box<dyn Fn(&StrategyOptions) -> Box<T> + Send + Sync>;

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<&'static str, Factory<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    /// Add a factory; a later registration under the same name replaces the earlier one.
    pub fn register(
        &mut self,
        name: &'static str,
        factory: impl Fn(&StrategyOptions) -> Box<T> + Send + Sync + 'static,
    ) {
        self.entries.insert(name, Box::new(factory));
    }

    pub fn create(&self, name: &str, opts: &StrategyOptions) -> Result<Box<T>> {
        match self.entries.get(name) {
            Some(f) => Ok(f(opts)),
            None => Err(CoreError::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            }),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

// ---------------------------------------------------------------------------
// distillation

/// Per-RoI distillation objective between the two networks' predictions.
pub trait DistillationLoss: Send + Sync {
    fn name(&self) -> &'static str;

    /// Scalar loss for one RoI from `[8]` boxes and `[1]` uncertainties.
    fn roi_loss(
        &self,
        tape: &mut Tape,
        dsn_box: NodeId,
        dsn_u: NodeId,
        mdn_box: NodeId,
        mdn_u: NodeId,
    ) -> Result<NodeId>;
}

struct UncertaintyAware {
    alpha: f64,
    detach: bool,
}

impl DistillationLoss for UncertaintyAware {
    fn name(&self) -> &'static str {
        if self.detach {
            "uncertainty-aware-detached"
        } else {
            "uncertainty-aware"
        }
    }

    fn roi_loss(
        &self,
        tape: &mut Tape,
        dsn_box: NodeId,
        dsn_u: NodeId,
        mdn_box: NodeId,
        mdn_u: NodeId,
    ) -> Result<NodeId> {
        let l_d = distillation_core_loss(tape, dsn_box, mdn_box)?;
        uncertainty_distillation_loss(tape, l_d, dsn_u, mdn_u, self.alpha, self.detach)
    }
}

/// Bare SmoothL1 consistency; uncertainties receive no gradient.
struct Plain;

impl DistillationLoss for Plain {
    fn name(&self) -> &'static str {
        "plain"
    }

    fn roi_loss(
        &self,
        tape: &mut Tape,
        dsn_box: NodeId,
        _: NodeId,
        mdn_box: NodeId,
        _: NodeId,
    ) -> Result<NodeId> {
        distillation_core_loss(tape, dsn_box, mdn_box)
    }
}

pub fn distillation_losses() -> Registry<dyn DistillationLoss> {
    let mut r: Registry<dyn DistillationLoss> = Registry::new("distillation loss");
    r.register("uncertainty-aware", |o| {
        Box::new(UncertaintyAware {
            alpha: o.alpha,
            detach: false,
        })
    });
    r.register("uncertainty-aware-detached", |o| {
        Box::new(UncertaintyAware {
            alpha: o.alpha,
            detach: true,
        })
    });
    r.register("plain", |_| Box::new(Plain));
    r
}

// ---------------------------------------------------------------------------
// transfer modulation

/// `(2 a / (a + b), 2 b / (a + b))`; `(1, 1)` when both are zero.
pub fn tms_factors(l_proj_dsn: f64, l_proj_mdn: f64) -> Result<(f64, f64)> {
    if !(l_proj_dsn >= 0.0 && l_proj_mdn >= 0.0)
        || !l_proj_dsn.is_finite()
        || !l_proj_mdn.is_finite()
    {
        return Err(CoreError::contract(format!(
            "projection losses must be finite and nonnegative, got ({l_proj_dsn}, {l_proj_mdn})"
        )));
    }
    let sum = l_proj_dsn + l_proj_mdn;
    if sum == 0.0 {
        return Ok((1.0, 1.0));
    }
    // The larger factor lies in [1, 2], so 2 minus it is exact and the pair sums to 2.
    if l_proj_dsn >= l_proj_mdn {
        let f = 2.0 * l_proj_dsn / sum;
        Ok((f, 2.0 - f))
    } else {
        let f = 2.0 * l_proj_mdn / sum;
        Ok((2.0 - f, f))
    }
}

/// Turns detached per-batch projection losses into gate factors for the
/// distillation gradients of each network.
pub trait TransferModulation: Send {
    fn name(&self) -> &'static str;

    fn factors(&mut self, l_proj_dsn: f64, l_proj_mdn: f64) -> Result<(f64, f64)>;

    /// Resumable state, flattened.
    fn state(&self) -> Vec<f64> {
        Vec::new()
    }

    fn restore(&mut self, state: &[f64]) -> Result<()> {
        if state.is_empty() {
            Ok(())
        } else {
            Err(CoreError::contract(format!(
                "{} keeps no state",
                self.name()
            )))
        }
    }
}

struct NoModulation;

impl TransferModulation for NoModulation {
    fn name(&self) -> &'static str {
        "none"
    }

    fn factors(&mut self, _: f64, _: f64) -> Result<(f64, f64)> {
        Ok((1.0, 1.0))
    }
}

struct GradientTargeted;

impl TransferModulation for GradientTargeted {
    fn name(&self) -> &'static str {
        "gradient-targeted"
    }

    fn factors(&mut self, l_proj_dsn: f64, l_proj_mdn: f64) -> Result<(f64, f64)> {
        tms_factors(l_proj_dsn, l_proj_mdn)
    }
}

/// Factors from exponential moving averages of the projection losses.
struct GradientTargetedEma {
    decay: f64,
    avg: Option<(f64, f64)>,
}

impl TransferModulation for GradientTargetedEma {
    fn name(&self) -> &'static str {
        "gradient-targeted-ema"
    }

    fn factors(&mut self, l_proj_dsn: f64, l_proj_mdn: f64) -> Result<(f64, f64)> {
        tms_factors(l_proj_dsn, l_proj_mdn)?;
        let next = match self.avg {
            None => (l_proj_dsn, l_proj_mdn),
            Some((a, b)) => {
                let k = self.decay;
                (
                    k * a + (1.0 - k) * l_proj_dsn,
                    k * b + (1.0 - k) * l_proj_mdn,
                )
            }
        };
        self.avg = Some(next);
        tms_factors(next.0, next.1)
    }

    fn state(&self) -> Vec<f64> {
        match self.avg {
            None => vec![0.0, 0.0, 0.0],
            Some((a, b)) => vec![1.0, a, b],
        }
    }

    fn restore(&mut self, state: &[f64]) -> Result<()> {
        match state {
            [flag, a, b] => {
                self.avg = (*flag != 0.0).then_some((*a, *b));
                Ok(())
            }
            _ => Err(CoreError::contract(format!(
                "gradient-targeted-ema state has {} values, expected 3",
                state.len()
            ))),
        }
    }
}

pub fn transfer_modulations() -> Registry<dyn TransferModulation> {
    let mut r: Registry<dyn TransferModulation> = Registry::new("transfer modulation");
    r.register("none", |_| Box::new(NoModulation));
    r.register("gradient-targeted", |_| Box::new(GradientTargeted));
    r.register("gradient-targeted-ema", |o| {
        Box::new(GradientTargetedEma {
            decay: o.ema_decay,
            avg: None,
        })
    });
    r
}

// ---------------------------------------------------------------------------
// proposals

/// A RoI handed to the 3D heads, with the objectness that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub roi: Box2D,
    pub objectness: f64,
}

/// Where inference RoIs come from.
pub trait ProposalSource: Send + Sync {
    fn name(&self) -> &'static str;

    /// `twod` holds the `[T, 5]` 2D-head output for the scene.
    fn proposals(&self, model: &Model, scene: &Scene, twod: &Tensor) -> Vec<Proposal>;
}

struct GtProposals;

impl ProposalSource for GtProposals {
    fn name(&self) -> &'static str {
        "gt-proposals"
    }

    fn proposals(&self, _: &Model, scene: &Scene, _: &Tensor) -> Vec<Proposal> {
        scene
            .ann_boxes2d
            .iter()
            .map(|&roi| Proposal {
                roi,
                objectness: 1.0,
            })
            .collect()
    }
}

/// Thresholded objectness plus per-token box regression, top-k by objectness.
struct DetectedProposals {
    threshold: f64,
    top_k: usize,
}

impl ProposalSource for DetectedProposals {
    fn name(&self) -> &'static str {
        "detected-proposals"
    }

    fn proposals(&self, model: &Model, _: &Scene, twod: &Tensor) -> Vec<Proposal> {
        let [w, h] = model.config().image_size.map(|v| v as f64);
        let mut out: Vec<Proposal> = twod
            .data()
            .chunks_exact(5)
            .enumerate()
            .filter_map(|(t, row)| {
                let objectness = sigmoid(row[0]);
                if objectness < self.threshold {
                    return None;
                }
                let (tu, tv) = model.token_center(t);
                let roi = Box2D {
                    u_min: (tu - row[1] * w).clamp(0.0, w),
                    v_min: (tv - row[2] * h).clamp(0.0, h),
                    u_max: (tu + row[3] * w).clamp(0.0, w),
                    v_max: (tv + row[4] * h).clamp(0.0, h),
                };
                (roi.width() > 0.0 && roi.height() > 0.0).then_some(Proposal { roi, objectness })
            })
            .collect();
        out.sort_by(|a, b| b.objectness.total_cmp(&a.objectness));
        out.truncate(self.top_k);
        out
    }
}

pub fn proposal_sources() -> Registry<dyn ProposalSource> {
    let mut r: Registry<dyn ProposalSource> = Registry::new("proposal source");
    r.register("gt-proposals", |_| Box::new(GtProposals));
    r.register("detected-proposals", |o| {
        Box::new(DetectedProposals {
            threshold: o.objectness_threshold,
            top_k: o.top_k,
        })
    });
    r
}
