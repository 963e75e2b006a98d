//! Finite-difference checks of the autodiff core and of the full training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skd_autodiff::gradcheck::{
    check_gradients, relative_error, GradCheckOptions, GradCheckReport, RandomGraph,
};

use crate::error::Result;
use crate::model::{Model, ModelParams};
use crate::strategy::{distillation_losses, StrategyOptions};
use crate::trainer::{Networks, PreparedScene, SceneGraph, TermMask};

/// Check `count` random composite graphs, seeds `seed..seed + count`.
pub fn random_graph_checks(count: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    (seed..seed + count as u64)
        .map(|s| {
            let (graph, params) = RandomGraph::sample(s);
            let opts = GradCheckOptions {
                seed: s,
                ..GradCheckOptions::default()
            };
            Ok(check_gradients(&graph, &params, &opts)?)
        })
        .collect()
}

/// `params` with every bias shifted by a small seeded offset.
///
/// Fresh parameters have zero biases, and image regions without objects feed
/// zero patches, so many ReLUs sit exactly on their kink where no finite
/// difference agrees with a one-sided derivative. Checks run at this nearby
/// generic point instead.
pub fn generic_point(params: &ModelParams, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut out = params.clone();
    let names = out.names().to_vec();
    for (name, t) in names.iter().zip(out.tensors_mut()) {
        if name.ends_with(".b") {
            for v in t.data_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelCheckOptions {
    pub coords_per_tensor: usize,
    pub step: f64,
    pub floor: f64,
    pub seed: u64,
    /// Gate factors of the distillation terms. Only unit factors describe the
    /// forward function; others rescale the analytic side on purpose.
    pub factors: (f64, f64),
}

impl Default for ModelCheckOptions {
    fn default() -> Self {
        Self {
            coords_per_tensor: 10,
            step: 1e-5,
            floor: 1e-5,
            seed: 0,
            factors: (1.0, 1.0),
        }
    }
}

/// Gradient of the full single-scene objective against central differences,
/// for sampled coordinates of every parameter tensor.
///
/// The DSN's detached inputs are held at their unperturbed values, which is
/// exactly the function the analytic gradient differentiates.
pub fn model_gradient_check(
    model: &Model,
    params: &ModelParams,
    scene: &PreparedScene,
    opts: &ModelCheckOptions,
) -> Result<Vec<TensorCheck>> {
    let distill = distillation_losses().create("uncertainty-aware", &StrategyOptions::default())?;
    let rois = scene.anns.len();
    let base = SceneGraph::forward(model, params, scene, Networks::Both)?;
    let frozen = base.detached.clone();
    let objective = |p: &ModelParams| -> Result<(SceneGraph, skd_autodiff::NodeId)> {
        let mut g = SceneGraph::forward_with(model, p, scene, Networks::Both, frozen.as_ref())?;
        g.distill(distill.as_ref(), opts.factors.0, opts.factors.1)?;
        let loss = g.objective(TermMask::ALL, 1, rois)?;
        Ok((g, loss))
    };
    let (g, loss) = objective(params)?;
    let analytic = g.parameter_gradients(loss)?;
    let value_at = |p: &ModelParams| -> Result<f64> {
        let (g, loss) = objective(p)?;
        Ok(g.tape.item(loss))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for (t, name) in params.names().iter().enumerate() {
        let n = params.tensors()[t].numel();
        let mut worst = 0.0f64;
        let k = opts.coords_per_tensor.min(n);
        for _ in 0..k {
            let c = rng.random_range(0..n);
            let orig = params.tensors()[t].data()[c];
            work.tensors_mut()[t].data_mut()[c] = orig + opts.step;
            let plus = value_at(&work)?;
            work.tensors_mut()[t].data_mut()[c] = orig - opts.step;
            let minus = value_at(&work)?;
            work.tensors_mut()[t].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            worst = worst.max(relative_error(analytic[t].data()[c], numeric, opts.floor));
        }
        out.push(TensorCheck {
            name: name.clone(),
            checked: k,
            max_rel_error: worst,
        });
    }
    Ok(out)
}
