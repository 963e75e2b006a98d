//! Billboard renderer for synthetic driving scenes.
//!
//! Each object is drawn as its projected 2D box filled with three channels:
//! occupancy, scaled inverse depth of the object center, and a per-object
//! identity value. The pseudo depth map is the rendered depth plus Gaussian
//! noise, standing in for a frozen monocular depth estimator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use skd_autodiff::Tensor;

use super::config::SceneConfig;
use crate::error::{CoreError, Result};
use crate::geometry::{bev_iou, normalize_angle, project_box3d_to_box2d, Box2D, Box3D};

/// Smallest pseudo-depth value written on a valid pixel.
pub const PSEUDO_DEPTH_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub index: u64,
    /// Regeneration attempt that produced this scene (0 unless placement failed).
    pub attempt: u32,
    /// `[3, H, W]`
    pub features: Tensor,
    /// Evaluation only; never read by the training losses.
    pub gt_boxes3d: Vec<Box3D>,
    pub ann_boxes2d: Vec<Box2D>,
    /// `[H, W]` meters, 0 where invalid
    pub pseudo_depth: Tensor,
    /// row-major `H * W`
    pub valid_mask: Vec<bool>,
}

/// Per-scene RNG stream: sha256 of (seed, index, attempt).
pub fn scene_rng(seed: u64, index: u64, attempt: u32) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"skd-scene");
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    h.update(attempt.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn identity_value(index: u64, k: usize) -> f64 {
    // splitmix64 finalizer
    let mut z = index
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(k as u64 + 1);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    0.5 + 0.5 * (z % 1000) as f64 / 1000.0
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("validated std")
}

fn try_place(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Option<Vec<Box3D>>> {
    let [nmin, nmax] = cfg.objects_per_scene;
    let n = rng.random_range(nmin..=nmax);
    let [dmin, dmax] = cfg.depth_range;
    let (w, h) = (cfg.width() as f64, cfg.height() as f64);
    let m = cfg.image_margin;
    if w - m <= m {
        return Err(CoreError::contract(format!(
            "image margin {m} leaves no room in width {w}"
        )));
    }
    let jitter = normal(cfg.dim_jitter);
    let yaw_jitter = normal(cfg.yaw_jitter);
    let mut boxes: Vec<Box3D> = Vec::with_capacity(n);
    let mut projected: Vec<Box2D> = Vec::with_capacity(n);
    for _ in 0..cfg.placement_tries {
        if boxes.len() == n {
            break;
        }
        let z = rng.random_range(dmin..dmax);
        let [h0, w0, l0] = cfg.dim_priors;
        let bh = h0 * jitter.sample(rng).exp();
        let bw = w0 * jitter.sample(rng).exp();
        let bl = l0 * jitter.sample(rng).exp();
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let theta = normalize_angle(side * std::f64::consts::FRAC_PI_2 + yaw_jitter.sample(rng));
        let u = rng.random_range(m..w - m);
        let x = (u - cfg.cam.cx) * z / cfg.cam.fx;
        let y = cfg.camera_height - bh / 2.0;
        let b = Box3D {
            x,
            y,
            z,
            h: bh,
            w: bw,
            l: bl,
            theta,
        };
        let Ok(p) = project_box3d_to_box2d(&b, &cfg.cam) else {
            continue;
        };
        if p.u_min < m || p.v_min < m || p.u_max > w - m || p.v_max > h - m {
            continue;
        }
        let sep = cfg.min_separation;
        let clear = projected
            .iter()
            .all(|q| p.u_max + sep <= q.u_min || q.u_max + sep <= p.u_min);
        if !clear || boxes.iter().any(|o| bev_iou(&b, o) >= 0.05) {
            continue;
        }
        boxes.push(b);
        projected.push(p);
    }
    Ok((boxes.len() == n).then_some(boxes))
}

/// Rendered feature image, exact depth and validity for a set of boxes.
pub fn render(
    cfg: &SceneConfig,
    index: u64,
    boxes: &[Box3D],
) -> Result<(Tensor, Tensor, Vec<bool>)> {
    let (w, h) = (cfg.width(), cfg.height());
    let mut features = vec![0.0; 3 * h * w];
    let mut depth = vec![0.0; h * w];
    let mut valid = vec![false; h * w];
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    // painter's order: far objects first
    order.sort_by(|&a, &b| boxes[b].z.total_cmp(&boxes[a].z));
    let dmin = cfg.depth_range[0];
    for k in order {
        let b = &boxes[k];
        let p = project_box3d_to_box2d(b, &cfg.cam)?;
        let inv = cfg.inverse_depth_gain * dmin / b.z;
        let ident = identity_value(index, k);
        for i in 0..h {
            let v = i as f64 + 0.5;
            if v < p.v_min || v > p.v_max {
                continue;
            }
            for j in 0..w {
                let u = j as f64 + 0.5;
                if u < p.u_min || u > p.u_max {
                    continue;
                }
                let px = i * w + j;
                features[px] = 1.0;
                features[h * w + px] = inv;
                features[2 * h * w + px] = ident;
                depth[px] = b.z;
                valid[px] = true;
            }
        }
    }
    Ok((
        Tensor::new(vec![3, h, w], features)?,
        Tensor::new(vec![h, w], depth)?,
        valid,
    ))
}

/// Deterministic function of `(cfg, index)`.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<Scene> {
    cfg.validate()?;
    for attempt in 0..cfg.max_attempts {
        let mut rng = scene_rng(cfg.seed, index, attempt);
        let Some(boxes) = try_place(cfg, &mut rng)? else {
            continue;
        };
        let (features, depth, valid_mask) = render(cfg, index, &boxes)?;
        let noise = normal(cfg.depth_noise_std);
        let mut pseudo = depth.into_data();
        for (d, &ok) in pseudo.iter_mut().zip(&valid_mask) {
            if ok {
                let eps = noise.sample(&mut rng);
                *d = (*d + cfg.depth_bias + eps).max(PSEUDO_DEPTH_FLOOR);
            }
        }
        let ann_boxes2d = boxes
            .iter()
            .map(|b| project_box3d_to_box2d(b, &cfg.cam))
            .collect::<Result<Vec<_>>>()?;
        return Ok(Scene {
            index,
            attempt,
            features,
            gt_boxes3d: boxes,
            ann_boxes2d,
            pseudo_depth: Tensor::new(vec![cfg.height(), cfg.width()], pseudo)?,
            valid_mask,
        });
    }
    Err(CoreError::contract(format!(
        "scene {index}: placement failed in all {} attempts",
        cfg.max_attempts
    )))
}
