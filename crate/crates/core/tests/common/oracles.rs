//! Independent reference implementations used only by tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skd_core::geometry::{Box2D, Box3D, CameraIntrinsics};

/// Is ground-plane point (px, pz) inside the box footprint? Works in the box frame.
fn in_footprint(b: &Box3D, px: f64, pz: f64) -> bool {
    let (dx, dz) = (px - b.x, pz - b.z);
    // Inverse of the yaw rotation: local length axis (cos, -sin), width axis (sin, cos).
    let (s, c) = b.theta.sin_cos();
    let along = c * dx - s * dz;
    let across = s * dx + c * dz;
    along.abs() <= b.l / 2.0 && across.abs() <= b.w / 2.0
}

/// BEV IoU by uniform point sampling over a square that covers both footprints.
pub fn monte_carlo_bev_iou(a: &Box3D, b: &Box3D, samples: usize, seed: u64) -> f64 {
    let ra = 0.5 * (a.l * a.l + a.w * a.w).sqrt();
    let rb = 0.5 * (b.l * b.l + b.w * b.w).sqrt();
    let x0 = (a.x - ra).min(b.x - rb);
    let x1 = (a.x + ra).max(b.x + rb);
    let z0 = (a.z - ra).min(b.z - rb);
    let z1 = (a.z + ra).max(b.z + rb);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut na, mut nb, mut both) = (0u64, 0u64, 0u64);
    for _ in 0..samples {
        let px = rng.random_range(x0..x1);
        let pz = rng.random_range(z0..z1);
        let ia = in_footprint(a, px, pz);
        let ib = in_footprint(b, px, pz);
        na += ia as u64;
        nb += ib as u64;
        both += (ia && ib) as u64;
    }
    let union = na + nb - both;
    if union == 0 {
        0.0
    } else {
        both as f64 / union as f64
    }
}

/// Project the eight corners with an explicit rotation matrix and take the hull.
pub fn naive_projection(b: &Box3D, cam: &CameraIntrinsics) -> Box2D {
    let r = [
        [b.theta.cos(), 0.0, b.theta.sin()],
        [0.0, 1.0, 0.0],
        [-b.theta.sin(), 0.0, b.theta.cos()],
    ];
    let mut us = Vec::new();
    let mut vs = Vec::new();
    for sl in [-0.5, 0.5] {
        for sh in [-0.5, 0.5] {
            for sw in [-0.5, 0.5] {
                let local = [sl * b.l, sh * b.h, sw * b.w];
                let mut p = [b.x, b.y, b.z];
                for (i, row) in r.iter().enumerate() {
                    p[i] += row[0] * local[0] + row[1] * local[1] + row[2] * local[2];
                }
                us.push(cam.fx * p[0] / p[2] + cam.cx);
                vs.push(cam.fy * p[1] / p[2] + cam.cy);
            }
        }
    }
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Box2D {
        u_min: min(&us),
        v_min: min(&vs),
        u_max: max(&us),
        v_max: max(&vs),
    }
}

/// AP|R40 by enumerating every distinct score as a threshold.
pub fn brute_force_ap(scored: &[(f64, bool)], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut thresholds: Vec<f64> = scored.iter().map(|s| s.0).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut points = Vec::new();
    for &t in &thresholds {
        let tp = scored.iter().filter(|s| s.0 >= t && s.1).count();
        let fp = scored.iter().filter(|s| s.0 >= t && !s.1).count();
        points.push((tp, tp as f64 / (tp + fp) as f64));
    }
    let mut total = 0.0;
    for i in 1..=40usize {
        let mut best = 0.0f64;
        for &(tp, p) in &points {
            // recall tp/num_gt >= i/40
            if tp * 40 >= i * num_gt {
                best = best.max(p);
            }
        }
        total += best;
    }
    total / 40.0
}

pub fn random_box(rng: &mut ChaCha8Rng) -> Box3D {
    Box3D {
        x: rng.random_range(-10.0..10.0),
        y: rng.random_range(-2.0..2.0),
        z: rng.random_range(8.0..40.0),
        h: rng.random_range(0.5..3.0),
        w: rng.random_range(0.5..3.0),
        l: rng.random_range(0.5..6.0),
        theta: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    }
}

/// A second box near `a`, so that pairs overlap often.
pub fn nearby_box(rng: &mut ChaCha8Rng, a: &Box3D) -> Box3D {
    Box3D {
        x: a.x + rng.random_range(-2.0..2.0),
        y: a.y + rng.random_range(-0.5..0.5),
        z: a.z + rng.random_range(-2.0..2.0),
        h: rng.random_range(0.5..3.0),
        w: rng.random_range(0.5..3.0),
        l: rng.random_range(0.5..6.0),
        theta: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    }
}
