use skd_autodiff::softplus;

use crate::geometry::{Box2D, Box3D, CameraIntrinsics};

/// Raw head targets `[du, dv, z, log h/h0, log w/w0, log l/l0, sin, cos]`.
pub type RawTargets = [f64; 8];

/// One decoded RoI prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxPrediction {
    pub raw_targets: RawTargets,
    pub uncertainty: f64,
    pub decoded: Box3D,
}

/// Raw targets to a metric box.
///
/// The center pixel is the RoI center offset by `du, dv` RoI sizes; depth is
/// `d_min + softplus(z)`; the center is back-projected at that depth.
pub fn decode_box(
    raw: &RawTargets,
    roi: &Box2D,
    cam: &CameraIntrinsics,
    priors: [f64; 3],
    d_min: f64,
) -> Box3D {
    let (cu, cv) = roi.center();
    let u = cu + raw[0] * roi.width();
    let v = cv + raw[1] * roi.height();
    let z = d_min + softplus(raw[2]);
    let norm = (raw[6] * raw[6] + raw[7] * raw[7] + 1e-12).sqrt();
    Box3D {
        x: (u - cam.cx) * z / cam.fx,
        y: (v - cam.cy) * z / cam.fy,
        z,
        h: priors[0] * raw[3].exp(),
        w: priors[1] * raw[4].exp(),
        l: priors[2] * raw[5].exp(),
        theta: (raw[6] / norm).atan2(raw[7] / norm),
    }
}

/// The 8-vector `[x, y, z, h, w, l, sin, cos]` used by the distillation loss.
pub fn metric_vector(b: &Box3D) -> [f64; 8] {
    let (s, c) = b.theta.sin_cos();
    [b.x, b.y, b.z, b.h, b.w, b.l, s, c]
}
