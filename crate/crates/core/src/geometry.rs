//! Pinhole projection of oriented boxes and rotated-box overlap.
//!
//! Camera coordinates: +x right, +y down, +z forward. A box's yaw rotates
//! its length axis about +y, KITTI style, and its location is the geometric
//! center.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(CoreError::contract(format!(
                "invalid camera intrinsics {self:?}"
            )));
        }
        Ok(())
    }

    pub fn project_point(&self, x: f64, y: f64, z: f64) -> (f64, f64) {
        (self.fx * x / z + self.cx, self.fy * y / z + self.cy)
    }
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 100.0,
            fy: 100.0,
            cx: 32.0,
            cy: 32.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
}

/// Wrap an angle into (-pi, pi].
pub fn normalize_angle(theta: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut t = theta % two_pi;
    if t <= -std::f64::consts::PI {
        t += two_pi;
    } else if t > std::f64::consts::PI {
        t -= two_pi;
    }
    t
}

impl Box3D {
    pub fn volume(&self) -> f64 {
        self.h * self.w * self.l
    }

    /// The eight corners, ordered by (length sign, height sign, width sign).
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let (s, c) = self.theta.sin_cos();
        let mut out = [[0.0; 3]; 8];
        let mut k = 0;
        for lx in [self.l / 2.0, -self.l / 2.0] {
            for hy in [self.h / 2.0, -self.h / 2.0] {
                for wz in [self.w / 2.0, -self.w / 2.0] {
                    out[k] = [
                        self.x + c * lx + s * wz,
                        self.y + hy,
                        self.z - s * lx + c * wz,
                    ];
                    k += 1;
                }
            }
        }
        out
    }

    /// Ground-plane footprint as (x, z) vertices in counter-clockwise order.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.theta.sin_cos();
        let pts = [
            (self.l / 2.0, self.w / 2.0),
            (-self.l / 2.0, self.w / 2.0),
            (-self.l / 2.0, -self.w / 2.0),
            (self.l / 2.0, -self.w / 2.0),
        ]
        .map(|(lx, wz)| [self.x + c * lx + s * wz, self.z - s * lx + c * wz]);
        if signed_area(&pts) < 0.0 {
            [pts[3], pts[2], pts[1], pts[0]]
        } else {
            pts
        }
    }
}

impl Box2D {
    pub fn width(&self) -> f64 {
        self.u_max - self.u_min
    }

    pub fn height(&self) -> f64 {
        self.v_max - self.v_min
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.u_min + self.u_max) / 2.0,
            (self.v_min + self.v_max) / 2.0,
        )
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.u_min, self.v_min, self.u_max, self.v_max]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            u_min: a[0],
            v_min: a[1],
            u_max: a[2],
            v_max: a[3],
        }
    }
}

/// Axis-aligned hull of the eight projected corners. Not clipped to the image.
pub fn project_box3d_to_box2d(b: &Box3D, cam: &CameraIntrinsics) -> Result<Box2D> {
    let mut out = Box2D {
        u_min: f64::INFINITY,
        v_min: f64::INFINITY,
        u_max: f64::NEG_INFINITY,
        v_max: f64::NEG_INFINITY,
    };
    for [x, y, z] in b.corners() {
        if z <= 0.0 {
            return Err(CoreError::BehindCamera { z });
        }
        let (u, v) = cam.project_point(x, y, z);
        out.u_min = out.u_min.min(u);
        out.v_min = out.v_min.min(v);
        out.u_max = out.u_max.max(u);
        out.v_max = out.v_max.max(v);
    }
    Ok(out)
}

fn signed_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc / 2.0
}

/// Shoelace area of a simple polygon.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    signed_area(poly).abs()
}

fn cross(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

fn line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let cp = cross(a, b, p);
    let cq = cross(a, b, q);
    let t = cp / (cp - cq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Sutherland–Hodgman: clip `subject` by the convex counter-clockwise `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let p_in = cross(a, b, p) >= 0.0;
            let q_in = cross(a, b, q) >= 0.0;
            if p_in {
                output.push(p);
                if !q_in {
                    output.push(line_intersection(p, q, a, b));
                }
            } else if q_in {
                output.push(line_intersection(p, q, a, b));
            }
        }
    }
    output
}

fn footprint_intersection(a: &Box3D, b: &Box3D) -> f64 {
    let pa = a.footprint();
    let pb = b.footprint();
    let clipped = clip_convex(&pa, &pb);
    if clipped.len() < 3 {
        0.0
    } else {
        polygon_area(&clipped)
    }
}

fn ratio(inter: f64, union: f64) -> f64 {
    if union <= 0.0 || !inter.is_finite() {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Intersection over union of the two ground-plane footprints.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    // Order the pair so that swapping arguments is bit-identical.
    let (a, b) = canonical_order(a, b);
    let inter = footprint_intersection(a, b);
    let union = a.l * a.w + b.l * b.w - inter;
    ratio(inter, union)
}

/// Volume IoU: footprint intersection times vertical overlap along y.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let (a, b) = canonical_order(a, b);
    let top = (a.y + a.h / 2.0).min(b.y + b.h / 2.0);
    let bottom = (a.y - a.h / 2.0).max(b.y - b.h / 2.0);
    let overlap = (top - bottom).max(0.0);
    if overlap == 0.0 {
        return 0.0;
    }
    let inter = footprint_intersection(a, b) * overlap;
    let union = a.volume() + b.volume() - inter;
    ratio(inter, union)
}

fn canonical_order<'a>(a: &'a Box3D, b: &'a Box3D) -> (&'a Box3D, &'a Box3D) {
    let key = |q: &Box3D| [q.x, q.y, q.z, q.h, q.w, q.l, q.theta].map(f64::to_bits);
    if key(a) <= key(b) {
        (a, b)
    } else {
        (b, a)
    }
}
