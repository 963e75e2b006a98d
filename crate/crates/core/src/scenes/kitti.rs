//! KITTI object label lines: 15 fields for ground truth, 16 with a score.

use std::fmt::Write as _;

use crate::error::{CoreError, Result};
use crate::geometry::{normalize_angle, Box2D, Box3D};

#[derive(Debug, Clone, PartialEq)]
pub struct KittiLabelRecord {
    pub kind: String,
    pub truncated: f64,
    pub occluded: f64,
    pub alpha: f64,
    /// left, top, right, bottom in pixels
    pub bbox: [f64; 4],
    /// h, w, l in meters
    pub dimensions: [f64; 3],
    /// bottom-face center x, y, z in camera coordinates
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NumberFormat {
    /// Two decimal places, as in the official label files.
    #[default]
    TwoDecimals,
    /// Shortest representation that parses back to the same `f64`.
    Lossless,
}

const FIELD_NAMES: [&str; 16] = [
    "type",
    "truncated",
    "occluded",
    "alpha",
    "bbox_left",
    "bbox_top",
    "bbox_right",
    "bbox_bottom",
    "height",
    "width",
    "length",
    "x",
    "y",
    "z",
    "rotation_y",
    "score",
];

pub fn parse_kitti_label(line: &str) -> Result<KittiLabelRecord> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() < 15 {
        return Err(CoreError::Parse {
            column: fields.len() + 1,
            message: format!("expected 15 or 16 fields, found {}", fields.len()),
        });
    }
    if fields.len() > 16 {
        return Err(CoreError::Parse {
            column: 17,
            message: format!("expected 15 or 16 fields, found {}", fields.len()),
        });
    }
    let num = |i: usize| -> Result<f64> {
        let v: f64 = fields[i].parse().map_err(|_| CoreError::Parse {
            column: i + 1,
            message: format!("{} is not a number: '{}'", FIELD_NAMES[i], fields[i]),
        })?;
        if !v.is_finite() {
            return Err(CoreError::Parse {
                column: i + 1,
                message: format!("{} is not finite: '{}'", FIELD_NAMES[i], fields[i]),
            });
        }
        Ok(v)
    };
    Ok(KittiLabelRecord {
        kind: fields[0].to_string(),
        truncated: num(1)?,
        occluded: num(2)?,
        alpha: num(3)?,
        bbox: [num(4)?, num(5)?, num(6)?, num(7)?],
        dimensions: [num(8)?, num(9)?, num(10)?],
        location: [num(11)?, num(12)?, num(13)?],
        rotation_y: num(14)?,
        score: if fields.len() == 16 {
            Some(num(15)?)
        } else {
            None
        },
    })
}

fn push_number(out: &mut String, v: f64, format: NumberFormat) {
    match format {
        NumberFormat::TwoDecimals => {
            let s = format!("{v:.2}");
            // Small negatives round to "-0.00", which would not be a fixed point.
            if s == "-0.00" {
                out.push_str("0.00");
            } else {
                out.push_str(&s);
            }
        }
        NumberFormat::Lossless => {
            let _ = write!(out, "{v}");
        }
    }
}

pub fn write_kitti_label(record: &KittiLabelRecord, format: NumberFormat) -> String {
    let mut out = String::with_capacity(128);
    out.push_str(&record.kind);
    let field = |out: &mut String, v: f64| {
        out.push(' ');
        push_number(out, v, format);
    };
    field(&mut out, record.truncated);
    // Occlusion is an integer state in the official files.
    out.push(' ');
    let mark = out.len();
    push_number(&mut out, record.occluded, format);
    if format == NumberFormat::TwoDecimals && out.ends_with(".00") {
        out.truncate(out.len() - 3);
    }
    debug_assert!(out.len() > mark);
    field(&mut out, record.alpha);
    for v in record.bbox {
        field(&mut out, v);
    }
    for v in record.dimensions {
        field(&mut out, v);
    }
    for v in record.location {
        field(&mut out, v);
    }
    field(&mut out, record.rotation_y);
    if let Some(s) = record.score {
        field(&mut out, s);
    }
    out
}

/// Observation angle: yaw relative to the viewing ray through the box center.
pub fn observation_angle(b: &Box3D) -> f64 {
    normalize_angle(b.theta - b.x.atan2(b.z))
}

/// Bottom-center record to geometric-center box (`y_center = y_bottom - h/2`).
pub fn record_to_box(record: &KittiLabelRecord) -> Result<Box3D> {
    let [h, w, l] = record.dimensions;
    if !(h > 0.0 && w > 0.0 && l > 0.0) {
        return Err(CoreError::contract(format!(
            "box dimensions must be positive, got h={h} w={w} l={l}"
        )));
    }
    let [x, y_bottom, z] = record.location;
    Ok(Box3D {
        x,
        y: y_bottom - h / 2.0,
        z,
        h,
        w,
        l,
        theta: record.rotation_y,
    })
}

/// Geometric-center box to a bottom-center record.
pub fn box_to_record(b: &Box3D, bbox: &Box2D, score: Option<f64>) -> Result<KittiLabelRecord> {
    if !(b.h > 0.0 && b.w > 0.0 && b.l > 0.0) {
        return Err(CoreError::contract(format!(
            "box dimensions must be positive, got h={} w={} l={}",
            b.h, b.w, b.l
        )));
    }
    Ok(KittiLabelRecord {
        kind: "Car".to_string(),
        truncated: 0.0,
        occluded: 0.0,
        alpha: observation_angle(b),
        bbox: bbox.to_array(),
        dimensions: [b.h, b.w, b.l],
        location: [b.x, b.y + b.h / 2.0, b.z],
        rotation_y: b.theta,
        score,
    })
}
