use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::geometry::CameraIntrinsics;
use crate::scenes::SceneConfig;

/// Network widths and initial output values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub patch: usize,
    /// token width d
    pub width: usize,
    /// width of the encoder's inner layers
    pub encoder_hidden: usize,
    pub depth_bins: usize,
    pub depth_hidden: usize,
    pub ffn_hidden: usize,
    /// RoI tile side S
    pub roi_size: usize,
    pub head_hidden: usize,
    /// initial MDN depth in meters
    pub initial_depth: f64,
    pub initial_uncertainty: f64,
    /// multiplier on the initial weights of the box output layers
    pub output_init_gain: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            patch: 4,
            width: 16,
            encoder_hidden: 128,
            depth_bins: 64,
            depth_hidden: 256,
            ffn_hidden: 32,
            roi_size: 4,
            head_hidden: 32,
            initial_depth: 15.0,
            initial_uncertainty: 0.05,
            output_init_gain: 0.1,
        }
    }
}

/// Everything a checkpoint depends on: architecture plus scene geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub image_size: [usize; 2],
    pub cam: CameraIntrinsics,
    pub depth_range: [f64; 2],
    pub dim_priors: [f64; 3],
}

impl ModelConfig {
    pub fn new(arch: Architecture, scene: &SceneConfig) -> Result<Self> {
        let cfg = Self {
            arch,
            image_size: scene.image_size,
            cam: scene.cam,
            depth_range: scene.depth_range,
            dim_priors: scene.dim_priors,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        let [w, h] = self.image_size;
        if a.patch == 0 || w % (2 * a.patch) != 0 || h % (2 * a.patch) != 0 || w != h {
            return Err(CoreError::contract(format!(
                "image {w}x{h} must be square and divisible by twice the patch size {}",
                a.patch
            )));
        }
        if self.grid() < 2 {
            return Err(CoreError::contract("token grid must be at least 2x2"));
        }
        for (name, v) in [
            ("width", a.width),
            ("encoder_hidden", a.encoder_hidden),
            ("depth_bins", a.depth_bins),
            ("depth_hidden", a.depth_hidden),
            ("ffn_hidden", a.ffn_hidden),
            ("roi_size", a.roi_size),
            ("head_hidden", a.head_hidden),
        ] {
            if v == 0 {
                return Err(CoreError::contract(format!("{name} must be positive")));
            }
        }
        let [dmin, dmax] = self.depth_range;
        if !(dmin > 0.0 && dmax > dmin) {
            return Err(CoreError::contract(format!(
                "bad depth range {dmin}..{dmax}"
            )));
        }
        if !(a.initial_depth > dmin && a.initial_uncertainty > 1e-6 && a.output_init_gain >= 0.0) {
            return Err(CoreError::contract(
                "initial depth must exceed the depth minimum and initial uncertainty must be positive",
            ));
        }
        self.cam.validate()
    }

    /// Tokens per side after patchify and one 2x pool.
    pub fn grid(&self) -> usize {
        self.image_size[0] / (2 * self.arch.patch)
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Token cell side in pixels.
    pub fn cell(&self) -> f64 {
        (2 * self.arch.patch) as f64
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.arch.patch * self.arch.patch
    }

    pub fn head_input(&self) -> usize {
        self.arch.roi_size * self.arch.roi_size * self.arch.width + 4
    }

    /// Depth-bin centers over the depth range.
    pub fn bin_centers(&self) -> Vec<f64> {
        let [dmin, dmax] = self.depth_range;
        let k = self.arch.depth_bins;
        (0..k)
            .map(|i| dmin + (i as f64 + 0.5) * (dmax - dmin) / k as f64)
            .collect()
    }

    /// Bin index of a depth, clamped into range.
    pub fn bin_of(&self, depth: f64) -> usize {
        let [dmin, dmax] = self.depth_range;
        let k = self.arch.depth_bins;
        let t = ((depth - dmin) / (dmax - dmin) * k as f64).floor();
        (t.max(0.0) as usize).min(k - 1)
    }

    /// sha256 of the canonical JSON form.
    pub fn checksum(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
