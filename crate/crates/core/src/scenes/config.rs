use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::CameraIntrinsics;

/// Scene generator settings. Every field has a default, so partial JSON files work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// width, height in pixels
    pub image_size: [usize; 2],
    pub cam: CameraIntrinsics,
    /// inclusive object-count range
    pub objects_per_scene: [usize; 2],
    /// meters; object centers are drawn uniformly in this range
    pub depth_range: [f64; 2],
    /// h0, w0, l0 in meters
    pub dim_priors: [f64; 3],
    /// std of the log-normal dimension jitter
    pub dim_jitter: f64,
    pub depth_noise_std: f64,
    /// constant offset added to the pseudo depth
    pub depth_bias: f64,
    pub seed: u64,
    /// camera height above the ground plane in meters
    pub camera_height: f64,
    /// yaw is +-pi/2 (road aligned) plus Gaussian jitter of this std
    pub yaw_jitter: f64,
    /// minimum distance of a projected box from the image border, in pixels
    pub image_margin: f64,
    /// minimum horizontal gap between projected boxes, in pixels
    pub min_separation: f64,
    /// scale of the inverse-depth feature channel
    pub inverse_depth_gain: f64,
    /// placement draws per attempt before the scene is regenerated
    pub placement_tries: usize,
    /// regeneration attempts before giving up
    pub max_attempts: u32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: [64, 64],
            cam: CameraIntrinsics::default(),
            objects_per_scene: [1, 4],
            depth_range: [5.0, 40.0],
            dim_priors: [1.5, 1.6, 3.9],
            dim_jitter: 0.15,
            depth_noise_std: 0.5,
            depth_bias: 0.0,
            seed: 0,
            camera_height: 1.65,
            yaw_jitter: 0.15,
            image_margin: 2.0,
            min_separation: 8.0,
            inverse_depth_gain: 8.0,
            placement_tries: 200,
            max_attempts: 64,
        }
    }
}

impl SceneConfig {
    pub fn width(&self) -> usize {
        self.image_size[0]
    }

    pub fn height(&self) -> usize {
        self.image_size[1]
    }

    pub fn validate(&self) -> Result<()> {
        self.cam.validate()?;
        let bad = |msg: String| Err(CoreError::contract(msg));
        let [w, h] = self.image_size;
        if w == 0 || h == 0 {
            return bad(format!("image size must be positive, got {w}x{h}"));
        }
        let [dmin, dmax] = self.depth_range;
        if !(dmin > 0.0 && dmax > dmin && dmax.is_finite()) {
            return bad(format!(
                "depth range must satisfy 0 < min < max, got {dmin}..{dmax}"
            ));
        }
        let [nmin, nmax] = self.objects_per_scene;
        if nmin < 1 || nmax < nmin {
            return bad(format!(
                "objects_per_scene must satisfy 1 <= min <= max, got {nmin}..{nmax}"
            ));
        }
        if self.dim_priors.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return bad(format!(
                "dimension priors must be positive, got {:?}",
                self.dim_priors
            ));
        }
        for (name, v) in [
            ("dim_jitter", self.dim_jitter),
            ("depth_noise_std", self.depth_noise_std),
            ("yaw_jitter", self.yaw_jitter),
            ("image_margin", self.image_margin),
            ("min_separation", self.min_separation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !self.depth_bias.is_finite() || !self.camera_height.is_finite() {
            return bad("depth_bias and camera_height must be finite".into());
        }
        if !(self.inverse_depth_gain > 0.0 && self.inverse_depth_gain.is_finite()) {
            return bad(format!(
                "inverse_depth_gain must be positive, got {}",
                self.inverse_depth_gain
            ));
        }
        if self.placement_tries == 0 || self.max_attempts == 0 {
            return bad("placement_tries and max_attempts must be positive".into());
        }
        Ok(())
    }
}
