use serde::{Deserialize, Serialize};
use skd_autodiff::AdamConfig;

use crate::error::{CoreError, Result};
use crate::model::Architecture;

/// Which subnetworks are built and trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Networks {
    Both,
    MdnOnly,
    DsnOnly,
}

impl Networks {
    pub fn has_dsn(self) -> bool {
        self != Self::MdnOnly
    }

    pub fn has_mdn(self) -> bool {
        self != Self::DsnOnly
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        let d = AdamConfig::default();
        Self {
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
        }
    }
}

impl From<AdamSettings> for AdamConfig {
    fn from(s: AdamSettings) -> Self {
        AdamConfig {
            beta1: s.beta1,
            beta2: s.beta2,
            eps: s.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: f64,
    pub lr_start: f64,
    pub lr_peak: f64,
    /// Fractions of `epochs` at which the rate is multiplied by `decay_factor`.
    pub decay_at: Vec<f64>,
    pub decay_factor: f64,
    /// Parameter initialization and shuffling.
    pub seed: u64,
    pub networks: Networks,
    pub tms_enabled: bool,
    /// Off: the plain SmoothL1 distillation loss.
    pub ud_enabled: bool,
    pub detach_ud_denominator: bool,
    /// Decay of an exponential average over the TMS projection losses; none applies them raw.
    pub tms_ema: Option<f64>,
    pub alpha: f64,
    pub adam: AdamSettings,
    /// Steps between metric rows.
    pub log_every: usize,
    /// Epochs between checkpoints.
    pub checkpoint_every: usize,
    pub train_split: String,
    pub val_split: String,
    /// Proposal source of the final evaluation.
    pub eval_mode: String,
    pub arch: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            warmup_epochs: 5.0,
            lr_start: 1e-5,
            lr_peak: 1e-3,
            decay_at: vec![0.6, 0.8],
            decay_factor: 0.1,
            seed: 0,
            networks: Networks::Both,
            tms_enabled: true,
            ud_enabled: true,
            detach_ud_denominator: false,
            tms_ema: None,
            alpha: crate::losses::ALPHA,
            adam: AdamSettings::default(),
            log_every: 1,
            checkpoint_every: 10,
            train_split: "train".into(),
            val_split: "val".into(),
            eval_mode: "gt-proposals".into(),
            arch: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Contract(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.epochs as f64) {
            return bad(format!(
                "warmup_epochs {} must lie in [0, epochs)",
                self.warmup_epochs
            ));
        }
        if !(self.lr_start > 0.0 && self.lr_peak > 0.0 && self.decay_factor > 0.0) {
            return bad("learning rates and decay factor must be positive".into());
        }
        if self.decay_at.windows(2).any(|w| w[0] >= w[1])
            || self.decay_at.iter().any(|&d| !(0.0..=1.0).contains(&d))
        {
            return bad(format!(
                "decay points {:?} must be strictly increasing in [0, 1]",
                self.decay_at
            ));
        }
        if !(self.alpha > 0.0) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if let Some(k) = self.tms_ema {
            if !(0.0..1.0).contains(&k) {
                return bad(format!("tms_ema decay must lie in [0, 1), got {k}"));
            }
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return bad("log_every and checkpoint_every must be positive".into());
        }
        Ok(())
    }

    /// Registry name of the distillation loss these flags select.
    pub fn distillation_name(&self) -> &'static str {
        match (self.ud_enabled, self.detach_ud_denominator) {
            (false, _) => "plain",
            (true, false) => "uncertainty-aware",
            (true, true) => "uncertainty-aware-detached",
        }
    }

    /// Registry name of the transfer modulation these flags select.
    pub fn modulation_name(&self) -> &'static str {
        match (self.tms_enabled, self.tms_ema) {
            (false, _) => "none",
            (true, None) => "gradient-targeted",
            (true, Some(_)) => "gradient-targeted-ema",
        }
    }

    pub fn steps_per_epoch(&self, num_scenes: usize) -> usize {
        num_scenes.div_ceil(self.batch_size)
    }

    /// Learning rate at a global step: linear warmup in epochs, then step decay.
    pub fn lr_at(&self, step: u64, steps_per_epoch: usize) -> f64 {
        let epoch = step as f64 / steps_per_epoch as f64;
        if epoch < self.warmup_epochs {
            return self.lr_start + (self.lr_peak - self.lr_start) * epoch / self.warmup_epochs;
        }
        let total = self.epochs as f64;
        let decays = self
            .decay_at
            .iter()
            .filter(|&&d| epoch >= d * total)
            .count();
        self.lr_peak * self.decay_factor.powi(decays as i32)
    }
}
