use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use skd_autodiff::{softplus, Tensor};

use super::config::ModelConfig;
use crate::error::{CoreError, Result};

/// Output columns of the 3D heads.
pub mod col {
    pub const DU: usize = 0;
    pub const DV: usize = 1;
    pub const Z: usize = 2;
    pub const LOG_H: usize = 3;
    pub const LOG_W: usize = 4;
    pub const LOG_L: usize = 5;
    pub const SIN: usize = 6;
    pub const COS: usize = 7;
    pub const LOG_U: usize = 8;
    pub const COUNT: usize = 9;
}

/// Which subnetwork owns a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    DepthHead,
    Fusion,
    DsnHead,
    MdnHead,
    TwoDHead,
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Added to the softplus so uncertainty stays positive when it underflows.
pub(crate) const UNCERTAINTY_FLOOR: f64 = 1e-6;

/// Inverse of softplus for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let a = &cfg.arch;
    let d = a.width;
    let mut out = Vec::new();
    let mut linear = |name: &str, fan_in: usize, fan_out: usize| {
        out.push((format!("{name}.w"), vec![fan_in, fan_out]));
        out.push((format!("{name}.b"), vec![1, fan_out]));
    };
    linear("enc.patch", cfg.patch_dim(), a.encoder_hidden);
    linear("enc.hidden1", a.encoder_hidden, a.encoder_hidden);
    linear("enc.hidden2", a.encoder_hidden, d);
    linear("depth.feat", d, d);
    linear("depth.hidden", d, a.depth_hidden);
    linear("depth.logits", a.depth_hidden, a.depth_bins);
    for block in ["fusion.sa", "fusion.ca"] {
        for proj in ["q", "k", "v"] {
            linear(&format!("{block}.{proj}"), d, d);
        }
    }
    linear("fusion.ffn1", d, a.ffn_hidden);
    linear("fusion.ffn2", a.ffn_hidden, d);
    for head in ["dsn_head", "mdn_head"] {
        linear(&format!("{head}.hidden"), cfg.head_input(), a.head_hidden);
        linear(&format!("{head}.out"), a.head_hidden, col::COUNT);
    }
    linear("twod", d, 5);
    out
}

impl ModelParams {
    /// He-normal weights, zero biases, and head biases set to the initial box.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in layout(cfg) {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".w") {
                let std = (2.0 / shape[0] as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let gain = if name.ends_with("_head.out.w") {
                    cfg.arch.output_init_gain
                } else {
                    1.0
                };
                (0..n).map(|_| gain * normal.sample(&mut rng)).collect()
            } else {
                let mut b = vec![0.0; n];
                if name.ends_with("_head.out.b") {
                    let [dmin, _] = cfg.depth_range;
                    b[col::Z] = inverse_softplus(cfg.arch.initial_depth - dmin);
                    // facing along the optical axis
                    b[col::SIN] = 1.0;
                    b[col::LOG_U] =
                        inverse_softplus(cfg.arch.initial_uncertainty - UNCERTAINTY_FLOOR);
                }
                b
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        debug_assert!((softplus(inverse_softplus(0.05)) - 0.05).abs() < 1e-12);
        Ok(Self { names, tensors })
    }

    /// Rebuild from named tensors, checking names and shapes against the layout.
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let expected = layout(cfg);
        if named.len() != expected.len() {
            return Err(CoreError::contract(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        for ((name, t), (want, shape)) in named.iter().zip(&expected) {
            if name != want || t.shape() != shape.as_slice() {
                return Err(CoreError::contract(format!(
                    "parameter '{name}' {:?} does not match expected '{want}' {shape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(CoreError::contract(format!(
                    "parameter '{name}' has non-finite values"
                )));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn group_of(name: &str) -> ParamGroup {
        match name.split('.').next().unwrap_or("") {
            "enc" => ParamGroup::Encoder,
            "depth" => ParamGroup::DepthHead,
            "fusion" => ParamGroup::Fusion,
            "dsn_head" => ParamGroup::DsnHead,
            "mdn_head" => ParamGroup::MdnHead,
            _ => ParamGroup::TwoDHead,
        }
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}
