//! Central finite-difference checks for tape gradients.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{GateFactor, NodeId, Tape};
use crate::tensor::Tensor;

/// Builds a scalar loss on a fresh tape from parameter leaves.
pub trait LossBuilder {
    fn build(&self, tape: &mut Tape, params: &[NodeId]) -> Result<NodeId>;
}

impl<F> LossBuilder for F
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    fn build(&self, tape: &mut Tape, params: &[NodeId]) -> Result<NodeId> {
        self(tape, params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor so that near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Coordinates sampled per tensor; `None` checks every coordinate.
    pub coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            floor: 1e-4,
            coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (tensor index, flat coordinate) of the worst mismatch.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate(builder: &dyn LossBuilder, params: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = builder.build(&mut tape, &ids)?;
    Ok(tape.item(loss))
}

/// Analytic gradients of `builder` at `params`, one tensor per parameter.
pub fn analytic_gradients(builder: &dyn LossBuilder, params: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = builder.build(&mut tape, &ids)?;
    let mut grads = tape.backward(loss)?;
    Ok(ids
        .iter()
        .map(|&id| {
            grads
                .take(id)
                .expect("parameters always receive a gradient")
        })
        .collect())
}

/// Compare analytic gradients against central differences.
pub fn check_gradients(
    builder: &dyn LossBuilder,
    params: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let analytic = analytic_gradients(builder, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut work = params.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        let n = params[t].numel();
        let coords: Vec<usize> = match opts.coords_per_tensor {
            Some(k) if k < n => (0..k).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = params[t].data()[c];
            work[t].data_mut()[c] = orig + opts.step;
            let plus = evaluate(builder, &work)?;
            work[t].data_mut()[c] = orig - opts.step;
            let minus = evaluate(builder, &work)?;
            work[t].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(grad.data()[c], numeric, opts.floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((t, c));
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Activation {
    Tanh,
    Softplus,
    Sigmoid,
    ExpTanh,
    Square,
    Relu,
    Abs,
    CappedTanh,
}

const ACTIVATIONS: [Activation; 8] = [
    Activation::Tanh,
    Activation::Softplus,
    Activation::Sigmoid,
    Activation::ExpTanh,
    Activation::Square,
    Activation::Relu,
    Activation::Abs,
    Activation::CappedTanh,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Head {
    Sum,
    Mean,
    SmoothL1,
    LogSoftmaxPick,
    SoftmaxDot,
    LogRatio,
    ReduceMax,
}

const HEADS: [Head; 7] = [
    Head::Sum,
    Head::Mean,
    Head::SmoothL1,
    Head::LogSoftmaxPick,
    Head::SoftmaxDot,
    Head::LogRatio,
    Head::ReduceMax,
];

/// A randomly drawn three-layer composite function of four parameter tensors.
///
/// The structure is fixed at construction; `build` replays it on any tape.
#[derive(Debug, Clone)]
pub struct RandomGraph {
    rows: usize,
    hidden: usize,
    out: usize,
    acts: [Activation; 3],
    head: Head,
    concat_skip: bool,
    transpose_mid: bool,
    gate: Option<f64>,
    target: Tensor,
    pick: Vec<usize>,
}

impl RandomGraph {
    pub fn sample(seed: u64) -> (Self, Vec<Tensor>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = rng.random_range(1..=3);
        let inner = rng.random_range(2..=4);
        let hidden = rng.random_range(2..=4);
        let out = rng.random_range(2..=4);
        let acts = [
            *ACTIVATIONS.choose(&mut rng).unwrap(),
            *ACTIVATIONS.choose(&mut rng).unwrap(),
            *ACTIVATIONS.choose(&mut rng).unwrap(),
        ];
        let head = *HEADS.choose(&mut rng).unwrap();
        let randn = |shape: &[usize], rng: &mut ChaCha8Rng| {
            let n: usize = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .expect("consistent shape")
        };
        let params = vec![
            randn(&[rows, inner], &mut rng),
            randn(&[inner, hidden], &mut rng),
            randn(&[1, hidden], &mut rng),
            randn(&[hidden, out], &mut rng),
        ];
        let target = randn(&[rows, out], &mut rng).scaled(2.0);
        let pick = (0..rows)
            .map(|r| r * out + rng.random_range(0..out))
            .collect();
        let graph = Self {
            rows,
            hidden,
            out,
            acts,
            head,
            concat_skip: rng.random_bool(0.5),
            transpose_mid: rng.random_bool(0.5),
            gate: rng.random_bool(0.3).then_some(1.0),
            target,
            pick,
        };
        (graph, params)
    }

    fn activate(tape: &mut Tape, x: NodeId, act: Activation) -> NodeId {
        match act {
            Activation::Tanh => tape.tanh(x),
            Activation::Softplus => tape.softplus(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::ExpTanh => {
                let t = tape.tanh(x);
                tape.exp(t)
            }
            Activation::Square => tape.square(x),
            Activation::Relu => tape.relu(x),
            Activation::Abs => tape.abs(x),
            Activation::CappedTanh => {
                let t = tape.tanh(x);
                tape.min_const(t, 0.3)
            }
        }
    }
}

impl LossBuilder for RandomGraph {
    fn build(&self, tape: &mut Tape, p: &[NodeId]) -> Result<NodeId> {
        let (x, w1, b1, w2) = (p[0], p[1], p[2], p[3]);
        let h = tape.matmul(x, w1)?;
        let h = tape.add(h, b1)?;
        let h = Self::activate(tape, h, self.acts[0]);
        let h = if self.transpose_mid {
            let t = tape.transpose(h)?;
            let t = tape.scale(t, 0.7);
            tape.transpose(t)?
        } else {
            h
        };
        let mut y = tape.matmul(h, w2)?;
        y = Self::activate(tape, y, self.acts[1]);
        if self.concat_skip {
            // Join with a reshaped copy of the first-layer output and fold back with a sum.
            let flat = tape.reshape(h, &[self.rows * self.hidden, 1])?;
            let folded = tape.reshape(flat, &[self.rows, self.hidden])?;
            let joined = tape.concat(&[y, folded], 1)?;
            let cols: Vec<usize> = (0..self.rows)
                .flat_map(|r| (0..self.out).map(move |c| r * (self.out + self.hidden) + c))
                .collect();
            let back = tape.gather(joined, &cols, &[self.rows, self.out])?;
            let den = tape.square(folded);
            let den = tape.shift(den, 1.0);
            let den = tape.sum(den);
            y = tape.div(back, den)?;
        }
        y = Self::activate(tape, y, self.acts[2]);
        if let Some(f) = self.gate {
            y = tape.grad_gate(y, GateFactor::new(f)?);
        }
        match self.head {
            Head::Sum => Ok(tape.sum(y)),
            Head::Mean => {
                let s = tape.shift(y, -0.2);
                let n = tape.neg(s);
                Ok(tape.mean(n))
            }
            Head::SmoothL1 => {
                let t = tape.constant(self.target.clone());
                tape.smooth_l1(y, t)
            }
            Head::LogSoftmaxPick => {
                let ls = tape.log_softmax_rows(y);
                let picked = tape.gather(ls, &self.pick, &[self.pick.len()])?;
                let s = tape.sum(picked);
                Ok(tape.neg(s))
            }
            Head::SoftmaxDot => {
                let sm = tape.softmax_rows(y);
                let t = tape.constant(self.target.clone());
                let prod = tape.mul(sm, t)?;
                Ok(tape.sum(prod))
            }
            Head::LogRatio => {
                let sq = tape.square(y);
                let pos = tape.shift(sq, 0.5);
                let lg = tape.log(pos);
                let sp = tape.softplus(lg);
                let r = tape.sqrt(sp);
                Ok(tape.mean(r))
            }
            Head::ReduceMax => {
                let m = tape.reduce_max(y);
                let lo = tape.reduce_min(y);
                tape.sub(m, lo)
            }
        }
    }
}
