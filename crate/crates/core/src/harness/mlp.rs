//! Two-layer MLP regressor on a synthetic teacher task.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{InitSpec, InitTensor, Initializer};
use crate::tensor_store::{tensor_map, DType, TensorMap, TensorRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `y` and input `x`.
    fn grad(self, x: f32, y: f32) -> f32 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// `input -> hidden (activation) -> output`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub activation: Activation,
}

pub const FC1_BIAS: &str = "fc1.bias";
pub const FC1_WEIGHT: &str = "fc1.weight";
pub const FC2_BIAS: &str = "fc2.bias";
pub const FC2_WEIGHT: &str = "fc2.weight";

impl Default for MlpSpec {
    /// 64 -> 768 -> 64, about 99k parameters.
    fn default() -> Self {
        Self {
            input: 64,
            hidden: 768,
            output: 64,
            activation: Activation::Tanh,
        }
    }
}

impl MlpSpec {
    pub fn param_count(&self) -> usize {
        self.hidden * (self.input + 1) + self.output * (self.hidden + 1)
    }

    /// Uniform `±1/sqrt(fan_in)` for weights and biases.
    pub fn init_spec(&self) -> InitSpec {
        let uniform = |fan_in: usize| Initializer::Uniform {
            bound: 1.0 / (fan_in as f32).sqrt(),
        };
        let t = |name: &str, shape: Vec<usize>, fan_in: usize| InitTensor {
            name: name.into(),
            dtype: DType::F32,
            shape,
            init: uniform(fan_in),
        };
        InitSpec {
            tensors: vec![
                t(FC1_BIAS, vec![self.hidden], self.input),
                t(FC1_WEIGHT, vec![self.hidden, self.input], self.input),
                t(FC2_BIAS, vec![self.output], self.hidden),
                t(FC2_WEIGHT, vec![self.output, self.hidden], self.hidden),
            ],
        }
    }
}

/// Flat parameter (or gradient, or moment) storage, one vector per tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
}

impl MlpParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            w1: vec![0.0; spec.hidden * spec.input],
            b1: vec![0.0; spec.hidden],
            w2: vec![0.0; spec.output * spec.hidden],
            b2: vec![0.0; spec.output],
        }
    }

    pub fn from_map(spec: &MlpSpec, map: &TensorMap) -> Result<Self> {
        let take = |name: &str, shape: Vec<usize>| -> Result<Vec<f32>> {
            let r = map
                .get(name)
                .ok_or_else(|| Error::KeyMismatch(format!("missing `{name}`")))?;
            if r.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    tensor: name.into(),
                    expected: shape,
                    found: r.shape().to_vec(),
                });
            }
            Ok(r.data().to_vec())
        };
        if map.len() != 4 {
            return Err(Error::KeyMismatch(format!("expected 4 MLP tensors, found {}", map.len())));
        }
        Ok(Self {
            w1: take(FC1_WEIGHT, vec![spec.hidden, spec.input])?,
            b1: take(FC1_BIAS, vec![spec.hidden])?,
            w2: take(FC2_WEIGHT, vec![spec.output, spec.hidden])?,
            b2: take(FC2_BIAS, vec![spec.output])?,
        })
    }

    pub fn to_map(&self, spec: &MlpSpec) -> Result<TensorMap> {
        tensor_map([
            TensorRecord::f32(FC1_BIAS, vec![spec.hidden], self.b1.clone())?,
            TensorRecord::f32(FC1_WEIGHT, vec![spec.hidden, spec.input], self.w1.clone())?,
            TensorRecord::f32(FC2_BIAS, vec![spec.output], self.b2.clone())?,
            TensorRecord::f32(FC2_WEIGHT, vec![spec.output, spec.hidden], self.w2.clone())?,
        ])
    }

    pub fn slices_mut(&mut self) -> [&mut [f32]; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn slices(&self) -> [&[f32]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn fill_zero(&mut self) {
        for s in self.slices_mut() {
            s.fill(0.0);
        }
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn axpy(out: &mut [f32], a: f32, x: &[f32]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Scratch buffers reused across steps.
#[derive(Debug, Default)]
pub struct Workspace {
    pre: Vec<f32>,
    act: Vec<f32>,
    out: Vec<f32>,
    dact: Vec<f32>,
}

fn forward(spec: &MlpSpec, p: &MlpParams, x: &[f32], rows: usize, ws: &mut Workspace) {
    let (i_n, h_n, o_n) = (spec.input, spec.hidden, spec.output);
    ws.pre.resize(rows * h_n, 0.0);
    ws.act.resize(rows * h_n, 0.0);
    ws.out.resize(rows * o_n, 0.0);
    for b in 0..rows {
        let xb = &x[b * i_n..(b + 1) * i_n];
        for j in 0..h_n {
            let z = p.b1[j] + dot(xb, &p.w1[j * i_n..(j + 1) * i_n]);
            ws.pre[b * h_n + j] = z;
            ws.act[b * h_n + j] = spec.activation.apply(z);
        }
        let hb = &ws.act[b * h_n..(b + 1) * h_n];
        for k in 0..o_n {
            ws.out[b * o_n + k] = p.b2[k] + dot(hb, &p.w2[k * h_n..(k + 1) * h_n]);
        }
    }
}

/// Mean squared error over rows and outputs.
pub fn mse(spec: &MlpSpec, p: &MlpParams, x: &[f32], y: &[f32], ws: &mut Workspace) -> f64 {
    let rows = y.len() / spec.output;
    if rows == 0 {
        return 0.0;
    }
    forward(spec, p, x, rows, ws);
    let sum: f64 = ws
        .out
        .iter()
        .zip(y)
        .map(|(a, b)| f64::from(a - b).powi(2))
        .sum();
    sum / y.len() as f64
}

/// Forward and backward pass; writes gradients of the mean squared error
/// into `grad` and returns the loss.
pub fn loss_and_grad(
    spec: &MlpSpec,
    p: &MlpParams,
    x: &[f32],
    y: &[f32],
    grad: &mut MlpParams,
    ws: &mut Workspace,
) -> f64 {
    let (i_n, h_n, o_n) = (spec.input, spec.hidden, spec.output);
    let rows = y.len() / o_n;
    forward(spec, p, x, rows, ws);
    grad.fill_zero();
    ws.dact.resize(h_n, 0.0);
    let scale = 2.0 / y.len() as f32;
    let mut loss = 0f64;
    for b in 0..rows {
        let hb = &ws.act[b * h_n..(b + 1) * h_n];
        ws.dact.fill(0.0);
        for k in 0..o_n {
            let diff = ws.out[b * o_n + k] - y[b * o_n + k];
            loss += f64::from(diff).powi(2);
            let dy = scale * diff;
            grad.b2[k] += dy;
            axpy(&mut grad.w2[k * h_n..(k + 1) * h_n], dy, hb);
            axpy(&mut ws.dact, dy, &p.w2[k * h_n..(k + 1) * h_n]);
        }
        let xb = &x[b * i_n..(b + 1) * i_n];
        for j in 0..h_n {
            let d = ws.dact[j] * spec.activation.grad(ws.pre[b * h_n + j], hb[j]);
            grad.b1[j] += d;
            axpy(&mut grad.w1[j * i_n..(j + 1) * i_n], d, xb);
        }
    }
    loss / y.len() as f64
}

/// Synthetic regression data: `y = teacher(x) + noise` with a random tanh
/// teacher network and standard-normal inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub seed: u64,
    pub train: usize,
    pub eval: usize,
    pub teacher_hidden: usize,
    pub noise: f32,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            train: 4096,
            eval: 512,
            teacher_hidden: 32,
            noise: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub input: usize,
    pub output: usize,
    pub train_x: Vec<f32>,
    pub train_y: Vec<f32>,
    pub eval_x: Vec<f32>,
    pub eval_y: Vec<f32>,
}

impl Dataset {
    pub fn train_len(&self) -> usize {
        self.train_y.len() / self.output
    }

    /// Gathers the given train rows into `x`, `y`.
    pub fn gather(&self, rows: &[usize], x: &mut Vec<f32>, y: &mut Vec<f32>) {
        x.clear();
        y.clear();
        for &r in rows {
            x.extend_from_slice(&self.train_x[r * self.input..(r + 1) * self.input]);
            y.extend_from_slice(&self.train_y[r * self.output..(r + 1) * self.output]);
        }
    }
}

impl DataSpec {
    pub fn generate(&self, input: usize, output: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut normal = |n: usize, scale: f32| -> Vec<f32> {
            (0..n)
                .map(|_| scale * rng.sample::<f32, _>(StandardNormal))
                .collect()
        };
        let th = self.teacher_hidden;
        let tw1 = normal(th * input, 1.0 / (input as f32).sqrt());
        let tw2 = normal(output * th, 1.0 / (th as f32).sqrt());
        let n = self.train + self.eval;
        let xs = normal(n * input, 1.0);
        let noise = normal(n * output, self.noise);
        let mut ys = vec![0f32; n * output];
        let mut h = vec![0f32; th];
        for r in 0..n {
            let xr = &xs[r * input..(r + 1) * input];
            for (j, hj) in h.iter_mut().enumerate() {
                *hj = dot(xr, &tw1[j * input..(j + 1) * input]).tanh();
            }
            for k in 0..output {
                ys[r * output + k] = dot(&h, &tw2[k * th..(k + 1) * th]) + noise[r * output + k];
            }
        }
        let split_x = self.train * input;
        let split_y = self.train * output;
        Dataset {
            input,
            output,
            train_x: xs[..split_x].to_vec(),
            train_y: ys[..split_y].to_vec(),
            eval_x: xs[split_x..].to_vec(),
            eval_y: ys[split_y..].to_vec(),
        }
    }
}
