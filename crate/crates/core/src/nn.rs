//! Small dense-layer toolkit with hand-written backward passes (f64).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// d tanh(a)/da expressed through the output y = tanh(a).
pub fn tanh_grad(y: f64) -> f64 {
    1.0 - y * y
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Affine map `y = W x + b`, weights stored row-major as `outputs x inputs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform in ±1/sqrt(inputs), zero bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let weight = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Linear {
            inputs,
            outputs,
            weight,
            bias: vec![0.0; outputs],
        }
    }

    /// Identity-like map: ones on the leading diagonal, zero elsewhere.
    pub fn eye(inputs: usize, outputs: usize) -> Self {
        let mut l = Linear::zeros(inputs, outputs);
        for i in 0..inputs.min(outputs) {
            l.weight[i * inputs + i] = 1.0;
        }
        l
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.inputs {
            return Err(Error::dim("linear input", self.inputs, x.len()));
        }
        Ok(self.apply(x))
    }

    pub(crate) fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.inputs.max(1))
            .take(self.outputs)
            .zip(&self.bias)
            .map(|(row, b)| b + dot(row, x))
            .collect()
    }

    /// Forward pass for a sparse input given as (index, value) pairs.
    pub(crate) fn apply_sparse(&self, x: &[(usize, f64)]) -> Vec<f64> {
        let mut y = self.bias.clone();
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            for &(i, v) in x {
                *yo += row[i] * v;
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns dL/dx.
    pub(crate) fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut dx = vec![0.0; self.inputs];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut grad.weight[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }

    /// Parameter-only backward for sparse inputs.
    pub(crate) fn backward_sparse(&self, x: &[(usize, f64)], dy: &[f64], grad: &mut Linear) {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let grow = &mut grad.weight[o * self.inputs..(o + 1) * self.inputs];
            for &(i, v) in x {
                grow[i] += g * v;
            }
        }
    }

    pub(crate) fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        out.push(TensorRef {
            name: format!("{prefix}.weight"),
            shape: vec![self.outputs, self.inputs],
            values: &self.weight,
        });
        out.push(TensorRef {
            name: format!("{prefix}.bias"),
            shape: vec![self.outputs],
            values: &self.bias,
        });
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: &'a [f64],
}

/// A named, flat parameter tensor with shape metadata (checkpoint form).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Uniform access to every trainable tensor, always in the same order.
pub trait Parameters {
    fn tensors(&self) -> Vec<TensorRef<'_>>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn named_tensors(&self) -> Vec<NamedTensor> {
        self.tensors()
            .into_iter()
            .map(|t| NamedTensor {
                name: t.name,
                shape: t.shape,
                values: t.values.to_vec(),
            })
            .collect()
    }

    /// Overwrites parameters from named tensors; names and shapes must match.
    fn load_named(&mut self, named: &[NamedTensor]) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> =
            self.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
        if expected.len() != named.len() {
            return Err(Error::dim("parameter tensor count", expected.len(), named.len()));
        }
        for ((name, shape), t) in expected.iter().zip(named) {
            if *name != t.name || *shape != t.shape {
                return Err(Error::Parse(format!(
                    "checkpoint tensor `{}` {:?} does not match `{name}` {shape:?}",
                    t.name, t.shape
                )));
            }
            if t.values.len() != shape.iter().product::<usize>() {
                return Err(Error::dim("checkpoint tensor values", shape.iter().product(), t.values.len()));
            }
        }
        for (dst, src) in self.tensors_mut().into_iter().zip(named) {
            dst.copy_from_slice(&src.values);
        }
        Ok(())
    }

    fn flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.values.iter().copied()).collect()
    }

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.values.len()).sum()
    }

    fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        let n = self.parameter_count();
        if values.len() != n {
            return Err(Error::dim("flat parameter vector", n, values.len()));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&values[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    /// Name of the first tensor holding a non-finite value, if any.
    fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|t| t.values.iter().any(|v| !v.is_finite()))
            .map(|t| t.name)
    }
}

impl Parameters for Linear {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        Linear::tensors(self, "linear", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        Linear::tensors_mut(self, &mut out);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adaptive-moment optimizer state, one moment pair per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig, parameter_count: usize) -> Self {
        Adam {
            config,
            t: 0,
            m: vec![0.0; parameter_count],
            v: vec![0.0; parameter_count],
        }
    }

    /// One bias-corrected update. Coordinates with zero gradient and zero
    /// moments are left untouched.
    pub fn step<P: Parameters + ?Sized, G: Parameters + ?Sized>(&mut self, params: &mut P, grads: &G) -> Result<()> {
        self.step_flat(params, &grads.flat())
    }

    /// Same as [`Adam::step`] with the gradient given in `flat()` order.
    pub fn step_flat<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &[f64]) -> Result<()> {
        let n = params.parameter_count();
        if grads.len() != n || self.m.len() != n {
            return Err(Error::dim("optimizer parameters", n, grads.len()));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let mut k = 0;
        for p in params.tensors_mut() {
            for w in p.iter_mut() {
                let gi = grads[k] + c.weight_decay * *w;
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                k += 1;
                if gi == 0.0 && *m == 0.0 && *v == 0.0 {
                    continue;
                }
                *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
                *w -= c.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
