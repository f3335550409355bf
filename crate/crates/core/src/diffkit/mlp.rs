use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{axpy, dot, LayoutBuilder, ParamVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

/// Fully connected network: tanh on hidden layers, linear output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    w: usize,
    b: usize,
    inp: usize,
    out: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: &[usize], output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::rejected("MLP dimensions must be >= 1"));
        }
        Ok(())
    }

    fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden_dims.len() + 2);
        d.push(self.input_dim);
        d.extend(&self.hidden_dims);
        d.push(self.output_dim);
        d
    }

    fn layers(&self) -> Vec<Layer> {
        let dims = self.dims();
        let mut off = 0;
        dims.windows(2)
            .map(|w| {
                let l = Layer {
                    w: off,
                    b: off + w[0] * w[1],
                    inp: w[0],
                    out: w[1],
                };
                off += (w[0] + 1) * w[1];
                l
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.dims().windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn layout(&self) -> Vec<super::Block> {
        let mut b = LayoutBuilder::default();
        for (k, w) in self.dims().windows(2).enumerate() {
            b = b.push(format!("l{k}.weight"), w[1], w[0]).push(format!("l{k}.bias"), w[1], 1);
        }
        b.finish()
    }

    /// Fan-in scaled uniform weights, zero biases.
    pub fn init(&self, seed: u64) -> ParamVector {
        self.init_scaled(seed, 1.0)
    }

    /// As [`init`](Self::init) with the output layer's weights multiplied by `output_scale`.
    pub fn init_scaled(&self, seed: u64, output_scale: f64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = self.layers();
        let mut values = vec![0.0; self.param_count()];
        for (k, l) in layers.iter().enumerate() {
            let bound = 1.0 / (l.inp as f64).sqrt();
            let scale = if k + 1 == layers.len() { output_scale } else { 1.0 };
            for v in &mut values[l.w..l.w + l.inp * l.out] {
                *v = scale * rng.random_range(-bound..bound);
            }
        }
        ParamVector::from_parts(values, self.layout()).expect("layout matches param_count")
    }

    /// Batched forward pass over `batch` row-major inputs, keeping activations
    /// for the backward pass.
    pub fn forward_batch(&self, params: &[f64], inputs: &[f64], batch: usize) -> MlpTrace {
        debug_assert_eq!(params.len(), self.param_count());
        debug_assert_eq!(inputs.len(), batch * self.input_dim);
        let layers = self.layers();
        let mut acts = Vec::with_capacity(layers.len() + 1);
        acts.push(inputs.to_vec());
        for (k, l) in layers.iter().enumerate() {
            let x = &acts[k];
            let w = &params[l.w..l.w + l.inp * l.out];
            let bias = &params[l.b..l.b + l.out];
            let hidden = k + 1 < layers.len();
            let mut y = vec![0.0; batch * l.out];
            for (xr, yr) in x.chunks_exact(l.inp).zip(y.chunks_exact_mut(l.out)) {
                for (o, yo) in yr.iter_mut().enumerate() {
                    let z = dot(&w[o * l.inp..(o + 1) * l.inp], xr) + bias[o];
                    *yo = if hidden { z.tanh() } else { z };
                }
            }
            acts.push(y);
        }
        MlpTrace { batch, acts }
    }

    /// Accumulate parameter gradients for upstream gradient `d_out`
    /// (batch × output_dim) into `grad`. Returns the input gradient when asked.
    pub fn backward_batch(
        &self,
        params: &[f64],
        trace: &MlpTrace,
        d_out: &[f64],
        grad: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let layers = self.layers();
        let batch = trace.batch;
        let mut d = d_out.to_vec();
        for k in (0..layers.len()).rev() {
            let l = layers[k];
            let x = &trace.acts[k];
            if k + 1 < layers.len() {
                for (di, a) in d.iter_mut().zip(&trace.acts[k + 1]) {
                    *di *= 1.0 - a * a;
                }
            }
            let need_dx = k > 0 || want_input_grad;
            let mut dx = if need_dx { vec![0.0; batch * l.inp] } else { Vec::new() };
            let w = &params[l.w..l.w + l.inp * l.out];
            for b in 0..batch {
                let xr = &x[b * l.inp..(b + 1) * l.inp];
                let dr = &d[b * l.out..(b + 1) * l.out];
                for (o, &dz) in dr.iter().enumerate() {
                    if dz == 0.0 {
                        continue;
                    }
                    axpy(dz, xr, &mut grad[l.w + o * l.inp..l.w + (o + 1) * l.inp]);
                    grad[l.b + o] += dz;
                    if need_dx {
                        axpy(dz, &w[o * l.inp..(o + 1) * l.inp], &mut dx[b * l.inp..(b + 1) * l.inp]);
                    }
                }
            }
            if k == 0 {
                return want_input_grad.then_some(dx);
            }
            d = dx;
        }
        None
    }
}

/// Activations recorded by [`MlpSpec::forward_batch`].
#[derive(Debug, Clone)]
pub struct MlpTrace {
    batch: usize,
    acts: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("at least one layer")
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Single-input forward pass.
pub fn mlp_forward(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != spec.input_dim {
        return Err(Error::rejected(format!("input length {} != {}", input.len(), spec.input_dim)));
    }
    if params.len() != spec.param_count() {
        return Err(Error::rejected(format!(
            "parameter vector length {} != {}",
            params.len(),
            spec.param_count()
        )));
    }
    Ok(spec.forward_batch(params.values(), input, 1).output().to_vec())
}
