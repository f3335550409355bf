use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{axpy, dot, sigmoid, Block, LayoutBuilder, ParamVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cell {
    /// Update/reset gated cell (GRU).
    GatedRecurrent,
}

/// Gated recurrent layer followed by a linear readout, one output per step.
///
/// Gate rows are ordered reset, update, candidate:
/// `r = σ(W_ir x + b_ir + W_hr h + b_hr)`, `z = σ(…)`,
/// `n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))`, `h' = (1 − z) ⊙ n + z ⊙ h`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurrentSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub cell: Cell,
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    w_ih: usize,
    w_hh: usize,
    b_ih: usize,
    b_hh: usize,
    w_out: usize,
    b_out: usize,
}

impl RecurrentSpec {
    pub fn new(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            output_dim,
            cell: Cell::GatedRecurrent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::rejected("recurrent dimensions must be >= 1"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (i, h, o) = (self.input_dim, self.hidden_dim, self.output_dim);
        3 * h * i + 3 * h * h + 6 * h + o * h + o
    }

    pub fn layout(&self) -> Vec<Block> {
        let (i, h, o) = (self.input_dim, self.hidden_dim, self.output_dim);
        LayoutBuilder::default()
            .push("gru.w_ih", 3 * h, i)
            .push("gru.w_hh", 3 * h, h)
            .push("gru.b_ih", 3 * h, 1)
            .push("gru.b_hh", 3 * h, 1)
            .push("out.weight", o, h)
            .push("out.bias", o, 1)
            .finish()
    }

    fn offsets(&self) -> Offsets {
        let (i, h, o) = (self.input_dim, self.hidden_dim, self.output_dim);
        let w_ih = 0;
        let w_hh = w_ih + 3 * h * i;
        let b_ih = w_hh + 3 * h * h;
        let b_hh = b_ih + 3 * h;
        let w_out = b_hh + 3 * h;
        let b_out = w_out + o * h;
        Offsets {
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            w_out,
            b_out,
        }
    }

    /// Fan-in scaled uniform weights, zero biases.
    pub fn init(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let off = self.offsets();
        let (i, h, o) = (self.input_dim, self.hidden_dim, self.output_dim);
        let mut values = vec![0.0; self.param_count()];
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut values[range] {
                *v = rng.random_range(-bound..bound);
            }
        };
        fill(off.w_ih..off.w_ih + 3 * h * i, i);
        fill(off.w_hh..off.w_hh + 3 * h * h, h);
        fill(off.w_out..off.w_out + o * h, h);
        ParamVector::from_parts(values, self.layout()).expect("layout matches param_count")
    }

    /// One causal step for a single sequence: updates `h` in place and writes
    /// the readout into `y`.
    pub fn step(&self, params: &[f64], h: &mut [f64], x: &[f64], y: &mut [f64]) {
        let mut scratch = StepScratch::new(self.hidden_dim);
        self.cell_forward(params, x, h, &mut scratch);
        h.copy_from_slice(&scratch.h_new);
        self.readout(params, h, y);
    }

    fn readout(&self, params: &[f64], h: &[f64], y: &mut [f64]) {
        let off = self.offsets();
        let hd = self.hidden_dim;
        for (o, yo) in y.iter_mut().enumerate() {
            *yo = dot(&params[off.w_out + o * hd..off.w_out + (o + 1) * hd], h) + params[off.b_out + o];
        }
    }

    fn cell_forward(&self, params: &[f64], x: &[f64], h: &[f64], s: &mut StepScratch) {
        let off = self.offsets();
        let (ni, hd) = (self.input_dim, self.hidden_dim);
        for row in 0..3 * hd {
            s.gi[row] = dot(&params[off.w_ih + row * ni..off.w_ih + (row + 1) * ni], x) + params[off.b_ih + row];
            s.gh[row] = dot(&params[off.w_hh + row * hd..off.w_hh + (row + 1) * hd], h) + params[off.b_hh + row];
        }
        for j in 0..hd {
            let r = sigmoid(s.gi[j] + s.gh[j]);
            let z = sigmoid(s.gi[hd + j] + s.gh[hd + j]);
            let n = (s.gi[2 * hd + j] + r * s.gh[2 * hd + j]).tanh();
            s.r[j] = r;
            s.z[j] = z;
            s.n[j] = n;
            s.h_new[j] = (1.0 - z) * n + z * h[j];
        }
    }

    /// Run `batch` sequences of `steps` steps in lockstep. `inputs` is laid out
    /// `[step][sequence][feature]`; `h0` is `[sequence][hidden]`.
    pub fn forward_batch(&self, params: &[f64], inputs: &[f64], batch: usize, steps: usize, h0: &[f64]) -> GruTrace {
        let (ni, hd, no) = (self.input_dim, self.hidden_dim, self.output_dim);
        debug_assert_eq!(inputs.len(), steps * batch * ni);
        debug_assert_eq!(h0.len(), batch * hd);
        let mut trace = GruTrace {
            batch,
            steps,
            hidden: Vec::with_capacity((steps + 1) * batch * hd),
            r: vec![0.0; steps * batch * hd],
            z: vec![0.0; steps * batch * hd],
            n: vec![0.0; steps * batch * hd],
            ghn: vec![0.0; steps * batch * hd],
            inputs: inputs.to_vec(),
            outputs: vec![0.0; steps * batch * no],
        };
        trace.hidden.extend_from_slice(h0);
        let mut s = StepScratch::new(hd);
        for t in 0..steps {
            for b in 0..batch {
                let x = &inputs[(t * batch + b) * ni..(t * batch + b + 1) * ni];
                let h_prev = &trace.hidden[(t * batch + b) * hd..(t * batch + b + 1) * hd];
                self.cell_forward(params, x, h_prev, &mut s);
                let k = (t * batch + b) * hd;
                trace.r[k..k + hd].copy_from_slice(&s.r);
                trace.z[k..k + hd].copy_from_slice(&s.z);
                trace.n[k..k + hd].copy_from_slice(&s.n);
                trace.ghn[k..k + hd].copy_from_slice(&s.gh[2 * hd..]);
                trace.hidden.extend_from_slice(&s.h_new);
                let y = &mut trace.outputs[(t * batch + b) * no..(t * batch + b + 1) * no];
                self.readout(params, &s.h_new, y);
            }
        }
        trace
    }

    /// Backpropagation through time. `d_out` matches the trace's output layout.
    /// Gradients are accumulated into `grad`; nothing flows into `h0`.
    pub fn backward_batch(&self, params: &[f64], trace: &GruTrace, d_out: &[f64], grad: &mut [f64]) {
        let off = self.offsets();
        let (ni, hd, no) = (self.input_dim, self.hidden_dim, self.output_dim);
        let batch = trace.batch;
        let mut dh_next = vec![0.0; batch * hd];
        let mut dgi = vec![0.0; 3 * hd];
        let mut dgh = vec![0.0; 3 * hd];
        let mut dh = vec![0.0; hd];
        for t in (0..trace.steps).rev() {
            for b in 0..batch {
                let idx = t * batch + b;
                let h_new = &trace.hidden[(idx + batch) * hd..(idx + batch + 1) * hd];
                let h_prev = &trace.hidden[idx * hd..(idx + 1) * hd];
                let x = &trace.inputs[idx * ni..(idx + 1) * ni];
                dh.copy_from_slice(&dh_next[b * hd..(b + 1) * hd]);
                for o in 0..no {
                    let dy = d_out[idx * no + o];
                    if dy == 0.0 {
                        continue;
                    }
                    axpy(dy, h_new, &mut grad[off.w_out + o * hd..off.w_out + (o + 1) * hd]);
                    grad[off.b_out + o] += dy;
                    axpy(dy, &params[off.w_out + o * hd..off.w_out + (o + 1) * hd], &mut dh);
                }
                let k = idx * hd;
                let dh_prev = &mut dh_next[b * hd..(b + 1) * hd];
                for j in 0..hd {
                    let (r, z, n, ghn) = (trace.r[k + j], trace.z[k + j], trace.n[k + j], trace.ghn[k + j]);
                    let dn = dh[j] * (1.0 - z);
                    let dz = dh[j] * (h_prev[j] - n);
                    dh_prev[j] = dh[j] * z;
                    let dn_pre = dn * (1.0 - n * n);
                    let dz_pre = dz * z * (1.0 - z);
                    let dr_pre = dn_pre * ghn * r * (1.0 - r);
                    dgi[j] = dr_pre;
                    dgi[hd + j] = dz_pre;
                    dgi[2 * hd + j] = dn_pre;
                    dgh[j] = dr_pre;
                    dgh[hd + j] = dz_pre;
                    dgh[2 * hd + j] = dn_pre * r;
                }
                for row in 0..3 * hd {
                    let gi = dgi[row];
                    if gi != 0.0 {
                        axpy(gi, x, &mut grad[off.w_ih + row * ni..off.w_ih + (row + 1) * ni]);
                        grad[off.b_ih + row] += gi;
                    }
                    let gh = dgh[row];
                    if gh != 0.0 {
                        axpy(gh, h_prev, &mut grad[off.w_hh + row * hd..off.w_hh + (row + 1) * hd]);
                        grad[off.b_hh + row] += gh;
                        axpy(gh, &params[off.w_hh + row * hd..off.w_hh + (row + 1) * hd], dh_prev);
                    }
                }
            }
        }
    }
}

struct StepScratch {
    gi: Vec<f64>,
    gh: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    h_new: Vec<f64>,
}

impl StepScratch {
    fn new(hd: usize) -> Self {
        Self {
            gi: vec![0.0; 3 * hd],
            gh: vec![0.0; 3 * hd],
            r: vec![0.0; hd],
            z: vec![0.0; hd],
            n: vec![0.0; hd],
            h_new: vec![0.0; hd],
        }
    }
}

/// Forward activations kept for backpropagation through time.
#[derive(Debug, Clone)]
pub struct GruTrace {
    batch: usize,
    steps: usize,
    hidden: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    ghn: Vec<f64>,
    inputs: Vec<f64>,
    outputs: Vec<f64>,
}

impl GruTrace {
    /// `[step][sequence][output]`
    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    /// Hidden state after the last step, `[sequence][hidden]`.
    pub fn final_hidden(&self) -> &[f64] {
        let hd = self.hidden.len() / (self.steps + 1) / self.batch.max(1);
        &self.hidden[self.steps * self.batch * hd..]
    }
}

/// Run one sequence from a zero hidden state, returning one output per step.
pub fn recurrent_forward(spec: &RecurrentSpec, params: &ParamVector, sequence: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if params.len() != spec.param_count() {
        return Err(Error::rejected(format!(
            "parameter vector length {} != {}",
            params.len(),
            spec.param_count()
        )));
    }
    if let Some(bad) = sequence.iter().find(|x| x.len() != spec.input_dim) {
        return Err(Error::rejected(format!("step input length {} != {}", bad.len(), spec.input_dim)));
    }
    let mut h = vec![0.0; spec.hidden_dim];
    let mut out = Vec::with_capacity(sequence.len());
    for x in sequence {
        let mut y = vec![0.0; spec.output_dim];
        spec.step(params.values(), &mut h, x, &mut y);
        out.push(y);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_matches_layout() {
        let spec = RecurrentSpec::new(8, 32, 1);
        assert_eq!(spec.param_count(), 3 * 32 * 8 + 3 * 32 * 32 + 6 * 32 + 32 + 1);
        assert_eq!(spec.init(0).len(), spec.param_count());
    }

    #[test]
    fn empty_sequence() {
        let spec = RecurrentSpec::new(2, 3, 1);
        assert!(recurrent_forward(&spec, &spec.init(0), &[]).unwrap().is_empty());
    }

    #[test]
    fn single_step_by_hand() {
        // input 1, hidden 1, output 1 with every parameter written out
        let spec = RecurrentSpec::new(1, 1, 1);
        // w_ih [r, z, n], w_hh [r, z, n], b_ih, b_hh, w_out, b_out
        let v = vec![0.5, -0.3, 0.8, 0.2, 0.1, -0.4, 0.05, 0.0, 0.1, 0.0, 0.2, -0.1, 1.5, 0.25];
        let p = ParamVector::from_parts(v, spec.layout()).unwrap();
        let x = 2.0;
        let h0 = 0.0;
        let r = sigmoid(0.5 * x + 0.05 + 0.2 * h0 + 0.0);
        let z = sigmoid(-0.3 * x + 0.0 + 0.1 * h0 + 0.2);
        let n = (0.8 * x + 0.1 + r * (-0.4 * h0 - 0.1)).tanh();
        let h1 = (1.0 - z) * n + z * h0;
        let y = 1.5 * h1 + 0.25;
        let out = recurrent_forward(&spec, &p, &[vec![x]]).unwrap();
        assert!((out[0][0] - y).abs() < 1e-15);
    }

    #[test]
    fn causal_outputs() {
        let spec = RecurrentSpec::new(3, 6, 2);
        let p = spec.init(5);
        let mut seq: Vec<Vec<f64>> = (0..10).map(|t| vec![t as f64 * 0.1, -0.2, (t as f64).cos()]).collect();
        let a = recurrent_forward(&spec, &p, &seq).unwrap();
        seq[6][1] = 4.0;
        let b = recurrent_forward(&spec, &p, &seq).unwrap();
        assert_eq!(a[..6], b[..6]);
        assert_ne!(a[6], b[6]);
    }

    #[test]
    fn batch_forward_agrees_with_single() {
        let spec = RecurrentSpec::new(2, 4, 1);
        let p = spec.init(1);
        let seqs = [vec![vec![0.1, 0.2], vec![0.3, -0.1]], vec![vec![-1.0, 0.5], vec![0.0, 0.0]]];
        let mut flat = Vec::new();
        for t in 0..2 {
            for s in &seqs {
                flat.extend(&s[t]);
            }
        }
        let trace = spec.forward_batch(p.values(), &flat, 2, 2, &[0.0; 8]);
        for (b, s) in seqs.iter().enumerate() {
            let single = recurrent_forward(&spec, &p, s).unwrap();
            for t in 0..2 {
                assert!((trace.outputs()[t * 2 + b] - single[t][0]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let spec = RecurrentSpec::new(2, 3, 1);
        assert!(recurrent_forward(&spec, &spec.init(0), &[vec![1.0]]).is_err());
    }
}
