//! Scalar probes of the hand-written backward passes.

use powertune::diffkit::{MlpSpec, Objective, RecurrentSpec};

/// `Σ c_k · y_k` over a batch of MLP outputs.
pub struct MlpProbe {
    pub spec: MlpSpec,
    pub inputs: Vec<f64>,
    pub batch: usize,
    pub weights: Vec<f64>,
}

impl Objective for MlpProbe {
    fn value(&self, p: &[f64]) -> f64 {
        let t = self.spec.forward_batch(p, &self.inputs, self.batch);
        t.output().iter().zip(&self.weights).map(|(y, c)| y * c).sum()
    }

    fn gradient(&self, p: &[f64]) -> Vec<f64> {
        let t = self.spec.forward_batch(p, &self.inputs, self.batch);
        let mut g = vec![0.0; p.len()];
        self.spec.backward_batch(p, &t, &self.weights, &mut g, false);
        g
    }
}

/// `Σ c · y` over every output of a batch of sequences.
pub struct GruProbe {
    pub spec: RecurrentSpec,
    pub inputs: Vec<f64>,
    pub batch: usize,
    pub steps: usize,
    pub weights: Vec<f64>,
}

impl Objective for GruProbe {
    fn value(&self, p: &[f64]) -> f64 {
        let h0 = vec![0.0; self.batch * self.spec.hidden_dim];
        let t = self.spec.forward_batch(p, &self.inputs, self.batch, self.steps, &h0);
        t.outputs().iter().zip(&self.weights).map(|(y, c)| y * c).sum()
    }

    fn gradient(&self, p: &[f64]) -> Vec<f64> {
        let h0 = vec![0.0; self.batch * self.spec.hidden_dim];
        let t = self.spec.forward_batch(p, &self.inputs, self.batch, self.steps, &h0);
        let mut g = vec![0.0; p.len()];
        self.spec.backward_batch(p, &t, &self.weights, &mut g);
        g
    }
}
