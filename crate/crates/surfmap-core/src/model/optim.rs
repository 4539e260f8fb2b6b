//! Adam with per-tensor state, matching the model's fixed parameter order.

use crate::model::net::{Model, ModelGrads};

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(model: &Model, lr: f64) -> Self {
        let shapes: Vec<usize> = model.param_tensors().iter().map(|(_, t)| t.len()).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update. Tensors whose name matches `frozen` are skipped entirely
    /// (no state update either), so frozen heads stay bit-identical.
    pub fn step(&mut self, model: &mut Model, grads: &ModelGrads, frozen: impl Fn(&str) -> bool) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let lr = self.lr * bc2.sqrt() / bc1;
        let params = model.param_tensors_mut();
        let gs = grads.param_tensors();
        for (i, ((name, p), (_, g))) in params.into_iter().zip(gs).enumerate() {
            if frozen(name) {
                continue;
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
            let (lr32, eps32) = (lr as f32, self.eps as f32);
            for j in 0..p.len() {
                let grad = g[j];
                m[j] = b1 * m[j] + (1.0 - b1) * grad;
                v[j] = b2 * v[j] + (1.0 - b2) * grad * grad;
                p[j] -= lr32 * m[j] / (v[j].sqrt() + eps32);
            }
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}
