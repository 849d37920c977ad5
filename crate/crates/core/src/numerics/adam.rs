use super::{Matrix, NumericsError};

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Matrix,
    v: Matrix,
}

/// Adam with β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let states = shapes
            .into_iter()
            .map(|(r, c)| AdamState { m: Matrix::zeros(r, c), v: Matrix::zeros(r, c) })
            .collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, states }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. `params` and `grads` must follow the
    /// order the optimizer was created with.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix], lr: f64) -> Result<(), NumericsError> {
        if !(lr > 0.0 && lr.is_finite()) && lr != 0.0 {
            return Err(NumericsError::BadLearningRate(lr));
        }
        if params.len() != self.states.len() || grads.len() != self.states.len() {
            return Err(NumericsError::dims("adam_step", (params.len(), 0), (self.states.len(), grads.len())));
        }
        for ((p, g), s) in params.iter().zip(grads).zip(&self.states) {
            if p.shape() != g.shape() || p.shape() != s.m.shape() {
                return Err(NumericsError::dims("adam_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), s) in params.iter_mut().zip(grads).zip(self.states.iter_mut()) {
            let (pm, gm) = (p.data_mut(), g.data());
            let (mm, vm) = (s.m.data_mut(), s.v.data_mut());
            for i in 0..gm.len() {
                mm[i] = self.beta1 * mm[i] + (1.0 - self.beta1) * gm[i];
                vm[i] = self.beta2 * vm[i] + (1.0 - self.beta2) * gm[i] * gm[i];
                let mhat = mm[i] / bc1;
                let vhat = vm[i] / bc2;
                pm[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub(crate) fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let f = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= f);
        }
    }
    norm
}
