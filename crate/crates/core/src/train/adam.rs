use crate::error::{Error, Result};

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, step: 0, m: vec![], v: vec![] }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Restores a saved state; moment shapes are checked on the next step.
    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }

    /// One update of every parameter slice with its gradient.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("adam_step", format!("{} params vs {} grads", params.len(), grads.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::shape("adam_step", format!("slot {i}: {} values vs {} grads", p.len(), g.len())));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::shape("adam_step", "optimizer state does not match parameters"));
        }
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
