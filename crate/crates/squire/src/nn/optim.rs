//! Parameter store, Adam, and the warmup/linear-decay learning-rate schedule.

use super::tensor::{Real, Tensor};

/// Handle to one named parameter block.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug)]
struct ParamEntry<T> {
    name: String,
    value: Tensor<T>,
    grad: Tensor<T>,
    moment1: Tensor<T>,
    moment2: Tensor<T>,
}

/// All trainable parameters with their gradients and Adam state.
#[derive(Debug)]
pub struct Params<T> {
    entries: Vec<ParamEntry<T>>,
    step: u64,
}

#[derive(Copy, Clone, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl<T: Real> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Params {
            entries: Vec::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let shape = value.shape().to_vec();
        self.entries.push(ParamEntry {
            name: name.into(),
            grad: Tensor::zeros(&shape),
            moment1: Tensor::zeros(&shape),
            moment2: Tensor::zeros(&shape),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].grad
    }

    pub fn accumulate(&mut self, id: ParamId, delta: &Tensor<T>) {
        self.entries[id.0].grad.add_assign(delta);
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            for g in e.grad.data_mut() {
                *g = T::zero();
            }
        }
    }

    pub fn n_params(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Gradients are zeroed after the update.
    pub fn adam_step(&mut self, lr: T) {
        self.adam_step_with(lr, AdamConfig::default());
    }

    /// Bias-corrected Adam update over all parameter blocks.
    pub fn adam_step_with(&mut self, lr: T, cfg: AdamConfig) {
        self.step += 1;
        let b1 = T::from_f64(cfg.beta1);
        let b2 = T::from_f64(cfg.beta2);
        let eps = T::from_f64(cfg.eps);
        let one = T::one();
        let bias1 = one - b1.powi(self.step as i32);
        let bias2 = one - b2.powi(self.step as i32);
        for e in &mut self.entries {
            let grad = e.grad.data();
            let m = e.moment1.data_mut();
            let v = e.moment2.data_mut();
            for i in 0..grad.len() {
                m[i] = b1 * m[i] + (one - b1) * grad[i];
                v[i] = b2 * v[i] + (one - b2) * grad[i] * grad[i];
            }
            let m = e.moment1.data();
            let v = e.moment2.data();
            let vals = e.value.data_mut();
            for i in 0..vals.len() {
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                vals[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            for g in e.grad.data_mut() {
                *g = T::zero();
            }
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Named (name, value) view for checkpointing.
    pub fn blocks(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Adam moments per block, for optimizer-state checkpoints.
    pub fn optimizer_blocks(&self) -> impl Iterator<Item = (&str, &Tensor<T>, &Tensor<T>)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), &e.moment1, &e.moment2))
    }

    /// Restore Adam moments for one block; shapes must match.
    pub fn load_optimizer_block(&mut self, name: &str, m1: Tensor<T>, m2: Tensor<T>) -> bool {
        if let Some(e) = self.entries.iter_mut().find(|e| e.name == name) {
            if e.value.shape() == m1.shape() && e.value.shape() == m2.shape() {
                e.moment1 = m1;
                e.moment2 = m2;
                return true;
            }
        }
        false
    }

    pub fn set_steps_taken(&mut self, step: u64) {
        self.step = step;
    }

    /// Replace a block's values by name; shape must match.
    pub fn load_block(&mut self, name: &str, value: Tensor<T>) -> bool {
        if let Some(e) = self.entries.iter_mut().find(|e| e.name == name) {
            if e.value.shape() == value.shape() {
                e.value = value;
                return true;
            }
        }
        false
    }
}

/// Learning rate at `step` (1-based): linear ramp 0→`peak` over the first
/// ⌈warmup_ratio·total⌉ steps, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, warmup_ratio: f64, peak: f64) -> f64 {
    assert!(
        warmup_ratio > 0.0 && warmup_ratio < 1.0,
        "warmup ratio must be in (0,1), got {warmup_ratio}"
    );
    if total_steps == 0 {
        return 0.0;
    }
    let warmup = (warmup_ratio * total_steps as f64).ceil().max(1.0) as u64;
    if step <= warmup {
        peak * step as f64 / warmup as f64
    } else if step >= total_steps {
        0.0
    } else {
        peak * (total_steps - step) as f64 / (total_steps - warmup) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut params = Params::<f64>::new();
        let p = params.add("p", Tensor::scalar(1.0));
        params.accumulate(p, &Tensor::scalar(1.0));
        params.adam_step(0.1);
        // Bias-corrected first step moves by lr·sign within eps.
        assert!((params.value(p).item() - 0.9).abs() < 1e-6);
        assert_eq!(params.grad(p).item(), 0.0, "gradients zeroed after step");
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = Params::<f64>::new();
        let p = params.add("p", Tensor::scalar(2.5));
        params.adam_step(0.1);
        params.adam_step(0.1);
        assert_eq!(params.value(p).item(), 2.5);
    }

    /// Scalar Adam reference, kept deliberately separate from the impl.
    fn reference_adam(x0: f64, grads: &[f64], lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut m, mut v, mut x) = (0.0, 0.0, x0);
        let mut out = Vec::new();
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            x -= lr * m_hat / (v_hat.sqrt() + eps);
            out.push(x);
        }
        out
    }

    #[test]
    fn constant_gradient_matches_scalar_reference_and_is_monotone() {
        let mut params = Params::<f64>::new();
        let p = params.add("p", Tensor::scalar(1.0));
        let expect = reference_adam(1.0, &[0.5, 0.5, 0.5, 0.5], 0.05);
        let mut got = Vec::new();
        for _ in 0..4 {
            params.accumulate(p, &Tensor::scalar(0.5));
            params.adam_step(0.05);
            got.push(params.value(p).item());
        }
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        for w in got.windows(2) {
            assert!(w[1] < w[0], "movement must be monotone in −grad direction");
        }
    }

    #[test]
    fn lr_schedule_ramps_and_decays() {
        let peak = 1e-3;
        assert_eq!(lr_at(50, 1000, 0.1, peak), 5e-4);
        assert_eq!(lr_at(100, 1000, 0.1, peak), peak);
        assert_eq!(lr_at(550, 1000, 0.1, peak), 5e-4);
        assert_eq!(lr_at(1000, 1000, 0.1, peak), 0.0);
        assert_eq!(lr_at(0, 1000, 0.1, peak), 0.0);
    }
}
