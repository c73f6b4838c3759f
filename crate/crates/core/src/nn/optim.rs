//! Adam with decoupled weight decay.

use std::collections::HashMap;

use super::{Elem, ParamView};

/// AdamW optimizer; first/second moment state is kept per parameter name so
/// it survives across visitation passes.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Call once per optimizer step before updating parameters.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates one parameter in place from its accumulated gradient.
    pub fn update<F: Elem>(&mut self, param: &mut ParamView<'_, F>) {
        let (m, v) = self
            .moments
            .entry(param.name.clone())
            .or_insert_with(|| (vec![0.0; param.value.len()], vec![0.0; param.value.len()]));
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..param.value.len() {
            let g = param.grad[i].to_f64().unwrap();
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let mut w = param.value[i].to_f64().unwrap();
            // Decoupled decay: shrink the weight directly, not the gradient.
            w -= self.learning_rate * self.weight_decay * w;
            w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            param.value[i] = super::fl::<F>(w);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_converges_on_quadratic() {
        // Minimize f(w) = 0.5 * (w - 3)^2 without weight decay.
        let mut w = vec![0.0f64];
        let mut g = vec![0.0f64];
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..500 {
            g[0] = w[0] - 3.0;
            opt.begin_step();
            let mut view = ParamView {
                name: "w".to_string(),
                is_norm: false,
                value: &mut w,
                grad: &mut g,
            };
            opt.update(&mut view);
        }
        assert!((w[0] - 3.0).abs() < 1e-3, "w = {}", w[0]);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut w = vec![1.0f64];
        let mut g = vec![0.0f64];
        let mut opt = AdamW::new(1e-2, 0.5);
        opt.begin_step();
        let mut view = ParamView {
            name: "w".to_string(),
            is_norm: false,
            value: &mut w,
            grad: &mut g,
        };
        opt.update(&mut view);
        // Pure decay: w <- w - lr * wd * w = 1 - 0.005
        assert!((w[0] - 0.995).abs() < 1e-12);
    }
}
