//! Gradient-descent steps over shared parameter tensors.
//!
//! Both optimizers consume whatever gradient each parameter has accumulated
//! and skip parameters whose gradient is absent, so one optimizer instance
//! can serve interleaved updates on overlapping parameter subsets.

use crate::tensor::SharedTensor;

/// Plain `w -= lr * grad` on every parameter that has a gradient.
pub fn sgd_step(params: &[SharedTensor], lr: f32) {
    for p in params {
        let mut t = p.borrow_mut();
        let Some(grad) = t.grad().map(|g| g.to_vec()) else {
            continue;
        };
        for (w, g) in t.data_mut().iter_mut().zip(&grad) {
            *w -= lr * g;
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamParamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

/// AdamW with decoupled weight decay. Each parameter keeps its own step
/// count, which only advances when that parameter is actually updated.
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    params: Vec<SharedTensor>,
    state: Vec<AdamParamState>,
}

impl AdamW {
    pub fn new(params: Vec<SharedTensor>, lr: f64, weight_decay: f64) -> AdamW {
        let state = params
            .iter()
            .map(|p| {
                let n = p.borrow().numel();
                AdamParamState {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    t: 0,
                }
            })
            .collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            params,
            state,
        }
    }

    pub fn params(&self) -> &[SharedTensor] {
        &self.params
    }

    /// Applies one update to every owned parameter that has a gradient.
    pub fn step(&mut self) {
        for (p, st) in self.params.iter().zip(&mut self.state) {
            let mut tensor = p.borrow_mut();
            let Some(grad) = tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            st.t += 1;
            let bc1 = 1.0 - self.beta1.powi(st.t as i32);
            let bc2 = 1.0 - self.beta2.powi(st.t as i32);
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i] as f64;
                let m = self.beta1 * st.m[i] as f64 + (1.0 - self.beta1) * g;
                let v = self.beta2 * st.v[i] as f64 + (1.0 - self.beta2) * g * g;
                st.m[i] = m as f32;
                st.v[i] = v as f32;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                let w = data[i] as f64;
                data[i] =
                    (w - self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * w))
                        as f32;
            }
        }
    }

    /// Clears gradients of all owned parameters.
    pub fn zero_grads(&self) {
        for p in &self.params {
            p.borrow_mut().zero_grad();
        }
    }

    pub fn export_state(&self) -> Vec<AdamParamState> {
        self.state.clone()
    }

    pub fn import_state(&mut self, state: Vec<AdamParamState>) -> crate::Result<()> {
        if state.len() != self.params.len() {
            return Err(crate::Error::invalid(format!(
                "optimizer state has {} entries for {} parameters",
                state.len(),
                self.params.len()
            )));
        }
        for (p, st) in self.params.iter().zip(&state) {
            let n = p.borrow().numel();
            if st.m.len() != n || st.v.len() != n {
                return Err(crate::Error::invalid(
                    "optimizer state length does not match parameter".to_string(),
                ));
            }
        }
        self.state = state;
        Ok(())
    }
}
