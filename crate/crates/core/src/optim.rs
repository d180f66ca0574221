//! AdamW with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl OptimState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptimState {
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }
}

impl AdamW {
    /// `p ← p − lr·m̂/(√v̂ + ε) − lr·wd·p`.
    ///
    /// Either every parameter is updated or, on a non-finite result, none is.
    pub fn step<'a>(
        &self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[Tensor],
        state: &mut OptimState,
        lr: f32,
    ) -> Result<()> {
        let mut params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != grads.len() || params.len() != state.m.len() {
            return Err(Error::validation(format!(
                "optimizer got {} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != state.m[k].shape() {
                return Err(Error::validation(format!(
                    "parameter {k}: shape {:?}, gradient {:?}, moment {:?}",
                    p.shape(),
                    g.shape(),
                    state.m[k].shape()
                )));
            }
        }

        let t = (state.step + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut staged = Vec::with_capacity(params.len());
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            let n = p.len();
            let (mut m_new, mut v_new, mut p_new) = (vec![0f32; n], vec![0f32; n], vec![0f32; n]);
            let (m, v) = (state.m[k].data(), state.v[k].data());
            for i in 0..n {
                let gi = g.data()[i];
                let mi = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let pi = p.data()[i];
                let updated = pi - lr * m_hat / (v_hat.sqrt() + self.eps) - lr * self.weight_decay * pi;
                if !updated.is_finite() || !vi.is_finite() {
                    return Err(Error::non_finite(format!("AdamW update of parameter {k}")));
                }
                m_new[i] = mi;
                v_new[i] = vi;
                p_new[i] = updated;
            }
            staged.push((m_new, v_new, p_new));
        }
        for (k, (m_new, v_new, p_new)) in staged.into_iter().enumerate() {
            state.m[k].data_mut().copy_from_slice(&m_new);
            state.v[k].data_mut().copy_from_slice(&v_new);
            params[k].data_mut().copy_from_slice(&p_new);
        }
        state.step += 1;
        Ok(())
    }
}
