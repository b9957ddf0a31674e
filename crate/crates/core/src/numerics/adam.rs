//! Adam parameter updates with bias correction.

use super::tape::{NumericsError, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates for one parameter list, plus the step count.
#[derive(Clone, Debug)]
pub struct AdamState {
    step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn for_params(params: &[Tensor]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Restore a state from checkpointed moments.
    pub fn from_parts(step: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> Self {
        AdamState { step, m, v }
    }
}

/// One optimizer step over a parameter list. At step 1 with a constant
/// gradient `g` this reduces to `p -= lr * g / (|g| + eps)`.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Vec<f32>],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<(), NumericsError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NumericsError::Contract {
            op: "adam_step",
            detail: format!(
                "mismatched lists: {} params, {} grads, {} states",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    state.step += 1;
    let bc1 = (1.0 - (hyper.beta1 as f64).powi(state.step as i32)) as f32;
    let bc2 = (1.0 - (hyper.beta2 as f64).powi(state.step as i32)) as f32;
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.numel() != g.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "adam_step",
                detail: format!("param {} elements vs grad {}", p.numel(), g.len()),
            });
        }
        for j in 0..g.len() {
            let gj = g[j];
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * gj;
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p.data[j] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}
