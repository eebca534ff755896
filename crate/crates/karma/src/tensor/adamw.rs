//! Adam with decoupled weight decay.

use super::{ParamStore, Tensor, TensorError};
use std::collections::BTreeMap;

/// Optimizer state: first/second moments per parameter plus a shared step
/// counter. Moments are allocated lazily on the first step that touches a
/// parameter.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: u64,
}

impl Default for AdamWState {
    fn default() -> Self {
        AdamWState {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Moment tensors flattened for checkpointing, keyed `m.<name>` / `v.<name>`.
    pub fn export(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, t) in &self.m {
            out.push((format!("m.{name}"), t.clone()));
        }
        for (name, t) in &self.v {
            out.push((format!("v.{name}"), t.clone()));
        }
        out
    }

    pub fn import(entries: Vec<(String, Tensor)>, t: u64) -> Self {
        let mut state = AdamWState::new();
        state.t = t;
        for (key, tensor) in entries {
            if let Some(name) = key.strip_prefix("m.") {
                state.m.insert(name.to_string(), tensor);
            } else if let Some(name) = key.strip_prefix("v.") {
                state.v.insert(name.to_string(), tensor);
            }
        }
        state
    }
}

/// One bias-corrected AdamW update over every parameter present in `grads`:
/// `theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)`.
///
/// Parameters without a gradient entry are left untouched. A non-finite
/// gradient aborts with the offending parameter's name.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamWState,
    lr: f32,
    weight_decay: f32,
) -> Result<(), TensorError> {
    for (name, grad) in grads {
        if !grad.data().iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFiniteGradient { name: name.clone() });
        }
        if !params.contains(name) {
            return Err(TensorError::UnknownParam { name: name.clone() });
        }
    }

    state.t += 1;
    let t = state.t;
    let bias1 = 1.0 - state.beta1.powi(t as i32);
    let bias2 = 1.0 - state.beta2.powi(t as i32);

    for (name, grad) in grads {
        let param = params.get_mut(name)?;
        if param.dims() != grad.dims() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw_step",
                lhs: param.dims().to_vec(),
                rhs: grad.dims().to_vec(),
            });
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(param.dims().to_vec()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(param.dims().to_vec()));

        let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
        let pd = param.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let g = grad.data()[i];
            md[i] = b1 * md[i] + (1.0 - b1) * g;
            vd[i] = b2 * vd[i] + (1.0 - b2) * g * g;
            let m_hat = md[i] / bias1;
            let v_hat = vd[i] / bias2;
            pd[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * pd[i]);
        }
        param.assert_finite("adamw_step")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f32) -> ParamStore {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(value));
        store
    }

    fn grad_of(value: f32) -> BTreeMap<String, Tensor> {
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(value));
        grads
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_lr() {
        // m_hat = v_hat = 1 on the first step, so the update is lr/(1+eps).
        let mut params = single_param(0.0);
        let mut state = AdamWState::new();
        adamw_step(&mut params, &grad_of(1.0), &mut state, 0.05, 0.0).unwrap();
        let w = params.get("w").unwrap().item().unwrap() as f64;
        let expected = -0.05f64 / (1.0 + 1e-8);
        assert!((w - expected).abs() < 1e-7, "w={w}");
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut params = single_param(1.25);
        let mut state = AdamWState::new();
        for _ in 0..3 {
            adamw_step(&mut params, &grad_of(0.0), &mut state, 0.1, 0.0).unwrap();
        }
        assert_eq!(params.get("w").unwrap().item().unwrap(), 1.25);
    }

    #[test]
    fn pure_decay_term() {
        let mut params = single_param(1.0);
        let mut state = AdamWState::new();
        adamw_step(&mut params, &grad_of(0.0), &mut state, 0.1, 0.01).unwrap();
        let w = params.get("w").unwrap().item().unwrap();
        assert!((w - 0.999).abs() < 1e-7, "w={w}");
    }

    #[test]
    fn zero_lr_is_identity_on_params() {
        let mut params = single_param(-0.5);
        let mut state = AdamWState::new();
        adamw_step(&mut params, &grad_of(3.0), &mut state, 0.0, 0.01).unwrap();
        assert_eq!(params.get("w").unwrap().item().unwrap(), -0.5);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut params = single_param(0.0);
        let mut state = AdamWState::new();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor {
            dims: vec![1],
            data: vec![f32::INFINITY],
        });
        let err = adamw_step(&mut params, &grads, &mut state, 0.1, 0.0).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
    }

    #[test]
    fn export_import_round_trip() {
        let mut params = single_param(0.0);
        let mut state = AdamWState::new();
        adamw_step(&mut params, &grad_of(1.0), &mut state, 0.05, 0.0).unwrap();
        let restored = AdamWState::import(state.export(), state.step_count());
        assert_eq!(restored.step_count(), 1);
        assert_eq!(restored.m.get("w"), state.m.get("w"));
        assert_eq!(restored.v.get("w"), state.v.get("w"));
    }
}
