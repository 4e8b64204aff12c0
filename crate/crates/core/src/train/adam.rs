//! Adam with bias correction, stepping against the gradient.

use indexmap::IndexMap;

use crate::model::ParamStore;
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(format!(
                "adam betas must lie in [0, 1), got ({}, {})",
                self.beta1, self.beta2
            ));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(format!("adam eps must be positive, got {}", self.eps));
        }
        Ok(())
    }
}

/// First and second moments for every trainable tensor, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    m: IndexMap<String, Tensor<T>>,
    v: IndexMap<String, Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || -> IndexMap<String, Tensor<T>> {
            store
                .iter()
                .map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape().to_vec())))
                .collect()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.v.get(name)
    }
}

/// One update: `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
/// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)`.
///
/// `grads` must hold exactly one tensor per parameter, with matching shapes.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &IndexMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<(), TensorError> {
    if grads.len() != store.len() {
        return Err(TensorError::Invalid(format!(
            "{} gradients for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    for (name, p) in store.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| TensorError::Invalid(format!("no gradient for {name:?}")))?;
        let m = state
            .m
            .get(name)
            .ok_or_else(|| TensorError::Invalid(format!("no optimizer state for {name:?}")))?;
        for other in [g, m] {
            if other.shape() != p.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: other.shape().to_vec(),
                });
            }
        }
    }
    state.step += 1;
    let c = state.config;
    let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
    let eps = T::from_f64_lossy(c.eps);
    let lr = T::from_f64_lossy(lr);
    let t = state.step as f64;
    let corr1 = T::from_f64_lossy(1.0 - c.beta1.powf(t));
    let corr2 = T::from_f64_lossy(1.0 - c.beta2.powf(t));
    for (name, p) in store.iter_mut() {
        let g = grads[name].data();
        let m = state.m.get_mut(name).expect("checked above").data_mut();
        let v = state.v.get_mut(name).expect("checked above").data_mut();
        for (i, theta) in p.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(theta: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("theta", Tensor::new([1], vec![theta]).unwrap());
        s
    }

    fn grads(g: f64) -> IndexMap<String, Tensor<f64>> {
        [("theta".to_string(), Tensor::new([1], vec![g]).unwrap())]
            .into_iter()
            .collect()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        adam_step(&mut s, &grads(1.0), &mut st, 1e-3).unwrap();
        let theta = s.get("theta").unwrap().data()[0];
        assert!((theta - (1.0 - 1e-3)).abs() < 1e-10, "{theta}");
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn zero_gradient_or_rate_is_a_no_op() {
        for (g, lr) in [(0.0, 1e-2), (3.0, 0.0)] {
            let mut s = scalar_store(0.25);
            let mut st = AdamState::new(&s, AdamConfig::default());
            adam_step(&mut s, &grads(g), &mut st, lr).unwrap();
            assert_eq!(s.get("theta").unwrap().data()[0], 0.25);
        }
    }

    #[test]
    fn misaligned_gradients_rejected() {
        let mut s = scalar_store(0.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        let bad: IndexMap<_, _> = [("theta".to_string(), Tensor::zeros(vec![2]))].into_iter().collect();
        assert!(adam_step(&mut s, &bad, &mut st, 1e-3).is_err());
        let other: IndexMap<_, _> = [("phi".to_string(), Tensor::zeros(vec![1]))].into_iter().collect();
        assert!(adam_step(&mut s, &other, &mut st, 1e-3).is_err());
        assert_eq!(st.step_count(), 0);
    }
}
