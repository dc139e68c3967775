//! Named parameter storage with Adam state.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use super::NumError;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

/// All learnable tensors, keyed by name. Iteration order is alphabetical
/// (BTreeMap), which fixes the floating-point summation order of the global
/// gradient norm and makes updates bit-reproducible.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub(crate) entries: BTreeMap<String, ParamEntry>,
    pub(crate) adam_t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clip threshold.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 0.5,
        }
    }
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<(), NumError> {
        if self.entries.contains_key(name) {
            return Err(NumError::Contract(format!("duplicate parameter {name:?}")));
        }
        let shape = value.shape().to_vec();
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                grad: Tensor::zeros(&shape),
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.grad)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn adam_t(&self) -> u64 {
        self.adam_t
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<(), NumError> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NumError::Contract(format!("unknown parameter {name:?}")))?;
        if entry.grad.shape() != g.shape() {
            return Err(NumError::Shape(format!(
                "gradient shape {:?} does not match parameter {name:?} {:?}",
                g.shape(),
                entry.grad.shape()
            )));
        }
        for (x, y) in entry.grad.data_mut().iter_mut().zip(g.data()) {
            *x += y;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad.data_mut().fill(0.0);
        }
    }

    /// L2 norm over all gradients, accumulated in name order.
    pub fn global_grad_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|e| e.grad.data().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// One Adam step over every parameter, with global-norm clipping
    /// applied to the gradients before the moment updates.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<(), NumError> {
        for (name, entry) in &self.entries {
            if entry.grad.data().iter().any(|g| !g.is_finite()) {
                return Err(NumError::NonFinite {
                    param: name.clone(),
                });
            }
        }
        let norm = self.global_grad_norm();
        let scale = if norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        };
        self.adam_t += 1;
        let t = self.adam_t as i32;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);
        for entry in self.entries.values_mut() {
            for k in 0..entry.value.len() {
                let g = entry.grad.data()[k] * scale;
                let m = cfg.beta1 * entry.m.data()[k] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * entry.v.data()[k] + (1.0 - cfg.beta2) * g * g;
                entry.m.data_mut()[k] = m;
                entry.v.data_mut()[k] = v;
                let m_hat = m / bias1;
                let v_hat = v / bias2;
                entry.value.data_mut()[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Human-readable parameter inventory: one `name shape` line each.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for (name, entry) in &self.entries {
            out.push_str(&format!("{name} {:?}\n", entry.value.shape()));
        }
        out
    }
}

/// Glorot/Xavier uniform init: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(rng: &mut SplitMix64, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.uniform(-a, a)).collect();
    Tensor::from_vec(&[fan_in, fan_out], data).expect("sized above")
}

/// Gaussian init with the given standard deviation.
pub fn gaussian(rng: &mut SplitMix64, shape: &[usize], std: f64) -> Tensor {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.normal() * std).collect();
    Tensor::from_vec(shape, data).expect("sized above")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::from_vec(&[1, 2], vec![0.5, -0.5]).unwrap())
            .unwrap();
        let before = store.get("w").unwrap().clone();
        store.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(store.get("w").unwrap(), &before);
    }

    #[test]
    fn global_norm_clip_scales_gradient() {
        // gradient norm 10 with clip 1 scales by 0.1; first Adam step moves
        // the parameter by -lr * g_clipped / (|g_clipped| + eps) ~ -lr.
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(0.0)).unwrap();
        store
            .accumulate_grad("w", &Tensor::scalar(10.0))
            .unwrap();
        assert_eq!(store.global_grad_norm(), 10.0);
        let cfg = AdamConfig {
            clip_norm: 1.0,
            ..AdamConfig::default()
        };
        store.adam_step(&cfg).unwrap();
        // m = 0.1 * 1.0, v = 0.001 * 1.0; with bias correction the update
        // direction is exactly g_clipped / (|g_clipped| + eps).
        let expected = -cfg.lr * 1.0 / (1.0 + cfg.eps);
        let got = store.get("w").unwrap().item();
        assert!((got - expected).abs() < 1e-15, "got {got}, expected {expected}");
    }

    #[test]
    fn adam_step_matches_hand_computation() {
        // Single scalar parameter, one step from a fresh state with g = 2:
        //   m1 = 0.1 * 2 = 0.2           m_hat = 0.2 / (1 - 0.9) = 2
        //   v1 = 0.001 * 4 = 0.004       v_hat = 0.004 / (1 - 0.999) = 4
        //   w  = 1 - lr * 2 / (2 + eps)
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0)).unwrap();
        store.accumulate_grad("w", &Tensor::scalar(2.0)).unwrap();
        let cfg = AdamConfig {
            lr: 0.01,
            clip_norm: 100.0, // inactive
            ..AdamConfig::default()
        };
        store.adam_step(&cfg).unwrap();
        let expected = 1.0 - 0.01 * 2.0 / (2.0 + 1e-8);
        let got = store.get("w").unwrap().item();
        assert!((got - expected).abs() < 1e-14, "got {got}, expected {expected}");
        assert_eq!(store.adam_t(), 1);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = ParamStore::new();
        store.insert("bad_param", Tensor::scalar(0.0)).unwrap();
        store
            .accumulate_grad("bad_param", &Tensor::scalar(f64::NAN))
            .unwrap();
        let err = store.adam_step(&AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("bad_param"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(0.0)).unwrap();
        assert!(store.insert("w", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn describe_lists_names_and_shapes() {
        let mut store = ParamStore::new();
        store.insert("b.bias", Tensor::zeros(&[1, 4])).unwrap();
        store.insert("a.weight", Tensor::zeros(&[4, 4])).unwrap();
        let desc = store.describe();
        let lines: Vec<&str> = desc.lines().collect();
        assert_eq!(lines, vec!["a.weight [4, 4]", "b.bias [1, 4]"]);
    }
}
