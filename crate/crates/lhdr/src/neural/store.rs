//! Named parameter store with Adam state and a bit-exact weight file format.
//!
//! Weight file layout (all integers little-endian):
//! magic `LHDR` | version u32 | tensor count u32 | per tensor:
//! name length u32, UTF-8 name, rank u8, dims u32 each, f64 payload.
//! Tensors are written in sorted name order, so identical stores always
//! serialize to identical bytes.

use std::collections::BTreeMap;

use super::Tensor;
use crate::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"LHDR";
const WEIGHTS_VERSION: u32 = 1;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

struct ParamEntry {
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Named parameters with matching gradient and Adam moment tensors.
#[derive(Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; gradient and moments start at zero.
    pub fn register(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::invalid(format!("parameter {name} already registered")));
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

    pub fn value(&self, name: &str) -> &Tensor {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).grad
    }

    /// Accumulates into the named gradient.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("missing gradient slot for {name}")))?;
        if entry.grad.shape() != grad.shape() {
            return Err(Error::shape(format!(
                "gradient for {name}: {:?} vs parameter {:?}",
                grad.shape(),
                entry.grad.shape()
            )));
        }
        for (g, d) in entry.grad.data.iter_mut().zip(&grad.data) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad.data.fill(0.0);
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Bias-corrected Adam update over every parameter; gradients are
    /// zeroed afterwards and the step counter advances.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for entry in self.entries.values_mut() {
            for i in 0..entry.value.data.len() {
                let g = entry.grad.data[i];
                let m = cfg.beta1 * entry.m.data[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * entry.v.data[i] + (1.0 - cfg.beta2) * g * g;
                entry.m.data[i] = m;
                entry.v.data[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                entry.value.data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            entry.grad.data.fill(0.0);
        }
    }

    /// Removes a tensor from the store, returning its value.
    pub fn take(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name).map(|e| e.value)
    }

    /// Serializes parameter values (not moments) to the weight format.
    pub fn save_bytes(&self) -> Vec<u8> {
        self.save_bytes_with(&[])
    }

    /// Like [`Self::save_bytes`] but with extra tensors merged in by name.
    pub fn save_bytes_with(&self, extras: &[(String, Tensor)]) -> Vec<u8> {
        let mut items: Vec<(&str, &Tensor)> =
            self.entries.iter().map(|(n, e)| (n.as_str(), &e.value)).collect();
        for (n, t) in extras {
            items.push((n.as_str(), t));
        }
        items.sort_by(|a, b| a.0.cmp(b.0));

        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.extend_from_slice(&(items.len() as u32).to_le_bytes());
        for (name, tensor) in items {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let shape = tensor.shape();
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &tensor.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Loads a weight file into a fresh store (moments zero, step 0).
    pub fn load_bytes(bytes: &[u8]) -> Result<ParamStore> {
        const F: &str = "weights";
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::format(F, "truncated file"));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != WEIGHTS_MAGIC {
            return Err(Error::format(F, "bad magic"));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != WEIGHTS_VERSION {
            return Err(Error::format(F, format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| Error::format(F, "non-UTF-8 tensor name"))?
                .to_string();
            let rank = take(&mut pos, 1)?[0] as usize;
            if rank > 4 {
                return Err(Error::format(F, format!("rank {rank} exceeds 4")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, numel * 8)?;
            let data: Vec<f64> =
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            store.register(&name, Tensor::from_vec(&shape, data)?)?;
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.register("theta", Tensor::from_vec(&[1], vec![value]).unwrap()).unwrap();
        store
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = scalar_store(1.5);
        // Prime the moments with one real step, then do a zero-grad step.
        store.accumulate_grad("theta", &Tensor::from_vec(&[1], vec![1.0]).unwrap()).unwrap();
        store.adam_step(&AdamConfig::default());
        let after_first = store.value("theta").data[0];
        store.adam_step(&AdamConfig::default());
        let after_zero = store.value("theta").data[0];
        // m decays toward zero but v also decays; the update direction is
        // the decayed momentum, so the parameter still moves slightly.
        assert_ne!(after_first, 1.5);
        assert!((after_zero - after_first).abs() <= AdamConfig::default().lr * 1.5);

        let mut untouched = scalar_store(2.0);
        untouched.adam_step(&AdamConfig::default());
        // Never-touched gradients are exactly zero: 0/(0 + eps) = 0.
        assert_eq!(untouched.value("theta").data[0], 2.0);
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_lr() {
        let mut store = scalar_store(0.0);
        let cfg = AdamConfig { lr: 1e-2, ..AdamConfig::default() };
        store.accumulate_grad("theta", &Tensor::from_vec(&[1], vec![1.0]).unwrap()).unwrap();
        store.adam_step(&cfg);
        let delta = store.value("theta").data[0];
        // Bias correction makes m_hat / sqrt(v_hat) = 1 at step 1.
        assert!((delta + cfg.lr).abs() < cfg.lr * 2e-8, "delta {delta}");
        assert_eq!(store.step(), 1);
        assert_eq!(store.grad("theta").data[0], 0.0, "gradients cleared after step");
    }

    /// Independent scalar Adam used as the trajectory oracle.
    struct ScalarAdam {
        m: f64,
        v: f64,
        t: i32,
    }

    impl ScalarAdam {
        fn step(&mut self, theta: &mut f64, g: f64, cfg: &AdamConfig) {
            self.t += 1;
            self.m = cfg.beta1 * self.m + (1.0 - cfg.beta1) * g;
            self.v = cfg.beta2 * self.v + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m / (1.0 - cfg.beta1.powi(self.t));
            let v_hat = self.v / (1.0 - cfg.beta2.powi(self.t));
            *theta -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }

    #[test]
    fn ten_step_quadratic_matches_scalar_oracle() {
        let cfg = AdamConfig { lr: 0.05, ..AdamConfig::default() };
        let mut store = scalar_store(1.0);
        let mut oracle_theta = 1.0;
        let mut oracle = ScalarAdam { m: 0.0, v: 0.0, t: 0 };
        for _ in 0..10 {
            // f(theta) = theta^2, grad = 2 theta.
            let g = 2.0 * store.value("theta").data[0];
            store.accumulate_grad("theta", &Tensor::from_vec(&[1], vec![g]).unwrap()).unwrap();
            store.adam_step(&cfg);
            let og = 2.0 * oracle_theta;
            oracle.step(&mut oracle_theta, og, &cfg);
            assert!((store.value("theta").data[0] - oracle_theta).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_with_zero_lr_is_identity() {
        let mut store = scalar_store(3.0);
        let cfg = AdamConfig { lr: 0.0, ..AdamConfig::default() };
        for _ in 0..5 {
            store.accumulate_grad("theta", &Tensor::from_vec(&[1], vec![2.0]).unwrap()).unwrap();
            store.adam_step(&cfg);
        }
        assert_eq!(store.value("theta").data[0], 3.0);
    }

    #[test]
    fn save_load_bitwise_identity() {
        let mut store = ParamStore::new();
        store
            .register("a.w", Tensor::from_vec(&[2, 3], vec![0.1, -0.2, 0.3, 1e-300, 5.0, -0.0]).unwrap())
            .unwrap();
        store.register("b", Tensor::from_vec(&[1], vec![std::f64::consts::PI]).unwrap()).unwrap();
        let bytes = store.save_bytes();
        let loaded = ParamStore::load_bytes(&bytes).unwrap();
        assert_eq!(loaded.save_bytes(), bytes);
        for name in store.names() {
            assert_eq!(
                loaded.value(&name).data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                store.value(&name).data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn load_rejects_garbage() {
        assert!(ParamStore::load_bytes(b"NOPE").is_err());
        assert!(ParamStore::load_bytes(b"LHDR\x01\x00\x00\x00").is_err());
        let mut store = ParamStore::new();
        store.register("x", Tensor::from_vec(&[1], vec![1.0]).unwrap()).unwrap();
        let mut bytes = store.save_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(ParamStore::load_bytes(&bytes).is_err());
    }

    #[test]
    fn duplicate_registration_rejected() {
        let mut store = scalar_store(0.0);
        assert!(store.register("theta", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn gradient_shape_mismatch_rejected() {
        let mut store = scalar_store(0.0);
        assert!(store.accumulate_grad("theta", &Tensor::zeros(&[2])).is_err());
        assert!(store.accumulate_grad("nope", &Tensor::zeros(&[1])).is_err());
    }
}
