//! Named parameter tensors with Adam state.
//!
//! Parameters live in a `BTreeMap` so every iteration order — initialization,
//! checkpoint serialization, update sweeps — is deterministic by name.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::Tensor;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// What a call to [`ParamStore::adam_step`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A non-finite gradient was seen; parameters and moments untouched,
    /// step counter not advanced.
    SkippedNonFinite,
}

#[derive(Debug)]
struct Entry {
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Parameters, their accumulated gradients, and optimizer moments.
#[derive(Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Register a parameter. Panics on duplicate names: every head wires its
    /// parameters exactly once.
    pub fn insert(&mut self, name: &str, value: Tensor) {
        let (r, c) = (value.rows, value.cols);
        let prev = self.entries.insert(
            name.to_string(),
            Entry {
                value,
                grad: Tensor::zeros(r, c),
                m: Tensor::zeros(r, c),
                v: Tensor::zeros(r, c),
            },
        );
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Accumulated gradient for a parameter.
    pub fn grad(&self, name: &str) -> &Tensor {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).grad
    }

    /// Names in deterministic (lexicographic) order.
    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.data.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Add `grad` into the named parameter's gradient accumulator.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) {
        let e = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
        assert_eq!(
            (e.grad.rows, e.grad.cols),
            (grad.rows, grad.cols),
            "gradient shape mismatch for {name}"
        );
        for (d, s) in e.grad.data.iter_mut().zip(&grad.data) {
            *d += s;
        }
    }

    /// Global L2 norm over all accumulated gradients.
    pub fn grad_norm(&self) -> f64 {
        let ss: f64 = self
            .entries
            .values()
            .map(|e| e.grad.data.iter().map(|g| g * g).sum::<f64>())
            .sum();
        num_traits::Float::sqrt(ss)
    }

    /// Scale every gradient so the global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for e in self.entries.values_mut() {
                e.grad.data.iter_mut().for_each(|g| *g *= s);
            }
        }
    }

    /// One Adam update from the accumulated gradients. A non-finite gradient
    /// anywhere skips the whole step so moments never absorb garbage.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> StepOutcome {
        let finite = self
            .entries
            .values()
            .all(|e| e.grad.data.iter().all(|g| g.is_finite()));
        if !finite {
            return StepOutcome::SkippedNonFinite;
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - num_traits::Float::powf(cfg.beta1, t);
        let bc2 = 1.0 - num_traits::Float::powf(cfg.beta2, t);
        for e in self.entries.values_mut() {
            for k in 0..e.value.data.len() {
                let g = e.grad.data[k];
                e.m.data[k] = cfg.beta1 * e.m.data[k] + (1.0 - cfg.beta1) * g;
                e.v.data[k] = cfg.beta2 * e.v.data[k] + (1.0 - cfg.beta2) * g * g;
                let m_hat = e.m.data[k] / bc1;
                let v_hat = e.v.data[k] / bc2;
                e.value.data[k] -=
                    cfg.lr * m_hat / (num_traits::Float::sqrt(v_hat) + cfg.eps);
            }
        }
        StepOutcome::Applied
    }

    /// Flat views for serialization: `(name, tensor)` for values and both
    /// moment buffers, names prefixed `param.` / `adam_m.` / `adam_v.`.
    pub fn export(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(self.entries.len() * 3);
        for (name, e) in &self.entries {
            out.push((alloc::format!("param.{name}"), &e.value));
        }
        for (name, e) in &self.entries {
            out.push((alloc::format!("adam_m.{name}"), &e.m));
        }
        for (name, e) in &self.entries {
            out.push((alloc::format!("adam_v.{name}"), &e.v));
        }
        out
    }

    /// Rebuild from exported tensors plus the step counter. Tensors must
    /// cover exactly the same names the store would export.
    pub fn import(tensors: &[(String, Tensor)], step: u64) -> Result<Self, String> {
        let mut store = ParamStore { entries: BTreeMap::new(), step };
        for (full, t) in tensors {
            if let Some(name) = full.strip_prefix("param.") {
                let (r, c) = (t.rows, t.cols);
                let prev = store.entries.insert(
                    name.to_string(),
                    Entry {
                        value: t.clone(),
                        grad: Tensor::zeros(r, c),
                        m: Tensor::zeros(r, c),
                        v: Tensor::zeros(r, c),
                    },
                );
                if prev.is_some() {
                    return Err(alloc::format!("duplicate parameter {name}"));
                }
            }
        }
        for (full, t) in tensors {
            let (prefix, is_m) = if full.starts_with("adam_m.") {
                ("adam_m.", true)
            } else if full.starts_with("adam_v.") {
                ("adam_v.", false)
            } else {
                continue;
            };
            let name = &full[prefix.len()..];
            let e = store
                .entries
                .get_mut(name)
                .ok_or_else(|| alloc::format!("moment for unknown parameter {name}"))?;
            if (t.rows, t.cols) != (e.value.rows, e.value.cols) {
                return Err(alloc::format!("moment shape mismatch for {name}"));
            }
            if is_m {
                e.m = t.clone();
            } else {
                e.v = t.clone();
            }
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn adam_constant_gradient_closed_form() {
        // With a constant gradient g, bias correction makes m_hat = g and
        // v_hat = g^2 at every step, so each update moves by exactly
        // lr * g / (|g| + eps) regardless of step count.
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::scalar(1.0));
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let per_step = 0.1 * 0.5 / (0.5 + cfg.eps);
        for k in 1..=5u64 {
            ps.zero_grads();
            ps.accumulate_grad("w", &Tensor::scalar(0.5));
            assert_eq!(ps.adam_step(&cfg), StepOutcome::Applied);
            let expect = 1.0 - k as f64 * per_step;
            assert!(
                (ps.get("w").data[0] - expect).abs() < 1e-12,
                "step {k}: {} vs {expect}",
                ps.get("w").data[0]
            );
        }
        assert_eq!(ps.step_count(), 5);
    }

    #[test]
    fn adam_two_steps_hand_computed() {
        // Varying gradient, moments tracked by hand:
        //   g1 = 1.0: m = 0.1, v = 0.001, m_hat = 1, v_hat = 1,
        //             w = 0 - 0.01 * 1/(1 + 1e-8)
        //   g2 = -2.0: m = 0.09 - 0.2 = -0.11, v = 0.000999 + 0.004,
        //             m_hat = -0.11/0.19, v_hat = 0.004999/0.001999
        let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::scalar(0.0));

        ps.zero_grads();
        ps.accumulate_grad("w", &Tensor::scalar(1.0));
        ps.adam_step(&cfg);
        let w1 = -0.01 * 1.0 / (1.0 + 1e-8);
        assert!((ps.get("w").data[0] - w1).abs() < 1e-15);

        ps.zero_grads();
        ps.accumulate_grad("w", &Tensor::scalar(-2.0));
        ps.adam_step(&cfg);
        let m_hat = (0.9 * 0.1 + 0.1 * (-2.0)) / (1.0 - 0.81);
        let v_hat = (0.999 * 0.001 + 0.001 * 4.0) / (1.0 - 0.998001);
        let w2 = w1 - 0.01 * m_hat / (num_traits::Float::sqrt(v_hat) + 1e-8);
        assert!((ps.get("w").data[0] - w2).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::scalar(3.0));
        ps.accumulate_grad("w", &Tensor::scalar(f64::NAN));
        assert_eq!(ps.adam_step(&AdamConfig::default()), StepOutcome::SkippedNonFinite);
        assert_eq!(ps.get("w").data[0], 3.0);
        assert_eq!(ps.step_count(), 0);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut ps = ParamStore::new();
        ps.insert("a", Tensor::new(vec![3.0, 0.0], 1, 2));
        ps.insert("b", Tensor::scalar(0.0));
        ps.accumulate_grad("a", &Tensor::new(vec![3.0, 0.0], 1, 2));
        ps.accumulate_grad("b", &Tensor::scalar(4.0));
        assert!((ps.grad_norm() - 5.0).abs() < 1e-15);
        ps.clip_grad_norm(1.0);
        assert!((ps.grad_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn export_import_round_trip() {
        let cfg = AdamConfig::default();
        let mut ps = ParamStore::new();
        ps.insert("b", Tensor::new(vec![1.0, 2.0], 1, 2));
        ps.insert("a", Tensor::scalar(-0.5));
        ps.zero_grads();
        ps.accumulate_grad("a", &Tensor::scalar(1.0));
        ps.accumulate_grad("b", &Tensor::new(vec![0.5, -0.5], 1, 2));
        ps.adam_step(&cfg);

        let exported: Vec<(String, Tensor)> =
            ps.export().into_iter().map(|(n, t)| (n, t.clone())).collect();
        // Export order: all params first, sorted by name.
        assert_eq!(exported[0].0, "param.a");
        assert_eq!(exported[1].0, "param.b");

        let mut back = ParamStore::import(&exported, ps.step_count()).unwrap();
        assert_eq!(back.get("a"), ps.get("a"));
        assert_eq!(back.get("b"), ps.get("b"));
        assert_eq!(back.step_count(), 1);

        // Moments survived: one more identical step matches on both stores.
        for s in [&mut ps, &mut back] {
            s.zero_grads();
            s.accumulate_grad("a", &Tensor::scalar(1.0));
            s.accumulate_grad("b", &Tensor::new(vec![0.5, -0.5], 1, 2));
            s.adam_step(&cfg);
        }
        assert_eq!(back.get("a"), ps.get("a"));
        assert_eq!(back.get("b"), ps.get("b"));
    }
}
