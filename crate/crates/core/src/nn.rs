//! Parameter storage, initialization and the SGD optimizer shared by every
//! trainable network in the crate.

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named tensors owned by one network (or a group of auxiliary networks).
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Puts every tensor on the tape, as trainable leaves or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.iter() {
            h.update(name.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.iter() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Checks that another store has the same names and shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

/// The tape-side view of a [`ParamStore`].
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradients for each parameter, `None` where the loss never reached it.
    pub fn collect_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| grads.get(*v).cloned()).collect()
    }
}

/// Uniform in `±1/sqrt(fan_in)`.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-bound..bound))
}

/// `[out, in]` weight for a bias-free linear map.
pub fn linear_weight(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    fan_in_uniform(&[out_dim, in_dim], in_dim, rng)
}

pub fn l2_norm(grads: &[Option<Tensor>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// SGD with heavy-ball momentum and coupled weight decay.
///
/// Parameters whose gradient is `None` are left untouched, including their
/// momentum buffer and weight decay.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    buffers: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(config: SgdConfig, num_params: usize) -> Self {
        Self {
            config,
            buffers: vec![None; num_params],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: Vec<Option<Tensor>>, lr: f64) {
        assert_eq!(grads.len(), store.len(), "gradient count mismatch");
        if self.buffers.len() != store.len() {
            self.buffers.resize(store.len(), None);
        }
        for (i, g) in grads.into_iter().enumerate() {
            let Some(mut g) = g else { continue };
            let w = store.get_mut(ParamId(i));
            if self.config.weight_decay != 0.0 {
                g.scaled_add(self.config.weight_decay, w);
            }
            let update = if self.config.momentum != 0.0 {
                match &mut self.buffers[i] {
                    Some(buf) => {
                        buf.mapv_inplace(|b| b * self.config.momentum);
                        *buf += &g;
                        buf.clone()
                    }
                    slot @ None => {
                        *slot = Some(g.clone());
                        g
                    }
                }
            } else {
                g
            };
            w.scaled_add(-lr, &update);
        }
    }
}

/// Step decay at fractional milestones of the total epoch count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base_lr: f64,
    /// Fractions of total epochs, e.g. `[0.6, 0.75, 0.9]`.
    pub milestones: Vec<f64>,
    pub gamma: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 0.05,
            milestones: vec![0.6, 0.75, 0.9],
            gamma: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize, total_epochs: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| epoch >= (m * total_epochs as f64).round() as usize)
            .count();
        self.base_lr * self.gamma.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn sgd_matches_hand_computation() {
        let mut store = ParamStore::new();
        let id = store.add("w", array![1.0, -2.0].into_dyn());
        let mut opt = Sgd::new(
            SgdConfig {
                momentum: 0.9,
                weight_decay: 0.1,
            },
            1,
        );
        opt.step(&mut store, vec![Some(array![0.5, 0.5].into_dyn())], 0.1);
        // g = 0.5 + 0.1*w = (0.6, 0.3); w -= 0.1*g
        assert!((store.get(id)[[0]] - 0.94).abs() < 1e-12);
        assert!((store.get(id)[[1]] + 2.03).abs() < 1e-12);
        opt.step(&mut store, vec![Some(array![0.0, 0.0].into_dyn())], 0.1);
        // g = 0.1*w = (0.094, -0.203); buf = 0.9*(0.6,0.3) + g
        let b0 = 0.9 * 0.6 + 0.094;
        assert!((store.get(id)[[0]] - (0.94 - 0.1 * b0)).abs() < 1e-12);
    }

    #[test]
    fn none_gradient_leaves_param_untouched() {
        let mut store = ParamStore::new();
        store.add("w", array![1.0].into_dyn());
        let before = store.fingerprint();
        let mut opt = Sgd::new(SgdConfig::default(), 1);
        opt.step(&mut store, vec![None], 0.1);
        assert_eq!(before, store.fingerprint());
    }

    #[test]
    fn schedule_decays_at_milestones() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0, 100), 0.05);
        assert!((s.lr_at(60, 100) - 0.005).abs() < 1e-15);
        assert!((s.lr_at(75, 100) - 0.0005).abs() < 1e-15);
        assert!((s.lr_at(99, 100) - 0.00005).abs() < 1e-15);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let wa = linear_weight(4, 9, &mut a);
        let wb = linear_weight(4, 9, &mut b);
        assert_eq!(wa, wb);
        assert!(wa.iter().all(|v| v.abs() <= 1.0 / 3.0));
    }
}
