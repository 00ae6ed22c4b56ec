//! Named parameter storage, per-tape binding, and the Adam optimizer.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::ops::{BatchStats, RunningStats};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Trainable tensors plus batch-norm running statistics.
///
/// Modules hold [`ParamId`]s, so two modules constructed with the same id read
/// and write the same storage.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<(String, RunningStats)>,
    names: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains_key(&name), "duplicate parameter {name}");
        self.names.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, channels: usize) -> BufferId {
        self.buffers.push((name.into(), RunningStats::new(channels)));
        BufferId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).map(|&i| ParamId(i))
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn buffer(&self, id: BufferId) -> &RunningStats {
        &self.buffers[id.0].1
    }

    pub fn buffers(&self) -> &[(String, RunningStats)] {
        &self.buffers
    }

    pub fn update_buffer(&mut self, id: BufferId, stats: &BatchStats) {
        self.buffers[id.0].1.update(stats);
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Hash of every parameter and buffer bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for p in &self.params {
            p.name.hash(&mut h);
            p.value.shape().hash(&mut h);
            p.value.data().iter().for_each(|v| v.to_bits().hash(&mut h));
        }
        for (name, rs) in &self.buffers {
            name.hash(&mut h);
            rs.mean.iter().chain(&rs.var).for_each(|v| v.to_bits().hash(&mut h));
        }
        h.finish()
    }

    /// Records every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(p.value.clone())).collect(),
        }
    }

    /// Like [`bind`](Self::bind) but records parameters as constants.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.constant(p.value.clone())).collect(),
        }
    }

    /// Flattened `(name, tensor)` state: parameters, then buffers as
    /// `<name>.running_mean` and `<name>.running_var`.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> =
            self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for (name, rs) in &self.buffers {
            let c = rs.mean.len();
            out.push((format!("{name}.running_mean"), Tensor::new([c], rs.mean.clone()).unwrap()));
            out.push((format!("{name}.running_var"), Tensor::new([c], rs.var.clone()).unwrap()));
        }
        out
    }

    /// Inverse of [`state`](Self::state). Every entry must be present with a matching shape.
    pub fn load_state(&mut self, state: &[(String, Tensor)]) -> Result<()> {
        let given: HashMap<&str, &Tensor> = state.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let fetch = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = given
                .get(name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::shape(
                    "load_state",
                    format!("{name}: checkpoint {:?} vs model {:?}", t.shape(), shape),
                ));
            }
            Ok((*t).clone())
        };
        let mut params = self.params.clone();
        for p in &mut params {
            p.value = fetch(&p.name, p.value.shape())?;
        }
        let mut buffers = self.buffers.clone();
        for (name, rs) in &mut buffers {
            let c = [rs.mean.len()];
            rs.mean = fetch(&format!("{name}.running_mean"), &c)?.into_data();
            rs.var = fetch(&format!("{name}.running_var"), &c)?.into_data();
        }
        let expected = params.len() + 2 * buffers.len();
        if state.len() != expected {
            return Err(Error::format(
                "checkpoint",
                format!("{} tensors, model expects {}", state.len(), expected),
            ));
        }
        self.params = params;
        self.buffers = buffers;
        Ok(())
    }
}

/// Tape handles of every parameter, valid for the tape that created them.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Replaces one handle, e.g. to differentiate through a single parameter.
    pub fn with(mut self, id: ParamId, var: Var) -> Self {
        self.vars[id.0] = var;
        self
    }

    /// Gradient of every parameter, zero where none flowed.
    pub fn collect(&self, grads: &mut Gradients, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.params())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec())))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// Adam with decoupled weight decay on parameters flagged `decay`.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = |p: &Param| Tensor::zeros(p.value.shape().to_vec());
        Self {
            config,
            step: 0,
            m: store.params().iter().map(zeros).collect(),
            v: store.params().iter().map(zeros).collect(),
        }
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let decay = if store.params[i].decay { weight_decay } else { 0.0 };
            let p = store.params[i].value.data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g.data()[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g.data()[j] * g.data()[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                p[j] -= lr * update + lr * decay * p[j];
            }
        }
    }

    /// Moment estimates as `(name, tensor)` pairs plus a `step` scalar.
    pub fn state(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = vec![("step".to_string(), Tensor::scalar(self.step as f64))];
        for (p, (m, v)) in store.params().iter().zip(self.m.iter().zip(&self.v)) {
            out.push((format!("{}.m", p.name), m.clone()));
            out.push((format!("{}.v", p.name), v.clone()));
        }
        out
    }

    pub fn load_state(&mut self, store: &ParamStore, state: &[(String, Tensor)]) -> Result<()> {
        let given: HashMap<&str, &Tensor> = state.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let get = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = given
                .get(name)
                .ok_or_else(|| Error::format("optimizer state", format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::shape(
                    "Adam::load_state",
                    format!("{name}: saved {:?} vs model {:?}", t.shape(), shape),
                ));
            }
            Ok((*t).clone())
        };
        let step = get("step", &[1])?.item();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for p in store.params() {
            m.push(get(&format!("{}.m", p.name), p.value.shape())?);
            v.push(get(&format!("{}.v", p.name), p.value.shape())?);
        }
        self.step = step as u64;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

/// Piecewise-constant learning rate: `base · factor^(milestones passed)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSchedule {
    pub base: f64,
    pub factor: f64,
    pub milestones: Vec<usize>,
}

impl StepSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.factor.powi(passed as i32)
    }
}
