use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{RuntimeError, Scalar, Tensor};
use crate::topology::{ComputeGraph, Layer, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Gamma => "gamma",
            ParamRole::Beta => "beta",
            ParamRole::RunningMean => "running_mean",
            ParamRole::RunningVar => "running_var",
        }
    }

    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }

    /// Role of a `<node_id>.<role>` name.
    pub fn of_name(name: &str) -> Option<ParamRole> {
        const ALL: [ParamRole; 6] = [
            ParamRole::Weight,
            ParamRole::Bias,
            ParamRole::Gamma,
            ParamRole::Beta,
            ParamRole::RunningMean,
            ParamRole::RunningVar,
        ];
        let (_, suffix) = name.rsplit_once('.')?;
        ALL.into_iter().find(|r| r.as_str() == suffix)
    }
}

impl fmt::Display for ParamRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn param_name(node: &NodeId, role: ParamRole) -> String {
    format!("{}.{}", node.as_str(), role.as_str())
}

/// One tensor a graph expects in its parameter store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub node: NodeId,
    pub role: ParamRole,
    pub dims: Vec<usize>,
    pub fan_in: usize,
}

/// Every parameter and buffer of `g`, in node order. Sliced linear layers
/// list their full stored weight.
pub fn parameter_manifest(g: &ComputeGraph) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    for node in g.nodes() {
        let mut push = |role: ParamRole, dims: Vec<usize>, fan_in: usize| {
            out.push(ParamSpec {
                name: param_name(&node.id, role),
                node: node.id.clone(),
                role,
                dims,
                fan_in,
            })
        };
        match &node.layer {
            Layer::Conv2d(c) => {
                let cin_g = c.in_ch / c.groups.max(1);
                let fan_in = cin_g * c.kernel[0] * c.kernel[1];
                push(ParamRole::Weight, vec![c.out_ch, cin_g, c.kernel[0], c.kernel[1]], fan_in);
                if c.has_bias {
                    push(ParamRole::Bias, vec![c.out_ch], fan_in);
                }
            }
            Layer::Batchnorm2d { channels } => {
                for role in [
                    ParamRole::Gamma,
                    ParamRole::Beta,
                    ParamRole::RunningMean,
                    ParamRole::RunningVar,
                ] {
                    push(role, vec![*channels], 0);
                }
            }
            Layer::LayernormChannels { channels } => {
                push(ParamRole::Gamma, vec![*channels], 0);
                push(ParamRole::Beta, vec![*channels], 0);
            }
            Layer::Linear(l) => {
                let rows = l.stored_rows();
                push(ParamRole::Weight, vec![rows, l.in_features], l.in_features);
                if l.has_bias {
                    push(ParamRole::Bias, vec![rows], l.in_features);
                }
            }
            Layer::Input
            | Layer::Activation { .. }
            | Layer::Maxpool2d(_)
            | Layer::GlobalAvgPool
            | Layer::Add => {}
        }
    }
    out
}

fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    ChaCha8Rng::from_seed(digest.into())
}

/// Draws from N(0, 2 / fan_in).
pub fn he_init<T: Scalar>(dims: &[usize], fan_in: usize, seed: u64) -> Tensor<T> {
    he_fill(dims, fan_in, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn he_fill<T: Scalar>(dims: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(dims, |_| T::from_f64(normal.sample(rng)))
}

/// Deterministic initialization. Each tensor is drawn from a stream keyed by
/// the seed and its own name, so a subgraph initialized with the same seed
/// receives the same values as the graph it came from.
pub fn init_parameters<T: Scalar>(g: &ComputeGraph, seed: u64) -> ParameterStore<T> {
    let mut store = ParameterStore::new();
    for spec in parameter_manifest(g) {
        let mut rng = rng_for(seed, &spec.name);
        let is_linear = matches!(g.node(&spec.node).map(|n| &n.layer), Ok(Layer::Linear(_)));
        let t = match spec.role {
            ParamRole::Weight if is_linear => {
                let bound = 1.0 / (spec.fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(&spec.dims, |_| T::from_f64(rng.random_range(-bound..=bound)))
            }
            ParamRole::Bias if is_linear => {
                let bound = 1.0 / (spec.fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(&spec.dims, |_| T::from_f64(rng.random_range(-bound..=bound)))
            }
            ParamRole::Weight => he_fill(&spec.dims, spec.fan_in, &mut rng),
            ParamRole::Bias | ParamRole::Beta | ParamRole::RunningMean => Tensor::zeros(&spec.dims),
            ParamRole::Gamma | ParamRole::RunningVar => Tensor::full(&spec.dims, T::one()),
        };
        store.insert(spec.name, t);
    }
    store
}

type NamedTensors<T> = BTreeMap<String, Tensor<T>>;

/// Named parameters and buffers together with optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<T = f32> {
    tensors: NamedTensors<T>,
    state: NamedTensors<T>,
    pub step: u64,
}

impl<T: Scalar> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            tensors: BTreeMap::new(),
            state: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, RuntimeError> {
        self.tensors
            .get(name)
            .ok_or_else(|| RuntimeError::ParameterMismatch(format!("missing {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, RuntimeError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| RuntimeError::ParameterMismatch(format!("missing {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors
            .iter()
            .filter(|(k, _)| ParamRole::of_name(k).is_some_and(ParamRole::trainable))
    }

    /// Optimizer state (momentum buffers, moment estimates).
    pub fn state(&self) -> &NamedTensors<T> {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut NamedTensors<T> {
        &mut self.state
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut NamedTensors<T>, &mut NamedTensors<T>) {
        (&mut self.tensors, &mut self.state)
    }

    /// Total number of scalar values in trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    /// Checks that every tensor `g` needs is present with the right dims.
    pub fn check_graph(&self, g: &ComputeGraph) -> Result<(), RuntimeError> {
        for spec in parameter_manifest(g) {
            let t = self.get(&spec.name)?;
            if t.dims() != spec.dims.as_slice() {
                return Err(RuntimeError::ParameterMismatch(format!(
                    "{} has dims {:?}, graph expects {:?}",
                    spec.name,
                    t.dims(),
                    spec.dims
                )));
            }
        }
        Ok(())
    }

    /// The tensors `g` needs, copied out of this store. Optimizer state is dropped.
    pub fn subset_for(&self, g: &ComputeGraph) -> Result<ParameterStore<T>, RuntimeError> {
        self.check_graph(g)?;
        let mut out = ParameterStore::new();
        for spec in parameter_manifest(g) {
            out.insert(spec.name.clone(), self.get(&spec.name)?.clone());
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            state: self.state.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            step: self.step,
        }
    }

    /// Replaces running statistics with values produced by a training forward pass.
    pub fn apply_updates(&mut self, updates: Vec<(String, Tensor<T>)>) -> Result<(), RuntimeError> {
        for (name, t) in updates {
            let slot = self.get_mut(&name)?;
            if slot.dims() != t.dims() {
                return Err(RuntimeError::ParameterMismatch(name));
            }
            *slot = t;
        }
        Ok(())
    }
}

/// Gradients keyed like the parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientStore<T = f32> {
    grads: NamedTensors<T>,
}

impl<T: Scalar> Default for GradientStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradientStore<T> {
    pub fn new() -> Self {
        GradientStore {
            grads: BTreeMap::new(),
        }
    }

    /// Adds `g` into the entry for `name`, creating it if needed.
    pub fn accumulate(&mut self, name: String, g: Tensor<T>) -> Result<(), RuntimeError> {
        match self.grads.get_mut(&name) {
            Some(existing) => existing.add_assign(&g),
            None => {
                self.grads.insert(name, g);
                Ok(())
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Tensor<T>) {
        self.grads.insert(name.into(), g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_baseline, ResNetConfig, Shape};

    fn mini() -> ComputeGraph {
        build_baseline(&ResNetConfig::mini(), 10, Shape { c: 1, h: 28, w: 28 }).unwrap()
    }

    #[test]
    fn he_init_is_deterministic() {
        let a: Tensor<f32> = he_init(&[8, 4, 3, 3], 36, 7);
        let b: Tensor<f32> = he_init(&[8, 4, 3, 3], 36, 7);
        let c: Tensor<f32> = he_init(&[8, 4, 3, 3], 36, 8);
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn he_init_variance() {
        let t: Tensor<f64> = he_init(&[200_000], 50, 3);
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.003);
        assert!((var - 0.04).abs() < 0.001, "{var}");
    }

    #[test]
    fn manifest_names_and_count() {
        let g = mini();
        let manifest = parameter_manifest(&g);
        let mut names: Vec<_> = manifest.iter().map(|s| s.name.clone()).collect();
        let before = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), before);
        assert!(names.iter().all(|n| ParamRole::of_name(n).is_some()));

        let store: ParameterStore<f32> = init_parameters(&g, 1);
        let params = crate::cost::count_params(&g).unwrap().total_params;
        assert_eq!(store.trainable_count() as u64, params);
        store.check_graph(&g).unwrap();
    }

    #[test]
    fn init_depends_only_on_seed_and_name() {
        let g = mini();
        let a: ParameterStore<f32> = init_parameters(&g, 11);
        let b: ParameterStore<f32> = init_parameters(&g, 11);
        assert_eq!(a, b);
        let w = a.get("fc.weight").unwrap();
        let bound = 1.0 / (256f32).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(a.get("stem.bn.running_var").unwrap().data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn subset_and_mismatch() {
        let g = mini();
        let store: ParameterStore<f32> = init_parameters(&g, 2);
        let sub = store.subset_for(&g).unwrap();
        assert_eq!(sub.len(), store.len());
        let other = build_baseline(&ResNetConfig::mini(), 7, Shape { c: 1, h: 28, w: 28 }).unwrap();
        assert!(matches!(
            store.check_graph(&other),
            Err(RuntimeError::ParameterMismatch(_))
        ));
    }
}
