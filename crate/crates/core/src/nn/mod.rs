//! Dense layers, the named parameter store, initialization and parameter counting.

mod adam;
pub mod checkpoint;

pub use adam::{AdamConfig, AdamState};

use crate::autodiff::{AutodiffError, GradientMap, Graph, NodeId, Tensor};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{name}`: shape {got:?} does not match {expected:?}")]
    Shape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("non-finite gradient for `{0}`; optimizer step aborted")]
    NonFiniteGradient(String),
    #[error("input width {got} does not match layer input {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Sub-networks of the disentangled model.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "h")]
    H,
    #[serde(rename = "h_y")]
    HY,
    #[serde(rename = "h_a")]
    HA,
    #[serde(rename = "g_y")]
    GY,
    #[serde(rename = "g_a")]
    GA,
    #[serde(rename = "g")]
    G,
    #[serde(rename = "g_aug")]
    GAug,
}

impl Group {
    pub const ALL: [Group; 7] = [Group::H, Group::HY, Group::HA, Group::GY, Group::GA, Group::G, Group::GAug];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::H => "h",
            Group::HY => "h_y",
            Group::HA => "h_a",
            Group::GY => "g_y",
            Group::GA => "g_a",
            Group::G => "g",
            Group::GAug => "g_aug",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

/// One fully-connected layer: `act(x · W + b)` with `W: [input, output]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub group: Group,
    /// Position of the layer inside its group.
    pub index: usize,
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn weight_name(&self) -> String {
        format!("{}.{}.weight", self.group, self.index)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.{}.bias", self.group, self.index)
    }

    pub fn param_count(&self) -> usize {
        (self.input + 1) * self.output
    }
}

/// Ordered list of layers making up a network.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<DenseLayer>,
}

impl NetworkSpec {
    /// Appends a chain of layers to `group`; the widths are `dims[0] -> dims[1] -> ...`.
    pub fn push_chain(&mut self, group: Group, dims: &[usize], hidden: Activation, last: Activation) {
        let n = dims.len().saturating_sub(1);
        for i in 0..n {
            self.layers.push(DenseLayer {
                group,
                index: i,
                input: dims[i],
                output: dims[i + 1],
                activation: if i + 1 == n { last } else { hidden },
            });
        }
    }

    pub fn group(&self, group: Group) -> impl Iterator<Item = &DenseLayer> {
        self.layers.iter().filter(move |l| l.group == group)
    }

    /// Σ (in + 1) · out over all layers.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for l in &self.layers {
            if l.input == 0 || l.output == 0 {
                return Err(NnError::Architecture(format!("layer {}.{} has a zero dimension", l.group, l.index)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub group: Group,
    pub tensor: Tensor,
}

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: IndexMap<String, Param>,
}

/// Gradients keyed by parameter name.
pub type NamedGrads = IndexMap<String, Tensor>;

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, group: Group, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NnError::Architecture(format!("parameter `{name}` registered twice")));
        }
        self.params.insert(name, Param { group, tensor });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn group_of(&self, name: &str) -> Option<Group> {
        self.params.get(name).map(|p| p.group)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Copies every tensor of `from_group` in `src` onto the same-shaped slot of `to_group` here.
    pub fn copy_group(&mut self, src: &ParameterStore, from_group: Group, to_group: Group) -> Result<()> {
        let from = from_group.as_str();
        let to = to_group.as_str();
        for (name, p) in src.iter().filter(|(_, p)| p.group == from_group) {
            let target = format!("{to}{}", &name[from.len()..]);
            let slot = self.get_mut(&target).ok_or_else(|| NnError::UnknownParam(target.clone()))?;
            if slot.shape() != p.tensor.shape() {
                return Err(NnError::Shape { name: target, expected: slot.shape().to_vec(), got: p.tensor.shape().to_vec() });
            }
            *slot = p.tensor.clone();
        }
        Ok(())
    }

    /// Places every parameter on `graph`, as trainable leaves or as constants.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Result<Binding> {
        let mut ids = IndexMap::with_capacity(self.params.len());
        for (name, p) in &self.params {
            let id = if trainable { graph.param(p.tensor.clone())? } else { graph.constant(p.tensor.clone())? };
            ids.insert(name.clone(), id);
        }
        Ok(Binding { ids })
    }
}

/// Total number of scalar parameters in a store.
pub fn param_count(store: &ParameterStore) -> usize {
    store.params.values().map(|p| p.tensor.len()).sum()
}

/// Graph node of every parameter for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Binding {
    ids: IndexMap<String, NodeId>,
}

impl Binding {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, NodeId)>) -> Self {
        Self { ids: pairs.into_iter().collect() }
    }

    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.ids.get(name).copied().ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    /// Reads the gradients of every bound parameter out of a gradient map.
    pub fn collect_grads(&self, graph: &Graph, grads: &GradientMap) -> NamedGrads {
        self.ids
            .iter()
            .filter_map(|(name, id)| grads.value(graph, *id).map(|t| (name.clone(), t.clone())))
            .collect()
    }
}

/// Glorot-uniform weights `U[-s, s]` with `s = sqrt(6 / (in + out))`, zero biases.
pub fn init_parameters(spec: &NetworkSpec, seed: u64) -> Result<ParameterStore> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    for l in &spec.layers {
        let s = (6.0 / (l.input + l.output) as f64).sqrt();
        let w: Vec<f64> = (0..l.input * l.output).map(|_| rng.random_range(-s..=s)).collect();
        store.insert(l.weight_name(), l.group, Tensor::from_vec(&[l.input, l.output], w))?;
        store.insert(l.bias_name(), l.group, Tensor::zeros(&[l.output]))?;
    }
    Ok(store)
}

/// Applies one dense layer to `x` on the graph.
pub fn dense_forward(graph: &mut Graph, binding: &Binding, layer: &DenseLayer, x: NodeId) -> Result<NodeId> {
    let width = graph.value(x).dims2().map_or(0, |d| d.1);
    if width != layer.input {
        return Err(NnError::InputWidth { expected: layer.input, got: width });
    }
    let w = binding.node(&layer.weight_name())?;
    let b = binding.node(&layer.bias_name())?;
    let pre = graph.matmul(x, w)?;
    let pre = graph.add_row(pre, b)?;
    Ok(match layer.activation {
        Activation::Relu => graph.relu(pre)?,
        Activation::Sigmoid => graph.sigmoid(pre)?,
        Activation::Identity => pre,
    })
}

/// Runs a sequence of layers, recording each on the graph.
pub fn mlp_forward<'a>(
    graph: &mut Graph,
    binding: &Binding,
    layers: impl IntoIterator<Item = &'a DenseLayer>,
    x: NodeId,
) -> Result<NodeId> {
    let mut h = x;
    for l in layers {
        h = dense_forward(graph, binding, l, h)?;
    }
    Ok(h)
}
