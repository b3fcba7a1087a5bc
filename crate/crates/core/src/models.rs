//! Parameter stores and the three networks: concept generator, concept
//! discriminator and the meta-learner's learner.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::{rng_from, standard_normal};
use crate::tensor::Tensor;

/// Named tensors with deterministic (sorted) iteration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
    seed: u64,
}

/// Graph nodes standing for a store's tensors, keyed by the same names.
pub type ParamNodes = BTreeMap<String, NodeId>;

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Option<Tensor> {
        self.entries.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
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

    /// Total number of scalars.
    pub fn size(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// A store shaped like `self` holding `values` in flatten order.
    pub fn unflatten(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.size() {
            return Err(Error::InvalidShape {
                op: "unflatten",
                detail: format!("store holds {} values, got {}", self.size(), values.len()),
            });
        }
        let mut offset = 0;
        let mut out = Self::new(self.seed);
        for (name, t) in &self.entries {
            let chunk = values[offset..offset + t.len()].to_vec();
            offset += t.len();
            out.insert(name.clone(), Tensor::new(t.shape().to_vec(), chunk)?);
        }
        Ok(out)
    }

    /// Same names and shapes, every value `value`.
    pub fn full_like(&self, value: f64) -> Self {
        let mut out = Self::new(self.seed);
        for (name, t) in &self.entries {
            out.insert(name.clone(), Tensor::full(t.shape(), value));
        }
        out
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn congruent(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }

    /// Copies every entry of `other` in under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &Self) {
        for (name, t) in &other.entries {
            self.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    /// Entries whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> Self {
        let mut out = Self::new(self.seed);
        for (name, t) in &self.entries {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    /// Declares one parameter leaf per tensor; leaf names get `prefix`.
    pub fn bind(&self, graph: &mut Graph, prefix: &str) -> ParamNodes {
        self.entries
            .iter()
            .map(|(name, t)| {
                let id = graph.parameter_with(&format!("{prefix}{name}"), t.clone());
                (name.clone(), id)
            })
            .collect()
    }

    /// Embeds the tensors as constants (no gradient wanted).
    pub fn constants(&self, graph: &mut Graph) -> ParamNodes {
        self.entries
            .iter()
            .map(|(name, t)| (name.clone(), graph.constant(t.clone())))
            .collect()
    }
}

/// Shape of one parameter; `fan_in` is `None` for biases (initialized to 0).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: Option<usize>,
}

impl ParamSpec {
    fn weight(name: String, shape: Vec<usize>, fan_in: usize) -> Self {
        Self {
            name,
            shape,
            fan_in: Some(fan_in),
        }
    }

    fn bias(name: String, len: usize) -> Self {
        Self {
            name,
            shape: vec![len],
            fan_in: None,
        }
    }
}

/// Anything with a fixed parameter layout.
pub trait Architecture {
    fn layout(&self) -> Vec<ParamSpec>;
}

/// He-style initialization: weights `N(0, 2/fan_in)`, biases zero.
pub fn init_params(arch: &impl Architecture, seed: u64) -> ParamStore {
    let mut rng = rng_from(seed);
    let mut store = ParamStore::new(seed);
    for spec in arch.layout() {
        let n = spec.shape.iter().product();
        let data = match spec.fan_in {
            Some(fan_in) => {
                let std = libm::sqrt(2.0 / fan_in as f64);
                (0..n).map(|_| std * standard_normal(&mut rng)).collect()
            }
            None => vec![0.0; n],
        };
        store.insert(
            spec.name,
            Tensor::new(spec.shape, data).expect("layout shapes are valid"),
        );
    }
    store
}

/// Checks that `store` matches `arch` name for name and shape for shape.
pub fn check_layout(arch: &impl Architecture, store: &ParamStore) -> Result<()> {
    let layout = arch.layout();
    for spec in &layout {
        match store.get(&spec.name) {
            None => return Err(Error::MissingParameter(spec.name.clone())),
            Some(t) if t.shape() != spec.shape.as_slice() => {
                return Err(Error::ShapeMismatch {
                    op: "check_layout",
                    lhs: spec.shape.clone(),
                    rhs: t.shape().to_vec(),
                })
            }
            Some(_) => {}
        }
    }
    if store.len() != layout.len() {
        let extra = store
            .names()
            .find(|n| layout.iter().all(|s| s.name != *n))
            .unwrap_or_default();
        return Err(Error::Config(format!("unexpected parameter `{extra}`")));
    }
    Ok(())
}

fn dense_layout(widths: &[usize]) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for (i, pair) in widths.windows(2).enumerate() {
        specs.push(ParamSpec::weight(
            format!("l{i}.w"),
            vec![pair[0], pair[1]],
            pair[0],
        ));
        specs.push(ParamSpec::bias(format!("l{i}.b"), pair[1]));
    }
    specs
}

fn param(nodes: &ParamNodes, name: &str) -> Result<NodeId> {
    nodes
        .get(name)
        .copied()
        .ok_or_else(|| Error::MissingParameter(name.to_string()))
}

/// `x W + b` for `x: [batch, in]`.
pub fn affine(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let xw = g.matmul(x, w)?;
    let shape = g.shape(xw).to_vec();
    let bias = g.broadcast(b, &shape)?;
    g.add(xw, bias)
}

/// Stacked affine layers named `l0..`, relu between layers and optionally
/// after the last one.
fn dense_forward(
    g: &mut Graph,
    nodes: &ParamNodes,
    x: NodeId,
    layers: usize,
    final_relu: bool,
) -> Result<NodeId> {
    let mut h = x;
    for i in 0..layers {
        let w = param(nodes, &format!("l{i}.w"))?;
        let b = param(nodes, &format!("l{i}.b"))?;
        h = affine(g, h, w, b)?;
        if i + 1 < layers || final_relu {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

fn expect_rows(g: &Graph, x: NodeId, width: usize, op: &'static str) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 2 || s[1] != width {
        return Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![s.first().copied().unwrap_or(0), width],
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum GeneratorKind {
    /// Affine + relu stack through `hidden` widths to `feature_dim`.
    Mlp { hidden: Vec<usize> },
    /// Inputs viewed as `[1, height, width]` images; `channels.len()`
    /// convolutions (each followed by relu), then flatten and one affine map.
    SmallConv {
        height: usize,
        width: usize,
        channels: Vec<usize>,
        kernel: usize,
    },
    /// No generator: features are the raw instances. Used by vanilla
    /// meta-learning baselines.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub kind: GeneratorKind,
    /// Apply relu to the final concept features.
    pub output_relu: bool,
}

impl GeneratorConfig {
    pub fn mlp(input_dim: usize, hidden: Vec<usize>, feature_dim: usize) -> Self {
        Self {
            input_dim,
            feature_dim,
            kind: GeneratorKind::Mlp { hidden },
            output_relu: true,
        }
    }

    pub fn identity(input_dim: usize) -> Self {
        Self {
            input_dim,
            feature_dim: input_dim,
            kind: GeneratorKind::Identity,
            output_relu: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.input_dim == 0 {
            return Err(Error::Config(
                "generator dimensions must be positive".into(),
            ));
        }
        match &self.kind {
            GeneratorKind::Mlp { hidden } if hidden.contains(&0) => Err(Error::Config(
                "generator hidden widths must be positive".into(),
            )),
            GeneratorKind::SmallConv {
                height,
                width,
                channels,
                kernel,
            } => {
                let shrink = channels.len() * (kernel.saturating_sub(1));
                if channels.is_empty() || channels.contains(&0) || *kernel == 0 {
                    Err(Error::Config(
                        "small-conv needs at least one positive channel count".into(),
                    ))
                } else if height * width != self.input_dim {
                    Err(Error::Config(format!(
                        "small-conv image {height}x{width} does not hold {} inputs",
                        self.input_dim
                    )))
                } else if shrink >= *height || shrink >= *width {
                    Err(Error::Config(
                        "small-conv kernels larger than the image".into(),
                    ))
                } else {
                    Ok(())
                }
            }
            GeneratorKind::Identity if self.feature_dim != self.input_dim => Err(Error::Config(
                "identity generator must keep input_dim".into(),
            )),
            _ => Ok(()),
        }
    }
}

impl Architecture for GeneratorConfig {
    fn layout(&self) -> Vec<ParamSpec> {
        match &self.kind {
            GeneratorKind::Mlp { hidden } => {
                let mut widths = vec![self.input_dim];
                widths.extend(hidden);
                widths.push(self.feature_dim);
                dense_layout(&widths)
            }
            GeneratorKind::SmallConv {
                height,
                width,
                channels,
                kernel,
            } => {
                let mut specs = Vec::new();
                let mut in_ch = 1;
                for (i, &oc) in channels.iter().enumerate() {
                    specs.push(ParamSpec::weight(
                        format!("c{i}.w"),
                        vec![oc, in_ch, *kernel, *kernel],
                        in_ch * kernel * kernel,
                    ));
                    specs.push(ParamSpec::bias(format!("c{i}.b"), oc));
                    in_ch = oc;
                }
                let shrink = channels.len() * (kernel - 1);
                let flat = in_ch * (height - shrink) * (width - shrink);
                specs.extend(dense_layout(&[flat, self.feature_dim]));
                specs
            }
            GeneratorKind::Identity => Vec::new(),
        }
    }
}

/// Maps a `[batch, input_dim]` instance batch to `[batch, feature_dim]`
/// concept features.
pub fn generator_forward(
    g: &mut Graph,
    cfg: &GeneratorConfig,
    nodes: &ParamNodes,
    batch: NodeId,
) -> Result<NodeId> {
    expect_rows(g, batch, cfg.input_dim, "generator_forward")?;
    match &cfg.kind {
        GeneratorKind::Mlp { hidden } => {
            dense_forward(g, nodes, batch, hidden.len() + 1, cfg.output_relu)
        }
        GeneratorKind::SmallConv {
            height,
            width,
            channels,
            ..
        } => {
            let b = g.shape(batch)[0];
            let mut h = g.reshape(batch, &[b, 1, *height, *width])?;
            for i in 0..channels.len() {
                let k = param(nodes, &format!("c{i}.w"))?;
                let bias = param(nodes, &format!("c{i}.b"))?;
                h = g.conv2d(h, k)?;
                let shape = g.shape(h).to_vec();
                let bias = g.reshape(bias, &[shape[1], 1, 1])?;
                let bias = g.broadcast(bias, &shape)?;
                h = g.add(h, bias)?;
                h = g.relu(h)?;
            }
            let flat: usize = g.shape(h)[1..].iter().product();
            let h = g.reshape(h, &[b, flat])?;
            dense_forward(g, nodes, h, 1, cfg.output_relu)
        }
        GeneratorKind::Identity => Ok(batch),
    }
}

/// One affine layer from concept features to concept-class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    pub feature_dim: usize,
    pub classes: usize,
}

impl Architecture for DiscriminatorConfig {
    fn layout(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec::weight(
                "w".into(),
                vec![self.feature_dim, self.classes],
                self.feature_dim,
            ),
            ParamSpec::bias("b".into(), self.classes),
        ]
    }
}

pub fn discriminator_forward(
    g: &mut Graph,
    cfg: &DiscriminatorConfig,
    nodes: &ParamNodes,
    features: NodeId,
) -> Result<NodeId> {
    expect_rows(g, features, cfg.feature_dim, "discriminator_forward")?;
    let w = param(nodes, "w")?;
    let b = param(nodes, "b")?;
    affine(g, features, w, b)
}

/// The per-task learner: logits for MAML/Meta-SGD, the embedding `g` for
/// Matching Nets.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    /// Relu on the output layer. Off for logits; a free choice for the
    /// Matching Nets embedding.
    pub output_relu: bool,
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("learner widths must be positive".into()));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden);
        widths.push(self.output_dim);
        widths
    }
}

impl Architecture for LearnerConfig {
    fn layout(&self) -> Vec<ParamSpec> {
        dense_layout(&self.widths())
    }
}

pub fn learner_forward(
    g: &mut Graph,
    cfg: &LearnerConfig,
    nodes: &ParamNodes,
    features: NodeId,
) -> Result<NodeId> {
    expect_rows(g, features, cfg.input_dim, "learner_forward")?;
    dense_forward(g, nodes, features, cfg.hidden.len() + 1, cfg.output_relu)
}
