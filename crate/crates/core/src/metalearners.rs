//! Matching Nets, MAML and Meta-SGD over generated concept features.
//!
//! Each meta-learner turns an [`Episode`] into a differentiable query loss.
//! MAML and Meta-SGD adapt the learner with gradient steps that stay in the
//! graph, so the outer gradient includes every second-order term, including
//! the mixed ones through the generator.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Graph, NodeId};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::models::{
    generator_forward, init_params, learner_forward, GeneratorConfig, LearnerConfig, ParamNodes,
    ParamStore,
};
use crate::tensor::Tensor;

/// Floor applied to Matching Nets probabilities before taking the log.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// Inner learning rate used by MAML and as Meta-SGD's initial per-parameter rate.
pub const DEFAULT_INNER_RATE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaLearnerKind {
    Matching,
    Maml,
    MetaSgd,
}

impl MetaLearnerKind {
    pub fn name(self) -> &'static str {
        match self {
            MetaLearnerKind::Matching => "matching",
            MetaLearnerKind::Maml => "maml",
            MetaLearnerKind::MetaSgd => "metasgd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "matching" => Some(Self::Matching),
            "maml" => Some(Self::Maml),
            "metasgd" => Some(Self::MetaSgd),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaLearnerConfig {
    pub kind: MetaLearnerKind,
    /// Embedding `g` for Matching Nets, the adapted classifier otherwise.
    pub learner: LearnerConfig,
    /// MAML's fixed rate; Meta-SGD's initial value for every entry of alpha.
    pub inner_rate: f64,
    pub inner_steps: usize,
}

impl MetaLearnerConfig {
    pub fn validate(&self, n_way: usize) -> Result<()> {
        self.learner.validate()?;
        if !(self.inner_rate >= 0.0 && self.inner_rate.is_finite()) {
            return Err(Error::Config("inner rate must be finite and >= 0".into()));
        }
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be at least 1".into()));
        }
        if self.kind != MetaLearnerKind::Matching && self.learner.output_dim != n_way {
            return Err(Error::Config(alloc::format!(
                "learner output {} must equal n_way {n_way}",
                self.learner.output_dim
            )));
        }
        Ok(())
    }
}

/// The meta-learner's parameters: `phi` (or Matching Nets' `g`) and, for
/// Meta-SGD, a rate tensor congruent with `phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaLearnerState {
    pub config: MetaLearnerConfig,
    pub phi: ParamStore,
    pub alpha: Option<ParamStore>,
}

impl MetaLearnerState {
    pub fn init(config: MetaLearnerConfig, seed: u64) -> Self {
        let phi = init_params(&config.learner, seed);
        let alpha =
            (config.kind == MetaLearnerKind::MetaSgd).then(|| phi.full_like(config.inner_rate));
        Self { config, phi, alpha }
    }

    pub fn validate(&self) -> Result<()> {
        crate::models::check_layout(&self.config.learner, &self.phi)?;
        match (self.config.kind, &self.alpha) {
            (MetaLearnerKind::MetaSgd, Some(alpha)) if alpha.congruent(&self.phi) => Ok(()),
            (MetaLearnerKind::MetaSgd, _) => Err(Error::Config(
                "Meta-SGD rates must match phi entry for entry".into(),
            )),
            (_, Some(_)) => Err(Error::Config(
                "only Meta-SGD carries per-parameter rates".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Binds `phi` (and alpha) as trainable parameter leaves.
    pub fn bind(&self, g: &mut Graph) -> BoundLearner {
        BoundLearner {
            phi: self.phi.bind(g, "learner/"),
            alpha: self.alpha.as_ref().map(|a| a.bind(g, "alpha/")),
        }
    }

    /// Embeds `phi` (and alpha) as constants, for evaluation.
    pub fn constants(&self, g: &mut Graph) -> BoundLearner {
        BoundLearner {
            phi: self.phi.constants(g),
            alpha: self.alpha.as_ref().map(|a| a.constants(g)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundLearner {
    pub phi: ParamNodes,
    pub alpha: Option<ParamNodes>,
}

/// The concept generator as seen from inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct Concepts<'a> {
    pub config: &'a GeneratorConfig,
    pub nodes: &'a ParamNodes,
}

impl Concepts<'_> {
    pub fn features(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        generator_forward(g, self.config, self.nodes, x)
    }
}

/// Attention read-out over support labels: each query's prediction is
/// `sum_i softmax_i(cos(g(q), g(s_i))) * y_i`.
pub fn attention_predict(
    g: &mut Graph,
    embedding: &LearnerConfig,
    g_nodes: &ParamNodes,
    support_features: NodeId,
    support_one_hot: NodeId,
    query_features: NodeId,
) -> Result<NodeId> {
    if g.shape(support_features)[0] == 0 {
        return Err(Error::Empty("support set"));
    }
    let s = learner_forward(g, embedding, g_nodes, support_features)?;
    let q = learner_forward(g, embedding, g_nodes, query_features)?;
    let cos = g.cosine_similarity(q, s)?;
    let attention = g.softmax(cos, 1)?;
    g.matmul(attention, support_one_hot)
}

/// Matching Nets class distribution for every query of `episode`.
pub fn matching_predict(
    g: &mut Graph,
    concepts: Concepts<'_>,
    state: &MetaLearnerConfig,
    learner: &BoundLearner,
    episode: &Episode,
) -> Result<NodeId> {
    if episode.support_y.is_empty() {
        return Err(Error::Empty("support set"));
    }
    let sx = g.constant(episode.support_x.clone());
    let qx = g.constant(episode.query_x.clone());
    let sf = concepts.features(g, sx)?;
    let qf = concepts.features(g, qx)?;
    let sy = g.constant(episode.support_one_hot());
    attention_predict(g, &state.learner, &learner.phi, sf, sy, qf)
}

/// Mean cross-entropy of the learner on labelled features.
fn learner_loss(
    g: &mut Graph,
    cfg: &LearnerConfig,
    nodes: &ParamNodes,
    features: NodeId,
    one_hot: NodeId,
) -> Result<NodeId> {
    let logits = learner_forward(g, cfg, nodes, features)?;
    let ce = g.cross_entropy_with_logits(logits, one_hot)?;
    g.mean(ce, 0)
}

/// Gradient steps on the support loss, kept in the graph.
///
/// MAML: `phi' = phi - rate * grad`; Meta-SGD: `phi' = phi - alpha ∘ grad`.
/// Each further step re-linearizes at the previous adapted point.
pub fn inner_adapt(
    g: &mut Graph,
    cfg: &MetaLearnerConfig,
    learner: &BoundLearner,
    support_features: NodeId,
    support_one_hot: NodeId,
) -> Result<ParamNodes> {
    if cfg.kind == MetaLearnerKind::Matching {
        return Err(Error::Unsupported("inner adaptation"));
    }
    if g.shape(support_features)[0] == 0 {
        return Err(Error::Empty("support set"));
    }
    let mut current = learner.phi.clone();
    if cfg.kind == MetaLearnerKind::Maml && cfg.inner_rate == 0.0 {
        return Ok(current);
    }
    for _ in 0..cfg.inner_steps {
        let loss = learner_loss(g, &cfg.learner, &current, support_features, support_one_hot)?;
        let names: Vec<&String> = current.keys().collect();
        let params: Vec<NodeId> = current.values().copied().collect();
        let grads = g.grad(loss, &params)?;
        let mut next = BTreeMap::new();
        for ((name, &p), &grad) in names.into_iter().zip(&params).zip(&grads) {
            let step = match (&cfg.kind, &learner.alpha) {
                (MetaLearnerKind::MetaSgd, Some(alpha)) => {
                    let a = *alpha
                        .get(name)
                        .ok_or_else(|| Error::MissingParameter(name.clone()))?;
                    g.mul(a, grad)?
                }
                (MetaLearnerKind::MetaSgd, None) => {
                    return Err(Error::MissingParameter("alpha".into()))
                }
                _ => g.scale(grad, cfg.inner_rate)?,
            };
            next.insert(name.clone(), g.sub(p, step)?);
        }
        current = next;
    }
    Ok(current)
}

/// Query loss node plus the node whose row-wise argmax is the prediction.
#[derive(Debug, Clone, Copy)]
pub struct TaskLoss {
    pub loss: NodeId,
    pub prediction: NodeId,
}

/// Generalization loss of the adapted learner on the query set.
pub fn meta_loss(
    g: &mut Graph,
    concepts: Concepts<'_>,
    cfg: &MetaLearnerConfig,
    learner: &BoundLearner,
    episode: &Episode,
) -> Result<TaskLoss> {
    let qy = g.constant(episode.query_one_hot());
    match cfg.kind {
        MetaLearnerKind::Matching => {
            let probs = matching_predict(g, concepts, cfg, learner, episode)?;
            let picked = g.mul(probs, qy)?;
            let picked = g.sum(picked, 1)?;
            let floored = g.clamp_min(picked, PROBABILITY_FLOOR)?;
            let log_p = g.log(floored)?;
            let mean = g.mean(log_p, 0)?;
            Ok(TaskLoss {
                loss: g.neg(mean)?,
                prediction: probs,
            })
        }
        MetaLearnerKind::Maml | MetaLearnerKind::MetaSgd => {
            if episode.support_y.is_empty() {
                return Err(Error::Empty("support set"));
            }
            let sx = g.constant(episode.support_x.clone());
            let qx = g.constant(episode.query_x.clone());
            let sf = concepts.features(g, sx)?;
            let qf = concepts.features(g, qx)?;
            let sy = g.constant(episode.support_one_hot());
            let adapted = inner_adapt(g, cfg, learner, sf, sy)?;
            let logits = learner_forward(g, &cfg.learner, &adapted, qf)?;
            let ce = g.cross_entropy_with_logits(logits, qy)?;
            Ok(TaskLoss {
                loss: g.mean(ce, 0)?,
                prediction: logits,
            })
        }
    }
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(prediction: &Tensor, labels: &[usize]) -> f64 {
    let hits = prediction
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests;
