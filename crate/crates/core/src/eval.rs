//! Meta-testing, confidence intervals, the nearest-centroid baseline and
//! the lambda sweep.
//!
//! Task `i` of an evaluation with seed `s` is drawn from its own stream
//! `derive_seed(s, i)`, so any evaluation order (or any split across
//! workers) reproduces the same per-task accuracies.

use alloc::vec::Vec;

use crate::autodiff::Graph;
use crate::episodes::{sample_episode_with, Episode, EpisodeShape, LabeledDataset};
use crate::error::{Error, Result};
use crate::metalearners::{accuracy, meta_loss, Concepts};
use crate::models::{discriminator_forward, generator_forward, GeneratorConfig, ParamStore};
use crate::rng::{derive_seed, rng_from, stream};
use crate::tensor::Tensor;
use crate::trainer::{run_training, Mode, Model, TrainConfig, TrainData};

pub const DEFAULT_TEST_TASKS: usize = 600;
pub const DEFAULT_TEST_QUERY: usize = 15;
pub const DEFAULT_LAMBDA_GRID: [f64; 6] = [0.01, 0.1, 0.5, 1.0, 2.0, 10.0];
const Z_95: f64 = 1.96;

/// Mean and 95% half-width `1.96 * s / sqrt(n)` (sample std, n - 1).
pub fn ci95(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("accuracy list"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, Z_95 * libm::sqrt(var) / libm::sqrt(n)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean_accuracy: f64,
    pub ci95_halfwidth: f64,
    pub num_tasks: usize,
    pub per_task_accuracies: Vec<f64>,
}

impl EvalReport {
    pub fn from_accuracies(per_task_accuracies: Vec<f64>) -> Result<Self> {
        let (mean_accuracy, ci95_halfwidth) = ci95(&per_task_accuracies)?;
        Ok(Self {
            mean_accuracy,
            ci95_halfwidth,
            num_tasks: per_task_accuracies.len(),
            per_task_accuracies,
        })
    }

    /// Whether the two 95% intervals are disjoint.
    pub fn separated_from(&self, other: &Self) -> bool {
        let (lo, hi) = (
            self.mean_accuracy - self.ci95_halfwidth,
            self.mean_accuracy + self.ci95_halfwidth,
        );
        let (olo, ohi) = (
            other.mean_accuracy - other.ci95_halfwidth,
            other.mean_accuracy + other.ci95_halfwidth,
        );
        hi < olo || ohi < lo
    }
}

/// The `index`-th evaluation episode under `seed`.
pub fn test_episode(
    dataset: &LabeledDataset,
    classes: &[u32],
    shape: EpisodeShape,
    seed: u64,
    index: usize,
) -> Result<Episode> {
    let mut rng = rng_from(derive_seed(seed, index as u64));
    sample_episode_with(dataset, classes, shape, &mut rng)
}

/// Query accuracy of the meta-learner after adapting to the support set.
pub fn episode_accuracy(model: &Model, episode: &Episode) -> Result<f64> {
    let mut g = Graph::new();
    let gen_nodes = model.generator.constants(&mut g);
    let learner = model.learner.constants(&mut g);
    let concepts = Concepts {
        config: &model.generator_config,
        nodes: &gen_nodes,
    };
    let task = meta_loss(&mut g, concepts, &model.learner.config, &learner, episode)?;
    let prediction = g.eval(&[task.prediction])?.remove(0);
    Ok(accuracy(&prediction, &episode.query_y))
}

pub fn task_accuracy(
    model: &Model,
    dataset: &LabeledDataset,
    classes: &[u32],
    shape: EpisodeShape,
    seed: u64,
    index: usize,
) -> Result<f64> {
    episode_accuracy(model, &test_episode(dataset, classes, shape, seed, index)?)
}

/// Mean query accuracy over `num_tasks` episodes from `classes`.
pub fn meta_test(
    model: &Model,
    dataset: &LabeledDataset,
    classes: &[u32],
    shape: EpisodeShape,
    num_tasks: usize,
    seed: u64,
) -> Result<EvalReport> {
    if num_tasks == 0 {
        return Err(Error::Empty("evaluation tasks"));
    }
    let accs = (0..num_tasks)
        .map(|i| task_accuracy(model, dataset, classes, shape, seed, i))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_accuracies(accs)
}

/// Generator features of a batch of raw instances.
pub fn features(config: &GeneratorConfig, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let nodes = store.constants(&mut g);
    let input = g.constant(x.clone());
    let out = generator_forward(&mut g, config, &nodes, input)?;
    Ok(g.eval(&[out])?.remove(0))
}

/// Labels each query with the way whose support-feature centroid is
/// nearest in Euclidean distance (lowest way on ties).
pub fn knn_centroid(
    config: &GeneratorConfig,
    store: &ParamStore,
    episode: &Episode,
) -> Result<Vec<usize>> {
    let n_way = episode.n_way();
    let support = features(config, store, &episode.support_x)?;
    let query = features(config, store, &episode.query_x)?;
    let dim = support.shape()[1];
    let mut centroids = alloc::vec![alloc::vec![0.0; dim]; n_way];
    let mut counts = alloc::vec![0usize; n_way];
    for (row, &way) in support.rows().zip(&episode.support_y) {
        counts[way] += 1;
        for (c, v) in centroids[way].iter_mut().zip(row) {
            *c += v;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        if n == 0 {
            return Err(Error::Empty("support set of a way"));
        }
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(query
        .rows()
        .map(|q| {
            let mut best = (0, f64::INFINITY);
            for (way, c) in centroids.iter().enumerate() {
                let d: f64 = q.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (way, d);
                }
            }
            best.0
        })
        .collect())
}

pub fn knn_task_accuracy(
    config: &GeneratorConfig,
    store: &ParamStore,
    dataset: &LabeledDataset,
    classes: &[u32],
    shape: EpisodeShape,
    seed: u64,
    index: usize,
) -> Result<f64> {
    let episode = test_episode(dataset, classes, shape, seed, index)?;
    let predicted = knn_centroid(config, store, &episode)?;
    let hits = predicted
        .iter()
        .zip(&episode.query_y)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / episode.query_y.len() as f64)
}

/// The nearest-centroid baseline over `num_tasks` episodes.
pub fn knn_test(
    config: &GeneratorConfig,
    store: &ParamStore,
    dataset: &LabeledDataset,
    classes: &[u32],
    shape: EpisodeShape,
    num_tasks: usize,
    seed: u64,
) -> Result<EvalReport> {
    if num_tasks == 0 {
        return Err(Error::Empty("evaluation tasks"));
    }
    let accs = (0..num_tasks)
        .map(|i| knn_task_accuracy(config, store, dataset, classes, shape, seed, i))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_accuracies(accs)
}

/// Accuracy of the discriminator over generator on `dataset`. `classes`
/// are the sorted concept classes it was trained on.
pub fn discrimination_accuracy(
    model: &Model,
    classes: &[u32],
    dataset: &LabeledDataset,
) -> Result<f64> {
    let (cfg, store) = model.discriminator.as_ref().ok_or(Error::Unsupported(
        "discrimination accuracy without a discriminator",
    ))?;
    if dataset.is_empty() {
        return Err(Error::Empty("concept dataset"));
    }
    let mut g = Graph::new();
    let gen_nodes = model.generator.constants(&mut g);
    let disc_nodes = store.constants(&mut g);
    let x = g.constant(dataset.examples().clone());
    let f = generator_forward(&mut g, &model.generator_config, &gen_nodes, x)?;
    let logits = discriminator_forward(&mut g, cfg, &disc_nodes, f)?;
    let predicted = g.eval(&[logits])?.remove(0).argmax_rows();
    let hits = predicted
        .iter()
        .zip(dataset.labels())
        .filter(|(&p, l)| classes.binary_search(l) == Ok(p))
        .count();
    Ok(hits as f64 / dataset.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub fewshot_acc: f64,
    pub fewshot_ci: f64,
    pub disc_acc: f64,
}

/// Where the swept models are evaluated.
#[derive(Debug, Clone, Copy)]
pub struct SweepEval<'a> {
    pub test_classes: &'a [u32],
    pub shape: EpisodeShape,
    pub num_tasks: usize,
    pub seed: u64,
    /// Held-out instances of the concept classes used for training.
    pub holdout: &'a LabeledDataset,
}

/// Trains one joint model per lambda and reports few-shot and
/// discrimination accuracy. Run `i` uses training seed
/// `derive_seed(derive_seed(base.seed, SWEEP), i)`; data and evaluation
/// tasks are shared across runs.
pub fn lambda_sweep(
    base: &TrainConfig,
    lambdas: &[f64],
    data: &TrainData<'_>,
    eval: &SweepEval<'_>,
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(Error::Empty("lambda grid"));
    }
    lambdas
        .iter()
        .enumerate()
        .map(|(i, &lambda)| sweep_run(base, i, lambda, data, eval))
        .collect()
}

/// Run `index` of [`lambda_sweep`].
pub fn sweep_run(
    base: &TrainConfig,
    index: usize,
    lambda: f64,
    data: &TrainData<'_>,
    eval: &SweepEval<'_>,
) -> Result<SweepRow> {
    if base.mode != Mode::Deml {
        return Err(Error::Config(
            "the lambda sweep trains joint models only".into(),
        ));
    }
    let meta = data
        .meta
        .ok_or_else(|| Error::Config("sweep needs a meta dataset".into()))?;
    let concept_classes = data
        .concepts
        .ok_or_else(|| Error::Config("sweep needs a concept dataset".into()))?
        .classes();
    let config = TrainConfig {
        lambda,
        seed: derive_seed(derive_seed(base.seed, stream::SWEEP), index as u64),
        ..base.clone()
    };
    let (model, _) = run_training(&config, data)?;
    let report = meta_test(
        &model,
        meta,
        eval.test_classes,
        eval.shape,
        eval.num_tasks,
        eval.seed,
    )?;
    Ok(SweepRow {
        lambda,
        fewshot_acc: report.mean_accuracy,
        fewshot_ci: report.ci95_halfwidth,
        disc_acc: discrimination_accuracy(&model, &concept_classes, eval.holdout)?,
    })
}
