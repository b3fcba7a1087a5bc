//! Joint training of generator, discriminator and meta-learner.
//!
//! The objective is `mean(task meta losses) + lambda * mean(disc CE)`, and
//! every trainable tensor takes one Adam step per iteration. Modes select
//! which parts exist and which are trained, covering the baselines.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Graph, NodeId};
use crate::episodes::{
    sample_instance_batch, Episode, EpisodeShape, LabeledDataset, MetaSplit, TaskDistribution,
};
use crate::error::{Error, Result};
use crate::metalearners::{meta_loss, BoundLearner, Concepts, MetaLearnerConfig, MetaLearnerState};
use crate::models::{
    check_layout, discriminator_forward, init_params, DiscriminatorConfig, GeneratorConfig,
    ParamNodes, ParamStore,
};
use crate::rng::{derive_seed, rng_from, stream};
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_INSTANCE_BATCH: usize = 64;
pub const DEFAULT_ITERATIONS: usize = 2000;
pub const DEFAULT_PRETRAIN_ITERATIONS: usize = 2000;
pub const DEFAULT_TRAIN_QUERY: usize = 5;
pub const DEFAULT_VAL_QUERY: usize = 15;

pub const GENERATOR_PREFIX: &str = "generator/";
pub const DISCRIMINATOR_PREFIX: &str = "discriminator/";
pub const LEARNER_PREFIX: &str = "learner/";
pub const ALPHA_PREFIX: &str = "alpha/";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Generator, discriminator and meta-learner trained jointly.
    Deml,
    /// Meta-learner on raw instances.
    Vanilla,
    /// Generator + meta-learner trained by the meta loss only.
    DeepVanilla,
    /// Pretrained generator held fixed.
    DecafFrozen,
    /// Pretrained generator fine-tuned by the meta loss.
    DecafFinetune,
    /// Discriminator over generator on the concept data only.
    PretrainOnly,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Deml,
        Mode::Vanilla,
        Mode::DeepVanilla,
        Mode::DecafFrozen,
        Mode::DecafFinetune,
        Mode::PretrainOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Deml => "deml",
            Mode::Vanilla => "vanilla",
            Mode::DeepVanilla => "deep-vanilla",
            Mode::DecafFrozen => "decaf-frozen",
            Mode::DecafFinetune => "decaf-finetune",
            Mode::PretrainOnly => "pretrain-only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn uses_discriminator(self) -> bool {
        matches!(self, Mode::Deml | Mode::PretrainOnly)
    }

    pub fn uses_meta(self) -> bool {
        self != Mode::PretrainOnly
    }

    pub fn trains_generator(self) -> bool {
        matches!(
            self,
            Mode::Deml | Mode::DeepVanilla | Mode::DecafFinetune | Mode::PretrainOnly
        )
    }

    pub fn needs_pretrained(self) -> bool {
        matches!(self, Mode::DecafFrozen | Mode::DecafFinetune)
    }

    pub fn default_lambda(self) -> f64 {
        if self == Mode::Deml {
            DEFAULT_LAMBDA
        } else {
            0.0
        }
    }
}

impl core::fmt::Display for Mode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lambda: f64,
    pub learning_rate: f64,
    /// Tasks per iteration.
    pub task_batch: usize,
    /// Concept instances per iteration.
    pub instance_batch: usize,
    pub iterations: usize,
    /// Meta-training episode shape.
    pub episode: EpisodeShape,
    pub val_query: usize,
    /// Validate every this many iterations (and at the end); 0 disables.
    pub val_interval: usize,
    pub val_tasks: usize,
    pub generator: GeneratorConfig,
    pub meta: MetaLearnerConfig,
    pub seed: u64,
}

/// 4 tasks per batch for 1-shot, 2 from 5-shot on.
pub fn default_task_batch(k_shot: usize) -> usize {
    if k_shot < 5 {
        4
    } else {
        2
    }
}

impl TrainConfig {
    pub fn new(
        mode: Mode,
        generator: GeneratorConfig,
        meta: MetaLearnerConfig,
        episode: EpisodeShape,
    ) -> Self {
        Self {
            mode,
            lambda: mode.default_lambda(),
            learning_rate: DEFAULT_LEARNING_RATE,
            task_batch: default_task_batch(episode.k_shot),
            instance_batch: DEFAULT_INSTANCE_BATCH,
            iterations: if mode == Mode::PretrainOnly {
                DEFAULT_PRETRAIN_ITERATIONS
            } else {
                DEFAULT_ITERATIONS
            },
            episode,
            val_query: DEFAULT_VAL_QUERY,
            val_interval: 0,
            val_tasks: 100,
            generator,
            meta,
            seed: 0,
        }
    }

    /// The generator actually used: vanilla mode has none.
    pub fn generator_config(&self) -> GeneratorConfig {
        if self.mode == Mode::Vanilla {
            GeneratorConfig::identity(self.generator.input_dim)
        } else {
            self.generator.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_batch == 0 || self.instance_batch == 0 || self.iterations == 0 {
            return Err(Error::Config(
                "task_batch, instance_batch and iterations must be at least 1".into(),
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be finite and >= 0".into()));
        }
        if !self.mode.uses_discriminator() && self.lambda > 0.0 {
            return Err(Error::Config(format!(
                "lambda = {} has no effect in mode {}: it has no discriminator",
                self.lambda, self.mode
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        let generator = self.generator_config();
        generator.validate()?;
        if self.mode.uses_meta() {
            self.meta.validate(self.episode.n_way)?;
            if self.meta.learner.input_dim != generator.feature_dim {
                return Err(Error::Config(format!(
                    "learner input {} must equal generator features {}",
                    self.meta.learner.input_dim, generator.feature_dim
                )));
            }
            if self.episode.k_shot == 0 || self.episode.q_query == 0 || self.episode.n_way == 0 {
                return Err(Error::Config(
                    "n_way, k_shot and q_query must be at least 1".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Every parameter of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub generator_config: GeneratorConfig,
    pub generator: ParamStore,
    pub discriminator: Option<(DiscriminatorConfig, ParamStore)>,
    pub learner: MetaLearnerState,
}

impl Model {
    /// Fresh parameters from the config seed; decaf modes take the
    /// generator from `pretrained` (names matched, shapes checked).
    pub fn init(
        config: &TrainConfig,
        disc_classes: Option<usize>,
        pretrained: Option<&ParamStore>,
    ) -> Result<Self> {
        let generator_config = config.generator_config();
        let generator = match (config.mode.needs_pretrained(), pretrained) {
            (true, Some(store)) => {
                check_layout(&generator_config, store)?;
                store.clone()
            }
            (true, None) => {
                return Err(Error::Config(format!(
                    "mode {} needs a pretrained generator",
                    config.mode
                )))
            }
            (false, _) => init_params(
                &generator_config,
                derive_seed(config.seed, stream::GENERATOR_INIT),
            ),
        };
        let discriminator = match (config.mode.uses_discriminator(), disc_classes) {
            (true, Some(classes)) => {
                let cfg = DiscriminatorConfig {
                    feature_dim: generator_config.feature_dim,
                    classes,
                };
                let store = init_params(&cfg, derive_seed(config.seed, stream::DISCRIMINATOR_INIT));
                Some((cfg, store))
            }
            (true, None) => {
                return Err(Error::Config(format!(
                    "mode {} needs a concept dataset",
                    config.mode
                )))
            }
            (false, _) => None,
        };
        let learner = MetaLearnerState::init(
            config.meta.clone(),
            derive_seed(config.seed, stream::LEARNER_INIT),
        );
        Ok(Self {
            generator_config,
            generator,
            discriminator,
            learner,
        })
    }

    /// All tensors under `generator/`, `discriminator/`, `learner/`, `alpha/`.
    pub fn to_store(&self) -> ParamStore {
        let mut out = ParamStore::new(self.generator.seed());
        out.merge_prefixed(GENERATOR_PREFIX, &self.generator);
        if let Some((_, d)) = &self.discriminator {
            out.merge_prefixed(DISCRIMINATOR_PREFIX, d);
        }
        out.merge_prefixed(LEARNER_PREFIX, &self.learner.phi);
        if let Some(a) = &self.learner.alpha {
            out.merge_prefixed(ALPHA_PREFIX, a);
        }
        out
    }

    /// Replaces every component with the matching entries of `store`.
    /// Each component present in `self` must be present, entry for entry.
    pub fn load_store(&mut self, store: &ParamStore) -> Result<()> {
        fn take(current: &mut ParamStore, store: &ParamStore, prefix: &str) -> Result<()> {
            let part = store.strip_prefix(prefix);
            if !part.congruent(current) {
                return Err(Error::Config(format!(
                    "checkpoint entries under `{prefix}` do not match the configured model"
                )));
            }
            *current = part;
            Ok(())
        }
        take(&mut self.generator, store, GENERATOR_PREFIX)?;
        if let Some((_, d)) = &mut self.discriminator {
            take(d, store, DISCRIMINATOR_PREFIX)?;
        }
        take(&mut self.learner.phi, store, LEARNER_PREFIX)?;
        if let Some(a) = &mut self.learner.alpha {
            take(a, store, ALPHA_PREFIX)?;
        }
        Ok(())
    }

    /// Tensors a mode updates, with prefixed names.
    fn trainable(&self, mode: Mode) -> ParamStore {
        let mut out = ParamStore::new(self.generator.seed());
        if mode.trains_generator() {
            out.merge_prefixed(GENERATOR_PREFIX, &self.generator);
        }
        if mode.uses_discriminator() {
            if let Some((_, d)) = &self.discriminator {
                out.merge_prefixed(DISCRIMINATOR_PREFIX, d);
            }
        }
        if mode.uses_meta() {
            out.merge_prefixed(LEARNER_PREFIX, &self.learner.phi);
            if let Some(a) = &self.learner.alpha {
                out.merge_prefixed(ALPHA_PREFIX, a);
            }
        }
        out
    }

    fn absorb(&mut self, store: &ParamStore) {
        fn put(current: &mut ParamStore, store: &ParamStore, prefix: &str) {
            for (name, t) in current.iter_mut() {
                if let Some(v) = store.get(&format!("{prefix}{name}")) {
                    *t = v.clone();
                }
            }
        }
        put(&mut self.generator, store, GENERATOR_PREFIX);
        if let Some((_, d)) = &mut self.discriminator {
            put(d, store, DISCRIMINATOR_PREFIX);
        }
        put(&mut self.learner.phi, store, LEARNER_PREFIX);
        if let Some(a) = &mut self.learner.alpha {
            put(a, store, ALPHA_PREFIX);
        }
    }
}

/// Concept instances with their discriminator targets.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceBatch {
    pub x: Tensor,
    pub targets: Vec<usize>,
}

impl InstanceBatch {
    pub fn sample(dataset: &LabeledDataset, m: usize, rng: &mut crate::rng::Rng) -> Result<Self> {
        let (x, labels) = sample_instance_batch(dataset, m, rng)?;
        let targets = labels
            .iter()
            .map(|&c| {
                dataset
                    .class_position(c)
                    .expect("sampled label belongs to the dataset")
            })
            .collect();
        Ok(Self { x, targets })
    }
}

/// Mean discriminator cross-entropy over a batch of concept instances.
pub fn discrimination_loss(
    g: &mut Graph,
    concepts: Concepts<'_>,
    disc: &DiscriminatorConfig,
    disc_nodes: &ParamNodes,
    batch: &InstanceBatch,
) -> Result<NodeId> {
    if batch.targets.is_empty() {
        return Err(Error::Empty("instance batch"));
    }
    let x = g.constant(batch.x.clone());
    let features = concepts.features(g, x)?;
    let logits = discriminator_forward(g, disc, disc_nodes, features)?;
    let y = g.constant(Tensor::one_hot(&batch.targets, disc.classes));
    let ce = g.cross_entropy_with_logits(logits, y)?;
    g.mean(ce, 0)
}

#[derive(Debug, Clone, Copy)]
pub struct CombinedLoss {
    pub total: NodeId,
    pub meta: NodeId,
    /// Present whenever a discriminator and instances were given, even if
    /// lambda is 0 (then it is reported but not part of `total`).
    pub disc: Option<NodeId>,
}

/// `mean_i meta_loss(task_i) + lambda * discrimination_loss(instances)`.
///
/// With `lambda == 0` the discrimination term is left out of `total`, so the
/// discriminator's gradient is exactly zero.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    g: &mut Graph,
    concepts: Concepts<'_>,
    discriminator: Option<(&DiscriminatorConfig, &ParamNodes)>,
    meta: &MetaLearnerConfig,
    learner: &BoundLearner,
    tasks: &[Episode],
    instances: Option<&InstanceBatch>,
    lambda: f64,
) -> Result<CombinedLoss> {
    if tasks.is_empty() {
        return Err(Error::Empty("task batch"));
    }
    let mut sum = None;
    for task in tasks {
        let t = meta_loss(g, concepts, meta, learner, task)?;
        sum = Some(match sum {
            None => t.loss,
            Some(s) => g.add(s, t.loss)?,
        });
    }
    let meta_mean = g.scale(sum.expect("nonempty"), 1.0 / tasks.len() as f64)?;
    let disc = match (discriminator, instances) {
        (Some((cfg, nodes)), Some(batch)) => {
            Some(discrimination_loss(g, concepts, cfg, nodes, batch)?)
        }
        (None, _) if lambda > 0.0 => {
            return Err(Error::Config("lambda > 0 needs a discriminator".into()))
        }
        (Some(_), None) if lambda > 0.0 => return Err(Error::Empty("instance batch")),
        _ => None,
    };
    let total = match disc {
        Some(d) if lambda > 0.0 => {
            let weighted = g.scale(d, lambda)?;
            g.add(meta_mean, weighted)?
        }
        _ => meta_mean,
    };
    Ok(CombinedLoss {
        total,
        meta: meta_mean,
        disc,
    })
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: ParamStore,
    pub second: ParamStore,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            first: params.full_like(0.0),
            second: params.full_like(0.0),
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
        }
    }
}

/// One bias-corrected Adam step with learning rate `lr`.
pub fn adam_update(
    adam: &mut AdamState,
    params: &mut ParamStore,
    grads: &ParamStore,
    lr: f64,
) -> Result<()> {
    if !params.congruent(grads) || !params.congruent(&adam.first) {
        return Err(Error::Config(
            "Adam: parameters, gradients and moments must be congruent".into(),
        ));
    }
    adam.step += 1;
    let t = adam.step as i32;
    let c1 = 1.0 - libm::pow(adam.beta1, t as f64);
    let c2 = 1.0 - libm::pow(adam.beta2, t as f64);
    for ((name, p), (_, gr)) in params.iter_mut().zip(grads.iter()) {
        let m = adam.first.get_mut(name).expect("congruent");
        for (mi, &gi) in m.data_mut().iter_mut().zip(gr.data()) {
            *mi = adam.beta1 * *mi + (1.0 - adam.beta1) * gi;
        }
        let v = adam.second.get_mut(name).expect("congruent");
        for (vi, &gi) in v.data_mut().iter_mut().zip(gr.data()) {
            *vi = adam.beta2 * *vi + (1.0 - adam.beta2) * gi * gi;
        }
        let m = adam.first.get(name).expect("congruent");
        let v = adam.second.get(name).expect("congruent");
        for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            *pi -= lr * m_hat / (libm::sqrt(v_hat) + adam.epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub meta: Option<f64>,
    pub disc: Option<f64>,
}

/// Owns the mutable model and optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    model: Model,
    adam: AdamState,
    iteration: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: Model) -> Result<Self> {
        config.validate()?;
        if config.mode.uses_discriminator() && model.discriminator.is_none() {
            return Err(Error::Config(format!(
                "mode {} needs a discriminator",
                config.mode
            )));
        }
        let adam = AdamState::new(&model.trainable(config.mode));
        Ok(Self {
            config,
            model,
            adam,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    /// Current value of the objective, without updating anything.
    pub fn loss(&self, tasks: &[Episode], instances: Option<&InstanceBatch>) -> Result<StepLosses> {
        let mut g = Graph::new();
        let (out, _) = self.build(&mut g, tasks, instances, false)?;
        self.values(&g, out, &[]).map(|(l, _)| l)
    }

    /// One Adam step on the objective for these tasks and instances.
    pub fn step(
        &mut self,
        tasks: &[Episode],
        instances: Option<&InstanceBatch>,
    ) -> Result<StepLosses> {
        self.iteration += 1;
        let mut g = Graph::new();
        let (out, trainable) = self.build(&mut g, tasks, instances, true)?;
        let ids: Vec<NodeId> = trainable.iter().map(|(_, id)| *id).collect();
        let grads = g.grad(out.0, &ids)?;
        let (losses, values) = self.values(&g, out, &grads)?;
        let mut grad_store = ParamStore::new(0);
        for ((name, _), v) in trainable.iter().zip(values) {
            grad_store.insert(name.clone(), v);
        }
        let mut params = self.model.trainable(self.config.mode);
        adam_update(
            &mut self.adam,
            &mut params,
            &grad_store,
            self.config.learning_rate,
        )?;
        self.model.absorb(&params);
        Ok(losses)
    }

    fn values(
        &self,
        g: &Graph,
        out: (NodeId, Option<NodeId>, Option<NodeId>),
        grads: &[NodeId],
    ) -> Result<(StepLosses, Vec<Tensor>)> {
        let (total, meta, disc) = out;
        let mut wanted = alloc::vec![total];
        wanted.extend(meta);
        wanted.extend(disc);
        let head = wanted.len();
        wanted.extend_from_slice(grads);
        let mut values = g.eval(&wanted)?;
        let rest = values.split_off(head);
        let total = values[0].data()[0];
        let meta = meta.map(|_| values[1].data()[0]);
        let disc = disc.map(|_| values[head - 1].data()[0]);
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                meta: meta.unwrap_or(f64::NAN),
                disc: disc.unwrap_or(f64::NAN),
            });
        }
        Ok((StepLosses { total, meta, disc }, rest))
    }

    #[allow(clippy::type_complexity)]
    fn build(
        &self,
        g: &mut Graph,
        tasks: &[Episode],
        instances: Option<&InstanceBatch>,
        trainable: bool,
    ) -> Result<(
        (NodeId, Option<NodeId>, Option<NodeId>),
        Vec<(String, NodeId)>,
    )> {
        let mode = self.config.mode;
        let model = &self.model;
        let mut leaves: Vec<(String, NodeId)> = Vec::new();
        let mut bind =
            |g: &mut Graph, store: &ParamStore, prefix: &str, train: bool| -> ParamNodes {
                if train && trainable {
                    let nodes = store.bind(g, prefix);
                    leaves.extend(nodes.iter().map(|(n, &id)| (format!("{prefix}{n}"), id)));
                    nodes
                } else {
                    store.constants(g)
                }
            };
        let gen_nodes = bind(
            g,
            &model.generator,
            GENERATOR_PREFIX,
            mode.trains_generator(),
        );
        let disc_nodes = match (&model.discriminator, mode.uses_discriminator()) {
            (Some((_, d)), true) => Some(bind(g, d, DISCRIMINATOR_PREFIX, true)),
            _ => None,
        };
        let concepts = Concepts {
            config: &model.generator_config,
            nodes: &gen_nodes,
        };
        if !mode.uses_meta() {
            let (cfg, _) = model.discriminator.as_ref().expect("checked in new");
            let batch = instances.ok_or(Error::Empty("instance batch"))?;
            let d =
                discrimination_loss(g, concepts, cfg, disc_nodes.as_ref().expect("bound"), batch)?;
            return Ok(((d, None, Some(d)), leaves));
        }
        let phi = bind(g, &model.learner.phi, LEARNER_PREFIX, true);
        let alpha = model
            .learner
            .alpha
            .as_ref()
            .map(|a| bind(g, a, ALPHA_PREFIX, true));
        let learner = BoundLearner { phi, alpha };
        let disc = match (&model.discriminator, &disc_nodes) {
            (Some((cfg, _)), Some(nodes)) => Some((cfg, nodes)),
            _ => None,
        };
        let loss = combined_loss(
            g,
            concepts,
            disc,
            &self.config.meta,
            &learner,
            tasks,
            instances,
            self.config.lambda,
        )?;
        Ok(((loss.total, Some(loss.meta), loss.disc), leaves))
    }
}

/// Data for one training run. Which parts are required depends on the mode.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainData<'a> {
    pub meta: Option<&'a LabeledDataset>,
    pub split: Option<&'a MetaSplit>,
    pub concepts: Option<&'a LabeledDataset>,
    pub pretrained: Option<&'a ParamStore>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub meta_loss: Option<f64>,
    pub disc_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

/// Runs `config.iterations` joint updates. Tasks come from the meta-train
/// split, instances from the concept dataset (with replacement).
pub fn run_training(config: &TrainConfig, data: &TrainData<'_>) -> Result<(Model, TrainLog)> {
    config.validate()?;
    let mode = config.mode;
    let concepts = if mode.uses_discriminator() {
        Some(
            data.concepts
                .ok_or_else(|| Error::Config(format!("mode {mode} needs a concept dataset")))?,
        )
    } else {
        None
    };
    let model = Model::init(
        config,
        concepts.map(LabeledDataset::num_classes),
        data.pretrained,
    )?;
    let mut trainer = Trainer::new(config.clone(), model)?;

    let (meta, split) = if mode.uses_meta() {
        let meta = data
            .meta
            .ok_or_else(|| Error::Config(format!("mode {mode} needs a meta dataset")))?;
        let split = data
            .split
            .ok_or_else(|| Error::Config(format!("mode {mode} needs a class split")))?;
        split.check_against(meta)?;
        (Some(meta), Some(split))
    } else {
        (None, None)
    };
    let mut tasks = match (meta, split) {
        (Some(m), Some(s)) => Some(TaskDistribution::new(
            m,
            &s.train,
            config.episode,
            derive_seed(config.seed, stream::TASKS),
        )?),
        _ => None,
    };
    let val_shape = EpisodeShape::new(
        config.episode.n_way,
        config.episode.k_shot,
        config.val_query,
    );
    let validating = config.val_interval > 0
        && config.val_tasks > 0
        && split.is_some_and(|s| s.val.len() >= config.episode.n_way);
    let mut instance_rng = rng_from(derive_seed(config.seed, stream::INSTANCES));

    let mut log = TrainLog::default();
    for iter in 1..=config.iterations {
        let batch: Vec<Episode> = match &mut tasks {
            Some(dist) => (0..config.task_batch)
                .map(|_| dist.sample_episode())
                .collect::<Result<_>>()?,
            None => Vec::new(),
        };
        let instances = match concepts {
            Some(ds) => Some(InstanceBatch::sample(
                ds,
                config.instance_batch,
                &mut instance_rng,
            )?),
            None => None,
        };
        let losses = trainer.step(&batch, instances.as_ref())?;
        let val_acc =
            if validating && (iter % config.val_interval == 0 || iter == config.iterations) {
                let report = crate::eval::meta_test(
                    trainer.model(),
                    meta.expect("validating"),
                    &split.expect("validating").val,
                    val_shape,
                    config.val_tasks,
                    derive_seed(config.seed, stream::VALIDATION),
                )?;
                Some(report.mean_accuracy)
            } else {
                None
            };
        log.rows.push(LogRow {
            iter,
            meta_loss: losses.meta,
            disc_loss: losses.disc,
            val_acc,
        });
    }
    Ok((trainer.into_model(), log))
}
