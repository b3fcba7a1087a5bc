//! Labeled datasets, meta-splits, N-way K-shot episode sampling and the
//! synthetic concept benchmark.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from, standard_normal, stream, Rng};
use crate::tensor::Tensor;

/// Number of concept classes in the default external dataset.
pub const DEFAULT_CONCEPT_CLASSES: usize = 200;

/// Examples `[num, ...dims]` with one class id each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    examples: Tensor,
    labels: Vec<u32>,
    class_index: BTreeMap<u32, Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(examples: Tensor, labels: Vec<u32>) -> Result<Self> {
        if examples.rank() < 2 {
            return Err(Error::InvalidShape {
                op: "dataset",
                detail: format!(
                    "examples need a batch axis and features, got {:?}",
                    examples.shape()
                ),
            });
        }
        if examples.shape()[0] != labels.len() {
            return Err(Error::InvalidShape {
                op: "dataset",
                detail: format!(
                    "{} examples but {} labels",
                    examples.shape()[0],
                    labels.len()
                ),
            });
        }
        let mut class_index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &label) in labels.iter().enumerate() {
            class_index.entry(label).or_default().push(i);
        }
        Ok(Self {
            examples,
            labels,
            class_index,
        })
    }

    pub fn examples(&self) -> &Tensor {
        &self.examples
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example shape (everything after the batch axis).
    pub fn example_shape(&self) -> &[usize] {
        &self.examples.shape()[1..]
    }

    pub fn example_dim(&self) -> usize {
        self.example_shape().iter().product()
    }

    /// Sorted class ids.
    pub fn classes(&self) -> Vec<u32> {
        self.class_index.keys().copied().collect()
    }

    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    pub fn class_examples(&self, class: u32) -> Option<&[usize]> {
        self.class_index.get(&class).map(Vec::as_slice)
    }

    /// Position of `class` among the sorted class ids; the discriminator's
    /// output index.
    pub fn class_position(&self, class: u32) -> Option<usize> {
        self.class_index.keys().position(|&c| c == class)
    }

    /// Examples flattened to `[n, example_dim]` rows.
    pub fn rows(&self, indices: &[usize]) -> Tensor {
        let t = self.examples.select_rows(indices);
        let dim = self.example_dim();
        t.reshaped(vec![indices.len(), dim])
            .expect("same element count")
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let examples = self.examples.select_rows(indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(examples, labels).expect("subset of a valid dataset")
    }

    /// Splits every class into a training part and a held-out part with
    /// `round(fraction * size)` examples (at least one, and at least one
    /// left for training).
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!(
                "holdout fraction {fraction} outside [0, 1)"
            )));
        }
        let mut rng = rng_from(seed);
        let (mut keep, mut hold) = (Vec::new(), Vec::new());
        for (&class, members) in &self.class_index {
            if members.len() < 2 {
                return Err(Error::NotEnoughExamples {
                    class,
                    available: members.len(),
                    needed: 2,
                });
            }
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut rng);
            let n_hold =
                (libm::round(fraction * members.len() as f64) as usize).clamp(1, members.len() - 1);
            hold.extend_from_slice(&shuffled[..n_hold]);
            keep.extend_from_slice(&shuffled[n_hold..]);
        }
        keep.sort_unstable();
        hold.sort_unstable();
        Ok((self.subset(&keep), self.subset(&hold)))
    }
}

/// Disjoint class sets for meta-training, validation and testing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaSplit {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Val,
    Test,
}

impl MetaSplit {
    pub fn new(train: Vec<u32>, val: Vec<u32>, test: Vec<u32>) -> Result<Self> {
        let split = Self { train, val, test };
        let mut seen = BTreeSet::new();
        for &c in split.train.iter().chain(&split.val).chain(&split.test) {
            if !seen.insert(c) {
                return Err(Error::Config(format!(
                    "class {c} appears in more than one split"
                )));
            }
        }
        Ok(split)
    }

    /// Consecutive blocks of the sorted class ids.
    pub fn contiguous(classes: &[u32], train: usize, val: usize, test: usize) -> Result<Self> {
        if train + val + test > classes.len() {
            return Err(Error::Config(format!(
                "split needs {} classes, dataset has {}",
                train + val + test,
                classes.len()
            )));
        }
        let mut sorted = classes.to_vec();
        sorted.sort_unstable();
        Self::new(
            sorted[..train].to_vec(),
            sorted[train..train + val].to_vec(),
            sorted[train + val..train + val + test].to_vec(),
        )
    }

    pub fn classes(&self, role: SplitRole) -> &[u32] {
        match role {
            SplitRole::Train => &self.train,
            SplitRole::Val => &self.val,
            SplitRole::Test => &self.test,
        }
    }

    /// Every split class must exist in `dataset`.
    pub fn check_against(&self, dataset: &LabeledDataset) -> Result<()> {
        for &c in self.train.iter().chain(&self.val).chain(&self.test) {
            if dataset.class_examples(c).is_none() {
                return Err(Error::Config(format!(
                    "split class {c} is not in the dataset"
                )));
            }
        }
        Ok(())
    }
}

/// N ways, K support shots and Q queries per way.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeShape {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
}

impl EpisodeShape {
    pub const fn new(n_way: usize, k_shot: usize, q_query: usize) -> Self {
        Self {
            n_way,
            k_shot,
            q_query,
        }
    }

    pub fn validate(&self, available_classes: usize) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 || self.q_query == 0 {
            return Err(Error::Config(
                "n_way, k_shot and q_query must be at least 1".into(),
            ));
        }
        if self.n_way > available_classes {
            return Err(Error::Config(format!(
                "{}-way episodes need more than the {available_classes} available classes",
                self.n_way
            )));
        }
        Ok(())
    }
}

/// One few-shot task. Support and query rows are grouped by way label.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support_x: Tensor,
    pub support_y: Vec<usize>,
    pub query_x: Tensor,
    pub query_y: Vec<usize>,
    /// `way_map[w]` is the original class id of way `w`.
    pub way_map: Vec<u32>,
    pub support_index: Vec<usize>,
    pub query_index: Vec<usize>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.way_map.len()
    }

    pub fn support_one_hot(&self) -> Tensor {
        Tensor::one_hot(&self.support_y, self.n_way())
    }

    pub fn query_one_hot(&self) -> Tensor {
        Tensor::one_hot(&self.query_y, self.n_way())
    }
}

/// Draws one episode: `n_way` classes uniformly without replacement, then
/// `k_shot + q_query` examples per class without replacement (the first
/// `k_shot` go to the support set). Way labels follow sorted class ids.
pub fn sample_episode_with(
    dataset: &LabeledDataset,
    classes: &[u32],
    shape: EpisodeShape,
    rng: &mut Rng,
) -> Result<Episode> {
    shape.validate(classes.len())?;
    let mut way_map: Vec<u32> = index::sample(rng, classes.len(), shape.n_way)
        .into_iter()
        .map(|i| classes[i])
        .collect();
    way_map.sort_unstable();

    let per_class = shape.k_shot + shape.q_query;
    let mut support_index = Vec::with_capacity(shape.n_way * shape.k_shot);
    let mut query_index = Vec::with_capacity(shape.n_way * shape.q_query);
    let (mut support_y, mut query_y) = (Vec::new(), Vec::new());
    for (way, &class) in way_map.iter().enumerate() {
        let members = dataset
            .class_examples(class)
            .ok_or(Error::NotEnoughExamples {
                class,
                available: 0,
                needed: per_class,
            })?;
        if members.len() < per_class {
            return Err(Error::NotEnoughExamples {
                class,
                available: members.len(),
                needed: per_class,
            });
        }
        let picks = index::sample(rng, members.len(), per_class);
        for (j, pick) in picks.into_iter().enumerate() {
            if j < shape.k_shot {
                support_index.push(members[pick]);
                support_y.push(way);
            } else {
                query_index.push(members[pick]);
                query_y.push(way);
            }
        }
    }
    Ok(Episode {
        support_x: dataset.rows(&support_index),
        support_y,
        query_x: dataset.rows(&query_index),
        query_y,
        way_map,
        support_index,
        query_index,
    })
}

/// The task distribution over one split role of a dataset.
#[derive(Debug, Clone)]
pub struct TaskDistribution<'a> {
    dataset: &'a LabeledDataset,
    classes: Vec<u32>,
    shape: EpisodeShape,
    rng: Rng,
}

impl<'a> TaskDistribution<'a> {
    pub fn new(
        dataset: &'a LabeledDataset,
        classes: &[u32],
        shape: EpisodeShape,
        seed: u64,
    ) -> Result<Self> {
        shape.validate(classes.len())?;
        Ok(Self {
            dataset,
            classes: classes.to_vec(),
            shape,
            rng: rng_from(seed),
        })
    }

    pub fn dataset(&self) -> &'a LabeledDataset {
        self.dataset
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn shape(&self) -> EpisodeShape {
        self.shape
    }

    pub fn sample_episode(&mut self) -> Result<Episode> {
        sample_episode_with(self.dataset, &self.classes, self.shape, &mut self.rng)
    }
}

/// `m` examples drawn uniformly with replacement: `([m, dim] rows, labels)`.
pub fn sample_instance_batch(
    dataset: &LabeledDataset,
    m: usize,
    rng: &mut Rng,
) -> Result<(Tensor, Vec<u32>)> {
    if dataset.is_empty() {
        return Err(Error::Empty("instance dataset"));
    }
    if m == 0 {
        return Err(Error::Config(
            "instance batch size must be at least 1".into(),
        ));
    }
    let picks: Vec<usize> = (0..m).map(|_| rng.random_range(0..dataset.len())).collect();
    let labels = picks.iter().map(|&i| dataset.labels()[i]).collect();
    Ok((dataset.rows(&picks), labels))
}

/// Parameters of a synthetic concept dataset.
///
/// Each class has a prototype `mu ~ N(0, I_concept_dim)`. An example is
/// `[(mu + eps) A ; eta]` with `eps ~ N(0, sigma^2 I)`, a rendering map
/// `A: concept_dim -> input_dim - nuisance_dim` and nuisance
/// `eta ~ N(0, I_nuisance_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub input_dim: usize,
    pub concept_dim: usize,
    pub nuisance_dim: usize,
    pub noise_sigma: f64,
    /// First class id; ids run `class_offset..class_offset + num_classes`.
    pub class_offset: u32,
}

impl SyntheticConfig {
    pub fn render_dim(&self) -> usize {
        self.input_dim.saturating_sub(self.nuisance_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.per_class == 0 || self.concept_dim == 0 {
            return Err(Error::Config(
                "synthetic dataset needs classes, examples and a concept space".into(),
            ));
        }
        if self.nuisance_dim >= self.input_dim {
            return Err(Error::Config(format!(
                "nuisance_dim {} leaves no rendered coordinates in input_dim {}",
                self.nuisance_dim, self.input_dim
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise sigma {} must be finite and >= 0",
                self.noise_sigma
            )));
        }
        if (self.class_offset as u64) + (self.num_classes as u64) > u32::MAX as u64 {
            return Err(Error::Config("class ids overflow u32".into()));
        }
        Ok(())
    }
}

/// The fixed rendering map shared by every dataset drawn from one world.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    rendering: Tensor,
}

impl SyntheticWorld {
    /// `A` with entries `N(0, 1/concept_dim)`, so rendered coordinates have
    /// roughly unit variance like the nuisance ones.
    pub fn new(concept_dim: usize, render_dim: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let scale = 1.0 / libm::sqrt(concept_dim as f64);
        let data = (0..concept_dim * render_dim)
            .map(|_| scale * standard_normal(&mut rng))
            .collect();
        Self {
            rendering: Tensor::new(vec![concept_dim, render_dim], data).expect("positive dims"),
        }
    }

    pub fn for_config(cfg: &SyntheticConfig, seed: u64) -> Self {
        Self::new(cfg.concept_dim, cfg.render_dim(), seed)
    }

    /// `[concept_dim, render_dim]`.
    pub fn rendering(&self) -> &Tensor {
        &self.rendering
    }

    fn render(&self, concept: &[f64], out: &mut Vec<f64>) {
        let render_dim = self.rendering.shape()[1];
        let a = self.rendering.data();
        let start = out.len();
        out.resize(start + render_dim, 0.0);
        for (i, &c) in concept.iter().enumerate() {
            for (o, &w) in out[start..]
                .iter_mut()
                .zip(&a[i * render_dim..(i + 1) * render_dim])
            {
                *o += c * w;
            }
        }
    }

    pub fn sample(&self, cfg: &SyntheticConfig, seed: u64) -> Result<LabeledDataset> {
        cfg.validate()?;
        if self.rendering.shape() != [cfg.concept_dim, cfg.render_dim()] {
            return Err(Error::ShapeMismatch {
                op: "synthetic",
                lhs: self.rendering.shape().to_vec(),
                rhs: vec![cfg.concept_dim, cfg.render_dim()],
            });
        }
        let mut rng = rng_from(seed);
        let total = cfg.num_classes * cfg.per_class;
        let mut data = Vec::with_capacity(total * cfg.input_dim);
        let mut labels = Vec::with_capacity(total);
        let mut concept = vec![0.0; cfg.concept_dim];
        for c in 0..cfg.num_classes {
            let prototype: Vec<f64> = (0..cfg.concept_dim)
                .map(|_| standard_normal(&mut rng))
                .collect();
            for _ in 0..cfg.per_class {
                for (v, &mu) in concept.iter_mut().zip(&prototype) {
                    *v = mu + cfg.noise_sigma * standard_normal(&mut rng);
                }
                self.render(&concept, &mut data);
                for _ in 0..cfg.nuisance_dim {
                    data.push(standard_normal(&mut rng));
                }
                labels.push(cfg.class_offset + c as u32);
            }
        }
        LabeledDataset::new(Tensor::new(vec![total, cfg.input_dim], data)?, labels)
    }
}

/// A synthetic dataset with its own rendering map derived from `seed`.
pub fn gen_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<LabeledDataset> {
    cfg.validate()?;
    let world = SyntheticWorld::for_config(cfg, derive_seed(seed, stream::WORLD));
    world.sample(cfg, derive_seed(seed, stream::META_DATA))
}

/// The external concept dataset for a meta dataset made by
/// [`gen_synthetic`] with the same `seed`: same rendering map, fresh
/// prototypes, class ids placed after the meta dataset's ids.
pub fn make_disjoint_concept_dataset(
    meta: &SyntheticConfig,
    concept: &SyntheticConfig,
    seed: u64,
) -> Result<LabeledDataset> {
    meta.validate()?;
    if (meta.concept_dim, meta.render_dim()) != (concept.concept_dim, concept.render_dim())
        || meta.input_dim != concept.input_dim
    {
        return Err(Error::Config(
            "concept dataset must share the meta dataset's dimensions".into(),
        ));
    }
    let mut cfg = concept.clone();
    cfg.class_offset = cfg
        .class_offset
        .max(meta.class_offset + meta.num_classes as u32);
    let world = SyntheticWorld::for_config(meta, derive_seed(seed, stream::WORLD));
    world.sample(&cfg, derive_seed(seed, stream::CONCEPT_DATA))
}

/// Like [`make_disjoint_concept_dataset`] but rendered through an
/// independent map, so concept knowledge does not transfer directly.
pub fn make_dissimilar_concept_dataset(
    meta: &SyntheticConfig,
    concept: &SyntheticConfig,
    seed: u64,
) -> Result<LabeledDataset> {
    meta.validate()?;
    if meta.input_dim != concept.input_dim || meta.nuisance_dim != concept.nuisance_dim {
        return Err(Error::Config(
            "concept dataset must share the meta dataset's input layout".into(),
        ));
    }
    let mut cfg = concept.clone();
    cfg.class_offset = cfg
        .class_offset
        .max(meta.class_offset + meta.num_classes as u32);
    let world = SyntheticWorld::for_config(&cfg, derive_seed(seed, stream::CONCEPT_WORLD));
    world.sample(&cfg, derive_seed(seed, stream::CONCEPT_DATA))
}
