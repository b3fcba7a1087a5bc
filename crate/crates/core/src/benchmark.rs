//! The synthetic few-shot benchmark: 35 meta classes (20 train, 5 val,
//! 10 test) rendered from an 8-dim concept space into 16 coordinates plus
//! 16 nuisance ones, and 200 disjoint concept classes for the
//! discriminator.

use alloc::vec;
use alloc::vec::Vec;

use crate::episodes::{
    gen_synthetic, make_disjoint_concept_dataset, make_dissimilar_concept_dataset, EpisodeShape,
    LabeledDataset, MetaSplit, SyntheticConfig, DEFAULT_CONCEPT_CLASSES,
};
use crate::error::Result;
use crate::eval::{DEFAULT_TEST_QUERY, DEFAULT_TEST_TASKS};
use crate::metalearners::{MetaLearnerConfig, MetaLearnerKind, DEFAULT_INNER_RATE};
use crate::models::{GeneratorConfig, LearnerConfig};
use crate::rng::{derive_seed, stream};
use crate::trainer::{Mode, TrainConfig, TrainData, DEFAULT_TRAIN_QUERY};

pub const INPUT_DIM: usize = 32;
pub const CONCEPT_DIM: usize = 8;
pub const NUISANCE_DIM: usize = 16;
pub const NOISE_SIGMA: f64 = 0.1;
pub const META_PER_CLASS: usize = 30;
pub const CONCEPT_PER_CLASS: usize = 20;
pub const TRAIN_CLASSES: usize = 20;
pub const VAL_CLASSES: usize = 5;
pub const TEST_CLASSES: usize = 10;
pub const GENERATOR_HIDDEN: usize = 64;
pub const FEATURE_DIM: usize = 32;
/// Fraction of concept instances held out to score the discriminator.
pub const HOLDOUT_FRACTION: f64 = 0.25;
pub const N_WAY: usize = 5;
pub const K_SHOT: usize = 1;

pub fn meta_config() -> SyntheticConfig {
    SyntheticConfig {
        num_classes: TRAIN_CLASSES + VAL_CLASSES + TEST_CLASSES,
        per_class: META_PER_CLASS,
        input_dim: INPUT_DIM,
        concept_dim: CONCEPT_DIM,
        nuisance_dim: NUISANCE_DIM,
        noise_sigma: NOISE_SIGMA,
        class_offset: 0,
    }
}

pub fn concept_config() -> SyntheticConfig {
    SyntheticConfig {
        num_classes: DEFAULT_CONCEPT_CLASSES,
        per_class: CONCEPT_PER_CLASS,
        ..meta_config()
    }
}

/// Sizes of a benchmark instance; the default is the one above.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    /// `num_classes` must equal the sum of the split sizes.
    pub meta: SyntheticConfig,
    pub concept: SyntheticConfig,
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub holdout_fraction: f64,
    /// Render the concept classes through an independent map.
    pub dissimilar: bool,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            meta: meta_config(),
            concept: concept_config(),
            train_classes: TRAIN_CLASSES,
            val_classes: VAL_CLASSES,
            test_classes: TEST_CLASSES,
            holdout_fraction: HOLDOUT_FRACTION,
            dissimilar: false,
        }
    }
}

impl BenchmarkSpec {
    pub fn generate(&self, seed: u64) -> Result<Benchmark> {
        let meta = gen_synthetic(&self.meta, seed)?;
        let all = if self.dissimilar {
            make_dissimilar_concept_dataset(&self.meta, &self.concept, seed)?
        } else {
            make_disjoint_concept_dataset(&self.meta, &self.concept, seed)?
        };
        let (concepts, holdout) =
            all.split_holdout(self.holdout_fraction, derive_seed(seed, stream::HOLDOUT))?;
        let split = MetaSplit::contiguous(
            &meta.classes(),
            self.train_classes,
            self.val_classes,
            self.test_classes,
        )?;
        Ok(Benchmark {
            meta,
            split,
            concepts,
            holdout,
            seed,
        })
    }
}

/// Datasets of one benchmark instance.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub meta: LabeledDataset,
    pub split: MetaSplit,
    /// Concept instances the discriminator trains on.
    pub concepts: LabeledDataset,
    pub holdout: LabeledDataset,
    pub seed: u64,
}

impl Benchmark {
    pub fn generate(seed: u64, dissimilar: bool) -> Result<Self> {
        BenchmarkSpec {
            dissimilar,
            ..BenchmarkSpec::default()
        }
        .generate(seed)
    }

    pub fn data<'a>(&'a self, pretrained: Option<&'a crate::models::ParamStore>) -> TrainData<'a> {
        TrainData {
            meta: Some(&self.meta),
            split: Some(&self.split),
            concepts: Some(&self.concepts),
            pretrained,
        }
    }

    pub fn test_shape() -> EpisodeShape {
        EpisodeShape::new(N_WAY, K_SHOT, DEFAULT_TEST_QUERY)
    }

    pub fn test_tasks() -> usize {
        DEFAULT_TEST_TASKS
    }

    pub fn test_seed(&self) -> u64 {
        derive_seed(self.seed, stream::TEST)
    }
}

/// Two-layer generator without an output relu, so features can be signed.
pub fn generator_config() -> GeneratorConfig {
    let mut g = GeneratorConfig::mlp(INPUT_DIM, vec![GENERATOR_HIDDEN], FEATURE_DIM);
    g.output_relu = false;
    g
}

/// A linear learner on the features (a single affine layer for MAML and
/// Meta-SGD, an embedding of the same width for Matching Nets).
pub fn learner_config(kind: MetaLearnerKind, input_dim: usize) -> LearnerConfig {
    LearnerConfig {
        input_dim,
        hidden: Vec::new(),
        output_dim: if kind == MetaLearnerKind::Matching {
            input_dim
        } else {
            N_WAY
        },
        output_relu: false,
    }
}

pub fn train_config(mode: Mode, kind: MetaLearnerKind, seed: u64) -> TrainConfig {
    let generator = generator_config();
    let input_dim = if mode == Mode::Vanilla {
        INPUT_DIM
    } else {
        FEATURE_DIM
    };
    let meta = MetaLearnerConfig {
        kind,
        learner: learner_config(kind, input_dim),
        inner_rate: DEFAULT_INNER_RATE,
        inner_steps: 1,
    };
    let mut cfg = TrainConfig::new(
        mode,
        generator,
        meta,
        EpisodeShape::new(N_WAY, K_SHOT, DEFAULT_TRAIN_QUERY),
    );
    cfg.seed = seed;
    cfg
}
