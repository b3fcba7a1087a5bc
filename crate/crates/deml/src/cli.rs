//! The `deml` command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use deml_core::benchmark::{self, BenchmarkSpec};
use deml_core::episodes::{LabeledDataset, SyntheticConfig, DEFAULT_CONCEPT_CLASSES};
use deml_core::eval::SweepEval;
use deml_core::gradcheck::{self, FIRST_ORDER_TOLERANCE, SECOND_ORDER_TOLERANCE};
use deml_core::metalearners::MetaLearnerKind;
use deml_core::models::{GeneratorConfig, ParamStore};
use deml_core::rng::{derive_seed, stream};
use deml_core::trainer::{run_training, Model, TrainData, GENERATOR_PREFIX};

use crate::config::{self, ExperimentConfig, Overrides};
use crate::formats;
use crate::output::{self, ResultRow};
use crate::parallel;

#[derive(Debug, Parser)]
#[command(
    name = "deml",
    version,
    about = "Few-shot meta-learning in a jointly learned concept space"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic benchmark (DMLD datasets, split manifest, config).
    GenData(GenData),
    /// Train a model and write its checkpoint and loss log.
    #[command(after_long_help = config::reference())]
    Train(Train),
    /// Meta-test a checkpoint and write a results CSV.
    #[command(after_long_help = config::reference())]
    Eval(Eval),
    /// Train one joint model per lambda and write the sweep CSV.
    #[command(after_long_help = config::reference())]
    SweepLambda(Sweep),
    /// Nearest-centroid evaluation on generator (or raw) features.
    #[command(after_long_help = config::reference())]
    Baseline(Baseline),
    /// Finite-difference check of every primitive and model forward.
    Gradcheck(GradCheck),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML); see the key list below
    #[arg(long, short)]
    pub config: PathBuf,
    /// Override the config's root seed [default: config value, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluation threads; results do not depend on it
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct GenData {
    /// Output directory
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Render concept classes through an independent map
    #[arg(long)]
    pub dissimilar: bool,
    #[arg(long, default_value_t = benchmark::INPUT_DIM)]
    pub input_dim: usize,
    #[arg(long, default_value_t = benchmark::CONCEPT_DIM)]
    pub concept_dim: usize,
    #[arg(long, default_value_t = benchmark::NUISANCE_DIM)]
    pub nuisance_dim: usize,
    /// Within-class noise of the concept prototypes
    #[arg(long, default_value_t = benchmark::NOISE_SIGMA)]
    pub sigma: f64,
    /// Examples per meta class
    #[arg(long, default_value_t = benchmark::META_PER_CLASS)]
    pub per_class: usize,
    #[arg(long, default_value_t = benchmark::TRAIN_CLASSES)]
    pub train_classes: usize,
    #[arg(long, default_value_t = benchmark::VAL_CLASSES)]
    pub val_classes: usize,
    #[arg(long, default_value_t = benchmark::TEST_CLASSES)]
    pub test_classes: usize,
    #[arg(long, default_value_t = DEFAULT_CONCEPT_CLASSES)]
    pub concept_classes: usize,
    #[arg(long, default_value_t = benchmark::CONCEPT_PER_CLASS)]
    pub concept_per_class: usize,
    /// Share of concept instances kept aside to score the discriminator
    #[arg(long, default_value_t = benchmark::HOLDOUT_FRACTION)]
    pub holdout_fraction: f64,
}

#[derive(Debug, Args)]
pub struct Train {
    #[command(flatten)]
    pub common: Common,
    /// Override train.mode (deml, vanilla, deep-vanilla, decaf-frozen, decaf-finetune, pretrain-only)
    #[arg(long)]
    pub mode: Option<String>,
    /// Override train.lambda; must be 0 without a discriminator
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Override train.iterations
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Checkpoint path [default: <output.dir>/<mode>.dmlc]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Loss log path [default: <output.dir>/<mode>_log.csv]
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Mode the checkpoint was trained in [default: train.mode]
    #[arg(long)]
    pub mode: Option<String>,
    /// Meta-test tasks
    #[arg(long, default_value_t = deml_core::eval::DEFAULT_TEST_TASKS)]
    pub tasks: usize,
    /// Results path [default: <output.dir>/results.csv]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Sweep {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated lambdas [default: eval.lambdas]
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Meta-test tasks per lambda [default: eval.tasks]
    #[arg(long)]
    pub tasks: Option<usize>,
    /// Override train.iterations
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Sweep path [default: <output.dir>/sweep.csv]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Baseline {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint whose generator embeds the instances [default: raw inputs]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Meta-test tasks
    #[arg(long, default_value_t = deml_core::eval::DEFAULT_TEST_TASKS)]
    pub tasks: usize,
    /// Results path [default: <output.dir>/baseline.csv]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheck {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also certify second-order meta-gradients of MAML and Meta-SGD
    #[arg(long)]
    pub meta: bool,
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// `Ok(false)` means the command ran but a check failed.
pub fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::GenData(a) => gen_data(&a).map(|_| true),
        Command::Train(a) => train(&a).map(|_| true),
        Command::Eval(a) => eval(&a).map(|_| true),
        Command::SweepLambda(a) => sweep(&a).map(|_| true),
        Command::Baseline(a) => baseline(&a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

fn load(common: &Common, overrides: Overrides) -> anyhow::Result<ExperimentConfig> {
    let cfg = config::parse_config(
        &common.config,
        &Overrides {
            seed: common.seed,
            ..overrides
        },
    )
    .with_context(|| format!("config {}", common.config.display()))?;
    for w in &cfg.warnings {
        log::warn!("{w}");
    }
    Ok(cfg)
}

struct Loaded {
    meta: LabeledDataset,
    split: deml_core::episodes::MetaSplit,
    concepts: Option<LabeledDataset>,
    pretrained: Option<ParamStore>,
}

impl Loaded {
    fn read(cfg: &ExperimentConfig) -> anyhow::Result<Self> {
        let dataset =
            |p: &Path| formats::load_dataset(p).with_context(|| format!("dataset {}", p.display()));
        let meta = dataset(&cfg.data.meta)?;
        let split = formats::load_split(&cfg.data.split)
            .with_context(|| format!("split {}", cfg.data.split.display()))?;
        let concepts = cfg.data.concepts.as_deref().map(dataset).transpose()?;
        let pretrained = match (&cfg.data.pretrained, cfg.train.mode.needs_pretrained()) {
            (Some(p), true) => {
                let store = formats::load_checkpoint(p)
                    .with_context(|| format!("checkpoint {}", p.display()))?;
                Some(generator_part(&store))
            }
            _ => None,
        };
        Ok(Self {
            meta,
            split,
            concepts,
            pretrained,
        })
    }

    fn data(&self) -> TrainData<'_> {
        TrainData {
            meta: Some(&self.meta),
            split: Some(&self.split),
            concepts: self.concepts.as_ref(),
            pretrained: self.pretrained.as_ref(),
        }
    }
}

/// The generator of a full checkpoint, or the store itself if it holds
/// bare generator tensors.
fn generator_part(store: &ParamStore) -> ParamStore {
    let part = store.strip_prefix(GENERATOR_PREFIX);
    if part.is_empty() {
        store.clone()
    } else {
        part
    }
}

fn method_name(cfg: &ExperimentConfig) -> String {
    format!("{}+{}", cfg.train.mode, cfg.train.meta.kind.name())
}

fn dataset_name(cfg: &ExperimentConfig) -> String {
    cfg.data
        .meta
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn gen_data(a: &GenData) -> anyhow::Result<()> {
    let meta = SyntheticConfig {
        num_classes: a.train_classes + a.val_classes + a.test_classes,
        per_class: a.per_class,
        input_dim: a.input_dim,
        concept_dim: a.concept_dim,
        nuisance_dim: a.nuisance_dim,
        noise_sigma: a.sigma,
        class_offset: 0,
    };
    let spec = BenchmarkSpec {
        concept: SyntheticConfig {
            num_classes: a.concept_classes,
            per_class: a.concept_per_class,
            ..meta.clone()
        },
        meta,
        train_classes: a.train_classes,
        val_classes: a.val_classes,
        test_classes: a.test_classes,
        holdout_fraction: a.holdout_fraction,
        dissimilar: a.dissimilar,
    };
    let b = spec.generate(a.seed)?;
    std::fs::create_dir_all(&a.out)?;
    formats::save_dataset(&a.out.join("meta.dmld"), &b.meta)?;
    formats::save_dataset(&a.out.join("concepts.dmld"), &b.concepts)?;
    formats::save_dataset(&a.out.join("holdout.dmld"), &b.holdout)?;
    formats::save_split(&a.out.join("split.txt"), &b.split)?;
    let files = BTreeMap::from([
        ("concepts", "concepts.dmld"),
        ("holdout", "holdout.dmld"),
        ("meta", "meta.dmld"),
        ("split", "split.txt"),
    ]);
    std::fs::write(a.out.join("config.toml"), config::template(&files, a.seed))?;
    log::info!(
        "wrote {} meta and {} + {} concept instances to {}",
        b.meta.len(),
        b.concepts.len(),
        b.holdout.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: &Train) -> anyhow::Result<()> {
    let cfg = load(
        &a.common,
        Overrides {
            mode: a.mode.clone(),
            lambda: a.lambda,
            iterations: a.iterations,
            ..Overrides::default()
        },
    )?;
    let loaded = Loaded::read(&cfg)?;
    log::info!(
        "training {} for {} iterations (lambda {})",
        method_name(&cfg),
        cfg.train.iterations,
        cfg.train.lambda
    );
    let (model, log) = run_training(&cfg.train, &loaded.data())?;
    let mode = cfg.train.mode.name();
    let checkpoint = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join(format!("{mode}.dmlc")));
    let log_path = a
        .log
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join(format!("{mode}_log.csv")));
    if let Some(dir) = checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    formats::save_checkpoint(&checkpoint, &model.to_store())?;
    output::to_file(&log_path, |f| output::write_log(f, &log))?;
    if let Some(last) = log.rows.last() {
        log::info!(
            "final meta loss {:?}, disc loss {:?}",
            last.meta_loss,
            last.disc_loss
        );
    }
    println!("{}", checkpoint.display());
    Ok(())
}

fn restore(cfg: &ExperimentConfig, loaded: &Loaded, checkpoint: &Path) -> anyhow::Result<Model> {
    let store = formats::load_checkpoint(checkpoint)
        .with_context(|| format!("checkpoint {}", checkpoint.display()))?;
    let disc_classes = cfg
        .train
        .mode
        .uses_discriminator()
        .then(|| loaded.concepts.as_ref().map(|c| c.num_classes()))
        .flatten();
    let pretrained = cfg
        .train
        .mode
        .needs_pretrained()
        .then(|| generator_part(&store));
    let mut model = Model::init(&cfg.train, disc_classes, pretrained.as_ref())?;
    model.load_store(&store).with_context(|| {
        format!(
            "checkpoint {} does not fit the configured model",
            checkpoint.display()
        )
    })?;
    Ok(model)
}

fn eval(a: &Eval) -> anyhow::Result<()> {
    let cfg = load(
        &a.common,
        Overrides {
            mode: a.mode.clone(),
            ..Overrides::default()
        },
    )?;
    if a.tasks == 0 {
        bail!("--tasks must be at least 1");
    }
    let loaded = Loaded::read(&cfg)?;
    let model = restore(&cfg, &loaded, &a.checkpoint)?;
    let shape = cfg.test_shape();
    let seed = derive_seed(cfg.seed, stream::TEST);
    let report = parallel::meta_test(
        &model,
        &loaded.meta,
        &loaded.split.test,
        shape,
        a.tasks,
        seed,
        a.common.workers,
    )?;
    let row = ResultRow::new(
        &method_name(&cfg),
        &dataset_name(&cfg),
        shape.n_way,
        shape.k_shot,
        &report,
    );
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("results.csv"));
    output::to_file(&out, |f| {
        output::write_results(f, std::slice::from_ref(&row))
    })?;
    println!(
        "{}: {:.4} +- {:.4} over {} tasks",
        row.method, row.mean_acc, row.ci95, row.num_tasks
    );
    Ok(())
}

fn sweep(a: &Sweep) -> anyhow::Result<()> {
    let cfg = load(
        &a.common,
        Overrides {
            mode: Some("deml".into()),
            iterations: a.iterations,
            ..Overrides::default()
        },
    )?;
    let holdout_path = cfg
        .data
        .holdout
        .as_ref()
        .context("sweep-lambda needs data.holdout")?;
    let holdout = formats::load_dataset(holdout_path)
        .with_context(|| format!("dataset {}", holdout_path.display()))?;
    let loaded = Loaded::read(&cfg)?;
    let lambdas = a
        .lambdas
        .clone()
        .unwrap_or_else(|| cfg.eval.lambdas.clone());
    let eval = SweepEval {
        test_classes: &loaded.split.test,
        shape: cfg.test_shape(),
        num_tasks: a.tasks.unwrap_or(cfg.eval.tasks),
        seed: derive_seed(cfg.seed, stream::TEST),
        holdout: &holdout,
    };
    let rows = parallel::lambda_sweep(
        &cfg.train,
        &lambdas,
        &loaded.data(),
        &eval,
        a.common.workers,
    )?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("sweep.csv"));
    output::to_file(&out, |f| output::write_sweep(f, &rows))?;
    for r in &rows {
        println!(
            "lambda {}: few-shot {:.4} +- {:.4}, discrimination {:.4}",
            r.lambda, r.fewshot_acc, r.fewshot_ci, r.disc_acc
        );
    }
    Ok(())
}

fn baseline(a: &Baseline) -> anyhow::Result<()> {
    let cfg = load(&a.common, Overrides::default())?;
    let loaded = Loaded::read(&cfg)?;
    let (method, generator, store) = match &a.checkpoint {
        Some(p) => {
            let store = formats::load_checkpoint(p)
                .with_context(|| format!("checkpoint {}", p.display()))?;
            let generator = cfg.train.generator_config();
            let store = generator_part(&store);
            deml_core::models::check_layout(&generator, &store)
                .context("checkpoint generator does not fit the config")?;
            ("knn-centroid+generator", generator, store)
        }
        None => (
            "knn-centroid",
            GeneratorConfig::identity(loaded.meta.example_dim()),
            ParamStore::new(0),
        ),
    };
    let shape = cfg.test_shape();
    let seed = derive_seed(cfg.seed, stream::TEST);
    let report = parallel::knn_test(
        &generator,
        &store,
        &loaded.meta,
        &loaded.split.test,
        shape,
        a.tasks,
        seed,
        a.common.workers,
    )?;
    let row = ResultRow::new(
        method,
        &dataset_name(&cfg),
        shape.n_way,
        shape.k_shot,
        &report,
    );
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("baseline.csv"));
    output::to_file(&out, |f| {
        output::write_results(f, std::slice::from_ref(&row))
    })?;
    println!(
        "{}: {:.4} +- {:.4} over {} tasks",
        row.method, row.mean_acc, row.ci95, row.num_tasks
    );
    Ok(())
}

fn gradcheck(a: &GradCheck) -> anyhow::Result<bool> {
    let mut ok = true;
    println!(
        "{:<28} {:>12} {:>12}",
        "case", "first_order", "second_order"
    );
    for (group, cases) in [
        ("", gradcheck::primitive_cases(a.seed)),
        ("model/", gradcheck::model_cases(a.seed)),
    ] {
        for r in gradcheck::run_cases(&cases, a.seed)? {
            let pass =
                r.first_order < FIRST_ORDER_TOLERANCE && r.second_order < SECOND_ORDER_TOLERANCE;
            ok &= pass;
            println!(
                "{:<28} {:>12.3e} {:>12.3e}{}",
                format!("{group}{}", r.name),
                r.first_order,
                r.second_order,
                if pass { "" } else { "  FAIL" }
            );
        }
    }
    if a.meta {
        for kind in [MetaLearnerKind::Maml, MetaLearnerKind::MetaSgd] {
            for steps in [1, 2] {
                for c in gradcheck::outer_gradient_checks(kind, steps, a.seed)? {
                    ok &= c.passed();
                    println!(
                        "{:<28} {:>12.3e}{}",
                        format!("{}/{steps}-step/{}", kind.name(), c.name),
                        c.error,
                        if c.passed() { "" } else { "  FAIL" }
                    );
                }
            }
        }
    }
    println!(
        "{}",
        if ok {
            "all checks passed"
        } else {
            "some checks failed"
        }
    );
    Ok(ok)
}
