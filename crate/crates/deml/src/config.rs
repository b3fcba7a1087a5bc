//! Experiment configuration files (TOML). Parsing is strict: unknown keys,
//! wrong types and constraint violations are errors carrying the key and
//! its line. Relative paths resolve against the config file's directory.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};

use deml_core::episodes::EpisodeShape;
use deml_core::eval::{DEFAULT_LAMBDA_GRID, DEFAULT_TEST_QUERY, DEFAULT_TEST_TASKS};
use deml_core::metalearners::{MetaLearnerConfig, MetaLearnerKind, DEFAULT_INNER_RATE};
use deml_core::models::{GeneratorConfig, GeneratorKind, LearnerConfig};
use deml_core::trainer::{
    default_task_batch, Mode, TrainConfig, DEFAULT_INSTANCE_BATCH, DEFAULT_ITERATIONS,
    DEFAULT_LEARNING_RATE, DEFAULT_TRAIN_QUERY, DEFAULT_VAL_QUERY,
};
use serde::Deserialize;

use crate::formats::{self, FormatError};

/// Every accepted key with its default, by section (`""` is the root).
pub const KEYS: &[(&str, &[(&str, &str)])] = &[
    ("", &[("seed", "0")]),
    (
        "data",
        &[
            ("meta", "required, DMLD file"),
            ("split", "required, split manifest"),
            ("concepts", "DMLD file, required by deml and pretrain-only"),
            ("holdout", "DMLD file, required by sweep-lambda"),
            ("pretrained", "DMLC checkpoint, required by decaf modes"),
        ],
    ),
    (
        "generator",
        &[
            ("kind", "\"mlp\" (or \"small-conv\")"),
            ("hidden", "[64]"),
            ("feature_dim", "32"),
            ("output_relu", "false"),
            ("height", "small-conv only, required"),
            ("width", "small-conv only, required"),
            ("channels", "[4]"),
            ("kernel", "3"),
        ],
    ),
    (
        "learner",
        &[
            ("kind", "\"metasgd\" (or \"maml\", \"matching\")"),
            ("hidden", "[]"),
            ("output_dim", "n_way (matching: the feature width)"),
            ("output_relu", "false"),
            ("inner_rate", "0.01"),
            ("inner_steps", "1"),
        ],
    ),
    (
        "train",
        &[
            ("mode", "\"deml\""),
            ("lambda", "1.0 in deml mode, 0 otherwise"),
            ("learning_rate", "0.001"),
            ("task_batch", "4 if k_shot < 5, else 2"),
            ("instance_batch", "64"),
            ("iterations", "2000"),
            ("n_way", "5"),
            ("k_shot", "1"),
            ("query", "5"),
            ("val_query", "15"),
            ("val_interval", "0 (no validation)"),
            ("val_tasks", "100"),
        ],
    ),
    (
        "eval",
        &[
            ("tasks", "600"),
            ("query", "15"),
            ("lambdas", "[0.01, 0.1, 0.5, 1.0, 2.0, 10.0]"),
        ],
    ),
    ("output", &[("dir", "\"out\"")]),
];

/// The key reference printed under `--help`.
pub fn reference() -> String {
    let mut out = String::from("Config keys (TOML) and defaults:\n");
    for (section, keys) in KEYS {
        if !section.is_empty() {
            out.push_str(&format!("  [{section}]\n"));
        }
        for (key, default) in *keys {
            out.push_str(&format!("    {key:<15} {default}\n"));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: Option<String>,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.line, &self.key) {
            (Some(l), Some(k)) => write!(f, "line {l}: `{k}`: {}", self.message),
            (Some(l), None) => write!(f, "line {l}: {}", self.message),
            (None, Some(k)) => write!(f, "`{k}`: {}", self.message),
            (None, None) => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Raw {
    seed: Option<u64>,
    #[serde(default)]
    data: RawData,
    #[serde(default)]
    generator: RawGenerator,
    #[serde(default)]
    learner: RawLearner,
    #[serde(default)]
    train: RawTrain,
    #[serde(default)]
    eval: RawEval,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    meta: Option<PathBuf>,
    split: Option<PathBuf>,
    concepts: Option<PathBuf>,
    holdout: Option<PathBuf>,
    pretrained: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGenerator {
    kind: Option<String>,
    hidden: Option<Vec<usize>>,
    feature_dim: Option<usize>,
    output_relu: Option<bool>,
    height: Option<usize>,
    width: Option<usize>,
    channels: Option<Vec<usize>>,
    kernel: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLearner {
    kind: Option<String>,
    hidden: Option<Vec<usize>>,
    output_dim: Option<usize>,
    output_relu: Option<bool>,
    inner_rate: Option<f64>,
    inner_steps: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    mode: Option<String>,
    lambda: Option<f64>,
    learning_rate: Option<f64>,
    task_batch: Option<usize>,
    instance_batch: Option<usize>,
    iterations: Option<usize>,
    n_way: Option<usize>,
    k_shot: Option<usize>,
    query: Option<usize>,
    val_query: Option<usize>,
    val_interval: Option<usize>,
    val_tasks: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEval {
    tasks: Option<usize>,
    query: Option<usize>,
    lambdas: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
}

/// Command-line values that replace config entries.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<String>,
    pub lambda: Option<f64>,
    pub iterations: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPaths {
    pub meta: PathBuf,
    pub split: PathBuf,
    pub concepts: Option<PathBuf>,
    pub holdout: Option<PathBuf>,
    pub pretrained: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub tasks: usize,
    pub query: usize,
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataPaths,
    /// Fully resolved and validated; its seed is `seed`.
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub output_dir: PathBuf,
    /// Accepted but unusual settings, for the caller to log.
    pub warnings: Vec<String>,
}

impl ExperimentConfig {
    pub fn test_shape(&self) -> EpisodeShape {
        EpisodeShape::new(
            self.train.episode.n_way,
            self.train.episode.k_shot,
            self.eval.query,
        )
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())]
        .bytes()
        .filter(|&b| b == b'\n')
        .count()
        + 1
}

/// Line of `key` inside `[section]` (root when empty), found textually.
fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.split(']').next()) {
            current = name.trim().to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim().trim_matches('"') == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

fn suggestion(
    unknown: &str,
    candidates: impl Iterator<Item = &'static str>,
) -> Option<&'static str> {
    candidates
        .map(|c| (strsim::damerau_levenshtein(unknown, c), c))
        .filter(|&(d, c)| d <= 2.max(c.len() / 3))
        .min()
        .map(|(_, c)| c)
}

fn unknown_key(
    text: &str,
    section: &str,
    key: &str,
    known: &[(&'static str, &str)],
    extra: &[&'static str],
) -> ConfigError {
    let full = if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    };
    let hint = suggestion(
        key,
        known.iter().map(|(k, _)| *k).chain(extra.iter().copied()),
    )
    .map(|s| format!("; did you mean `{s}`?"))
    .unwrap_or_default();
    ConfigError {
        line: locate(text, section, key),
        key: Some(full),
        message: format!("unknown key{hint}"),
    }
}

fn check_keys(text: &str, table: &toml::Table) -> Result<(), ConfigError> {
    let sections: Vec<&'static str> = KEYS
        .iter()
        .map(|(s, _)| *s)
        .filter(|s| !s.is_empty())
        .collect();
    for (key, value) in table {
        if let Some((_, known)) = KEYS.iter().find(|(s, _)| !s.is_empty() && s == key) {
            let Some(inner) = value.as_table() else {
                return Err(ConfigError {
                    line: locate(text, "", key),
                    key: Some(key.clone()),
                    message: "expected a table".into(),
                });
            };
            for k in inner.keys() {
                if !known.iter().any(|(name, _)| name == k) {
                    return Err(unknown_key(text, key, k, known, &[]));
                }
            }
        } else if !KEYS[0].1.iter().any(|(name, _)| name == key) {
            let line = locate(text, "", key).or_else(|| {
                text.lines()
                    .position(|l| l.trim() == format!("[{key}]"))
                    .map(|i| i + 1)
            });
            let mut err = unknown_key(text, "", key, KEYS[0].1, &sections);
            err.line = line;
            if !err.message.contains("did you mean") {
                let nested = KEYS
                    .iter()
                    .flat_map(|(s, keys)| keys.iter().map(move |(k, _)| (*s, *k)));
                if let Some((s, k)) = nested
                    .filter(|(_, k)| suggestion(key, std::iter::once(*k)).is_some())
                    .min_by_key(|(_, k)| strsim::damerau_levenshtein(key, k))
                {
                    err.message = format!("unknown key; did you mean `{k}` under [{s}]?");
                }
            }
            return Err(err);
        }
    }
    Ok(())
}

struct Resolver<'a> {
    text: &'a str,
    base: &'a Path,
}

impl Resolver<'_> {
    fn err(&self, section: &str, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError {
            line: locate(self.text, section, key),
            key: Some(format!("{section}.{key}")),
            message: message.into(),
        }
    }

    fn path(&self, key: &str, value: Option<PathBuf>) -> Result<Option<PathBuf>, ConfigError> {
        value
            .map(|p| {
                let p = self.base.join(p);
                if p.exists() {
                    Ok(p)
                } else {
                    Err(self.err("data", key, format!("{} does not exist", p.display())))
                }
            })
            .transpose()
    }
}

/// Reads the example width of a DMLD file from its header.
fn dataset_width(path: &Path) -> Result<usize, FormatError> {
    let mut file = std::fs::File::open(path)?;
    let mut head = [0u8; 11];
    file.read_exact(&mut head)?;
    if &head[..4] != formats::DATASET_MAGIC {
        return Err(FormatError::BadMagic {
            expected: *formats::DATASET_MAGIC,
            found: head[..4].try_into().expect("four bytes"),
        });
    }
    let rank = head[10] as usize;
    let mut dims = vec![0u8; 4 * rank];
    file.read_exact(&mut dims)?;
    Ok(dims
        .chunks(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("four bytes")) as usize)
        .product())
}

pub fn parse_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        key: None,
        line: None,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config_str(&text, base, overrides)
}

pub fn parse_config_str(
    text: &str,
    base: &Path,
    overrides: &Overrides,
) -> Result<ExperimentConfig, ConfigError> {
    let syntax = |e: toml::de::Error| ConfigError {
        key: None,
        line: e.span().map(|s| line_of(text, s.start)),
        message: e.message().trim().to_string(),
    };
    let table: toml::Table = text.parse().map_err(syntax)?;
    check_keys(text, &table)?;
    let raw: Raw = toml::from_str(text).map_err(syntax)?;
    resolve(raw, &Resolver { text, base }, overrides)
}

fn resolve(
    raw: Raw,
    r: &Resolver<'_>,
    overrides: &Overrides,
) -> Result<ExperimentConfig, ConfigError> {
    let mut warnings = Vec::new();
    let seed = overrides.seed.or(raw.seed).unwrap_or(0);

    let mode_name = overrides
        .mode
        .clone()
        .or(raw.train.mode.clone())
        .unwrap_or_else(|| Mode::Deml.name().into());
    let mode = Mode::parse(&mode_name).ok_or_else(|| {
        let names: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
        r.err(
            "train",
            "mode",
            format!(
                "unknown mode `{mode_name}`, expected one of {}",
                names.join(", ")
            ),
        )
    })?;
    let lambda = match (overrides.lambda, raw.train.lambda) {
        (Some(l), _) if l > 0.0 && !mode.uses_discriminator() => {
            return Err(ConfigError {
                key: Some("--lambda".into()),
                line: None,
                message: format!("mode {mode} has no discriminator, lambda must be 0"),
            })
        }
        (Some(l), _) => l,
        (None, Some(l)) if l > 0.0 && !mode.uses_discriminator() && overrides.mode.is_some() => {
            warnings.push(format!(
                "ignoring train.lambda = {l}: mode {mode} has no discriminator"
            ));
            0.0
        }
        (None, Some(l)) if l > 0.0 && !mode.uses_discriminator() => {
            return Err(r.err(
                "train",
                "lambda",
                format!("mode {mode} has no discriminator, lambda must be 0"),
            ))
        }
        (None, Some(l)) => l,
        (None, None) => mode.default_lambda(),
    };
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(r.err("train", "lambda", "must be finite and >= 0"));
    }

    let data = DataPaths {
        meta: r
            .path("meta", raw.data.meta)?
            .ok_or_else(|| r.err("data", "meta", "is required"))?,
        split: r
            .path("split", raw.data.split)?
            .ok_or_else(|| r.err("data", "split", "is required"))?,
        concepts: r.path("concepts", raw.data.concepts)?,
        holdout: r.path("holdout", raw.data.holdout)?,
        pretrained: r.path("pretrained", raw.data.pretrained)?,
    };
    if mode.uses_discriminator() && data.concepts.is_none() {
        return Err(r.err("data", "concepts", format!("is required in mode {mode}")));
    }
    if mode.needs_pretrained() && data.pretrained.is_none() {
        return Err(r.err("data", "pretrained", format!("is required in mode {mode}")));
    }
    let input_dim = dataset_width(&data.meta)
        .map_err(|e| r.err("data", "meta", format!("unreadable dataset: {e}")))?;

    let g = raw.generator;
    let feature_dim = g.feature_dim.unwrap_or(deml_core::benchmark::FEATURE_DIM);
    let kind = match g.kind.as_deref().unwrap_or("mlp") {
        "mlp" => GeneratorKind::Mlp {
            hidden: g
                .hidden
                .unwrap_or_else(|| vec![deml_core::benchmark::GENERATOR_HIDDEN]),
        },
        "small-conv" => GeneratorKind::SmallConv {
            height: g
                .height
                .ok_or_else(|| r.err("generator", "height", "is required for small-conv"))?,
            width: g
                .width
                .ok_or_else(|| r.err("generator", "width", "is required for small-conv"))?,
            channels: g.channels.unwrap_or_else(|| vec![4]),
            kernel: g.kernel.unwrap_or(3),
        },
        other => {
            return Err(r.err(
                "generator",
                "kind",
                format!("unknown generator `{other}`, expected mlp or small-conv"),
            ))
        }
    };
    let generator = GeneratorConfig {
        input_dim,
        feature_dim,
        kind,
        output_relu: g.output_relu.unwrap_or(false),
    };
    if mode != Mode::Vanilla {
        generator
            .validate()
            .map_err(|e| r.err("generator", "kind", e.to_string()))?;
    }
    let features = if mode == Mode::Vanilla {
        input_dim
    } else {
        feature_dim
    };

    let t = raw.train;
    let n_way = t.n_way.unwrap_or(deml_core::benchmark::N_WAY);
    let k_shot = t.k_shot.unwrap_or(deml_core::benchmark::K_SHOT);
    if n_way == 0 {
        return Err(r.err("train", "n_way", "must be at least 1"));
    }
    if k_shot == 0 {
        return Err(r.err("train", "k_shot", "must be at least 1"));
    }
    if k_shot != 1 && k_shot != 5 {
        warnings.push(format!(
            "k_shot = {k_shot} is outside the usual 1 and 5 shot settings"
        ));
    }

    let l = raw.learner;
    let learner_name = l
        .kind
        .unwrap_or_else(|| MetaLearnerKind::MetaSgd.name().into());
    let learner_kind = MetaLearnerKind::parse(&learner_name).ok_or_else(|| {
        r.err(
            "learner",
            "kind",
            format!("unknown meta-learner `{learner_name}`, expected matching, maml or metasgd"),
        )
    })?;
    let output_dim = match (learner_kind, l.output_dim) {
        (MetaLearnerKind::Matching, d) => d.unwrap_or(features),
        (_, Some(d)) if d != n_way => {
            return Err(r.err(
                "learner",
                "output_dim",
                format!("must equal n_way = {n_way}"),
            ))
        }
        _ => n_way,
    };
    let meta = MetaLearnerConfig {
        kind: learner_kind,
        learner: LearnerConfig {
            input_dim: features,
            hidden: l.hidden.unwrap_or_default(),
            output_dim,
            output_relu: l.output_relu.unwrap_or(false),
        },
        inner_rate: l.inner_rate.unwrap_or(DEFAULT_INNER_RATE),
        inner_steps: l.inner_steps.unwrap_or(1),
    };
    meta.validate(n_way).map_err(|e| {
        let key = if meta.inner_steps == 0 {
            "inner_steps"
        } else if !(meta.inner_rate >= 0.0 && meta.inner_rate.is_finite()) {
            "inner_rate"
        } else {
            "hidden"
        };
        r.err("learner", key, e.to_string())
    })?;

    let episode = EpisodeShape::new(n_way, k_shot, t.query.unwrap_or(DEFAULT_TRAIN_QUERY));
    let mut train = TrainConfig::new(mode, generator, meta, episode);
    train.lambda = lambda;
    train.seed = seed;
    let positive = |key: &str, v: Option<usize>, default: usize| match v {
        Some(0) => Err(r.err("train", key, "must be at least 1")),
        v => Ok(v.unwrap_or(default)),
    };
    train.task_batch = positive("task_batch", t.task_batch, default_task_batch(k_shot))?;
    train.instance_batch = positive("instance_batch", t.instance_batch, DEFAULT_INSTANCE_BATCH)?;
    train.iterations = positive(
        "iterations",
        overrides.iterations.or(t.iterations),
        DEFAULT_ITERATIONS,
    )?;
    train.episode.q_query = positive("query", t.query, DEFAULT_TRAIN_QUERY)?;
    train.val_query = positive("val_query", t.val_query, DEFAULT_VAL_QUERY)?;
    train.val_interval = t.val_interval.unwrap_or(0);
    train.val_tasks = t.val_tasks.unwrap_or(100);
    train.learning_rate = t.learning_rate.unwrap_or(DEFAULT_LEARNING_RATE);
    if !(train.learning_rate > 0.0 && train.learning_rate.is_finite()) {
        return Err(r.err("train", "learning_rate", "must be positive"));
    }
    train.validate().map_err(|e| ConfigError {
        key: None,
        line: None,
        message: e.to_string(),
    })?;

    let e = raw.eval;
    let eval = EvalSettings {
        tasks: e.tasks.unwrap_or(DEFAULT_TEST_TASKS),
        query: e.query.unwrap_or(DEFAULT_TEST_QUERY),
        lambdas: e.lambdas.unwrap_or_else(|| DEFAULT_LAMBDA_GRID.to_vec()),
    };
    if eval.tasks == 0 {
        return Err(r.err("eval", "tasks", "must be at least 1"));
    }
    if eval.query == 0 {
        return Err(r.err("eval", "query", "must be at least 1"));
    }
    if eval.lambdas.is_empty() || eval.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(r.err(
            "eval",
            "lambdas",
            "must be a non-empty list of finite values >= 0",
        ));
    }

    Ok(ExperimentConfig {
        seed,
        data,
        train,
        eval,
        output_dir: r
            .base
            .join(raw.output.dir.unwrap_or_else(|| PathBuf::from("out"))),
        warnings,
    })
}

/// A config referencing the files written by `gen-data`.
pub fn template(files: &BTreeMap<&str, &str>, seed: u64) -> String {
    let mut out = format!("seed = {seed}\n\n[data]\n");
    for (key, file) in files {
        out.push_str(&format!("{key} = \"{file}\"\n"));
    }
    out.push_str("\n[train]\nmode = \"deml\"\nlambda = 1.0\n\n[learner]\nkind = \"metasgd\"\n");
    out
}
