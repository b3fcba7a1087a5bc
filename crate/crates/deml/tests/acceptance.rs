//! The nine acceptance criteria. Each test prints one PASS/FAIL line to
//! stderr (uncaptured) and asserts its criterion; criterion 7 is soft and
//! only reports.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use deml::parallel;
use deml_core::benchmark::{train_config, Benchmark};
use deml_core::episodes::{sample_episode_with, Episode, EpisodeShape, LabeledDataset};
use deml_core::eval::{ci95, SweepEval, DEFAULT_LAMBDA_GRID};
use deml_core::gradcheck::{self, normal_tensor, FIRST_ORDER_TOLERANCE, SECOND_ORDER_TOLERANCE};
use deml_core::metalearners::{
    attention_predict, inner_adapt, Concepts, MetaLearnerConfig, MetaLearnerKind, MetaLearnerState,
};
use deml_core::models::{init_params, LearnerConfig, ParamStore};
use deml_core::rng::{derive_seed, rng_from, standard_normal, stream};
use deml_core::trainer::{
    adam_update, combined_loss, AdamState, InstanceBatch, Mode, Model, Trainer,
    DISCRIMINATOR_PREFIX, GENERATOR_PREFIX,
};
use deml_core::{Graph, Tensor};
use rand::Rng;

/// Root seed of the benchmark runs, fixed before any result was seen.
const SEED: u64 = 0;

fn report(n: usize, pass: bool, what: &str, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "acceptance {n} [{verdict}] {what}: {detail}"
    );
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn criterion_1_gradient_oracle_suite() {
    let start = Instant::now();
    let primitives = gradcheck::run_cases(&gradcheck::primitive_cases(SEED), SEED).unwrap();
    let models = gradcheck::run_cases(&gradcheck::model_cases(SEED), SEED).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let all: Vec<_> = primitives.iter().chain(&models).collect();
    let worst = all.iter().map(|r| r.first_order).fold(0.0, f64::max);
    let worst_second = all.iter().map(|r| r.second_order).fold(0.0, f64::max);
    let failed: Vec<&str> = all
        .iter()
        .filter(|r| {
            !(r.first_order < FIRST_ORDER_TOLERANCE && r.second_order < SECOND_ORDER_TOLERANCE)
        })
        .map(|r| r.name.as_str())
        .collect();
    let pass = failed.is_empty() && elapsed < 60.0;
    report(
        1,
        pass,
        "gradient oracle suite",
        &format!(
            "{} primitives + {} model forwards, max first-order error {worst:.2e} (< 1e-6), max second-order {worst_second:.2e} (< 1e-4), {elapsed:.1}s (< 60s){}",
            primitives.len(),
            models.len(),
            if failed.is_empty() { String::new() } else { format!(", failing: {failed:?}") }
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_second_order_certification() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for kind in [MetaLearnerKind::Maml, MetaLearnerKind::MetaSgd] {
        for steps in [1, 2] {
            let checks = gradcheck::outer_gradient_checks(kind, steps, SEED).unwrap();
            let total: usize = checks.iter().map(|c| c.params).sum();
            let names: BTreeSet<&str> = checks
                .iter()
                .map(|c| c.name.rsplit('/').next().unwrap())
                .collect();
            let mut want = BTreeSet::from(["generator", "learner"]);
            if kind == MetaLearnerKind::MetaSgd {
                want.insert("alpha");
            }
            let worst = checks.iter().map(|c| c.error).fold(0.0, f64::max);
            pass &= total <= 200 && names == want && checks.iter().all(|c| c.passed());
            lines.push(format!(
                "{} {steps}-step {total} params {worst:.2e}",
                kind.name()
            ));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    pass &= elapsed < 120.0;
    report(
        2,
        pass,
        "second-order certification",
        &format!(
            "{} (all < 1e-4 over generator, learner and rates), {elapsed:.1}s (< 120s)",
            lines.join("; ")
        ),
    );
    assert!(pass);
}

/// Cross-correlation, stride 1, no padding, by direct loops.
fn conv_loops(x: &Tensor, k: &Tensor) -> Vec<f64> {
    let [b, c, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [o, _, kh, kw] = <[usize; 4]>::try_from(k.shape()).unwrap();
    let mut out = Vec::new();
    for bi in 0..b {
        for oi in 0..o {
            for y in 0..=h - kh {
                for xx in 0..=w - kw {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                acc += x.data()[((bi * c + ci) * h + y + i) * w + xx + j]
                                    * k.data()[((oi * c + ci) * kh + i) * kw + j];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn jitter(store: ParamStore, seed: u64) -> ParamStore {
    let mut rng = rng_from(seed);
    let values: Vec<f64> = store
        .flatten()
        .iter()
        .map(|v| v + 0.1 * standard_normal(&mut rng))
        .collect();
    store.unflatten(&values).unwrap()
}

#[test]
fn criterion_3_exact_identities() {
    let mut rng = rng_from(3);
    let mut notes = Vec::new();

    // Zero inner rate leaves the learner untouched.
    let learner = LearnerConfig {
        input_dim: 4,
        hidden: vec![5],
        output_dim: 3,
        output_relu: false,
    };
    let mut no_op = true;
    for (kind, rate) in [
        (MetaLearnerKind::Maml, 0.0),
        (MetaLearnerKind::MetaSgd, 0.0),
    ] {
        let cfg = MetaLearnerConfig {
            kind,
            learner: learner.clone(),
            inner_rate: rate,
            inner_steps: 3,
        };
        let mut state = MetaLearnerState::init(cfg.clone(), 4);
        state.phi = jitter(state.phi, 5);
        let mut g = Graph::new();
        let bound = state.bind(&mut g);
        let x = g.constant(normal_tensor(&mut rng, &[6, 4], 1.0));
        let y = g.constant(Tensor::one_hot(&[0, 0, 1, 1, 2, 2], 3));
        let adapted = inner_adapt(&mut g, &cfg, &bound, x, y).unwrap();
        for (name, t) in state.phi.iter() {
            no_op &= bits(&g.eval(&[adapted[name]]).unwrap()[0]) == bits(t);
        }
    }
    notes.push(format!("inner_adapt(rate 0) bit-exact {no_op}"));

    let mut params = ParamStore::new(0);
    params.insert("a", normal_tensor(&mut rng, &[4, 3], 1.0));
    params.insert("b", Tensor::vector(vec![0.0, -0.0, 1e-300, -7.5]));
    let before = params.clone();
    let mut adam = AdamState::new(&params);
    let mut adam_no_op = true;
    for _ in 0..3 {
        adam_update(&mut adam, &mut params, &before.full_like(0.0), 1e-3).unwrap();
        adam_no_op &= params
            .iter()
            .zip(before.iter())
            .all(|((_, a), (_, b))| bits(a) == bits(b));
    }
    notes.push(format!("Adam(zero gradient) bit-exact {adam_no_op}"));

    let bench = Benchmark::generate(SEED, false).unwrap();
    let mut cfg = train_config(Mode::Deml, MetaLearnerKind::MetaSgd, SEED);
    cfg.lambda = 0.0;
    let model = Model::init(&cfg, Some(bench.concepts.num_classes()), None).unwrap();
    let shape = cfg.episode;
    let tasks: Vec<Episode> = (0..2)
        .map(|_| sample_episode_with(&bench.meta, &bench.split.train, shape, &mut rng).unwrap())
        .collect();
    let batch = InstanceBatch::sample(&bench.concepts, 16, &mut rng).unwrap();
    let mut g = Graph::new();
    let gen = model.generator.bind(&mut g, GENERATOR_PREFIX);
    let (dcfg, dstore) = model.discriminator.as_ref().unwrap();
    let disc = dstore.bind(&mut g, DISCRIMINATOR_PREFIX);
    let bound = model.learner.bind(&mut g);
    let concepts = Concepts {
        config: &model.generator_config,
        nodes: &gen,
    };
    let loss = combined_loss(
        &mut g,
        concepts,
        Some((dcfg, &disc)),
        &cfg.meta,
        &bound,
        &tasks,
        Some(&batch),
        0.0,
    )
    .unwrap();
    let disc_nodes: Vec<_> = disc.values().copied().collect();
    let grads = g.grad(loss.total, &disc_nodes).unwrap();
    let zero_grad = g
        .eval(&grads)
        .unwrap()
        .iter()
        .all(|t| t.data().iter().all(|v| v.to_bits() == 0));
    let mut trainer = Trainer::new(cfg, model.clone()).unwrap();
    trainer.step(&tasks, Some(&batch)).unwrap();
    let disc_kept = trainer.model().discriminator == model.discriminator;
    notes.push(format!("lambda 0 discriminator gradient exactly zero {zero_grad}, discriminator unchanged {disc_kept}"));

    let mut conv_err: f64 = 0.0;
    for (xs, ks) in [
        ([2, 1, 7, 6], [3, 1, 3, 3]),
        ([3, 2, 5, 9], [4, 2, 2, 4]),
        ([1, 3, 4, 4], [2, 3, 4, 1]),
    ] {
        let x = normal_tensor(&mut rng, &xs, 1.0);
        let k = normal_tensor(&mut rng, &ks, 1.0);
        let mut g = Graph::new();
        let (xn, kn) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv2d(xn, kn).unwrap();
        let got = g.eval(&[y]).unwrap().remove(0);
        let want = conv_loops(&x, &k);
        assert_eq!(got.len(), want.len());
        conv_err = got
            .data()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(conv_err, f64::max);
    }
    notes.push(format!("conv2d vs nested loops max diff {conv_err:.1e}"));

    let pass = no_op && adam_no_op && zero_grad && disc_kept && conv_err < 1e-12;
    report(3, pass, "exact identities", &notes.join("; "));
    assert!(pass);
}

/// Embedding, cosine, softmax over the support set and per-way sums, by
/// direct loops over a dense relu net with `l{i}.w`, `l{i}.b` layers.
fn attention_oracle(
    cfg: &LearnerConfig,
    phi: &ParamStore,
    support: &Tensor,
    labels: &[usize],
    query: &Tensor,
    n_way: usize,
) -> Vec<Vec<f64>> {
    let layers = cfg.hidden.len() + 1;
    let embed = |x: &[f64]| {
        let mut h = x.to_vec();
        for l in 0..layers {
            let w = phi.get(&format!("l{l}.w")).unwrap();
            let b = phi.get(&format!("l{l}.b")).unwrap();
            let out = w.shape()[1];
            let mut next: Vec<f64> = (0..out)
                .map(|j| {
                    b.data()[j]
                        + (0..h.len())
                            .map(|i| h[i] * w.data()[i * out + j])
                            .sum::<f64>()
                })
                .collect();
            if l + 1 < layers || cfg.output_relu {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = next;
        }
        h
    };
    let cosine = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt()
            * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let es: Vec<Vec<f64>> = support.rows().map(embed).collect();
    query
        .rows()
        .map(|q| {
            let eq = embed(q);
            let e: Vec<f64> = es.iter().map(|s| cosine(&eq, s).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut p = vec![0.0; n_way];
            for (v, &l) in e.iter().zip(labels) {
                p[l] += v / z;
            }
            p
        })
        .collect()
}

#[test]
fn criterion_4_matching_nets_oracle() {
    let mut rng = rng_from(4);
    let mut worst: f64 = 0.0;
    let mut largest = 0;
    for e in 0..1000 {
        let n_way = rng.random_range(1..=5);
        let k = rng.random_range(1..=25 / n_way).min(5);
        let dim = rng.random_range(2..=6);
        let cfg = LearnerConfig {
            input_dim: dim,
            hidden: if e % 2 == 0 {
                vec![]
            } else {
                vec![rng.random_range(3..=6)]
            },
            output_dim: rng.random_range(2..=5),
            output_relu: false,
        };
        let phi = jitter(init_params(&cfg, e), 10_000 + e);
        let labels: Vec<usize> = (0..n_way).flat_map(|w| std::iter::repeat_n(w, k)).collect();
        largest = largest.max(labels.len());
        let support = normal_tensor(&mut rng, &[labels.len(), dim], 1.0);
        let rows = rng.random_range(1..=6);
        let query = normal_tensor(&mut rng, &[rows, dim], 1.0);
        let mut g = Graph::new();
        let nodes = phi.constants(&mut g);
        let s = g.constant(support.clone());
        let y = g.constant(Tensor::one_hot(&labels, n_way));
        let q = g.constant(query.clone());
        let p = attention_predict(&mut g, &cfg, &nodes, s, y, q).unwrap();
        let got = g.eval(&[p]).unwrap().remove(0);
        let want = attention_oracle(&cfg, &phi, &support, &labels, &query, n_way);
        for (row, w) in got.rows().zip(&want) {
            for (a, b) in row.iter().zip(w) {
                worst = worst.max((a - b).abs());
            }
        }
    }

    let eye = LearnerConfig {
        input_dim: 2,
        hidden: vec![],
        output_dim: 2,
        output_relu: false,
    };
    let mut phi = ParamStore::new(0);
    phi.insert("l0.w", Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
    phi.insert("l0.b", Tensor::zeros(&[2]));
    let mut g = Graph::new();
    let nodes = phi.constants(&mut g);
    let s = g.constant(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
    let y = g.constant(Tensor::one_hot(&[0, 1], 2));
    let q = g.constant(Tensor::matrix(&[&[1.0, 0.0]]).unwrap());
    let p = attention_predict(&mut g, &eye, &nodes, s, y, q).unwrap();
    let hand = g.eval(&[p]).unwrap().remove(0);
    let hand_ok =
        (hand.data()[0] - 0.73106).abs() < 1e-5 && (hand.data()[1] - 0.26894).abs() < 1e-5;

    let pass = worst < 1e-12 && hand_ok && largest <= 25;
    report(
        4,
        pass,
        "Matching Nets oracle",
        &format!(
            "1000 episodes (up to {largest} support examples) max diff {worst:.1e} (< 1e-12); hand case {:.6}/{:.6} (0.73106/0.26894 within 1e-5)",
            hand.data()[0],
            hand.data()[1]
        ),
    );
    assert!(pass);
}

fn episode_ok(ep: &Episode, shape: EpisodeShape, ds: &LabeledDataset, classes: &[u32]) -> bool {
    let distinct: BTreeSet<u32> = ep.way_map.iter().copied().collect();
    let per_way = |ys: &[usize], n: usize| {
        (0..shape.n_way).all(|w| ys.iter().filter(|&&y| y == w).count() == n)
    };
    let labelled = |idx: &[usize], ys: &[usize]| {
        idx.iter()
            .zip(ys)
            .all(|(&i, &w)| ds.labels()[i] == ep.way_map[w])
    };
    let s: BTreeSet<usize> = ep.support_index.iter().copied().collect();
    let q: BTreeSet<usize> = ep.query_index.iter().copied().collect();
    let rows_match = |x: &Tensor, idx: &[usize]| {
        let d = ds.example_dim();
        idx.iter()
            .enumerate()
            .all(|(r, &i)| x.data()[r * d..(r + 1) * d] == ds.examples().data()[i * d..(i + 1) * d])
    };
    distinct.len() == shape.n_way
        && ep.way_map.iter().all(|c| classes.contains(c))
        && ep.support_y.len() == shape.n_way * shape.k_shot
        && ep.query_y.len() == shape.n_way * shape.q_query
        && per_way(&ep.support_y, shape.k_shot)
        && per_way(&ep.query_y, shape.q_query)
        && labelled(&ep.support_index, &ep.support_y)
        && labelled(&ep.query_index, &ep.query_y)
        && s.len() == ep.support_index.len()
        && q.len() == ep.query_index.len()
        && s.is_disjoint(&q)
        && rows_match(&ep.support_x, &ep.support_index)
        && rows_match(&ep.query_x, &ep.query_index)
}

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_deml"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn criterion_5_protocol_invariants() {
    let bench = Benchmark::generate(SEED, false).unwrap();
    let mut rng = rng_from(5);
    let mut valid = 0;
    for i in 0..10_000 {
        let (classes, shape) = match i % 3 {
            0 => (&bench.split.train, EpisodeShape::new(5, 1, 5)),
            1 => (&bench.split.test, EpisodeShape::new(5, 1, 15)),
            _ => (
                &bench.split.train,
                EpisodeShape::new(1 + i % 7, 1 + i % 5, 1 + i % 11),
            ),
        };
        let ep = sample_episode_with(&bench.meta, classes, shape, &mut rng).unwrap();
        valid += usize::from(episode_ok(&ep, shape, &bench.meta, classes));
    }

    // Independent hand computation: 1.96 * sqrt(0.5) / sqrt(2) = 0.98.
    let (m, h) = ci95(&[0.0, 1.0]).unwrap();
    let hand = 1.96 * (0.5f64).sqrt() / 2f64.sqrt();
    let (m1, h1) = ci95(&[0.25]).unwrap();
    let ci_ok =
        m == 0.5 && (h - hand).abs() < 1e-12 && (h - 0.98).abs() < 1e-12 && (m1, h1) == (0.25, 0.0);

    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    run_cli(&[
        "gen-data",
        "--out",
        &p("data"),
        "--seed",
        "5",
        "--per-class",
        "20",
        "--concept-classes",
        "20",
        "--input-dim",
        "16",
        "--concept-dim",
        "4",
        "--nuisance-dim",
        "8",
    ]);
    let config = p("data/exp.toml");
    std::fs::write(
        &config,
        "seed = 5\n[data]\nmeta = \"meta.dmld\"\nsplit = \"split.txt\"\nconcepts = \"concepts.dmld\"\nholdout = \"holdout.dmld\"\n\
         [generator]\nhidden = [16]\nfeature_dim = 8\n[train]\niterations = 40\nval_interval = 20\nval_tasks = 10\n",
    )
    .unwrap();
    for run in ["a", "b"] {
        run_cli(&[
            "train",
            "-c",
            &config,
            "--checkpoint",
            &p(&format!("{run}.dmlc")),
            "--log",
            &p(&format!("{run}.csv")),
        ]);
        for w in ["1", "4"] {
            run_cli(&[
                "eval",
                "-c",
                &config,
                "--checkpoint",
                &p("a.dmlc"),
                "--workers",
                w,
                "--tasks",
                "200",
                "--out",
                &p(&format!("{run}{w}_eval.csv")),
            ]);
            run_cli(&[
                "baseline",
                "-c",
                &config,
                "--checkpoint",
                &p("a.dmlc"),
                "--workers",
                w,
                "--tasks",
                "200",
                "--out",
                &p(&format!("{run}{w}_knn.csv")),
            ]);
            run_cli(&[
                "sweep-lambda",
                "-c",
                &config,
                "--lambdas",
                "0.1,1",
                "--iterations",
                "10",
                "--tasks",
                "20",
                "--workers",
                w,
                "--out",
                &p(&format!("{run}{w}_sweep.csv")),
            ]);
        }
    }
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    let mut identical = read("a.csv") == read("b.csv") && read("a.dmlc") == read("b.dmlc");
    for kind in ["eval", "knn", "sweep"] {
        let first = read(&format!("a1_{kind}.csv"));
        identical &= ["a4", "b1", "b4"]
            .iter()
            .all(|r| read(&format!("{r}_{kind}.csv")) == first);
    }

    let pass = valid == 10_000 && ci_ok && identical;
    report(
        5,
        pass,
        "protocol invariants",
        &format!(
            "{valid}/10000 episodes valid; ci95([0,1]) = ({m}, {h:.6}) vs hand 1.96*0.7071/sqrt(2) = {hand:.6} \
             (the listed 0.9802 is 2e-4 off its own formula); ci95([x]) halfwidth 0; \
             log, checkpoint, results, baseline and sweep CSVs byte-identical across reruns and --workers 1/4: {identical}"
        ),
    );
    assert!(pass);
}

fn fewshot(model: &Model, bench: &Benchmark) -> deml_core::eval::EvalReport {
    parallel::meta_test(
        model,
        &bench.meta,
        &bench.split.test,
        Benchmark::test_shape(),
        Benchmark::test_tasks(),
        bench.test_seed(),
        workers(),
    )
    .unwrap()
}

#[test]
fn criterion_6_deml_beats_vanilla_meta_sgd() {
    let start = Instant::now();
    let bench = Benchmark::generate(SEED, false).unwrap();
    let train = |mode| {
        deml_core::trainer::run_training(
            &train_config(mode, MetaLearnerKind::MetaSgd, SEED),
            &bench.data(None),
        )
        .unwrap()
        .0
    };
    let (deml, vanilla) = std::thread::scope(|s| {
        let a = s.spawn(|| fewshot(&train(Mode::Deml), &bench));
        let b = s.spawn(|| fewshot(&train(Mode::DeepVanilla), &bench));
        (a.join().unwrap(), b.join().unwrap())
    });
    let pass = deml.mean_accuracy > vanilla.mean_accuracy && deml.separated_from(&vanilla);
    report(
        6,
        pass,
        "DEML+Meta-SGD vs deep-vanilla Meta-SGD",
        &format!(
            "5-way 1-shot over {} tasks: {:.4} +- {:.4} vs {:.4} +- {:.4}, intervals disjoint {}, {:.0}s",
            deml.num_tasks,
            deml.mean_accuracy,
            deml.ci95_halfwidth,
            vanilla.mean_accuracy,
            vanilla.ci95_halfwidth,
            deml.separated_from(&vanilla),
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_lambda_study_soft() {
    let bench = Benchmark::generate(SEED, false).unwrap();
    let base = train_config(Mode::Deml, MetaLearnerKind::MetaSgd, SEED);
    let eval = SweepEval {
        test_classes: &bench.split.test,
        shape: Benchmark::test_shape(),
        num_tasks: Benchmark::test_tasks(),
        seed: bench.test_seed(),
        holdout: &bench.holdout,
    };
    let rows = parallel::lambda_sweep(
        &base,
        &DEFAULT_LAMBDA_GRID,
        &bench.data(None),
        &eval,
        workers(),
    )
    .unwrap();
    let mut csv = Vec::new();
    deml::output::write_sweep(&mut csv, &rows).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    let path = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_sweep.csv");
    std::fs::write(&path, &csv).unwrap();

    let at = |l: f64| rows.iter().find(|r| r.lambda == l).unwrap();
    let (lo, mid, hi) = (at(0.01), at(1.0), at(10.0));
    let disc_ok = hi.disc_acc >= lo.disc_acc;
    let inverted_u = mid.fewshot_acc >= lo.fewshot_acc && mid.fewshot_acc >= hi.fewshot_acc;
    report(
        7,
        disc_ok && inverted_u,
        "lambda study (soft)",
        &format!(
            "discrimination {:.4} at lambda 10 vs {:.4} at 0.01; few-shot {:.4} at 1 vs {:.4} at 0.01 and {:.4} at 10; sweep CSV {}:\n{}",
            hi.disc_acc,
            lo.disc_acc,
            mid.fewshot_acc,
            lo.fewshot_acc,
            hi.fewshot_acc,
            path.display(),
            csv.trim_end()
        ),
    );
}

#[test]
fn criterion_8_deml_vs_decaf_on_dissimilar_concepts() {
    let bench = Benchmark::generate(SEED, true).unwrap();
    let run = |mode, pretrained: Option<&ParamStore>| {
        deml_core::trainer::run_training(
            &train_config(mode, MetaLearnerKind::MetaSgd, SEED),
            &bench.data(pretrained),
        )
        .unwrap()
        .0
    };
    let (deml, decaf) = std::thread::scope(|s| {
        let a = s.spawn(|| fewshot(&run(Mode::Deml, None), &bench));
        let b = s.spawn(|| {
            let pretrained = run(Mode::PretrainOnly, None).generator;
            fewshot(&run(Mode::DecafFrozen, Some(&pretrained)), &bench)
        });
        (a.join().unwrap(), b.join().unwrap())
    });
    let pass = deml.mean_accuracy >= decaf.mean_accuracy;
    report(
        8,
        pass,
        "DEML+Meta-SGD vs decaf-frozen Meta-SGD, independent concept rendering",
        &format!(
            "{:.4} +- {:.4} vs {:.4} +- {:.4} over {} tasks",
            deml.mean_accuracy,
            deml.ci95_halfwidth,
            decaf.mean_accuracy,
            decaf.ci95_halfwidth,
            deml.num_tasks
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_9_overfit_sanity() {
    let bench = Benchmark::generate(SEED, false).unwrap();
    let mut cfg = train_config(Mode::Deml, MetaLearnerKind::MetaSgd, SEED);
    cfg.learning_rate = 0.01;
    let mut rng = rng_from(derive_seed(SEED, stream::TASKS));
    let task = sample_episode_with(&bench.meta, &bench.split.train, cfg.episode, &mut rng).unwrap();
    let batch = InstanceBatch::sample(&bench.concepts, cfg.instance_batch, &mut rng).unwrap();
    let model = Model::init(&cfg, Some(bench.concepts.num_classes()), None).unwrap();
    let mut trainer = Trainer::new(cfg, model).unwrap();
    let tasks = std::slice::from_ref(&task);
    let initial = trainer.loss(tasks, Some(&batch)).unwrap().total;
    for _ in 0..100 {
        trainer.step(tasks, Some(&batch)).unwrap();
    }
    let last = trainer.loss(tasks, Some(&batch)).unwrap().total;
    let pass = last < 0.1 * initial;
    report(
        9,
        pass,
        "overfit sanity",
        &format!("combined loss {initial:.4} -> {last:.4} after 100 Adam steps (ratio {:.4} < 0.1, learning rate 0.01)", last / initial),
    );
    assert!(pass);
}
