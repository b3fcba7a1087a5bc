use super::*;
use crate::autodiff::{finite_diff, relative_error};
use crate::gradcheck::{normal_tensor, SECOND_ORDER_TOLERANCE, STEP};
use crate::models::GeneratorConfig;
use crate::rng::rng_from;
use alloc::vec;

fn eval(g: &Graph, x: NodeId) -> Tensor {
    g.eval(&[x]).unwrap().remove(0)
}

fn linear(input_dim: usize, output_dim: usize) -> LearnerConfig {
    LearnerConfig {
        input_dim,
        hidden: vec![],
        output_dim,
        output_relu: false,
    }
}

fn store(entries: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new(0);
    for (name, t) in entries {
        s.insert(*name, t.clone());
    }
    s
}

fn episode(
    support_x: Tensor,
    support_y: Vec<usize>,
    query_x: Tensor,
    query_y: Vec<usize>,
    n_way: usize,
) -> Episode {
    let ns = support_y.len();
    let nq = query_y.len();
    Episode {
        support_x,
        support_y,
        query_x,
        query_y,
        way_map: (0..n_way as u32).collect(),
        support_index: (0..ns).collect(),
        query_index: (ns..ns + nq).collect(),
    }
}

fn random_episode(seed: u64, dim: usize, n_way: usize, k: usize, q: usize) -> Episode {
    let mut rng = rng_from(seed);
    let sy: Vec<usize> = (0..n_way)
        .flat_map(|w| core::iter::repeat(w).take(k))
        .collect();
    let qy: Vec<usize> = (0..n_way)
        .flat_map(|w| core::iter::repeat(w).take(q))
        .collect();
    episode(
        normal_tensor(&mut rng, &[sy.len(), dim], 1.0),
        sy,
        normal_tensor(&mut rng, &[qy.len(), dim], 1.0),
        qy,
        n_way,
    )
}

fn identity_concepts(dim: usize) -> (GeneratorConfig, ParamNodes) {
    (GeneratorConfig::identity(dim), ParamNodes::new())
}

#[test]
fn matching_hand_case() {
    let cfg = linear(2, 2);
    let phi = store(&[
        ("l0.w", Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap()),
        ("l0.b", Tensor::zeros(&[2])),
    ]);
    let mut g = Graph::new();
    let nodes = phi.constants(&mut g);
    let s = g.constant(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
    let sy = g.constant(Tensor::one_hot(&[0, 1], 2));
    let q = g.constant(Tensor::matrix(&[&[1.0, 0.0]]).unwrap());
    let p = attention_predict(&mut g, &cfg, &nodes, s, sy, q).unwrap();
    let p = eval(&g, p);
    assert!((p.data()[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
    assert!((p.data()[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
}

fn matching_oracle(
    embed: impl Fn(&[f64]) -> Vec<f64>,
    support: &Tensor,
    labels: &[usize],
    query: &Tensor,
    n_way: usize,
) -> Vec<Vec<f64>> {
    let es: Vec<Vec<f64>> = support.rows().map(&embed).collect();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    query
        .rows()
        .map(|qr| {
            let eq = embed(qr);
            let sims: Vec<f64> = es.iter().map(|s| cos(&eq, s)).collect();
            let z: f64 = sims.iter().map(|s| s.exp()).sum();
            let mut out = vec![0.0; n_way];
            for (s, &l) in sims.iter().zip(labels) {
                out[l] += s.exp() / z;
            }
            out
        })
        .collect()
}

#[test]
fn matching_matches_brute_force_and_is_permutation_invariant() {
    let cfg = linear(4, 3);
    let phi = init_params(&cfg, 5);
    let ep = random_episode(11, 4, 5, 2, 3);
    let (gen, gen_nodes) = identity_concepts(4);
    let mcfg = MetaLearnerConfig {
        kind: MetaLearnerKind::Matching,
        learner: cfg.clone(),
        inner_rate: 0.0,
        inner_steps: 1,
    };
    let state = MetaLearnerState {
        config: mcfg.clone(),
        phi: phi.clone(),
        alpha: None,
    };
    let concepts = Concepts {
        config: &gen,
        nodes: &gen_nodes,
    };
    let mut g = Graph::new();
    let bound = state.constants(&mut g);
    let p = matching_predict(&mut g, concepts, &mcfg, &bound, &ep).unwrap();
    let p = eval(&g, p);

    let w = phi.get("l0.w").unwrap().clone();
    let b = phi.get("l0.b").unwrap().clone();
    let embed = |x: &[f64]| -> Vec<f64> {
        (0..3)
            .map(|j| b.data()[j] + (0..4).map(|i| x[i] * w.data()[i * 3 + j]).sum::<f64>())
            .collect()
    };
    let expect = matching_oracle(embed, &ep.support_x, &ep.support_y, &ep.query_x, 5);
    for (row, e) in p.rows().zip(&expect) {
        for (a, b) in row.iter().zip(e) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    let perm: Vec<usize> = (0..ep.support_y.len()).rev().collect();
    let mut shuffled = ep.clone();
    shuffled.support_x = ep.support_x.select_rows(&perm);
    shuffled.support_y = perm.iter().map(|&i| ep.support_y[i]).collect();
    let mut g = Graph::new();
    let bound = state.constants(&mut g);
    let p2 = matching_predict(&mut g, concepts, &mcfg, &bound, &shuffled).unwrap();
    let p2 = eval(&g, p2);
    for (a, b) in p.data().iter().zip(p2.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn one_way_matching_is_certain() {
    let cfg = linear(3, 3);
    let ep = random_episode(3, 3, 1, 2, 4);
    let (gen, gen_nodes) = identity_concepts(3);
    let mcfg = MetaLearnerConfig {
        kind: MetaLearnerKind::Matching,
        learner: cfg.clone(),
        inner_rate: 0.0,
        inner_steps: 1,
    };
    let state = MetaLearnerState::init(mcfg.clone(), 1);
    let mut g = Graph::new();
    let bound = state.constants(&mut g);
    let t = meta_loss(
        &mut g,
        Concepts {
            config: &gen,
            nodes: &gen_nodes,
        },
        &mcfg,
        &bound,
        &ep,
    )
    .unwrap();
    let out = g.eval(&[t.loss, t.prediction]).unwrap();
    assert!(out[0].item().unwrap().abs() < 1e-12);
    assert_eq!(accuracy(&out[1], &ep.query_y), 1.0);
}

#[test]
fn matching_has_no_inner_loop() {
    let mcfg = MetaLearnerConfig {
        kind: MetaLearnerKind::Matching,
        learner: linear(2, 2),
        inner_rate: 0.01,
        inner_steps: 1,
    };
    let state = MetaLearnerState::init(mcfg.clone(), 0);
    let mut g = Graph::new();
    let bound = state.constants(&mut g);
    let x = g.constant(Tensor::zeros(&[2, 2]));
    let y = g.constant(Tensor::one_hot(&[0, 1], 2));
    assert!(matches!(
        inner_adapt(&mut g, &mcfg, &bound, x, y),
        Err(Error::Unsupported(_))
    ));
}

/// One example `x = [1]` of way 0 with zero weights: the support gradient
/// is `dW = [[-0.5, 0.5]]`, `db = [-0.5, 0.5]`.
fn toy(kind: MetaLearnerKind, rate: f64, alpha_w: Option<Tensor>) -> (Tensor, Tensor) {
    let cfg = linear(1, 2);
    let phi = store(&[
        ("l0.w", Tensor::zeros(&[1, 2])),
        ("l0.b", Tensor::zeros(&[2])),
    ]);
    let alpha = alpha_w.map(|w| store(&[("l0.w", w), ("l0.b", Tensor::zeros(&[2]))]));
    let mcfg = MetaLearnerConfig {
        kind,
        learner: cfg,
        inner_rate: rate,
        inner_steps: 1,
    };
    let state = MetaLearnerState {
        config: mcfg.clone(),
        phi,
        alpha,
    };
    let mut g = Graph::new();
    let bound = state.bind(&mut g);
    let x = g.constant(Tensor::matrix(&[&[1.0]]).unwrap());
    let y = g.constant(Tensor::one_hot(&[0], 2));
    let adapted = inner_adapt(&mut g, &mcfg, &bound, x, y).unwrap();
    let out = g.eval(&[adapted["l0.w"], adapted["l0.b"]]).unwrap();
    (out[0].clone(), out[1].clone())
}

#[test]
fn maml_hand_step() {
    let (w, b) = toy(MetaLearnerKind::Maml, 0.01, None);
    assert!((w.data()[0] - 0.005).abs() < 1e-15 && (w.data()[1] + 0.005).abs() < 1e-15);
    assert!((b.data()[0] - 0.005).abs() < 1e-15 && (b.data()[1] + 0.005).abs() < 1e-15);
}

#[test]
fn meta_sgd_rates_are_elementwise() {
    let (w, b) = toy(
        MetaLearnerKind::MetaSgd,
        0.0,
        Some(Tensor::matrix(&[&[0.1, 0.0]]).unwrap()),
    );
    assert!((w.data()[0] - 0.05).abs() < 1e-15);
    assert_eq!(w.data()[1], 0.0);
    assert_eq!(b.data(), &[0.0, 0.0]);
}

/// Moves every entry off zero so no relu sits exactly on its kink.
fn jitter(store: ParamStore, seed: u64) -> ParamStore {
    let mut rng = rng_from(seed);
    let noise: Vec<f64> = store
        .flatten()
        .iter()
        .map(|v| v + 0.1 * crate::rng::standard_normal(&mut rng))
        .collect();
    store.unflatten(&noise).unwrap()
}

fn maml_setup(
    kind: MetaLearnerKind,
    rate: f64,
    steps: usize,
) -> (MetaLearnerState, GeneratorConfig, ParamStore, Episode) {
    let gen = GeneratorConfig::mlp(4, vec![5], 3);
    let theta = jitter(init_params(&gen, 21), 31);
    let mcfg = MetaLearnerConfig {
        kind,
        learner: LearnerConfig {
            input_dim: 3,
            hidden: vec![4],
            output_dim: 3,
            output_relu: false,
        },
        inner_rate: rate,
        inner_steps: steps,
    };
    let mut state = MetaLearnerState::init(mcfg, 22);
    state.phi = jitter(state.phi, 32);
    (state, gen, theta, random_episode(23, 4, 3, 2, 2))
}

#[test]
fn inner_step_follows_numeric_support_gradient() {
    let (state, gen, theta, ep) = maml_setup(MetaLearnerKind::Maml, 0.3, 1);
    let mut g = Graph::new();
    let gen_nodes = theta.constants(&mut g);
    let bound = state.bind(&mut g);
    let sx = g.constant(ep.support_x.clone());
    let sf = generator_forward(&mut g, &gen, &gen_nodes, sx).unwrap();
    let sy = g.constant(ep.support_one_hot());
    let support_loss = learner_loss(&mut g, &state.config.learner, &bound.phi, sf, sy).unwrap();
    let adapted = inner_adapt(&mut g, &state.config, &bound, sf, sy).unwrap();
    for (name, &p) in &bound.phi {
        let numeric = finite_diff(&g, support_loss, p, STEP).unwrap();
        let before = state.phi.get(name).unwrap();
        let expect: Vec<f64> = before
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(v, d)| v - 0.3 * d)
            .collect();
        let got = eval(&g, adapted[name]);
        assert!(
            relative_error(got.data(), &expect) < 1e-8,
            "{name} {:?} {:?} {:?}",
            got.data(),
            expect,
            numeric.data()
        );
    }
}

fn task_loss(
    state: &MetaLearnerState,
    gen: &GeneratorConfig,
    theta: &ParamStore,
    ep: &Episode,
) -> f64 {
    let mut g = Graph::new();
    let gen_nodes = theta.constants(&mut g);
    let bound = state.constants(&mut g);
    let t = meta_loss(
        &mut g,
        Concepts {
            config: gen,
            nodes: &gen_nodes,
        },
        &state.config,
        &bound,
        ep,
    )
    .unwrap();
    eval(&g, t.loss).item().unwrap()
}

#[test]
fn zero_rate_maml_is_the_unadapted_loss() {
    let (state, gen, theta, ep) = maml_setup(MetaLearnerKind::Maml, 0.0, 3);
    let adapted = task_loss(&state, &gen, &theta, &ep);

    let mut g = Graph::new();
    let gen_nodes = theta.constants(&mut g);
    let phi = state.phi.constants(&mut g);
    let qx = g.constant(ep.query_x.clone());
    let qf = generator_forward(&mut g, &gen, &gen_nodes, qx).unwrap();
    let qy = g.constant(ep.query_one_hot());
    let plain = learner_loss(&mut g, &state.config.learner, &phi, qf, qy).unwrap();
    assert_eq!(adapted.to_bits(), eval(&g, plain).item().unwrap().to_bits());
}

#[test]
fn zero_learner_gives_log_n_way() {
    let (mut state, gen, theta, _) = maml_setup(MetaLearnerKind::Maml, 0.0, 1);
    state.config.learner = linear(3, 5);
    state.phi = init_params(&state.config.learner, 0).full_like(0.0);
    let ep = random_episode(4, 4, 5, 1, 3);
    let loss = task_loss(&state, &gen, &theta, &ep);
    assert!((loss - libm::log(5.0)).abs() < 1e-12);
}

/// Outer gradients through the inner loop against central differences of
/// the full task loss, for every parameter group.
fn certify_second_order(kind: MetaLearnerKind, steps: usize) {
    let (state, gen, theta, ep) = maml_setup(kind, 0.1, steps);
    assert!(state.phi.size() + theta.size() + state.alpha.as_ref().map_or(0, |a| a.size()) <= 200);
    let mut g = Graph::new();
    let gen_nodes = theta.bind(&mut g, "generator/");
    let bound = state.bind(&mut g);
    let t = meta_loss(
        &mut g,
        Concepts {
            config: &gen,
            nodes: &gen_nodes,
        },
        &state.config,
        &bound,
        &ep,
    )
    .unwrap();
    let mut wrt: Vec<(String, NodeId)> = Vec::new();
    wrt.extend(
        gen_nodes
            .iter()
            .map(|(n, &id)| (alloc::format!("generator/{n}"), id)),
    );
    wrt.extend(
        bound
            .phi
            .iter()
            .map(|(n, &id)| (alloc::format!("learner/{n}"), id)),
    );
    if let Some(alpha) = &bound.alpha {
        wrt.extend(
            alpha
                .iter()
                .map(|(n, &id)| (alloc::format!("alpha/{n}"), id)),
        );
    }
    let ids: Vec<NodeId> = wrt.iter().map(|(_, id)| *id).collect();
    let grads = g.grad(t.loss, &ids).unwrap();
    let analytic = g.eval(&grads).unwrap();
    for ((name, id), a) in wrt.iter().zip(&analytic) {
        let numeric = finite_diff(&g, t.loss, *id, STEP).unwrap();
        let err = relative_error(a.data(), numeric.data());
        assert!(err < SECOND_ORDER_TOLERANCE, "{name}: {err}");
        assert!(
            a.data().iter().any(|v| *v != 0.0),
            "{name} has an all-zero gradient"
        );
    }
}

#[test]
fn maml_outer_gradient_is_exact() {
    certify_second_order(MetaLearnerKind::Maml, 1);
}

#[test]
fn maml_multi_step_outer_gradient_is_exact() {
    certify_second_order(MetaLearnerKind::Maml, 2);
}

#[test]
fn meta_sgd_outer_gradient_is_exact() {
    certify_second_order(MetaLearnerKind::MetaSgd, 1);
}

#[test]
fn matching_outer_gradient_is_exact() {
    let (mut state, gen, theta, ep) = maml_setup(MetaLearnerKind::Matching, 0.0, 1);
    state.config.learner.output_dim = 4;
    state.phi = jitter(init_params(&state.config.learner, 2), 3);
    let mut g = Graph::new();
    let gen_nodes = theta.bind(&mut g, "generator/");
    let bound = state.bind(&mut g);
    let t = meta_loss(
        &mut g,
        Concepts {
            config: &gen,
            nodes: &gen_nodes,
        },
        &state.config,
        &bound,
        &ep,
    )
    .unwrap();
    let ids: Vec<NodeId> = gen_nodes
        .values()
        .chain(bound.phi.values())
        .copied()
        .collect();
    let grads = g.grad(t.loss, &ids).unwrap();
    let analytic = g.eval(&grads).unwrap();
    for (&id, a) in ids.iter().zip(&analytic) {
        let numeric = finite_diff(&g, t.loss, id, STEP).unwrap();
        assert!(relative_error(a.data(), numeric.data()) < 1e-6);
    }
}

#[test]
fn accuracy_breaks_ties_toward_lowest_way() {
    let p = Tensor::matrix(&[&[0.5, 0.5], &[0.2, 0.8], &[0.9, 0.1]]).unwrap();
    assert!((accuracy(&p, &[0, 1, 1]) - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn config_validation() {
    let mut cfg = MetaLearnerConfig {
        kind: MetaLearnerKind::Maml,
        learner: linear(3, 5),
        inner_rate: 0.01,
        inner_steps: 1,
    };
    assert!(cfg.validate(5).is_ok());
    assert!(cfg.validate(4).is_err());
    cfg.inner_steps = 0;
    assert!(cfg.validate(5).is_err());
    cfg.inner_steps = 1;
    cfg.inner_rate = -1.0;
    assert!(cfg.validate(5).is_err());
    let state = MetaLearnerState::init(
        MetaLearnerConfig {
            kind: MetaLearnerKind::MetaSgd,
            inner_rate: 0.01,
            ..cfg
        },
        0,
    );
    assert!(state.validate().is_ok());
    assert!(state
        .alpha
        .as_ref()
        .unwrap()
        .flatten()
        .iter()
        .all(|&a| a == 0.01));
}
