//! Finite-difference certification of every differentiable primitive and of
//! the model forwards.
//!
//! Each case maps random parameter tensors to an output node; the checked
//! scalar is `sum(output * W)` for a fixed random `W`. First order compares
//! `grad` with central differences; second order differentiates
//! `sum(grad * W2)` again and compares against central differences of the
//! first-order gradient expression.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::autodiff::{finite_diff, relative_error, Graph, NodeId};
use crate::error::Result;
use crate::rng::{rng_from, standard_normal, Rng};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const FIRST_ORDER_TOLERANCE: f64 = 1e-6;
pub const SECOND_ORDER_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub first_order: f64,
    pub second_order: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.first_order < FIRST_ORDER_TOLERANCE && self.second_order < SECOND_ORDER_TOLERANCE
    }
}

type Build = fn(&mut Graph, &[NodeId]) -> Result<NodeId>;

pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor>,
    build: Build,
}

impl Case {
    pub fn new(name: &str, inputs: Vec<Tensor>, build: Build) -> Self {
        Self {
            name: name.to_string(),
            inputs,
            build,
        }
    }
}

pub fn normal_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * standard_normal(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Random values with magnitude in `[lo, hi]`; signed unless `positive`.
pub fn away_from_zero(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64, positive: bool) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if positive || rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn weighted_sum(g: &mut Graph, x: NodeId, rng: &mut Rng) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let w = g.constant(normal_tensor(rng, &shape, 1.0));
    let p = g.mul(x, w)?;
    g.sum_all(p)
}

fn max_error(g: &Graph, loss: NodeId, params: &[NodeId], grads: &[NodeId]) -> Result<f64> {
    let analytic = g.eval(grads)?;
    let mut worst: f64 = 0.0;
    for (&p, a) in params.iter().zip(&analytic) {
        let numeric = finite_diff(g, loss, p, STEP)?;
        worst = worst.max(relative_error(a.data(), numeric.data()));
    }
    Ok(worst)
}

pub fn run_case(case: &Case, seed: u64) -> Result<CheckResult> {
    let mut rng = rng_from(seed);
    let mut g = Graph::new();
    let params: Vec<NodeId> = case
        .inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.parameter_with(&alloc::format!("x{i}"), t.clone()))
        .collect();
    let out = (case.build)(&mut g, &params)?;
    let loss = weighted_sum(&mut g, out, &mut rng)?;
    let grads = g.grad(loss, &params)?;
    let first_order = max_error(&g, loss, &params, &grads)?;

    let mut terms = Vec::with_capacity(grads.len());
    for &gr in &grads {
        terms.push(weighted_sum(&mut g, gr, &mut rng)?);
    }
    let mut second_loss = terms[0];
    for &t in &terms[1..] {
        second_loss = g.add(second_loss, t)?;
    }
    let second = g.grad(second_loss, &params)?;
    let second_order = max_error(&g, second_loss, &params, &second)?;
    Ok(CheckResult {
        name: case.name.clone(),
        first_order,
        second_order,
    })
}

/// One case per differentiable primitive (plus `conv2d`).
pub fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut rng = rng_from(seed);
    let r = &mut rng;
    vec![
        Case::new(
            "add",
            vec![
                normal_tensor(r, &[3, 4], 1.0),
                normal_tensor(r, &[3, 4], 1.0),
            ],
            |g, p| g.add(p[0], p[1]),
        ),
        Case::new(
            "sub",
            vec![
                normal_tensor(r, &[3, 4], 1.0),
                normal_tensor(r, &[3, 4], 1.0),
            ],
            |g, p| g.sub(p[0], p[1]),
        ),
        Case::new(
            "mul",
            vec![
                normal_tensor(r, &[3, 4], 1.0),
                normal_tensor(r, &[3, 4], 1.0),
            ],
            |g, p| g.mul(p[0], p[1]),
        ),
        Case::new(
            "div",
            vec![
                normal_tensor(r, &[3, 4], 1.0),
                away_from_zero(r, &[3, 4], 0.5, 2.0, false),
            ],
            |g, p| g.div(p[0], p[1]),
        ),
        Case::new(
            "matmul",
            vec![
                normal_tensor(r, &[3, 4], 1.0),
                normal_tensor(r, &[4, 2], 1.0),
            ],
            |g, p| g.matmul(p[0], p[1]),
        ),
        Case::new(
            "transpose",
            vec![normal_tensor(r, &[3, 4, 2], 1.0)],
            |g, p| g.transpose(p[0]),
        ),
        Case::new("sum", vec![normal_tensor(r, &[3, 4, 2], 1.0)], |g, p| {
            g.sum(p[0], 1)
        }),
        Case::new("mean", vec![normal_tensor(r, &[3, 4, 2], 1.0)], |g, p| {
            g.mean(p[0], 0)
        }),
        Case::new("broadcast", vec![normal_tensor(r, &[4, 1], 1.0)], |g, p| {
            g.broadcast(p[0], &[3, 4, 5])
        }),
        Case::new("reshape", vec![normal_tensor(r, &[3, 4], 1.0)], |g, p| {
            g.reshape(p[0], &[2, 6])
        }),
        Case::new(
            "concat",
            vec![
                normal_tensor(r, &[2, 3], 1.0),
                normal_tensor(r, &[2, 2], 1.0),
            ],
            |g, p| g.concat(&[p[0], p[1]], 1),
        ),
        Case::new("slice", vec![normal_tensor(r, &[3, 4], 1.0)], |g, p| {
            g.slice(p[0], 1, 1, 2)
        }),
        Case::new(
            "relu",
            vec![away_from_zero(r, &[3, 4], 0.1, 2.0, false)],
            |g, p| {
                // Square so the second derivative is not identically zero.
                let y = g.relu(p[0])?;
                g.mul(y, y)
            },
        ),
        Case::new("exp", vec![normal_tensor(r, &[3, 4], 1.0)], |g, p| {
            g.exp(p[0])
        }),
        Case::new(
            "log",
            vec![away_from_zero(r, &[3, 4], 0.5, 2.0, true)],
            |g, p| g.log(p[0]),
        ),
        Case::new(
            "sqrt",
            vec![away_from_zero(r, &[3, 4], 0.5, 2.0, true)],
            |g, p| g.sqrt(p[0]),
        ),
        Case::new(
            "clamp_min",
            vec![away_from_zero(r, &[3, 4], 0.1, 2.0, false)],
            |g, p| {
                let y = g.clamp_min(p[0], 0.0)?;
                g.mul(y, y)
            },
        ),
        Case::new("softmax", vec![normal_tensor(r, &[3, 4], 1.0)], |g, p| {
            g.softmax(p[0], 1)
        }),
        Case::new(
            "softmax_axis0",
            vec![normal_tensor(r, &[3, 4, 2], 1.0)],
            |g, p| g.softmax(p[0], 0),
        ),
        Case::new(
            "cross_entropy_with_logits",
            vec![normal_tensor(r, &[4, 5], 1.0)],
            |g, p| {
                let targets = g.constant(Tensor::one_hot(&[0, 3, 1, 4], 5));
                g.cross_entropy_with_logits(p[0], targets)
            },
        ),
        Case::new(
            "cosine_similarity",
            vec![
                normal_tensor(r, &[3, 4], 1.0),
                normal_tensor(r, &[5, 4], 1.0),
            ],
            |g, p| g.cosine_similarity(p[0], p[1]),
        ),
        Case::new(
            "row_inv_norm",
            vec![normal_tensor(r, &[3, 4], 1.0)],
            |g, p| g.row_inv_norm(p[0]),
        ),
        Case::new(
            "im2col",
            vec![normal_tensor(r, &[2, 2, 4, 4], 1.0)],
            |g, p| {
                let c = g.im2col(p[0], 2, 3)?;
                g.mul(c, c)
            },
        ),
        Case::new("col2im", vec![normal_tensor(r, &[12, 12], 1.0)], |g, p| {
            let x = g.col2im(p[0], &[2, 2, 4, 4], 2, 3)?;
            g.mul(x, x)
        }),
        Case::new(
            "conv2d",
            vec![
                normal_tensor(r, &[2, 2, 5, 5], 1.0),
                normal_tensor(r, &[3, 2, 3, 3], 0.5),
            ],
            |g, p| g.conv2d(p[0], p[1]),
        ),
    ]
}

fn nodes(names: &[&str], ids: &[NodeId]) -> crate::models::ParamNodes {
    names
        .iter()
        .zip(ids)
        .map(|(n, &id)| (n.to_string(), id))
        .collect()
}

/// One case per network forward: both generator kinds, the discriminator
/// and a two-layer learner. Input batches are parameters too.
pub fn model_cases(seed: u64) -> Vec<Case> {
    use crate::models::{
        discriminator_forward, generator_forward, learner_forward, DiscriminatorConfig,
        GeneratorConfig, GeneratorKind, LearnerConfig,
    };
    let mut rng = rng_from(seed);
    let r = &mut rng;
    vec![
        Case::new(
            "generator_mlp",
            vec![
                normal_tensor(r, &[4, 6], 1.0),
                normal_tensor(r, &[6, 5], 0.5),
                away_from_zero(r, &[5], 0.1, 0.5, false),
                normal_tensor(r, &[5, 3], 0.5),
                away_from_zero(r, &[3], 0.1, 0.5, false),
            ],
            |g, p| {
                let cfg = GeneratorConfig::mlp(6, vec![5], 3);
                generator_forward(
                    g,
                    &cfg,
                    &nodes(&["l0.w", "l0.b", "l1.w", "l1.b"], &p[1..]),
                    p[0],
                )
            },
        ),
        Case::new(
            "generator_small_conv",
            vec![
                normal_tensor(r, &[2, 25], 1.0),
                normal_tensor(r, &[2, 1, 3, 3], 0.5),
                away_from_zero(r, &[2], 0.1, 0.5, false),
                normal_tensor(r, &[18, 4], 0.5),
                away_from_zero(r, &[4], 0.1, 0.5, false),
            ],
            |g, p| {
                let cfg = GeneratorConfig {
                    input_dim: 25,
                    feature_dim: 4,
                    kind: GeneratorKind::SmallConv {
                        height: 5,
                        width: 5,
                        channels: vec![2],
                        kernel: 3,
                    },
                    output_relu: true,
                };
                generator_forward(
                    g,
                    &cfg,
                    &nodes(&["c0.w", "c0.b", "l0.w", "l0.b"], &p[1..]),
                    p[0],
                )
            },
        ),
        Case::new(
            "discriminator",
            vec![
                normal_tensor(r, &[5, 4], 1.0),
                normal_tensor(r, &[4, 7], 0.5),
                normal_tensor(r, &[7], 0.5),
            ],
            |g, p| {
                let cfg = DiscriminatorConfig {
                    feature_dim: 4,
                    classes: 7,
                };
                discriminator_forward(g, &cfg, &nodes(&["w", "b"], &p[1..]), p[0])
            },
        ),
        Case::new(
            "learner",
            vec![
                normal_tensor(r, &[3, 4], 1.0),
                normal_tensor(r, &[4, 6], 0.5),
                away_from_zero(r, &[6], 0.1, 0.5, false),
                normal_tensor(r, &[6, 5], 0.5),
                normal_tensor(r, &[5], 0.5),
            ],
            |g, p| {
                let cfg = LearnerConfig {
                    input_dim: 4,
                    hidden: vec![6],
                    output_dim: 5,
                    output_relu: false,
                };
                learner_forward(
                    g,
                    &cfg,
                    &nodes(&["l0.w", "l0.b", "l1.w", "l1.b"], &p[1..]),
                    p[0],
                )
            },
        ),
    ]
}

pub fn run_cases(cases: &[Case], seed: u64) -> Result<Vec<CheckResult>> {
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| run_case(c, crate::rng::derive_seed(seed, i as u64)))
        .collect()
}

/// Relative error of one parameter group's outer meta-gradient.
#[derive(Debug, Clone)]
pub struct OuterCheck {
    pub name: String,
    pub params: usize,
    pub error: f64,
}

impl OuterCheck {
    pub fn passed(&self) -> bool {
        self.error < SECOND_ORDER_TOLERANCE
    }
}

fn jittered(store: crate::models::ParamStore, rng: &mut Rng) -> Result<crate::models::ParamStore> {
    let values: Vec<f64> = store
        .flatten()
        .iter()
        .map(|v| v + 0.1 * standard_normal(rng))
        .collect();
    store.unflatten(&values)
}

/// Differentiates a tiny meta-learner's query loss through its inner
/// adaptation and compares every parameter group (generator, learner,
/// per-parameter rates) with central differences of the scalar loss.
/// Parameters are moved off zero so no relu sits on its kink.
pub fn outer_gradient_checks(
    kind: crate::metalearners::MetaLearnerKind,
    inner_steps: usize,
    seed: u64,
) -> Result<Vec<OuterCheck>> {
    use crate::episodes::Episode;
    use crate::metalearners::{meta_loss, Concepts, MetaLearnerConfig, MetaLearnerState};
    use crate::models::{init_params, GeneratorConfig};

    let mut rng = rng_from(seed);
    let generator = GeneratorConfig::mlp(4, vec![5], 3);
    let theta = jittered(
        init_params(&generator, crate::rng::derive_seed(seed, 1)),
        &mut rng,
    )?;
    let config = MetaLearnerConfig {
        kind,
        learner: crate::models::LearnerConfig {
            input_dim: 3,
            hidden: vec![4],
            output_dim: 3,
            output_relu: false,
        },
        inner_rate: 0.1,
        inner_steps,
    };
    let mut state = MetaLearnerState::init(config, crate::rng::derive_seed(seed, 2));
    state.phi = jittered(state.phi, &mut rng)?;
    let (n_way, k, q) = (3, 2, 2);
    let support_y: Vec<usize> = (0..n_way)
        .flat_map(|w| core::iter::repeat_n(w, k))
        .collect();
    let query_y: Vec<usize> = (0..n_way)
        .flat_map(|w| core::iter::repeat_n(w, q))
        .collect();
    let episode = Episode {
        support_x: normal_tensor(&mut rng, &[n_way * k, 4], 1.0),
        query_x: normal_tensor(&mut rng, &[n_way * q, 4], 1.0),
        support_index: (0..n_way * k).collect(),
        query_index: (n_way * k..n_way * (k + q)).collect(),
        way_map: (0..n_way as u32).collect(),
        support_y,
        query_y,
    };

    let mut g = Graph::new();
    let gen_nodes = theta.bind(&mut g, "generator/");
    let bound = state.bind(&mut g);
    let concepts = Concepts {
        config: &generator,
        nodes: &gen_nodes,
    };
    let task = meta_loss(&mut g, concepts, &state.config, &bound, &episode)?;
    let mut groups: Vec<(&str, Vec<NodeId>)> = vec![
        ("generator", gen_nodes.values().copied().collect()),
        ("learner", bound.phi.values().copied().collect()),
    ];
    if let Some(alpha) = &bound.alpha {
        groups.push(("alpha", alpha.values().copied().collect()));
    }
    let mut out = Vec::new();
    for (name, ids) in groups {
        let grads = g.grad(task.loss, &ids)?;
        let analytic = g.eval(&grads)?;
        let (mut a_all, mut n_all, mut params) = (Vec::new(), Vec::new(), 0);
        for (&id, a) in ids.iter().zip(&analytic) {
            let numeric = finite_diff(&g, task.loss, id, STEP)?;
            a_all.extend_from_slice(a.data());
            n_all.extend_from_slice(numeric.data());
            params += a.len();
        }
        out.push(OuterCheck {
            name: alloc::format!("{}/{name}", kind.name()),
            params,
            error: relative_error(&a_all, &n_all),
        });
    }
    Ok(out)
}
