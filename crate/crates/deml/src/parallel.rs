//! Evaluation spread over worker threads. Every task or run owns its seed,
//! so results match serial execution exactly for any worker count.

use std::thread;

use deml_core::episodes::{EpisodeShape, LabeledDataset};
use deml_core::eval::{
    knn_task_accuracy, sweep_run, task_accuracy, EvalReport, SweepEval, SweepRow,
};
use deml_core::models::{GeneratorConfig, ParamStore};
use deml_core::trainer::{Model, TrainConfig, TrainData};
use deml_core::{Error, Result};

/// `f(0..n)` on `workers` threads (worker `w` takes `w, w + workers, ...`),
/// returned in index order. The error of the lowest failing index wins.
pub fn map_indexed<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(&f).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                s.spawn(move || {
                    (w..n)
                        .step_by(workers)
                        .map(|i| (i, f(i)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("evaluation worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|r| r.expect("every index evaluated"))
        .collect()
}

pub fn meta_test(
    model: &Model,
    dataset: &LabeledDataset,
    classes: &[u32],
    shape: EpisodeShape,
    num_tasks: usize,
    seed: u64,
    workers: usize,
) -> Result<EvalReport> {
    if num_tasks == 0 {
        return Err(Error::Empty("evaluation tasks"));
    }
    let accs = map_indexed(num_tasks, workers, |i| {
        task_accuracy(model, dataset, classes, shape, seed, i)
    })?;
    EvalReport::from_accuracies(accs)
}

#[allow(clippy::too_many_arguments)]
pub fn knn_test(
    config: &GeneratorConfig,
    store: &ParamStore,
    dataset: &LabeledDataset,
    classes: &[u32],
    shape: EpisodeShape,
    num_tasks: usize,
    seed: u64,
    workers: usize,
) -> Result<EvalReport> {
    if num_tasks == 0 {
        return Err(Error::Empty("evaluation tasks"));
    }
    let accs = map_indexed(num_tasks, workers, |i| {
        knn_task_accuracy(config, store, dataset, classes, shape, seed, i)
    })?;
    EvalReport::from_accuracies(accs)
}

/// The lambda sweep with one training run per worker slot.
pub fn lambda_sweep(
    base: &TrainConfig,
    lambdas: &[f64],
    data: &TrainData<'_>,
    eval: &SweepEval<'_>,
    workers: usize,
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(Error::Empty("lambda grid"));
    }
    map_indexed(lambdas.len(), workers, |i| {
        sweep_run(base, i, lambdas[i], data, eval)
    })
}
