//! CSV outputs: training logs, evaluation results and lambda sweeps.

use std::io::Write;
use std::path::Path;

use deml_core::eval::{EvalReport, SweepRow};
use deml_core::trainer::TrainLog;
use serde::Serialize;

#[derive(Debug, Serialize)]
struct LogRecord {
    iter: usize,
    meta_loss: Option<f64>,
    disc_loss: Option<f64>,
    val_acc: Option<f64>,
}

/// One line of a results file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub method: String,
    pub dataset: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub mean_acc: f64,
    pub ci95: f64,
    pub num_tasks: usize,
}

impl ResultRow {
    pub fn new(
        method: &str,
        dataset: &str,
        n_way: usize,
        k_shot: usize,
        report: &EvalReport,
    ) -> Self {
        Self {
            method: method.into(),
            dataset: dataset.into(),
            n_way,
            k_shot,
            mean_acc: report.mean_accuracy,
            ci95: report.ci95_halfwidth,
            num_tasks: report.num_tasks,
        }
    }
}

#[derive(Debug, Serialize)]
struct SweepRecord {
    lambda: f64,
    fewshot_acc: f64,
    fewshot_ci: f64,
    disc_acc: f64,
}

fn write_all<W: Write, T: Serialize>(
    w: W,
    rows: impl IntoIterator<Item = T>,
    header: &[&str],
) -> csv::Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(header)?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// `iter,meta_loss,disc_loss,val_acc`; absent values are blank.
pub fn write_log<W: Write>(w: W, log: &TrainLog) -> csv::Result<()> {
    let rows = log.rows.iter().map(|r| LogRecord {
        iter: r.iter,
        meta_loss: r.meta_loss,
        disc_loss: r.disc_loss,
        val_acc: r.val_acc,
    });
    write_all(w, rows, &["iter", "meta_loss", "disc_loss", "val_acc"])
}

pub fn write_results<W: Write>(w: W, rows: &[ResultRow]) -> csv::Result<()> {
    write_all(
        w,
        rows,
        &[
            "method",
            "dataset",
            "n_way",
            "k_shot",
            "mean_acc",
            "ci95",
            "num_tasks",
        ],
    )
}

pub fn write_sweep<W: Write>(w: W, rows: &[SweepRow]) -> csv::Result<()> {
    let rows = rows.iter().map(|r| SweepRecord {
        lambda: r.lambda,
        fewshot_acc: r.fewshot_acc,
        fewshot_ci: r.fewshot_ci,
        disc_acc: r.disc_acc,
    });
    write_all(
        w,
        rows,
        &["lambda", "fewshot_acc", "fewshot_ci", "disc_acc"],
    )
}

pub fn to_file(
    path: &Path,
    write: impl FnOnce(std::fs::File) -> csv::Result<()>,
) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write(std::fs::File::create(path)?)?;
    Ok(())
}
