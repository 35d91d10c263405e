//! Resumable grid search over optimizer, learning rate, batch size, epochs
//! and L2 coefficient.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{train, Backbone, Model, ModelConfig, OptimizerKind, TrainConfig};
use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, EvalReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub optimizers: Vec<OptimizerKind>,
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub epochs: Vec<usize>,
    pub l2_lambdas: Vec<f64>,
    #[serde(default)]
    pub rng_seed: u64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            optimizers: OptimizerKind::ALL.to_vec(),
            learning_rates: vec![1e-2, 1e-3, 1e-4, 1e-5],
            batch_sizes: vec![4, 32, 64],
            epochs: vec![30, 60, 120],
            l2_lambdas: vec![1e-1, 1e-2, 1e-3, 1e-4],
            rng_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub index: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub l2_lambda: f64,
}

impl GridSpec {
    pub fn size(&self) -> usize {
        self.optimizers.len()
            * self.learning_rates.len()
            * self.batch_sizes.len()
            * self.epochs.len()
            * self.l2_lambdas.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.size() == 0 {
            return Err(Error::Config("every grid axis needs at least one value".into()));
        }
        if self.learning_rates.iter().any(|&lr| !(lr.is_finite() && lr > 0.0)) {
            return Err(Error::Range("learning rates must be positive".into()));
        }
        if self.batch_sizes.contains(&0) || self.epochs.contains(&0) {
            return Err(Error::Range("batch sizes and epochs must be positive".into()));
        }
        if self.l2_lambdas.iter().any(|l| !(0.0..1.0).contains(l)) {
            return Err(Error::Range("l2 coefficients must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Cartesian product in axis order (optimizer outermost, L2 innermost).
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::with_capacity(self.size());
        for &optimizer in &self.optimizers {
            for &learning_rate in &self.learning_rates {
                for &batch_size in &self.batch_sizes {
                    for &epochs in &self.epochs {
                        for &l2_lambda in &self.l2_lambdas {
                            out.push(GridCell {
                                index: out.len(),
                                optimizer,
                                learning_rate,
                                batch_size,
                                epochs,
                                l2_lambda,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    fn cell_seed(&self, index: usize) -> u64 {
        self.rng_seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }

    fn train_config(&self, cell: &GridCell) -> TrainConfig {
        TrainConfig {
            optimizer: cell.optimizer,
            learning_rate: cell.learning_rate,
            batch_size: cell.batch_size,
            epochs: cell.epochs,
            rng_seed: self.cell_seed(cell.index),
            deterministic: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Completed {
        validation: EvalReport,
        final_train_accuracy: f64,
        /// Final train accuracy minus final validation accuracy.
        overfitting_gap: f64,
    },
    Failed {
        error_code: String,
        message: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: GridCell,
    pub train_cfg: TrainConfig,
    pub outcome: CellOutcome,
    pub wall_time_secs: f64,
}

impl CellResult {
    pub fn validation(&self) -> Option<&EvalReport> {
        match &self.outcome {
            CellOutcome::Completed { validation, .. } => Some(validation),
            CellOutcome::Failed { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub grid_size: usize,
    /// Ordered by cell index.
    pub cells: Vec<CellResult>,
    /// Optimizer to index into `cells`.
    pub best_per_optimizer: BTreeMap<OptimizerKind, usize>,
    /// False when the run stopped early via `max_new_cells`.
    pub complete: bool,
}

impl SweepResult {
    pub fn best(&self, optimizer: OptimizerKind) -> Option<&CellResult> {
        self.best_per_optimizer.get(&optimizer).map(|&i| &self.cells[i])
    }
}

#[derive(Clone, Debug, Default)]
pub struct SweepOptions {
    /// Completed cells are written here as `cells/<hash>.json` and skipped
    /// on a rerun.
    pub state_dir: Option<PathBuf>,
    /// Parallel cells; 0 means one per available core.
    pub workers: usize,
    /// Stop after this many newly trained cells (simulates interruption).
    pub max_new_cells: Option<usize>,
}

/// Stable identity of a cell: its hyperparameters, the grid seed and the
/// model configuration.
pub fn cell_hash(grid: &GridSpec, cell: &GridCell, model_cfg: &ModelConfig) -> String {
    let key = serde_json::json!({
        "cell": cell,
        "rng_seed": grid.rng_seed,
        "model_config": model_cfg,
    });
    let digest = Sha256::digest(key.to_string().as_bytes());
    hex::encode(&digest[..8])
}

fn better(a: &CellResult, b: &CellResult) -> bool {
    let (va, vb) = match (a.validation(), b.validation()) {
        (Some(x), Some(y)) => (x.accuracy, y.accuracy),
        (Some(_), None) => return true,
        _ => return false,
    };
    match va.total_cmp(&vb) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => (a.cell.learning_rate, a.cell.batch_size, a.cell.index)
            < (b.cell.learning_rate, b.cell.batch_size, b.cell.index),
    }
}

/// Best completed cell per optimizer: highest validation accuracy, then
/// lower learning rate, then smaller batch.
pub fn select_best(cells: &[CellResult]) -> BTreeMap<OptimizerKind, usize> {
    let mut best: BTreeMap<OptimizerKind, usize> = BTreeMap::new();
    for (i, c) in cells.iter().enumerate() {
        if c.validation().is_none() {
            continue;
        }
        match best.get(&c.cell.optimizer) {
            Some(&j) if !better(c, &cells[j]) => {}
            _ => {
                best.insert(c.cell.optimizer, i);
            }
        }
    }
    best
}

fn run_cell(
    grid: &GridSpec,
    cell: &GridCell,
    model_cfg: &ModelConfig,
    backbone: &Arc<Backbone>,
    manifest: &DatasetManifest,
) -> Result<CellResult> {
    let started = Instant::now();
    let cfg = ModelConfig {
        l2_lambda: cell.l2_lambda,
        ..model_cfg.clone()
    };
    let train_cfg = grid.train_config(cell);
    let train_set = manifest.split_samples(Split::Train);
    let val = manifest.split_samples(Split::Validation);
    let model = Model::with_backbone(cfg, Arc::clone(backbone), grid.cell_seed(cell.index))?;
    let outcome = match train(model, &train_set, &train_cfg, &val) {
        Ok((model, report)) => {
            let validation = evaluate_model(&model, &val, 0.5)?;
            CellOutcome::Completed {
                overfitting_gap: report.final_train_accuracy - validation.accuracy,
                final_train_accuracy: report.final_train_accuracy,
                validation,
            }
        }
        Err(e @ (Error::Divergence { .. } | Error::Range(_))) => {
            tracing::warn!(cell = cell.index, error = %e, "cell failed");
            CellOutcome::Failed {
                error_code: e.code().to_string(),
                message: e.to_string(),
            }
        }
        Err(e) => return Err(e),
    };
    Ok(CellResult {
        cell: cell.clone(),
        train_cfg,
        outcome,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

pub fn run_sweep(
    grid: &GridSpec,
    manifest: &DatasetManifest,
    model_cfg: &ModelConfig,
    opts: &SweepOptions,
) -> Result<SweepResult> {
    grid.validate()?;
    model_cfg.validate()?;
    for split in [Split::Train, Split::Validation] {
        if manifest.split(split).next().is_none() {
            return Err(Error::EmptyDataset);
        }
        if let Some(s) = manifest.split(split).find(|s| s.training_label().is_none()) {
            return Err(Error::MissingLabel(s.id.clone()));
        }
    }
    let cells = grid.cells();
    tracing::info!(cells = cells.len(), "starting sweep");

    let cell_dir = opts.state_dir.as_ref().map(|d| d.join("cells"));
    if let Some(d) = &cell_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let path_for = |c: &GridCell| {
        cell_dir
            .as_ref()
            .map(|d| d.join(format!("{}.json", cell_hash(grid, c, model_cfg))))
    };

    let mut done: Vec<Option<CellResult>> = vec![None; cells.len()];
    for (slot, cell) in done.iter_mut().zip(&cells) {
        if let Some(p) = path_for(cell).filter(|p| p.is_file()) {
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let r: CellResult = serde_json::from_slice(&bytes)
                .map_err(|e| Error::Checksum(format!("{}: unreadable cell result: {e}", p.display())))?;
            *slot = Some(r);
        }
    }
    let mut pending: Vec<&GridCell> = cells.iter().filter(|c| done[c.index].is_none()).collect();
    let complete = opts.max_new_cells.is_none_or(|n| n >= pending.len());
    if let Some(n) = opts.max_new_cells {
        pending.truncate(n);
    }

    let backbone = Arc::new(Backbone::load(&model_cfg.backbone)?);
    let writer = Mutex::new(());
    let run = || -> Result<Vec<CellResult>> {
        pending
            .par_iter()
            .map(|cell| {
                let result = run_cell(grid, cell, model_cfg, &backbone, manifest)?;
                if let Some(p) = path_for(cell) {
                    let json = serde_json::to_vec_pretty(&result)
                        .map_err(|e| Error::json("cell result", e))?;
                    let _guard = writer.lock().expect("writer lock");
                    let tmp = p.with_extension("tmp");
                    fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
                    fs::rename(&tmp, &p).map_err(|e| Error::io(&p, e))?;
                }
                Ok(result)
            })
            .collect()
    };
    let fresh = if opts.workers == 0 {
        run()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
            .install(run)?
    };
    for r in fresh {
        let i = r.cell.index;
        done[i] = Some(r);
    }
    let cells: Vec<CellResult> = done.into_iter().flatten().collect();
    Ok(SweepResult {
        grid_size: grid.size(),
        best_per_optimizer: select_best(&cells),
        cells,
        complete,
    })
}

pub const REPORT_COLUMNS: [&str; 13] = [
    "optimizer", "lr", "batch", "epochs", "tn", "fp", "fn", "tp", "accuracy", "precision", "recall",
    "f1", "auc",
];

fn report_rows(result: &SweepResult) -> Vec<(&CellResult, &EvalReport)> {
    result
        .best_per_optimizer
        .values()
        .map(|&i| &result.cells[i])
        .filter_map(|c| c.validation().map(|v| (c, v)))
        .collect()
}

/// CSV of the best cell per optimizer. Precision, recall and F1 are for the
/// positive class.
pub fn render_csv(result: &SweepResult) -> Result<String> {
    let rows = report_rows(result);
    if rows.is_empty() {
        return Err(Error::EmptyResult);
    }
    let mut out = REPORT_COLUMNS.join(",");
    out.push('\n');
    for (c, v) in rows {
        let p = v.positive();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            c.cell.optimizer,
            c.cell.learning_rate,
            c.cell.batch_size,
            c.cell.epochs,
            v.cm.tn,
            v.cm.fp,
            v.cm.fn_,
            v.cm.tp,
            v.accuracy,
            p.precision,
            p.recall,
            p.f1,
            v.auc.map_or_else(String::new, |a| a.to_string()),
        );
    }
    Ok(out)
}

/// Human-readable table: two lines per optimizer, one per confusion row.
pub fn render_table(result: &SweepResult) -> Result<String> {
    let rows = report_rows(result);
    if rows.is_empty() {
        return Err(Error::EmptyResult);
    }
    let mut out = format!(
        "{:<20} {:>5} {:>6}  {:>5} {:>5}  {:>8} {:>9} {:>6} {:>8} {:>6}  {:>7}\n",
        "optimiser", "batch", "epochs", "pred0", "pred1", "accuracy", "precision", "recall", "f1-score",
        "auc", "l2"
    );
    for (c, v) in rows {
        let p = v.positive();
        let auc = v.auc.map_or_else(|| "-".into(), |a| format!("{a:.3}"));
        let name = format!("{}, lr={}", c.cell.optimizer, c.cell.learning_rate);
        let _ = writeln!(
            out,
            "{:<20} {:>5} {:>6}  {:>5} {:>5}  {:>8.3} {:>9.3} {:>6.3} {:>8.3} {:>6}  {:>7}",
            name, c.cell.batch_size, c.cell.epochs, v.cm.tn, v.cm.fp, v.accuracy, p.precision,
            p.recall, p.f1, auc, c.cell.l2_lambda
        );
        let _ = writeln!(out, "{:<20} {:>5} {:>6}  {:>5} {:>5}", "", "", "", v.cm.fn_, v.cm.tp);
    }
    Ok(out)
}

/// Writes the best-per-optimizer CSV to `path`, the table next to it with a
/// `.txt` extension, and every cell (including failures and the overfitting
/// gap) to `<stem>_cells.csv`.
pub fn render_report(result: &SweepResult, path: &Path) -> Result<()> {
    let csv = render_csv(result)?;
    let table = render_table(result)?;
    fs::write(path, csv).map_err(|e| Error::io(path, e))?;
    let txt = path.with_extension("txt");
    fs::write(&txt, table).map_err(|e| Error::io(&txt, e))?;

    let mut all = String::from(
        "index,optimizer,lr,batch,epochs,l2,status,val_accuracy,train_accuracy,overfitting_gap,error\n",
    );
    for c in &result.cells {
        let g = &c.cell;
        let tail = match &c.outcome {
            CellOutcome::Completed {
                validation,
                final_train_accuracy,
                overfitting_gap,
            } => format!(
                "completed,{},{},{},",
                validation.accuracy, final_train_accuracy, overfitting_gap
            ),
            CellOutcome::Failed { error_code, .. } => format!("failed,,,,{error_code}"),
        };
        let _ = writeln!(
            all,
            "{},{},{},{},{},{},{}",
            g.index, g.optimizer, g.learning_rate, g.batch_size, g.epochs, g.l2_lambda, tail
        );
    }
    let stem = path.file_stem().map_or_else(|| "report".into(), |s| s.to_string_lossy().into_owned());
    let cells_path = path.with_file_name(format!("{stem}_cells.csv"));
    fs::write(&cells_path, all).map_err(|e| Error::io(&cells_path, e))
}
