use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use defectlab_core::active_learning::{
    history_stats, labels_to_target, resume_session, run_with_annotator, save_session,
    session_model, ALConfig, ALSessionState, OracleAnnotator, SessionStatus, StopRule, TimestampMode,
};
use defectlab_core::autolabel::{autolabel, export_labeled};
use defectlab_core::classifier::{
    build_model, load_checkpoint, save_checkpoint, train, ModelConfig, TrainConfig,
};
use defectlab_core::dataset::{load_manifest, save_manifest, scan_directory, DatasetManifest, Split};
use defectlab_core::metrics::evaluate_model;
use defectlab_core::sweep::{render_report, render_table, run_sweep, GridSpec, SweepOptions};
use defectlab_core::synthetic::{generate_dataset, SyntheticSpec};
use defectlab_core::Error;
use defectlab_service::{AppState, CreateSession, ServiceConfig, ServiceError};
use serde::Serialize;

use crate::args::*;
use crate::plot::history_svg;

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Service(ServiceError),
    /// Bad input detected before any core call.
    Input(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Core(e) => CliError::Core(e),
            e => CliError::Service(e),
        }
    }
}

impl From<defectlab_service::ApiError> for CliError {
    fn from(e: defectlab_service::ApiError) -> Self {
        CliError::Input(format!("{}: {}", e.body.error_code, e.body.message))
    }
}

impl CliError {
    /// 1 i/o, 2 input validation, 3 numeric failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::Io { .. }) | CliError::Service(_) => 1,
            CliError::Core(Error::Divergence { .. } | Error::UndefinedMetric(_)) => 3,
            CliError::Core(_) | CliError::Input(_) => 2,
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Core(e) => format!("{}: {e}", e.code()),
            CliError::Service(e) => format!("{}: {e}", e.code()),
            CliError::Input(m) => format!("invalid_input: {m}"),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Input(format!("{what} {} does not exist", path.display())))
    }
}

fn open_manifest(path: &Path) -> Result<DatasetManifest> {
    require_file(path, "manifest")?;
    Ok(load_manifest(path)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json("report", e))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn scan(a: &ScanArgs) -> Result<()> {
    let manifest = scan_directory(&a.root, a.layout.into())?;
    save_manifest(&manifest, &a.out)?;
    println!("{}", manifest.split_counts());
    println!("manifest written to {}", a.out.display());
    Ok(())
}

fn train_config(o: &OptimArgs, epochs: u64) -> TrainConfig {
    TrainConfig {
        optimizer: o.optimizer.into(),
        learning_rate: o.lr,
        batch_size: o.batch as usize,
        epochs: epochs as usize,
        rng_seed: o.seed,
        deterministic: true,
    }
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    let manifest = open_manifest(&a.manifest)?;
    let model_cfg = a.model.config();
    let train_cfg = train_config(&a.optim, a.epochs);
    let model = build_model(&model_cfg, a.optim.seed)?;
    let train_set = manifest.split_samples(Split::Train);
    let val = manifest.split_samples(Split::Validation);
    let (model, report) = train(model, &train_set, &train_cfg, &val)?;
    let validation = evaluate_model(&model, &val, 0.5)?;
    save_checkpoint(&model, &a.out)?;
    let report_path = a.report.clone().unwrap_or_else(|| sibling(&a.out, ".report.json"));
    write_json(
        &report_path,
        &serde_json::json!({
            "model_checksum": model.checksum(),
            "model_config": model_cfg,
            "train_config": train_cfg,
            "training": report,
            "validation": validation,
        }),
    )?;
    println!("validation ({} samples)\n{validation}", val.len());
    println!("checkpoint written to {}", a.out.display());
    Ok(())
}

pub fn sweep_cmd(a: &SweepArgs) -> Result<()> {
    let manifest = open_manifest(&a.manifest)?;
    let grid = match &a.grid {
        Some(p) => {
            require_file(p, "grid file")?;
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_slice::<GridSpec>(&bytes).map_err(|e| Error::json("grid file", e))?
        }
        None => GridSpec::default(),
    };
    let opts = SweepOptions {
        state_dir: a.state_dir.clone(),
        workers: a.workers,
        max_new_cells: None,
    };
    let result = run_sweep(&grid, &manifest, &a.model.config(), &opts)?;
    render_report(&result, &a.out)?;
    print!("{}", render_table(&result)?);
    let failed = result.cells.iter().filter(|c| c.validation().is_none()).count();
    println!("{} cells, {failed} failed; report written to {}", result.cells.len(), a.out.display());
    Ok(())
}

fn al_config(a: &AlArgs, strategy: StrategyArg, seed: u64) -> ALConfig {
    ALConfig {
        query_size: a.query_size as usize,
        max_queries: a.max_queries as usize,
        strategy: strategy.into(),
        fine_tune_epochs: a.fine_tune_epochs as usize,
        fine_tune_scope: a.scope.into(),
        stop_rule: a.stop_window.zip(a.stop_eps).map(|(w, e)| StopRule {
            window: w as usize,
            epsilon: e,
        }),
        train_cfg: TrainConfig {
            rng_seed: seed,
            ..train_config(&a.optim, 1)
        },
        rng_seed: seed,
        seed_size: a.seed_size,
        timestamps: if a.deterministic {
            TimestampMode::Logical
        } else {
            TimestampMode::Wall
        },
        retention: a.retention.into(),
        ..Default::default()
    }
}

fn session_id_for(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "session".into())
}

/// Runs (or resumes) an oracle session, persisting after every iteration.
fn run_oracle(
    dir: &Path,
    cfg: ALConfig,
    manifest_path: &Path,
    manifest: &DatasetManifest,
    model_cfg: &ModelConfig,
) -> Result<ALSessionState> {
    let (mut state, mut model) = if dir.join("session.json").is_file() {
        let state = resume_session(dir)?;
        if state.config != cfg {
            eprintln!("note: resuming {} with its stored configuration", dir.display());
        }
        let model = session_model(dir, &state)?;
        (state, model)
    } else {
        let mut state = ALSessionState::new(session_id_for(dir), cfg, manifest)?;
        state.manifest_path = Some(fs::canonicalize(manifest_path).map_err(|e| Error::io(manifest_path, e))?);
        let model = build_model(model_cfg, state.config.rng_seed)?;
        save_session(dir, &mut state, Some(&model))?;
        (state, model)
    };
    let val = manifest.split_samples(Split::Validation);
    let mut oracle = OracleAnnotator::new(manifest);
    while !state.status.is_terminal() {
        let pause = Some(state.history.len() + 1);
        match run_with_annotator(&mut state, model, &mut oracle, manifest, &val, pause) {
            Ok(m) => {
                save_session(dir, &mut state, Some(&m))?;
                model = m;
            }
            Err(e) => {
                save_session(dir, &mut state, None)?;
                return Err(e.into());
            }
        }
    }
    Ok(state)
}

fn print_session(state: &ALSessionState, target: f64) {
    println!(
        "session {}: {} after {} queries, {} labeled, {} left in pool",
        state.session_id,
        state.status.as_str(),
        state.history.len(),
        state.pool.labeled_count(),
        state.pool.unlabeled_count()
    );
    if let Some(cause) = &state.abort_cause {
        println!("abort cause: {cause}");
    }
    if let Some(last) = state.history.last() {
        println!("latest validation accuracy: {:.4}", last.val_accuracy);
        if let Ok(s) = history_stats(&state.history, 1, last.iteration) {
            println!("over all queries: mean {:.4}, std {:.4}, peak {:.4}", s.mean, s.std, s.peak);
        }
    }
    match labels_to_target(&state.history, target) {
        Some(n) => println!("reached {target} validation accuracy with {n} labels"),
        None => println!("did not reach {target} validation accuracy"),
    }
}

fn write_plot(path: &Path, state: &ALSessionState) -> Result<()> {
    let title = format!("{} ({:?} sampling)", state.session_id, state.config.strategy).to_lowercase();
    fs::write(path, history_svg(&state.history, &title)).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Serialize)]
struct StrategySummary {
    runs: usize,
    reached: usize,
    mean_labels_to_target: Option<f64>,
    labels_to_target: Vec<Option<usize>>,
}

pub fn al_cmd(a: &AlArgs) -> Result<()> {
    if !(a.target > 0.0 && a.target <= 1.0) {
        return Err(CliError::Input(format!("--target {} not in (0, 1]", a.target)));
    }
    let manifest = open_manifest(&a.manifest)?;
    let model_cfg = a.model.config();
    if a.mode == ModeArg::Serve {
        return serve_session(a, model_cfg);
    }
    if !a.compare {
        let state = run_oracle(&a.session_dir, al_config(a, a.strategy, a.optim.seed), &a.manifest, &manifest, &model_cfg)?;
        let plot = a.plot.clone().unwrap_or_else(|| a.session_dir.join("history.svg"));
        write_plot(&plot, &state)?;
        print_session(&state, a.target);
        return Ok(());
    }

    let mut summary = BTreeMap::new();
    for strategy in [StrategyArg::Uncertainty, StrategyArg::Random] {
        let name = format!("{strategy:?}").to_lowercase();
        let mut reached = Vec::new();
        for seed in a.optim.seed..a.optim.seed + a.repeats {
            let dir = a.session_dir.join(&name).join(format!("seed-{seed}"));
            let state = run_oracle(&dir, al_config(a, strategy, seed), &a.manifest, &manifest, &model_cfg)?;
            write_plot(&dir.join("history.svg"), &state)?;
            reached.push(labels_to_target(&state.history, a.target));
        }
        let hits: Vec<usize> = reached.iter().flatten().copied().collect();
        summary.insert(
            name,
            StrategySummary {
                runs: reached.len(),
                reached: hits.len(),
                mean_labels_to_target: (!hits.is_empty())
                    .then(|| hits.iter().sum::<usize>() as f64 / hits.len() as f64),
                labels_to_target: reached,
            },
        );
    }
    write_json(&a.session_dir.join("comparison.json"), &summary)?;
    println!("labels to reach {} validation accuracy:", a.target);
    for (name, s) in &summary {
        let mean = s.mean_labels_to_target.map_or("-".to_string(), |m| format!("{m:.1}"));
        println!("  {name:<12} mean {mean:>8}  reached {}/{}", s.reached, s.runs);
    }
    Ok(())
}

fn serve_session(a: &AlArgs, model_cfg: ModelConfig) -> Result<()> {
    let store = match a.session_dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let id = session_id_for(&a.session_dir);
    let cfg = al_config(a, a.strategy, a.optim.seed);
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io(&store, e))?;
    rt.block_on(async {
        let service_cfg = ServiceConfig {
            token: a.token.clone(),
            default_model: model_cfg.clone(),
        };
        let app = AppState::open(&store, service_cfg).await?;
        if app.summary(&id).await.is_err() {
            app.create_session(CreateSession {
                session_id: Some(id.clone()),
                manifest_path: a.manifest.clone(),
                config: cfg,
                model: Some(model_cfg),
            })
            .await?;
        }
        let listener = defectlab_service::bind(&a.bind).await?;
        let addr = listener.local_addr().map_err(|e| Error::io(&store, e))?;
        println!("session URL: http://{addr}/api/v1/sessions/{id}");
        let watcher = app.clone();
        let wait_id = id.clone();
        let shutdown = async move {
            tokio::select! {
                _ = defectlab_service::termination_signal() => {}
                _ = watcher.wait_for(&wait_id, SessionStatus::is_terminal) => {}
            }
        };
        defectlab_service::serve_with_shutdown(listener, app, shutdown).await?;
        Ok::<_, CliError>(())
    })?;
    let state = resume_session(&a.session_dir)?;
    let plot = a.plot.clone().unwrap_or_else(|| a.session_dir.join("history.svg"));
    write_plot(&plot, &state)?;
    print_session(&state, a.target);
    Ok(())
}

pub fn eval_cmd(a: &EvalArgs) -> Result<()> {
    require_file(&a.checkpoint, "checkpoint")?;
    let manifest = open_manifest(&a.manifest)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let split: Split = a.split.into();
    let samples = manifest.split_samples(split);
    let report = evaluate_model(&model, &samples, a.threshold)?;
    println!("{split} ({} samples)\n{report}", samples.len());
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(())
}

pub fn autolabel_cmd(a: &AutolabelArgs) -> Result<()> {
    require_file(&a.checkpoint, "checkpoint")?;
    let manifest = open_manifest(&a.manifest)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let samples = manifest.split_samples(a.split.into());
    let (delta, report) = autolabel(&model, &samples, a.threshold, a.min_confidence)?;
    let report_path = a.report.clone().unwrap_or_else(|| sibling(&a.out, ".report.json"));
    write_json(&report_path, &report)?;
    println!(
        "labeled {} of {} samples ({} skipped, {} unreadable)",
        report.labeled,
        report.total,
        report.skipped,
        report.failures.len()
    );
    if report.zero_coverage {
        println!("no sample passed the confidence gate; nothing exported");
        return Ok(());
    }
    export_labeled(&delta, manifest.class_names.clone(), manifest.source_root.clone(), &a.out)?;
    if let Some(e) = &report.evaluation {
        println!("against ground truth\n{e}");
    }
    println!("labeled manifest written to {}", a.out.display());
    Ok(())
}

pub fn synth_cmd(a: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        side: a.side,
        train_per_class: a.train_per_class,
        validation_per_class: a.val_per_class,
        test_per_class: a.test_per_class,
        margin: a.margin,
        noise: a.noise,
        seed: a.seed,
    };
    let n = generate_dataset(&a.out, &spec)?;
    println!("{n} images written under {}", a.out.display());
    if let Some(path) = &a.manifest {
        let manifest = scan_directory(&a.out, defectlab_core::dataset::Layout::SplitDirs)?;
        save_manifest(&manifest, path)?;
        println!("manifest written to {}", path.display());
    }
    Ok(())
}
