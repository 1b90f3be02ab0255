//! Pipeline driver behind the `tsformer` binary: configuration files and
//! the simulate / train / evaluate / ingest / plotdata commands.

mod config;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

pub use config::{DataSection, EmbeddingSection, OutputSection, Precision, RunConfig, Source};

use tsformer::dataset::{prepare, write_snapshot, Prepared, SequenceDataset, Target, TimeSeries};
use tsformer::evaluator::{
    baseline_report, entropy_panel, oracle_targets, pointwise_table, save_pointwise, save_reports,
    to_f64, EvalReport, PointwiseRow,
};
use tsformer::market::{load_prices, log_returns, write_derived};
use tsformer::model::{load_checkpoint, save_checkpoint, EncoderClassifier};
use tsformer::simulator::simulate;
use tsformer::trainer::{train_with, History};
use tsformer::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] tsformer::Error),
}

impl CliError {
    /// 1 for usage and configuration errors, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Runtime(tsformer::Error::Config(_)) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Output file names inside the run directory.
pub mod files {
    pub const CONFIG: &str = "config.toml";
    pub const CHECKPOINT: &str = "checkpoint.bin";
    pub const HISTORY: &str = "history.csv";
    pub const EVAL: &str = "eval.json";
    pub const DATASET: &str = "dataset.csv";
    pub const POINTWISE: &str = "pointwise.csv";
}

/// The configured series: a simulated OU trajectory or the log returns of a
/// price file.
pub fn load_series(cfg: &RunConfig) -> CliResult<TimeSeries> {
    match cfg.data.source {
        Source::Simulate => Ok(simulate(&cfg.simulation, cfg.data.points)?.to_time_series()),
        Source::Csv => {
            let path =
                cfg.data.csv_path.as_ref().ok_or_else(|| {
                    CliError::Usage("data.csv_path is required for csv data".into())
                })?;
            if !path.is_file() {
                return Err(CliError::Usage(format!(
                    "price file {} does not exist",
                    path.display()
                )));
            }
            Ok(log_returns(&load_prices(path)?)?.to_time_series())
        }
    }
}

pub fn prepare_data<T: Scalar>(cfg: &RunConfig, series: &TimeSeries) -> CliResult<Prepared<T>> {
    Ok(prepare(
        series,
        cfg.model.seq_len,
        cfg.model.n_classes,
        cfg.data.task,
        &cfg.embedding_config(),
        &cfg.split,
    )?)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        CliError::Runtime(tsformer::Error::Io {
            path: dir.display().to_string(),
            source: e,
        })
    })
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| {
        CliError::Runtime(tsformer::Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    })
}

/// Metrics of one model on every split of a prepared dataset.
pub struct Evaluation {
    /// In split order: train, validation (when non-empty), test.
    pub reports: Vec<EvalReport>,
    /// Test-split pointwise table, synthetic data only.
    pub pointwise: Option<Vec<PointwiseRow>>,
}

impl Evaluation {
    pub fn report(&self, split: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.split == split)
    }
}

fn evaluate_split<T: Scalar>(
    cfg: &RunConfig,
    model: &EncoderClassifier<T>,
    name: &str,
    data: &SequenceDataset<T>,
    prepared: &Prepared<T>,
) -> CliResult<(EvalReport, Option<Vec<PointwiseRow>>)> {
    let preds = to_f64(&model.predict(data, cfg.train.batch_size)?);
    let oracle = match cfg.data.source {
        Source::Simulate => oracle_targets(data, &cfg.simulation, &prepared.buckets)?,
        Source::Csv => None,
    };
    let mut report = entropy_panel(name, &preds, data.targets(), oracle.as_deref())?;
    let naive = cfg.data.task == Target::NextSquare;
    report.baseline_naive = baseline_report(data, &prepared.buckets, cfg.data.task, naive)?.naive;
    let pointwise = match (data.oracle_h(), oracle.as_deref()) {
        (Some(h), Some(t)) => Some(pointwise_table(h, &preds, Some(t))?),
        _ => None,
    };
    Ok((report, pointwise))
}

pub fn evaluate_all<T: Scalar>(
    cfg: &RunConfig,
    model: &EncoderClassifier<T>,
    prepared: &Prepared<T>,
) -> CliResult<Evaluation> {
    let mut reports = Vec::new();
    let mut splits = vec![("train", &prepared.train)];
    if !prepared.validation.is_empty() {
        splits.push(("validation", &prepared.validation));
    }
    splits.push(("test", &prepared.test));
    let mut pointwise = None;
    for (name, data) in splits {
        let (r, p) = evaluate_split(cfg, model, name, data, prepared)?;
        reports.push(r);
        if name == "test" {
            pointwise = p;
        }
    }
    Ok(Evaluation { reports, pointwise })
}

pub struct TrainOutcome {
    pub history: History,
    pub evaluation: Evaluation,
    pub out_dir: PathBuf,
}

/// Builds the datasets, trains, evaluates and writes every artifact to
/// `cfg.output.dir`.
pub fn run_train(cfg: &RunConfig, progress: bool) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    match cfg.output.precision {
        Precision::F64 => train_typed::<f64>(cfg, progress),
        Precision::F32 => train_typed::<f32>(cfg, progress),
    }
}

fn train_typed<T: Scalar>(cfg: &RunConfig, progress: bool) -> CliResult<TrainOutcome> {
    let dir = cfg.output.dir.clone();
    create_dir(&dir)?;
    write_text(&dir.join(files::CONFIG), &cfg.to_toml())?;

    let series = load_series(cfg)?;
    let prepared = prepare_data::<T>(cfg, &series)?;
    let mut snapshot = prepared.train.snapshot();
    snapshot.extend(prepared.validation.snapshot());
    snapshot.extend(prepared.test.snapshot());
    let path = dir.join(files::DATASET);
    let file = File::create(&path).map_err(|e| tsformer::Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    write_snapshot(&snapshot, BufWriter::new(file))?;

    if progress {
        eprintln!(
            "windows: {} train, {} validation, {} test; {} precision",
            prepared.train.len(),
            prepared.validation.len(),
            prepared.test.len(),
            T::NAME
        );
    }
    let mut model = EncoderClassifier::<T>::init(&cfg.model, cfg.train.seed)?;
    let history = train_with(
        &mut model,
        &prepared.train,
        Some(&prepared.validation),
        &cfg.train,
        |rec, m| {
            if progress {
                let val = match (rec.val_loss, rec.val_acc) {
                    (Some(l), Some(a)) => format!(", val loss {l:.4} acc {:.2}%", 100.0 * a),
                    _ => String::new(),
                };
                eprintln!(
                    "epoch {:>3}: loss {:.4} acc {:.2}%{val}",
                    rec.epoch,
                    rec.train_loss,
                    100.0 * rec.train_acc
                );
            }
            if cfg.output.checkpoint_every_epoch {
                save_checkpoint(
                    m,
                    &dir.join(format!("checkpoint-epoch{:02}.bin", rec.epoch)),
                )?;
            }
            Ok(())
        },
    )?;
    history.save_csv(&dir.join(files::HISTORY))?;
    save_checkpoint(&model, &dir.join(files::CHECKPOINT))?;

    let evaluation = evaluate_all(cfg, &model, &prepared)?;
    save_reports(&evaluation.reports, &dir.join(files::EVAL))?;
    if let Some(rows) = &evaluation.pointwise {
        save_pointwise(rows, &dir.join(files::POINTWISE))?;
    }
    Ok(TrainOutcome {
        history,
        evaluation,
        out_dir: dir,
    })
}

/// Loads a checkpoint whose stored configuration must equal `cfg.model`.
fn load_matching<T: Scalar>(cfg: &RunConfig, checkpoint: &Path) -> CliResult<EncoderClassifier<T>> {
    if !checkpoint.is_file() {
        return Err(CliError::Usage(format!(
            "checkpoint {} does not exist",
            checkpoint.display()
        )));
    }
    let model: EncoderClassifier<T> = load_checkpoint(checkpoint, None)?;
    if model.config() != &cfg.model {
        return Err(CliError::Usage(format!(
            "checkpoint {} was trained with {:?}, the data configuration expects {:?}",
            checkpoint.display(),
            model.config(),
            cfg.model
        )));
    }
    Ok(model)
}

/// Re-evaluates a checkpoint on the configured data; writes the reports and,
/// for synthetic data, the test pointwise table into `out_dir`.
pub fn run_evaluate(cfg: &RunConfig, checkpoint: &Path, out_dir: &Path) -> CliResult<Evaluation> {
    cfg.validate()?;
    let evaluation = match cfg.output.precision {
        Precision::F64 => evaluate_typed::<f64>(cfg, checkpoint)?,
        Precision::F32 => evaluate_typed::<f32>(cfg, checkpoint)?,
    };
    create_dir(out_dir)?;
    save_reports(&evaluation.reports, &out_dir.join(files::EVAL))?;
    if let Some(rows) = &evaluation.pointwise {
        save_pointwise(rows, &out_dir.join(files::POINTWISE))?;
    }
    Ok(evaluation)
}

fn evaluate_typed<T: Scalar>(cfg: &RunConfig, checkpoint: &Path) -> CliResult<Evaluation> {
    let model = load_matching::<T>(cfg, checkpoint)?;
    let series = load_series(cfg)?;
    let prepared = prepare_data::<T>(cfg, &series)?;
    evaluate_all(cfg, &model, &prepared)
}

/// Writes the test-split pointwise table of a checkpoint to `out`.
pub fn run_plotdata(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> CliResult<usize> {
    cfg.validate()?;
    if cfg.data.source != Source::Simulate {
        return Err(CliError::Usage(
            "pointwise tables need simulated data with hidden states".into(),
        ));
    }
    let evaluation = match cfg.output.precision {
        Precision::F64 => evaluate_typed::<f64>(cfg, checkpoint)?,
        Precision::F32 => evaluate_typed::<f32>(cfg, checkpoint)?,
    };
    let rows = evaluation.pointwise.unwrap_or_default();
    save_pointwise(&rows, out)?;
    Ok(rows.len())
}

/// Simulates `points` steps with the configured OU parameters.
pub fn run_simulate(cfg: &RunConfig, points: usize, out: &Path) -> CliResult<()> {
    if points == 0 {
        return Err(CliError::Usage(
            "the number of points must be at least 1".into(),
        ));
    }
    cfg.simulation
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    simulate(&cfg.simulation, points)?.save_csv(out)?;
    Ok(())
}

/// Converts a `date,close` file into `date,log_return,squared_return`.
pub fn run_ingest(input: &Path, out: &Path) -> CliResult<usize> {
    if !input.is_file() {
        return Err(CliError::Usage(format!(
            "price file {} does not exist",
            input.display()
        )));
    }
    let prices = load_prices(input)?;
    let file = File::create(out).map_err(|e| tsformer::Error::Io {
        path: out.display().to_string(),
        source: e,
    })?;
    write_derived(&prices, BufWriter::new(file))?;
    Ok(prices.len())
}
