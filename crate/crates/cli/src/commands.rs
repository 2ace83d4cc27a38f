//! The four subcommands. Each returns its result to the caller; printing and
//! exit codes are left to the binary.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use ncl_core::correspondence::write_split_diagnostics;
use ncl_core::data::{build_dataset, load_dataset, save_dataset};
use ncl_core::eval::evaluate_pair;
use ncl_core::model::{load_checkpoint, save_checkpoint, ModelParams};
use ncl_core::trainer::{split_diagnostics, train_with, Net, SplitQualityPair};
use ncl_core::{DatasetMeta, Error as CoreError, PairRecord, RetrievalReport};
use serde::{Deserialize, Serialize};

use crate::config::RunConfigFile;
use crate::metrics::{plot_rows, write_plot_rows, MetricsWriter};
use crate::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_A: &str = "net_a.ckpt";
pub const CHECKPOINT_B: &str = "net_b.ckpt";
pub const SPLITS_DIR: &str = "splits";

/// Generates the dataset described by `config.data` and writes it to `out`.
pub fn cmd_gen(config: &RunConfigFile, out: &Path) -> Result<DatasetMeta, CliError> {
    config.data.validate().map_err(|e| match e {
        CoreError::InvalidConfig { field, message } => CliError::Config {
            field: format!("data.{field}"),
            message,
        },
        other => CliError::Core(other),
    })?;
    let bundle = build_dataset(&config.data)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(CliError::io(format!("creating {}", dir.display())))?;
    }
    save_dataset(&bundle, out)?;
    Ok(bundle.meta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStatus {
    Completed,
    Diverged,
}

/// Contents of summary.json. `created_at` is the only field that differs
/// between reruns with identical inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub status: TrainStatus,
    pub epochs_completed: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_val_rsum: Option<f64>,
    /// Test metrics of the best-validation checkpoint pair.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<RetrievalReport>,
    /// Split quality of the divisions the best checkpoints make.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_quality: Option<SplitQualityPair>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config: RunConfigFile,
    pub dataset: DatasetMeta,
    pub created_at: String,
}

fn write_summary(dir: &Path, summary: &RunSummary) -> Result<(), CliError> {
    let path = dir.join(SUMMARY_FILE);
    let mut text = serde_json::to_string_pretty(summary).expect("summary serializes");
    text.push('\n');
    fs::write(&path, text).map_err(CliError::io(format!("writing {}", path.display())))
}

fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Trains on the dataset at `data` and writes metrics.csv, summary.json and
/// both best checkpoints into `out_dir`. On divergence the finished metrics
/// rows stay on disk, summary.json records status `diverged`, no checkpoints
/// are written, and the divergence error is returned.
pub fn cmd_train(
    config: &RunConfigFile,
    data: &Path,
    out_dir: &Path,
) -> Result<RunSummary, CliError> {
    config.validate()?;
    let bundle = load_dataset(data)?;
    fs::create_dir_all(out_dir).map_err(CliError::io(format!("creating {}", out_dir.display())))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let file = File::create(&metrics_path)
        .map_err(CliError::io(format!("creating {}", metrics_path.display())))?;
    let mut metrics = MetricsWriter::new(BufWriter::new(file), config.output.timing)?;
    let splits_dir = out_dir.join(SPLITS_DIR);
    if config.output.split_diagnostics {
        fs::create_dir_all(&splits_dir)
            .map_err(CliError::io(format!("creating {}", splits_dir.display())))?;
    }

    let mut completed = 0;
    let result = train_with(
        &bundle.train,
        &bundle.val,
        &bundle.test,
        &config.train,
        |r| {
            metrics
                .write(r)
                .map_err(|e| CoreError::Io(io::Error::other(e.to_string())))?;
            if config.output.split_diagnostics {
                for d in &r.divisions {
                    let tag = if d.divider == Net::A { "a" } else { "b" };
                    let path = splits_dir.join(format!("epoch_{:03}_{tag}.csv", r.epoch));
                    let out = BufWriter::new(File::create(path)?);
                    write_split_diagnostics(out, &split_diagnostics(d))?;
                }
            }
            completed = r.epoch;
            Ok(())
        },
    );

    let mut summary = RunSummary {
        status: TrainStatus::Completed,
        epochs_completed: completed,
        best_epoch: None,
        best_val_rsum: None,
        test: None,
        split_quality: None,
        error: None,
        config: config.clone(),
        dataset: bundle.meta.clone(),
        created_at: timestamp(),
    };
    let outcome = match result {
        Ok(o) => o,
        Err(e @ CoreError::Divergence { .. }) => {
            summary.status = TrainStatus::Diverged;
            summary.error = Some(e.to_string());
            write_summary(out_dir, &summary)?;
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    let config_json = config.to_json();
    save_checkpoint(&out_dir.join(CHECKPOINT_A), &outcome.best_a, &config_json)?;
    save_checkpoint(&out_dir.join(CHECKPOINT_B), &outcome.best_b, &config_json)?;
    summary.best_epoch = Some(outcome.best_epoch);
    summary.best_val_rsum = Some(outcome.best_val_rsum);
    summary.test = Some(outcome.test);
    summary.split_quality = Some(outcome.split_quality);
    write_summary(out_dir, &summary)?;
    Ok(summary)
}

fn check_records(params: &ModelParams, records: &[PairRecord]) -> Result<(), CliError> {
    let d = params.dims;
    for r in records {
        if r.regions.iter().any(|row| row.len() != d.d_img_in) {
            return Err(CoreError::Mismatch(format!(
                "record {} has region width other than the checkpoint's d_img_in = {}",
                r.id, d.d_img_in
            ))
            .into());
        }
        if r.tokens.iter().any(|&t| t as usize >= d.vocab_size) {
            return Err(CoreError::Mismatch(format!(
                "record {} has a token outside the checkpoint's vocab_size = {}",
                r.id, d.vocab_size
            ))
            .into());
        }
    }
    Ok(())
}

/// Reloads both checkpoints from `run_dir` and evaluates them on the test
/// split of the dataset at `data`.
pub fn cmd_eval(run_dir: &Path, data: &Path) -> Result<RetrievalReport, CliError> {
    let a = load_checkpoint(&run_dir.join(CHECKPOINT_A))?;
    let b = load_checkpoint(&run_dir.join(CHECKPOINT_B))?;
    if a.params.dims != b.params.dims {
        return Err(CoreError::Mismatch("the two checkpoints have different dims".into()).into());
    }
    let bundle = load_dataset(data)?;
    check_records(&a.params, &bundle.test)?;
    Ok(evaluate_pair(&a.params, &b.params, &bundle.test)?)
}

/// Converts a metrics CSV into long format, written to `out` or stdout.
pub fn cmd_plotdata(metrics: &Path, out: Option<&PathBuf>) -> Result<usize, CliError> {
    let file =
        File::open(metrics).map_err(CliError::io(format!("opening {}", metrics.display())))?;
    let rows = plot_rows(file)?;
    match out {
        Some(path) => {
            let f =
                File::create(path).map_err(CliError::io(format!("creating {}", path.display())))?;
            write_plot_rows(BufWriter::new(f), &rows)?;
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            write_plot_rows(&mut lock, &rows)?;
            lock.flush().map_err(CliError::io("writing stdout"))?;
        }
    }
    Ok(rows.len())
}
