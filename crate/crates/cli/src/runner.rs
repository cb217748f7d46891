//! Training, evaluation and ablation runs with on-disk artifacts.
//!
//! Layout of an output directory:
//! `config.toml` (effective configuration), `metrics.csv`,
//! `checkpoints/latest.spdm` with its `latest.epoch` sidecar, and `model.spdm`.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use smsa_core::attention::AttentionMode;
use smsa_core::data::{nearest_centroid_accuracy, SpdDataset};
use smsa_core::network::{ModelState, NetworkConfig};
use smsa_core::optim::{
    evaluate, train_epoch, EpochMetrics, EvalMetrics, OptimizerConfig, Sample, SampleMap,
};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::exec::Executor;
use crate::format::{read_dataset, read_model, write_model};

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: [&str; 7] = [
    "epoch",
    "lr",
    "loss",
    "ce",
    "recon",
    "train_acc",
    "test_acc",
];
pub const CONFIG_FILE: &str = "config.toml";
pub const MODEL_FILE: &str = "model.spdm";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const CHECKPOINT_FILE: &str = "latest.spdm";
pub const CHECKPOINT_EPOCH_FILE: &str = "latest.epoch";

/// Stream id reserved for parameter initialisation; epochs use their index.
const INIT_STREAM: u64 = u64::MAX;

/// Initial parameters for `seed`.
pub fn init_state(net: &NetworkConfig, seed: u64) -> CliResult<ModelState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    Ok(ModelState::init(net, &mut rng)?)
}

/// One row of the metrics table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub train: EpochMetrics,
    pub test_acc: Option<f64>,
}

impl EpochRecord {
    /// CSV fields; `epoch` is the 1-based count of completed epochs.
    pub fn csv_fields(&self) -> [String; 7] {
        let m = &self.train;
        [
            (m.epoch + 1).to_string(),
            m.lr.to_string(),
            m.loss.to_string(),
            m.ce.to_string(),
            m.recon.to_string(),
            m.train_acc.to_string(),
            self.test_acc.map_or(String::new(), |a| a.to_string()),
        ]
    }
}

/// Trains epochs `start..opt.epochs` in place, calling `on_epoch` after each.
#[allow(clippy::too_many_arguments)]
pub fn fit<M: SampleMap>(
    train: &[Sample],
    test: Option<&[Sample]>,
    state: &mut ModelState,
    net: &NetworkConfig,
    opt: &OptimizerConfig,
    start: usize,
    mapper: &M,
    mut on_epoch: impl FnMut(&EpochRecord, &ModelState) -> CliResult<()>,
) -> CliResult<Vec<EpochRecord>> {
    let mut history = Vec::with_capacity(opt.epochs.saturating_sub(start));
    for epoch in start..opt.epochs {
        let train_metrics = train_epoch(train, state, net, opt, epoch, mapper)?;
        let test_acc = match test {
            Some(t) if !t.is_empty() => Some(evaluate(t, state, net, mapper)?.accuracy),
            _ => None,
        };
        let record = EpochRecord {
            train: train_metrics,
            test_acc,
        };
        on_epoch(&record, state)?;
        history.push(record);
    }
    Ok(history)
}

/// Outcome of a `train` run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out: PathBuf,
    pub network: NetworkConfig,
    /// Epoch the run started from (non-zero after a resume).
    pub start_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub final_test: Option<EvalMetrics>,
    pub baseline_acc: Option<f64>,
}

impl RunSummary {
    pub fn final_train_acc(&self) -> Option<f64> {
        self.history.last().map(|r| r.train.train_acc)
    }
}

fn require_path(field: &str, path: &Option<PathBuf>) -> CliResult<Option<PathBuf>> {
    match path {
        Some(p) if !p.is_file() => Err(CliError::config(
            field,
            format!("{} does not exist", p.display()),
        )),
        other => Ok(other.clone()),
    }
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Writes through a temporary sibling so a crash never leaves a torn file.
fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> CliResult<()>) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    write(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

struct MetricsLog {
    path: PathBuf,
    writer: csv::Writer<File>,
    pending: usize,
    flush_every: usize,
}

impl MetricsLog {
    /// Opens the log, keeping only rows for epochs `<= keep_epochs`.
    fn open(path: &Path, keep_epochs: usize, flush_every: usize) -> CliResult<Self> {
        let mut kept = Vec::new();
        if keep_epochs > 0 && path.is_file() {
            let mut rd = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
            for row in rd.records() {
                let row = row.map_err(|e| csv_error(path, e))?;
                let epoch: usize =
                    row.get(0)
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| CliError::Input {
                            path: path.into(),
                            reason: "row without an epoch number".into(),
                        })?;
                if epoch <= keep_epochs {
                    kept.push(row);
                }
            }
        }
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        writer
            .write_record(METRICS_HEADER)
            .map_err(|e| csv_error(path, e))?;
        for row in &kept {
            writer.write_record(row).map_err(|e| csv_error(path, e))?;
        }
        writer.flush().map_err(|e| CliError::io(path, e))?;
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| CliError::io(path, e))?;
        Ok(MetricsLog {
            path: path.into(),
            writer: csv::Writer::from_writer(file),
            pending: 0,
            flush_every,
        })
    }

    fn push(&mut self, record: &EpochRecord) -> CliResult<()> {
        self.writer
            .write_record(record.csv_fields())
            .map_err(|e| csv_error(&self.path, e))?;
        self.pending += 1;
        if self.pending >= self.flush_every {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> CliResult<()> {
        self.pending = 0;
        self.writer.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    CliError::Input {
        path: path.into(),
        reason: e.to_string(),
    }
}

/// Latest checkpoint in `out` and the number of epochs it covers.
pub fn latest_checkpoint(out: &Path) -> CliResult<Option<(PathBuf, usize)>> {
    let dir = out.join(CHECKPOINT_DIR);
    let model = dir.join(CHECKPOINT_FILE);
    let sidecar = dir.join(CHECKPOINT_EPOCH_FILE);
    if !model.is_file() || !sidecar.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&sidecar).map_err(|e| CliError::io(&sidecar, e))?;
    let epochs = text.trim().parse().map_err(|_| CliError::Input {
        path: sidecar.clone(),
        reason: format!("expected an epoch count, found `{}`", text.trim()),
    })?;
    Ok(Some((model, epochs)))
}

fn write_checkpoint(
    out: &Path,
    net: &NetworkConfig,
    state: &ModelState,
    epochs: usize,
) -> CliResult<()> {
    let dir = out.join(CHECKPOINT_DIR);
    create_dir(&dir)?;
    write_atomic(&dir.join(CHECKPOINT_FILE), |p| write_model(p, net, state))?;
    write_atomic(&dir.join(CHECKPOINT_EPOCH_FILE), |p| {
        fs::write(p, format!("{epochs}\n")).map_err(|e| CliError::io(p, e))
    })
}

/// Loads the configured datasets and checks them against each other.
pub fn load_data(cfg: &RunConfig) -> CliResult<(SpdDataset, Option<SpdDataset>)> {
    let train_path = require_path("data.train", &cfg.data.train)?
        .ok_or_else(|| CliError::config("data.train", "a training set is required"))?;
    let test_path = require_path("data.test", &cfg.data.test)?;
    let train = read_dataset(&train_path)?;
    let test = test_path.map(|p| read_dataset(&p)).transpose()?;
    if let Some(t) = &test {
        if t.dim() != train.dim() || t.classes() != train.classes() {
            return Err(CliError::config(
                "data.test",
                format!(
                    "test set is {}x{} with {} classes, training set is {}x{} with {} classes",
                    t.dim(),
                    t.dim(),
                    t.classes(),
                    train.dim(),
                    train.dim(),
                    train.classes()
                ),
            ));
        }
    }
    Ok((train, test))
}

/// Full `train` command: resolves the configuration, trains, and writes
/// metrics, checkpoints and the final model under `cfg.out`.
pub fn train_run(cfg: &RunConfig, resume: bool) -> CliResult<RunSummary> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    let net = cfg.network_config(Some(train.classes()))?;
    let opt = cfg.optimizer_config()?;
    if net.input_dim() != train.dim() {
        return Err(CliError::config(
            "network.backbone",
            format!(
                "input size {} does not match the {}x{} dataset",
                net.input_dim(),
                train.dim(),
                train.dim()
            ),
        ));
    }
    if net.classes != train.classes() {
        return Err(CliError::config(
            "network.classes",
            format!(
                "{} classes configured, dataset has {}",
                net.classes,
                train.classes()
            ),
        ));
    }
    let exec = Executor::new(cfg.workers)?;
    let out = cfg.out.clone();
    create_dir(&out)?;

    let mut effective = cfg.clone();
    effective.network.classes = Some(net.classes);
    write_atomic(&out.join(CONFIG_FILE), |p| {
        fs::write(p, effective.to_toml()).map_err(|e| CliError::io(p, e))
    })?;

    let (mut state, start) = match resume
        .then(|| latest_checkpoint(&out))
        .transpose()?
        .flatten()
    {
        Some((path, epochs)) => {
            let (saved, state) = read_model(&path)?;
            if saved != net {
                return Err(CliError::config(
                    "network",
                    format!(
                        "{} was written with a different network configuration",
                        path.display()
                    ),
                ));
            }
            (state, epochs.min(opt.epochs))
        }
        None => (init_state(&net, opt.seed)?, 0),
    };

    let mut log = MetricsLog::open(&out.join(METRICS_FILE), start, cfg.metrics_flush)?;
    let test_items = test.as_ref().map(SpdDataset::items);
    let history = fit(
        train.items(),
        test_items,
        &mut state,
        &net,
        &opt,
        start,
        &exec,
        |record, state| {
            log.push(record)?;
            let done = record.train.epoch + 1;
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                // Rows must reach disk before the checkpoint that covers them.
                log.flush()?;
                write_checkpoint(&out, &net, state, done)?;
            }
            Ok(())
        },
    );
    log.flush()?;
    let history = history?;

    write_checkpoint(&out, &net, &state, opt.epochs)?;
    write_atomic(&out.join(MODEL_FILE), |p| write_model(p, &net, &state))?;

    let final_test = test_items
        .map(|t| evaluate(t, &state, &net, &exec))
        .transpose()?;
    let baseline_acc = test
        .as_ref()
        .map(|t| nearest_centroid_accuracy(&train, t))
        .transpose()?;
    Ok(RunSummary {
        out,
        network: net,
        start_epoch: start,
        history,
        final_test,
        baseline_acc,
    })
}

/// Loads a model file and scores it on a dataset file.
pub fn eval_run(model: &Path, data: &Path, workers: usize) -> CliResult<EvalMetrics> {
    let (net, state) = read_model(model)?;
    let data_set = read_dataset(data)?;
    if data_set.dim() != net.input_dim() {
        return Err(CliError::Input {
            path: data.into(),
            reason: format!(
                "matrices are {0}x{0}, model expects {1}x{1}",
                data_set.dim(),
                net.input_dim()
            ),
        });
    }
    if data_set.classes() > net.classes {
        return Err(CliError::Input {
            path: data.into(),
            reason: format!("{} classes, model has {}", data_set.classes(), net.classes),
        });
    }
    Ok(evaluate(
        data_set.items(),
        &state,
        &net,
        &Executor::new(workers)?,
    )?)
}

pub const ABLATION_FILE: &str = "ablation.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const ABLATION_MODES: [AttentionMode; 3] = [
    AttentionMode::Smsa,
    AttentionMode::Eusa,
    AttentionMode::None,
];

/// One cell of the ablation table.
#[derive(Debug)]
pub struct AblationCell {
    pub mode: AttentionMode,
    pub result: CliResult<RunSummary>,
}

/// Trains every attention mode under the same seed and budget, each in
/// `out/<mode>`, and writes `ablation.csv` and `curves.csv` under `out`.
/// A failing cell is recorded and the remaining cells still run.
pub fn ablate_run(cfg: &RunConfig) -> CliResult<Vec<AblationCell>> {
    let out = cfg.out.clone();
    create_dir(&out)?;
    let mut cells = Vec::new();
    for mode in ABLATION_MODES {
        let mut cell_cfg = cfg.clone();
        cell_cfg.network.attention = mode.as_str().into();
        cell_cfg.out = out.join(mode.as_str());
        let result = train_run(&cell_cfg, false);
        cells.push(AblationCell { mode, result });
    }
    write_ablation_tables(&out, &cells)?;
    Ok(cells)
}

fn write_ablation_tables(out: &Path, cells: &[AblationCell]) -> CliResult<()> {
    let table = out.join(ABLATION_FILE);
    let mut w = csv::Writer::from_path(&table).map_err(|e| csv_error(&table, e))?;
    w.write_record([
        "mode",
        "status",
        "final_train_acc",
        "final_test_acc",
        "baseline_acc",
        "error",
    ])
    .map_err(|e| csv_error(&table, e))?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for cell in cells {
        let row = match &cell.result {
            Ok(s) => [
                cell.mode.as_str().to_string(),
                "ok".into(),
                opt(s.final_train_acc()),
                opt(s.final_test.map(|m| m.accuracy)),
                opt(s.baseline_acc),
                String::new(),
            ],
            Err(e) => [
                cell.mode.as_str().to_string(),
                "error".into(),
                String::new(),
                String::new(),
                String::new(),
                e.to_string(),
            ],
        };
        w.write_record(&row).map_err(|e| csv_error(&table, e))?;
    }
    w.flush().map_err(|e| CliError::io(&table, e))?;

    let curves = out.join(CURVES_FILE);
    let mut w = csv::Writer::from_path(&curves).map_err(|e| csv_error(&curves, e))?;
    w.write_record(["mode", "epoch", "loss", "train_acc", "test_acc"])
        .map_err(|e| csv_error(&curves, e))?;
    for cell in cells {
        if let Ok(s) = &cell.result {
            for r in &s.history {
                w.write_record([
                    cell.mode.as_str().to_string(),
                    (r.train.epoch + 1).to_string(),
                    r.train.loss.to_string(),
                    r.train.train_acc.to_string(),
                    opt(r.test_acc),
                ])
                .map_err(|e| csv_error(&curves, e))?;
            }
        }
    }
    w.flush().map_err(|e| CliError::io(&curves, e))
}

/// Human-readable one-line summary of a run.
pub fn summary_line(s: &RunSummary, mut out: impl Write) -> std::io::Result<()> {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    writeln!(
        out,
        "epochs={} train_acc={} test_acc={} test_loss={} baseline_acc={}",
        s.history.len() + s.start_epoch,
        fmt(s.final_train_acc()),
        fmt(s.final_test.map(|m| m.accuracy)),
        fmt(s.final_test.map(|m| m.loss)),
        fmt(s.baseline_acc),
    )
}
