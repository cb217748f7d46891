use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use smsa_cli::config::RunConfig;
use smsa_cli::error::{CliError, CliResult};
use smsa_cli::exec::Executor;
use smsa_cli::format::{read_dataset, read_model, write_dataset};
use smsa_cli::{features, ingest, runner};
use smsa_core::attention::{AttentionMode, GradMode};
use smsa_core::data::{nearest_centroid_accuracy, synth_split};
use smsa_core::gradcheck::{format_report, run_all};

#[derive(Parser)]
#[command(
    name = "smsa",
    version,
    about = "Train and inspect SPD-manifold self-attention networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 runs sequentially.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// smsa, eusa or none.
    #[arg(long)]
    attention: Option<String>,
    /// exact or paper; applies to both the distance and softmax backward.
    #[arg(long)]
    grad_mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl Overrides {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = &self.attention {
            let mode: AttentionMode = v.parse()?;
            cfg.network.attention = mode.as_str().into();
        }
        if let Some(v) = &self.grad_mode {
            let mode: GradMode = v.parse()?;
            cfg.set_grad_mode(mode);
        }
        if let Some(v) = self.epochs {
            cfg.optim.epochs = v;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes config.toml, metrics.csv, checkpoints and model.spdm.
    Train {
        #[command(flatten)]
        common: Overrides,
        /// Training set (overrides data.train).
        #[arg(long)]
        train: Option<PathBuf>,
        /// Test set (overrides data.test).
        #[arg(long)]
        test: Option<PathBuf>,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a model file on a dataset file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Finite-difference check of every layer backward and the whole model.
    Gradcheck {
        #[command(flatten)]
        common: Overrides,
        /// Random instances per layer.
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
    /// Generate the synthetic SPD classification task, or ingest sequences
    /// from a manifest with `--manifest`.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        /// Anchor separation in the log domain.
        #[arg(long, default_value_t = 2.0)]
        separation: f64,
        /// Frames per synthetic sequence.
        #[arg(long, default_value_t = 200)]
        frames: usize,
        #[arg(long = "train", default_value_t = 200)]
        n_train: usize,
        #[arg(long = "test", default_value_t = 100)]
        n_test: usize,
        /// CSV manifest (path,label[,split]) of per-sequence frame CSVs.
        #[arg(long, conflicts_with_all = ["classes", "dim", "separation", "frames", "n_train", "n_test"])]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Train smsa, eusa and none under identical seeds and budgets.
    Ablate {
        #[command(flatten)]
        common: Overrides,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Render hidden feature maps as PGM images with diagonal-energy ratios.
    DumpFeatures {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Dataset item to feed through the model.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Comma-separated stages; 0 is the backbone output. Defaults to all.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<usize>,
        /// Pixels per matrix entry.
        #[arg(long, default_value_t = 16)]
        scale: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn with_data(
    common: &Overrides,
    train: Option<PathBuf>,
    test: Option<PathBuf>,
) -> CliResult<RunConfig> {
    let mut cfg = common.resolve()?;
    if train.is_some() {
        cfg.data.train = train;
    }
    if test.is_some() {
        cfg.data.test = test;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train {
            common,
            train,
            test,
            resume,
        } => {
            let cfg = with_data(&common, train, test)?;
            let summary = runner::train_run(&cfg, resume)?;
            runner::summary_line(&summary, std::io::stdout())
                .map_err(|e| CliError::io("<stdout>", e))?;
        }
        Command::Eval {
            model,
            data,
            workers,
        } => {
            let m = runner::eval_run(&model, &data, workers)?;
            println!("accuracy={:.4} loss={:.6}", m.accuracy, m.loss);
        }
        Command::Gradcheck { common, instances } => {
            let cfg = common.resolve()?;
            let net = cfg.network_config(Some(3))?;
            let results = run_all(&net, cfg.seed, instances)?;
            print!("{}", format_report(&results));
            let failed = results.iter().filter(|r| r.is_fatal_failure()).count();
            if failed > 0 {
                return Err(CliError::Failed(format!(
                    "{failed} gradient check(s) exceeded tolerance"
                )));
            }
        }
        Command::Gen {
            out,
            seed,
            classes,
            dim,
            separation,
            frames,
            n_train,
            n_test,
            manifest,
            workers,
        } => {
            let (train, test) = match manifest {
                Some(m) => ingest::ingest(&m, &Executor::new(workers)?)?,
                None => {
                    let (train, test) =
                        synth_split(classes, dim, separation, frames, n_train, n_test, seed)?;
                    (train, (!test.is_empty()).then_some(test))
                }
            };
            std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
            write_dataset(&out.join("train.spdd"), &train)?;
            let mut line = format!(
                "train={} dim={} classes={}",
                train.len(),
                train.dim(),
                train.classes()
            );
            if let Some(test) = &test {
                write_dataset(&out.join("test.spdd"), test)?;
                let baseline = nearest_centroid_accuracy(&train, test)?;
                line.push_str(&format!(" test={} baseline_acc={baseline:.4}", test.len()));
            }
            println!("{line}");
        }
        Command::Ablate {
            common,
            train,
            test,
        } => {
            let cfg = with_data(&common, train, test)?;
            let cells = runner::ablate_run(&cfg)?;
            let mut first_err = None;
            for cell in cells {
                match cell.result {
                    Ok(s) => {
                        print!("{:<5} ", cell.mode.as_str());
                        runner::summary_line(&s, std::io::stdout())
                            .map_err(|e| CliError::io("<stdout>", e))?;
                    }
                    Err(e) => {
                        println!("{:<5} error: {e}", cell.mode.as_str());
                        first_err.get_or_insert(e);
                    }
                }
            }
            if let Some(e) = first_err {
                return Err(e);
            }
        }
        Command::DumpFeatures {
            model,
            data,
            index,
            stages,
            scale,
            out,
        } => {
            let (net, state) = read_model(&model)?;
            let data_set = read_dataset(&data)?;
            let item = data_set.items().get(index).ok_or_else(|| {
                CliError::config("index", format!("dataset has {} items", data_set.len()))
            })?;
            if item.x.dim() != net.input_dim() {
                return Err(CliError::Input {
                    path: data,
                    reason: format!(
                        "matrices are {0}x{0}, model expects {1}x{1}",
                        item.x.dim(),
                        net.input_dim()
                    ),
                });
            }
            let maps = features::stage_maps(&item.x, &state, &net)?;
            let stages = if stages.is_empty() {
                (0..maps.len()).collect()
            } else {
                stages
            };
            for p in features::dump(&maps, &stages, &out, scale)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
