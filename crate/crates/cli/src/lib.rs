//! Command implementations for the `tsda` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use thiserror::Error;

use tsda_core::data::{self, GENERATOR_VERSION};
use tsda_core::trainer::{self, SweepParam};
use tsda_core::viz;
use tsda_core::{DatasetSplit, Model, RunConfig, Sample, TrainLog};

pub const CHECKPOINT_FILE: &str = "model.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] tsda_core::Error),
}

impl CliError {
    /// 1 usage/config, 2 numerical abort, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(tsda_core::Error::Numerical(_)) => 2,
            CliError::Core(tsda_core::Error::Io(_)) => 3,
            CliError::Core(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "tsda", version, about = "Train and probe temporal/spatial decoupled multimodal regressors")]
pub struct Cli {
    /// Run configuration (JSON); missing keys take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides io.out_dir.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for data generation and training; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write train/val/test JSONL files and a manifest.
    Generate,
    /// Train one model; writes train_log.csv and a checkpoint.
    Train(DataArgs),
    /// Print metrics of a checkpoint on one split as JSON.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train the full model and one variant per switch set; writes ablation.csv.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated variants; join switches within a variant with '+'.
        #[arg(long, value_delimiter = ',', required = true)]
        switches: Vec<String>,
    },
    /// Retrain over values of one loss weight; writes sweep_<param>.csv.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        /// alpha, beta or gamma.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Test-set MAE and mean gate under clean, shuffled and swapped inputs.
    Intervene {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Regularization curves from a log and, given a checkpoint, a PCA
    /// scatter of test-set fused summaries.
    Plot {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// K-fold cross-validation over the pooled train and val splits.
    Cv {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 5)]
        folds: usize,
    },
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory with train.jsonl, val.jsonl and test.jsonl; generated from
    /// the config when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

struct Context {
    config: RunConfig,
    out: PathBuf,
    quiet: bool,
}

impl Context {
    fn new(cli: &Cli) -> CliResult<Self> {
        let mut config = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = cli.seed {
            config = config.with_seed(seed);
        }
        if let Some(out) = &cli.out {
            config.io.out_dir = out.to_string_lossy().into_owned();
        }
        config.validate()?;
        Ok(Self {
            out: PathBuf::from(&config.io.out_dir),
            config,
            quiet: cli.quiet,
        })
    }

    fn write(&self, name: &str, contents: &str) -> CliResult<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, contents)?;
        Ok(path)
    }

    fn prepare_out(&self, config: &RunConfig) -> CliResult<()> {
        fs::create_dir_all(&self.out)?;
        self.write(RESOLVED_CONFIG_FILE, &config.to_json())?;
        Ok(())
    }

    fn note(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }

    fn dataset(&self, args: &DataArgs) -> CliResult<DatasetSplit> {
        match &args.data {
            Some(dir) => Ok(data::load_split_dir(dir)?),
            None => Ok(data::generate(&self.config.data, self.config.data.seed)?),
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let ctx = Context::new(cli)?;
    match &cli.command {
        Command::Generate => generate(&ctx),
        Command::Train(args) => train(&ctx, args),
        Command::Eval { data, checkpoint, split } => eval(&ctx, data, checkpoint, split),
        Command::Ablate { data, switches } => ablate(&ctx, data, switches),
        Command::Sweep { data, param, values } => sweep(&ctx, data, param, values),
        Command::Intervene { data, checkpoint } => intervene(&ctx, data, checkpoint),
        Command::Plot { log, checkpoint, data } => plot(&ctx, log, checkpoint.as_deref(), data),
        Command::Cv { data, folds } => cv(&ctx, data, *folds),
    }
}

fn generate(ctx: &Context) -> CliResult<()> {
    let cfg = &ctx.config.data;
    let split = data::generate(cfg, cfg.seed)?;
    ctx.prepare_out(&ctx.config)?;
    for (name, samples) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        data::write_jsonl(&ctx.out.join(format!("{name}.jsonl")), samples)?;
    }
    let manifest = json!({
        "generator_version": GENERATOR_VERSION,
        "seed": cfg.seed,
        "files": {
            "train": {"path": "train.jsonl", "samples": split.train.len()},
            "val": {"path": "val.jsonl", "samples": split.val.len()},
            "test": {"path": "test.jsonl", "samples": split.test.len()},
        },
        "generator": cfg,
    });
    ctx.write("manifest.json", &pretty(&manifest))?;
    ctx.note(&format!(
        "wrote {} / {} / {} samples to {}",
        split.train.len(),
        split.val.len(),
        split.test.len(),
        ctx.out.display()
    ));
    Ok(())
}

fn train(ctx: &Context, args: &DataArgs) -> CliResult<()> {
    let split = ctx.dataset(args)?;
    ctx.prepare_out(&ctx.config)?;
    let outcome = trainer::train(&ctx.config, &split, |row| {
        ctx.note(&format!(
            "epoch {:>3}  total {:.5}  val_mae {:.5}  val_acc7 {:.4}",
            row.epoch, row.total, row.val_mae, row.val_acc7
        ))
    });
    let outcome = outcome?;
    ctx.write("train_log.csv", &outcome.log.to_csv())?;
    outcome.model.save(&ctx.out.join(CHECKPOINT_FILE), &ctx.config)?;
    let mut summary = json!({
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.log.rows.len(),
        "val": trainer::evaluate(&outcome.model, &split.val)?,
    });
    if !split.test.is_empty() {
        summary["test"] = serde_json::to_value(trainer::evaluate(&outcome.model, &split.test)?).map_err(json_err)?;
    }
    let text = pretty(&summary);
    ctx.write("metrics.json", &text)?;
    print!("{text}");
    Ok(())
}

fn load_checkpoint(ctx: &Context, path: &Path) -> CliResult<(Model, RunConfig)> {
    if !path.is_file() {
        return Err(CliError::Core(tsda_core::Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("checkpoint {} not found", path.display()),
        ))));
    }
    let (model, mut config) = Model::load(path)?;
    config.io.out_dir = ctx.config.io.out_dir.clone();
    Ok((model, config))
}

fn pick_split<'a>(split: &'a DatasetSplit, name: &str) -> CliResult<&'a [Sample]> {
    match name {
        "train" => Ok(&split.train),
        "val" => Ok(&split.val),
        "test" => Ok(&split.test),
        other => Err(CliError::Usage(format!("unknown split {other:?}; expected train, val or test"))),
    }
}

fn eval(ctx: &Context, args: &DataArgs, checkpoint: &Path, split_name: &str) -> CliResult<()> {
    let (model, config) = load_checkpoint(ctx, checkpoint)?;
    let split = ctx.dataset(args)?;
    let samples = pick_split(&split, split_name)?;
    let report = trainer::evaluate(&model, samples)?;
    ctx.prepare_out(&config)?;
    print!("{}", pretty(&report));
    Ok(())
}

fn ablate(ctx: &Context, args: &DataArgs, switches: &[String]) -> CliResult<()> {
    let variants: Vec<Vec<String>> = switches
        .iter()
        .map(|v| v.split('+').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
        .collect();
    if variants.iter().any(Vec::is_empty) {
        return Err(CliError::Usage("empty ablation variant".into()));
    }
    let split = ctx.dataset(args)?;
    ctx.prepare_out(&ctx.config)?;
    ctx.note(&format!("training the full model and {} variant(s)", variants.len()));
    let rows = trainer::ablate(&ctx.config, &split, &variants)?;
    let csv = trainer::ablation_csv(&rows);
    ctx.write("ablation.csv", &csv)?;
    print!("{csv}");
    Ok(())
}

fn sweep(ctx: &Context, args: &DataArgs, param: &str, values: &[f64]) -> CliResult<()> {
    let param = SweepParam::parse(param)?;
    let split = ctx.dataset(args)?;
    ctx.prepare_out(&ctx.config)?;
    let outcome = trainer::sensitivity_sweep(&ctx.config, &split, param, values)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    let csv = trainer::sweep_csv(param, &outcome.rows);
    ctx.write(&format!("sweep_{}.csv", param.name()), &csv)?;
    print!("{csv}");
    Ok(())
}

fn intervene(ctx: &Context, args: &DataArgs, checkpoint: &Path) -> CliResult<()> {
    let (model, config) = load_checkpoint(ctx, checkpoint)?;
    let split = ctx.dataset(args)?;
    let rows = trainer::intervene(&model, &split.test, ctx.config.train.seed)?;
    ctx.prepare_out(&config)?;
    let csv = trainer::interventions_csv(&rows);
    ctx.write("interventions.csv", &csv)?;
    print!("{csv}");
    Ok(())
}

fn plot(ctx: &Context, log: &Path, checkpoint: Option<&Path>, args: &DataArgs) -> CliResult<()> {
    let text = fs::read_to_string(log)?;
    let parsed = TrainLog::parse_csv(&text)?;
    let config = match checkpoint {
        Some(p) => Some(load_checkpoint(ctx, p)?),
        None => None,
    };
    ctx.prepare_out(config.as_ref().map_or(&ctx.config, |(_, c)| c))?;
    ctx.write("regularization.svg", &viz::regularization_svg(&parsed)?)?;
    ctx.write("regularization.csv", &parsed.to_csv())?;
    if let Some((model, _)) = config {
        let split = ctx.dataset(args)?;
        let refs: Vec<&Sample> = split.test.iter().collect();
        let rows = trainer::embed(&model, &refs)?;
        let scores = viz::pca(&rows, 2)?;
        let points: Vec<[f64; 2]> = scores.iter().map(|r| [r[0], r[1]]).collect();
        let labels: Vec<f64> = split.test.iter().map(|s| s.label).collect();
        ctx.write("pca.svg", &viz::scatter_svg(&points, &labels)?)?;
        ctx.write("pca.csv", &viz::scatter_csv(&points, &labels))?;
    }
    ctx.note(&format!("wrote plots to {}", ctx.out.display()));
    Ok(())
}

fn cv(ctx: &Context, args: &DataArgs, folds: usize) -> CliResult<()> {
    let split = ctx.dataset(args)?;
    ctx.prepare_out(&ctx.config)?;
    let reports = trainer::cross_validate(&ctx.config, &split, folds)?;
    let mut csv = String::from("fold,mae,acc7,acc2_negpos,acc2_neg_nonneg,macro_f1\n");
    for (k, r) in reports.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            k + 1,
            r.mae,
            r.acc7,
            r.acc2_negpos,
            r.acc2_neg_nonneg,
            r.macro_f1
        ));
    }
    ctx.write("cv.csv", &csv)?;
    print!("{csv}");
    Ok(())
}

fn json_err(e: serde_json::Error) -> CliError {
    CliError::Core(e.into())
}

fn pretty<T: serde::Serialize + ?Sized>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable value");
    s.push('\n');
    s
}
