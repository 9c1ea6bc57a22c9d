//! Subcommands behind the `metapatch` binary.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::attacks::{AttackConfig, AttackResult, Family, TransferKind};
use crate::config::{resolve_output, RunConfig};
use crate::data::{synth_dataset, Dataset};
use crate::error::Error;
use crate::evaluation::{self, Comparison};
use crate::model::{Model, ModelParams};
use crate::perturbation::{self, Patch, PerturbationSpec};
use crate::training::{EpochRecord, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "metapatch", version, about = "Meta adversarial training against universal patches")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, meta-set and history.
    Train(TrainArgs),
    /// Run the attack grid against a checkpoint and write results plus a report.
    Attack(AttackArgs),
    /// Merge reports from several attack runs into one comparison table.
    Report(ReportArgs),
    /// Write the synthetic shapes dataset as an image folder.
    SynthData(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub config: PathBuf,
    /// Validate the configuration and exit without writing anything.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Only run configurations of these families (RI, DI, LF, Tr).
    #[arg(long, value_delimiter = ',')]
    pub family: Vec<String>,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Run configurations sequentially regardless of `--jobs`.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub export_ppm: bool,
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Attack output directories, each holding a `report.json`.
    #[arg(required = true)]
    pub dirs: Vec<PathBuf>,
    #[arg(long, default_value = "comparison")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 125)]
    pub per_class: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// A failure together with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(e: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_USAGE,
            message: e.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult<T = ()> = std::result::Result<T, Failure>;

/// Parses `args` (including the program name) and runs the command. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Attack(a) => cmd_attack(&a),
        Command::Report(a) => cmd_report(&a),
        Command::SynthData(a) => cmd_synth(&a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn load_config(path: &Path) -> CmdResult<RunConfig> {
    let config = RunConfig::load(path).map_err(|e| match e {
        Error::Io { .. } => Failure::usage(e),
        other => other.into(),
    })?;
    Ok(config)
}

fn validated(config: RunConfig) -> CmdResult<RunConfig> {
    config.validate().map_err(Failure::usage)?;
    Ok(config)
}

fn load_splits(config: &RunConfig) -> CmdResult<(Dataset, Dataset)> {
    let data = config.data.load()?;
    if data.image_shape() != config.architecture.input_shape() {
        return Err(Failure::usage(format!(
            "dataset images are {:?}, architecture expects {:?}",
            data.image_shape(),
            config.architecture.input_shape()
        )));
    }
    if data.num_classes() != config.architecture.num_classes {
        return Err(Failure::usage(format!(
            "dataset has {} classes, architecture expects {}",
            data.num_classes(),
            config.architecture.num_classes
        )));
    }
    Ok(data.split(config.seed)?)
}

fn create_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CmdResult {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(Error::from)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

#[derive(Serialize)]
struct HistoryLine<'a> {
    config_hash: &'a str,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

#[derive(Serialize, serde::Deserialize)]
struct TransferEntry {
    config_hash: String,
    index: usize,
    epoch: usize,
    kind: TransferKind,
    file: String,
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    config_hash: &'a str,
    config: &'a RunConfig,
}

pub fn cmd_train(args: &TrainArgs) -> CmdResult {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let Some(train_cfg) = config.train.as_mut() else {
        return Err(Failure::usage("configuration has no `train` section"));
    };
    if let Some(epochs) = args.epochs {
        train_cfg.epochs = epochs;
    }
    let config = validated(config)?;
    let out = config.output_dir(args.output.as_deref())?;
    if args.dry_run {
        println!("configuration valid; would write to {}", out.display());
        return Ok(());
    }
    let hash = config.hash()?;
    let train_cfg = config.train.clone().expect("checked above");
    let (train, _) = load_splits(&config)?;
    create_dir(&out)?;
    let mut stored = config.clone();
    stored.output = None;
    write_json(&out.join("config.json"), &ResolvedConfig {
        config_hash: &hash,
        config: &stored,
    })?;

    let mut trainer = Trainer::new(&train, &config.perturbation, &config.architecture, &train_cfg, config.seed)?;
    let history_path = out.join("history.jsonl");
    let mut history_file = std::fs::File::create(&history_path).map_err(|e| Error::io(&history_path, e))?;
    let mut history = Vec::with_capacity(train_cfg.epochs);
    for _ in 0..train_cfg.epochs {
        let record = trainer.run_epoch()?;
        let line = serde_json::to_string(&HistoryLine {
            config_hash: &hash,
            record: &record,
        })
        .map_err(Error::from)?;
        writeln!(history_file, "{line}").map_err(|e| Error::io(&history_path, e))?;
        if let Some(every) = train_cfg.checkpoint_every {
            if record.epoch % every == 0 && record.epoch < train_cfg.epochs {
                let path = out.join(format!("checkpoint_e{:04}.bin", record.epoch));
                trainer.params().save(&path, Some(&hash))?;
            }
        }
        eprintln!(
            "epoch {:>3}  loss {:.4}  acc {:.4}",
            record.epoch, record.clean_loss, record.clean_accuracy
        );
        history.push(record);
    }
    let outcome = trainer.finish(history);
    outcome.params.save(&out.join("checkpoint.bin"), Some(&hash))?;
    if let Some(meta) = &outcome.meta {
        meta.save(&out.join("meta.bin"), Some(&hash))?;
    }
    if !outcome.transfer_pool.is_empty() {
        let dir = out.join("transfer");
        create_dir(&dir)?;
        let runs = outcome
            .history
            .iter()
            .flat_map(|r| r.transfer.iter().map(move |t| (r.epoch, t.kind)));
        let mut index = Vec::new();
        for (i, ((epoch, kind), patch)) in runs.zip(&outcome.transfer_pool).enumerate() {
            let file = format!("{i:03}.patch");
            perturbation::save_patch(&dir.join(&file), patch, &config.perturbation)?;
            index.push(TransferEntry {
                config_hash: hash.clone(),
                index: i,
                epoch,
                kind,
                file,
            });
        }
        write_json(&out.join("transfer.json"), &index)?;
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct ResultFile<'a> {
    config_hash: &'a str,
    model_id: Option<&'a str>,
    config_id: &'a str,
    config: &'a AttackConfig,
    accuracy: Option<f64>,
    final_objective: f64,
    random_init: bool,
    trajectory: &'a [f64],
    patch_shape: &'a [usize],
    patch: &'a [f64],
}

fn load_transfer_pool(
    checkpoint: &Path,
    spec: &PerturbationSpec,
    image: [usize; 3],
) -> CmdResult<Vec<(usize, TransferKind, Patch)>> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let index_path = dir.join("transfer.json");
    if !index_path.exists() {
        return Ok(Vec::new());
    }
    let bytes = std::fs::read(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: Vec<TransferEntry> =
        serde_json::from_slice(&bytes).map_err(|e| Error::format(&index_path, e.to_string()))?;
    index
        .into_iter()
        .map(|t| {
            let patch = perturbation::load_patch(&dir.join("transfer").join(&t.file), spec, image)?;
            Ok((t.epoch, t.kind, patch))
        })
        .collect()
}

pub fn cmd_attack(args: &AttackArgs) -> CmdResult {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(jobs) = args.jobs {
        config.attack.jobs = jobs;
    }
    if args.export_ppm {
        config.attack.export_ppm = true;
    }
    let config = validated(config)?;
    let mut families = Vec::new();
    for f in &args.family {
        families.push(Family::parse(f).ok_or_else(|| Failure::usage(format!("unknown attack family `{f}`")))?);
    }
    let wanted = |f: Family| families.is_empty() || families.contains(&f);
    let grid: Vec<AttackConfig> = config.grid().into_iter().filter(|c| wanted(c.family())).collect();
    if !args.checkpoint.is_file() {
        return Err(Failure::usage(format!("checkpoint {} not found", args.checkpoint.display())));
    }
    let (params, model_id) = ModelParams::load(&args.checkpoint).map_err(Failure::usage)?;
    if params.architecture() != &config.architecture {
        return Err(Failure::usage("checkpoint architecture differs from the configuration"));
    }
    let image = config.architecture.input_shape();
    let pool = if wanted(Family::Transfer) {
        load_transfer_pool(&args.checkpoint, &config.perturbation, image)?
    } else {
        Vec::new()
    };
    if grid.is_empty() && pool.is_empty() {
        return Err(Failure::usage("no attack configurations match the requested families"));
    }
    let out = config.output_dir(args.output.as_deref())?;
    if args.dry_run {
        println!(
            "configuration valid; {} configurations, {} transfer patches; would write to {}",
            grid.len(),
            pool.len(),
            out.display()
        );
        return Ok(());
    }
    let hash = config.hash()?;
    let (train, eval) = load_splits(&config)?;
    let jobs = if args.deterministic { 1 } else { config.attack.jobs };
    let make = || Model::new(params.clone());
    let (mut report, results) = if grid.is_empty() {
        let clean = evaluation::accuracy_under(&mut make()?, &eval, None, &config.perturbation, 0)?;
        (evaluation::empty_report(&config.label(), &config.perturbation, config.seed, clean), Vec::new())
    } else {
        let g = evaluation::grid_eval(&make, &train, &eval, &config.perturbation, &grid, config.seed, jobs, &config.label())?;
        (g.report, g.results)
    };
    report.model_id = model_id.clone();
    report.config_hash = Some(hash.clone());
    if !pool.is_empty() {
        evaluation::add_transfer_rows(&mut report, &mut make()?, &eval, &config.perturbation, &pool)?;
    }

    create_dir(&out)?;
    let results_dir = out.join("results");
    create_dir(&results_dir)?;
    let mut exports = Vec::new();
    for (row, result) in report.rows.iter().zip(&results) {
        let Some(r): &Option<AttackResult> = result else { continue };
        write_json(&results_dir.join(format!("{}.json", row.config_id)), &ResultFile {
            config_hash: &hash,
            model_id: model_id.as_deref(),
            config_id: &row.config_id,
            config: &r.config,
            accuracy: row.accuracy,
            final_objective: r.final_objective(),
            random_init: r.random_init,
            trajectory: &r.trajectory,
            patch_shape: r.patch.shape(),
            patch: r.patch.data(),
        })?;
        if config.attack.export_ppm {
            exports.push((row.config_id.clone(), r.patch.clone()));
        }
    }
    evaluation::emit_report(&report, &out, &exports)?;
    for f in report.failures() {
        eprintln!("attack {} failed: {}", f.config_id, f.error.as_deref().unwrap_or(""));
    }
    print!("{}", Comparison::new(std::slice::from_ref(&report)).to_text());
    eprintln!("wrote {}", out.display());
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> CmdResult {
    let mut reports = Vec::with_capacity(args.dirs.len());
    for dir in &args.dirs {
        let path = if dir.is_dir() { dir.join("report.json") } else { dir.clone() };
        reports.push(evaluation::read_report(&path).map_err(Failure::usage)?);
    }
    let table = Comparison::new(&reports);
    let out = resolve_output(&args.output);
    create_dir(&out)?;
    write_bytes(&out.join("comparison.csv"), &table.to_csv()?)?;
    let text = table.to_text();
    write_bytes(&out.join("comparison.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> CmdResult {
    let data = synth_dataset(args.per_class, args.classes, args.resolution, args.seed).map_err(Failure::usage)?;
    let out = resolve_output(&args.output);
    data.write_folder(&out)?;
    eprintln!("wrote {} images to {}", data.len(), out.display());
    Ok(())
}
