//! Command-line driver: corpus generation, training, feature extraction,
//! and evaluation, wired for reproducible end-to-end experiments.
//!
//! Configuration comes from an optional TOML file (`--config`) whose fields
//! individual flags override; the fully resolved config is echoed as
//! `config.toml` into every output directory. Usage and configuration
//! errors exit with code 2 before anything is written; runtime failures
//! exit with code 1 and a single-line diagnostic.

use clap::{Args, Parser, Subcommand};
use fhvae::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use fhvae::config::{CellKind, ExtractionMode, ModelMode, RunConfig, SeqLabel};
use fhvae::data::{group_sequences_by_label, Dataset};
use fhvae::error::{Error, Result};
use fhvae::eval::{invariance_report, svector_spread, ReportFeature, ReportModels};
use fhvae::extract::extract_dataset;
use fhvae::model::{ModelParams, SVectorTable};
use fhvae::synth::{generate_synthetic, load_split, write_corpus, SPLIT_NAMES};
use fhvae::trainer::{fit, TrainingReport};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Environment variable naming the default corpus directory.
const DATA_ROOT_VAR: &str = "FHVAE_DATA_ROOT";

#[derive(Parser)]
#[command(
    name = "fhvae",
    version,
    about = "Factorized hierarchical VAE: train, extract, and evaluate domain-invariant features"
)]
struct Cli {
    /// TOML run-config file; command-line flags override its fields.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Seed override for the subcommand's random streams.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Corpus directory (defaults to $FHVAE_DATA_ROOT).
    #[arg(long, global = true, value_name = "DIR")]
    data: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-domain corpus (archives + manifests).
    Datagen(DatagenArgs),
    /// Train one model; writes checkpoint, per-epoch report, and config.
    Train(TrainArgs),
    /// Extract frame-aligned features for one split into an archive.
    Extract(ExtractArgs),
    /// Probe report: segment-class error per feature family and condition.
    EvalInvariance(EvalInvarianceArgs),
    /// Print the s-vector spread of a trained checkpoint.
    EvalCollapse(EvalCollapseArgs),
    /// Train at several alpha values and summarize shifted-domain errors.
    SweepAlpha(SweepAlphaArgs),
}

#[derive(Args)]
struct DatagenArgs {
    /// Output directory (defaults to --data / $FHVAE_DATA_ROOT).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Output directory for checkpoint, report, and resolved config.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Weight of the discriminative sequence term.
    #[arg(long)]
    alpha: Option<f64>,

    /// Which utterances share one s-vector row.
    #[arg(long, value_name = "uttid|speaker|noise")]
    seq_label: Option<SeqLabel>,

    /// Generative model family.
    #[arg(long, value_name = "fhvae|vae")]
    mode: Option<ModelMode>,

    /// Network body cell family.
    #[arg(long, value_name = "ff|rnn")]
    cell: Option<CellKind>,

    /// Stacked body layers.
    #[arg(long)]
    layers: Option<usize>,

    /// Units per body layer.
    #[arg(long)]
    units: Option<usize>,

    /// Segments per optimizer step.
    #[arg(long)]
    batch_size: Option<usize>,

    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,

    /// Epoch cap.
    #[arg(long)]
    max_epochs: Option<usize>,

    /// Early-stopping patience in epochs.
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args)]
struct ExtractArgs {
    /// Trained checkpoint to extract with.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,

    /// Which derived feature to emit.
    #[arg(long, value_name = "z1|z|z1z2|z1mu2")]
    feature: ExtractionMode,

    /// Corpus split to process.
    #[arg(long, default_value = "test_clean")]
    split: String,

    /// Output directory for the archive and resolved config.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalInvarianceArgs {
    /// Factorized-model checkpoint (enables z1, z1z2, z1mu2 features).
    #[arg(long, value_name = "PATH")]
    fhvae: Option<PathBuf>,

    /// Baseline VAE checkpoint (enables the z feature).
    #[arg(long, value_name = "PATH")]
    vae: Option<PathBuf>,

    /// Comma-separated feature families (raw, z1, z, z1z2, z1mu2).
    /// Defaults to raw plus whatever the given checkpoints support.
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    features: Option<Vec<String>>,

    /// Optional output directory for report.txt / report.json / config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCollapseArgs {
    /// Trained factorized-model checkpoint.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct SweepAlphaArgs {
    /// Comma-separated discriminative weights to train at.
    #[arg(long, value_delimiter = ',', required = true, value_name = "LIST")]
    alphas: Vec<f64>,

    /// Output directory; one subdirectory per alpha plus sweep.txt.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version print to stdout and exit 0; usage errors exit 2.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    // All config-resolution failures are usage errors (exit 2).
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            e @ Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.synth.seed = seed;
        cfg.train.seed = seed;
    }
    match &cli.command {
        Command::Datagen(args) => cmd_datagen(&cli, args, cfg),
        Command::Train(args) => cmd_train(&cli, args, cfg),
        Command::Extract(args) => cmd_extract(&cli, args, cfg),
        Command::EvalInvariance(args) => cmd_eval_invariance(&cli, args, cfg),
        Command::EvalCollapse(args) => cmd_eval_collapse(args),
        Command::SweepAlpha(args) => cmd_sweep_alpha(&cli, args, cfg),
    }
}

/// Corpus directory from `--data` or the environment.
fn data_root(cli: &Cli) -> Result<PathBuf> {
    cli.data
        .clone()
        .or_else(|| std::env::var_os(DATA_ROOT_VAR).map(PathBuf::from))
        .ok_or_else(|| {
            Error::Config(format!(
                "no corpus directory: pass --data or set ${DATA_ROOT_VAR}"
            ))
        })
}

/// Echo the resolved configuration into an output directory.
fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml_string()).map_err(|e| Error::io(path, e))
}

fn create_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_datagen(cli: &Cli, args: &DatagenArgs, cfg: RunConfig) -> Result<()> {
    let out = match &args.out {
        Some(dir) => dir.clone(),
        None => data_root(cli)?,
    };
    cfg.validate()?;
    let corpus = generate_synthetic(&cfg.synth)?;
    create_out_dir(&out)?;
    write_corpus(&out, &corpus)?;
    write_config(&out, &cfg)?;
    for name in SPLIT_NAMES {
        let ds = corpus.split(name).expect("split names are exhaustive");
        println!("{name}: {} utterances", ds.len());
    }
    println!("wrote corpus to {}", out.display());
    Ok(())
}

/// Apply train-command flag overrides onto the run config.
fn apply_train_flags(cfg: &mut RunConfig, args: &TrainArgs) {
    if let Some(alpha) = args.alpha {
        cfg.train.alpha = alpha;
    }
    if let Some(label) = args.seq_label {
        cfg.seq_label = Some(label);
    }
    if let Some(mode) = args.mode {
        cfg.mode = Some(mode);
    }
    if let Some(cell) = args.cell {
        cfg.arch.cell = cell;
    }
    if let Some(layers) = args.layers {
        cfg.arch.layers = layers;
    }
    if let Some(units) = args.units {
        cfg.arch.units = units;
    }
    if let Some(batch) = args.batch_size {
        cfg.train.batch_size = batch;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = lr;
    }
    if let Some(epochs) = args.max_epochs {
        cfg.train.max_epochs = epochs;
    }
    if let Some(patience) = args.patience {
        cfg.train.patience_epochs = patience;
    }
}

/// Load and label-group the train/dev splits, checking the frame dimension
/// against the configured input width.
fn load_train_dev(root: &Path, cfg: &RunConfig, seq_label: SeqLabel) -> Result<(Dataset, Dataset)> {
    let train = group_sequences_by_label(load_split(root, "train")?, seq_label)?;
    let dev = group_sequences_by_label(load_split(root, "dev")?, seq_label)?;
    if let Some(u) = train.utterances().first() {
        if u.dim() != cfg.latent.input_dim {
            return Err(Error::Config(format!(
                "corpus frame dimension {} does not match configured input_dim {}",
                u.dim(),
                cfg.latent.input_dim
            )));
        }
    }
    Ok((train, dev))
}

/// Initialize and fit one model on pre-grouped splits.
fn train_model(
    cfg: &RunConfig,
    mode: ModelMode,
    train: &Dataset,
    dev: &Dataset,
) -> Result<(ModelParams, SVectorTable, TrainingReport)> {
    let mut params = ModelParams::new(mode, &cfg.arch, &cfg.latent, cfg.train.seed)?;
    let mut table = match mode {
        ModelMode::Fhvae => SVectorTable::new(train.seq_ids().to_vec(), cfg.latent.dim_z2)?,
        ModelMode::Vae => SVectorTable::new(Vec::new(), cfg.latent.dim_z2)?,
    };
    let report = fit(train, dev, &mut params, &mut table, &cfg.train)?;
    Ok((params, table, report))
}

/// Write checkpoint, per-epoch report, and resolved config into `out`.
fn write_training_outputs(
    out: &Path,
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    report: &TrainingReport,
) -> Result<()> {
    create_out_dir(out)?;
    write_config(out, cfg)?;
    write_checkpoint(out.join("model.fhck"), ckpt)?;
    let report_path = out.join("report.txt");
    std::fs::write(&report_path, report.to_text()).map_err(|e| Error::io(report_path, e))
}

fn cmd_train(cli: &Cli, args: &TrainArgs, mut cfg: RunConfig) -> Result<()> {
    apply_train_flags(&mut cfg, args);
    let seq_label = *cfg.seq_label.get_or_insert(SeqLabel::UttId);
    let mode = *cfg.mode.get_or_insert(ModelMode::Fhvae);
    cfg.validate()?;
    let root = data_root(cli)?;
    let (train, dev) = load_train_dev(&root, &cfg, seq_label)?;
    let (params, table, report) = train_model(&cfg, mode, &train, &dev)?;
    let ckpt = Checkpoint {
        params,
        table,
        seq_label,
    };
    write_training_outputs(&args.out, &cfg, &ckpt, &report)?;
    println!(
        "trained {mode} on {} utterances ({} sequences): best epoch {} of {}, dev bound {:.4}",
        train.len(),
        train.num_sequences(),
        report.best_epoch,
        report.epochs.len(),
        report.best_dev_bound,
    );
    println!("wrote {}", args.out.join("model.fhck").display());
    Ok(())
}

fn cmd_extract(cli: &Cli, args: &ExtractArgs, mut cfg: RunConfig) -> Result<()> {
    cfg.validate()?;
    let root = data_root(cli)?;
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let dataset = load_split(&root, &args.split)?;
    let features = extract_dataset(
        &dataset,
        &ckpt.params,
        Some(&ckpt.table),
        ckpt.seq_label,
        args.feature,
    )?;

    use fhvae::archive::{write_archive, ArchiveRecord, FeatureArchive};
    let mut archive = FeatureArchive::new();
    for (utt_id, frames) in &features {
        archive.push(ArchiveRecord::new(utt_id.clone(), frames.mapv(|v| v as f32))?)?;
    }
    // Echo the checkpoint's actual geometry, not the file defaults.
    cfg.latent = *ckpt.params.latent();
    cfg.arch = *ckpt.params.arch();
    cfg.mode = Some(ckpt.params.mode());
    cfg.seq_label = Some(ckpt.seq_label);
    create_out_dir(&args.out)?;
    write_config(&args.out, &cfg)?;
    let path = args.out.join(format!("{}_{}.farc", args.split, args.feature.tag()));
    write_archive(&path, &archive)?;
    let dim = features.first().map(|(_, f)| f.ncols()).unwrap_or(0);
    println!(
        "extracted {} for {} utterances ({dim} columns) -> {}",
        args.feature.tag(),
        features.len(),
        path.display()
    );
    Ok(())
}

/// Parse one `--features` element.
fn parse_feature(name: &str) -> Result<ReportFeature> {
    if name == "raw" {
        return Ok(ReportFeature::Raw);
    }
    name.parse::<ExtractionMode>().map(ReportFeature::Latent).map_err(|_| {
        Error::Config(format!(
            "unknown feature '{name}' (expected raw, z1, z, z1z2, or z1mu2)"
        ))
    })
}

fn cmd_eval_invariance(cli: &Cli, args: &EvalInvarianceArgs, cfg: RunConfig) -> Result<()> {
    cfg.validate()?;
    let root = data_root(cli)?;
    let fhvae_ckpt = args.fhvae.as_ref().map(read_checkpoint).transpose()?;
    let vae_ckpt = args.vae.as_ref().map(read_checkpoint).transpose()?;
    let models = ReportModels {
        fhvae: fhvae_ckpt
            .as_ref()
            .map(|c| (&c.params, &c.table, c.seq_label)),
        vae: vae_ckpt.as_ref().map(|c| &c.params),
    };

    let features = match &args.features {
        Some(names) => names
            .iter()
            .map(|n| parse_feature(n))
            .collect::<Result<Vec<_>>>()?,
        None => {
            let mut fs = vec![ReportFeature::Raw];
            if vae_ckpt.is_some() {
                fs.push(ReportFeature::Latent(ExtractionMode::ZVae));
            }
            if fhvae_ckpt.is_some() {
                fs.push(ReportFeature::Latent(ExtractionMode::Z1));
            }
            fs
        }
    };

    let train = load_split(&root, "train")?;
    let test_clean = load_split(&root, "test_clean")?;
    let test_shifted = load_split(&root, "test_shifted")?;
    let seed = cli.seed.unwrap_or(cfg.train.seed);
    let report = invariance_report(&models, &train, &test_clean, &test_shifted, &features, seed)?;
    print!("{}", report.to_text());
    if let Some(out) = &args.out {
        create_out_dir(out)?;
        write_config(out, &cfg)?;
        let txt = out.join("report.txt");
        std::fs::write(&txt, report.to_text()).map_err(|e| Error::io(txt, e))?;
        let json = out.join("report.json");
        std::fs::write(&json, report.to_json()).map_err(|e| Error::io(json, e))?;
        println!("wrote report to {}", out.display());
    }
    Ok(())
}

fn cmd_eval_collapse(args: &EvalCollapseArgs) -> Result<()> {
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let spread = svector_spread(&ckpt.table)?;
    println!(
        "svector_spread {spread:.6} ({} sequences)",
        ckpt.table.num_sequences()
    );
    Ok(())
}

/// Directory-name-safe rendering of an alpha value (10 -> "10", 0.5 -> "0_5").
fn alpha_tag(alpha: f64) -> String {
    if alpha.fract() == 0.0 {
        format!("{}", alpha as i64)
    } else {
        format!("{alpha}").replace('.', "_")
    }
}

fn cmd_sweep_alpha(cli: &Cli, args: &SweepAlphaArgs, mut cfg: RunConfig) -> Result<()> {
    if args.alphas.is_empty() {
        return Err(Error::Config("sweep needs at least one alpha".into()));
    }
    let seq_label = *cfg.seq_label.get_or_insert(SeqLabel::UttId);
    // The sweep varies the discriminative weight, which only the factorized
    // model has.
    if cfg.mode == Some(ModelMode::Vae) {
        return Err(Error::Config("sweep-alpha requires fhvae mode".into()));
    }
    cfg.mode = Some(ModelMode::Fhvae);
    cfg.validate()?;
    let root = data_root(cli)?;
    let (train, dev) = load_train_dev(&root, &cfg, seq_label)?;
    let test_clean = load_split(&root, "test_clean")?;
    let test_shifted = load_split(&root, "test_shifted")?;
    let probe_seed = cli.seed.unwrap_or(cfg.train.seed);

    let mut summary = String::from("alpha\tshifted_z1_err\tclean_z1_err\tsvector_spread\n");
    let mut stdout_lines = Vec::new();
    for &alpha in &args.alphas {
        let mut run_cfg = cfg.clone();
        run_cfg.train.alpha = alpha;
        run_cfg.validate()?;
        let (params, table, report) = train_model(&run_cfg, ModelMode::Fhvae, &train, &dev)?;
        let spread = svector_spread(&table)?;
        let ckpt = Checkpoint {
            params,
            table,
            seq_label,
        };
        let sub = args.out.join(format!("alpha_{}", alpha_tag(alpha)));
        write_training_outputs(&sub, &run_cfg, &ckpt, &report)?;

        let models = ReportModels {
            fhvae: Some((&ckpt.params, &ckpt.table, seq_label)),
            vae: None,
        };
        let inv = invariance_report(
            &models,
            &train,
            &test_clean,
            &test_shifted,
            &[ReportFeature::Latent(ExtractionMode::Z1)],
            probe_seed,
        )?;
        let cell = &inv.cells[0];
        summary.push_str(&format!(
            "{alpha}\t{:.2}\t{:.2}\t{:.6}\n",
            cell.shifted_error, cell.clean_error, spread
        ));
        stdout_lines.push(format!(
            "alpha {alpha}: shifted z1 error {:.2}%, clean {:.2}%, spread {:.4}",
            cell.shifted_error, cell.clean_error, spread
        ));
    }
    let path = args.out.join("sweep.txt");
    std::fs::write(&path, &summary).map_err(|e| Error::io(path.clone(), e))?;
    for line in stdout_lines {
        println!("{line}");
    }
    println!("wrote {}", path.display());
    Ok(())
}
