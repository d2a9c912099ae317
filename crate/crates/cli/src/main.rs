use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fairseg::data::SegDataset;
use fairseg::experiment::{
    evaluate_run, execute_run, repeat_names, repeat_seeds, summarize, ExperimentConfig, Profile, RunKind,
    RunManifest, RunReport, RunRequest,
};
use fairseg::metrics::Ddof;
use fairseg::reporting::{beta_sweep_summary, BetaRuns, RunEvaluation};
use fairseg::synth::{generate, ShapeFamily, SynthConfig};
use fairseg::FairsegError;

#[derive(Parser)]
#[command(name = "fairseg", version, about = "Fair segmentation via adversarial latent perturbation")]
struct Cli {
    /// Root for `runs/`, `reports/` and the default synthetic data directory.
    #[arg(long, global = true, env = "FAIRSEG_OUT_ROOT", default_value = ".")]
    out_root: PathBuf,
    /// Network and resolution profile; overrides the config file.
    #[arg(long, global = true, value_enum)]
    profile: Option<ProfileArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Standard,
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Baseline,
    Apple,
    Rs,
    Sm,
}

#[derive(Clone, Copy, ValueEnum)]
enum DdofArg {
    Sample,
    Population,
}

impl From<DdofArg> for Ddof {
    fn from(d: DdofArg) -> Self {
        match d {
            DdofArg::Sample => Ddof::Sample,
            DdofArg::Population => Ddof::Population,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train baseline, APPLE, RS or SM runs.
    Train(TrainArgs),
    /// Evaluate runs on their test split and tabulate them.
    Evaluate(EvaluateArgs),
    /// Train and evaluate one APPLE run per beta value.
    SweepBeta(SweepArgs),
    /// Rebuild tables from already evaluated runs.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// TOML file with SynthConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default `<out-root>/data/synth`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    attribute_balance: Option<f64>,
    #[arg(long)]
    difficulty_gap: Option<f64>,
    #[arg(long, value_enum)]
    shape: Option<ShapeArg>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShapeArg {
    Ellipse,
    Blob,
}

/// Overrides shared by the training commands.
#[derive(Args, Clone)]
struct ExperimentArgs {
    /// TOML file with `profile`, `[data]` and `[train]` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sensitive attribute (`sex` or `age`).
    #[arg(long)]
    attribute: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Master seed; repeats use seed, seed + 1, ...
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    device: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    /// Run name; defaults to the kind.
    #[arg(long)]
    name: Option<String>,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Baseline run directory (or name under `<out-root>/runs`) for APPLE;
    /// give one per repeat or a single one shared by all.
    #[arg(long)]
    base: Vec<String>,
    /// Fairness weight; overrides the config file.
    #[arg(long)]
    beta: Option<f64>,
    /// Replace existing run directories.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    exp: ExperimentArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Run directories or names under `<out-root>/runs`.
    #[arg(required = true)]
    runs: Vec<String>,
    /// Evaluate on this dataset root instead of the one each run trained on.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Expected attribute; a mismatch with the runs is an error.
    #[arg(long)]
    attribute: Option<String>,
    /// Report directory name under `<out-root>/reports`.
    #[arg(long, default_value = "evaluation")]
    name: String,
    /// Epochs for an attribute probe on the embeddings; 0 disables it.
    #[arg(long, default_value_t = 0)]
    probe_epochs: usize,
    #[arg(long, value_enum, default_value = "sample")]
    ddof: DdofArg,
}

#[derive(Args)]
struct SweepArgs {
    /// Baseline run directories or names, one per repeat.
    #[arg(long, required = true)]
    base: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 1.0, 5.0])]
    betas: Vec<f64>,
    #[arg(long, default_value = "sweep")]
    name: String,
    #[arg(long, default_value_t = 0)]
    probe_epochs: usize,
    #[arg(long, value_enum, default_value = "sample")]
    ddof: DdofArg,
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    exp: ExperimentArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Evaluated run directories or names.
    #[arg(required = true)]
    runs: Vec<String>,
    #[arg(long, default_value = "report")]
    name: String,
    #[arg(long, value_enum, default_value = "sample")]
    ddof: DdofArg,
}

fn runs_root(cli: &Cli) -> PathBuf {
    cli.out_root.join("runs")
}

/// A run given either as a path or as a name under `<out-root>/runs`.
fn resolve_run(cli: &Cli, run: &str) -> PathBuf {
    let p = PathBuf::from(run);
    if p.join("manifest.json").exists() || p.components().count() > 1 {
        p
    } else {
        runs_root(cli).join(run)
    }
}

fn experiment_config(cli: &Cli, a: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(p) = cli.profile {
        cfg.profile = match p {
            ProfileArg::Standard => Profile::Standard,
            ProfileArg::Desk => Profile::Desk,
        };
    }
    if a.config.is_none() && a.data.is_none() {
        cfg.data.root = cli.out_root.join("data/synth");
    }
    if let Some(d) = &a.data {
        cfg.data.root = d.clone();
    }
    if let Some(v) = &a.attribute {
        cfg.data.attribute = v.clone();
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.alpha {
        cfg.train.alpha = v;
    }
    if let Some(v) = &a.device {
        cfg.train.device = v.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).map_err(|e| FairsegError::Config {
                field: "config".into(),
                reason: e.message().to_string(),
            })?
        }
        None => SynthConfig::default(),
    };
    if let Some(v) = a.n_samples {
        cfg.n_samples = v;
    }
    if let Some(v) = a.resolution {
        cfg.resolution = v;
    }
    if let Some(v) = a.attribute_balance {
        cfg.attribute_balance = v;
    }
    if let Some(v) = a.difficulty_gap {
        cfg.difficulty_gap = v;
    }
    if let Some(v) = a.shape {
        cfg.shape = match v {
            ShapeArg::Ellipse => ShapeFamily::Ellipse,
            ShapeArg::Blob => ShapeFamily::Blob,
        };
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let out = a.out.clone().unwrap_or_else(|| cli.out_root.join("data/synth"));
    let ds = generate(&cfg, Some(&out))?;
    println!(
        "wrote {} samples to {} (subgroup counts {:?})",
        ds.len(),
        out.display(),
        ds.subgroup_counts()
    );
    Ok(())
}

/// Base runs paired with `repeats` repeats.
fn pair_bases(cli: &Cli, bases: &[String], repeats: usize) -> Result<Vec<PathBuf>> {
    let dirs: Vec<PathBuf> = bases.iter().map(|b| resolve_run(cli, b)).collect();
    match dirs.len() {
        1 => Ok(vec![dirs[0].clone(); repeats]),
        n if n == repeats => Ok(dirs),
        n => bail!(FairsegError::Invalid(format!(
            "got {n} base runs for {repeats} repeats; give one or one per repeat"
        ))),
    }
}

fn train_group(
    cli: &Cli,
    kind: RunKind,
    group: &str,
    cfg: &ExperimentConfig,
    bases: Option<&[PathBuf]>,
    repeats: usize,
    force: bool,
    split: &(SegDataset, SegDataset),
) -> Result<Vec<PathBuf>> {
    let root = runs_root(cli);
    let mut dirs = Vec::new();
    for (r, (name, seed)) in repeat_names(group, repeats)
        .into_iter()
        .zip(repeat_seeds(cfg.train.seed, repeats))
        .enumerate()
    {
        let mut run_cfg = cfg.clone();
        run_cfg.train.seed = seed;
        let req = RunRequest {
            name: name.clone(),
            group: group.to_string(),
            kind,
            config: run_cfg,
            base_run: bases.map(|b| b[r].as_path()),
            force,
        };
        log::info!("training {} run `{name}` (seed {seed})", kind.label());
        let m = execute_run(&root, &req, &split.0)?;
        println!("trained {} run {}", m.kind.label(), root.join(&name).display());
        dirs.push(root.join(name));
    }
    Ok(dirs)
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    if a.repeats == 0 {
        bail!(FairsegError::Config {
            field: "repeats".into(),
            reason: "must be >= 1".into()
        });
    }
    let mut cfg = experiment_config(cli, &a.exp)?;
    if let Some(b) = a.beta {
        cfg.train.beta = b;
        cfg.validate()?;
    }
    let kind = match a.kind {
        KindArg::Baseline => RunKind::Baseline,
        KindArg::Apple => RunKind::Apple,
        KindArg::Rs => RunKind::Rs,
        KindArg::Sm => RunKind::Sm,
    };
    let bases = if kind == RunKind::Apple {
        if a.base.is_empty() {
            bail!(FairsegError::MissingCheckpoint {
                path: runs_root(cli),
                hint: "APPLE needs a frozen baseline; run `fairseg train --kind baseline` first and pass it with --base"
                    .into(),
            });
        }
        Some(pair_bases(cli, &a.base, a.repeats)?)
    } else {
        None
    };
    let split = cfg.load_split()?;
    let group = a.name.clone().unwrap_or_else(|| match kind {
        RunKind::Baseline => "baseline".into(),
        RunKind::Apple => "apple".into(),
        RunKind::Rs => "rs".into(),
        RunKind::Sm => "sm".into(),
    });
    train_group(cli, kind, &group, &cfg, bases.as_deref(), a.repeats, a.force, &split)?;
    Ok(())
}

/// Test and train splits, cached per (root, attribute, split) so that runs
/// sharing a dataset load it once.
struct SplitCache(HashMap<String, (SegDataset, SegDataset)>);

impl SplitCache {
    fn get(&mut self, cfg: &ExperimentConfig) -> Result<&(SegDataset, SegDataset)> {
        let key = format!(
            "{}|{}|{}|{}|{}",
            cfg.data.root.display(),
            cfg.data.attribute,
            cfg.data.split_ratio,
            cfg.data.split_seed,
            cfg.resolution()
        );
        if !self.0.contains_key(&key) {
            let split = cfg.load_split()?;
            self.0.insert(key.clone(), split);
        }
        Ok(&self.0[&key])
    }
}

fn evaluate_dirs(
    dirs: &[PathBuf],
    data: Option<&Path>,
    attribute: Option<&str>,
    probe_epochs: usize,
) -> Result<Vec<RunReport>> {
    let mut cache = SplitCache(HashMap::new());
    let mut reports = Vec::new();
    for dir in dirs {
        let m = RunManifest::load(dir)?;
        if let Some(want) = attribute {
            if want != m.attribute.name {
                bail!(FairsegError::Invalid(format!(
                    "run {} was trained with attribute `{}`, not `{want}`",
                    dir.display(),
                    m.attribute.name
                )));
            }
        }
        let mut cfg = m.config.clone();
        if let Some(d) = data {
            cfg.data.root = d.to_path_buf();
        }
        let dataset_name = cfg.data.root.display().to_string();
        let (train, test) = cache.get(&cfg)?;
        let report = evaluate_run(dir, &dataset_name, train, test, probe_epochs)?;
        let f = report.evaluation.fairness(Ddof::Sample);
        println!(
            "{}: dice {:.4}{}",
            m.name,
            report.evaluation.mean_dice(),
            f.map(|f| format!(", delta {:.4}", f.delta)).unwrap_or_default()
        );
        reports.push(report);
    }
    Ok(reports)
}

fn cmd_evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let dirs: Vec<PathBuf> = a.runs.iter().map(|r| resolve_run(cli, r)).collect();
    let reports = evaluate_dirs(&dirs, a.data.as_deref(), a.attribute.as_deref(), a.probe_epochs)?;
    let out = cli.out_root.join("reports").join(&a.name);
    let summary = summarize(&reports, a.ddof.into())?;
    summary.write(&out)?;
    print!("{}", summary.table.to_text());
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_sweep(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let cfg = experiment_config(cli, &a.exp)?;
    let bases = pair_bases(cli, &a.base, a.base.len())?;
    let split = cfg.load_split()?;
    let mut entries = Vec::new();
    for &beta in &a.betas {
        let mut run_cfg = cfg.clone();
        run_cfg.train.beta = beta;
        run_cfg.validate()?;
        let group = format!("{}-beta{beta}", a.name);
        let dirs = train_group(cli, RunKind::Apple, &group, &run_cfg, Some(&bases), bases.len(), a.force, &split)?;
        let reports = evaluate_dirs(&dirs, None, None, a.probe_epochs)?;
        entries.push(BetaRuns {
            beta,
            evaluations: reports
                .iter()
                .map(|r| RunEvaluation::from_report(&r.dataset, &r.evaluation))
                .collect::<fairseg::Result<_>>()?,
            probe_accuracy: reports.iter().filter_map(|r| r.probe.map(|p| p.accuracy)).collect(),
        });
    }
    let summary = beta_sweep_summary(&entries, a.ddof.into())?;
    let out = cli.out_root.join("reports").join(&a.name);
    summary.write(&out)?;
    let path = out.join("beta_sweep.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?).with_context(|| format!("writing {}", path.display()))?;
    print!("{}", summary.to_text());
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_report(cli: &Cli, a: &ReportArgs) -> Result<()> {
    let reports = a
        .runs
        .iter()
        .map(|r| RunReport::load(&resolve_run(cli, r)))
        .collect::<fairseg::Result<Vec<_>>>()?;
    let out = cli.out_root.join("reports").join(&a.name);
    let summary = summarize(&reports, a.ddof.into())?;
    summary.write(&out)?;
    print!("{}", summary.table.to_text());
    println!("wrote {}", out.display());
    Ok(())
}

fn category(err: &anyhow::Error) -> &'static str {
    match err.downcast_ref::<FairsegError>() {
        Some(e) => e.category(),
        None if err.downcast_ref::<std::io::Error>().is_some() => "io",
        None => "internal",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(&cli, a),
        Command::Train(a) => cmd_train(&cli, a),
        Command::Evaluate(a) => cmd_evaluate(&cli, a),
        Command::SweepBeta(a) => cmd_sweep(&cli, a),
        Command::Report(a) => cmd_report(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{}]: {msg}", category(&e));
            ExitCode::FAILURE
        }
    }
}
