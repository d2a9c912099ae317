//! Run directories: configuration files, training runs persisted as
//! `runs/<name>/{manifest.json, checkpoints/*, history.csv}`, and their
//! evaluation into `per_sample.csv` / `report.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::apple::{AppleHyperparams, DiscriminatorConfig, GeneratorConfig, PerturberBundle};
use crate::data::{load_dataset, split_dataset, AttributeSpec, LoadOptions, SegDataset};
use crate::error::{FairsegError, IoContext, Result};
use crate::evaluation::{embeddings, evaluate, EvalReport, Predictor};
use crate::metrics::{aggregate_runs, AggregateReport, Ddof, UtilityVector};
use crate::reporting::{build_table, ExperimentTable, RunEvaluation};
use crate::segmentor::{UNet, UNetConfig};
use crate::training::{
    train_apple, train_baseline, train_probe, train_resampled, train_subgroup_models, History, ProbeResult,
    TrainConfig,
};

pub const RUN_MANIFEST: &str = "manifest.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.json";
pub const PER_SAMPLE_FILE: &str = "per_sample.csv";

/// Network sizes and working resolution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 256x256 input, full-width U-Net and `G_p`.
    #[default]
    Standard,
    /// 64x64 input, narrow networks.
    Desk,
}

impl Profile {
    pub fn resolution(self) -> usize {
        match self {
            Profile::Standard => 256,
            Profile::Desk => 64,
        }
    }

    pub fn unet(self, in_channels: usize, num_classes: usize) -> UNetConfig {
        match self {
            Profile::Standard => UNetConfig::standard(in_channels, num_classes),
            Profile::Desk => UNetConfig::desk(in_channels, num_classes),
        }
    }

    pub fn generator(self) -> GeneratorConfig {
        match self {
            Profile::Standard => GeneratorConfig::default(),
            Profile::Desk => GeneratorConfig::desk(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root in the `images/`, `masks/`, `metadata.csv` layout.
    pub root: PathBuf,
    /// `sex` or `age`.
    pub attribute: String,
    /// Train fraction of the stratified train/test split.
    pub split_ratio: f64,
    pub split_seed: u64,
    /// Overrides the profile's resolution.
    pub resolution: Option<usize>,
    pub num_classes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/synth"),
            attribute: "sex".into(),
            split_ratio: 0.7,
            split_seed: 0,
            resolution: None,
            num_classes: 2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Parse TOML; unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| FairsegError::config("config", e.message().to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).at(path)?)
    }

    pub fn resolution(&self) -> usize {
        self.data.resolution.unwrap_or(self.profile.resolution())
    }

    pub fn attribute(&self) -> Result<AttributeSpec> {
        AttributeSpec::by_name(&self.data.attribute)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.attribute()?;
        if !(self.data.split_ratio > 0.0 && self.data.split_ratio < 1.0) {
            return Err(FairsegError::config(
                "data.split_ratio",
                format!("{} not in (0, 1)", self.data.split_ratio),
            ));
        }
        if self.resolution() < 16 || self.resolution() % 16 != 0 {
            return Err(FairsegError::config(
                "data.resolution",
                format!("{} must be a positive multiple of 16", self.resolution()),
            ));
        }
        Ok(())
    }

    /// Load the dataset and split it into (train, test).
    pub fn load_split(&self) -> Result<(SegDataset, SegDataset)> {
        let ds = load_dataset(
            &self.data.root,
            &self.attribute()?,
            &LoadOptions {
                resolution: Some(self.resolution()),
                num_classes: self.data.num_classes,
            },
        )?;
        split_dataset(&ds, self.data.split_ratio, self.data.split_seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Baseline,
    Apple,
    Rs,
    Sm,
}

impl RunKind {
    pub fn label(self) -> &'static str {
        match self {
            RunKind::Baseline => "Baseline",
            RunKind::Apple => "APPLE",
            RunKind::Rs => "RS",
            RunKind::Sm => "SM",
        }
    }
}

/// Everything needed to reload and interpret a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    /// Repeat group; runs of one `--repeats` invocation share it.
    pub group: String,
    pub kind: RunKind,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub attribute: AttributeSpec,
    pub unet: UNetConfig,
    pub generator: Option<GeneratorConfig>,
    pub discriminator: Option<DiscriminatorConfig>,
    /// Baseline run an APPLE run perturbs.
    pub base_run: Option<PathBuf>,
    /// SHA-256 of the frozen segmentor before and after APPLE training, or
    /// of the saved segmentor(s) otherwise.
    pub frozen_hash_start: Vec<String>,
    pub frozen_hash_end: Vec<String>,
    /// Selected epoch per segmentor; empty for APPLE (final epoch kept).
    pub selected_epochs: Vec<usize>,
    /// Checkpoint directories relative to the run directory.
    pub checkpoints: Vec<String>,
    pub requires_attribute: bool,
    pub version: String,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(RUN_MANIFEST);
        if !path.exists() {
            return Err(FairsegError::MissingCheckpoint {
                path: run_dir.to_path_buf(),
                hint: "no run manifest here; train a run first (`fairseg train`)".into(),
            });
        }
        Ok(serde_json::from_str(&fs::read_to_string(&path).at(&path)?)?)
    }

    fn save(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(RUN_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(self)?).at(&path)
    }
}

/// Seeds of `repeats` runs derived from `master`.
pub fn repeat_seeds(master: u64, repeats: usize) -> Vec<u64> {
    (0..repeats as u64).map(|r| master.wrapping_add(r)).collect()
}

/// Run names for `repeats` runs of group `name`: the bare name for a single
/// run, `name-r{i}` otherwise.
pub fn repeat_names(name: &str, repeats: usize) -> Vec<String> {
    if repeats == 1 {
        vec![name.to_string()]
    } else {
        (0..repeats).map(|r| format!("{name}-r{r}")).collect()
    }
}

/// Create an empty run directory, refusing to touch an existing one unless
/// `force` is set.
pub fn prepare_run_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !force {
            return Err(FairsegError::RunExists(dir.to_path_buf()));
        }
        fs::remove_dir_all(dir).at(dir)?;
    }
    fs::create_dir_all(dir.join("checkpoints")).at(dir)
}

fn write_history(dir: &Path, text: &str) -> Result<()> {
    let path = dir.join(HISTORY_FILE);
    fs::write(&path, text).at(&path)
}

/// History of several subgroup models, one block per model with a leading
/// `model` column.
fn stacked_history(histories: &[&History], num_subgroups: usize) -> Result<String> {
    let mut out = String::new();
    for (k, h) in histories.iter().enumerate() {
        let csv = h.to_csv(num_subgroups)?;
        for (i, line) in csv.lines().enumerate() {
            if i == 0 {
                if k == 0 {
                    out.push_str(&format!("model,{line}\n"));
                }
            } else {
                out.push_str(&format!("{k},{line}\n"));
            }
        }
    }
    Ok(out)
}

/// One training run.
#[derive(Debug, Clone)]
pub struct RunRequest<'a> {
    pub name: String,
    pub group: String,
    pub kind: RunKind,
    pub config: ExperimentConfig,
    /// Baseline run directory, required for APPLE.
    pub base_run: Option<&'a Path>,
    pub force: bool,
}

/// Train one run on `train` and persist it under `runs_root/<name>`.
pub fn execute_run(runs_root: &Path, req: &RunRequest<'_>, train: &SegDataset) -> Result<RunManifest> {
    req.config.validate()?;
    let (c, _, _) = train
        .image_dims()
        .ok_or_else(|| FairsegError::Invalid("training set is empty".into()))?;
    let cfg = &req.config;
    let arch = cfg.profile.unet(c, cfg.data.num_classes);
    let attribute = cfg.attribute()?;
    let dir = runs_root.join(&req.name);

    // Resolve the base segmentor before touching the run directory.
    let base = match (req.kind, req.base_run) {
        (RunKind::Apple, None) => {
            return Err(FairsegError::MissingCheckpoint {
                path: runs_root.to_path_buf(),
                hint: "APPLE needs a frozen baseline; run `fairseg train --kind baseline` first and pass it with --base"
                    .into(),
            })
        }
        (RunKind::Apple, Some(base_dir)) => Some(load_frozen_baseline(base_dir, &attribute)?),
        _ => None,
    };
    prepare_run_dir(&dir, req.force)?;

    let mut manifest = RunManifest {
        name: req.name.clone(),
        group: req.group.clone(),
        kind: req.kind,
        seed: cfg.train.seed,
        config: cfg.clone(),
        attribute: attribute.clone(),
        unet: arch.clone(),
        generator: None,
        discriminator: None,
        base_run: req.base_run.map(Path::to_path_buf),
        frozen_hash_start: Vec::new(),
        frozen_hash_end: Vec::new(),
        selected_epochs: Vec::new(),
        checkpoints: Vec::new(),
        requires_attribute: req.kind == RunKind::Sm,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    match req.kind {
        RunKind::Baseline | RunKind::Rs => {
            let mut run = if req.kind == RunKind::Baseline {
                train_baseline(train, &arch, &cfg.train)?
            } else {
                train_resampled(train, &arch, &cfg.train)?
            };
            let hash = run.model.freeze();
            run.model.save(&dir.join("checkpoints/segmentor"))?;
            write_history(&dir, &run.history.to_csv(train.num_subgroups())?)?;
            manifest.frozen_hash_start.push(hash.clone());
            manifest.frozen_hash_end.push(hash);
            manifest.selected_epochs.push(run.selected_epoch);
            manifest.checkpoints.push("checkpoints/segmentor".into());
        }
        RunKind::Sm => {
            let runs = train_subgroup_models(train, &arch, &cfg.train)?;
            let histories: Vec<&History> = runs.iter().map(|r| &r.history).collect();
            write_history(&dir, &stacked_history(&histories, train.num_subgroups())?)?;
            for (k, mut run) in runs.into_iter().enumerate() {
                let hash = run.model.freeze();
                let rel = format!("checkpoints/subgroup_{k}");
                run.model.save(&dir.join(&rel))?;
                manifest.frozen_hash_start.push(hash.clone());
                manifest.frozen_hash_end.push(hash);
                manifest.selected_epochs.push(run.selected_epoch);
                manifest.checkpoints.push(rel);
            }
        }
        RunKind::Apple => {
            let (seg, base_manifest) = base.expect("resolved above");
            let (_, h, w) = train.image_dims().expect("non-empty");
            let gcfg = cfg.profile.generator();
            let dcfg = DiscriminatorConfig::default();
            let hyper = AppleHyperparams {
                alpha: cfg.train.alpha,
                beta: cfg.train.beta,
            };
            let mut bundle = PerturberBundle::new(
                gcfg.clone(),
                dcfg.clone(),
                hyper,
                seg.config().embedding_channels(),
                seg.config().embedding_spatial(h, w)?,
                train.num_subgroups(),
                cfg.train.seed,
            )?;
            let run = train_apple(&seg, &mut bundle, train, &cfg.train)?;
            bundle.save(&dir.join("checkpoints/apple"), &run.frozen_hash_end, cfg.train.seed)?;
            write_history(&dir, &run.history.to_csv(train.num_subgroups())?)?;
            manifest.unet = base_manifest.unet;
            manifest.generator = Some(gcfg);
            manifest.discriminator = Some(dcfg);
            manifest.frozen_hash_start.push(run.frozen_hash_start);
            manifest.frozen_hash_end.push(run.frozen_hash_end);
            manifest.checkpoints.push("checkpoints/apple".into());
        }
    }
    manifest.save(&dir)?;
    Ok(manifest)
}

fn load_frozen_baseline(base_dir: &Path, attribute: &AttributeSpec) -> Result<(UNet, RunManifest)> {
    let m = RunManifest::load(base_dir).map_err(|_| FairsegError::MissingCheckpoint {
        path: base_dir.to_path_buf(),
        hint: "no baseline run here; run `fairseg train --kind baseline` first".into(),
    })?;
    if m.kind != RunKind::Baseline {
        return Err(FairsegError::Invalid(format!(
            "{} is a {} run; APPLE needs a baseline run",
            base_dir.display(),
            m.kind.label()
        )));
    }
    if m.attribute.name != attribute.name {
        return Err(FairsegError::Invalid(format!(
            "baseline was trained with attribute `{}`, APPLE asks for `{}`",
            m.attribute.name, attribute.name
        )));
    }
    let mut seg = UNet::load(&base_dir.join("checkpoints/segmentor"))?;
    if !seg.is_frozen() {
        seg.freeze();
    }
    Ok((seg, m))
}

/// Reloaded models of a run.
#[derive(Debug, Clone)]
pub enum RunModels {
    Segmentor(UNet),
    Apple(UNet, PerturberBundle),
    Subgroup(Vec<UNet>),
}

impl RunModels {
    pub fn predictor(&self) -> Predictor<'_> {
        match self {
            RunModels::Segmentor(net) => Predictor::Segmentor(net),
            RunModels::Apple(net, b) => Predictor::Apple(net, &b.generator),
            RunModels::Subgroup(nets) => Predictor::Subgroup(nets),
        }
    }
}

/// Reload a run's checkpoints. APPLE runs also reload their baseline and
/// check that it still has the hash recorded at training time.
pub fn load_run(run_dir: &Path) -> Result<(RunManifest, RunModels)> {
    let m = RunManifest::load(run_dir)?;
    let models = match m.kind {
        RunKind::Baseline | RunKind::Rs => RunModels::Segmentor(UNet::load(&run_dir.join(&m.checkpoints[0]))?),
        RunKind::Sm => RunModels::Subgroup(
            m.checkpoints
                .iter()
                .map(|c| UNet::load(&run_dir.join(c)))
                .collect::<Result<_>>()?,
        ),
        RunKind::Apple => {
            let base = m.base_run.as_ref().ok_or_else(|| {
                FairsegError::Invalid(format!("APPLE run {} records no base run", run_dir.display()))
            })?;
            let (seg, _) = load_frozen_baseline(base, &m.attribute)?;
            let (bundle, am) = PerturberBundle::load(&run_dir.join(&m.checkpoints[0]))?;
            if am.base_segmentor_sha256 != seg.param_hash() {
                return Err(FairsegError::Invalid(format!(
                    "baseline {} changed since APPLE run {} was trained (hash mismatch)",
                    base.display(),
                    run_dir.display()
                )));
            }
            RunModels::Apple(seg, bundle)
        }
    };
    Ok((m, models))
}

/// Per-run `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: String,
    pub group: String,
    pub kind: RunKind,
    pub seed: u64,
    pub dataset: String,
    pub evaluation: EvalReport,
    /// Attribute-probe accuracy on perturbed (APPLE) or raw embeddings.
    pub probe: Option<ProbeResult>,
}

impl RunReport {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(REPORT_FILE);
        if !path.exists() {
            return Err(FairsegError::MissingCheckpoint {
                path: run_dir.to_path_buf(),
                hint: "run has not been evaluated; run `fairseg evaluate` first".into(),
            });
        }
        Ok(serde_json::from_str(&fs::read_to_string(&path).at(&path)?)?)
    }
}

/// Evaluate a run on `test`, optionally fitting an attribute probe for
/// `probe_epochs` epochs on `train` embeddings, and write `per_sample.csv`
/// and `report.json` into the run directory.
pub fn evaluate_run(
    run_dir: &Path,
    dataset_name: &str,
    train: &SegDataset,
    test: &SegDataset,
    probe_epochs: usize,
) -> Result<RunReport> {
    let (m, models) = load_run(run_dir)?;
    if m.attribute.name != test.attribute_name() || m.attribute.num_subgroups() != test.num_subgroups() {
        return Err(FairsegError::Invalid(format!(
            "run {} was trained with attribute `{}` (K = {}), dataset uses `{}` (K = {})",
            m.name,
            m.attribute.name,
            m.attribute.num_subgroups(),
            test.attribute_name(),
            test.num_subgroups()
        )));
    }
    let evaluation = evaluate(&models.predictor(), test)?;
    let probe = match (&models, probe_epochs) {
        (_, 0) | (RunModels::Subgroup(_), _) => None,
        (RunModels::Segmentor(net), _) => Some(probe_embeddings(net, None, train, test, probe_epochs, &m)?),
        (RunModels::Apple(net, b), _) => {
            Some(probe_embeddings(net, Some(b), train, test, probe_epochs, &m)?)
        }
    };
    let report = RunReport {
        run: m.name.clone(),
        group: m.group.clone(),
        kind: m.kind,
        seed: m.seed,
        dataset: dataset_name.to_string(),
        evaluation,
        probe,
    };
    let path = run_dir.join(PER_SAMPLE_FILE);
    fs::write(&path, report.evaluation.per_sample_csv()?).at(&path)?;
    let path = run_dir.join(REPORT_FILE);
    fs::write(&path, serde_json::to_string_pretty(&report)?).at(&path)?;
    Ok(report)
}

fn probe_embeddings(
    net: &UNet,
    bundle: Option<&PerturberBundle>,
    train: &SegDataset,
    test: &SegDataset,
    epochs: usize,
    m: &RunManifest,
) -> Result<ProbeResult> {
    let gp = bundle.map(|b| &b.generator);
    let f_train = embeddings(net, gp, train)?;
    let f_test = embeddings(net, gp, test)?;
    train_probe(
        &f_train,
        &train.attributes(),
        &f_test,
        &test.attributes(),
        test.num_subgroups(),
        epochs,
        &m.config.train,
    )
}

/// Repeat-aggregated metrics of one run group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub kind: RunKind,
    pub runs: Vec<String>,
    pub utilities: Vec<UtilityVector>,
    pub aggregate_sample: AggregateReport,
    pub aggregate_population: AggregateReport,
}

/// Combined `report.json` of an evaluation over several runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub dataset: String,
    pub attribute: String,
    pub groups: Vec<GroupSummary>,
    pub table: ExperimentTable,
}

/// Group run reports by repeat group (first-appearance order) and build the
/// comparison table.
pub fn summarize(reports: &[RunReport], ddof: Ddof) -> Result<EvaluationSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in reports {
        if !order.contains(&r.group.as_str()) {
            order.push(&r.group);
        }
    }
    let mut groups = Vec::new();
    let mut table_input = Vec::new();
    for name in order {
        let members: Vec<&RunReport> = reports.iter().filter(|r| r.group == name).collect();
        let evals = members
            .iter()
            .map(|r| RunEvaluation::from_report(&r.dataset, &r.evaluation))
            .collect::<Result<Vec<_>>>()?;
        let agg = |d: Ddof| aggregate_runs(&evals.iter().map(|e| e.fairness(d).clone()).collect::<Vec<_>>());
        groups.push(GroupSummary {
            group: name.to_string(),
            kind: members[0].kind,
            runs: members.iter().map(|r| r.run.clone()).collect(),
            utilities: members.iter().map(|r| r.evaluation.utilities.clone()).collect(),
            aggregate_sample: agg(Ddof::Sample)?,
            aggregate_population: agg(Ddof::Population)?,
        });
        table_input.push((name.to_string(), evals));
    }
    let table = build_table(&table_input, ddof)?;
    Ok(EvaluationSummary {
        dataset: table.dataset.clone(),
        attribute: table.attribute.clone(),
        groups,
        table,
    })
}

impl EvaluationSummary {
    /// `report.json` plus `table.{csv,txt,md}` in `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        let path = dir.join(REPORT_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?).at(&path)?;
        self.table.write(dir)
    }
}
