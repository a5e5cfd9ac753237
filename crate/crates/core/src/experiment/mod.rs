//! Config-driven experiment grids.
//!
//! A TOML file names one dataset, a list of seeds and a list of methods
//! (each a set of [`TrainConfig`] overrides). [`run`] trains every
//! (method, seed) cell and keeps a JSON [`ResultsManifest`] up to date after
//! each cell; [`report`] turns a manifest into mean/std tables.

mod report;

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    build_longtail_profile, content_hash, save_dataset, shot_groups, subsample_indices,
    synth_context_shift, ClassHistogram, ContextShiftSpec, Dataset, ImageMeta, LongTailSpec,
    Profile, ShotThresholds, Split,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::nn::{save_checkpoint, train, TrainConfig, TrainHistory};
use crate::rng::{stream, tag};

pub use report::{mean_std, report, MethodSummary, MetricSummary, Report, REPORT_METRICS};

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Long-tailed glyph corpus where tail classes see few backgrounds.
    ContextShift,
    /// Long-tailed subsample of a balanced glyph corpus; every class sees
    /// every background.
    Longtail,
}

fn default_backgrounds() -> usize {
    8
}
fn default_exposure() -> usize {
    1
}
fn default_side() -> usize {
    16
}
fn default_noise() -> f64 {
    0.03
}
fn default_test_per_class() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    #[serde(default)]
    pub seed: u64,
    pub num_classes: usize,
    pub n_max: usize,
    pub rho: f64,
    #[serde(default)]
    pub profile: Profile,
    #[serde(default = "default_backgrounds")]
    pub backgrounds: usize,
    #[serde(default = "default_exposure")]
    pub minority_exposure: usize,
    /// Defaults to the many-shot threshold for `n_max`.
    #[serde(default)]
    pub head_threshold: Option<usize>,
    #[serde(default = "default_side")]
    pub side: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
}

/// A generated train/test pair with per-image bookkeeping.
#[derive(Debug, Clone)]
pub struct BuiltDataset {
    pub train: Dataset,
    pub test: Dataset,
    pub images: Vec<ImageMeta>,
    pub hash: String,
}

impl DatasetConfig {
    pub fn longtail(&self) -> LongTailSpec {
        LongTailSpec {
            num_classes: self.num_classes,
            n_max: self.n_max,
            rho: self.rho,
            profile: self.profile,
        }
    }

    /// Copy with every optional field filled in.
    pub fn resolved(&self) -> Self {
        Self {
            head_threshold: Some(
                self.head_threshold
                    .unwrap_or(ShotThresholds::scaled_for(self.n_max).many),
            ),
            ..self.clone()
        }
    }

    fn synth_spec(&self, exposure: usize) -> ContextShiftSpec {
        ContextShiftSpec {
            num_classes: self.num_classes,
            backgrounds: self.backgrounds,
            minority_exposure: exposure,
            head_threshold: self.resolved().head_threshold.expect("resolved"),
            side: self.side,
            noise: self.noise,
            test_per_class: self.test_per_class,
        }
    }

    pub fn histogram(&self) -> Result<ClassHistogram> {
        build_longtail_profile(&self.longtail())
    }

    pub fn build(&self) -> Result<BuiltDataset> {
        let hist = self.histogram()?;
        let mut rng = stream(self.seed, &[tag::SYNTH]);
        let (train, test, images) = match self.kind {
            DatasetKind::ContextShift => {
                let data = synth_context_shift(&self.synth_spec(self.minority_exposure), &hist, &mut rng)?;
                (data.train, data.test, data.manifest)
            }
            DatasetKind::Longtail => {
                let balanced = ClassHistogram::new(vec![self.n_max; self.num_classes])?;
                let data = synth_context_shift(&self.synth_spec(self.backgrounds), &balanced, &mut rng)?;
                let chosen = subsample_indices(&data.train, &hist, &mut stream(self.seed, &[tag::SUBSAMPLE]))?;
                let train = data.train.select(&chosen)?;
                let mut images: Vec<ImageMeta> = chosen
                    .iter()
                    .enumerate()
                    .map(|(index, &src)| ImageMeta {
                        index,
                        ..data.manifest[src].clone()
                    })
                    .collect();
                images.extend(data.manifest.into_iter().filter(|m| m.split == Split::Test));
                (train, data.test, images)
            }
        };
        let hash = content_hash(&[&train, &test])?;
        Ok(BuiltDataset {
            train,
            test,
            images,
            hash,
        })
    }
}

/// One named training recipe: [`TrainConfig`] fields overriding the
/// experiment defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    #[serde(flatten)]
    pub overrides: toml::Table,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    /// Overrides applied to every method before its own.
    #[serde(default)]
    pub defaults: toml::Table,
    pub methods: Vec<MethodSpec>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::Config(format!("duplicate seeds in {:?}", self.seeds)));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("method list is empty".into()));
        }
        let mut names = BTreeSet::new();
        for m in &self.methods {
            let safe = !m.name.is_empty()
                && m.name.chars().all(|c| c.is_ascii_alphanumeric() || "_-+.".contains(c));
            if !safe {
                return Err(Error::Config(format!(
                    "method name {:?} must be non-empty ASCII letters, digits or _-+.",
                    m.name
                )));
            }
            if !names.insert(&m.name) {
                return Err(Error::Config(format!("duplicate method name `{}`", m.name)));
            }
        }
        let d = &self.dataset;
        d.longtail().validate().map_err(|e| Error::Config(format!("dataset: {e}")))?;
        d.synth_spec(d.minority_exposure)
            .validate()
            .map_err(|e| Error::Config(format!("dataset: {e}")))?;
        for m in &self.methods {
            self.resolve(m, self.seeds[0])?;
        }
        Ok(())
    }

    /// Full training config of `method` for `seed`: library defaults, then
    /// `[defaults]`, then the method's own fields.
    pub fn resolve(&self, method: &MethodSpec, seed: u64) -> Result<TrainConfig> {
        let ctx = |e: &dyn std::fmt::Display| Error::Config(format!("method `{}`: {e}", method.name));
        let base = TrainConfig {
            shot_thresholds: ShotThresholds::scaled_for(self.dataset.n_max),
            ..TrainConfig::default()
        };
        let mut value = serde_json::to_value(&base)?;
        let fields = value.as_object_mut().expect("struct serializes to an object");
        for (key, v) in self.defaults.iter().chain(&method.overrides) {
            if key == "seed" {
                return Err(ctx(&"`seed` comes from the experiment seed list"));
            }
            fields.insert(key.clone(), serde_json::to_value(v)?);
        }
        let mut config: TrainConfig = serde_json::from_value(value).map_err(|e| ctx(&e))?;
        config.seed = seed;
        config.validate().map_err(|e| match e {
            Error::Config(msg) => ctx(&msg),
            other => ctx(&other),
        })?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistorySummary {
    pub epochs: usize,
    pub final_lr: f64,
    pub final_loss: f64,
    pub final_train_accuracy: Option<f64>,
    pub loss_per_epoch: Vec<f64>,
}

impl HistorySummary {
    pub fn from_history(history: &TrainHistory) -> Self {
        let last = history.epochs.last();
        Self {
            epochs: history.epochs.len(),
            final_lr: last.map_or(0.0, |r| r.lr),
            final_loss: last.map_or(f64::NAN, |r| r.mean_loss),
            final_train_accuracy: history.epochs.iter().rev().find_map(|r| r.train_accuracy),
            loss_per_epoch: history.epochs.iter().map(|r| r.mean_loss).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellResult {
    Completed {
        metrics: MetricsReport,
        history: HistorySummary,
    },
    Failed {
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub method: String,
    pub seed: u64,
    /// Hash of the method name, resolved config and dataset; used to skip
    /// completed cells on resume.
    pub cell_hash: String,
    pub config: TrainConfig,
    pub result: CellResult,
}

impl CellRecord {
    pub fn metrics(&self) -> Option<&MetricsReport> {
        match &self.result {
            CellResult::Completed { metrics, .. } => Some(metrics),
            CellResult::Failed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsManifest {
    pub version: u32,
    pub experiment: ExperimentConfig,
    pub dataset_hash: String,
    pub histogram: Vec<usize>,
    /// Records in grid order (methods outer, seeds inner).
    pub records: Vec<CellRecord>,
}

impl ResultsManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let manifest: Self = serde_json::from_str(text)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", manifest.version)));
        }
        Ok(manifest)
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.metrics().is_none()).count()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn cell_hash(method: &str, config: &TrainConfig, dataset_hash: &str) -> Result<String> {
    let key = serde_json::json!({ "method": method, "config": config, "dataset": dataset_hash });
    Ok(hex_sha256(serde_json::to_string(&key)?.as_bytes()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    /// Replaces the configured output directory.
    pub out_dir: Option<PathBuf>,
    /// Cells trained concurrently.
    pub jobs: usize,
    /// Keep completed cells of an existing manifest.
    pub resume: bool,
    /// Also write a model checkpoint per completed cell.
    pub checkpoints: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            out_dir: None,
            jobs: 1,
            resume: false,
            checkpoints: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: ResultsManifest,
    pub manifest_path: PathBuf,
    pub trained: usize,
    pub skipped: usize,
    pub failed: usize,
}

struct Cell {
    slot: usize,
    method: String,
    seed: u64,
    config: TrainConfig,
    hash: String,
}

fn run_cell(cell: &Cell, data: &BuiltDataset, models: Option<&Path>) -> Result<CellResult> {
    let (model, history) = train(&cell.config, &data.train)?;
    let groups = shot_groups(data.train.histogram(), cell.config.shot_thresholds)?;
    let metrics = evaluate(&model, &data.test, &groups)?;
    if let Some(dir) = models {
        save_checkpoint(&model, dir.join(format!("{}-seed{}.cmom", cell.method, cell.seed)))?;
    }
    Ok(CellResult::Completed {
        metrics,
        history: HistorySummary::from_history(&history),
    })
}

/// Runs every (method, seed) cell of `config`, writing the manifest after
/// each cell. Cell failures are recorded, not propagated.
pub fn run(config: &ExperimentConfig, options: &RunOptions) -> Result<RunSummary> {
    config.validate()?;
    if options.jobs == 0 {
        return Err(Error::Config("jobs must be at least 1".into()));
    }
    let out_dir = options.out_dir.clone().unwrap_or_else(|| config.out_dir.clone());
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let models = options.checkpoints.then(|| out_dir.join("models"));
    if let Some(dir) = &models {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let data = config.dataset.build()?;
    let mut cells = Vec::new();
    for method in &config.methods {
        for &seed in &config.seeds {
            let resolved = config.resolve(method, seed)?;
            let hash = cell_hash(&method.name, &resolved, &data.hash)?;
            cells.push(Cell {
                slot: cells.len(),
                method: method.name.clone(),
                seed,
                config: resolved,
                hash,
            });
        }
    }

    let mut previous: HashMap<String, CellRecord> = HashMap::new();
    if options.resume && manifest_path.exists() {
        for record in ResultsManifest::load(&manifest_path)?.records {
            if record.metrics().is_some() {
                previous.insert(record.cell_hash.clone(), record);
            }
        }
    }
    let slots: Vec<Option<CellRecord>> = cells.iter().map(|c| previous.remove(&c.hash)).collect();
    let skipped = slots.iter().flatten().count();
    let pending: Vec<&Cell> = cells.iter().filter(|c| slots[c.slot].is_none()).collect();

    let mut experiment = config.clone();
    experiment.out_dir = out_dir.clone();
    experiment.dataset = config.dataset.resolved();
    let state = Mutex::new((
        ResultsManifest {
            version: MANIFEST_VERSION,
            experiment,
            dataset_hash: data.hash.clone(),
            histogram: data.train.histogram().counts().to_vec(),
            records: Vec::new(),
        },
        slots,
    ));
    let publish = |state: &mut (ResultsManifest, Vec<Option<CellRecord>>)| -> Result<()> {
        state.0.records = state.1.iter().flatten().cloned().collect();
        state.0.save(&manifest_path)
    };
    publish(&mut state.lock().expect("manifest lock"))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<bool>> = pool.install(|| {
        pending
            .par_iter()
            .map(|cell| {
                let result = run_cell(cell, &data, models.as_deref())
                    .unwrap_or_else(|e| CellResult::Failed { error: e.to_string() });
                let ok = matches!(result, CellResult::Completed { .. });
                let record = CellRecord {
                    method: cell.method.clone(),
                    seed: cell.seed,
                    cell_hash: cell.hash.clone(),
                    config: cell.config.clone(),
                    result,
                };
                let mut guard = state.lock().expect("manifest lock");
                guard.1[cell.slot] = Some(record);
                publish(&mut guard)?;
                Ok(ok)
            })
            .collect()
    });
    let mut failed = 0;
    for outcome in outcomes {
        failed += usize::from(!outcome?);
    }
    let (manifest, _) = state.into_inner().expect("manifest lock");
    Ok(RunSummary {
        manifest,
        manifest_path,
        trained: pending.len(),
        skipped,
        failed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub dataset: DatasetConfig,
    pub hash: String,
    pub histogram: Vec<usize>,
    pub train_file: String,
    pub test_file: String,
    pub images: Vec<ImageMeta>,
}

/// Writes the train/test split of `config.dataset` and a JSON sidecar to
/// `<out_dir>/data`. Returns the sidecar path.
pub fn make_data(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<PathBuf> {
    let dir = out_dir.unwrap_or(&config.out_dir).join("data");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let data = config.dataset.build()?;
    save_dataset(&data.train, dir.join("train.cmo"))?;
    save_dataset(&data.test, dir.join("test.cmo"))?;
    let sidecar = DataManifest {
        dataset: config.dataset.resolved(),
        hash: data.hash,
        histogram: data.train.histogram().counts().to_vec(),
        train_file: "train.cmo".into(),
        test_file: "test.cmo".into(),
        images: data.images,
    };
    let path = dir.join("manifest.json");
    write_atomic(&path, serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    Ok(path)
}
