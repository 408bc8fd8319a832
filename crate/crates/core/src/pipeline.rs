//! Run configuration, the on-disk layout of a benchmark run, and the
//! gen/train/eval/report steps that read and write it.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{generate_dataset, BenchError, BenchmarkConfig, Dataset};
use crate::env::{read_jsonl, write_jsonl, EnvError, Episode, Scene, SceneRecord, TrajectoryRecord};
use crate::eval::{
    evaluate_stage, summarize, write_report_csv, EvalError, ExpertFactory, ModelPolicy, PolicyFactory, StageReport,
    StrategySummary,
};
use crate::model::{Model, ModelConfig};
use crate::selection::SelectionMethod;
use crate::tensor::{load_checkpoint, save_checkpoint, ParamStore, TensorError};
use crate::trainer::{
    load_buffer, run_stage, save_buffer, BufferSummary, Demo, StrategyId, TrainConfig, TrainState, TrainerError,
};

pub const SCHEMA_VERSION: u32 = 1;
/// Retention at which the sampling methods are compared.
pub const SAMPLING_RETENTION: f64 = 0.5;
/// Name accepted by `eval` for the shortest-path planner.
pub const EXPERT_RUN: &str = "expert";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl PipelineError {
    /// 2 validation, 3 missing artifact, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) | PipelineError::Bench(BenchError::Config(_)) => 2,
            PipelineError::Trainer(TrainerError::Config(_)) => 2,
            PipelineError::Missing(_) => 3,
            PipelineError::Tensor(TensorError::Checkpoint(_)) => 3,
            _ => 4,
        }
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> PipelineError {
    let context = context.into();
    move |source| PipelineError::Io { context, source }
}

/// One trained variant: a strategy plus optional overrides used by the
/// ablation and sweep presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub name: String,
    pub strategy: StrategyId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionMethod>,
    /// Retention cap for LOF and ratio for the uniform and clustering samplers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retention: Option<f64>,
    /// Sets both the distillation and the replay weight.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

impl RunSpec {
    pub fn plain(strategy: StrategyId) -> Self {
        Self {
            name: strategy.name().into(),
            strategy,
            selection: None,
            retention: None,
            lambda: None,
        }
    }

    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        if let Some(m) = self.selection {
            cfg.selection_override = Some(m);
        }
        if let Some(r) = self.retention {
            cfg.lof.max_keep_ratio = r;
            cfg.sample_ratio = r;
        }
        if let Some(l) = self.lambda {
            cfg.weights.lambda_kd = l;
            cfg.weights.lambda_fr = l;
        }
        cfg
    }

    /// Frame selection actually used, if the run stores feature replay.
    pub fn selection_method(&self, base: &TrainConfig) -> Option<SelectionMethod> {
        self.train_config(base).selection_for(self.strategy)
    }
}

/// Sampling ablation, retention sweep and loss-weight sweep on top of the
/// six plain strategies.
pub fn ablation_runs() -> Vec<RunSpec> {
    let mut runs = Vec::new();
    for (name, m) in [("cnav_cluster", SelectionMethod::Cluster), ("cnav_full", SelectionMethod::Full)] {
        runs.push(RunSpec {
            name: name.into(),
            selection: Some(m),
            ..RunSpec::plain(StrategyId::Cnav)
        });
    }
    for r in [0.25, SAMPLING_RETENTION, 0.75] {
        for s in [StrategyId::Cnav, StrategyId::CnavUniform] {
            if s == StrategyId::CnavUniform && r == SAMPLING_RETENTION {
                continue;
            }
            runs.push(RunSpec {
                name: format!("{}_r{}", s.name(), (r * 100.0) as u32),
                retention: Some(r),
                ..RunSpec::plain(s)
            });
        }
    }
    for l in [1.0, 10.0] {
        runs.push(RunSpec {
            name: format!("cnav_lambda{l}"),
            lambda: Some(l),
            ..RunSpec::plain(StrategyId::Cnav)
        });
    }
    runs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub model: ModelConfig,
    pub benchmark: BenchmarkConfig,
    pub train: TrainConfig,
    pub runs: Vec<RunSpec>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            model: ModelConfig::default(),
            benchmark: BenchmarkConfig::default(),
            train: TrainConfig::default(),
            runs: StrategyId::ALL.iter().map(|&s| RunSpec::plain(s)).collect(),
            output_dir: PathBuf::from("cnav-run"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| PipelineError::Validation(format!("config: {e}")))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(PipelineError::Validation(format!(
                    "schema_version {v} is not supported (expected {SCHEMA_VERSION})"
                )))
            }
            None => return Err(PipelineError::Validation("config lacks schema_version".into())),
        }
        serde_json::from_value(value).map_err(|e| PipelineError::Validation(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        if !path.exists() {
            return Err(PipelineError::Missing(format!("config file {}", path.display())));
        }
        let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(PipelineError::Validation(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let bad = |m: String| Err(PipelineError::Validation(m));
        if self.model.obs.patch_size % 2 == 0 {
            return bad("patch_size must be odd".into());
        }
        if self.model.hidden == 0 || self.model.encoder.feature_dim() == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.model.encoder.backbone.total() == 0 || crate::encoder::Modality::ALL.iter().any(|&m| self.model.encoder.backbone.get(m) == 0) {
            return bad("every backbone dimension must be positive".into());
        }
        self.benchmark.validate(&self.model.obs)?;
        self.train.validate()?;
        if self.runs.is_empty() {
            return bad("at least one run is required".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for r in &self.runs {
            let safe = !r.name.is_empty()
                && r.name != EXPERT_RUN
                && r.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !safe {
                return bad(format!("run name {:?} must be non-empty [A-Za-z0-9_-] and not {EXPERT_RUN:?}", r.name));
            }
            if !names.insert(r.name.as_str()) {
                return bad(format!("run name {:?} is repeated", r.name));
            }
            if let Some(l) = r.lambda {
                if !(l >= 0.0 && l.is_finite()) {
                    return bad(format!("run {}: lambda must be non-negative", r.name));
                }
            }
            r.train_config(&self.train)
                .validate()
                .map_err(|e| PipelineError::Validation(format!("run {}: {e}", r.name)))?;
        }
        Ok(())
    }

    pub fn run(&self, name: &str) -> Result<&RunSpec, PipelineError> {
        self.runs.iter().find(|r| r.name == name).ok_or_else(|| {
            let known: Vec<&str> = self.runs.iter().map(|r| r.name.as_str()).collect();
            PipelineError::Validation(format!("unknown run {name:?}; configured: {}", known.join(", ")))
        })
    }

    pub fn stage_count(&self) -> usize {
        self.benchmark.stages.len()
    }
}

/// Written once per run directory; the only file carrying a timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub created_unix: u64,
    pub tool_version: String,
    pub config: RunConfig,
}

/// Holds `run.lock` for the lifetime of the value.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(root: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(root).map_err(io_err(format!("creating {}", root.display())))?;
        let path = root.join("run.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(io_err("writing lockfile"))?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(root.to_path_buf())),
            Err(e) => Err(io_err(format!("creating {}", path.display()))(e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Paths inside a run directory. Stage numbers in file names are 1-based.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn train_scenes(&self) -> PathBuf {
        self.dataset_dir().join("train_scenes.jsonl")
    }

    pub fn eval_scenes(&self) -> PathBuf {
        self.dataset_dir().join("eval_scenes.jsonl")
    }

    pub fn stage_trajectories(&self, stage: usize) -> PathBuf {
        self.dataset_dir().join(format!("stage_{}_trajectories.jsonl", stage + 1))
    }

    pub fn eval_episodes(&self) -> PathBuf {
        self.dataset_dir().join("eval_episodes.jsonl")
    }

    pub fn dataset_counts(&self) -> PathBuf {
        self.dataset_dir().join("counts.json")
    }

    pub fn run_dir(&self, run: &str) -> PathBuf {
        self.root.join("runs").join(run)
    }

    pub fn checkpoint(&self, run: &str, stage: usize) -> PathBuf {
        self.run_dir(run).join(format!("stage_{}.ckpt", stage + 1))
    }

    pub fn buffer(&self, run: &str, stage: usize) -> PathBuf {
        self.run_dir(run).join(format!("stage_{}.buffer", stage + 1))
    }

    pub fn selections(&self, run: &str, stage: usize) -> PathBuf {
        self.run_dir(run).join(format!("stage_{}.selection.jsonl", stage + 1))
    }

    pub fn transcript(&self, run: &str, stage: usize) -> PathBuf {
        self.run_dir(run).join(format!("stage_{}.transcript.csv", stage + 1))
    }

    pub fn report_dir(&self, run: &str) -> PathBuf {
        self.root.join("reports").join(run)
    }

    pub fn reports_root(&self) -> PathBuf {
        self.root.join("reports")
    }
}

fn create_dir(path: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(path).map_err(io_err(format!("creating {}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(io_err(format!("writing {}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn require(path: &Path, what: &str) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::Missing(format!("{what} ({})", path.display())))
    }
}

/// Writes the manifest unless one already exists for an identical config.
pub fn write_manifest(layout: &RunLayout, cfg: &RunConfig) -> Result<(), PipelineError> {
    create_dir(&layout.root)?;
    if read_manifest(layout)?.is_some_and(|old| old.config == *cfg) {
        return Ok(());
    }
    let created_unix = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    write_json(
        &layout.manifest(),
        &RunManifest {
            created_unix,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.clone(),
        },
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Trajectories per stage, then per category within the stage.
    pub stage_trajectories: Vec<BTreeMap<u32, usize>>,
    pub eval_episodes: BTreeMap<u32, usize>,
}

impl DatasetCounts {
    pub fn of(ds: &Dataset) -> Self {
        let stage_trajectories = ds
            .stage_trajectories
            .iter()
            .map(|ts| {
                let mut m = BTreeMap::new();
                for t in ts {
                    *m.entry(t.episode.goal).or_insert(0) += 1;
                }
                m
            })
            .collect();
        Self {
            train_scenes: ds.train_scenes.len(),
            eval_scenes: ds.eval_scenes.len(),
            stage_trajectories,
            eval_episodes: ds.eval_episodes.iter().map(|(&c, e)| (c, e.len())).collect(),
        }
    }
}

/// Generates the dataset and writes it as JSONL.
pub fn cmd_gen(layout: &RunLayout, cfg: &RunConfig) -> Result<DatasetCounts, PipelineError> {
    let ds = generate_dataset(&cfg.benchmark, &cfg.model.obs, cfg.seed)?;
    create_dir(&layout.dataset_dir())?;
    let scenes = |m: &BTreeMap<u64, Scene>| m.values().map(SceneRecord::from).collect::<Vec<_>>();
    write_jsonl(&layout.train_scenes(), &scenes(&ds.train_scenes))?;
    write_jsonl(&layout.eval_scenes(), &scenes(&ds.eval_scenes))?;
    for (k, trajs) in ds.stage_trajectories.iter().enumerate() {
        let recs: Vec<TrajectoryRecord> = trajs.iter().map(TrajectoryRecord::from).collect();
        write_jsonl(&layout.stage_trajectories(k), &recs)?;
    }
    let eps: Vec<&Episode> = ds.eval_episodes.values().flatten().collect();
    write_jsonl(&layout.eval_episodes(), &eps)?;
    let counts = DatasetCounts::of(&ds);
    write_json(&layout.dataset_counts(), &counts)?;
    Ok(counts)
}

fn read_scenes(path: &Path) -> Result<BTreeMap<u64, Scene>, PipelineError> {
    require(path, "dataset scenes")?;
    read_jsonl::<SceneRecord>(path)?
        .iter()
        .map(|r| Ok((r.id, Scene::try_from(r)?)))
        .collect()
}

pub fn read_manifest(layout: &RunLayout) -> Result<Option<RunManifest>, PipelineError> {
    let path = layout.manifest();
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(io_err(format!("reading {}", path.display())))?;
    Ok(Some(serde_json::from_str(&text)?))
}

/// The dataset on disk must come from the same seed, model and benchmark.
fn check_manifest(layout: &RunLayout, cfg: &RunConfig) -> Result<(), PipelineError> {
    let Some(m) = read_manifest(layout)? else {
        return Err(PipelineError::Missing(format!("run manifest ({}); run `gen` first", layout.manifest().display())));
    };
    let same = m.config.seed == cfg.seed && m.config.model == cfg.model && m.config.benchmark == cfg.benchmark;
    if !same {
        return Err(PipelineError::Validation(format!(
            "seed, model or benchmark differ from the dataset in {}",
            layout.root.display()
        )));
    }
    Ok(())
}

/// Reads a dataset written by [`cmd_gen`], regenerating observations by
/// replaying the stored actions.
pub fn load_dataset(layout: &RunLayout, cfg: &RunConfig) -> Result<Dataset, PipelineError> {
    check_manifest(layout, cfg)?;
    let train_scenes = read_scenes(&layout.train_scenes())?;
    let eval_scenes = read_scenes(&layout.eval_scenes())?;
    let mut stage_trajectories = Vec::new();
    for k in 0..cfg.stage_count() {
        let path = layout.stage_trajectories(k);
        require(&path, &format!("stage {} trajectories", k + 1))?;
        let recs: Vec<TrajectoryRecord> = read_jsonl(&path)?;
        let trajs = recs
            .iter()
            .map(|r| {
                let scene = train_scenes
                    .get(&r.episode.scene_id)
                    .ok_or_else(|| PipelineError::Missing(format!("training scene {}", r.episode.scene_id)))?;
                Ok(r.restore(scene, &cfg.model.obs)?)
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        stage_trajectories.push(trajs);
    }
    require(&layout.eval_episodes(), "evaluation episodes")?;
    let mut eval_episodes: BTreeMap<u32, Vec<Episode>> = BTreeMap::new();
    for e in read_jsonl::<Episode>(&layout.eval_episodes())? {
        eval_episodes.entry(e.goal).or_default().push(e);
    }
    let ds = Dataset {
        train_scenes,
        eval_scenes,
        stage_trajectories,
        eval_episodes,
        stages: cfg.benchmark.stages.clone(),
    };
    ds.eval_suite(&cfg.model.obs).validate(cfg.benchmark.eval_per_category)?;
    Ok(ds)
}

/// Strategy-neutral metadata, so stage-1 checkpoints of different
/// strategies are byte-identical.
fn checkpoint_metadata(cfg: &RunConfig, stage: usize) -> BTreeMap<String, serde_json::Value> {
    BTreeMap::from([
        ("stage".to_string(), serde_json::json!(stage + 1)),
        ("seed".to_string(), serde_json::json!(cfg.seed)),
        ("categories".to_string(), serde_json::json!(cfg.benchmark.stages[stage])),
    ])
}

fn restore_demo<'a>(ds: &'a Dataset, model: &'a Model) -> impl FnMut(&TrajectoryRecord, usize) -> Result<Demo, TrainerError> + 'a {
    move |rec, task| {
        let scene = ds
            .train_scenes
            .get(&rec.episode.scene_id)
            .ok_or_else(|| TrainerError::Buffer(format!("unknown scene {}", rec.episode.scene_id)))?;
        let traj = rec
            .restore(scene, &model.cfg.obs)
            .map_err(|e| TrainerError::Buffer(e.to_string()))?;
        Ok(Demo::new(&model.backbones, &traj, task)?)
    }
}

/// Loads the state saved at the end of `stage` (0-based).
pub fn load_state(
    layout: &RunLayout,
    run: &str,
    stage: usize,
    ds: &Dataset,
    model: &Model,
) -> Result<TrainState, PipelineError> {
    let params = load_params(layout, run, stage)?;
    let (json, _) = crate::trainer::buffer_paths(&layout.buffer(run, stage));
    require(&json, &format!("run {run} stage {} buffer", stage + 1))?;
    let (buffer, _) = load_buffer(&layout.buffer(run, stage), restore_demo(ds, model))?;
    Ok(TrainState {
        prev_params: Some(params.clone()),
        params,
        buffer,
    })
}

pub fn load_params(layout: &RunLayout, run: &str, stage: usize) -> Result<ParamStore, PipelineError> {
    let prefix = layout.checkpoint(run, stage);
    let (json, _) = crate::tensor::checkpoint::checkpoint_paths(&prefix);
    require(&json, &format!("run {run} stage {} checkpoint", stage + 1))?;
    Ok(load_checkpoint(&prefix)?.0)
}

/// Number of leading stages to process: all of them, or the first `limit`.
pub fn stage_limit(cfg: &RunConfig, limit: Option<usize>) -> Result<usize, PipelineError> {
    match limit {
        None => Ok(cfg.stage_count()),
        Some(k) if (1..=cfg.stage_count()).contains(&k) => Ok(k),
        Some(k) => Err(PipelineError::Validation(format!(
            "--stages {k} is outside 1..={}",
            cfg.stage_count()
        ))),
    }
}

/// Trains the first `upto` stages of one run, starting after `resume_after`
/// (0-based) from that stage's checkpoint and buffer when given.
pub fn cmd_train(
    layout: &RunLayout,
    cfg: &RunConfig,
    run: &RunSpec,
    upto: usize,
    resume_after: Option<usize>,
    mut progress: impl FnMut(usize, u64),
) -> Result<(), PipelineError> {
    let ds = load_dataset(layout, cfg)?;
    let model = Model::new(cfg.model.clone(), cfg.seed);
    let tcfg = run.train_config(&cfg.train);
    let (mut state, first) = match resume_after {
        Some(k) if k + 1 >= upto => {
            return Err(PipelineError::Validation(format!(
                "nothing to train after stage {}: training stops at stage {upto}",
                k + 1
            )))
        }
        Some(k) => (load_state(layout, &run.name, k, &ds, &model)?, k + 1),
        None => (TrainState::new(model.init_params(cfg.seed)?), 0),
    };
    create_dir(&layout.run_dir(&run.name))?;
    for k in first..upto {
        let plan = ds.stage_plan(&model, k)?;
        let outcome = run_stage(&plan, &mut state, run.strategy, &tcfg, cfg.seed)?;
        save_checkpoint(&state.params, checkpoint_metadata(cfg, k), &layout.checkpoint(&run.name, k))?;
        save_buffer(&state.buffer, &layout.buffer(&run.name, k))?;
        write_jsonl(&layout.selections(&run.name, k), &outcome.selections)?;
        let mut w = csv::Writer::from_path(layout.transcript(&run.name, k))?;
        w.write_record(["stage", "epoch", "component", "value"])?;
        for row in &outcome.transcript {
            w.write_record([
                (row.stage + 1).to_string(),
                (row.epoch + 1).to_string(),
                row.component.to_string(),
                format!("{:.17e}", row.value),
            ])?;
        }
        w.flush().map_err(io_err("writing transcript"))?;
        progress(k, outcome.optimizer_steps);
    }
    Ok(())
}

/// Per-run evaluation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    /// `None` for the expert planner.
    pub strategy: Option<StrategyId>,
    pub selection: Option<SelectionMethod>,
    pub retention: Option<f64>,
    pub lambda: Option<f64>,
    pub stages: Vec<StageReport>,
    pub summary: StrategySummary,
    /// Final-stage buffer accounting, for replay strategies.
    pub buffer: Option<BufferSummary>,
}

fn read_buffer_summary(layout: &RunLayout, run: &str, stage: usize) -> Result<Option<BufferSummary>, PipelineError> {
    let (json, _) = crate::trainer::buffer_paths(&layout.buffer(run, stage));
    if !json.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&json).map_err(io_err(format!("reading {}", json.display())))?;
    let summary: BufferSummary = serde_json::from_str(text.lines().next().unwrap_or("{}"))?;
    Ok((summary.feature_entries + summary.raw_entries > 0).then_some(summary))
}

/// Evaluates the first `upto` stage checkpoints of `run` (or the expert
/// planner) and writes `reports/<run>/`.
pub fn cmd_eval(layout: &RunLayout, cfg: &RunConfig, run: &str, upto: usize) -> Result<RunReport, PipelineError> {
    let ds = load_dataset(layout, cfg)?;
    let suite = ds.eval_suite(&cfg.model.obs);
    let k_total = upto;
    let mut stages = Vec::with_capacity(k_total);
    let report = if run == EXPERT_RUN {
        let factory = ExpertFactory(cfg.model.obs.clone());
        for k in 0..k_total {
            stages.push(evaluate_stage(&factory, &suite, k)?);
        }
        RunReport {
            name: run.into(),
            strategy: None,
            selection: None,
            retention: None,
            lambda: None,
            summary: summarize(&stages).expect("at least one stage"),
            stages,
            buffer: None,
        }
    } else {
        let run_spec = cfg.run(run)?;
        let model = Model::new(cfg.model.clone(), cfg.seed);
        for k in 0..k_total {
            let params = load_params(layout, run, k)?;
            let factory = ModelPolicy {
                model: &model,
                params: &params,
            };
            stages.push(evaluate_stage(&factory as &dyn PolicyFactory, &suite, k)?);
        }
        let tcfg = run_spec.train_config(&cfg.train);
        let selection = run_spec.selection_method(&cfg.train);
        RunReport {
            name: run.into(),
            strategy: Some(run_spec.strategy),
            selection,
            retention: selection.map(|m| match m {
                SelectionMethod::Lof => tcfg.lof.max_keep_ratio,
                SelectionMethod::Full => 1.0,
                _ => tcfg.sample_ratio,
            }),
            lambda: run_spec.strategy.distills_features().then_some(tcfg.weights.lambda_kd),
            summary: summarize(&stages).expect("at least one stage"),
            stages,
            buffer: read_buffer_summary(layout, run, k_total - 1)?,
        }
    };
    let dir = layout.report_dir(run);
    create_dir(&dir)?;
    write_json(&dir.join("report.json"), &report)?;
    write_json(&dir.join("summary.json"), &report.summary)?;
    let rows: Vec<(String, &StageReport)> = report.stages.iter().map(|s| (run.to_string(), s)).collect();
    let file = fs::File::create(dir.join("report.csv")).map_err(io_err("creating report.csv"))?;
    write_report_csv(file, &rows)?;
    Ok(report)
}

/// Cross-run summary written by `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub runs: BTreeMap<String, RunSummaryRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummaryRow {
    pub strategy: Option<StrategyId>,
    pub avg_sr: f64,
    pub avg_spl: f64,
    pub last_sr: f64,
    pub last_spl: f64,
    pub last_old_sr: Option<f64>,
    pub last_new_sr: f64,
    pub forgetting_curve: Vec<Option<f64>>,
    pub selection: Option<SelectionMethod>,
    pub retention: Option<f64>,
    pub stored_bytes: Option<u64>,
    pub full_replay_bytes: Option<u64>,
}

impl RunSummaryRow {
    fn of(r: &RunReport) -> Self {
        let last = r.stages.last().expect("non-empty report");
        Self {
            strategy: r.strategy,
            avg_sr: r.summary.avg_sr,
            avg_spl: r.summary.avg_spl,
            last_sr: r.summary.last_sr,
            last_spl: r.summary.last_spl,
            last_old_sr: last.old_sr,
            last_new_sr: last.new_sr,
            forgetting_curve: r.summary.forgetting_curve.clone(),
            selection: r.selection,
            retention: r.retention,
            stored_bytes: r.buffer.as_ref().filter(|b| b.feature_entries > 0).map(|b| b.feature_bytes),
            full_replay_bytes: r.buffer.as_ref().filter(|b| b.feature_entries > 0).map(|b| b.full_replay_bytes),
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

/// Collects the per-run reports present under `reports/` (optionally just
/// `only`) and writes the combined CSV, JSON summary, forgetting curves and,
/// when the runs exist, the sampling ablation and retention sweep.
pub fn cmd_report(layout: &RunLayout, cfg: &RunConfig, only: Option<&str>) -> Result<BenchmarkSummary, PipelineError> {
    let mut names: Vec<String> = cfg.runs.iter().map(|r| r.name.clone()).collect();
    names.push(EXPERT_RUN.into());
    if let Some(o) = only {
        if !names.iter().any(|n| n == o) {
            cfg.run(o)?;
        }
        names.retain(|n| n == o);
    }
    let mut reports = Vec::new();
    for n in &names {
        let path = layout.report_dir(n).join("report.json");
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(io_err(format!("reading {}", path.display())))?;
            reports.push(serde_json::from_str::<RunReport>(&text)?);
        }
    }
    if reports.is_empty() {
        return Err(PipelineError::Missing("no evaluated runs; run `eval` first".into()));
    }
    let root = layout.reports_root();
    create_dir(&root)?;
    let rows: Vec<(String, &StageReport)> = reports
        .iter()
        .flat_map(|r| r.stages.iter().map(move |s| (r.name.clone(), s)))
        .collect();
    let file = fs::File::create(root.join("report.csv")).map_err(io_err("creating report.csv"))?;
    write_report_csv(file, &rows)?;

    let summary = BenchmarkSummary {
        runs: reports.iter().map(|r| (r.name.clone(), RunSummaryRow::of(r))).collect(),
    };
    write_json(&root.join("summary.json"), &summary)?;

    let mut w = csv::Writer::from_path(root.join("forgetting.csv"))?;
    w.write_record(["run", "stage", "old_sr", "new_sr", "mean_sr"])?;
    for r in &reports {
        for s in &r.stages {
            w.write_record([
                r.name.clone(),
                (s.stage + 1).to_string(),
                fmt_opt(s.old_sr),
                format!("{:.6}", s.new_sr),
                format!("{:.6}", s.mean_sr),
            ])?;
        }
    }
    w.flush().map_err(io_err("writing forgetting.csv"))?;

    let ablation_row = |r: &RunReport| {
        let row = RunSummaryRow::of(r);
        vec![
            r.name.clone(),
            r.selection.map_or(String::new(), |m| format!("{m:?}").to_lowercase()),
            fmt_opt(r.retention),
            fmt_opt(row.last_old_sr),
            format!("{:.6}", row.avg_sr),
            format!("{:.6}", row.last_sr),
            row.stored_bytes.map_or(String::new(), |b| b.to_string()),
            row.full_replay_bytes.map_or(String::new(), |b| b.to_string()),
        ]
    };
    let header = ["run", "method", "retention", "last_old_sr", "avg_sr", "last_sr", "stored_bytes", "full_replay_bytes"];
    let ablation: Vec<&RunReport> = reports
        .iter()
        .filter(|r| {
            r.strategy.is_some_and(|s| s.replays_features())
                && r.lambda == Some(cfg.train.weights.lambda_kd)
                && (r.selection == Some(SelectionMethod::Full) || r.retention == Some(SAMPLING_RETENTION))
        })
        .collect();
    let methods: std::collections::BTreeSet<_> = ablation.iter().filter_map(|r| r.selection).collect();
    if methods.len() > 1 {
        let mut w = csv::Writer::from_path(root.join("sampling_ablation.csv"))?;
        w.write_record(header)?;
        for r in &ablation {
            w.write_record(ablation_row(r))?;
        }
        w.flush().map_err(io_err("writing sampling_ablation.csv"))?;
    }
    let sweep: Vec<&RunReport> = reports
        .iter()
        .filter(|r| {
            matches!(r.selection, Some(SelectionMethod::Lof | SelectionMethod::Uniform))
                && r.lambda == Some(cfg.train.weights.lambda_kd)
        })
        .collect();
    let retentions: std::collections::BTreeSet<u64> = sweep.iter().filter_map(|r| r.retention.map(f64::to_bits)).collect();
    if retentions.len() > 1 {
        let mut w = csv::Writer::from_path(root.join("retention_sweep.csv"))?;
        w.write_record(header)?;
        let mut sorted = sweep.clone();
        sorted.sort_by(|a, b| {
            (a.selection.map(|m| m as u8), a.retention.unwrap_or(0.0))
                .partial_cmp(&(b.selection.map(|m| m as u8), b.retention.unwrap_or(0.0)))
                .expect("finite retention")
        });
        for r in sorted {
            w.write_record(ablation_row(r))?;
        }
        w.flush().map_err(io_err("writing retention_sweep.csv"))?;
    }
    Ok(summary)
}

/// In-memory counterpart of train + eval for one run, sharing prepared
/// stage plans; used by experiments that sweep many runs.
pub fn train_and_evaluate(
    model: &Model,
    plans: &[crate::trainer::StagePlan],
    suite: &crate::eval::EvalSuite,
    run: &RunSpec,
    base: &TrainConfig,
    seed: u64,
    start: Option<(usize, TrainState)>,
) -> Result<(Vec<StageReport>, TrainState), PipelineError> {
    let tcfg = run.train_config(base);
    let (mut state, first) = match start {
        Some((k, s)) => (s, k),
        None => (TrainState::new(model.init_params(seed)?), 0),
    };
    let mut reports = Vec::new();
    for plan in &plans[first..] {
        run_stage(plan, &mut state, run.strategy, &tcfg, seed)?;
        let factory = ModelPolicy {
            model,
            params: &state.params,
        };
        reports.push(evaluate_stage(&factory, suite, plan.stage)?);
    }
    Ok((reports, state))
}
