//! Experiment configuration and the end-to-end commands: collect, train,
//! servo, evaluate, render and the resumable full reproduction.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contours::{Contour, ShapeKind};
use crate::data::{self, CollectionPlan, DataError, Dataset, Range};
use crate::eval::{score_trace, summarize, trajectory_svg, Summary, TraceReport};
use crate::posenet::{self, Architecture, CheckpointError, EvalReport, NetError, PoseNet, TrainConfig, TrainOutcome};
use crate::servo::{self, Predictor, ServoConfig, ServoError, Trajectory};
use crate::tactsim::{self, ContactParams, SensorFamily, SensorSpec, SimError, Task};
use crate::{par, pgm, rng};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    /// Invalid configuration or arguments; `line` points into the config file.
    #[error("{}{msg}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Config { msg: String, line: Option<usize> },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Servo(#[from] ServoError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ExperimentError {
    fn config(msg: impl Into<String>) -> Self {
        ExperimentError::Config {
            msg: msg.into(),
            line: None,
        }
    }

    /// Whether the error is a configuration/argument problem rather than a
    /// failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(self, ExperimentError::Config { .. })
    }
}

type Result<T, E = ExperimentError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn sha256_hex(bytes: &[u8]) -> String {
    data::to_hex(&Sha256::digest(bytes))
}

/// Named sensor presets per family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorSection {
    pub shading: String,
    pub marker: String,
}

impl Default for SensorSection {
    fn default() -> Self {
        SensorSection {
            shading: "digit".into(),
            marker: "tactip".into(),
        }
    }
}

pub fn sensor_preset(name: &str) -> Option<SensorSpec> {
    match name {
        "digit" => Some(SensorSpec::digit()),
        "digitac" => Some(SensorSpec::digitac()),
        "tactip" => Some(SensorSpec::tactip()),
        _ => None,
    }
}

impl SensorSection {
    pub fn spec(&self, family: SensorFamily) -> SensorSpec {
        let name = match family {
            SensorFamily::Shading => &self.shading,
            SensorFamily::Marker => &self.marker,
        };
        sensor_preset(name).expect("validated preset name")
    }
}

/// Sampling ranges of one task; the seed comes from the experiment seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub offset: Range,
    pub depth: Range,
    pub angle: Range,
    pub slide_x: Range,
    pub slide_y: Range,
    pub slide_angle: Range,
    pub n_samples: usize,
}

impl PlanSection {
    pub fn defaults(task: Task) -> Self {
        let p = CollectionPlan::defaults(task);
        PlanSection {
            offset: p.offset,
            depth: p.depth,
            angle: p.angle,
            slide_x: p.slide_x,
            slide_y: p.slide_y,
            slide_angle: p.slide_angle,
            n_samples: p.n_samples,
        }
    }

    pub fn plan(&self, task: Task, seed: u64) -> CollectionPlan {
        CollectionPlan {
            task,
            offset: self.offset,
            depth: self.depth,
            angle: self.angle,
            slide_x: self.slide_x,
            slide_y: self.slide_y,
            slide_angle: self.slide_angle,
            n_samples: self.n_samples,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectionSection {
    /// Permit sampling ranges wider than the defaults.
    pub allow_range_override: bool,
    pub train_fraction: f64,
    pub edge: PlanSection,
    pub surface: PlanSection,
}

impl Default for CollectionSection {
    fn default() -> Self {
        CollectionSection {
            allow_range_override: false,
            train_fraction: data::DEFAULT_TRAIN_FRACTION,
            edge: PlanSection::defaults(Task::Edge),
            surface: PlanSection::defaults(Task::Surface),
        }
    }
}

impl CollectionSection {
    pub fn section(&self, task: Task) -> &PlanSection {
        match task {
            Task::Edge => &self.edge,
            Task::Surface => &self.surface,
        }
    }

    pub fn section_mut(&mut self, task: Task) -> &mut PlanSection {
        match task {
            Task::Edge => &mut self.edge,
            Task::Surface => &mut self.surface,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Binarize inputs with a local-mean threshold before the network.
    pub binarize: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            binarize: false,
        }
    }
}

impl TrainSection {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReproduceSection {
    pub families: Vec<SensorFamily>,
    pub tasks: Vec<Task>,
    /// Cells whose failure is the anticipated outcome (cell specs).
    pub expected_fail: Vec<String>,
}

impl Default for ReproduceSection {
    fn default() -> Self {
        ReproduceSection {
            families: SensorFamily::ALL.to_vec(),
            tasks: Task::ALL.to_vec(),
            expected_fail: vec!["shading,surface".into()],
        }
    }
}

fn default_shapes() -> Vec<ShapeKind> {
    vec![
        ShapeKind::default_circle(),
        ShapeKind::default_square(),
        ShapeKind::default_circular_wave(),
    ]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub sensors: SensorSection,
    #[serde(default)]
    pub collection: CollectionSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub servo: ServoConfig,
    #[serde(default = "default_shapes")]
    pub shapes: Vec<ShapeKind>,
    #[serde(default)]
    pub reproduce: ReproduceSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: default_out_dir(),
            sensors: SensorSection::default(),
            collection: CollectionSection::default(),
            train: TrainSection::default(),
            servo: ServoConfig::default(),
            shapes: default_shapes(),
            reproduce: ReproduceSection::default(),
        }
    }
}

/// 1-based line on which `key` is set inside table `[table]` (dotted path).
fn locate(source: &str, table: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in source.lines().enumerate() {
        let t = line.trim();
        if let Some(h) = t.strip_prefix('[').and_then(|h| h.split(']').next()) {
            current = h.trim_matches(|c| c == '[' || c == ' ').to_string();
            continue;
        }
        let k = t.split('=').next().unwrap_or("").trim();
        if current == table && k == key {
            return Some(i + 1);
        }
        if current.is_empty() && table.is_empty() && k == key {
            return Some(i + 1);
        }
        // Dotted keys written inline, e.g. `collection.edge.angle = ...`.
        if !table.is_empty() && k == format!("{table}.{key}") {
            return Some(i + 1);
        }
    }
    None
}

impl ExperimentConfig {
    /// Parses and validates TOML text. Errors carry the offending line when
    /// it can be found.
    pub fn from_toml(source: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(source).map_err(|e| {
            let line = e.span().map(|s| source[..s.start].matches('\n').count() + 1);
            ExperimentError::Config {
                msg: e.message().trim().to_string(),
                line,
            }
        })?;
        cfg.validate().map_err(|(table, key, msg)| ExperimentError::Config {
            msg,
            line: locate(source, &table, &key),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            ExperimentError::Config { msg, line } => ExperimentError::Config {
                msg: format!("{}: {msg}", path.display()),
                line,
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every section; the error names `(table, key, message)`.
    pub fn validate(&self) -> Result<(), (String, String, String)> {
        let fail = |table: &str, key: &str, msg: String| Err((table.to_string(), key.to_string(), msg));
        if self.seed > MAX_SEED {
            return fail("", "seed", format!("seed = {} exceeds {MAX_SEED}", self.seed));
        }
        for (family, name) in [
            (SensorFamily::Shading, &self.sensors.shading),
            (SensorFamily::Marker, &self.sensors.marker),
        ] {
            match sensor_preset(name) {
                Some(s) if s.family == family => {}
                Some(_) => return fail("sensors", family.name(), format!("sensors.{family}: `{name}` is not a {family} sensor")),
                None => {
                    return fail(
                        "sensors",
                        family.name(),
                        format!("sensors.{family}: unknown preset `{name}` (digit, digitac, tactip)"),
                    )
                }
            }
        }
        let c = &self.collection;
        if !(c.train_fraction > 0.0 && c.train_fraction < 1.0) {
            return fail(
                "collection",
                "train_fraction",
                format!("collection.train_fraction = {} outside (0, 1)", c.train_fraction),
            );
        }
        for task in Task::ALL {
            let table = format!("collection.{task}");
            let plan = c.section(task).plan(task, 0);
            if let Err(DataError::Plan(m)) = plan.validate() {
                let key = m.split(':').next().unwrap_or("").trim().to_string();
                return Err((table.clone(), key, format!("{table}.{m}")));
            }
            if !c.allow_range_override {
                if let Some(key) = plan.exceeds_defaults().first() {
                    return fail(
                        &table,
                        key,
                        format!(
                            "{table}.{key} is wider than the default sampling range; set collection.allow_range_override = true to permit it"
                        ),
                    );
                }
            }
        }
        let t = &self.train;
        if t.epochs == 0 {
            return fail("train", "epochs", "train.epochs must be > 0".into());
        }
        if t.batch_size == 0 {
            return fail("train", "batch_size", "train.batch_size must be > 0".into());
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return fail("train", "learning_rate", format!("train.learning_rate = {} must be > 0", t.learning_rate));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return fail("train", "weight_decay", format!("train.weight_decay = {} must be >= 0", t.weight_decay));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return fail("train", "momentum", format!("train.momentum = {} outside [0, 1)", t.momentum));
        }
        if let Err(e) = self.servo.validate() {
            return fail("servo", "", e.to_string());
        }
        let mut names = Vec::new();
        for s in &self.shapes {
            if let Err(m) = Contour::new(*s, [0.0, 0.0]) {
                return fail("shapes", "", format!("shapes.{}: {m}", s.name()));
            }
            if names.contains(&s.name()) {
                return fail("shapes", "", format!("shapes: `{}` listed twice", s.name()));
            }
            names.push(s.name());
        }
        for spec in &self.reproduce.expected_fail {
            if let Err(m) = spec.parse::<CellFilter>() {
                return fail("reproduce", "expected_fail", format!("reproduce.expected_fail: {m}"));
            }
        }
        Ok(())
    }

    pub fn spec(&self, family: SensorFamily) -> SensorSpec {
        self.sensors.spec(family)
    }

    /// Collection plan for a cell, seeded from the experiment seed.
    pub fn plan(&self, family: SensorFamily, task: Task) -> CollectionPlan {
        let seed = sub_seed(self.seed, &format!("collect/{family}/{task}"));
        self.collection.section(task).plan(task, seed)
    }

    pub fn train_config(&self, family: SensorFamily, task: Task) -> TrainConfig {
        self.train.config(sub_seed(self.seed, &format!("train/{family}/{task}")))
    }

    pub fn architecture(&self, spec: &SensorSpec) -> Architecture {
        Architecture {
            binarize: self.train.binarize,
            ..Architecture::standard(spec.image_height, spec.image_width)
        }
    }

    pub fn shape(&self, name: &str) -> Result<Contour> {
        let kind = self
            .shapes
            .iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| {
                let known: Vec<_> = self.shapes.iter().map(|s| s.name()).collect();
                ExperimentError::config(format!("unknown shape `{name}` (configured: {})", known.join(", ")))
            })?;
        Contour::new(*kind, [0.0, 0.0]).map_err(ExperimentError::config)
    }

    pub fn servo_config(&self, family: SensorFamily, task: Task, shape: &str) -> ServoConfig {
        ServoConfig {
            seed: sub_seed(self.seed, &format!("servo/{family}/{task}/{shape}")),
            ..self.servo.clone()
        }
    }
}

/// Largest seed that TOML (signed 64-bit integers) can carry.
pub const MAX_SEED: u64 = i64::MAX as u64;

/// Deterministic seed for a named stage, kept within [`MAX_SEED`] so that it
/// survives the manifest round-trip.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    rng::derived(seed, tag).next_u64() >> 1
}

/// Selects cells by `family[,task[,shape]]`; `*` or an omitted field matches
/// anything.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CellFilter {
    pub family: Option<SensorFamily>,
    pub task: Option<Task>,
    pub shape: Option<String>,
}

impl FromStr for CellFilter {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() > 3 || parts.iter().any(|p| p.is_empty()) {
            return Err(format!("cell spec `{s}` must look like family[,task[,shape]]"));
        }
        let any = |i: usize| parts.get(i).copied().filter(|v| *v != "*");
        Ok(CellFilter {
            family: any(0).map(str::parse).transpose()?,
            task: any(1).map(str::parse).transpose()?,
            shape: any(2).map(String::from),
        })
    }
}

impl CellFilter {
    pub fn matches_model(&self, family: SensorFamily, task: Task) -> bool {
        self.family.is_none_or(|f| f == family) && self.task.is_none_or(|t| t == task)
    }

    pub fn matches(&self, family: SensorFamily, task: Task, shape: &str) -> bool {
        self.matches_model(family, task) && self.shape.as_deref().is_none_or(|s| s == shape)
    }
}

impl fmt::Display for CellFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fam = self.family.map(|x| x.name()).unwrap_or("*");
        let task = self.task.map(|x| x.name()).unwrap_or("*");
        write!(f, "{fam},{task},{}", self.shape.as_deref().unwrap_or("*"))
    }
}

// ---------------------------------------------------------------- commands

/// Collects and saves a dataset; returns it with its checksum.
pub fn cmd_collect(cfg: &ExperimentConfig, family: SensorFamily, task: Task, out: &Path) -> Result<(Dataset, String)> {
    let plan = cfg.plan(family, task);
    let ds = data::collect(&plan, &cfg.spec(family))?;
    let ds = if cfg.collection.train_fraction != data::DEFAULT_TRAIN_FRACTION {
        data::split(ds, cfg.collection.train_fraction, plan.seed)
    } else {
        ds
    };
    let checksum = ds.save(out)?;
    Ok((ds, checksum))
}

pub const MODEL_FILE: &str = "model.bin";
pub const POSE_REPORT_FILE: &str = "pose_report.csv";
pub const HISTORY_FILE: &str = "loss_history.csv";

fn pose_report_csv(r: &EvalReport) -> String {
    summarize(&[], std::slice::from_ref(r)).pose_csv
}

fn history_csv(t: &TrainOutcome) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in t.history.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", i + 1));
    }
    s
}

/// Trains on a saved dataset, scores the held-out split and writes the
/// checkpoint, report and loss history into `out`.
pub fn cmd_train(cfg: &ExperimentConfig, dataset: &Path, out: &Path) -> Result<(TrainOutcome, EvalReport)> {
    let ds = Dataset::load(dataset)?;
    train_dataset(cfg, &ds, out)
}

fn train_dataset(cfg: &ExperimentConfig, ds: &Dataset, out: &Path) -> Result<(TrainOutcome, EvalReport)> {
    let train: Vec<&data::Sample> = ds.train_samples().collect();
    let outcome = posenet::train(
        &train,
        &ds.plan.label_ranges(),
        cfg.architecture(&ds.sensor),
        &cfg.train_config(ds.sensor.family, ds.plan.task),
    )?;
    let report = posenet::evaluate(&outcome.model, ds)?;
    write_file(&out.join(MODEL_FILE), posenet::encode_checkpoint(&outcome.model))?;
    write_file(&out.join(POSE_REPORT_FILE), pose_report_csv(&report))?;
    write_file(&out.join(HISTORY_FILE), history_csv(&outcome))?;
    Ok((outcome, report))
}

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const SVG_FILE: &str = "trace.svg";
pub const TRACE_REPORT_FILE: &str = "trace_report.csv";

/// Runs the servo loop on a configured shape and writes the trajectory, SVG
/// overlay and report. Loss of contact is reported through the returned
/// trajectory, not as an error.
pub fn cmd_servo(
    cfg: &ExperimentConfig,
    model: Option<&PoseNet<f32>>,
    family: SensorFamily,
    shape: &str,
    task: Task,
    out: &Path,
) -> Result<(Trajectory, TraceReport)> {
    let contour = cfg.shape(shape)?;
    let scfg = cfg.servo_config(family, task, shape);
    let predictor = model.map_or(Predictor::Oracle, Predictor::Model);
    let start = servo::start_pose(&scfg, &contour, task);
    let t = servo::run(&scfg, &contour, &cfg.spec(family), predictor, &start, task)?;
    let mut report = score_trace(&t, &contour, family);
    report.expected_fail = is_expected_fail(cfg, family, task, shape);
    let mut csv = Vec::new();
    t.write_csv(&mut csv).expect("writing to memory");
    write_file(&out.join(TRAJECTORY_FILE), csv)?;
    write_file(&out.join(SVG_FILE), trajectory_svg(&t, &contour))?;
    write_file(&out.join(TRACE_REPORT_FILE), summarize(std::slice::from_ref(&report), &[]).trace_csv)?;
    Ok((t, report))
}

fn is_expected_fail(cfg: &ExperimentConfig, family: SensorFamily, task: Task, shape: &str) -> bool {
    cfg.reproduce
        .expected_fail
        .iter()
        .filter_map(|s| s.parse::<CellFilter>().ok())
        .any(|f| f.matches(family, task, shape))
}

/// Re-scores a saved trajectory file against a configured shape.
pub fn cmd_eval_trajectory(
    cfg: &ExperimentConfig,
    csv: &Path,
    family: SensorFamily,
    shape: &str,
    task: Task,
) -> Result<TraceReport> {
    let contour = cfg.shape(shape)?;
    let file = fs::File::open(csv).map_err(io_err(csv))?;
    let steps = Trajectory::read_csv(std::io::BufReader::new(file))?;
    if steps.is_empty() {
        return Err(ExperimentError::config(format!("{}: no trajectory steps", csv.display())));
    }
    let last = steps.last().map(|s| s.status);
    let scfg = cfg.servo_config(family, task, shape);
    let start = scfg.tcp.apply(&steps[0].command);
    let end = scfg.tcp.apply(&steps[steps.len() - 1].command);
    let termination = if last == Some(servo::StepStatus::LostContact) {
        servo::Termination::LostContact
    } else if steps.len() >= scfg.max_steps {
        servo::Termination::MaxSteps
    } else {
        // The run stopped early without losing contact: it closed the loop.
        let _ = (start, end);
        servo::Termination::LoopClosed
    };
    let t = Trajectory {
        task,
        reference: scfg.reference_for(task),
        tcp: scfg.tcp,
        steps,
        termination,
    };
    let mut r = score_trace(&t, &contour, family);
    r.expected_fail = is_expected_fail(cfg, family, task, shape);
    Ok(r)
}

/// Scores a checkpoint on the held-out split of a saved dataset.
pub fn cmd_eval_model(dataset: &Path, checkpoint: &Path) -> Result<EvalReport> {
    let ds = Dataset::load(dataset)?;
    let model = posenet::load_checkpoint(checkpoint)?;
    Ok(posenet::evaluate(&model, &ds)?)
}

/// Renders one contact to a PGM file.
pub fn cmd_render(cfg: &ExperimentConfig, family: SensorFamily, contact: &ContactParams, seed: u64, out: &Path) -> Result<()> {
    contact.validate().map_err(|e| ExperimentError::config(e.to_string()))?;
    let img = tactsim::render(&cfg.spec(family), contact, seed)?;
    write_file(out, pgm::encode(&img))
}

// --------------------------------------------------------------- reproduce

const STAMP_FILE: &str = "stamp.toml";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelStamp {
    key: String,
    dataset_checksum: String,
    model_sha256: String,
    train_seconds: f64,
    report: EvalReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TraceStamp {
    key: String,
    trajectory_sha256: String,
    report: TraceReport,
}

fn read_stamp<T: for<'de> Deserialize<'de>>(dir: &Path) -> Option<T> {
    toml::from_str(&fs::read_to_string(dir.join(STAMP_FILE)).ok()?).ok()
}

fn file_sha(path: &Path) -> Option<String> {
    fs::read(path).ok().map(|b| sha256_hex(&b))
}

fn key_of(parts: &[&str]) -> String {
    sha256_hex(parts.join("\n").as_bytes())
}

/// What happened to one model cell (dataset + training + pose report).
#[derive(Debug, Clone)]
pub struct ModelCell {
    pub family: SensorFamily,
    pub task: Task,
    pub dataset_checksum: String,
    pub model_sha256: String,
    pub report: EvalReport,
    pub train_seconds: f64,
    pub resumed: bool,
}

/// What happened to one tracing cell.
#[derive(Debug, Clone)]
pub struct TraceCell {
    pub family: SensorFamily,
    pub task: Task,
    pub shape: String,
    pub trajectory_sha256: String,
    pub report: TraceReport,
    pub resumed: bool,
}

#[derive(Debug, Clone)]
pub struct ReproduceOutcome {
    pub models: Vec<ModelCell>,
    pub traces: Vec<TraceCell>,
    /// Cells that raised an error, as `cell: message`.
    pub failures: Vec<String>,
    pub summary: Summary,
}

impl ReproduceOutcome {
    /// Traces that failed without being expected to.
    pub fn unexpected_failures(&self) -> Vec<&TraceCell> {
        self.traces.iter().filter(|t| !t.report.completed && !t.report.expected_fail).collect()
    }
}

struct Log {
    path: PathBuf,
    start: Instant,
}

impl Log {
    fn line(&self, msg: &str) {
        let stamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        if let Ok(mut f) = fs::OpenOptions::new().create(true).append(true).open(&self.path) {
            let _ = writeln!(f, "[{stamp} +{:.1}s] {msg}", self.start.elapsed().as_secs_f64());
        }
    }
}

fn model_cell(cfg: &ExperimentConfig, family: SensorFamily, task: Task, dir: &Path, log: &Log) -> Result<(ModelCell, PoseNet<f32>)> {
    let spec = cfg.spec(family);
    let plan = cfg.plan(family, task);
    let tcfg = cfg.train_config(family, task);
    let key = key_of(&[
        &toml::to_string(&spec).expect("spec serializes"),
        &toml::to_string(&plan).expect("plan serializes"),
        &toml::to_string(&tcfg).expect("train config serializes"),
        &cfg.collection.train_fraction.to_string(),
        &format!("{:?}", cfg.architecture(&spec)),
    ]);
    let data_dir = dir.join("dataset");
    let model_path = dir.join(MODEL_FILE);
    if let Some(stamp) = read_stamp::<ModelStamp>(dir) {
        if stamp.key == key && file_sha(&model_path).as_deref() == Some(&stamp.model_sha256) {
            if let Ok(ds) = Dataset::load(&data_dir) {
                if ds.content_hash() == stamp.dataset_checksum {
                    let model = posenet::load_checkpoint(&model_path)?;
                    log.line(&format!("{family},{task}: resumed from stamp"));
                    return Ok((
                        ModelCell {
                            family,
                            task,
                            dataset_checksum: stamp.dataset_checksum,
                            model_sha256: stamp.model_sha256,
                            report: stamp.report,
                            train_seconds: stamp.train_seconds,
                            resumed: true,
                        },
                        model,
                    ));
                }
            }
        }
    }
    log.line(&format!("{family},{task}: collecting {} samples", plan.n_samples));
    if data_dir.exists() {
        fs::remove_dir_all(&data_dir).map_err(io_err(&data_dir))?;
    }
    let (ds, checksum) = cmd_collect(cfg, family, task, &data_dir)?;
    log.line(&format!("{family},{task}: dataset {checksum}"));
    let t0 = Instant::now();
    let (outcome, report) = train_dataset(cfg, &ds, dir)?;
    let train_seconds = t0.elapsed().as_secs_f64();
    let model_sha256 = file_sha(&model_path).expect("checkpoint just written");
    log.line(&format!(
        "{family},{task}: trained in {train_seconds:.1}s, offset MAE {:.4}, angle MAE {:.4}",
        report.mae[0], report.mae[1]
    ));
    let stamp = ModelStamp {
        key,
        dataset_checksum: checksum.clone(),
        model_sha256: model_sha256.clone(),
        train_seconds,
        report: report.clone(),
    };
    write_file(&dir.join(STAMP_FILE), toml::to_string(&stamp).expect("stamp serializes"))?;
    Ok((
        ModelCell {
            family,
            task,
            dataset_checksum: checksum,
            model_sha256,
            report,
            train_seconds,
            resumed: false,
        },
        outcome.model,
    ))
}

#[allow(clippy::too_many_arguments)]
fn trace_cell(
    cfg: &ExperimentConfig,
    model: &PoseNet<f32>,
    model_sha: &str,
    family: SensorFamily,
    task: Task,
    shape: &str,
    dir: &Path,
    log: &Log,
) -> Result<TraceCell> {
    let scfg = cfg.servo_config(family, task, shape);
    let kind = cfg.shape(shape)?;
    let key = key_of(&[
        model_sha,
        &toml::to_string(&scfg).expect("servo config serializes"),
        &format!("{:?}", kind.kind()),
        &toml::to_string(&cfg.spec(family)).expect("spec serializes"),
        &format!("{:?}", cfg.reproduce.expected_fail),
    ]);
    let traj_path = dir.join(TRAJECTORY_FILE);
    if let Some(stamp) = read_stamp::<TraceStamp>(dir) {
        if stamp.key == key && file_sha(&traj_path).as_deref() == Some(&stamp.trajectory_sha256) {
            log.line(&format!("{family},{task},{shape}: resumed from stamp"));
            return Ok(TraceCell {
                family,
                task,
                shape: shape.to_string(),
                trajectory_sha256: stamp.trajectory_sha256,
                report: stamp.report,
                resumed: true,
            });
        }
    }
    let (_, report) = cmd_servo(cfg, Some(model), family, shape, task, dir)?;
    let sha = file_sha(&traj_path).expect("trajectory just written");
    log.line(&format!(
        "{family},{task},{shape}: {} after {} steps, position MAE {:.4}",
        report.termination, report.steps, report.position_mae
    ));
    let stamp = TraceStamp {
        key,
        trajectory_sha256: sha.clone(),
        report: report.clone(),
    };
    write_file(&dir.join(STAMP_FILE), toml::to_string(&stamp).expect("stamp serializes"))?;
    Ok(TraceCell {
        family,
        task,
        shape: shape.to_string(),
        trajectory_sha256: sha,
        report,
        resumed: false,
    })
}

pub const SUMMARY_FILE: &str = "summary.txt";
pub const POSE_RESULTS_FILE: &str = "pose_results.csv";
pub const TRACE_RESULTS_FILE: &str = "trace_results.csv";
pub const LOG_FILE: &str = "reproduce.log";

/// Runs every selected (family, task) cell end to end: collect, train,
/// evaluate, then trace every selected shape. Cells already completed with
/// matching inputs and intact artifacts are skipped. Per-cell errors are
/// collected and the remaining cells still run.
pub fn reproduce(cfg: &ExperimentConfig, out: &Path, only: Option<&CellFilter>, workers: usize) -> Result<ReproduceOutcome> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let log = Log {
        path: out.join(LOG_FILE),
        start: Instant::now(),
    };
    let all = CellFilter::default();
    let only = only.unwrap_or(&all);
    let mut cells = Vec::new();
    for &family in &cfg.reproduce.families {
        for &task in &cfg.reproduce.tasks {
            if only.matches_model(family, task) {
                cells.push((family, task));
            }
        }
    }
    log.line(&format!("reproduce: {} model cells, {workers} workers", cells.len()));
    type CellResult = (Option<ModelCell>, Vec<TraceCell>, Vec<String>);
    let results: Vec<CellResult> = par::with_threads(workers, || {
        par::map_slice(&cells, |&(family, task)| {
            let dir = out.join(format!("{family}-{task}"));
            let mut failures = Vec::new();
            let (mc, model) = match model_cell(cfg, family, task, &dir, &log) {
                Ok(v) => v,
                Err(e) => {
                    log.line(&format!("{family},{task}: failed: {e}"));
                    return (None, Vec::new(), vec![format!("{family},{task}: {e}")]);
                }
            };
            let mut traces = Vec::new();
            for shape in cfg.shapes.iter().map(|s| s.name()) {
                if !only.matches(family, task, shape) {
                    continue;
                }
                match trace_cell(cfg, &model, &mc.model_sha256, family, task, shape, &dir.join(shape), &log) {
                    Ok(t) => traces.push(t),
                    Err(e) => {
                        log.line(&format!("{family},{task},{shape}: failed: {e}"));
                        failures.push(format!("{family},{task},{shape}: {e}"));
                    }
                }
            }
            (Some(mc), traces, failures)
        })
    });
    let mut models = Vec::new();
    let mut traces = Vec::new();
    let mut failures = Vec::new();
    for (m, t, f) in results {
        models.extend(m);
        traces.extend(t);
        failures.extend(f);
    }
    let pose_reports: Vec<EvalReport> = models.iter().map(|m| m.report.clone()).collect();
    let trace_reports: Vec<TraceReport> = traces.iter().map(|t| t.report.clone()).collect();
    let summary = summarize(&trace_reports, &pose_reports);
    write_file(&out.join(SUMMARY_FILE), &summary.text)?;
    write_file(&out.join(POSE_RESULTS_FILE), &summary.pose_csv)?;
    write_file(&out.join(TRACE_RESULTS_FILE), &summary.trace_csv)?;
    log.line("reproduce: done");
    Ok(ReproduceOutcome {
        models,
        traces,
        failures,
        summary,
    })
}
