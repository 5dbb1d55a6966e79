//! Stage orchestration: configuration, artifacts, resumability and the run
//! manifest.
//!
//! Every stage reads its upstream artifacts from the output directory and
//! writes its own there. A stage whose config section and input files hash
//! to the same key as last time, and whose outputs are still intact, is
//! skipped. One process owns the output directory at a time through a
//! lock file.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attribution::{self, AttributionError, PropagationConfig};
use crate::collab::{self, CollabConfig, CollabError};
use crate::dynamics::{self, KMeansConfig};
use crate::embedder::{self, EmbedError, EmbedderConfig};
use crate::emergence::{self, BaselineMode, EmergenceError};
use crate::ingest::{self, IngestError, IngestReport};
use crate::model::{self, AuthorManuscriptGraph, ManuscriptRecord, ModelError, ScholarProfile};
use crate::stats;
use crate::synth::{self, SynthConfig, SynthError};

pub const INGESTED_FILE: &str = "ingested_manuscripts.jsonl";
pub const SCHOLARS_FILE: &str = "scholars.csv";
pub const INGEST_REPORT_FILE: &str = "ingest_report.json";
pub const COMPONENTS_FILE: &str = "components.jsonl";
pub const EMBED_REPORT_FILE: &str = "embed_report.json";
pub const ATTRIBUTED_FILE: &str = "attributed_ws.csv";
pub const ASSIGNMENTS_FILE: &str = "assignments.csv";
pub const ATTRIBUTION_REPORT_FILE: &str = "attribution_report.json";
pub const POPULATION_CURVE_FILE: &str = "population_curve.csv";
pub const SWEEP_FILE: &str = "convergence_sweep.csv";
pub const ELBOW_FILE: &str = "elbow.csv";
pub const DYNAMICS_SUMMARY_FILE: &str = "dynamics_summary.json";
pub const EMERGENCE_CURVE_FILE: &str = "emergence_curve.csv";
pub const EMERGENCE_SUMMARY_FILE: &str = "emergence_summary.json";
pub const EVENTS_FILE: &str = "change_events.csv";
pub const IMPORTANCE_FILE: &str = "importance.csv";
pub const ANOVA_FILE: &str = "anova.csv";
pub const TUKEY_FILE: &str = "tukey.csv";
pub const COLLAB_SUMMARY_FILE: &str = "collab_summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";
pub const ERROR_FILE: &str = "error.json";
pub const LOCK_FILE: &str = ".lock";
const STAMP_DIR: &str = ".stamps";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing `{artifact}`; run the `{stage}` stage first")]
    MissingStage { stage: &'static str, artifact: String },
    #[error("config `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("output directory {0} is locked by another run; remove the lock file if that run is gone")]
    Locked(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Emergence(#[from] EmergenceError),
    #[error(transparent)]
    Collab(#[from] CollabError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

impl PipelineError {
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::MissingStage { .. } => "missing_stage",
            PipelineError::Config { .. } => "config",
            PipelineError::Locked(_) => "locked",
            PipelineError::Io { .. } => "io",
            PipelineError::Parse { .. } => "parse",
            PipelineError::Ingest(_) => "ingest",
            PipelineError::Embed(_) => "embed",
            PipelineError::Model(_) => "model",
            PipelineError::Attribution(_) => "attribution",
            PipelineError::Emergence(_) => "emergence",
            PipelineError::Collab(_) => "collab",
            PipelineError::Synth(_) => "synth",
        }
    }

    /// Machine-readable report of the failure.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = json!({ "error": self.kind(), "message": self.to_string() });
        match self {
            PipelineError::MissingStage { stage, artifact } => {
                v["stage"] = json!(stage);
                v["artifact"] = json!(artifact);
            }
            PipelineError::Config { field, .. } => v["field"] = json!(field),
            _ => {}
        }
        v
    }

    fn config(field: &str, message: impl Into<String>) -> Self {
        PipelineError::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    /// Directory holding the input files and receiving simulated corpora;
    /// `<output>/input` when unset.
    pub dir: Option<PathBuf>,
    pub bibliography: PathBuf,
    pub manuscripts: PathBuf,
    /// Optional; scholars without a row get unknown field and gender.
    pub profiles: Option<PathBuf>,
    /// Replaces the embedder's function-word list when set.
    pub function_words: Option<PathBuf>,
    pub field_stop_words: Vec<String>,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            bibliography: synth::BIBLIOGRAPHY_FILE.into(),
            manuscripts: synth::TEXTS_FILE.into(),
            profiles: Some(synth::PROFILES_FILE.into()),
            function_words: None,
            field_stop_words: ingest::DEFAULT_FIELD_STOP_WORDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionSection {
    pub max_passes: usize,
    /// Start from the previous run's attributed vectors and report how many
    /// assignments change.
    pub warm_start: bool,
}

impl Default for AttributionSection {
    fn default() -> Self {
        Self {
            max_passes: PropagationConfig::default().max_passes,
            warm_start: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsSection {
    pub omegas: Vec<f64>,
    /// Fixed change window; each scholar's yearly rate when unset.
    pub window: Option<usize>,
    /// Fixed window for the population curve.
    pub curve_window: usize,
    pub curve_max_index: Option<usize>,
    pub k_min: usize,
    pub k_max: usize,
    /// Trajectory length used for clustering.
    pub trajectory_length: usize,
    pub kmeans_restarts: usize,
    pub kmeans_max_iter: usize,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        Self {
            omegas: vec![0.01, 0.02, 0.03, 0.04, 0.05],
            window: None,
            curve_window: 3,
            curve_max_index: Some(50),
            k_min: 1,
            k_max: 8,
            trajectory_length: 30,
            kmeans_restarts: 10,
            kmeans_max_iter: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmergenceSection {
    pub baseline: BaselineMode,
    pub curve_max_index: Option<usize>,
    /// Students to project; the first `pca_count` linked students when empty.
    pub pca_scholars: Vec<String>,
    pub pca_count: usize,
}

impl Default for EmergenceSection {
    fn default() -> Self {
        Self {
            baseline: BaselineMode::default(),
            curve_max_index: Some(30),
            pca_scholars: Vec::new(),
            pca_count: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root seed for clustering, regression and simulation.
    pub seed: u64,
    pub output: PathBuf,
    /// Worker threads; all cores when 0.
    pub threads: usize,
    pub input: InputConfig,
    pub embedder: EmbedderConfig,
    pub attribution: AttributionSection,
    pub dynamics: DynamicsSection,
    pub emergence: EmergenceSection,
    pub collab: CollabConfig,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: "output".into(),
            threads: 0,
            input: InputConfig::default(),
            embedder: EmbedderConfig::default(),
            attribution: AttributionSection::default(),
            dynamics: DynamicsSection::default(),
            emergence: EmergenceSection::default(),
            collab: CollabConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

fn collect_keys(v: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    if let toml::Value::Table(t) = v {
        for (k, child) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            if child.is_table() {
                collect_keys(child, &key, out);
            } else {
                out.push(key);
            }
        }
    }
}

fn lookup<'a>(v: &'a toml::Value, key: &str) -> Option<&'a toml::Value> {
    key.split('.').try_fold(v, |node, part| node.get(part))
}

/// Parses a flag value as a TOML literal, falling back to a bare string.
fn parse_literal(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

fn set_key(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), PipelineError> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| PipelineError::config(key, "not a table"))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    node.as_table_mut()
        .ok_or_else(|| PipelineError::config(key, "not a table"))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl PipelineConfig {
    /// Builds the config from an optional TOML document plus dotted
    /// `key=value` overrides, then validates it.
    pub fn load(document: Option<&str>, overrides: &[(String, String)]) -> Result<Self, PipelineError> {
        let mut tree: toml::Value = match document {
            Some(text) => toml::from_str(text).map_err(|e| PipelineError::config("<file>", e.to_string()))?,
            None => toml::Value::Table(Default::default()),
        };
        for (key, raw) in overrides {
            if key.is_empty() || key.split('.').any(str::is_empty) {
                return Err(PipelineError::config(key, "malformed key"));
            }
            set_key(&mut tree, key, parse_literal(raw))?;
        }
        let config: PipelineConfig = tree.clone().try_into().map_err(|e: toml::de::Error| {
            let msg = e.message().to_string();
            let field = overrides
                .iter()
                .rev()
                .map(|(k, _)| k.clone())
                .find(|k| msg.contains(k.rsplit('.').next().unwrap_or(k)))
                .unwrap_or_else(|| "<config>".to_string());
            PipelineError::config(&field, msg)
        })?;
        // Keys the structs silently ignore would vanish on a round trip.
        let echoed = toml::Value::try_from(&config).map_err(|e| PipelineError::config("<config>", e.to_string()))?;
        let mut keys = Vec::new();
        collect_keys(&tree, "", &mut keys);
        for key in keys {
            if lookup(&echoed, &key).is_none() && !Self::optional_key(&key) {
                return Err(PipelineError::config(&key, "unknown key"));
            }
        }
        config.validate()?;
        Ok(config)
    }

    /// Keys whose value may legitimately be absent from the echo.
    fn optional_key(key: &str) -> bool {
        matches!(
            key,
            "input.dir"
                | "input.profiles"
                | "input.function_words"
                | "embedder.precomputed_dimension"
                | "dynamics.window"
                | "dynamics.curve_max_index"
                | "emergence.curve_max_index"
                | "collab.events.window"
        )
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |f: &str, m: &str| PipelineError::config(f, m);
        if self.output.as_os_str().is_empty() {
            return Err(err("output", "must not be empty"));
        }
        self.embedder
            .validate()
            .map_err(|e| err("embedder", &e.to_string()))?;
        if self.attribution.max_passes == 0 {
            return Err(err("attribution.max_passes", "must be positive"));
        }
        let d = &self.dynamics;
        if d.omegas.is_empty() || d.omegas.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(err("dynamics.omegas", "needs at least one finite non-negative threshold"));
        }
        if d.window == Some(0) {
            return Err(err("dynamics.window", "must be positive"));
        }
        if d.curve_window == 0 {
            return Err(err("dynamics.curve_window", "must be positive"));
        }
        if d.k_min == 0 || d.k_min > d.k_max {
            return Err(err("dynamics.k_min", "must be positive and at most k_max"));
        }
        if d.trajectory_length == 0 {
            return Err(err("dynamics.trajectory_length", "must be positive"));
        }
        if d.kmeans_restarts == 0 || d.kmeans_max_iter == 0 {
            return Err(err("dynamics.kmeans_restarts", "restarts and iterations must be positive"));
        }
        let c = &self.collab;
        c.gbt.validate().map_err(|e| err("collab.gbt", &e.to_string()))?;
        if !(c.tukey_alpha > 0.0 && c.tukey_alpha < 1.0) {
            return Err(err("collab.tukey_alpha", "must lie in (0, 1)"));
        }
        if c.importance_repeats == 0 {
            return Err(err("collab.importance_repeats", "must be positive"));
        }
        if c.events.window == Some(0) {
            return Err(err("collab.events.window", "must be positive"));
        }
        if c.events.epsilon.is_nan() || c.events.epsilon < 0.0 {
            return Err(err("collab.events.epsilon", "must be non-negative"));
        }
        self.synth.validate().map_err(|e| match e {
            SynthError::Config(m) => err("synth", &m),
            other => err("synth", &other.to_string()),
        })?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn input_dir(&self) -> PathBuf {
        self.input.dir.clone().unwrap_or_else(|| self.output.join("input"))
    }

    fn input_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.input_dir().join(p)
        }
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Simulate,
    Ingest,
    Embed,
    Attribute,
    AnalyzeDynamics,
    AnalyzeEmergence,
    AnalyzeCollab,
}

impl Stage {
    /// Stages run by `all`, in order.
    pub const PIPELINE: [Stage; 6] = [
        Stage::Ingest,
        Stage::Embed,
        Stage::Attribute,
        Stage::AnalyzeDynamics,
        Stage::AnalyzeEmergence,
        Stage::AnalyzeCollab,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Ingest => "ingest",
            Stage::Embed => "embed",
            Stage::Attribute => "attribute",
            Stage::AnalyzeDynamics => "analyze-dynamics",
            Stage::AnalyzeEmergence => "analyze-emergence",
            Stage::AnalyzeCollab => "analyze-collab",
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, PipelineError> {
    let mut f = File::open(path).map_err(io_err(path))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Writes through a temporary sibling and renames into place.
fn write_file<F>(path: &Path, body: F) -> Result<(), PipelineError>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<(), PipelineError>,
{
    let tmp = path.with_extension("tmp");
    let file = File::create(&tmp).map_err(io_err(&tmp))?;
    let mut w = BufWriter::new(file);
    body(&mut w)?;
    w.flush().map_err(io_err(&tmp))?;
    drop(w);
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), PipelineError> {
    write_file(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(|e| PipelineError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        writeln!(w).map_err(io_err(path))
    })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> PipelineError + '_ {
    move |e| PipelineError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), PipelineError> {
    write_file(path, |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(header).map_err(csv_err(path))?;
        for r in rows {
            c.write_record(&r).map_err(csv_err(path))?;
        }
        c.flush().map_err(io_err(path))
    })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn open_reader(path: &Path) -> Result<BufReader<File>, PipelineError> {
    Ok(BufReader::with_capacity(1 << 16, File::open(path).map_err(io_err(path))?))
}

/// Exclusive ownership of the output directory while a run is active.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(io_err(&path))?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(dir.to_path_buf())),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub key: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub counts: serde_json::Value,
    pub wall_seconds: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub stages: BTreeMap<String, StageRecord>,
    pub wall_seconds: f64,
}

struct StageOutput {
    files: Vec<PathBuf>,
    counts: serde_json::Value,
}

pub struct Pipeline {
    config: PipelineConfig,
    out: PathBuf,
    force: bool,
    manifest: Manifest,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, force: bool) -> Self {
        let out = config.output.clone();
        Self {
            config,
            out,
            force,
            manifest: Manifest::default(),
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Runs `stages` in order under the output lock and writes the manifest.
    pub fn run(&mut self, stages: &[Stage]) -> Result<&Manifest, PipelineError> {
        let started = Instant::now();
        let _lock = OutputLock::acquire(&self.out)?;
        fs::create_dir_all(self.out.join(STAMP_DIR)).map_err(io_err(&self.out))?;
        let manifest_path = self.out.join(MANIFEST_FILE);
        if let Ok(text) = fs::read_to_string(&manifest_path) {
            if let Ok(m) = serde_json::from_str::<Manifest>(&text) {
                self.manifest.stages = m.stages;
            }
        }
        self.manifest.version = env!("CARGO_PKG_VERSION").to_string();
        self.manifest.config_hash = self.config.config_hash();
        self.manifest.config = serde_json::to_value(&self.config).expect("config serializes");
        let eff = self.out.join(EFFECTIVE_CONFIG_FILE);
        write_file(&eff, |w| w.write_all(self.config.to_toml().as_bytes()).map_err(io_err(&eff)))?;
        for &stage in stages {
            self.run_stage(stage)?;
        }
        self.manifest.wall_seconds = started.elapsed().as_secs_f64();
        write_json(&manifest_path, &self.manifest)?;
        Ok(&self.manifest)
    }

    fn stage_section(&self, stage: Stage) -> serde_json::Value {
        let c = &self.config;
        match stage {
            Stage::Simulate => json!({ "seed": c.seed, "synth": c.synth }),
            Stage::Ingest => json!({ "input": c.input, "precomputed_dimension": c.embedder.precomputed_dimension }),
            Stage::Embed => json!({ "embedder": c.embedder, "function_words": c.input.function_words }),
            Stage::Attribute => json!({ "attribution": c.attribution }),
            Stage::AnalyzeDynamics => json!({ "seed": c.seed, "dynamics": c.dynamics }),
            Stage::AnalyzeEmergence => json!({ "emergence": c.emergence }),
            Stage::AnalyzeCollab => json!({ "seed": c.seed, "collab": c.collab }),
        }
    }

    fn stage_inputs(&self, stage: Stage) -> Result<Vec<PathBuf>, PipelineError> {
        let c = &self.config;
        let need = |stage: &'static str, file: &str| -> Result<PathBuf, PipelineError> {
            let p = self.out.join(file);
            if p.is_file() {
                Ok(p)
            } else {
                Err(PipelineError::MissingStage {
                    stage,
                    artifact: file.to_string(),
                })
            }
        };
        let raw = |p: &Path| -> Result<PathBuf, PipelineError> {
            let full = c.input_path(p);
            if full.is_file() {
                Ok(full)
            } else {
                Err(PipelineError::MissingStage {
                    stage: "simulate",
                    artifact: full.display().to_string(),
                })
            }
        };
        Ok(match stage {
            Stage::Simulate => Vec::new(),
            Stage::Ingest => {
                let mut v = vec![raw(&c.input.bibliography)?, raw(&c.input.manuscripts)?];
                if let Some(p) = &c.input.profiles {
                    v.push(raw(p)?);
                }
                v
            }
            Stage::Embed => {
                let mut v = vec![need("ingest", INGESTED_FILE)?];
                if let Some(p) = &c.input.function_words {
                    v.push(raw(p)?);
                }
                v
            }
            Stage::Attribute => vec![need("embed", COMPONENTS_FILE)?, need("ingest", SCHOLARS_FILE)?],
            Stage::AnalyzeDynamics | Stage::AnalyzeEmergence | Stage::AnalyzeCollab => vec![
                need("attribute", ATTRIBUTED_FILE)?,
                need("embed", COMPONENTS_FILE)?,
                need("ingest", SCHOLARS_FILE)?,
            ],
        })
    }

    fn display_name(&self, p: &Path) -> String {
        p.strip_prefix(&self.out).unwrap_or(p).display().to_string()
    }

    fn run_stage(&mut self, stage: Stage) -> Result<(), PipelineError> {
        let started = Instant::now();
        let inputs = self.stage_inputs(stage)?;
        let mut input_hashes = BTreeMap::new();
        for p in &inputs {
            input_hashes.insert(self.display_name(p), file_sha256(p)?);
        }
        let key = sha256_hex(
            serde_json::to_string(&json!({
                "stage": stage.name(),
                "section": self.stage_section(stage),
                "inputs": input_hashes,
            }))
            .expect("plain json")
            .as_bytes(),
        );
        let stamp_path = self.out.join(STAMP_DIR).join(format!("{}.json", stage.name()));
        let reusable = if self.force || (stage == Stage::Attribute && self.config.attribution.warm_start) {
            None
        } else {
            self.stamp_matches(&stamp_path, &key)?
        };
        if let Some(prev) = reusable {
            log::info!("{}: inputs unchanged, skipping", stage.name());
            self.manifest.stages.insert(
                stage.name().to_string(),
                StageRecord {
                    skipped: true,
                    wall_seconds: started.elapsed().as_secs_f64(),
                    ..prev
                },
            );
            return Ok(());
        }
        log::info!("{}: running", stage.name());
        let out = match stage {
            Stage::Simulate => self.simulate()?,
            Stage::Ingest => self.ingest(&inputs)?,
            Stage::Embed => self.embed()?,
            Stage::Attribute => self.attribute()?,
            Stage::AnalyzeDynamics => self.analyze_dynamics()?,
            Stage::AnalyzeEmergence => self.analyze_emergence()?,
            Stage::AnalyzeCollab => self.analyze_collab()?,
        };
        let mut outputs = BTreeMap::new();
        for p in &out.files {
            outputs.insert(self.display_name(p), file_sha256(p)?);
        }
        let record = StageRecord {
            key,
            inputs: input_hashes,
            outputs,
            counts: out.counts,
            wall_seconds: started.elapsed().as_secs_f64(),
            skipped: false,
        };
        log::info!(
            "{}: done in {:.2}s",
            stage.name(),
            record.wall_seconds
        );
        write_json(&stamp_path, &record)?;
        self.manifest.stages.insert(stage.name().to_string(), record);
        Ok(())
    }

    /// The previous record when its key matches and every output it wrote
    /// is still byte-for-byte intact.
    fn stamp_matches(&self, stamp: &Path, key: &str) -> Result<Option<StageRecord>, PipelineError> {
        let Ok(text) = fs::read_to_string(stamp) else {
            return Ok(None);
        };
        let Ok(prev) = serde_json::from_str::<StageRecord>(&text) else {
            return Ok(None);
        };
        if prev.key != key {
            return Ok(None);
        }
        for (name, hash) in &prev.outputs {
            let p = if Path::new(name).is_absolute() { PathBuf::from(name) } else { self.out.join(name) };
            if !p.is_file() || file_sha256(&p)? != *hash {
                return Ok(None);
            }
        }
        Ok(Some(prev))
    }

    fn simulate(&self) -> Result<StageOutput, PipelineError> {
        let cfg = SynthConfig {
            seed: self.config.seed,
            ..self.config.synth.clone()
        };
        let t = Instant::now();
        let corpus = synth::generate(&cfg)?;
        let dir = self.config.input_dir();
        corpus.write_files(&dir)?;
        rate("simulate", corpus.manuscripts.len(), t);
        Ok(StageOutput {
            files: [
                synth::BIBLIOGRAPHY_FILE,
                synth::TEXTS_FILE,
                synth::PROFILES_FILE,
                synth::TRUTH_FILE,
            ]
            .iter()
            .map(|f| dir.join(f))
            .collect(),
            counts: json!({
                "scholars": corpus.profiles.len(),
                "manuscripts": corpus.manuscripts.len(),
                "students": corpus.truth.students.len(),
            }),
        })
    }

    fn ingest(&self, inputs: &[PathBuf]) -> Result<StageOutput, PipelineError> {
        let c = &self.config;
        let t = Instant::now();
        let mut reader = ingest::BibXmlReader::new(open_reader(&inputs[0])?);
        let records: Vec<ManuscriptRecord> = reader.by_ref().collect::<Result<_, _>>()?;
        let xml = reader.stats().clone();
        rate("ingest: bibliography", records.len(), t);

        let texts = ingest::parse_manuscript_text_jsonl(open_reader(&inputs[1])?, c.embedder.precomputed_dimension);
        let (matched, link) = ingest::link_texts(records, texts)?;
        let (profiles, profiles_report) = match inputs.get(2) {
            Some(p) => ingest::read_profiles_csv(open_reader(p)?, &c.input.field_stop_words)?,
            None => (Vec::new(), Default::default()),
        };
        let (graph, build) = model::build_graph(matched, profiles)?;
        let (graph, filter) = model::filter_scholars(graph);
        let report = IngestReport {
            xml,
            link,
            profiles: profiles_report,
            build,
            filter,
        };

        let ingested = self.out.join(INGESTED_FILE);
        write_records(&ingested, graph.manuscripts())?;
        let scholars = self.out.join(SCHOLARS_FILE);
        write_scholars(&scholars, graph.scholars())?;
        let report_path = self.out.join(INGEST_REPORT_FILE);
        write_json(&report_path, &report)?;
        Ok(StageOutput {
            files: vec![ingested, scholars, report_path],
            counts: json!({
                "manuscripts": graph.manuscript_count(),
                "scholars": graph.scholar_count(),
                "edges": graph.edge_count(),
                "match_rate": report.link.match_rate,
            }),
        })
    }

    fn embed(&self) -> Result<StageOutput, PipelineError> {
        let mut cfg = self.config.embedder.clone();
        if let Some(p) = &self.config.input.function_words {
            cfg.function_words = embedder::read_function_words(open_reader(&self.config.input_path(p))?)?;
        }
        let t = Instant::now();
        let records = read_records(&self.out.join(INGESTED_FILE))?;
        let (mut embedded, report) = embedder::embed_corpus(records, &cfg)?;
        for r in &mut embedded {
            r.text = None;
        }
        rate("embed", embedded.len(), t);
        let components = self.out.join(COMPONENTS_FILE);
        write_records(&components, embedded.iter())?;
        let report_path = self.out.join(EMBED_REPORT_FILE);
        write_json(&report_path, &report)?;
        Ok(StageOutput {
            files: vec![components, report_path],
            counts: serde_json::to_value(&report).expect("plain data"),
        })
    }

    fn load_graph(&self) -> Result<AuthorManuscriptGraph, PipelineError> {
        let records = read_records(&self.out.join(COMPONENTS_FILE))?;
        let profiles = read_scholars(&self.out.join(SCHOLARS_FILE))?;
        let (graph, _) = model::build_graph(records, profiles)?;
        Ok(graph)
    }

    fn load_attributed_graph(&self) -> Result<AuthorManuscriptGraph, PipelineError> {
        let mut graph = self.load_graph()?;
        attribution::read_attributed_csv(open_reader(&self.out.join(ATTRIBUTED_FILE))?, &mut graph)?;
        Ok(graph)
    }

    fn attribute(&self) -> Result<StageOutput, PipelineError> {
        let cfg = PropagationConfig {
            max_passes: self.config.attribution.max_passes,
        };
        let t = Instant::now();
        let mut graph = self.load_graph()?;
        let attributed_path = self.out.join(ATTRIBUTED_FILE);
        let assignments_path = self.out.join(ASSIGNMENTS_FILE);
        let warm = self.config.attribution.warm_start && attributed_path.is_file() && assignments_path.is_file();
        let result = if warm {
            attribution::read_attributed_csv(open_reader(&attributed_path)?, &mut graph)?;
            let previous = attribution::read_assignments_csv(open_reader(&assignments_path)?)?;
            attribution::propagate_warm(&mut graph, &cfg, &previous)?
        } else {
            attribution::propagate(&mut graph, &cfg)?
        };
        rate("attribute", graph.manuscript_count(), t);
        write_file(&attributed_path, |w| {
            attribution::write_attributed_csv(w, &graph).map_err(io_err(&attributed_path))
        })?;
        write_file(&assignments_path, |w| Ok(attribution::write_assignments_csv(w, &result.assignments)?))?;
        let report_path = self.out.join(ATTRIBUTION_REPORT_FILE);
        write_json(&report_path, &result.report)?;
        Ok(StageOutput {
            files: vec![attributed_path, assignments_path, report_path],
            counts: serde_json::to_value(&result.report).expect("plain data"),
        })
    }

    fn analyze_dynamics(&self) -> Result<StageOutput, PipelineError> {
        let d = &self.config.dynamics;
        let t = Instant::now();
        let graph = self.load_attributed_graph()?;
        let series = dynamics::all_change_series(&graph, d.window)?;
        let refs: Vec<&[f64]> = series.iter().map(|s| s.values.as_slice()).collect();

        let fixed = dynamics::all_change_series(&graph, Some(d.curve_window))?;
        let fixed_refs: Vec<&[f64]> = fixed.iter().map(|s| s.values.as_slice()).collect();
        let curve = dynamics::population_curve(&fixed_refs, d.curve_max_index);
        let curve_path = self.out.join(POPULATION_CURVE_FILE);
        write_csv(
            &curve_path,
            &["index", "mean", "std", "count"],
            curve
                .iter()
                .map(|p| vec![p.index.to_string(), p.mean.to_string(), p.std.to_string(), p.count.to_string()])
                .collect(),
        )?;

        let sweep = dynamics::convergence_sweep(&series, &d.omegas);
        let sweep_path = self.out.join(SWEEP_FILE);
        write_csv(
            &sweep_path,
            &["omega", "alpha_mean", "alpha_std", "converged_pct", "converged", "total"],
            sweep
                .iter()
                .map(|r| {
                    vec![
                        r.omega.to_string(),
                        r.alpha_mean.to_string(),
                        r.alpha_std.to_string(),
                        r.converged_pct.to_string(),
                        r.converged.to_string(),
                        r.total.to_string(),
                    ]
                })
                .collect(),
        )?;

        let kcfg = KMeansConfig {
            restarts: d.kmeans_restarts,
            max_iter: d.kmeans_max_iter,
            seed: self.config.seed,
        };
        let elbow = dynamics::ts_kmeans_elbow(&refs, d.k_min..=d.k_max, d.trajectory_length, &kcfg);
        let ratios: BTreeMap<usize, f64> = dynamics::drop_ratios(&elbow).into_iter().collect();
        let elbow_path = self.out.join(ELBOW_FILE);
        write_csv(
            &elbow_path,
            &["k", "inertia", "drop_ratio"],
            elbow
                .iter()
                .map(|e| vec![e.k.to_string(), e.inertia.to_string(), opt(ratios.get(&e.k))])
                .collect(),
        )?;
        rate("analyze-dynamics", series.len(), t);

        let clustered = dynamics::trajectory_points(&refs, d.trajectory_length).len();
        // Convergence points index change entries; entry i sits at trajectory index i + offset.
        let offsets: Vec<usize> = series.iter().map(|s| s.kappa_used).collect();
        let offset_mean = offsets.iter().sum::<usize>() as f64 / offsets.len().max(1) as f64;
        let counts = json!({
            "scholars": series.len(),
            "curve_points": curve.len(),
            "clustered_trajectories": clustered,
        });
        let summary_path = self.out.join(DYNAMICS_SUMMARY_FILE);
        write_json(
            &summary_path,
            &json!({
                "counts": counts,
                "sweep": sweep,
                "elbow": elbow,
                "drop_ratios": ratios,
                "alpha_offset": {
                    "mean": offset_mean,
                    "min": offsets.iter().min(),
                    "max": offsets.iter().max(),
                },
            }),
        )?;
        Ok(StageOutput {
            files: vec![curve_path, sweep_path, elbow_path, summary_path],
            counts,
        })
    }

    fn analyze_emergence(&self) -> Result<StageOutput, PipelineError> {
        let e = &self.config.emergence;
        let t = Instant::now();
        let graph = self.load_attributed_graph()?;
        let analysis = emergence::analyze(&graph, e.baseline)?;
        let refs: Vec<&[f64]> = analysis.series.iter().map(|s| s.values.as_slice()).collect();
        let curve = dynamics::population_curve(&refs, e.curve_max_index);
        let curve_path = self.out.join(EMERGENCE_CURVE_FILE);
        write_csv(
            &curve_path,
            &["index", "mean", "std", "count"],
            curve
                .iter()
                .map(|p| vec![p.index.to_string(), p.mean.to_string(), p.std.to_string(), p.count.to_string()])
                .collect(),
        )?;
        let means: Vec<f64> = curve.iter().map(|p| p.mean).collect();
        let fit = emergence::fit_logistic(&means);
        let index: Vec<f64> = (0..means.len()).map(|i| i as f64).collect();
        let trend = Some(stats::spearman(&index, &means)).filter(|r| r.is_finite());

        let mut files = vec![curve_path];
        let chosen: Vec<&emergence::EmergenceSeries> = if e.pca_scholars.is_empty() {
            analysis.series.iter().take(e.pca_count).collect()
        } else {
            analysis
                .series
                .iter()
                .filter(|s| e.pca_scholars.contains(&s.student))
                .collect()
        };
        let mut projected = Vec::new();
        for s in chosen {
            let trajectory = graph.attributed_trajectory(&s.student)?;
            let vectors: Vec<&model::WsVector> = trajectory.iter().map(|(_, v)| *v).collect();
            let pca = match emergence::pca_project(&vectors) {
                Ok(p) => p,
                Err(EmergenceError::TooFewVectors { .. }) => continue,
                Err(err) => return Err(err.into()),
            };
            let base = pca.project(s.baseline.as_slice());
            let mut rows = vec![vec!["-1".to_string(), base[0].to_string(), base[1].to_string(), String::new()]];
            for (i, ((m, _), p)) in trajectory.iter().zip(&pca.points).enumerate() {
                rows.push(vec![i.to_string(), p[0].to_string(), p[1].to_string(), m.to_string()]);
            }
            let path = self.out.join(format!("pca_{}.csv", sanitize(&s.student)));
            write_csv(&path, &["index", "x", "y", "manuscript"], rows)?;
            projected.push(json!({
                "scholar": s.student,
                "explained": pca.explained,
                "rank_deficient": pca.rank_deficient,
            }));
            files.push(path);
        }
        rate("analyze-emergence", analysis.series.len(), t);

        let counts = serde_json::to_value(&analysis.report).expect("plain data");
        let summary_path = self.out.join(EMERGENCE_SUMMARY_FILE);
        write_json(
            &summary_path,
            &json!({
                "report": analysis.report,
                "links": analysis.links,
                "logistic_fit": fit,
                "spearman_trend": trend,
                "pca": projected,
            }),
        )?;
        files.push(summary_path);
        Ok(StageOutput { files, counts })
    }

    fn analyze_collab(&self) -> Result<StageOutput, PipelineError> {
        let cfg = CollabConfig {
            seed: self.config.seed,
            ..self.config.collab.clone()
        };
        let t = Instant::now();
        let graph = self.load_attributed_graph()?;
        let analysis = collab::analyze(&graph, &cfg)?;
        rate("analyze-collab", analysis.events.len(), t);

        let width = analysis.report.feature_width;
        let mut header: Vec<String> = [
            "focal",
            "manuscript",
            "y",
            "type",
            "signed_approach",
            "gender",
            "field",
            "coauthors",
            "prior_pubs",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend((0..width).map(|i| format!("x{i}")));
        let events_path = self.out.join(EVENTS_FILE);
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(
            &events_path,
            &header_refs,
            analysis
                .events
                .iter()
                .map(|e| {
                    let mut row = vec![
                        e.focal.clone(),
                        e.manuscript.clone(),
                        e.y.to_string(),
                        opt(e.change_type.map(|c| c.as_str())),
                        opt(e.signed_approach),
                    ];
                    for f in collab::FACTORS {
                        row.push(collab::factor_level(e, f).unwrap_or_default());
                    }
                    row.extend(e.features.iter().map(|x| x.to_string()));
                    row
                })
                .collect(),
        )?;

        let importance_path = self.out.join(IMPORTANCE_FILE);
        write_csv(
            &importance_path,
            &["factor", "importance", "raw"],
            analysis
                .importance
                .iter()
                .map(|g| vec![g.group.clone(), g.normalized.to_string(), g.raw.to_string()])
                .collect(),
        )?;

        let anova_path = self.out.join(ANOVA_FILE);
        let mut anova_rows = Vec::new();
        let mut tukey_rows = Vec::new();
        for test in &analysis.tests {
            for l in &test.levels {
                anova_rows.push(vec![
                    test.factor.clone(),
                    l.level.clone(),
                    l.n.to_string(),
                    l.mean.to_string(),
                    opt(test.f),
                    opt(test.p),
                    test.stars.clone(),
                    opt(l.modal_type.map(|c| c.as_str())),
                ]);
            }
            for r in &test.tukey {
                let c = &r.comparison;
                tukey_rows.push(vec![
                    test.factor.clone(),
                    r.level_a.clone(),
                    r.level_b.clone(),
                    c.mean_diff.to_string(),
                    c.q.to_string(),
                    c.p_adj.to_string(),
                    c.lower.to_string(),
                    c.upper.to_string(),
                    c.reject.to_string(),
                ]);
            }
        }
        write_csv(
            &anova_path,
            &["factor", "level", "n", "mean", "F", "p", "stars", "modal_type"],
            anova_rows,
        )?;
        let tukey_path = self.out.join(TUKEY_FILE);
        write_csv(
            &tukey_path,
            &["factor", "level_a", "level_b", "mean_diff", "q", "p_adj", "lower", "upper", "reject"],
            tukey_rows,
        )?;

        let table: Vec<serde_json::Value> = analysis
            .tests
            .iter()
            .map(|test| {
                let importance = analysis
                    .importance
                    .iter()
                    .find(|g| g.group == test.factor)
                    .map(|g| g.normalized);
                json!({
                    "factor": test.factor,
                    "importance": importance,
                    "f": test.f,
                    "p": test.p,
                    "stars": test.stars,
                    "degenerate": test.degenerate,
                    "levels": test.levels,
                })
            })
            .collect();
        let counts = serde_json::to_value(&analysis.report).expect("plain data");
        let summary_path = self.out.join(COLLAB_SUMMARY_FILE);
        write_json(
            &summary_path,
            &json!({
                "events": analysis.report,
                "regression": analysis.regression,
                "factors": table,
            }),
        )?;
        Ok(StageOutput {
            files: vec![events_path, importance_path, anova_path, tukey_path, summary_path],
            counts,
        })
    }
}

fn rate(stage: &str, records: usize, started: Instant) {
    let secs = started.elapsed().as_secs_f64();
    log::info!(
        "{stage}: {records} records in {secs:.2}s ({:.0} records/s)",
        records as f64 / secs.max(1e-9)
    );
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn write_records<'a, I>(path: &Path, records: I) -> Result<(), PipelineError>
where
    I: IntoIterator<Item = &'a ManuscriptRecord>,
{
    write_file(path, |w| {
        for r in records {
            serde_json::to_writer(&mut *w, r).map_err(|e| PipelineError::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            writeln!(w).map_err(io_err(path))?;
        }
        Ok(())
    })
}

pub fn read_records(path: &Path) -> Result<Vec<ManuscriptRecord>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in open_reader(path)?.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PipelineError::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

pub fn write_scholars<'a, I>(path: &Path, scholars: I) -> Result<(), PipelineError>
where
    I: IntoIterator<Item = &'a ScholarProfile>,
{
    write_file(path, |w| {
        let mut c = csv::Writer::from_writer(w);
        for s in scholars {
            c.serialize(s).map_err(csv_err(path))?;
        }
        c.flush().map_err(io_err(path))
    })
}

pub fn read_scholars(path: &Path) -> Result<Vec<ScholarProfile>, PipelineError> {
    csv::Reader::from_reader(open_reader(path)?)
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(csv_err(path))
}
