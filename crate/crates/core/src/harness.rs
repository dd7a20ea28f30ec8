//! Experiment configuration, batch simulation with ordered log output, and
//! evaluation of log files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, LazyLock};
use std::time::Instant;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agenda::AgendaSimulator;
use crate::backend::{BackendConfig, BackendError, CassetteBackend, CompletionBackend, HttpBackend, ScriptedBackend};
use crate::duet::{run_dialogue, DialogueLimits, DualModelSimulator, LoopConfig, UserSimulator};
use crate::generator::ActGenerator;
use crate::metrics::{EvaluationReport, MetricsError};
use crate::model::{DialogueLog, RenderMode, LOG_SCHEMA_VERSION};
use crate::nlg::{NlgError, TemplateNlg};
use crate::prompts::{describe_goal, Ablation, PromptError, PromptForge, Requirement, RequirementKind, RequirementSet, TemplateSet};
use crate::sysstub::SystemStub;
use crate::verifier::Verifier;
use crate::world::{World, WorldError};

pub const LOG_FILE: &str = "dialogues.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error at {field}: {message}")]
    Config { field: String, message: String },
    #[error("world: {0}")]
    WorldLoad(#[from] WorldError),
    #[error("{path}: line {line}: {message}")]
    LogParse { path: String, line: usize, message: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Nlg(#[from] NlgError),
    #[error("io: {0}")]
    Io(String),
}

impl HarnessError {
    pub fn config(field: &str, message: impl Into<String>) -> Self {
        Self::Config { field: field.to_string(), message: message.into() }
    }

    /// 1 for configuration problems, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimulatorKind {
    Duet,
    DuetNoVerifier,
    Agenda,
}

impl std::str::FromStr for SimulatorKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "duet" => Ok(Self::Duet),
            "duet-no-verifier" => Ok(Self::DuetNoVerifier),
            "agenda" => Ok(Self::Agenda),
            other => Err(format!("unknown simulator {other:?} (expected duet, duet-no-verifier or agenda)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Http(BackendConfig),
    /// Responses served in order from a file, one per line.
    Scripted { path: PathBuf },
    Replay { cassette: PathBuf },
    Record {
        cassette: PathBuf,
        #[serde(flatten)]
        http: BackendConfig,
    },
}

impl BackendSpec {
    pub fn build(&self) -> Result<Arc<dyn CompletionBackend>, BackendError> {
        Ok(match self {
            BackendSpec::Http(cfg) => Arc::new(HttpBackend::new(cfg.clone())?),
            BackendSpec::Scripted { path } => Arc::new(ScriptedBackend::from_file(path)?),
            BackendSpec::Replay { cassette } => Arc::new(CassetteBackend::replay(cassette)?),
            BackendSpec::Record { cassette, http } => {
                Arc::new(CassetteBackend::record(Arc::new(HttpBackend::new(http.clone())?), cassette)?)
            }
        })
    }

    fn validate(&self, field: &str) -> Result<(), HarnessError> {
        let cfg = match self {
            BackendSpec::Http(c) | BackendSpec::Record { http: c, .. } => c,
            _ => return Ok(()),
        };
        cfg.validate().map_err(|e| HarnessError::config(field, e.to_string()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RequirementOverrides {
    pub generator: Option<Vec<Requirement>>,
    pub verifier: Option<Vec<Requirement>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub simulator: SimulatorKind,
    pub generator: Option<BackendSpec>,
    /// Falls back to the generator backend when absent.
    pub verifier: Option<BackendSpec>,
    /// Bundled world when absent.
    pub world: Option<PathBuf>,
    /// Bundled prompt templates when absent.
    pub templates: Option<PathBuf>,
    pub dialogues: usize,
    pub seed: u64,
    #[serde(rename = "loop")]
    pub loop_config: LoopConfig,
    pub render_mode: RenderMode,
    pub omit_goal: bool,
    pub omit_history: bool,
    pub requirements: RequirementOverrides,
    pub output_dir: PathBuf,
    pub parallelism: usize,
    pub max_user_turns: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            simulator: SimulatorKind::Agenda,
            generator: None,
            verifier: None,
            world: None,
            templates: None,
            dialogues: 100,
            seed: 0,
            loop_config: LoopConfig::default(),
            render_mode: RenderMode::Utterances,
            omit_goal: false,
            omit_history: false,
            requirements: RequirementOverrides::default(),
            output_dir: PathBuf::from("runs/latest"),
            parallelism: 4,
            max_user_turns: crate::duet::DEFAULT_MAX_USER_TURNS,
        }
    }
}

static VAR_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}").unwrap());

/// Replaces every `${NAME}` with the value `lookup` returns for it.
pub fn interpolate(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String, HarnessError> {
    let mut missing = None;
    let out = VAR_RE.replace_all(text, |c: &regex::Captures| match lookup(&c[1]) {
        Some(v) => v,
        None => {
            missing.get_or_insert_with(|| c[1].to_string());
            String::new()
        }
    });
    match missing {
        Some(name) => Err(HarnessError::config(&format!("${{{name}}}"), "environment variable is not set")),
        None => Ok(out.into_owned()),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<Self, HarnessError> {
        let text = interpolate(text, lookup)?;
        let config: Self = toml::from_str(&text).map_err(|e| {
            let field = e.span().map(|s| format!("bytes {}..{}", s.start, s.end)).unwrap_or_else(|| "<root>".into());
            HarnessError::config(&field, e.message().to_string())
        })?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::config("<file>", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, |k| std::env::var(k).ok())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.validate_fields()?;
        if self.simulator != SimulatorKind::Agenda && self.generator.is_none() {
            return Err(HarnessError::config("generator", "duet simulators need a generator backend"));
        }
        Ok(())
    }

    /// Everything `validate` checks except that a backend is configured.
    fn validate_fields(&self) -> Result<(), HarnessError> {
        if self.dialogues == 0 {
            return Err(HarnessError::config("dialogues", "must be at least 1"));
        }
        if self.parallelism == 0 {
            return Err(HarnessError::config("parallelism", "must be at least 1"));
        }
        if self.max_user_turns == 0 {
            return Err(HarnessError::config("max_user_turns", "must be at least 1"));
        }
        self.loop_config.validate().map_err(|m| HarnessError::config("loop.max_iterations", m))?;
        if let Some(g) = &self.generator {
            g.validate("generator")?;
        }
        if let Some(v) = &self.verifier {
            v.validate("verifier")?;
        }
        self.requirement_sets()?;
        Ok(())
    }

    fn verifier_active(&self) -> bool {
        self.simulator == SimulatorKind::Duet && self.loop_config.verifier_enabled
    }

    /// Generator and verifier requirements; without an active verifier the
    /// verifier's list is merged into the generator's.
    pub fn requirement_sets(&self) -> Result<(RequirementSet, RequirementSet), HarnessError> {
        let build = |items: &Option<Vec<Requirement>>, kind, field: &str, default: RequirementSet| match items {
            Some(items) => RequirementSet::new(kind, items.clone()).map_err(|e| HarnessError::config(field, e.to_string())),
            None => Ok(default),
        };
        let generator = build(
            &self.requirements.generator,
            RequirementKind::Generator,
            "requirements.generator",
            RequirementSet::default_generator(),
        )?;
        let verifier = build(
            &self.requirements.verifier,
            RequirementKind::Verifier,
            "requirements.verifier",
            RequirementSet::default_verifier(),
        )?;
        if self.verifier_active() {
            Ok((generator, verifier))
        } else {
            Ok((RequirementSet::merged(&generator, &verifier), verifier))
        }
    }

    /// The config as echoed into the manifest; the output location is left
    /// out so identical experiments produce identical manifests.
    fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("output_dir");
        }
        v
    }
}

/// Everything a batch of sessions shares.
pub struct SessionRunner {
    config: ExperimentConfig,
    world: Arc<World>,
    forge: Arc<PromptForge>,
    nlg: Arc<TemplateNlg>,
    generator_backend: Option<Arc<dyn CompletionBackend>>,
    verifier_backend: Option<Arc<dyn CompletionBackend>>,
    requirements: (RequirementSet, RequirementSet),
}

impl SessionRunner {
    /// Builds backends from the config.
    pub fn from_config(config: ExperimentConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let generator = config.generator.as_ref().map(BackendSpec::build).transpose()?;
        let verifier = match &config.verifier {
            Some(spec) => Some(spec.build()?),
            None => generator.clone(),
        };
        Self::with_backends(config, generator, verifier)
    }

    pub fn with_backends(
        config: ExperimentConfig,
        generator: Option<Arc<dyn CompletionBackend>>,
        verifier: Option<Arc<dyn CompletionBackend>>,
    ) -> Result<Self, HarnessError> {
        config.validate_fields()?;
        let world = Arc::new(match &config.world {
            Some(p) => World::load(p)?,
            None => World::bundled(),
        });
        if world.entities.is_empty() {
            return Err(WorldError::EmptyWorld.into());
        }
        let templates = match &config.templates {
            Some(p) => TemplateSet::load(p)?,
            None => TemplateSet::bundled(),
        };
        let ablation = Ablation { omit_goal: config.omit_goal, omit_history: config.omit_history };
        let forge = Arc::new(PromptForge::new(templates, Arc::new(world.ontology.clone())).with_ablation(ablation));
        let requirements = config.requirement_sets()?;
        if config.simulator != SimulatorKind::Agenda && generator.is_none() {
            return Err(HarnessError::config("generator", "duet simulators need a generator backend"));
        }
        Ok(Self {
            config,
            world,
            forge,
            nlg: Arc::new(TemplateNlg::bundled()),
            generator_backend: generator,
            verifier_backend: verifier,
            requirements,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn template_digest(&self) -> &str {
        self.forge.templates().digest()
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.config.dialogues as u64).map(|i| self.config.seed.wrapping_add(i)).collect()
    }

    /// One complete session against the system stub.
    pub fn run_session(&self, seed: u64) -> DialogueLog {
        let goal = self.world.generate_goal(seed).expect("world has entities");
        let limits = DialogueLimits { max_user_turns: self.config.max_user_turns, render_mode: self.config.render_mode };
        let mut system = SystemStub::new(self.world.clone(), self.nlg.clone(), seed);
        let mut user: Box<dyn UserSimulator> = match self.config.simulator {
            SimulatorKind::Agenda => Box::new(AgendaSimulator::new(&goal, self.nlg.clone())),
            kind => {
                let session = Some(format!("seed-{seed}"));
                let backend = self.generator_backend.clone().expect("checked at construction");
                let generator = ActGenerator::new(backend, self.forge.clone(), self.requirements.0.clone())
                    .with_session(session.clone());
                let verifier_enabled = kind == SimulatorKind::Duet && self.config.loop_config.verifier_enabled;
                let verifier = self
                    .verifier_backend
                    .clone()
                    .filter(|_| verifier_enabled)
                    .map(|b| Verifier::new(b, self.forge.clone(), self.requirements.1.clone()).with_session(session));
                let loop_config = LoopConfig { verifier_enabled, ..self.config.loop_config };
                Box::new(DualModelSimulator::new(goal.clone(), generator, verifier, loop_config))
            }
        };
        run_dialogue(seed, user.as_mut(), &mut system, limits)
    }

    /// Runs every seed in order on the calling thread.
    pub fn run_sequential(&self, seeds: &[u64], mut sink: impl FnMut(DialogueLog)) {
        for &seed in seeds {
            sink(self.run_session(seed));
        }
    }

    /// Runs sessions on a pool of `parallelism` threads and hands logs to
    /// `sink` in seed order as soon as each prefix is complete.
    #[cfg(feature = "parallel")]
    pub fn run_parallel(&self, seeds: &[u64], parallelism: usize, mut sink: impl FnMut(DialogueLog)) {
        use rayon::prelude::*;
        use std::sync::mpsc;

        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism.max(1))
            .build()
            .expect("thread pool builds");
        let (tx, rx) = mpsc::channel::<(usize, DialogueLog)>();
        std::thread::scope(|scope| {
            scope.spawn(|| {
                pool.install(|| {
                    seeds.par_iter().enumerate().for_each_with(tx, |tx, (i, &seed)| {
                        let _ = tx.send((i, self.run_session(seed)));
                    });
                });
            });
            let mut pending = std::collections::BTreeMap::new();
            let mut next = 0;
            for (i, log) in rx {
                pending.insert(i, log);
                while let Some(log) = pending.remove(&next) {
                    sink(log);
                    next += 1;
                }
            }
        });
    }

    /// Parallel when the `parallel` feature is on, sequential otherwise.
    pub fn run_batch(&self, seeds: &[u64], sink: impl FnMut(DialogueLog)) {
        #[cfg(feature = "parallel")]
        {
            if self.config.parallelism > 1 {
                return self.run_parallel(seeds, self.config.parallelism, sink);
            }
        }
        self.run_sequential(seeds, sink)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub log_schema: u32,
    pub config: serde_json::Value,
    pub template_digest: String,
    pub dialogues: usize,
    pub errors: usize,
    pub log_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub dialogues: usize,
    pub errors: usize,
    pub log_digest: String,
}

/// Runs the configured experiment and writes the run directory.
pub fn cmd_simulate(config: ExperimentConfig) -> Result<RunSummary, HarnessError> {
    simulate_with(SessionRunner::from_config(config)?)
}

pub fn simulate_with(runner: SessionRunner) -> Result<RunSummary, HarnessError> {
    let dir = runner.config().output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let log_path = dir.join(LOG_FILE);
    let file = File::create(&log_path).map_err(io_err(&log_path))?;
    let mut writer = BufWriter::new(file);
    let mut hasher = Sha256::new();
    let mut written = 0usize;
    let mut errors = 0usize;
    let mut write_error: Option<std::io::Error> = None;
    let started = Instant::now();

    runner.run_batch(&runner.seeds(), |log| {
        if write_error.is_some() {
            return;
        }
        if log.error.is_some() {
            errors += 1;
        }
        let mut line = serde_json::to_string(&log).expect("log serializes");
        line.push('\n');
        hasher.update(line.as_bytes());
        if let Err(e) = writer.write_all(line.as_bytes()).and_then(|_| writer.flush()) {
            write_error = Some(e);
        }
        written += 1;
    });
    if let Some(e) = write_error {
        return Err(io_err(&log_path)(e));
    }
    let wall = started.elapsed();
    let log_digest = hex::encode(hasher.finalize());

    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        log_schema: LOG_SCHEMA_VERSION,
        config: runner.config().echo(),
        template_digest: runner.template_digest().to_string(),
        dialogues: written,
        errors,
        log_digest: log_digest.clone(),
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    std::fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;

    let timing = serde_json::json!({
        "wall_secs": wall.as_secs_f64(),
        "dialogues": written,
        "secs_per_dialogue": wall.as_secs_f64() / written.max(1) as f64,
    });
    let timing_path = dir.join(TIMING_FILE);
    std::fs::write(&timing_path, serde_json::to_string_pretty(&timing).expect("json") + "\n")
        .map_err(io_err(&timing_path))?;

    Ok(RunSummary { dir, dialogues: written, errors, log_digest })
}

/// SHA-256 over the log and manifest of a run directory. Timing is excluded.
pub fn run_digest(dir: &Path) -> Result<String, HarnessError> {
    let mut hasher = Sha256::new();
    for name in [LOG_FILE, MANIFEST_FILE] {
        let path = dir.join(name);
        hasher.update(std::fs::read(&path).map_err(io_err(&path))?);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn read_logs(path: &Path) -> Result<Vec<DialogueLog>, HarnessError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut logs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err =
            |message: String| HarnessError::LogParse { path: path.display().to_string(), line: i + 1, message };
        let log: DialogueLog = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if log.v != LOG_SCHEMA_VERSION {
            return Err(parse_err(format!("unsupported log schema version {}", log.v)));
        }
        logs.push(log);
    }
    Ok(logs)
}

/// Fulfillment and diversity over the union of the given log files.
pub fn cmd_evaluate(paths: &[PathBuf], world: &World) -> Result<EvaluationReport, HarnessError> {
    let mut logs = Vec::new();
    for p in paths {
        logs.extend(read_logs(p)?);
    }
    Ok(EvaluationReport::build(&logs, world)?)
}

/// Goals for seeds `seed..seed+count`, each rendered as instructions.
pub fn cmd_goals(world: &World, seed: u64, count: usize) -> Result<Vec<(u64, String)>, HarnessError> {
    if count == 0 {
        return Err(HarnessError::config("count", "must be at least 1"));
    }
    (0..count as u64)
        .map(|i| {
            let s = seed.wrapping_add(i);
            Ok((s, describe_goal(&world.generate_goal(s)?)))
        })
        .collect()
}
