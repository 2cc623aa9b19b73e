//! Run directories, backend selection and the pipelines behind each CLI
//! subcommand.

pub mod config;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{Config, ConfigError, EmbedderKind, MockMode, Settings, API_KEY_ENV};

use crate::action::Action;
use crate::dataset::{
    build_kshot, render_stats, split_stats, standardize_to_trajectories, AppResolver, DatasetError, SimilarityTables,
    StatsTable,
};
use crate::describe::{DemoParser, DescribeError};
use crate::eval::{evaluate_offline, predictions_from_episodes, replay_success_rate, EvalError, EvalReport};
use crate::executor::{
    Demonstrations, EpisodeResult, ExecError, Executor, FailureKind, ReplayEnvironment, StepLog,
};
use crate::model::{
    CachingEmbedder, ChatBackend, EchoChat, Embedder, HashEmbedder, HttpChatBackend, HttpEmbedder, ModelError,
    ScriptedChat,
};
use crate::retrieval::{build_index, EmbeddingIndex, Hit, RetrievalError, RetrieveOptions};
use crate::store::{
    load_combos, load_knowledge_base, load_manifest, load_raw_trajectories, load_trajectories, save_combos,
    save_knowledge_base, save_manifest, save_trajectories, write_jsonl, DatasetManifest, KShotCombo, KnowledgeEntry,
    StoreError, Trajectory,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Describe(#[from] DescribeError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("{failed} episode(s) stopped on a backend failure, first: {task_id}: {message}")]
    EpisodeBackend {
        failed: usize,
        task_id: String,
        message: String,
    },
}

impl HarnessError {
    /// True when the failure came from a model or embedding backend.
    pub fn is_backend(&self) -> bool {
        match self {
            Self::Model(e) => !matches!(e, ModelError::InvalidInput(_) | ModelError::Config(_)),
            Self::Describe(e) => e.is_backend(),
            Self::Retrieval(RetrievalError::Backend(_)) => true,
            Self::Dataset(e) => e.is_backend(),
            Self::Exec(e) => e.is_backend(),
            Self::EpisodeBackend { .. } => true,
            _ => false,
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRecord {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

/// `manifest.json`: enough to rerun the exact command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Directory the command ran from; relative paths resolve against it.
    pub cwd: PathBuf,
    pub config_hash: String,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<String>,
}

/// A run directory: `config.snapshot`, `manifest.json`, `outputs/`,
/// `report.json`, `report.txt` and `logs/` for anything time-dependent.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    manifest: RunManifest,
    outputs: BTreeSet<String>,
}

impl RunDir {
    /// Creates the layout. A directory holding a previous run is cleared of
    /// its outputs and logs; any other non-empty directory is refused.
    pub fn create(root: &Path, command: &str, argv: &[String], config: &Config) -> Result<Self> {
        if root.exists() {
            let occupied = fs::read_dir(root).map_err(|e| HarnessError::io(root, e))?.next().is_some();
            if occupied && !root.join("manifest.json").is_file() {
                return Err(HarnessError::Invalid(format!(
                    "run directory {} exists and is not a previous run",
                    root.display()
                )));
            }
            for sub in ["outputs", "logs"] {
                let dir = root.join(sub);
                if dir.is_dir() {
                    fs::remove_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
                }
            }
            for file in ["report.json", "report.txt", "manifest.json"] {
                let path = root.join(file);
                if path.is_file() {
                    fs::remove_file(&path).map_err(|e| HarnessError::io(&path, e))?;
                }
            }
        }
        for dir in [root.join("outputs"), root.join("logs")] {
            fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
        }
        let snapshot = root.join("config.snapshot");
        fs::write(&snapshot, config.snapshot()).map_err(|e| HarnessError::io(&snapshot, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                argv: argv.to_vec(),
                cwd: std::env::current_dir().map_err(|e| HarnessError::io(Path::new("."), e))?,
                config_hash: config.hash(),
                inputs: Vec::new(),
                outputs: Vec::new(),
            },
            outputs: BTreeSet::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn outputs_dir(&self) -> PathBuf {
        self.root.join("outputs")
    }

    pub fn logs_dir(&self) -> PathBuf {
        self.root.join("logs")
    }

    /// Records an input file with its digest.
    pub fn add_input(&mut self, role: &str, path: &Path) -> Result<()> {
        let sha256 = sha256_file(path)?;
        self.manifest.inputs.push(InputRecord {
            role: role.to_string(),
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    /// Path of a named output, registered in the manifest.
    pub fn output(&mut self, name: &str) -> PathBuf {
        self.outputs.insert(name.to_string());
        self.outputs_dir().join(name)
    }

    pub fn write_output_jsonl<T: Serialize>(&mut self, name: &str, records: &[T]) -> Result<PathBuf> {
        let path = self.output(name);
        write_jsonl(&path, records)?;
        Ok(path)
    }

    pub fn write_output_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.output(name);
        write_pretty(&path, value)?;
        Ok(path)
    }

    pub fn write_log_jsonl<T: Serialize>(&self, name: &str, records: &[T]) -> Result<PathBuf> {
        let path = self.logs_dir().join(name);
        write_jsonl(&path, records)?;
        Ok(path)
    }

    pub fn write_report(&self, json: &Value, text: &str) -> Result<()> {
        write_pretty(&self.root.join("report.json"), json)?;
        let path = self.root.join("report.txt");
        fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))
    }

    /// Writes `manifest.json`.
    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.outputs = self.outputs.iter().map(|o| format!("outputs/{o}")).collect();
        write_pretty(&self.root.join("manifest.json"), &self.manifest)?;
        Ok(self.manifest)
    }
}

fn write_pretty<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}

/// Reads a scripted mock: one JSON value per line, either a reply string or
/// `{"status": N}` for a backend failure.
pub fn load_script(path: &Path) -> Result<ScriptedChat> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let chat = ScriptedChat::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| HarnessError::Invalid(format!("{}:{}: {detail}", path.display(), i + 1));
        match serde_json::from_str::<Value>(line).map_err(|e| bad(e.to_string()))? {
            Value::String(reply) => chat.push_reply(reply),
            Value::Object(obj) => {
                let status = obj
                    .get("status")
                    .and_then(Value::as_u64)
                    .and_then(|s| u16::try_from(s).ok())
                    .ok_or_else(|| bad("expected {\"status\": <http status>}".into()))?;
                chat.push_failure(status);
            }
            _ => return Err(bad("expected a string or an object".into())),
        }
    }
    Ok(chat)
}

/// Chat and embedding backends as selected by the settings.
pub struct Backends {
    settings: Settings,
    scripted: Option<Arc<ScriptedChat>>,
}

impl Backends {
    pub fn new(settings: &Settings) -> Result<Self> {
        let scripted = match &settings.mock {
            MockMode::Scripted(path) => Some(Arc::new(load_script(path)?)),
            _ => None,
        };
        Ok(Self {
            settings: settings.clone(),
            scripted,
        })
    }

    /// The chat backend for a task whose gold actions are `gold`; only the
    /// echo mock looks at them.
    pub fn chat_for(&self, gold: &[Action]) -> Result<Arc<dyn ChatBackend>> {
        Ok(match &self.settings.mock {
            MockMode::Echo => Arc::new(EchoChat::new(gold.to_vec())),
            MockMode::Scripted(_) => self.scripted.clone().expect("script loaded") as Arc<dyn ChatBackend>,
            MockMode::None => Arc::new(HttpChatBackend::new(self.settings.chat_backend_config()?)?),
        })
    }

    pub fn embedder(&self) -> Result<CachingEmbedder<Arc<dyn Embedder>>> {
        let inner: Arc<dyn Embedder> = match self.settings.embedder {
            EmbedderKind::Hash => Arc::new(HashEmbedder::new(self.settings.embed_dim)?),
            EmbedderKind::Http => Arc::new(HttpEmbedder::new(self.settings.embed_backend_config()?)?),
        };
        Ok(CachingEmbedder::new(inner))
    }

    pub fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.settings.workers)
            .build()
            .map_err(|e| HarnessError::Invalid(format!("cannot start {} workers: {e}", self.settings.workers)))
    }
}

/// Everything a pipeline needs: validated settings, backends and the run
/// directory it writes into.
pub struct Session {
    pub settings: Settings,
    pub backends: Backends,
    pub run: RunDir,
}

impl Session {
    pub fn new(config: &Config, run_root: &Path, command: &str, argv: &[String]) -> Result<Self> {
        let settings = Settings::from_config(config)?;
        let backends = Backends::new(&settings)?;
        let mut run = RunDir::create(run_root, command, argv, config)?;
        if let MockMode::Scripted(path) = &settings.mock {
            run.add_input("mock_script", path)?;
        }
        Ok(Self {
            settings,
            backends,
            run,
        })
    }

    pub fn finish(self) -> Result<RunManifest> {
        self.run.finish()
    }
}

fn knowledge_for(
    session: &Session,
    trajectories: &[Trajectory],
    reuse_descriptions: bool,
    debug_dir: Option<&Path>,
) -> Result<Vec<KnowledgeEntry>> {
    let max_tokens = session.settings.max_output_tokens;
    let pool = session.backends.pool()?;
    pool.install(|| {
        trajectories
            .par_iter()
            .map(|t| {
                if reuse_descriptions {
                    let existing: Option<Vec<String>> = t
                        .steps
                        .iter()
                        .map(|s| s.description.clone().filter(|d| !d.trim().is_empty()))
                        .collect();
                    if let Some(descriptions) = existing {
                        return Ok(KnowledgeEntry {
                            entry_id: format!("kb-{}", t.task_id),
                            instruction: t.instruction.clone(),
                            actions: t.actions().map(Action::to_string).collect(),
                            descriptions,
                            app: t.app.clone(),
                            source_task_id: t.task_id.clone(),
                        });
                    }
                }
                let actions: Vec<Action> = t.actions().cloned().collect();
                let chat = session.backends.chat_for(&actions)?;
                let mut parser = DemoParser::new(&*chat).with_max_output_tokens(max_tokens);
                if let Some(dir) = debug_dir {
                    parser = parser.with_debug_dir(dir);
                }
                Ok(parser.generate_knowledge(t)?)
            })
            .collect()
    })
}

/// trajectories → knowledge base.
pub fn parse_demos(session: &mut Session, trajectories: &Path, debug_composites: bool) -> Result<Value> {
    session.run.add_input("trajectories", trajectories)?;
    let gold = load_trajectories(trajectories)?;
    let debug_dir = debug_composites.then(|| session.run.logs_dir().join("composites"));
    if let Some(dir) = &debug_dir {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let entries = knowledge_for(session, &gold, false, debug_dir.as_deref())?;
    let path = session.run.output("knowledge_base.jsonl");
    save_knowledge_base(&entries, &path)?;
    let steps: usize = entries.iter().map(|e| e.actions.len()).sum();
    let report = json!({ "entries": entries.len(), "steps": steps });
    session
        .run
        .write_report(&report, &format!("knowledge entries: {}\ndescribed steps: {steps}\n", entries.len()))?;
    Ok(report)
}

/// knowledge base → embedding index.
pub fn index(session: &mut Session, knowledge_base: &Path) -> Result<Value> {
    session.run.add_input("knowledge_base", knowledge_base)?;
    let kb = load_knowledge_base(knowledge_base)?;
    let embedder = session.backends.embedder()?;
    let index = build_index(&kb, &embedder)?;
    index.save(&session.run.output("index.jsonl"))?;
    let report = json!({
        "entries": index.len(),
        "dimension": index.dimension(),
        "backend_tag": index.backend_tag(),
    });
    session.run.write_report(
        &report,
        &format!(
            "indexed entries: {}\ndimension: {}\nbackend: {}\n",
            index.len(),
            index.dimension(),
            index.backend_tag()
        ),
    )?;
    Ok(report)
}

/// Ad-hoc top-k query against a saved index.
pub fn retrieve(session: &mut Session, index_path: &Path, query: &str, app: Option<&str>) -> Result<Vec<Hit>> {
    session.run.add_input("index", index_path)?;
    let index = EmbeddingIndex::load(index_path)?;
    let embedder = session.backends.embedder()?;
    let mut options = RetrieveOptions::new(session.settings.k, session.settings.tau_s);
    options.app_filter = app.map(str::to_string);
    let hits = index.retrieve(query, &embedder, &options)?;
    session.run.write_output_jsonl("hits.jsonl", &hits)?;
    let text: String = hits.iter().map(|h| format!("{}\t{:.6}\n", h.entry_id, h.score)).collect();
    session
        .run
        .write_report(&json!({ "query": query, "hits": hits }), &text)?;
    Ok(hits)
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).map_err(|e| HarnessError::io(path, e))
}

/// Inputs for `build-dataset`.
#[derive(Debug, Clone, Default)]
pub struct BuildInputs {
    pub corpus: PathBuf,
    pub labels: Option<PathBuf>,
    /// Previously computed similarity records to reuse.
    pub similarity: Option<PathBuf>,
}

/// raw corpus → standardized split, knowledge base, similarity cache,
/// k-shot combos and stats.
pub fn build_dataset(session: &mut Session, inputs: &BuildInputs) -> Result<Value> {
    session.run.add_input("corpus", &inputs.corpus)?;
    let labels = match &inputs.labels {
        Some(path) => {
            session.run.add_input("labels", path)?;
            AppResolver::load_labels(path)?
        }
        None => HashMap::new(),
    };
    let raw = load_raw_trajectories(&inputs.corpus)?;
    let (mut tasks, std_report) = standardize_to_trajectories(raw)?;
    let mut seen = BTreeSet::new();
    for t in &tasks {
        if !seen.insert(t.task_id.as_str()) {
            return Err(DatasetError::DuplicateTask(t.task_id.clone()).into());
        }
    }
    for t in tasks.iter_mut() {
        for step in t.steps.iter_mut() {
            step.screenshot = absolute(&step.screenshot)?;
        }
    }

    let classifier = if session.settings.apps.is_empty() {
        None
    } else {
        Some(session.backends.chat_for(&[])?)
    };
    let mut resolver = AppResolver::new(labels);
    if let Some(chat) = &classifier {
        resolver = resolver.with_classifier(&**chat, session.settings.apps.clone());
    }
    resolver.assign(&mut tasks)?;

    let kb = knowledge_for(session, &tasks, true, None)?;
    let embedder = session.backends.embedder()?;
    let ids: Vec<String> = tasks.iter().map(|t| t.task_id.clone()).collect();
    let tables = match &inputs.similarity {
        Some(path) => {
            session.run.add_input("similarity", path)?;
            SimilarityTables::load(path, ids)?
        }
        None => session
            .backends
            .pool()?
            .install(|| SimilarityTables::compute(&tasks, &kb, &embedder))?,
    };

    save_trajectories(&tasks, &session.run.output("trajectories.jsonl"))?;
    save_knowledge_base(&kb, &session.run.output("knowledge_base.jsonl"))?;
    tables.save(&session.run.output("similarity.jsonl"))?;
    session.run.write_output_json("standardize.json", &std_report)?;

    let split = session.settings.split.clone();
    let mut manifest = DatasetManifest {
        split: split.clone(),
        k: session.settings.kshots.clone(),
        trajectories: "trajectories.jsonl".into(),
        combos: BTreeMap::new(),
        similarity: Some("similarity.jsonl".into()),
        knowledge_base: Some("knowledge_base.jsonl".into()),
        stats: Some("stats.json".into()),
    };
    let mut tables_out: Vec<StatsTable> = Vec::new();
    let mut dropped = BTreeMap::new();
    for &k in &session.settings.kshots {
        let selection = build_kshot(
            &tasks,
            &tables,
            k,
            session.settings.min_avg_sim,
            &session.settings.thresholds,
        )?;
        let name = format!("combos_k{k}.jsonl");
        save_combos(&selection.combos, &session.run.output(&name))?;
        session
            .run
            .write_output_jsonl(&format!("dropped_k{k}.jsonl"), &selection.dropped)?;
        manifest.combos.insert(k.to_string(), name.into());
        dropped.insert(k.to_string(), selection.dropped.len());
        tables_out.push(split_stats(&split, k, &selection.combos, &tasks));
    }
    session.run.write_output_json("stats.json", &tables_out)?;
    save_manifest(&manifest, &session.run.output("dataset.json"))?;

    let report = json!({
        "standardize": std_report,
        "stats": tables_out,
        "dropped_queries": dropped,
    });
    let text = format!(
        "input tasks: {}\nkept tasks: {}\ndropped (non-canonical): {}\ndropped (incomplete): {}\nrewritten steps: {}\n\n{}",
        std_report.input_tasks,
        std_report.kept_tasks,
        std_report.dropped_tasks.len(),
        std_report.incomplete_tasks.len(),
        std_report.rewritten_steps,
        render_stats(&tables_out)
    );
    session.run.write_report(&report, &text)?;
    Ok(report)
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Inputs for `run-offline`. A dataset manifest supplies whatever the
/// explicit paths leave out.
#[derive(Debug, Clone, Default)]
pub struct OfflineInputs {
    pub dataset: Option<PathBuf>,
    pub trajectories: Option<PathBuf>,
    pub knowledge_base: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub combos: Option<PathBuf>,
}

impl OfflineInputs {
    fn resolved(&self, k: usize) -> Result<Self> {
        let mut out = self.clone();
        if let Some(path) = &self.dataset {
            let manifest = load_manifest(path)?;
            let base = path.parent().unwrap_or(Path::new("."));
            out.trajectories.get_or_insert_with(|| resolve(base, &manifest.trajectories));
            if out.knowledge_base.is_none() {
                out.knowledge_base = manifest.knowledge_base.as_deref().map(|p| resolve(base, p));
            }
            if out.combos.is_none() && out.index.is_none() {
                let combos = manifest.combos.get(&k.to_string()).ok_or_else(|| {
                    HarnessError::Invalid(format!("dataset {} has no combos for k = {k}", path.display()))
                })?;
                out.combos = Some(resolve(base, combos));
            }
        }
        if out.trajectories.is_none() {
            return Err(HarnessError::Invalid("run-offline needs --trajectories or --dataset".into()));
        }
        if (out.index.is_some() || out.combos.is_some()) && out.knowledge_base.is_none() {
            return Err(HarnessError::Invalid("demonstrations need --kb".into()));
        }
        Ok(out)
    }
}

/// Replays every gold task with teacher forcing, scores the predicted
/// steps and reports success rate and termination counts.
pub fn run_offline(session: &mut Session, inputs: &OfflineInputs) -> Result<Value> {
    let inputs = inputs.resolved(session.settings.k)?;
    let trajectories_path = inputs.trajectories.clone().expect("checked");
    session.run.add_input("trajectories", &trajectories_path)?;
    let all_gold = load_trajectories(&trajectories_path)?;

    let kb = match &inputs.knowledge_base {
        Some(path) => {
            session.run.add_input("knowledge_base", path)?;
            load_knowledge_base(path)?
        }
        None => Vec::new(),
    };
    let combos: Option<Vec<KShotCombo>> = match &inputs.combos {
        Some(path) => {
            session.run.add_input("combos", path)?;
            Some(load_combos(path)?)
        }
        None => None,
    };
    let index = match &inputs.index {
        Some(path) => {
            session.run.add_input("index", path)?;
            Some(EmbeddingIndex::load(path)?)
        }
        None => None,
    };
    let embedder = session.backends.embedder()?;
    let demonstrations = index.as_ref().map(|i| Demonstrations::new(i, &kb, &embedder));

    let by_source: HashMap<&str, &KnowledgeEntry> = kb.iter().map(|e| (e.source_task_id.as_str(), e)).collect();
    let mut fixed: HashMap<&str, Vec<&KnowledgeEntry>> = HashMap::new();
    let gold: Vec<Trajectory> = match &combos {
        Some(combos) => {
            let wanted: HashMap<&str, &KShotCombo> = combos.iter().map(|c| (c.query_task_id.as_str(), c)).collect();
            for c in combos {
                let supports = c
                    .support_task_ids
                    .iter()
                    .map(|s| {
                        by_source.get(s.as_str()).copied().ok_or_else(|| {
                            HarnessError::Invalid(format!("support task {s} has no knowledge entry"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                fixed.insert(c.query_task_id.as_str(), supports);
            }
            all_gold
                .iter()
                .filter(|t| wanted.contains_key(t.task_id.as_str()))
                .cloned()
                .collect()
        }
        None => all_gold.clone(),
    };
    if let Some(combos) = &combos {
        if let Some(missing) = combos.iter().find(|c| !gold.iter().any(|t| t.task_id == c.query_task_id)) {
            return Err(HarnessError::Invalid(format!(
                "combo query {} is not among the trajectories",
                missing.query_task_id
            )));
        }
    }

    let executor_config = session.settings.executor_config();
    let backends = &session.backends;
    let pool = backends.pool()?;
    let outcomes: Vec<(EpisodeResult, Vec<StepLog>)> = pool.install(|| {
        gold.par_iter()
            .map(|t| {
                let actions: Vec<Action> = t.actions().cloned().collect();
                let chat = backends.chat_for(&actions)?;
                let executor = Executor::new(&*chat, demonstrations.as_ref(), executor_config.clone());
                let mut env = ReplayEnvironment::new(t.clone());
                let mut logs = Vec::new();
                let demos = fixed.get(t.task_id.as_str()).map(Vec::as_slice);
                let result = executor.run_episode_with(
                    &mut env,
                    &t.task_id,
                    &t.app,
                    &t.instruction,
                    demos,
                    &mut |log| logs.push(log),
                )?;
                Ok((result, logs))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let (episodes, step_logs): (Vec<EpisodeResult>, Vec<Vec<StepLog>>) = outcomes.into_iter().unzip();
    let step_logs: Vec<StepLog> = step_logs.into_iter().flatten().collect();

    let predictions = predictions_from_episodes(&episodes);
    session.run.write_output_jsonl("episodes.jsonl", &episodes)?;
    session.run.write_output_jsonl("predictions.jsonl", &predictions)?;
    session.run.write_log_jsonl("steps.jsonl", &step_logs)?;

    let eval = evaluate_offline(&predictions, &gold, combos.as_deref())?;
    let success_rate = replay_success_rate(&episodes, &gold)?;
    let mut terminations: BTreeMap<String, usize> = BTreeMap::new();
    for e in &episodes {
        let key = serde_json::to_value(e.terminated_by).expect("serializes");
        *terminations.entry(key.as_str().unwrap_or_default().to_string()).or_insert(0) += 1;
    }
    let mode = match (&combos, &demonstrations) {
        (Some(_), _) => "fixed_supports",
        (None, Some(_)) => "retrieval",
        (None, None) => "zero_shot",
    };
    let report = json!({
        "mode": mode,
        "k": session.settings.k,
        "episodes": episodes.len(),
        "replay_success_rate": success_rate,
        "terminations": terminations,
        "eval": eval,
    });
    let mut text = format!(
        "mode: {mode}\nepisodes: {}\nreplay success rate: {:.4}\n",
        episodes.len(),
        success_rate
    );
    for (k, v) in &terminations {
        text.push_str(&format!("terminated by {k}: {v}\n"));
    }
    text.push('\n');
    text.push_str(&eval.render_text());
    session.run.write_report(&report, &text)?;

    let failed: Vec<&EpisodeResult> = episodes
        .iter()
        .filter(|e| e.failure == Some(FailureKind::Backend))
        .collect();
    if let Some(first) = failed.first() {
        return Err(HarnessError::EpisodeBackend {
            failed: failed.len(),
            task_id: first.task_id.clone(),
            message: first.error.clone().unwrap_or_default(),
        });
    }
    Ok(report)
}

/// predictions + gold → report.
pub fn evaluate(
    session: &mut Session,
    predictions: &Path,
    gold: &Path,
    combos: Option<&Path>,
) -> Result<EvalReport> {
    session.run.add_input("predictions", predictions)?;
    session.run.add_input("gold", gold)?;
    let preds = crate::store::read_jsonl(predictions)?;
    let gold = load_trajectories(gold)?;
    let combos = match combos {
        Some(path) => {
            session.run.add_input("combos", path)?;
            Some(load_combos(path)?)
        }
        None => None,
    };
    let report = evaluate_offline(&preds, &gold, combos.as_deref())?;
    session.run.write_output_json("eval.json", &report)?;
    session
        .run
        .write_report(&serde_json::to_value(&report).expect("serializes"), &report.render_text())?;
    Ok(report)
}

/// split + combos → summary table, one row per combos file.
pub fn stats(session: &mut Session, trajectories: &Path, combos: &[PathBuf]) -> Result<Vec<StatsTable>> {
    session.run.add_input("trajectories", trajectories)?;
    let tasks = load_trajectories(trajectories)?;
    let mut tables = Vec::with_capacity(combos.len());
    for path in combos {
        session.run.add_input("combos", path)?;
        let set = load_combos(path)?;
        let k = match set.first() {
            Some(c) => c.k,
            None => session.settings.k,
        };
        if set.iter().any(|c| c.k != k) {
            return Err(HarnessError::Invalid(format!("{} mixes several k", path.display())));
        }
        tables.push(split_stats(&session.settings.split, k, &set, &tasks));
    }
    session.run.write_output_json("stats.json", &tables)?;
    session
        .run
        .write_report(&serde_json::to_value(&tables).expect("serializes"), &render_stats(&tables))?;
    Ok(tables)
}

/// Resolves `stats` inputs from a dataset manifest.
pub fn dataset_stats_inputs(manifest_path: &Path) -> Result<(PathBuf, Vec<PathBuf>)> {
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut ks: Vec<&String> = manifest.combos.keys().collect();
    ks.sort_by_key(|k| k.parse::<usize>().unwrap_or(usize::MAX));
    Ok((
        resolve(base, &manifest.trajectories),
        ks.into_iter().map(|k| resolve(base, &manifest.combos[k])).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_dir_layout_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        fs::write(&input, "abc").unwrap();
        let root = dir.path().join("run");
        let config = Config::default();
        let mut run = RunDir::create(&root, "index", &["demokit".into(), "index".into()], &config).unwrap();
        run.add_input("kb", &input).unwrap();
        run.write_output_jsonl("b.jsonl", &[1, 2]).unwrap();
        run.write_output_jsonl("a.jsonl", &[3]).unwrap();
        run.write_report(&json!({"x": 1}), "x\n").unwrap();
        let manifest = run.finish().unwrap();
        assert_eq!(manifest.outputs, ["outputs/a.jsonl", "outputs/b.jsonl"]);
        assert_eq!(
            manifest.inputs[0].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(manifest.config_hash, config.hash());
        for f in ["config.snapshot", "manifest.json", "report.json", "report.txt", "outputs/a.jsonl"] {
            assert!(root.join(f).is_file(), "{f}");
        }
        assert_eq!(fs::read_to_string(root.join("outputs/b.jsonl")).unwrap(), "1\n2\n");
        // a rerun clears stale outputs
        let run = RunDir::create(&root, "index", &[], &config).unwrap();
        assert!(!root.join("outputs/a.jsonl").exists());
        run.finish().unwrap();
    }

    #[test]
    fn refuses_foreign_directory() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("precious.txt"), "keep").unwrap();
        let err = RunDir::create(dir.path(), "index", &[], &Config::default()).unwrap_err();
        assert!(matches!(err, HarnessError::Invalid(_)));
        assert!(dir.path().join("precious.txt").is_file());
    }

    #[test]
    fn script_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        fs::write(&path, "\"CLICK[1,2]\"\n\n{\"status\": 503}\n").unwrap();
        let chat = load_script(&path).unwrap();
        assert_eq!(chat.remaining(), 2);
        fs::write(&path, "[1]\n").unwrap();
        assert!(matches!(load_script(&path), Err(HarnessError::Invalid(_))));
    }

    #[test]
    fn backend_errors_are_classified() {
        assert!(HarnessError::Model(ModelError::Timeout).is_backend());
        assert!(!HarnessError::Model(ModelError::Config("x".into())).is_backend());
        assert!(!HarnessError::Invalid("x".into()).is_backend());
        assert!(HarnessError::Exec(ExecError::Backend(ModelError::ScriptExhausted(0))).is_backend());
    }
}
