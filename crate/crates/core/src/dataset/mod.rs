//! Building k-shot evaluation splits from trajectory corpora.

pub mod tfidf;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{normalize_legacy, LegacyAction};
use crate::model::{ChatBackend, ChatRequest, Embedder, ImageRef, ModelError, UserPart};
use crate::prompts;
use crate::retrieval::{cosine_similarity, RetrievalError};
use crate::store::{
    read_jsonl, trajectory_from_raw, write_jsonl, KShotCombo, KnowledgeEntry, Quadrant, RawTrajectory,
    SimilarityProfile, StoreError, Trajectory,
};

pub use tfidf::{sparse_cosine, tokenize, TfIdfModel};

pub const UI_THRESHOLD: f64 = 0.9447;
pub const ACTION_THRESHOLD: f64 = 0.9015;
pub const MIN_AVG_SIM: f64 = 0.6;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("backend failure: {0}")]
    Backend(#[source] ModelError),
    #[error("no app label for task {task_id}{}", .reply.as_ref().map(|r| format!(" (classifier said {r:?})")).unwrap_or_default())]
    UnknownApp { task_id: String, reply: Option<String> },
    #[error("task {0} has no UI trees")]
    MissingUiTrees(String),
    #[error("task {0} has no knowledge entry")]
    MissingKnowledge(String),
    #[error("no similarity recorded between {0} and {1}")]
    MissingSimilarity(String, String),
    #[error("duplicate task id {0}")]
    DuplicateTask(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Similarity(#[from] RetrievalError),
}

impl DatasetError {
    pub fn is_backend(&self) -> bool {
        matches!(self, Self::Backend(_) | Self::Similarity(RetrievalError::Backend(_)))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StandardizeReport {
    pub input_tasks: usize,
    pub kept_tasks: usize,
    /// Tasks containing an action with no canonical equivalent.
    pub dropped_tasks: Vec<String>,
    /// Tasks whose last action is not TASK_COMPLETE after rewriting.
    pub incomplete_tasks: Vec<String>,
    pub rewritten_steps: usize,
}

/// Rewrites every action into the canonical space. Tasks with actions that
/// have no canonical form, or that do not end in TASK_COMPLETE, are left out.
pub fn standardize(raw: Vec<RawTrajectory>) -> Result<(Vec<RawTrajectory>, StandardizeReport), StoreError> {
    let mut report = StandardizeReport {
        input_tasks: raw.len(),
        ..StandardizeReport::default()
    };
    let mut kept = Vec::with_capacity(raw.len());
    'tasks: for (line, mut task) in raw.into_iter().enumerate() {
        let mut rewritten = 0;
        for (i, step) in task.steps.iter_mut().enumerate() {
            let normalized = normalize_legacy(&step.action).map_err(|e| StoreError::Schema {
                line: line + 1,
                field: format!("steps[{i}].action"),
                detail: e.to_string(),
            })?;
            let action = match normalized {
                LegacyAction::Drop => {
                    report.dropped_tasks.push(task.task_id.clone());
                    continue 'tasks;
                }
                LegacyAction::Upgraded(a) => {
                    rewritten += 1;
                    a
                }
                LegacyAction::Keep(a) => a,
            };
            step.action = action.to_string();
        }
        if !task.steps.last().is_some_and(|s| s.action.starts_with("TASK_COMPLETE")) {
            report.incomplete_tasks.push(task.task_id.clone());
            continue;
        }
        report.rewritten_steps += rewritten;
        kept.push(task);
    }
    report.kept_tasks = kept.len();
    Ok((kept, report))
}

/// Standardizes and converts to typed trajectories.
pub fn standardize_to_trajectories(
    raw: Vec<RawTrajectory>,
) -> Result<(Vec<Trajectory>, StandardizeReport), StoreError> {
    let (kept, report) = standardize(raw)?;
    let trajectories = kept
        .into_iter()
        .enumerate()
        .map(|(i, r)| trajectory_from_raw(i + 1, r))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((trajectories, report))
}

/// Resolves app labels: explicit labels first, then the classifier.
pub struct AppResolver<'a> {
    pub labels: HashMap<String, String>,
    pub classifier: Option<&'a dyn ChatBackend>,
    pub apps: Vec<String>,
}

impl<'a> AppResolver<'a> {
    pub fn new(labels: HashMap<String, String>) -> Self {
        Self {
            labels,
            classifier: None,
            apps: Vec::new(),
        }
    }

    pub fn with_classifier(mut self, chat: &'a dyn ChatBackend, apps: Vec<String>) -> Self {
        self.classifier = Some(chat);
        self.apps = apps;
        self
    }

    /// Loads `task_id<TAB>app` or `task_id,app` lines.
    pub fn load_labels(path: &Path) -> Result<HashMap<String, String>, StoreError> {
        let text = std::fs::read_to_string(path).map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut labels = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (task, app) = line
                .split_once('\t')
                .or_else(|| line.split_once(','))
                .ok_or_else(|| StoreError::Schema {
                    line: i + 1,
                    field: "app".into(),
                    detail: "expected `task_id<TAB>app`".into(),
                })?;
            labels.insert(task.trim().to_string(), app.trim().to_string());
        }
        Ok(labels)
    }

    pub fn recover_app(&self, t: &Trajectory) -> Result<String, DatasetError> {
        if let Some(app) = self.labels.get(&t.task_id).filter(|a| !a.is_empty()) {
            return Ok(app.clone());
        }
        if !t.app.is_empty() {
            return Ok(t.app.clone());
        }
        let unknown = |reply| DatasetError::UnknownApp {
            task_id: t.task_id.clone(),
            reply,
        };
        let Some(chat) = self.classifier.filter(|_| !self.apps.is_empty()) else {
            return Err(unknown(None));
        };
        let list = self.apps.iter().map(|a| format!("- {a}")).collect::<Vec<_>>().join("\n");
        let mut parts = vec![UserPart::Text(format!("Instruction: {}", t.instruction))];
        if let Some(first) = t.steps.first() {
            parts.push(UserPart::Image(ImageRef::File(first.screenshot.clone())));
        }
        let request = ChatRequest::new(prompts::fill(prompts::CLASSIFY_APP, &[("apps", &list)]), parts);
        let reply = chat.complete(&request).map_err(DatasetError::Backend)?;
        let answer = reply.trim().trim_matches(|c| c == '"' || c == '\'' || c == '.').trim();
        let answer = answer.strip_prefix("- ").unwrap_or(answer);
        self.apps
            .iter()
            .find(|a| a.eq_ignore_ascii_case(answer))
            .cloned()
            .ok_or_else(|| unknown(Some(reply.trim().to_string())))
    }

    /// Fills in `app` on every trajectory.
    pub fn assign(&self, trajectories: &mut [Trajectory]) -> Result<(), DatasetError> {
        for t in trajectories.iter_mut() {
            t.app = self.recover_app(t)?;
        }
        Ok(())
    }
}

pub fn instruction_similarity(embedder: &dyn Embedder, a: &str, b: &str) -> Result<f64, DatasetError> {
    let v = embedder
        .embed(&[a.to_string(), b.to_string()])
        .map_err(DatasetError::Backend)?;
    Ok(cosine_similarity(&v[0], &v[1])?)
}

/// All step UI trees of a task as one document.
pub fn ui_document(t: &Trajectory) -> Result<String, DatasetError> {
    t.ui_trees
        .as_ref()
        .map(|trees| trees.join("\n"))
        .ok_or_else(|| DatasetError::MissingUiTrees(t.task_id.clone()))
}

/// TF-IDF cosine of the two tasks' merged UI trees, fitted over `corpus`.
pub fn ui_similarity(a: &Trajectory, b: &Trajectory, corpus: &TfIdfModel) -> Result<f64, DatasetError> {
    let (da, db) = (ui_document(a)?, ui_document(b)?);
    Ok(sparse_cosine(&corpus.vectorize(&da), &corpus.vectorize(&db)))
}

pub fn action_text(entry: &KnowledgeEntry) -> String {
    entry.descriptions.join("\n")
}

pub fn action_similarity(embedder: &dyn Embedder, a: &KnowledgeEntry, b: &KnowledgeEntry) -> Result<f64, DatasetError> {
    instruction_similarity(embedder, &action_text(a), &action_text(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub ui: f64,
    pub action: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            ui: UI_THRESHOLD,
            action: ACTION_THRESHOLD,
        }
    }
}

/// High on an axis iff the value reaches its threshold.
pub fn classify_profile(ui_sim: f64, act_sim: f64, thresholds: &Thresholds) -> Quadrant {
    Quadrant::from_levels(ui_sim >= thresholds.ui, act_sim >= thresholds.action)
}

/// Pairwise similarities between tasks of the same app. Pairs across apps
/// are not stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    ids: Vec<String>,
    position: HashMap<String, usize>,
    values: Vec<Option<f64>>,
}

impl SimilarityMatrix {
    fn empty(ids: Vec<String>) -> Result<Self, DatasetError> {
        let mut position = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if position.insert(id.clone(), i).is_some() {
                return Err(DatasetError::DuplicateTask(id.clone()));
            }
        }
        let n = ids.len();
        let mut values = vec![None; n * n];
        for i in 0..n {
            values[i * n + i] = Some(1.0);
        }
        Ok(Self { ids, position, values })
    }

    /// Evaluates `f(i, j)` for every unordered same-group pair, in parallel.
    pub fn compute<F>(ids: Vec<String>, groups: &[String], f: F) -> Result<Self, DatasetError>
    where
        F: Fn(usize, usize) -> Result<f64, DatasetError> + Sync,
    {
        if groups.len() != ids.len() {
            return Err(DatasetError::InvalidParameter("one group per id required".into()));
        }
        let mut m = Self::empty(ids)?;
        let n = m.ids.len();
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| groups[i] == groups[j])
            .collect();
        let scored = pairs
            .par_iter()
            .map(|&(i, j)| f(i, j).map(|v| (i, j, v)))
            .collect::<Result<Vec<_>, _>>()?;
        for (i, j, v) in scored {
            m.values[i * n + j] = Some(v);
            m.values[j * n + i] = Some(v);
        }
        Ok(m)
    }

    pub fn from_pairs<I>(ids: Vec<String>, pairs: I) -> Result<Self, DatasetError>
    where
        I: IntoIterator<Item = (String, String, f64)>,
    {
        let mut m = Self::empty(ids)?;
        let n = m.ids.len();
        for (a, b, v) in pairs {
            let (i, j) = (m.index(&a)?, m.index(&b)?);
            m.values[i * n + j] = Some(v);
            m.values[j * n + i] = Some(v);
        }
        Ok(m)
    }

    fn index(&self, id: &str) -> Result<usize, DatasetError> {
        self.position
            .get(id)
            .copied()
            .ok_or_else(|| DatasetError::InvalidParameter(format!("unknown task {id}")))
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let (i, j) = (*self.position.get(a)?, *self.position.get(b)?);
        self.values[i * self.ids.len() + j]
    }

    fn require(&self, a: &str, b: &str) -> Result<f64, DatasetError> {
        self.get(a, b)
            .ok_or_else(|| DatasetError::MissingSimilarity(a.to_string(), b.to_string()))
    }

    /// Stored off-diagonal pairs with `i < j`.
    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str, f64)> + '_ {
        let n = self.ids.len();
        (0..n).flat_map(move |i| {
            (i + 1..n).filter_map(move |j| self.values[i * n + j].map(|v| (self.ids[i].as_str(), self.ids[j].as_str(), v)))
        })
    }
}

/// The three similarity dimensions over one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTables {
    pub instruction: SimilarityMatrix,
    pub ui: SimilarityMatrix,
    pub action: SimilarityMatrix,
}

/// One row of the similarity cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRecord {
    pub a: String,
    pub b: String,
    pub instruction: f64,
    pub ui: f64,
    pub action: f64,
}

impl SimilarityTables {
    /// Embeds each instruction and description text once, fits TF-IDF over
    /// the split, and scores every same-app pair.
    pub fn compute(
        tasks: &[Trajectory],
        entries: &[KnowledgeEntry],
        embedder: &dyn Embedder,
    ) -> Result<Self, DatasetError> {
        let ids: Vec<String> = tasks.iter().map(|t| t.task_id.clone()).collect();
        let groups: Vec<String> = tasks.iter().map(|t| t.app.clone()).collect();

        let instructions: Vec<String> = tasks.iter().map(|t| t.instruction.clone()).collect();
        let ins_vectors = embed_all(embedder, &instructions)?;
        let instruction = SimilarityMatrix::compute(ids.clone(), &groups, |i, j| {
            Ok(cosine_similarity(&ins_vectors[i], &ins_vectors[j])?)
        })?;

        let docs = tasks.iter().map(ui_document).collect::<Result<Vec<_>, _>>()?;
        let model = TfIdfModel::fit(&docs);
        let ui_vectors: Vec<_> = docs.iter().map(|d| model.vectorize(d)).collect();
        let ui = SimilarityMatrix::compute(ids.clone(), &groups, |i, j| Ok(sparse_cosine(&ui_vectors[i], &ui_vectors[j])))?;

        let by_task: HashMap<&str, &KnowledgeEntry> = entries.iter().map(|e| (e.source_task_id.as_str(), e)).collect();
        let texts = tasks
            .iter()
            .map(|t| {
                by_task
                    .get(t.task_id.as_str())
                    .map(|e| action_text(e))
                    .ok_or_else(|| DatasetError::MissingKnowledge(t.task_id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let act_vectors = embed_all(embedder, &texts)?;
        let action = SimilarityMatrix::compute(ids, &groups, |i, j| {
            Ok(cosine_similarity(&act_vectors[i], &act_vectors[j])?)
        })?;
        Ok(Self { instruction, ui, action })
    }

    pub fn records(&self) -> Vec<SimilarityRecord> {
        self.instruction
            .pairs()
            .map(|(a, b, ins)| SimilarityRecord {
                a: a.to_string(),
                b: b.to_string(),
                instruction: ins,
                ui: self.ui.get(a, b).unwrap_or(f64::NAN),
                action: self.action.get(a, b).unwrap_or(f64::NAN),
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        write_jsonl(path, &self.records())
    }

    pub fn load(path: &Path, ids: Vec<String>) -> Result<Self, DatasetError> {
        let records: Vec<SimilarityRecord> = read_jsonl(path)?;
        let pick = |f: fn(&SimilarityRecord) -> f64| {
            SimilarityMatrix::from_pairs(ids.clone(), records.iter().map(|r| (r.a.clone(), r.b.clone(), f(r))))
        };
        Ok(Self {
            instruction: pick(|r| r.instruction)?,
            ui: pick(|r| r.ui)?,
            action: pick(|r| r.action)?,
        })
    }
}

fn embed_all(embedder: &dyn Embedder, texts: &[String]) -> Result<Vec<crate::model::EmbeddingVector>, DatasetError> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(texts.len());
    for batch in texts.chunks(64) {
        out.extend(embedder.embed(batch).map_err(DatasetError::Backend)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedQuery {
    pub task_id: String,
    /// Mean similarity of the best k candidates, when there were k.
    pub best_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KShotSelection {
    pub combos: Vec<KShotCombo>,
    pub dropped: Vec<DroppedQuery>,
}

/// Same-app candidates for `query`, best first, ties by task id.
pub fn rank_supports<'t>(
    query: &Trajectory,
    tasks: &'t [Trajectory],
    instruction: &SimilarityMatrix,
) -> Result<Vec<(&'t Trajectory, f64)>, DatasetError> {
    let mut ranked = tasks
        .iter()
        .filter(|c| c.app == query.app && c.task_id != query.task_id)
        .map(|c| Ok((c, instruction.require(&query.task_id, &c.task_id)?)))
        .collect::<Result<Vec<_>, DatasetError>>()?;
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.task_id.cmp(&b.0.task_id)));
    Ok(ranked)
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Pairs each task with its k most similar same-app tasks, keeping the
/// combo only when their mean instruction similarity reaches `min_avg_sim`.
/// Profile values are means over the supports.
pub fn build_kshot(
    tasks: &[Trajectory],
    tables: &SimilarityTables,
    k: usize,
    min_avg_sim: f64,
    thresholds: &Thresholds,
) -> Result<KShotSelection, DatasetError> {
    if !(1..=3).contains(&k) {
        return Err(DatasetError::InvalidParameter(format!("k must be 1, 2 or 3, got {k}")));
    }
    let mut selection = KShotSelection::default();
    for query in tasks {
        let ranked = rank_supports(query, tasks, &tables.instruction)?;
        if ranked.len() < k {
            selection.dropped.push(DroppedQuery {
                task_id: query.task_id.clone(),
                best_mean: None,
            });
            continue;
        }
        let supports = &ranked[..k];
        let ins = mean(supports.iter().map(|(_, s)| *s));
        if ins < min_avg_sim {
            selection.dropped.push(DroppedQuery {
                task_id: query.task_id.clone(),
                best_mean: Some(ins),
            });
            continue;
        }
        let q = &query.task_id;
        let ui = mean(supports.iter().map(|(s, _)| tables.ui.require(q, &s.task_id)).collect::<Result<Vec<_>, _>>()?);
        let act = mean(supports.iter().map(|(s, _)| tables.action.require(q, &s.task_id)).collect::<Result<Vec<_>, _>>()?);
        selection.combos.push(KShotCombo {
            query_task_id: q.clone(),
            support_task_ids: supports.iter().map(|(s, _)| s.task_id.clone()).collect(),
            k,
            profile: SimilarityProfile {
                instruction_sim: ins,
                ui_sim: ui,
                action_sim: act,
                quadrant: classify_profile(ui, act, thresholds),
            },
        });
    }
    Ok(selection)
}

/// One row of the split summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsTable {
    pub split: String,
    pub k: usize,
    pub tasks: usize,
    pub apps: usize,
    pub step_actions: usize,
    pub avg_ins_sim: f64,
    pub avg_ui_sim: f64,
    pub avg_act_sim: f64,
    pub quadrants: BTreeMap<Quadrant, usize>,
}

pub fn split_stats(split: &str, k: usize, combos: &[KShotCombo], trajectories: &[Trajectory]) -> StatsTable {
    let by_id: HashMap<&str, &Trajectory> = trajectories.iter().map(|t| (t.task_id.as_str(), t)).collect();
    let queries: BTreeSet<&str> = combos.iter().map(|c| c.query_task_id.as_str()).collect();
    let apps: BTreeSet<&str> = queries
        .iter()
        .filter_map(|q| by_id.get(q).map(|t| t.app.as_str()))
        .collect();
    let step_actions = queries
        .iter()
        .filter_map(|q| by_id.get(q).map(|t| t.steps.len()))
        .sum();
    let mut quadrants: BTreeMap<Quadrant, usize> = Quadrant::ALL.iter().map(|q| (*q, 0)).collect();
    for c in combos {
        *quadrants.entry(c.profile.quadrant).or_insert(0) += 1;
    }
    StatsTable {
        split: split.to_string(),
        k,
        tasks: queries.len(),
        apps: apps.len(),
        step_actions,
        avg_ins_sim: mean(combos.iter().map(|c| c.profile.instruction_sim)),
        avg_ui_sim: mean(combos.iter().map(|c| c.profile.ui_sim)),
        avg_act_sim: mean(combos.iter().map(|c| c.profile.action_sim)),
        quadrants,
    }
}

/// Column-aligned rendering, one line per table.
pub fn render_stats(tables: &[StatsTable]) -> String {
    let mut header: Vec<String> = ["Split", "K-shot", "Tasks", "Apps", "Step actions", "Avg Ins", "Avg UI", "Avg Act"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(Quadrant::ALL.iter().map(|q| q.as_str().to_string()));
    let mut rows = vec![header];
    for t in tables {
        let mut row = vec![
            t.split.clone(),
            format!("{}-shot", t.k),
            t.tasks.to_string(),
            t.apps.to_string(),
            t.step_actions.to_string(),
            format!("{:.3}", t.avg_ins_sim),
            format!("{:.3}", t.avg_ui_sim),
            format!("{:.3}", t.avg_act_sim),
        ];
        row.extend(Quadrant::ALL.iter().map(|q| t.quadrants.get(q).copied().unwrap_or(0).to_string()));
        rows.push(row);
    }
    align(&rows)
}

pub(crate) fn align(rows: &[Vec<String>]) -> String {
    let columns = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..columns)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let line = row
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                if c == 0 {
                    format!("{cell:<w$}", w = widths[c])
                } else {
                    format!("{cell:>w$}", w = widths[c])
                }
            })
            .collect::<Vec<_>>()
            .join("  ");
        let _ = writeln!(out, "{}", line.trim_end());
    }
    out
}
