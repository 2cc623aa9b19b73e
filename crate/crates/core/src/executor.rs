//! The observe, decide, describe, act loop over an environment.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{parse_action, Action};
use crate::describe::{build_visualization, load_rgba, DemoParser, DescribeError, DescriptionRecord};
use crate::model::{ChatBackend, ChatRequest, Embedder, ImageRef, ModelError, UserPart};
use crate::prompts;
use crate::retrieval::{EmbeddingIndex, Hit, RetrievalError, RetrieveOptions};
use crate::store::{KnowledgeEntry, Step, Trajectory};

pub const DEFAULT_MAX_STEPS: usize = 40;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("model output {raw:?} is not an action: {reason}")]
    UnparseableDecision { raw: String, reason: String },
    #[error("backend failure: {0}")]
    Backend(#[source] ModelError),
    #[error("description failed: {0}")]
    Describe(#[source] DescribeError),
    #[error("retrieval failed: {0}")]
    Retrieval(#[source] RetrievalError),
    #[error("environment error: {0}")]
    Environment(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

impl ExecError {
    pub fn is_backend(&self) -> bool {
        match self {
            Self::Backend(_) => true,
            Self::Describe(e) => e.is_backend(),
            Self::Retrieval(RetrievalError::Backend(_)) => true,
            _ => false,
        }
    }
}

/// Coarse class of the error that stopped an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Backend,
    Decision,
    Description,
    Retrieval,
    Environment,
}

impl ExecError {
    pub fn kind(&self) -> FailureKind {
        if self.is_backend() {
            return FailureKind::Backend;
        }
        match self {
            Self::UnparseableDecision { .. } | Self::Backend(_) => FailureKind::Decision,
            Self::Describe(_) => FailureKind::Description,
            Self::Retrieval(_) => FailureKind::Retrieval,
            Self::Environment(_) | Self::InvalidParameter(_) => FailureKind::Environment,
        }
    }
}

impl From<DescribeError> for ExecError {
    fn from(e: DescribeError) -> Self {
        match e {
            DescribeError::Backend(m) => Self::Backend(m),
            other => Self::Describe(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub screenshot: PathBuf,
    pub width: u32,
    pub height: u32,
}

/// A device the agent acts on.
pub trait Environment {
    /// Current screen; no side effects.
    fn observe(&self) -> Result<Observation, ExecError>;
    fn execute(&mut self, action: &Action) -> Result<(), ExecError>;
    fn is_terminal(&self) -> bool;
}

/// Serves a recorded trajectory's screenshots. Every executed action
/// advances one step, whatever it was.
#[derive(Debug, Clone)]
pub struct ReplayEnvironment {
    gold: Trajectory,
    cursor: usize,
}

impl ReplayEnvironment {
    pub fn new(gold: Trajectory) -> Self {
        Self { gold, cursor: 0 }
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn gold(&self) -> &Trajectory {
        &self.gold
    }
}

impl Environment for ReplayEnvironment {
    fn observe(&self) -> Result<Observation, ExecError> {
        let step = self
            .gold
            .steps
            .get(self.cursor)
            .ok_or_else(|| ExecError::Environment(format!("replay of {} is exhausted", self.gold.task_id)))?;
        Ok(Observation {
            screenshot: step.screenshot.clone(),
            width: self.gold.screen_width,
            height: self.gold.screen_height,
        })
    }

    fn execute(&mut self, _action: &Action) -> Result<(), ExecError> {
        if self.is_terminal() {
            return Err(ExecError::Environment(format!("replay of {} is exhausted", self.gold.task_id)));
        }
        self.cursor += 1;
        Ok(())
    }

    fn is_terminal(&self) -> bool {
        self.cursor >= self.gold.steps.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// The policy issued TASK_COMPLETE.
    TaskComplete,
    /// The environment reported the episode finished.
    EnvironmentDone,
    StepLimit,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptionMode {
    Model,
    Mechanical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub task_id: String,
    pub predicted: Trajectory,
    pub terminated_by: Termination,
    pub steps_taken: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureKind>,
    #[serde(default)]
    pub retrieved: Vec<Hit>,
    /// Entry ids of the demonstrations shown in every prompt.
    #[serde(default)]
    pub demos: Vec<String>,
}

/// One line of the per-step run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub task_id: String,
    pub step: usize,
    pub prompt_hash: String,
    pub raw_output: String,
    pub action: Option<Action>,
    pub description: Option<String>,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutorConfig {
    pub max_steps: usize,
    pub retrieve: RetrieveOptions,
    pub description_mode: DescriptionMode,
    /// Restrict retrieval to the task's own app.
    pub same_app_only: bool,
    /// Never retrieve the entry generated from the task being executed.
    pub exclude_self: bool,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self {
            max_steps: DEFAULT_MAX_STEPS,
            retrieve: RetrieveOptions::default(),
            description_mode: DescriptionMode::Model,
            same_app_only: false,
            exclude_self: true,
        }
    }
}

/// What retrieval needs: the index, the entries it points at, and the
/// embedder it was built with.
pub struct Demonstrations<'a> {
    pub index: &'a EmbeddingIndex,
    pub embedder: &'a dyn Embedder,
    by_id: HashMap<&'a str, &'a KnowledgeEntry>,
}

impl<'a> Demonstrations<'a> {
    pub fn new(index: &'a EmbeddingIndex, kb: &'a [KnowledgeEntry], embedder: &'a dyn Embedder) -> Self {
        Self {
            index,
            embedder,
            by_id: kb.iter().map(|e| (e.entry_id.as_str(), e)).collect(),
        }
    }

    pub fn entry(&self, id: &str) -> Option<&'a KnowledgeEntry> {
        self.by_id.get(id).copied()
    }
}

fn example_block(demos: &[&KnowledgeEntry]) -> String {
    let mut out = String::from("Example Tasks:\n");
    for (i, demo) in demos.iter().enumerate() {
        out.push_str(&format!("\nExample {}: {}\nSteps taken in this example:\n", i + 1, demo.instruction));
        for (j, (action, description)) in demo.actions.iter().zip(&demo.descriptions).enumerate() {
            out.push_str(&format!("Step-{}: {action} {description}\n", j + 1));
        }
    }
    out.trim_end().to_string()
}

/// Assembles the decision request. Optional blocks are left out when their
/// inputs are empty.
pub fn construct_prompt(
    instruction: &str,
    observation: &Observation,
    history: &[(Action, DescriptionRecord)],
    demos: &[&KnowledgeEntry],
) -> ChatRequest {
    let mut blocks = Vec::new();
    if !demos.is_empty() {
        blocks.push(example_block(demos));
    }
    blocks.push(prompts::fill(
        prompts::EXECUTE_BACKGROUND,
        &[
            ("width", &observation.width.to_string()),
            ("height", &observation.height.to_string()),
            ("instruction", instruction),
        ],
    ));
    if !history.is_empty() {
        let lines = history
            .iter()
            .enumerate()
            .map(|(i, (a, d))| format!("Step-{}: {a} {}", i + 1, d.text))
            .collect::<Vec<_>>()
            .join("\n");
        blocks.push(prompts::fill(prompts::EXECUTE_HISTORY, &[("history", &lines)]));
    }
    blocks.push(prompts::EXECUTE_REQUIREMENTS.to_string());
    let text = blocks
        .iter()
        .map(|b| b.trim_end())
        .collect::<Vec<_>>()
        .join("\n\n");
    ChatRequest::new(
        prompts::EXECUTE_ROLE.trim_end(),
        vec![
            UserPart::Text(text),
            UserPart::Image(ImageRef::File(observation.screenshot.clone())),
        ],
    )
}

/// A decision plus the raw text it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub raw: String,
}

/// Queries the policy; one corrective re-prompt on an unparseable reply.
pub fn decide(chat: &dyn ChatBackend, request: &ChatRequest) -> Result<Decision, ExecError> {
    let raw = chat.complete(request).map_err(ExecError::Backend)?;
    let reason = match parse_action(raw.trim()) {
        Ok(action) => return Ok(Decision { action, raw }),
        Err(e) => e.reason,
    };
    log::debug!("unparseable decision {raw:?} ({reason}); re-prompting");
    let retry = request.with_appended_text(prompts::fill(
        prompts::EXECUTE_RETRY,
        &[("raw", raw.trim()), ("reason", &reason)],
    ));
    let raw = chat.complete(&retry).map_err(ExecError::Backend)?;
    parse_action(raw.trim())
        .map(|action| Decision { action, raw: raw.clone() })
        .map_err(|e| ExecError::UnparseableDecision { raw, reason: e.reason })
}

/// Runs one task.
pub struct Executor<'a> {
    pub chat: &'a dyn ChatBackend,
    pub demos: Option<&'a Demonstrations<'a>>,
    pub config: ExecutorConfig,
}

struct Outcome {
    terminated_by: Termination,
    error: Option<ExecError>,
}

impl<'a> Executor<'a> {
    pub fn new(chat: &'a dyn ChatBackend, demos: Option<&'a Demonstrations<'a>>, config: ExecutorConfig) -> Self {
        Self { chat, demos, config }
    }

    fn retrieve(&self, task_id: &str, app: &str, instruction: &str) -> Result<(Vec<Hit>, Vec<&'a KnowledgeEntry>), ExecError> {
        let Some(demos) = self.demos else {
            return Ok((Vec::new(), Vec::new()));
        };
        let mut options = self.config.retrieve.clone();
        if self.config.same_app_only {
            options.app_filter = Some(app.to_string());
        }
        if self.config.exclude_self {
            options.exclude.extend(
                demos
                    .by_id
                    .values()
                    .filter(|e| e.source_task_id == task_id)
                    .map(|e| e.entry_id.clone()),
            );
            options.exclude.sort();
        }
        let hits = demos
            .index
            .retrieve(instruction, demos.embedder, &options)
            .map_err(ExecError::Retrieval)?;
        let entries = hits
            .iter()
            .map(|h| {
                demos
                    .entry(&h.entry_id)
                    .ok_or_else(|| ExecError::Retrieval(RetrievalError::Format(format!("index entry {} missing from knowledge base", h.entry_id))))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok((hits, entries))
    }

    fn describe(
        &self,
        instruction: &str,
        action: &Action,
        step: usize,
        before: &Observation,
        after: Option<&Observation>,
        history: &[DescriptionRecord],
    ) -> Result<DescriptionRecord, ExecError> {
        if self.config.description_mode == DescriptionMode::Mechanical {
            return Ok(DescriptionRecord::mechanical(action, step));
        }
        let parser = DemoParser::new(self.chat);
        if action.is_terminal() {
            return Ok(parser.describe_terminal(instruction, ImageRef::File(before.screenshot.clone()), history, action)?);
        }
        let image = composite(before, after, action).unwrap_or_else(|e| {
            log::warn!("cannot visualize {action} on {}: {e}", before.screenshot.display());
            ImageRef::File(before.screenshot.clone())
        });
        Ok(parser.describe_intermediate(instruction, action, image, history)?)
    }

    /// Runs to TASK_COMPLETE, environment end, step limit, or the first
    /// error. Step records are passed to `log` as they complete.
    pub fn run_episode(
        &self,
        env: &mut dyn Environment,
        task_id: &str,
        app: &str,
        instruction: &str,
        log: &mut dyn FnMut(StepLog),
    ) -> Result<EpisodeResult, ExecError> {
        self.run_episode_with(env, task_id, app, instruction, None, log)
    }

    /// Like [`Executor::run_episode`]; `fixed` demonstrations replace
    /// retrieval when given.
    pub fn run_episode_with(
        &self,
        env: &mut dyn Environment,
        task_id: &str,
        app: &str,
        instruction: &str,
        fixed: Option<&[&KnowledgeEntry]>,
        log: &mut dyn FnMut(StepLog),
    ) -> Result<EpisodeResult, ExecError> {
        if self.config.max_steps == 0 {
            return Err(ExecError::InvalidParameter("step limit must be at least 1".into()));
        }
        let mut predicted = Trajectory {
            task_id: task_id.to_string(),
            app: app.to_string(),
            instruction: instruction.to_string(),
            steps: Vec::new(),
            screen_width: 0,
            screen_height: 0,
            ui_trees: None,
        };
        let found = match fixed {
            Some(entries) => Ok((Vec::new(), entries.to_vec())),
            None => self.retrieve(task_id, app, instruction),
        };
        let (hits, demos) = match found {
            Ok(found) => found,
            Err(e) => {
                return Ok(finish(predicted, Vec::new(), Vec::new(), Outcome { terminated_by: Termination::Error, error: Some(e) }))
            }
        };
        let demo_ids: Vec<String> = demos.iter().map(|d| d.entry_id.clone()).collect();
        let mut history: Vec<(Action, DescriptionRecord)> = Vec::new();
        let outcome = loop {
            if history.len() >= self.config.max_steps {
                break Outcome { terminated_by: Termination::StepLimit, error: None };
            }
            if env.is_terminal() {
                break Outcome { terminated_by: Termination::EnvironmentDone, error: None };
            }
            match self.step(env, instruction, &mut history, &demos, &mut predicted, task_id, log) {
                Ok(true) => break Outcome { terminated_by: Termination::TaskComplete, error: None },
                Ok(false) => {}
                Err(e) => break Outcome { terminated_by: Termination::Error, error: Some(e) },
            }
        };
        Ok(finish(predicted, hits, demo_ids, outcome))
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        env: &mut dyn Environment,
        instruction: &str,
        history: &mut Vec<(Action, DescriptionRecord)>,
        demos: &[&KnowledgeEntry],
        predicted: &mut Trajectory,
        task_id: &str,
        log: &mut dyn FnMut(StepLog),
    ) -> Result<bool, ExecError> {
        let started = Instant::now();
        let t = history.len();
        let observation = env.observe()?;
        if t == 0 {
            predicted.screen_width = observation.width;
            predicted.screen_height = observation.height;
        }
        let request = construct_prompt(instruction, &observation, history, demos);
        let prompt_hash = request.fingerprint();
        let decision = match decide(self.chat, &request) {
            Ok(d) => d,
            Err(e) => {
                let raw_output = match &e {
                    ExecError::UnparseableDecision { raw, .. } => raw.clone(),
                    _ => String::new(),
                };
                log(StepLog {
                    task_id: task_id.to_string(),
                    step: t,
                    prompt_hash,
                    raw_output,
                    action: None,
                    description: None,
                    elapsed_ms: started.elapsed().as_millis() as u64,
                });
                return Err(e);
            }
        };
        let action = decision.action;
        let terminal = action.is_terminal();
        let next = if terminal {
            None
        } else {
            env.execute(&action)?;
            if env.is_terminal() { None } else { Some(env.observe()?) }
        };
        let records: Vec<DescriptionRecord> = history.iter().map(|(_, d)| d.clone()).collect();
        let description = self.describe(instruction, &action, t, &observation, next.as_ref(), &records)?;
        log(StepLog {
            task_id: task_id.to_string(),
            step: t,
            prompt_hash,
            raw_output: decision.raw,
            action: Some(action.clone()),
            description: Some(description.text.clone()),
            elapsed_ms: started.elapsed().as_millis() as u64,
        });
        predicted.steps.push(Step {
            index: t,
            screenshot: observation.screenshot,
            action: action.clone(),
            description: Some(description.text.clone()),
        });
        history.push((action, description));
        Ok(terminal)
    }
}

fn composite(before: &Observation, after: Option<&Observation>, action: &Action) -> Result<ImageRef, DescribeError> {
    let first = load_rgba(&before.screenshot)?;
    let second = match after {
        Some(obs) => load_rgba(&obs.screenshot)?,
        None => first.clone(),
    };
    Ok(ImageRef::Png(build_visualization(&first, &second, action)?.to_png()?))
}

fn finish(predicted: Trajectory, retrieved: Vec<Hit>, demos: Vec<String>, outcome: Outcome) -> EpisodeResult {
    if let Some(e) = &outcome.error {
        log::warn!("episode {} stopped: {e}", predicted.task_id);
    }
    EpisodeResult {
        task_id: predicted.task_id.clone(),
        steps_taken: predicted.steps.len(),
        terminated_by: outcome.terminated_by,
        failure: outcome.error.as_ref().map(ExecError::kind),
        error: outcome.error.map(|e| e.to_string()),
        retrieved,
        demos,
        predicted,
    }
}

/// Replays `gold` and returns the episode.
pub fn run_replay(
    executor: &Executor<'_>,
    gold: &Trajectory,
    log: &mut dyn FnMut(StepLog),
) -> Result<EpisodeResult, ExecError> {
    let mut env = ReplayEnvironment::new(gold.clone());
    executor.run_episode(&mut env, &gold.task_id, &gold.app, &gold.instruction, log)
}
