//! Turns demonstrations into knowledge entries.
//!
//! Each intermediate step is shown to the generative backend as a
//! before/after composite and described as
//! `On|In <Screen>, <Action>, to <Purpose>` with an optional trailing
//! `[Memory: ...]`; the final step is described as
//! `On|In <Screen>, complete task, <Reason or answer>`.

pub mod visualize;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::action::Action;
use crate::model::{ChatBackend, ChatRequest, ImageRef, ModelError, UserPart};
use crate::prompts;
use crate::store::{KnowledgeEntry, Trajectory};

pub use visualize::{build_visualization, ActionVisualization, ClickMarker, VisualizationError};

const MEMORY_OPEN: &str = "[Memory:";
const PURPOSE_WORD_LIMIT: usize = 8;

#[derive(Debug, Error)]
pub enum DescribeError {
    #[error("backend failure: {0}")]
    Backend(#[source] ModelError),
    #[error("description {text:?} violates rule `{rule}`: {detail}")]
    Format {
        text: String,
        rule: &'static str,
        detail: String,
    },
    #[error("expected a non-terminal action, got {0}")]
    NotIntermediate(Action),
    #[error("expected TASK_COMPLETE, got {0}")]
    NotTerminal(Action),
    #[error("cannot read image {path}: {source}")]
    ImageRead {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Visualization(#[from] VisualizationError),
    #[error("step {index} failed: {source}")]
    StepFailed {
        index: usize,
        #[source]
        source: Box<DescribeError>,
    },
}

impl DescribeError {
    /// True when the root cause is a backend failure.
    pub fn is_backend(&self) -> bool {
        match self {
            Self::Backend(_) => true,
            Self::StepFailed { source, .. } => source.is_backend(),
            _ => false,
        }
    }
}

/// A validated step description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionRecord {
    pub text: String,
    pub screen_name: String,
    pub action_detail: String,
    pub purpose: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory: Option<String>,
    pub terminal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    /// Soft-rule violations (purpose length, coordinates, ids).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl DescriptionRecord {
    /// A template description that bypasses the backend.
    pub fn mechanical(action: &Action, step: usize) -> Self {
        Self {
            text: format!("{action} on step {}", step + 1),
            screen_name: String::new(),
            action_detail: action.to_string(),
            purpose: String::new(),
            memory: None,
            terminal: action.is_terminal(),
            answer: action.answer().map(str::to_string),
            warnings: Vec::new(),
        }
    }
}

/// A rejected description with the rule it broke.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatViolation {
    pub rule: &'static str,
    pub detail: String,
}

impl FormatViolation {
    fn new(rule: &'static str, detail: impl Into<String>) -> Self {
        Self {
            rule,
            detail: detail.into(),
        }
    }
}

/// Pulls the description out of a model reply: the `action_description`
/// field of a JSON object (optionally fenced), else the trimmed text itself.
pub fn extract_description(reply: &str) -> String {
    let mut body = reply.trim();
    if let Some(rest) = body.strip_prefix("```") {
        let rest = rest.trim_start_matches(|c: char| c.is_ascii_alphabetic());
        body = rest.strip_suffix("```").unwrap_or(rest).trim();
    }
    match serde_json::from_str::<Value>(body) {
        Ok(Value::Object(map)) => {
            if let Some(Value::String(text)) = map.get("action_description") {
                return text.trim().to_string();
            }
        }
        Ok(Value::String(text)) => return text.trim().to_string(),
        _ => {}
    }
    let unquoted = if body.len() >= 2 && body.starts_with('"') && body.ends_with('"') {
        &body[1..body.len() - 1]
    } else {
        body
    };
    unquoted.trim().to_string()
}

fn split_prefix(text: &str) -> Result<&str, FormatViolation> {
    ["On ", "In "]
        .iter()
        .find_map(|p| text.strip_prefix(p))
        .ok_or_else(|| FormatViolation::new("prefix", "must start with \"On \" or \"In \""))
}

fn check_screen(screen: &str) -> Result<String, FormatViolation> {
    let words = screen.split_whitespace().count();
    if !(2..=6).contains(&words) {
        return Err(FormatViolation::new(
            "screen_name_length",
            format!("screen name {screen:?} has {words} words, expected 2-6"),
        ));
    }
    Ok(screen.trim().to_string())
}

/// Finds `<digits> , <digits>` anywhere in the text.
fn mentions_coordinates(text: &str) -> bool {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() && (i == 0 || !bytes[i - 1].is_ascii_digit()) {
            let mut j = i;
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                j += 1;
            }
            let mut k = j;
            while k < bytes.len() && bytes[k] == b' ' {
                k += 1;
            }
            if k < bytes.len() && bytes[k] == b',' {
                k += 1;
                while k < bytes.len() && bytes[k] == b' ' {
                    k += 1;
                }
                if k < bytes.len() && bytes[k].is_ascii_digit() {
                    return true;
                }
            }
            i = j;
        } else {
            i += 1;
        }
    }
    false
}

fn mentions_ids(text: &str) -> bool {
    let lower = text.to_lowercase();
    lower.contains("resource-id")
        || lower.contains("resource_id")
        || lower
            .split(|c: char| !c.is_alphanumeric())
            .any(|w| w == "id" || w == "ids")
}

fn soft_warnings(action_detail: &str, purpose: &str) -> Vec<String> {
    let mut warnings = Vec::new();
    let purpose_words = purpose.split_whitespace().count();
    if purpose_words >= PURPOSE_WORD_LIMIT {
        warnings.push(format!(
            "purpose has {purpose_words} words; keep it under {PURPOSE_WORD_LIMIT}"
        ));
    }
    let detail = format!("{action_detail} {purpose}");
    if mentions_coordinates(&detail) {
        warnings.push("description mentions coordinates".to_string());
    }
    if mentions_ids(&detail) {
        warnings.push("description mentions element ids".to_string());
    }
    warnings
}

/// Validates an intermediate description.
pub fn parse_intermediate(text: &str) -> Result<DescriptionRecord, FormatViolation> {
    let text = text.trim();
    let (body, memory) = match text.rfind(MEMORY_OPEN) {
        Some(start) => {
            let suffix = text[start..].trim_end();
            let inner = suffix
                .strip_suffix(']')
                .ok_or_else(|| FormatViolation::new("memory_unclosed", "memory annotation lacks a closing `]`"))?;
            let memory = inner[MEMORY_OPEN.len()..].trim();
            if memory.is_empty() {
                return Err(FormatViolation::new("memory_empty", "memory annotation is empty"));
            }
            (text[..start].trim_end(), Some(memory.to_string()))
        }
        None => (text, None),
    };
    let body = body.strip_suffix('.').unwrap_or(body).trim_end();
    let rest = split_prefix(body)?;
    let (screen, remainder) = rest
        .split_once(", ")
        .ok_or_else(|| FormatViolation::new("missing_action", "expected \"<Screen>, <Action>, to <Purpose>\""))?;
    let screen_name = check_screen(screen)?;
    let (action_detail, purpose) = remainder
        .rsplit_once(", to ")
        .ok_or_else(|| FormatViolation::new("missing_purpose", "expected \", to <Purpose>\""))?;
    let (action_detail, purpose) = (action_detail.trim(), purpose.trim());
    if action_detail.is_empty() {
        return Err(FormatViolation::new("missing_action", "action details are empty"));
    }
    if purpose.is_empty() {
        return Err(FormatViolation::new("missing_purpose", "purpose is empty"));
    }
    Ok(DescriptionRecord {
        text: text.to_string(),
        screen_name,
        action_detail: action_detail.to_string(),
        purpose: purpose.to_string(),
        memory,
        terminal: false,
        answer: None,
        warnings: soft_warnings(action_detail, purpose),
    })
}

/// Validates a terminal description. `answer` is the answer carried by the
/// completing action; it is recorded verbatim.
pub fn parse_terminal(text: &str, answer: Option<&str>) -> Result<DescriptionRecord, FormatViolation> {
    let text = text.trim();
    let body = text.strip_suffix('.').unwrap_or(text).trim_end();
    let rest = split_prefix(body)?;
    let marker = [", cannot complete task,", ", complete task,"]
        .iter()
        .filter_map(|m| rest.find(m).map(|at| (at, *m)))
        .min_by_key(|(at, _)| *at)
        .ok_or_else(|| {
            FormatViolation::new(
                "missing_complete_task",
                "expected \"<Screen>, complete task, <Reason>\"",
            )
        })?;
    let (at, marker_text) = marker;
    let screen_name = check_screen(&rest[..at])?;
    let reason = rest[at + marker_text.len()..].trim();
    if reason.is_empty() {
        return Err(FormatViolation::new("missing_reason", "reason or answer is empty"));
    }
    let mut warnings = Vec::new();
    if let Some(answer) = answer {
        if !reason.contains(answer) {
            warnings.push(format!("terminal description does not quote the answer {answer:?}"));
        }
    }
    Ok(DescriptionRecord {
        text: text.to_string(),
        screen_name,
        action_detail: marker_text.trim_matches(|c| c == ',' || c == ' ').to_string(),
        purpose: reason.to_string(),
        memory: None,
        terminal: true,
        answer: answer.map(str::to_string),
        warnings,
    })
}

/// `Step-n: <text>` lines, or `None` when there is no history yet.
pub fn render_history(history: &[DescriptionRecord]) -> String {
    if history.is_empty() {
        return "None".to_string();
    }
    history
        .iter()
        .enumerate()
        .map(|(i, d)| format!("Step-{}: {}", i + 1, d.text))
        .collect::<Vec<_>>()
        .join("\n")
}

pub(crate) fn load_rgba(path: &Path) -> Result<image::RgbaImage, DescribeError> {
    image::open(path)
        .map(|img| img.to_rgba8())
        .map_err(|source| DescribeError::ImageRead {
            path: path.to_path_buf(),
            source,
        })
}

/// Generates step descriptions through a chat backend.
pub struct DemoParser<'a> {
    chat: &'a dyn ChatBackend,
    debug_dir: Option<PathBuf>,
    max_output_tokens: u32,
}

impl<'a> DemoParser<'a> {
    pub fn new(chat: &'a dyn ChatBackend) -> Self {
        Self {
            chat,
            debug_dir: None,
            max_output_tokens: crate::model::DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }

    /// Writes every composite image to `dir` as it is produced.
    pub fn with_debug_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.debug_dir = Some(dir.into());
        self
    }

    pub fn with_max_output_tokens(mut self, tokens: u32) -> Self {
        self.max_output_tokens = tokens;
        self
    }

    fn request(&self, system: &str, instruction: &str, action: &Action, image: ImageRef, history: &[DescriptionRecord]) -> ChatRequest {
        let text = prompts::fill(
            prompts::DESCRIBE_USER,
            &[
                ("instruction", instruction),
                ("action", &action.to_string()),
                ("history", &render_history(history)),
            ],
        );
        let mut request = ChatRequest::new(system, vec![UserPart::Text(text), UserPart::Image(image)]);
        request.max_output_tokens = self.max_output_tokens;
        request
    }

    /// Sends the request, validates, and re-prompts once on a violation.
    fn ask<F>(&self, request: ChatRequest, parse: F) -> Result<DescriptionRecord, DescribeError>
    where
        F: Fn(&str) -> Result<DescriptionRecord, FormatViolation>,
    {
        let reply = self.chat.complete(&request).map_err(DescribeError::Backend)?;
        let text = extract_description(&reply);
        let violation = match parse(&text) {
            Ok(record) => return Ok(record),
            Err(v) => v,
        };
        log::debug!("description rejected ({}): {text:?}; re-prompting", violation.rule);
        let retry = request.with_appended_text(prompts::fill(
            prompts::DESCRIBE_RETRY,
            &[
                ("violation", &format!("{}: {}", violation.rule, violation.detail)),
                ("reply", &text),
            ],
        ));
        let reply = self.chat.complete(&retry).map_err(DescribeError::Backend)?;
        let text = extract_description(&reply);
        parse(&text).map_err(|v| DescribeError::Format {
            text,
            rule: v.rule,
            detail: v.detail,
        })
    }

    fn log_warnings(record: &DescriptionRecord) {
        for warning in &record.warnings {
            log::warn!("description {:?}: {warning}", record.text);
        }
    }

    pub fn describe_intermediate(
        &self,
        instruction: &str,
        action: &Action,
        image: ImageRef,
        history: &[DescriptionRecord],
    ) -> Result<DescriptionRecord, DescribeError> {
        if action.is_terminal() {
            return Err(DescribeError::NotIntermediate(action.clone()));
        }
        let request = self.request(prompts::DESCRIBE_INTERMEDIATE, instruction, action, image, history);
        let record = self.ask(request, parse_intermediate)?;
        Self::log_warnings(&record);
        Ok(record)
    }

    pub fn describe_terminal(
        &self,
        instruction: &str,
        final_screenshot: ImageRef,
        history: &[DescriptionRecord],
        action: &Action,
    ) -> Result<DescriptionRecord, DescribeError> {
        if !action.is_terminal() {
            return Err(DescribeError::NotTerminal(action.clone()));
        }
        let answer = action.answer();
        let system = if answer.is_some() {
            prompts::DESCRIBE_TERMINAL_ANSWER
        } else {
            prompts::DESCRIBE_TERMINAL_STANDARD
        };
        let request = self.request(system, instruction, action, final_screenshot, history);
        let record = self.ask(request, |text| parse_terminal(text, answer))?;
        Self::log_warnings(&record);
        Ok(record)
    }

    fn visualize_step(&self, trajectory: &Trajectory, j: usize) -> Result<ImageRef, DescribeError> {
        let before = load_rgba(&trajectory.steps[j].screenshot)?;
        let after = load_rgba(&trajectory.steps[j + 1].screenshot)?;
        let viz = build_visualization(&before, &after, &trajectory.steps[j].action)?;
        let png = viz.to_png()?;
        if let Some(dir) = &self.debug_dir {
            let path = dir.join(format!("{}_step{j:03}.png", sanitize(&trajectory.task_id)));
            if let Err(e) = std::fs::create_dir_all(dir).and_then(|_| std::fs::write(&path, &png)) {
                log::warn!("cannot write debug composite {}: {e}", path.display());
            }
        }
        Ok(ImageRef::Png(png))
    }

    /// Describes every step and returns the aligned knowledge entry.
    pub fn generate_knowledge(&self, trajectory: &Trajectory) -> Result<KnowledgeEntry, DescribeError> {
        let (descriptions, _) = self.describe_trajectory(trajectory)?;
        Ok(KnowledgeEntry {
            entry_id: format!("kb-{}", trajectory.task_id),
            instruction: trajectory.instruction.clone(),
            actions: trajectory.actions().map(Action::to_string).collect(),
            descriptions,
            app: trajectory.app.clone(),
            source_task_id: trajectory.task_id.clone(),
        })
    }

    /// Full records for every step; the texts come first for convenience.
    pub fn describe_trajectory(
        &self,
        trajectory: &Trajectory,
    ) -> Result<(Vec<String>, Vec<DescriptionRecord>), DescribeError> {
        let n = trajectory.steps.len();
        let mut history: Vec<DescriptionRecord> = Vec::with_capacity(n);
        let step_failed = |index: usize, e: DescribeError| DescribeError::StepFailed {
            index,
            source: Box::new(e),
        };
        for (j, step) in trajectory.steps.iter().enumerate() {
            let record = if j + 1 < n {
                if step.action.is_terminal() {
                    return Err(step_failed(j, DescribeError::NotIntermediate(step.action.clone())));
                }
                let image = self.visualize_step(trajectory, j).map_err(|e| step_failed(j, e))?;
                self.describe_intermediate(&trajectory.instruction, &step.action, image, &history)
            } else {
                self.describe_terminal(
                    &trajectory.instruction,
                    ImageRef::File(step.screenshot.clone()),
                    &history,
                    &step.action,
                )
            }
            .map_err(|e| step_failed(j, e))?;
            history.push(record);
        }
        Ok((history.iter().map(|d| d.text.clone()).collect(), history))
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
