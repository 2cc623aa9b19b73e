//! Deterministic chat backends for tests and offline runs.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::action::{parse_action, Action};
use crate::prompts::{PromptKind, ACTION_LINE_PREFIX};

use super::{ChatBackend, ChatRequest, ModelError};

/// Replies with a fixed script, one entry per call, and records every request.
#[derive(Default)]
pub struct ScriptedChat {
    replies: Mutex<VecDeque<Result<String, u16>>>,
    served: AtomicUsize,
    requests: Mutex<Vec<ChatRequest>>,
}

impl ScriptedChat {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            replies: Mutex::new(replies.into_iter().map(|r| Ok(r.into())).collect()),
            ..Self::default()
        }
    }

    /// Queues a backend failure with the given HTTP status.
    pub fn push_failure(&self, status: u16) {
        self.replies.lock().expect("script poisoned").push_back(Err(status));
    }

    pub fn push_reply(&self, reply: impl Into<String>) {
        self.replies
            .lock()
            .expect("script poisoned")
            .push_back(Ok(reply.into()));
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().expect("script poisoned").clone()
    }

    pub fn remaining(&self) -> usize {
        self.replies.lock().expect("script poisoned").len()
    }
}

impl ChatBackend for ScriptedChat {
    fn complete(&self, request: &ChatRequest) -> Result<String, ModelError> {
        request.validate()?;
        self.requests
            .lock()
            .expect("script poisoned")
            .push(request.clone());
        let next = self.replies.lock().expect("script poisoned").pop_front();
        match next {
            Some(Ok(reply)) => {
                self.served.fetch_add(1, Ordering::SeqCst);
                Ok(reply)
            }
            Some(Err(status)) => Err(ModelError::Backend {
                status,
                body: "scripted failure".into(),
            }),
            None => Err(ModelError::ScriptExhausted(self.served.load(Ordering::SeqCst))),
        }
    }
}

/// Replays a gold action sequence: the t-th decision request receives the
/// t-th gold action. Description requests receive a grammar-conforming
/// canned description of the action named in the request.
pub struct EchoChat {
    actions: Vec<Action>,
    decisions: AtomicUsize,
}

impl EchoChat {
    pub fn new(actions: Vec<Action>) -> Self {
        Self {
            actions,
            decisions: AtomicUsize::new(0),
        }
    }

    pub fn decisions_served(&self) -> usize {
        self.decisions.load(Ordering::SeqCst)
    }

    fn requested_action(request: &ChatRequest) -> Option<Action> {
        request
            .user_text()
            .lines()
            .find_map(|l| l.strip_prefix(ACTION_LINE_PREFIX))
            .and_then(|a| parse_action(a).ok())
    }
}

pub(crate) fn canned_intermediate(action: Option<&Action>) -> String {
    let detail = match action {
        Some(Action::Click { .. }) => "tap highlighted element".to_string(),
        Some(Action::Type { text }) => format!("type '{text}' in input field"),
        Some(Action::Swipe { direction }) => {
            format!("swipe {}", direction.as_str().to_lowercase())
        }
        Some(Action::PressHome) => "press home".to_string(),
        Some(Action::PressBack) => "press back".to_string(),
        Some(Action::PressEnter) => "press enter".to_string(),
        Some(Action::TaskComplete { .. }) | None => "perform action".to_string(),
    };
    format!("On Replay Screen, {detail}, to continue the task")
}

impl ChatBackend for EchoChat {
    fn complete(&self, request: &ChatRequest) -> Result<String, ModelError> {
        request.validate()?;
        let description = match PromptKind::of(&request.system_prompt) {
            PromptKind::DescribeIntermediate => {
                canned_intermediate(Self::requested_action(request).as_ref())
            }
            PromptKind::DescribeTerminalStandard => {
                "On Replay Screen, complete task, task finished".to_string()
            }
            PromptKind::DescribeTerminalAnswer => {
                let action = Self::requested_action(request);
                let answer = action.as_ref().and_then(Action::answer).unwrap_or_default();
                format!("On Replay Screen, complete task, the answer is \"{answer}\".")
            }
            _ => {
                let t = self.decisions.fetch_add(1, Ordering::SeqCst);
                return self
                    .actions
                    .get(t)
                    .map(Action::to_string)
                    .ok_or(ModelError::ScriptExhausted(self.actions.len()));
            }
        };
        Ok(serde_json::json!({ "action_description": description }).to_string())
    }
}
