//! Step accuracy scoring and replay success rate.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;
use crate::dataset::align;
use crate::executor::{EpisodeResult, Termination};
use crate::store::{KShotCombo, Quadrant, Trajectory};

/// A click matches within this fraction of the screen width.
pub const CLICK_TOLERANCE: f64 = 0.14;
/// TYPE text matches when token F1 is strictly above this.
pub const TYPE_F1_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("prediction for unknown task {0}")]
    UnknownTask(String),
    #[error("task {task_id} has no step {step_index}")]
    UnknownStep { task_id: String, step_index: usize },
    #[error("duplicate prediction for task {task_id} step {step_index}")]
    DuplicatePrediction { task_id: String, step_index: usize },
    #[error("{results} episode results for {gold} gold tasks")]
    LengthMismatch { results: usize, gold: usize },
    #[error("duplicate gold task {0}")]
    DuplicateTask(String),
    #[error("nothing to score")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepJudgment {
    pub type_match: bool,
    pub full_match: bool,
    pub reason: String,
}

impl StepJudgment {
    fn new(type_match: bool, full_match: bool, reason: impl Into<String>) -> Self {
        debug_assert!(type_match || !full_match);
        Self {
            type_match,
            full_match: type_match && full_match,
            reason: reason.into(),
        }
    }
}

fn counts(text: &str) -> HashMap<String, usize> {
    let mut out = HashMap::new();
    for token in text.to_lowercase().split_whitespace() {
        *out.entry(token.to_string()).or_insert(0) += 1;
    }
    out
}

/// Multiset token F1 over lowercase whitespace tokens.
pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let (p, g) = (counts(pred), counts(gold));
    let (np, ng): (usize, usize) = (p.values().sum(), g.values().sum());
    match (np, ng) {
        (0, 0) => return 1.0,
        (0, _) | (_, 0) => return 0.0,
        _ => {}
    }
    let overlap: usize = p.iter().map(|(t, c)| (*c).min(g.get(t).copied().unwrap_or(0))).sum();
    2.0 * overlap as f64 / (np + ng) as f64
}

pub fn judge_step(pred: &Action, gold: &Action, screen_width: u32) -> StepJudgment {
    if pred.action_type() != gold.action_type() {
        return StepJudgment::new(false, false, format!("type {} vs {}", pred.action_type().as_str(), gold.action_type().as_str()));
    }
    match (pred, gold) {
        (Action::Click { x: px, y: py }, Action::Click { x: gx, y: gy }) => {
            let dx = *px as f64 - *gx as f64;
            let dy = *py as f64 - *gy as f64;
            let distance = (dx * dx + dy * dy).sqrt();
            let radius = CLICK_TOLERANCE * screen_width as f64;
            let ok = distance <= radius;
            StepJudgment::new(true, ok, format!("click distance {distance:.1} vs radius {radius:.1}"))
        }
        (Action::Type { text: p }, Action::Type { text: g }) => {
            let f1 = token_f1(p, g);
            StepJudgment::new(true, f1 > TYPE_F1_THRESHOLD, format!("type f1 {f1:.3}"))
        }
        (Action::Swipe { direction: p }, Action::Swipe { direction: g }) => {
            StepJudgment::new(true, p == g, format!("swipe {} vs {}", p.as_str(), g.as_str()))
        }
        _ => StepJudgment::new(true, true, "type match"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub task_id: String,
    pub step_index: usize,
    pub action: Action,
}

/// Step totals for one report cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub total: usize,
    pub type_matched: usize,
    pub matched: usize,
}

impl Cell {
    fn add(&mut self, other: Cell) {
        self.total += other.total;
        self.type_matched += other.type_matched;
        self.matched += other.matched;
    }

    pub fn accuracy(&self) -> Accuracy {
        let ratio = |n: usize| if self.total == 0 { 0.0 } else { n as f64 / self.total as f64 };
        Accuracy {
            type_acc: ratio(self.type_matched),
            match_acc: ratio(self.matched),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    #[serde(rename = "type")]
    pub type_acc: f64,
    #[serde(rename = "match")]
    pub match_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub overall: Cell,
    pub per_app: BTreeMap<String, Cell>,
    pub per_quadrant: BTreeMap<Quadrant, Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Accuracy,
    pub per_app: BTreeMap<String, Accuracy>,
    pub per_quadrant: BTreeMap<Quadrant, Accuracy>,
    pub counts: Counts,
}

impl EvalReport {
    fn from_counts(counts: Counts) -> Self {
        Self {
            overall: counts.overall.accuracy(),
            per_app: counts.per_app.iter().map(|(k, c)| (k.clone(), c.accuracy())).collect(),
            per_quadrant: counts.per_quadrant.iter().map(|(k, c)| (*k, c.accuracy())).collect(),
            counts,
        }
    }

    /// Average first, then one column per app; then the quadrant breakdown.
    pub fn render_text(&self) -> String {
        let pct = |v: f64| format!("{:.1}", v * 100.0);
        let mut header = vec!["Metric".to_string(), "Average".to_string()];
        header.extend(self.per_app.keys().cloned());
        let row = |name: &str, pick: fn(&Accuracy) -> f64| {
            let mut r = vec![name.to_string(), pct(pick(&self.overall))];
            r.extend(self.per_app.values().map(|a| pct(pick(a))));
            r
        };
        let mut steps = vec!["Steps".to_string(), self.counts.overall.total.to_string()];
        steps.extend(self.counts.per_app.values().map(|c| c.total.to_string()));
        let mut out = align(&[
            header,
            row("Type acc %", |a| a.type_acc),
            row("Match acc %", |a| a.match_acc),
            steps,
        ]);
        if !self.per_quadrant.is_empty() {
            let mut rows = vec![vec![
                "Quadrant".to_string(),
                "Steps".to_string(),
                "Type acc %".to_string(),
                "Match acc %".to_string(),
            ]];
            for (q, a) in &self.per_quadrant {
                rows.push(vec![
                    q.as_str().to_string(),
                    self.counts.per_quadrant[q].total.to_string(),
                    pct(a.type_acc),
                    pct(a.match_acc),
                ]);
            }
            out.push('\n');
            out.push_str(&align(&rows));
        }
        out
    }
}

/// Scores predictions against gold steps. Gold steps without a prediction
/// count as mismatches.
pub fn evaluate_offline(
    predictions: &[Prediction],
    gold: &[Trajectory],
    combos: Option<&[KShotCombo]>,
) -> Result<EvalReport, EvalError> {
    let mut by_task: HashMap<&str, usize> = HashMap::with_capacity(gold.len());
    for (i, t) in gold.iter().enumerate() {
        if by_task.insert(t.task_id.as_str(), i).is_some() {
            return Err(EvalError::DuplicateTask(t.task_id.clone()));
        }
    }
    let mut keyed: Vec<HashMap<usize, &Action>> = vec![HashMap::new(); gold.len()];
    for p in predictions {
        let &i = by_task
            .get(p.task_id.as_str())
            .ok_or_else(|| EvalError::UnknownTask(p.task_id.clone()))?;
        if p.step_index >= gold[i].steps.len() {
            return Err(EvalError::UnknownStep {
                task_id: p.task_id.clone(),
                step_index: p.step_index,
            });
        }
        if keyed[i].insert(p.step_index, &p.action).is_some() {
            return Err(EvalError::DuplicatePrediction {
                task_id: p.task_id.clone(),
                step_index: p.step_index,
            });
        }
    }
    let quadrant_of: HashMap<&str, Quadrant> = combos
        .unwrap_or_default()
        .iter()
        .rev()
        .map(|c| (c.query_task_id.as_str(), c.profile.quadrant))
        .collect();

    let per_task: Vec<Cell> = gold
        .par_iter()
        .zip(keyed.par_iter())
        .map(|(t, preds)| {
            let mut cell = Cell::default();
            for (j, step) in t.steps.iter().enumerate() {
                cell.total += 1;
                if let Some(pred) = preds.get(&j) {
                    let judgment = judge_step(pred, &step.action, t.screen_width);
                    cell.type_matched += judgment.type_match as usize;
                    cell.matched += judgment.full_match as usize;
                }
            }
            cell
        })
        .collect();

    let mut counts = Counts {
        overall: Cell::default(),
        per_app: BTreeMap::new(),
        per_quadrant: BTreeMap::new(),
    };
    for (t, cell) in gold.iter().zip(per_task) {
        counts.overall.add(cell);
        counts.per_app.entry(t.app.clone()).or_default().add(cell);
        if let Some(q) = quadrant_of.get(t.task_id.as_str()) {
            counts.per_quadrant.entry(*q).or_default().add(cell);
        }
    }
    Ok(EvalReport::from_counts(counts))
}

/// Predictions from episode results, one per predicted step.
pub fn predictions_from_episodes(results: &[EpisodeResult]) -> Vec<Prediction> {
    results
        .iter()
        .flat_map(|r| {
            r.predicted.steps.iter().map(move |s| Prediction {
                task_id: r.task_id.clone(),
                step_index: s.index,
                action: s.action.clone(),
            })
        })
        .collect()
}

/// Fraction of episodes that ended by TASK_COMPLETE with every step
/// matching gold.
pub fn replay_success_rate(results: &[EpisodeResult], gold: &[Trajectory]) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    if results.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            results: results.len(),
            gold: gold.len(),
        });
    }
    let by_task: HashMap<&str, &Trajectory> = gold.iter().map(|t| (t.task_id.as_str(), t)).collect();
    let mut seen = HashSet::new();
    let mut successes = 0usize;
    for r in results {
        let t = by_task
            .get(r.task_id.as_str())
            .ok_or_else(|| EvalError::UnknownTask(r.task_id.clone()))?;
        if !seen.insert(r.task_id.as_str()) {
            return Err(EvalError::DuplicateTask(r.task_id.clone()));
        }
        let all_match = r.predicted.steps.len() == t.steps.len()
            && r
                .predicted
                .steps
                .iter()
                .zip(&t.steps)
                .all(|(p, g)| judge_step(&p.action, &g.action, t.screen_width).full_match);
        if r.terminated_by == Termination::TaskComplete && all_match {
            successes += 1;
        }
    }
    Ok(successes as f64 / results.len() as f64)
}
