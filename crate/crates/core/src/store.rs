//! JSONL persistence for trajectories, knowledge bases and k-shot combos.
//!
//! Every file is UTF-8 JSON Lines, one record per line. Blank lines are
//! skipped but still counted, so error line numbers match an editor's view.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::action::{parse_action, Action};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error at line {line}, field `{field}`: {detail}")]
    Schema {
        line: usize,
        field: String,
        detail: String,
    },
}

impl StoreError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn schema(line: usize, field: impl Into<String>, detail: impl Into<String>) -> Self {
        Self::Schema {
            line,
            field: field.into(),
            detail: detail.into(),
        }
    }

    /// `(line, field)` for schema errors.
    pub fn schema_location(&self) -> Option<(usize, &str)> {
        match self {
            Self::Schema { line, field, .. } => Some((*line, field.as_str())),
            Self::Io { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub screenshot: PathBuf,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    #[serde(default)]
    pub app: String,
    pub instruction: String,
    pub steps: Vec<Step>,
    pub screen_width: u32,
    pub screen_height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ui_trees: Option<Vec<String>>,
}

impl Trajectory {
    pub fn actions(&self) -> impl Iterator<Item = &Action> {
        self.steps.iter().map(|s| &s.action)
    }
}

/// A step as found in a source corpus, before the action is standardized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawStep {
    pub index: usize,
    pub screenshot: PathBuf,
    pub action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTrajectory {
    pub task_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub app: Option<String>,
    pub instruction: String,
    pub steps: Vec<RawStep>,
    pub screen_width: u32,
    pub screen_height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ui_trees: Option<Vec<String>>,
}

/// Demonstration knowledge: the instruction, its canonical actions and one
/// natural-language description per action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub entry_id: String,
    pub instruction: String,
    pub actions: Vec<String>,
    pub descriptions: Vec<String>,
    pub app: String,
    pub source_task_id: String,
}

impl KnowledgeEntry {
    pub fn parsed_actions(&self) -> Result<Vec<Action>, crate::action::MalformedAction> {
        self.actions.iter().map(|a| parse_action(a)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quadrant {
    #[serde(rename = "UI_SH_Act_SH")]
    UiHighActHigh,
    #[serde(rename = "UI_SH_Act_SL")]
    UiHighActLow,
    #[serde(rename = "UI_SL_Act_SH")]
    UiLowActHigh,
    #[serde(rename = "UI_SL_Act_SL")]
    UiLowActLow,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Self::UiHighActHigh,
        Self::UiHighActLow,
        Self::UiLowActHigh,
        Self::UiLowActLow,
    ];

    pub fn from_levels(ui_high: bool, act_high: bool) -> Self {
        match (ui_high, act_high) {
            (true, true) => Self::UiHighActHigh,
            (true, false) => Self::UiHighActLow,
            (false, true) => Self::UiLowActHigh,
            (false, false) => Self::UiLowActLow,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::UiHighActHigh => "UI_SH_Act_SH",
            Self::UiHighActLow => "UI_SH_Act_SL",
            Self::UiLowActHigh => "UI_SL_Act_SH",
            Self::UiLowActLow => "UI_SL_Act_SL",
        }
    }
}

impl fmt::Display for Quadrant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityProfile {
    pub instruction_sim: f64,
    pub ui_sim: f64,
    pub action_sim: f64,
    pub quadrant: Quadrant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KShotCombo {
    pub query_task_id: String,
    pub support_task_ids: Vec<String>,
    pub k: usize,
    pub profile: SimilarityProfile,
}

/// Describes one built split on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub k: Vec<usize>,
    pub trajectories: PathBuf,
    /// Combos file per k, keyed by the decimal k.
    pub combos: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_base: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<PathBuf>,
}

/// Reads non-blank lines as `(1-based line number, json value)`.
fn read_values(path: &Path) -> Result<Vec<(usize, Value)>, StoreError> {
    let file = File::open(path).map_err(|e| StoreError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| StoreError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line)
            .map_err(|e| StoreError::schema(i + 1, "<record>", e.to_string()))?;
        out.push((i + 1, value));
    }
    Ok(out)
}

fn require_fields(line: usize, value: &Value, prefix: &str, fields: &[&str]) -> Result<(), StoreError> {
    let obj = value
        .as_object()
        .ok_or_else(|| StoreError::schema(line, prefix_or(prefix, "<record>"), "expected a JSON object"))?;
    for field in fields {
        match obj.get(*field) {
            None | Some(Value::Null) => {
                return Err(StoreError::schema(
                    line,
                    format!("{prefix}{field}"),
                    "missing required field",
                ))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

fn prefix_or(prefix: &str, fallback: &str) -> String {
    if prefix.is_empty() {
        fallback.to_string()
    } else {
        prefix.trim_end_matches('.').to_string()
    }
}

fn decode<T: DeserializeOwned>(line: usize, value: Value) -> Result<T, StoreError> {
    serde_json::from_value(value).map_err(|e| StoreError::schema(line, "<record>", e.to_string()))
}

/// Generic typed JSONL reader without invariant checks.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    read_values(path)?
        .into_iter()
        .map(|(line, value)| decode(line, value))
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), StoreError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| StoreError::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| StoreError::io(path, e))?;
    let mut writer = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).expect("records serialize to JSON");
        writeln!(writer, "{line}").map_err(|e| StoreError::io(path, e))?;
    }
    writer.flush().map_err(|e| StoreError::io(path, e))
}

const TRAJECTORY_FIELDS: [&str; 5] = ["task_id", "instruction", "steps", "screen_width", "screen_height"];
const STEP_FIELDS: [&str; 3] = ["index", "screenshot", "action"];

fn check_raw_shape(line: usize, value: &Value) -> Result<(), StoreError> {
    require_fields(line, value, "", &TRAJECTORY_FIELDS)?;
    let steps = value["steps"]
        .as_array()
        .ok_or_else(|| StoreError::schema(line, "steps", "expected an array"))?;
    for (i, step) in steps.iter().enumerate() {
        require_fields(line, step, &format!("steps[{i}]."), &STEP_FIELDS)?;
    }
    Ok(())
}

fn check_raw_invariants(line: usize, raw: &RawTrajectory) -> Result<(), StoreError> {
    if raw.steps.is_empty() {
        return Err(StoreError::schema(line, "steps", "trajectory has no steps"));
    }
    if raw.screen_width == 0 {
        return Err(StoreError::schema(line, "screen_width", "must be positive"));
    }
    if raw.screen_height == 0 {
        return Err(StoreError::schema(line, "screen_height", "must be positive"));
    }
    for (i, step) in raw.steps.iter().enumerate() {
        if step.index != i {
            return Err(StoreError::schema(
                line,
                format!("steps[{i}].index"),
                format!("expected {i}, found {}", step.index),
            ));
        }
        if step.screenshot.as_os_str().is_empty() {
            return Err(StoreError::schema(
                line,
                format!("steps[{i}].screenshot"),
                "screenshot path is empty",
            ));
        }
    }
    if let Some(trees) = &raw.ui_trees {
        if trees.len() != raw.steps.len() {
            return Err(StoreError::schema(
                line,
                "ui_trees",
                format!("{} trees for {} steps", trees.len(), raw.steps.len()),
            ));
        }
    }
    Ok(())
}

fn resolve_screenshots(base: Option<&Path>, steps: &mut [RawStep]) {
    let Some(base) = base else { return };
    for step in steps {
        if step.screenshot.is_relative() {
            step.screenshot = base.join(&step.screenshot);
        }
    }
}

fn base_dir(path: &Path) -> Option<&Path> {
    path.parent().filter(|p| !p.as_os_str().is_empty())
}

/// Loads a source corpus whose actions are not yet standardized.
pub fn load_raw_trajectories(path: &Path) -> Result<Vec<RawTrajectory>, StoreError> {
    let base = base_dir(path);
    read_values(path)?
        .into_iter()
        .map(|(line, value)| {
            check_raw_shape(line, &value)?;
            let mut raw: RawTrajectory = decode(line, value)?;
            check_raw_invariants(line, &raw)?;
            resolve_screenshots(base, &mut raw.steps);
            Ok(raw)
        })
        .collect()
}

/// Converts a raw record into a trajectory, parsing each action canonically.
pub fn trajectory_from_raw(line: usize, raw: RawTrajectory) -> Result<Trajectory, StoreError> {
    let steps = raw
        .steps
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let action = parse_action(&s.action).map_err(|e| {
                StoreError::schema(line, format!("steps[{i}].action"), e.to_string())
            })?;
            Ok(Step {
                index: s.index,
                screenshot: s.screenshot,
                action,
                description: s.description,
            })
        })
        .collect::<Result<Vec<_>, StoreError>>()?;
    Ok(Trajectory {
        task_id: raw.task_id,
        app: raw.app.unwrap_or_default(),
        instruction: raw.instruction,
        steps,
        screen_width: raw.screen_width,
        screen_height: raw.screen_height,
        ui_trees: raw.ui_trees,
    })
}

/// Loads gold trajectories, validating every invariant.
///
/// Relative screenshot paths are resolved against the file's directory.
/// Gold trajectories must end with `TASK_COMPLETE`.
pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>, StoreError> {
    let base = base_dir(path);
    read_values(path)?
        .into_iter()
        .map(|(line, value)| {
            check_raw_shape(line, &value)?;
            let mut raw: RawTrajectory = decode(line, value)?;
            check_raw_invariants(line, &raw)?;
            resolve_screenshots(base, &mut raw.steps);
            let trajectory = trajectory_from_raw(line, raw)?;
            let last = trajectory.steps.len() - 1;
            if !trajectory.steps[last].action.is_terminal() {
                return Err(StoreError::schema(
                    line,
                    format!("steps[{last}].action"),
                    "gold trajectory must end with TASK_COMPLETE",
                ));
            }
            Ok(trajectory)
        })
        .collect()
}

pub fn save_trajectories(trajectories: &[Trajectory], path: &Path) -> Result<(), StoreError> {
    write_jsonl(path, trajectories)
}

fn check_entry(line: usize, entry: &KnowledgeEntry) -> Result<(), StoreError> {
    if entry.actions.is_empty() {
        return Err(StoreError::schema(line, "actions", "entry has no actions"));
    }
    if entry.actions.len() != entry.descriptions.len() {
        return Err(StoreError::schema(
            line,
            "descriptions",
            format!(
                "{} descriptions for {} actions",
                entry.descriptions.len(),
                entry.actions.len()
            ),
        ));
    }
    for (i, action) in entry.actions.iter().enumerate() {
        parse_action(action)
            .map_err(|e| StoreError::schema(line, format!("actions[{i}]"), e.to_string()))?;
    }
    Ok(())
}

pub fn save_knowledge_base(entries: &[KnowledgeEntry], path: &Path) -> Result<(), StoreError> {
    for (i, entry) in entries.iter().enumerate() {
        check_entry(i + 1, entry)?;
    }
    write_jsonl(path, entries)
}

pub fn load_knowledge_base(path: &Path) -> Result<Vec<KnowledgeEntry>, StoreError> {
    read_values(path)?
        .into_iter()
        .map(|(line, value)| {
            require_fields(
                line,
                &value,
                "",
                &["entry_id", "instruction", "actions", "descriptions", "app", "source_task_id"],
            )?;
            let entry: KnowledgeEntry = decode(line, value)?;
            check_entry(line, &entry)?;
            Ok(entry)
        })
        .collect()
}

pub fn save_combos(combos: &[KShotCombo], path: &Path) -> Result<(), StoreError> {
    write_jsonl(path, combos)
}

pub fn load_combos(path: &Path) -> Result<Vec<KShotCombo>, StoreError> {
    let combos: Vec<KShotCombo> = read_jsonl(path)?;
    for (i, combo) in combos.iter().enumerate() {
        if combo.support_task_ids.len() != combo.k {
            return Err(StoreError::schema(
                i + 1,
                "support_task_ids",
                format!("expected {} supports", combo.k),
            ));
        }
    }
    Ok(combos)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), StoreError> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(path, text + "\n").map_err(|e| StoreError::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, StoreError> {
    let text = std::fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| StoreError::schema(1, "<manifest>", e.to_string()))
}

/// Pixel dimensions of a PNG or JPEG without decoding the raster.
pub fn probe_dimensions(path: &Path) -> Result<(u32, u32), image::ImageError> {
    image::image_dimensions(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::SwipeDirection;
    use proptest::prelude::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, body).unwrap();
        path
    }

    const VALID: &str = r#"{"task_id":"t1","app":"Gmail","instruction":"open inbox","steps":[{"index":0,"screenshot":"s0.png","action":"CLICK[1,2]"},{"index":1,"screenshot":"s1.png","action":"TASK_COMPLETE[]"}],"screen_width":1080,"screen_height":2400}"#;

    #[test]
    fn loads_valid_lines_and_resolves_screenshots() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{VALID}\n\n{}\n", VALID.replace("\"t1\"", "\"t2\""));
        let path = write(dir.path(), "gold.jsonl", &body);
        let loaded = load_trajectories(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].task_id, "t1");
        assert_eq!(loaded[1].task_id, "t2");
        assert_eq!(loaded[0].steps[0].screenshot, dir.path().join("s0.png"));
        assert_eq!(loaded[0].steps[0].action, Action::click(1, 2));
    }

    #[test]
    fn missing_instruction_names_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let line = VALID.replace("\"instruction\":\"open inbox\",", "");
        let path = write(dir.path(), "gold.jsonl", &line);
        let err = load_trajectories(&path).unwrap_err();
        assert_eq!(err.schema_location(), Some((1, "instruction")));
    }

    #[test]
    fn empty_file_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "gold.jsonl", "");
        assert!(load_trajectories(&path).unwrap().is_empty());
    }

    #[test]
    fn invariant_violations_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            (VALID.replace("\"index\":1", "\"index\":5"), "steps[1].index"),
            (VALID.replace("\"s1.png\"", "\"\""), "steps[1].screenshot"),
            (VALID.replace("TASK_COMPLETE[]", "PRESS_BACK"), "steps[1].action"),
            (VALID.replace("CLICK[1,2]", "CLICK[x]"), "steps[0].action"),
            (VALID.replace("1080", "0"), "screen_width"),
            (
                VALID.replace(r#""screen_width""#, r#""ui_trees":["a"],"screen_width""#),
                "ui_trees",
            ),
        ];
        for (body, field) in cases {
            let path = write(dir.path(), "bad.jsonl", &format!("\n{body}"));
            let err = load_trajectories(&path).unwrap_err();
            assert_eq!(err.schema_location(), Some((2, field)), "{body}");
        }
        let path = write(
            dir.path(),
            "nosteps.jsonl",
            r#"{"task_id":"t","instruction":"i","steps":[],"screen_width":1,"screen_height":1}"#,
        );
        assert_eq!(
            load_trajectories(&path).unwrap_err().schema_location(),
            Some((1, "steps"))
        );
        let path = write(dir.path(), "junk.jsonl", "not json");
        assert_eq!(
            load_trajectories(&path).unwrap_err().schema_location(),
            Some((1, "<record>"))
        );
    }

    fn entry(id: &str) -> KnowledgeEntry {
        KnowledgeEntry {
            entry_id: id.to_string(),
            instruction: format!("instruction {id}"),
            actions: vec!["CLICK[1,2]".into(), "TASK_COMPLETE[]".into()],
            descriptions: vec![
                "On Home Screen, tap 'Mail' icon, to open mail".into(),
                "On Inbox Screen, complete task, inbox shown".into(),
            ],
            app: "Gmail".into(),
            source_task_id: id.to_string(),
        }
    }

    #[test]
    fn knowledge_base_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        let entries = vec![entry("a"), entry("b"), entry("c")];
        save_knowledge_base(&entries, &path).unwrap();
        assert_eq!(load_knowledge_base(&path).unwrap(), entries);
    }

    #[test]
    fn knowledge_base_rejects_misaligned_entry() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        let mut bad = entry("a");
        bad.descriptions.pop();
        assert!(matches!(
            save_knowledge_base(&[bad.clone()], &path),
            Err(StoreError::Schema { .. })
        ));
        write_jsonl(&path, &[bad]).unwrap();
        let err = load_knowledge_base(&path).unwrap_err();
        assert_eq!(err.schema_location(), Some((1, "descriptions")));
    }

    #[test]
    fn missing_knowledge_base_is_io_error() {
        let err = load_knowledge_base(Path::new("/nonexistent/kb.jsonl")).unwrap_err();
        assert!(matches!(err, StoreError::Io { .. }));
    }

    fn arb_text() -> impl Strategy<Value = String> {
        "[a-zA-Z0-9 ,'\\[\\]\\-]{0,16}"
    }

    fn arb_trajectory() -> impl Strategy<Value = Trajectory> {
        (
            arb_text(),
            arb_text(),
            prop::collection::vec(crate::action::tests::arb_action(), 1..6),
            1u32..5000,
            1u32..5000,
            any::<bool>(),
        )
            .prop_map(|(id, instruction, actions, w, h, trees)| {
                let n = actions.len();
                Trajectory {
                    task_id: id,
                    app: "App".into(),
                    instruction,
                    steps: actions
                        .into_iter()
                        .enumerate()
                        .map(|(i, action)| Step {
                            index: i,
                            screenshot: PathBuf::from(format!("/s/{i}.png")),
                            action,
                            description: (i % 2 == 0).then(|| format!("d{i}")),
                        })
                        .collect(),
                    screen_width: w,
                    screen_height: h,
                    ui_trees: trees.then(|| (0..n).map(|i| format!("<node i={i}/>")).collect()),
                }
            })
    }

    fn arb_profile() -> impl Strategy<Value = SimilarityProfile> {
        (-1.0f64..=1.0, 0.0f64..=1.0, -1.0f64..=1.0, 0usize..4).prop_map(|(i, u, a, q)| {
            SimilarityProfile {
                instruction_sim: i,
                ui_sim: u,
                action_sim: a,
                quadrant: Quadrant::ALL[q],
            }
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn json_round_trip_all_record_types(
            t in arb_trajectory(),
            p in arb_profile(),
            supports in prop::collection::vec(arb_text(), 1..4),
        ) {
            let back: Trajectory = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
            prop_assert_eq!(&back, &t);
            let back: SimilarityProfile = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
            prop_assert_eq!(back, p);
            let combo = KShotCombo { query_task_id: "q".into(), k: supports.len(), support_task_ids: supports, profile: p };
            let back: KShotCombo = serde_json::from_str(&serde_json::to_string(&combo).unwrap()).unwrap();
            prop_assert_eq!(&back, &combo);
            let e = KnowledgeEntry {
                entry_id: t.task_id.clone(),
                instruction: t.instruction.clone(),
                actions: t.actions().map(|a| a.to_string()).collect(),
                descriptions: t.steps.iter().map(|s| format!("d{}", s.index)).collect(),
                app: t.app.clone(),
                source_task_id: t.task_id.clone(),
            };
            let back: KnowledgeEntry = serde_json::from_str(&serde_json::to_string(&e).unwrap()).unwrap();
            prop_assert_eq!(back, e);
        }
    }

    #[test]
    fn file_round_trip_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let trajectories: Vec<Trajectory> = (0..4)
            .map(|i| Trajectory {
                task_id: format!("t{i}"),
                app: "A".into(),
                instruction: "swipe".into(),
                steps: vec![
                    Step {
                        index: 0,
                        screenshot: dir.path().join("a.png"),
                        action: Action::swipe(SwipeDirection::Up),
                        description: None,
                    },
                    Step {
                        index: 1,
                        screenshot: dir.path().join("b.png"),
                        action: Action::task_complete(Some("x")),
                        description: None,
                    },
                ],
                screen_width: 10,
                screen_height: 20,
                ui_trees: None,
            })
            .collect();
        save_trajectories(&trajectories, &path).unwrap();
        assert_eq!(load_trajectories(&path).unwrap(), trajectories);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let manifest = DatasetManifest {
            split: "test".into(),
            k: vec![1, 2],
            trajectories: "t.jsonl".into(),
            combos: [("1".to_string(), PathBuf::from("c1.jsonl"))].into_iter().collect(),
            similarity: None,
            knowledge_base: None,
            stats: Some("stats.json".into()),
        };
        save_manifest(&manifest, &path).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), manifest);
    }
}
