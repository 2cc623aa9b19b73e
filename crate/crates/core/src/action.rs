//! The unified mobile action space and its text grammar.
//!
//! Canonical forms:
//!
//! ```text
//! CLICK[x,y]  TYPE[text]  SWIPE[UP|DOWN|LEFT|RIGHT]
//! PRESS_HOME  PRESS_BACK  PRESS_ENTER  TASK_COMPLETE[answer]
//! ```
//!
//! Keywords and directions parse case-insensitively and always render
//! uppercase. Bracketed payloads run from the first `[` to the final `]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed action {text:?}: {reason}")]
pub struct MalformedAction {
    pub text: String,
    pub reason: String,
}

impl MalformedAction {
    fn new(text: &str, reason: impl Into<String>) -> Self {
        Self {
            text: text.to_string(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SwipeDirection {
    Up,
    Down,
    Left,
    Right,
}

impl SwipeDirection {
    pub const ALL: [SwipeDirection; 4] = [Self::Up, Self::Down, Self::Left, Self::Right];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Up => "UP",
            Self::Down => "DOWN",
            Self::Left => "LEFT",
            Self::Right => "RIGHT",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s.trim()))
    }
}

impl fmt::Display for SwipeDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One element of the action space.
///
/// `TaskComplete` stores its answer as a plain string where the empty string
/// means "no answer", so `TASK_COMPLETE[]` has exactly one representation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Action {
    Click { x: u32, y: u32 },
    Type { text: String },
    Swipe { direction: SwipeDirection },
    PressHome,
    PressBack,
    PressEnter,
    TaskComplete { answer: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionType {
    Click,
    Type,
    Swipe,
    PressHome,
    PressBack,
    PressEnter,
    TaskComplete,
}

impl ActionType {
    pub const ALL: [ActionType; 7] = [
        Self::Click,
        Self::Type,
        Self::Swipe,
        Self::PressHome,
        Self::PressBack,
        Self::PressEnter,
        Self::TaskComplete,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Click => "CLICK",
            Self::Type => "TYPE",
            Self::Swipe => "SWIPE",
            Self::PressHome => "PRESS_HOME",
            Self::PressBack => "PRESS_BACK",
            Self::PressEnter => "PRESS_ENTER",
            Self::TaskComplete => "TASK_COMPLETE",
        }
    }
}

impl fmt::Display for ActionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Action {
    pub fn click(x: u32, y: u32) -> Self {
        Self::Click { x, y }
    }

    pub fn type_text(text: impl Into<String>) -> Self {
        Self::Type { text: text.into() }
    }

    pub fn swipe(direction: SwipeDirection) -> Self {
        Self::Swipe { direction }
    }

    pub fn task_complete(answer: Option<&str>) -> Self {
        Self::TaskComplete {
            answer: answer.unwrap_or_default().to_string(),
        }
    }

    pub fn action_type(&self) -> ActionType {
        match self {
            Self::Click { .. } => ActionType::Click,
            Self::Type { .. } => ActionType::Type,
            Self::Swipe { .. } => ActionType::Swipe,
            Self::PressHome => ActionType::PressHome,
            Self::PressBack => ActionType::PressBack,
            Self::PressEnter => ActionType::PressEnter,
            Self::TaskComplete { .. } => ActionType::TaskComplete,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, Self::TaskComplete { .. })
    }

    /// Answer carried by a `TaskComplete`, `None` when absent or empty.
    pub fn answer(&self) -> Option<&str> {
        match self {
            Self::TaskComplete { answer } if !answer.is_empty() => Some(answer),
            _ => None,
        }
    }

    pub fn render(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Click { x, y } => write!(f, "CLICK[{x},{y}]"),
            Self::Type { text } => write!(f, "TYPE[{text}]"),
            Self::Swipe { direction } => write!(f, "SWIPE[{direction}]"),
            Self::PressHome => f.write_str("PRESS_HOME"),
            Self::PressBack => f.write_str("PRESS_BACK"),
            Self::PressEnter => f.write_str("PRESS_ENTER"),
            Self::TaskComplete { answer } => write!(f, "TASK_COMPLETE[{answer}]"),
        }
    }
}

impl FromStr for Action {
    type Err = MalformedAction;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_action(s)
    }
}

impl Serialize for Action {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        parse_action(&raw).map_err(serde::de::Error::custom)
    }
}

/// Canonical text of an action.
pub fn render_action(action: &Action) -> String {
    action.to_string()
}

fn strip_wrapping(text: &str) -> &str {
    let trimmed = text.trim_matches(|c: char| c.is_ascii_whitespace());
    let unquoted = if trimmed.len() >= 2 && trimmed.starts_with('"') && trimmed.ends_with('"') {
        &trimmed[1..trimmed.len() - 1]
    } else {
        trimmed
    };
    unquoted.trim_matches(|c: char| c.is_ascii_whitespace())
}

/// Splits `KEYWORD[payload]` into the keyword and an optional payload.
fn split_keyword(body: &str) -> (&str, Option<&str>, &str) {
    let end = body
        .find(|c: char| !(c.is_ascii_alphabetic() || c == '_'))
        .unwrap_or(body.len());
    let (keyword, rest) = body.split_at(end);
    let rest_trimmed = rest.trim_start_matches(|c: char| c.is_ascii_whitespace());
    if let (Some(stripped), true) = (rest_trimmed.strip_prefix('['), rest_trimmed.ends_with(']')) {
        (keyword, Some(&stripped[..stripped.len() - 1]), "")
    } else {
        (keyword, None, rest)
    }
}

fn parse_coordinate(original: &str, raw: &str) -> Result<u32, MalformedAction> {
    let raw = raw.trim();
    if raw.starts_with('-') {
        return Err(MalformedAction::new(
            original,
            format!("negative coordinate {raw:?}"),
        ));
    }
    if raw.is_empty() || !raw.bytes().all(|b| b.is_ascii_digit()) {
        return Err(MalformedAction::new(
            original,
            format!("coordinate {raw:?} is not a non-negative integer"),
        ));
    }
    raw.parse::<u32>()
        .map_err(|_| MalformedAction::new(original, format!("coordinate {raw:?} out of range")))
}

/// Parses one candidate action string.
///
/// Surrounding ASCII whitespace and one pair of wrapping double quotes are
/// tolerated, as is whitespace between the keyword and its bracket.
pub fn parse_action(text: &str) -> Result<Action, MalformedAction> {
    let body = strip_wrapping(text);
    if body.is_empty() {
        return Err(MalformedAction::new(text, "empty action"));
    }
    let (keyword, payload, trailing) = split_keyword(body);
    let keyword = keyword.to_ascii_uppercase();

    let missing = || MalformedAction::new(text, format!("{keyword} requires a bracketed argument"));

    let action = match keyword.as_str() {
        "CLICK" => {
            let payload = payload.ok_or_else(missing)?;
            let parts: Vec<&str> = payload.split(',').collect();
            if parts.len() != 2 {
                return Err(MalformedAction::new(
                    text,
                    "CLICK takes exactly two coordinates",
                ));
            }
            Action::Click {
                x: parse_coordinate(text, parts[0])?,
                y: parse_coordinate(text, parts[1])?,
            }
        }
        "TYPE" => Action::Type {
            text: payload.ok_or_else(missing)?.to_string(),
        },
        "SWIPE" => {
            let payload = payload.ok_or_else(missing)?;
            let direction = SwipeDirection::parse(payload).ok_or_else(|| {
                MalformedAction::new(text, format!("unknown swipe direction {payload:?}"))
            })?;
            Action::Swipe { direction }
        }
        "TASK_COMPLETE" => Action::TaskComplete {
            answer: payload.ok_or_else(missing)?.to_string(),
        },
        "PRESS_HOME" | "PRESS_BACK" | "PRESS_ENTER" => {
            let bare = trailing.trim().is_empty() && payload.is_none_or(|p| p.trim().is_empty());
            if !bare {
                return Err(MalformedAction::new(
                    text,
                    format!("{keyword} takes no argument"),
                ));
            }
            match keyword.as_str() {
                "PRESS_HOME" => Action::PressHome,
                "PRESS_BACK" => Action::PressBack,
                _ => Action::PressEnter,
            }
        }
        "" => return Err(MalformedAction::new(text, "missing action keyword")),
        other => {
            return Err(MalformedAction::new(
                text,
                format!("unknown action keyword {other:?}"),
            ))
        }
    };
    if payload.is_none() && !trailing.trim().is_empty() {
        return Err(MalformedAction::new(text, "unexpected trailing text"));
    }
    Ok(action)
}

/// Outcome of standardizing a legacy dataset action.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LegacyAction {
    /// Already canonical.
    Keep(Action),
    /// Rewritten into the canonical space (bare `TASK_COMPLETE`, swipes with coordinates).
    Upgraded(Action),
    /// `TASK_IMPOSSIBLE`: the containing task must be excluded.
    Drop,
}

impl LegacyAction {
    pub fn action(&self) -> Option<&Action> {
        match self {
            Self::Keep(a) | Self::Upgraded(a) => Some(a),
            Self::Drop => None,
        }
    }
}

/// Maps a raw record from a source corpus into the unified action space.
pub fn normalize_legacy(raw: &str) -> Result<LegacyAction, MalformedAction> {
    let body = strip_wrapping(raw);
    let (keyword, payload, trailing) = split_keyword(body);
    let keyword = keyword.to_ascii_uppercase();
    match keyword.as_str() {
        "TASK_IMPOSSIBLE" => Ok(LegacyAction::Drop),
        "TASK_COMPLETE" if payload.is_none() && trailing.trim().is_empty() => {
            Ok(LegacyAction::Upgraded(Action::task_complete(None)))
        }
        "SWIPE" => match payload {
            // Legacy swipes may carry start coordinates next to the direction;
            // only the direction survives.
            Some(p) if p.contains(',') => {
                let directions: Vec<SwipeDirection> =
                    p.split(',').filter_map(SwipeDirection::parse).collect();
                match directions.as_slice() {
                    [direction] => Ok(LegacyAction::Upgraded(Action::swipe(*direction))),
                    _ => Err(MalformedAction::new(
                        raw,
                        "legacy swipe must name exactly one direction",
                    )),
                }
            }
            _ => parse_action(raw).map(LegacyAction::Keep),
        },
        _ => parse_action(raw).map(LegacyAction::Keep),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_reference_examples() {
        assert_eq!(parse_action("CLICK[156,2067]").unwrap(), Action::click(156, 2067));
        assert_eq!(parse_action("TYPE[Rome]").unwrap(), Action::type_text("Rome"));
        assert_eq!(
            parse_action("TASK_COMPLETE[]").unwrap(),
            Action::task_complete(None)
        );
        assert_eq!(
            parse_action("TASK_COMPLETE[1h30m]").unwrap().answer(),
            Some("1h30m")
        );
    }

    #[test]
    fn renders_canonical_text() {
        assert_eq!(render_action(&Action::click(156, 2067)), "CLICK[156,2067]");
        assert_eq!(
            render_action(&Action::task_complete(Some("1h30m"))),
            "TASK_COMPLETE[1h30m]"
        );
        assert_eq!(render_action(&Action::PressBack), "PRESS_BACK");
        assert_eq!(render_action(&Action::task_complete(Some(""))), "TASK_COMPLETE[]");
        assert_eq!(Action::task_complete(Some("")), Action::task_complete(None));
    }

    #[test]
    fn rejects_bad_swipe_direction() {
        let err = parse_action("SWIPE[DIAGONAL]").unwrap_err();
        assert_eq!(err.text, "SWIPE[DIAGONAL]");
        assert!(err.reason.contains("DIAGONAL"));
    }

    #[test]
    fn tolerates_quotes_whitespace_and_case() {
        assert_eq!(
            parse_action("  \"SWIPE[UP]\"\n").unwrap(),
            Action::swipe(SwipeDirection::Up)
        );
        assert_eq!(
            parse_action("click[ 3 , 4 ]").unwrap(),
            Action::click(3, 4)
        );
        assert_eq!(
            parse_action("SWIPE [down]").unwrap(),
            Action::swipe(SwipeDirection::Down)
        );
        assert_eq!(parse_action("press_enter").unwrap(), Action::PressEnter);
    }

    #[test]
    fn rejects_malformed_coordinates() {
        for bad in [
            "CLICK[-1,5]",
            "CLICK[1.5,2]",
            "CLICK[1]",
            "CLICK[1,2,3]",
            "CLICK[a,b]",
            "CLICK[,]",
            "CLICK[99999999999,1]",
            "CLICK 1,2",
        ] {
            assert!(parse_action(bad).is_err(), "{bad} should be rejected");
        }
    }

    #[test]
    fn rejects_unknown_and_trailing_text() {
        for bad in [
            "",
            "   ",
            "\"\"",
            "click the button",
            "TASK_IMPOSSIBLE",
            "PRESS_BACK now",
            "PRESS_HOME[x]",
            "TYPE[abc] trailing",
            "TYPE",
            "[1,2]",
        ] {
            assert!(parse_action(bad).is_err(), "{bad:?} should be rejected");
        }
    }

    #[test]
    fn payload_runs_to_last_bracket() {
        assert_eq!(
            parse_action("TYPE[a [b], c]").unwrap(),
            Action::type_text("a [b], c")
        );
        assert_eq!(parse_action("TYPE[x]]").unwrap(), Action::type_text("x]"));
        assert_eq!(parse_action("TYPE[]").unwrap(), Action::type_text(""));
    }

    #[test]
    fn action_types_cover_every_variant() {
        assert_eq!(Action::click(0, 0).action_type(), ActionType::Click);
        assert_eq!(Action::PressHome.action_type().as_str(), "PRESS_HOME");
        assert_eq!(Action::task_complete(None).action_type(), ActionType::TaskComplete);
    }

    #[test]
    fn legacy_normalization() {
        assert_eq!(normalize_legacy("TASK_IMPOSSIBLE").unwrap(), LegacyAction::Drop);
        assert_eq!(
            normalize_legacy("TASK_COMPLETE").unwrap(),
            LegacyAction::Upgraded(Action::task_complete(None))
        );
        assert_eq!(
            normalize_legacy("CLICK[10,10]").unwrap(),
            LegacyAction::Keep(Action::click(10, 10))
        );
        assert_eq!(
            normalize_legacy("SWIPE[UP,540,1200]").unwrap(),
            LegacyAction::Upgraded(Action::swipe(SwipeDirection::Up))
        );
        assert_eq!(
            normalize_legacy("TASK_COMPLETE[done]").unwrap(),
            LegacyAction::Keep(Action::task_complete(Some("done")))
        );
        assert!(normalize_legacy("SWIPE[1,2]").is_err());
        assert!(normalize_legacy("JUMP").is_err());
    }

    #[test]
    fn serde_uses_canonical_strings() {
        let json = serde_json::to_string(&Action::click(1, 2)).unwrap();
        assert_eq!(json, "\"CLICK[1,2]\"");
        let back: Action = serde_json::from_str("\"swipe[left]\"").unwrap();
        assert_eq!(back, Action::swipe(SwipeDirection::Left));
        assert!(serde_json::from_str::<Action>("\"SWIPE[NORTH]\"").is_err());
    }

    pub(crate) fn arb_action() -> impl Strategy<Value = Action> {
        let text = "[ -~\\[\\],]{0,24}";
        prop_oneof![
            (any::<u32>(), any::<u32>()).prop_map(|(x, y)| Action::click(x, y)),
            text.prop_map(Action::type_text),
            prop::sample::select(SwipeDirection::ALL.to_vec()).prop_map(Action::swipe),
            Just(Action::PressHome),
            Just(Action::PressBack),
            Just(Action::PressEnter),
            text.prop_map(|a| Action::task_complete(Some(&a))),
        ]
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(action in arb_action()) {
            let rendered = render_action(&action);
            prop_assert_eq!(parse_action(&rendered).unwrap(), action);
        }

        #[test]
        fn parse_is_total(text in any::<String>()) {
            let _ = parse_action(&text);
        }

        #[test]
        fn equality_matches_rendering(a in arb_action(), b in arb_action()) {
            prop_assert_eq!(a == b, render_action(&a) == render_action(&b));
        }
    }
}
