//! Versioned prompt templates, filled by plain `{name}` substitution.

pub const DESCRIBE_INTERMEDIATE: &str = include_str!("../prompts/describe_intermediate.v1.txt");
pub const DESCRIBE_TERMINAL_STANDARD: &str =
    include_str!("../prompts/describe_terminal_standard.v1.txt");
pub const DESCRIBE_TERMINAL_ANSWER: &str = include_str!("../prompts/describe_terminal_answer.v1.txt");
pub const DESCRIBE_USER: &str = include_str!("../prompts/describe_user.v1.txt");
pub const DESCRIBE_RETRY: &str = include_str!("../prompts/describe_retry.v1.txt");

pub const EXECUTE_ROLE: &str = include_str!("../prompts/execute_role.v1.txt");
pub const EXECUTE_BACKGROUND: &str = include_str!("../prompts/execute_background.v1.txt");
pub const EXECUTE_HISTORY: &str = include_str!("../prompts/execute_history.v1.txt");
pub const EXECUTE_REQUIREMENTS: &str = include_str!("../prompts/execute_requirements.v1.txt");
pub const EXECUTE_RETRY: &str = include_str!("../prompts/execute_retry.v1.txt");

pub const CLASSIFY_APP: &str = include_str!("../prompts/classify_app.v1.txt");

pub const TEMPLATE_VERSION: &str = "v1";

/// Line prefix carrying the rendered action in description requests.
pub const ACTION_LINE_PREFIX: &str = "Current action: ";

/// Substitutes `{key}` placeholders. Unknown placeholders are left intact.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in values {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

/// Which template a system prompt was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Execute,
    DescribeIntermediate,
    DescribeTerminalStandard,
    DescribeTerminalAnswer,
    ClassifyApp,
    Other,
}

impl PromptKind {
    pub fn of(system_prompt: &str) -> Self {
        let first_line = |t: &str| t.lines().next().unwrap_or_default().to_string();
        let head = first_line(system_prompt);
        if head == first_line(EXECUTE_ROLE) {
            Self::Execute
        } else if head == first_line(DESCRIBE_INTERMEDIATE) {
            Self::DescribeIntermediate
        } else if head == first_line(DESCRIBE_TERMINAL_STANDARD) {
            Self::DescribeTerminalStandard
        } else if head == first_line(DESCRIBE_TERMINAL_ANSWER) {
            Self::DescribeTerminalAnswer
        } else if head == first_line(CLASSIFY_APP) {
            Self::ClassifyApp
        } else {
            Self::Other
        }
    }
}
