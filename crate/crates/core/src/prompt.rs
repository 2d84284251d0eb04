//! Prompt assembly: system prompt, few-shot examples, conversation history
//! and current-diagram context, plus the image-description prompt pair.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{check_wellformed, serialize, ParseIssue};
use crate::layout::Orientation;
use crate::model::Diagram;
use crate::verify::RequirementSpec;

const DEFAULT_TEMPLATE: &str = include_str!("../data/system_prompt.txt");
const SCHEMA_EXAMPLE: &str = include_str!("../data/schema_example.xml");

const BUNDLED_EXAMPLES: [(&str, &str, &str); 2] = [
    (
        "flowchart",
        include_str!("../data/examples/flowchart.request.txt"),
        include_str!("../data/examples/flowchart.xml"),
    ),
    (
        "orgchart",
        include_str!("../data/examples/orgchart.request.txt"),
        include_str!("../data/examples/orgchart.xml"),
    ),
];

pub const CONTEXT_BEGIN: &str = "<<<CURRENT_DIAGRAM>>>";
pub const CONTEXT_END: &str = "<<<END_CURRENT_DIAGRAM>>>";

pub const IMAGE_INSTRUCTION: &str =
    "Analyze the given diagram image and describe all the components (with their labels) and connections between them.";

const IMAGE_SYSTEM: &str = "You describe diagram images as plain text. \
Write every component on its own line as just its label. \
Then write every connection on its own line as `source label -> target label`. \
Output nothing else.";

pub const DEFAULT_TOKEN_BUDGET: usize = 8000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageAttachment {
    pub media_type: String,
    #[serde(with = "base64_bytes")]
    pub data: Vec<u8>,
}

impl ImageAttachment {
    /// Wraps raw image bytes, sniffing the media type from magic numbers.
    pub fn from_bytes(data: Vec<u8>) -> Self {
        let media_type = match data.as_slice() {
            [0x89, b'P', b'N', b'G', ..] => "image/png",
            [0xFF, 0xD8, 0xFF, ..] => "image/jpeg",
            [b'G', b'I', b'F', b'8', ..] => "image/gif",
            [b'R', b'I', b'F', b'F', _, _, _, _, b'W', b'E', b'B', b'P', ..] => "image/webp",
            _ => "application/octet-stream",
        };
        Self {
            media_type: media_type.to_string(),
            data,
        }
    }
}

mod base64_bytes {
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(data: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(data))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(text.as_bytes())
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageAttachment>,
}

impl ChatTurn {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            text: text.into(),
            image: None,
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
            image: None,
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            text: text.into(),
            image: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub request: String,
    pub response_xml: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub turns: Vec<ChatTurn>,
    pub token_estimate: usize,
}

impl PromptBundle {
    pub fn new(turns: Vec<ChatTurn>) -> Self {
        let token_estimate = estimate_tokens(&turns);
        Self { turns, token_estimate }
    }

    /// Text of the last user turn, which scripted providers match against.
    pub fn last_user_text(&self) -> &str {
        self.turns
            .iter()
            .rev()
            .find(|t| t.role == Role::User)
            .map_or("", |t| t.text.as_str())
    }
}

/// `ceil(chars / 4)` over all turn texts.
pub fn estimate_tokens(turns: &[ChatTurn]) -> usize {
    let chars: usize = turns.iter().map(|t| t.text.chars().count()).sum();
    chars.div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptConfig {
    pub alignment: Orientation,
    pub token_budget: usize,
    /// Template with `{alignment_rule}` and `{schema_example}` placeholders.
    pub template: String,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            alignment: Orientation::Horizontal,
            token_budget: DEFAULT_TOKEN_BUDGET,
            template: DEFAULT_TEMPLATE.to_string(),
        }
    }
}

impl PromptConfig {
    pub fn with_template_file(mut self, path: &Path) -> Result<Self, PromptError> {
        self.template = std::fs::read_to_string(path).map_err(|e| PromptError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("user text is empty")]
    EmptyUserText,
    #[error("image attachment is empty")]
    EmptyImage,
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("few-shot example {name} is not a valid diagram: {issues:?}")]
    InvalidExample { name: String, issues: Vec<ParseIssue> },
    #[error("example {name} has no matching {missing} file")]
    UnpairedExample { name: String, missing: &'static str },
}

pub fn build_system_prompt(cfg: &PromptConfig) -> String {
    let rule = match cfg.alignment {
        Orientation::Horizontal => {
            "Unless the user asks otherwise, align nodes horizontally: place successive shapes left to right."
        }
        Orientation::Vertical => {
            "Unless the user asks otherwise, align nodes vertically: place successive shapes top to bottom."
        }
    };
    cfg.template
        .replace("{alignment_rule}", rule)
        .replace("{schema_example}", SCHEMA_EXAMPLE.trim_end())
        .trim_end()
        .to_string()
}

fn checked_example(name: &str, request: &str, xml: &str) -> Result<FewShotExample, PromptError> {
    let issues = check_wellformed(xml);
    if !issues.is_empty() {
        return Err(PromptError::InvalidExample {
            name: name.to_string(),
            issues,
        });
    }
    Ok(FewShotExample {
        request: request.trim().to_string(),
        response_xml: xml.trim_end().to_string(),
    })
}

/// The two bundled examples (flowchart, org chart).
pub fn default_examples() -> Vec<FewShotExample> {
    BUNDLED_EXAMPLES
        .iter()
        .map(|(name, req, xml)| checked_example(name, req, xml).expect("bundled example must be valid"))
        .collect()
}

/// Loads `<name>.request.txt` / `<name>.xml` pairs from `dir`, sorted by name.
/// Every example is checked for validity.
pub fn load_examples(dir: &Path) -> Result<Vec<FewShotExample>, PromptError> {
    let io_err = |e: std::io::Error| PromptError::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    };
    let mut names: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err)? {
        let file_name = entry.map_err(io_err)?.file_name().to_string_lossy().into_owned();
        let stem = file_name
            .strip_suffix(".request.txt")
            .or_else(|| file_name.strip_suffix(".xml"));
        if let Some(stem) = stem {
            if !names.iter().any(|n| n == stem) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    names
        .iter()
        .map(|name| {
            let read = |suffix: &'static str| {
                let path = dir.join(format!("{name}{suffix}"));
                if !path.exists() {
                    return Err(PromptError::UnpairedExample {
                        name: name.clone(),
                        missing: suffix,
                    });
                }
                std::fs::read_to_string(&path).map_err(|e| PromptError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })
            };
            checked_example(name, &read(".request.txt")?, &read(".xml")?)
        })
        .collect()
}

/// Builds the generation prompt.
///
/// Turn order: system, example pairs, history, then the final user turn with
/// the current diagram (if any) between context sentinels. Over budget, the
/// oldest history turns go first, then example pairs.
pub fn assemble(
    history: &[ChatTurn],
    current_diagram: Option<&Diagram>,
    user_text: &str,
    examples: &[FewShotExample],
    cfg: &PromptConfig,
) -> Result<PromptBundle, PromptError> {
    if user_text.trim().is_empty() {
        return Err(PromptError::EmptyUserText);
    }
    let system = ChatTurn::system(build_system_prompt(cfg));
    let mut pairs: Vec<[ChatTurn; 2]> = examples
        .iter()
        .map(|e| [ChatTurn::user(&e.request), ChatTurn::assistant(&e.response_xml)])
        .collect();
    let mut past: Vec<ChatTurn> = history.iter().filter(|t| t.role != Role::System).cloned().collect();

    let mut final_text = String::new();
    if let Some(d) = current_diagram {
        // An invalid current diagram is left out rather than failing the turn.
        if let Ok(xml) = serialize(d) {
            final_text.push_str(CONTEXT_BEGIN);
            final_text.push('\n');
            final_text.push_str(xml.trim_end());
            final_text.push('\n');
            final_text.push_str(CONTEXT_END);
            final_text.push_str("\n\n");
        }
    }
    final_text.push_str(user_text);
    let last = ChatTurn::user(final_text);

    let fixed = system.text.chars().count() + last.text.chars().count();
    let chars_of = |turns: &[ChatTurn]| -> usize { turns.iter().map(|t| t.text.chars().count()).sum() };
    let over = |pairs: &[[ChatTurn; 2]], past: &[ChatTurn]| {
        let total = fixed + pairs.iter().map(|p| chars_of(p)).sum::<usize>() + chars_of(past);
        total.div_ceil(4) > cfg.token_budget
    };
    while over(&pairs, &past) && !past.is_empty() {
        past.remove(0);
    }
    while over(&pairs, &past) && !pairs.is_empty() {
        pairs.remove(0);
    }

    let mut turns = vec![system];
    turns.extend(pairs.into_iter().flatten());
    turns.extend(past);
    turns.push(last);
    Ok(PromptBundle::new(turns))
}

pub fn build_image_description_prompt(image: ImageAttachment) -> Result<PromptBundle, PromptError> {
    if image.data.is_empty() {
        return Err(PromptError::EmptyImage);
    }
    let mut user = ChatTurn::user(IMAGE_INSTRUCTION);
    user.image = Some(image);
    Ok(PromptBundle::new(vec![ChatTurn::system(IMAGE_SYSTEM), user]))
}

fn strip_list_marker(line: &str) -> &str {
    let line = line.trim();
    for bullet in ["- ", "* ", "• ", "+ "] {
        if let Some(rest) = line.strip_prefix(bullet) {
            return rest.trim();
        }
    }
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(r) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return r.trim();
        }
    }
    line
}

fn clean_label(s: &str) -> &str {
    s.trim().trim_matches(|c| c == '`' || c == '"' || c == '\'').trim()
}

/// Parses a `label` / `label -> label` description into a requirement spec.
/// Text that yields nothing gives an empty spec (see [`RequirementSpec::is_empty`]).
pub fn parse_component_description(text: &str) -> RequirementSpec {
    let mut spec = RequirementSpec::default();
    let add_component = |spec: &mut RequirementSpec, label: &str| {
        if !spec.required_components.iter().any(|c| c == label) {
            spec.required_components.push(label.to_string());
        }
    };
    for raw in text.lines() {
        let line = strip_list_marker(raw);
        if line.is_empty() || line.ends_with(':') {
            continue;
        }
        let normalized = line.replace('→', "->");
        let parts: Vec<&str> = normalized.split("->").map(clean_label).collect();
        if parts.len() >= 2 {
            if parts.iter().any(|p| p.is_empty()) {
                continue;
            }
            for pair in parts.windows(2) {
                let edge = (pair[0].to_string(), pair[1].to_string());
                if !spec.required_edges.contains(&edge) {
                    spec.required_edges.push(edge);
                }
            }
            for p in &parts {
                add_component(&mut spec, p);
            }
        } else {
            let label = clean_label(line);
            if !label.is_empty() {
                add_component(&mut spec, label);
            }
        }
    }
    spec
}

/// Inverse of [`parse_component_description`] for labels without `->`.
pub fn render_description(spec: &RequirementSpec) -> String {
    let mut out = String::new();
    for c in &spec.required_components {
        out.push_str(c);
        out.push('\n');
    }
    for (a, b) in &spec.required_edges {
        out.push_str(&format!("{a} -> {b}\n"));
    }
    out
}
