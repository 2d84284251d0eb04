//! Scripted provider.
//!
//! Script format (TOML, `version = 1`):
//!
//! ```toml
//! version = 1
//!
//! [[entry]]
//! match = "A -> B -> C"          # substring of the last user turn; "" matches anything
//! response_file = "flow.xml"     # or: response = "..." (paths are relative to the script)
//! chunk_size = 16                # characters per chunk, default 16
//! delay_ms = 0                   # pause before each chunk
//! inject_error = { at_chunk = 3, kind = "transport" }   # chunk 3 becomes an error
//!
//! [default]                      # optional; reused for every unmatched request
//! response = "..."
//! ```
//!
//! Each request takes the first unconsumed entry whose `match` occurs in the
//! request's last user turn.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use futures::stream;
use serde::Deserialize;

use super::{ChunkStream, ProviderConfig, ProviderError, TokenChunk, Usage};
use crate::prompt::PromptBundle;

pub const SCRIPT_VERSION: u32 = 1;
pub const DEFAULT_CHUNK_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScriptError {
    #[error("mock script not found: {0}")]
    FileNotFound(String),
    #[error("{path}:{line}: bad mock script: {message}")]
    BadScriptFormat { path: String, line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectedKind {
    Transport,
    Protocol,
    Auth,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectedError {
    /// 1-based index of the chunk replaced by the error.
    pub at_chunk: usize,
    pub kind: InjectedKind,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    #[serde(rename = "match", default)]
    matcher: String,
    response: Option<String>,
    response_file: Option<PathBuf>,
    chunk_size: Option<usize>,
    #[serde(default)]
    delay_ms: u64,
    inject_error: Option<InjectedError>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScript {
    version: u32,
    #[serde(default)]
    entry: Vec<RawEntry>,
    default: Option<RawEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockEntry {
    pub matcher: String,
    pub response: String,
    pub chunk_size: usize,
    pub delay_ms: u64,
    pub inject_error: Option<InjectedError>,
}

impl MockEntry {
    pub fn new(matcher: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            matcher: matcher.into(),
            response: response.into(),
            chunk_size: DEFAULT_CHUNK_SIZE,
            delay_ms: 0,
            inject_error: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MockScript {
    pub entries: Vec<MockEntry>,
    pub default: Option<MockEntry>,
}

/// 1-based line of the `n`-th line starting with `header` (e.g. `[[entry]]`).
fn header_line(text: &str, header: &str, n: usize) -> usize {
    text.lines()
        .enumerate()
        .filter(|(_, l)| l.trim_start().starts_with(header))
        .nth(n)
        .map_or(1, |(i, _)| i + 1)
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path).map_err(|_| ScriptError::FileNotFound(path.display().to_string()))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")), &path.display().to_string())
    }

    /// Parses script text; `response_file` paths resolve against `base`.
    pub fn parse(text: &str, base: &Path, name: &str) -> Result<Self, ScriptError> {
        let bad = |line: usize, message: String| ScriptError::BadScriptFormat {
            path: name.to_string(),
            line,
            message,
        };
        let raw: RawScript = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(1, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            bad(line, e.message().to_string())
        })?;
        if raw.version != SCRIPT_VERSION {
            let line = text.lines().position(|l| l.trim_start().starts_with("version")).map_or(1, |i| i + 1);
            return Err(bad(line, format!("unsupported version {} (expected {SCRIPT_VERSION})", raw.version)));
        }
        let convert = |r: RawEntry, line: usize| -> Result<MockEntry, ScriptError> {
            let response = match (r.response, r.response_file) {
                (Some(text), None) => text,
                (None, Some(file)) => {
                    let path = base.join(&file);
                    std::fs::read_to_string(&path)
                        .map_err(|e| bad(line, format!("cannot read response_file {}: {e}", path.display())))?
                }
                (Some(_), Some(_)) => return Err(bad(line, "give either response or response_file, not both".into())),
                (None, None) => return Err(bad(line, "entry needs response or response_file".into())),
            };
            let chunk_size = r.chunk_size.unwrap_or(DEFAULT_CHUNK_SIZE);
            if chunk_size == 0 {
                return Err(bad(line, "chunk_size must be positive".into()));
            }
            if r.inject_error.as_ref().is_some_and(|e| e.at_chunk == 0) {
                return Err(bad(line, "inject_error.at_chunk is 1-based".into()));
            }
            Ok(MockEntry {
                matcher: r.matcher,
                response,
                chunk_size,
                delay_ms: r.delay_ms,
                inject_error: r.inject_error,
            })
        };
        let entries = raw
            .entry
            .into_iter()
            .enumerate()
            .map(|(i, r)| convert(r, header_line(text, "[[entry]]", i)))
            .collect::<Result<Vec<_>, _>>()?;
        let default = raw.default.map(|r| convert(r, header_line(text, "[default]", 0))).transpose()?;
        Ok(Self { entries, default })
    }
}

/// What the mock was asked, kept for assertions.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedRequest {
    pub bundle: PromptBundle,
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

#[derive(Debug)]
struct MockState {
    consumed: Vec<bool>,
    requests: Vec<RecordedRequest>,
}

#[derive(Debug)]
pub struct MockProvider {
    script: MockScript,
    state: Mutex<MockState>,
}

/// Splits `text` into pieces of `size` characters.
pub fn split_chunks(text: &str, size: usize) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    chars.chunks(size.max(1)).map(|c| c.iter().collect()).collect()
}

impl MockProvider {
    pub fn new(script: MockScript) -> Self {
        let consumed = vec![false; script.entries.len()];
        Self {
            script,
            state: Mutex::new(MockState {
                consumed,
                requests: Vec::new(),
            }),
        }
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.state.lock().expect("mock state").requests.clone()
    }

    pub fn remaining(&self) -> usize {
        self.state.lock().expect("mock state").consumed.iter().filter(|c| !**c).count()
    }

    fn pick(&self, cfg: &ProviderConfig, bundle: &PromptBundle) -> Option<MockEntry> {
        let mut state = self.state.lock().expect("mock state");
        state.requests.push(RecordedRequest {
            bundle: bundle.clone(),
            model_id: cfg.model_id.clone(),
            temperature: cfg.temperature,
            max_output_tokens: cfg.max_output_tokens,
        });
        let query = bundle.last_user_text();
        let hit = self
            .script
            .entries
            .iter()
            .enumerate()
            .find(|(i, e)| !state.consumed[*i] && query.contains(&e.matcher));
        match hit {
            Some((i, e)) => {
                state.consumed[i] = true;
                Some(e.clone())
            }
            None => self.script.default.clone(),
        }
    }

    pub fn send(&self, cfg: &ProviderConfig, bundle: &PromptBundle) -> Result<ChunkStream, ProviderError> {
        let entry = self
            .pick(cfg, bundle)
            .ok_or_else(|| ProviderError::Protocol("mock script has no entry for this request".into()))?;
        let usage = Usage {
            input_tokens: bundle.token_estimate as u64,
            output_tokens: entry.response.chars().count().div_ceil(4) as u64,
        };
        let mut pieces = split_chunks(&entry.response, entry.chunk_size);
        if pieces.is_empty() {
            pieces.push(String::new());
        }
        let total = pieces.len();
        let mut items: Vec<Result<TokenChunk, ProviderError>> = pieces
            .into_iter()
            .enumerate()
            .map(|(i, text)| {
                Ok(if i + 1 == total {
                    TokenChunk::last(text, usage)
                } else {
                    TokenChunk::text(text)
                })
            })
            .collect();
        if let Some(inject) = &entry.inject_error {
            let at = inject.at_chunk - 1;
            if at < items.len() {
                items.truncate(at);
                let msg = format!("injected failure at chunk {}", inject.at_chunk);
                items.push(Err(match inject.kind {
                    InjectedKind::Transport => ProviderError::Transport(msg),
                    InjectedKind::Protocol => ProviderError::Protocol(msg),
                    InjectedKind::Auth => ProviderError::Auth(msg),
                }));
            }
        }
        let delay = Duration::from_millis(entry.delay_ms);
        let s = stream::unfold(items.into_iter(), move |mut it| async move {
            let next = it.next()?;
            if !delay.is_zero() {
                tokio::time::sleep(delay).await;
            }
            Some((next, it))
        });
        Ok(Box::pin(s))
    }
}
