//! Live chat-completion endpoint over HTTP with a streamed SSE response.
//!
//! Request: `{model, messages: [{role, content: [text | image]}], max_tokens,
//! temperature, stream: true}` with a bearer key read from the configured
//! environment variable. Response events may use a generic shape
//! (`{"delta": "..."}` / `{"usage": {...}}`), the OpenAI chat-completions
//! shape or the Anthropic messages shape; `data: [DONE]` ends the stream.

use std::collections::VecDeque;
use std::time::Duration;
use std::sync::Arc;

use base64::Engine as _;
use futures::{stream, StreamExt};
use serde_json::{json, Value};

use super::sse::{SseDecoder, SseEvent};
use super::{ChunkStream, ProviderConfig, ProviderError, TokenChunk, Usage};
use crate::prompt::{PromptBundle, Role};

pub const TOTAL_TIMEOUT: Duration = Duration::from_secs(120);
pub const FIRST_BYTE_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Clone)]
pub struct HttpProvider {
    client: reqwest::Client,
    /// Key set at runtime; takes precedence over the environment variable.
    api_key: Option<Arc<str>>,
}

impl std::fmt::Debug for HttpProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpProvider")
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish_non_exhaustive()
    }
}

/// JSON request body for `bundle`.
pub fn request_body(cfg: &ProviderConfig, bundle: &PromptBundle) -> Value {
    let messages: Vec<Value> = bundle
        .turns
        .iter()
        .map(|t| {
            let role = match t.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            let mut content = vec![json!({"type": "text", "text": t.text})];
            if let Some(img) = &t.image {
                content.push(json!({
                    "type": "image",
                    "source": {
                        "type": "base64",
                        "media_type": img.media_type,
                        "data": base64::engine::general_purpose::STANDARD.encode(&img.data),
                    }
                }));
            }
            json!({"role": role, "content": content})
        })
        .collect();
    json!({
        "model": cfg.model_id,
        "messages": messages,
        "max_tokens": cfg.max_output_tokens,
        "temperature": cfg.temperature,
        "stream": true,
    })
}

fn api_key(cfg: &ProviderConfig) -> Result<String, ProviderError> {
    let var = cfg
        .api_key_env_var_name
        .as_deref()
        .ok_or_else(|| ProviderError::Config("http provider requires api_key_env_var_name".into()))?;
    match std::env::var(var) {
        Ok(key) if !key.trim().is_empty() => Ok(key),
        _ => Err(ProviderError::Auth(format!("environment variable {var} is not set"))),
    }
}

fn transport(e: reqwest::Error) -> ProviderError {
    // Drop the URL so nothing request-specific leaks into messages.
    ProviderError::Transport(e.without_url().to_string())
}

#[derive(Debug, Default, PartialEq)]
struct Interpreted {
    text: Option<String>,
    input_tokens: Option<u64>,
    output_tokens: Option<u64>,
    stop: bool,
    error: Option<String>,
}

fn interpret(v: &Value) -> Interpreted {
    let mut out = Interpreted::default();
    if v.get("type").and_then(Value::as_str) == Some("error") || v.get("error").is_some_and(|e| !e.is_null()) {
        let msg = v
            .pointer("/error/message")
            .and_then(Value::as_str)
            .or_else(|| v.get("error").and_then(Value::as_str))
            .unwrap_or("endpoint reported an error");
        out.error = Some(msg.to_string());
        return out;
    }
    out.text = v
        .pointer("/choices/0/delta/content")
        .and_then(Value::as_str)
        .or_else(|| v.pointer("/delta/text").and_then(Value::as_str))
        .or_else(|| v.get("delta").and_then(Value::as_str))
        .or_else(|| v.get("text").and_then(Value::as_str))
        .map(str::to_string);
    for usage in [v.get("usage"), v.pointer("/message/usage")].into_iter().flatten() {
        let num = |keys: [&str; 2]| keys.iter().find_map(|k| usage.get(*k).and_then(Value::as_u64));
        if let Some(n) = num(["input_tokens", "prompt_tokens"]) {
            out.input_tokens = Some(n);
        }
        if let Some(n) = num(["output_tokens", "completion_tokens"]) {
            out.output_tokens = Some(n);
        }
    }
    out.stop = v.get("type").and_then(Value::as_str) == Some("message_stop");
    out
}

struct StreamState {
    body: futures::stream::BoxStream<'static, Result<bytes::Bytes, reqwest::Error>>,
    decoder: SseDecoder,
    queue: VecDeque<Result<TokenChunk, ProviderError>>,
    usage: Usage,
    done: bool,
}

impl StreamState {
    fn finish(&mut self) {
        if !self.done {
            self.queue.push_back(Ok(TokenChunk::last("", self.usage)));
            self.done = true;
        }
    }

    fn fail(&mut self, e: ProviderError) {
        if !self.done {
            self.queue.push_back(Err(e));
            self.done = true;
        }
    }

    fn handle(&mut self, ev: SseEvent) {
        if self.done {
            return;
        }
        let data = ev.data.trim();
        if data == "[DONE]" {
            self.finish();
            return;
        }
        if data.is_empty() {
            return;
        }
        let value: Value = match serde_json::from_str(data) {
            Ok(v) => v,
            Err(e) => return self.fail(ProviderError::Protocol(format!("event data is not JSON: {e}"))),
        };
        let i = interpret(&value);
        if let Some(msg) = i.error {
            return self.fail(ProviderError::Protocol(msg));
        }
        if let Some(n) = i.input_tokens {
            self.usage.input_tokens = n;
        }
        if let Some(n) = i.output_tokens {
            self.usage.output_tokens = n;
        }
        if let Some(text) = i.text.filter(|t| !t.is_empty()) {
            self.queue.push_back(Ok(TokenChunk::text(text)));
        }
        if i.stop {
            self.finish();
        }
    }
}

impl HttpProvider {
    pub fn new() -> Result<Self, ProviderError> {
        let client = reqwest::Client::builder()
            .timeout(TOTAL_TIMEOUT)
            .build()
            .map_err(transport)?;
        Ok(Self { client, api_key: None })
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(Arc::from(key.into()));
        self
    }

    pub fn has_api_key(&self) -> bool {
        self.api_key.is_some()
    }

    pub async fn send(&self, cfg: &ProviderConfig, bundle: &PromptBundle) -> Result<ChunkStream, ProviderError> {
        let key = match &self.api_key {
            Some(k) => k.to_string(),
            None => api_key(cfg)?,
        };
        let url = cfg
            .endpoint_url
            .as_deref()
            .ok_or_else(|| ProviderError::Config("http provider requires endpoint_url".into()))?;
        let request = self
            .client
            .post(url)
            .bearer_auth(key)
            .header(reqwest::header::ACCEPT, "text/event-stream")
            .json(&request_body(cfg, bundle))
            .send();
        let response = tokio::time::timeout(FIRST_BYTE_TIMEOUT, request)
            .await
            .map_err(|_| ProviderError::Transport(format!("no response within {} s", FIRST_BYTE_TIMEOUT.as_secs())))?
            .map_err(transport)?;
        let status = response.status();
        if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
            return Err(ProviderError::Auth(format!("endpoint rejected the credential ({status})")));
        }
        if !status.is_success() {
            return Err(ProviderError::Transport(format!("endpoint returned {status}")));
        }
        let state = StreamState {
            body: response.bytes_stream().boxed(),
            decoder: SseDecoder::new(),
            queue: VecDeque::new(),
            usage: Usage::default(),
            done: false,
        };
        let s = stream::unfold(state, |mut st| async move {
            loop {
                if let Some(item) = st.queue.pop_front() {
                    return Some((item, st));
                }
                if st.done {
                    return None;
                }
                match st.body.next().await {
                    Some(Ok(bytes)) => {
                        for ev in st.decoder.feed(bytes.as_ref()) {
                            st.handle(ev);
                        }
                    }
                    Some(Err(e)) => st.fail(transport(e)),
                    None => {
                        if let Some(ev) = st.decoder.finish() {
                            st.handle(ev);
                        }
                        st.finish();
                    }
                }
            }
        });
        Ok(Box::pin(s))
    }
}
