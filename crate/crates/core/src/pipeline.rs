//! One generation round: optional image description, prompt assembly,
//! streaming, validation with at most one self-correction re-prompt, and
//! layout of coordinate-free shapes.

use futures::StreamExt;
use serde::{Deserialize, Serialize};
use tokio_util::sync::CancellationToken;

use crate::codec::serialize;
use crate::layout::{layout_with_report, LayoutConfig, LayoutWarning};
use crate::model::{Diagram, Violation};
use crate::prompt::{
    assemble, build_image_description_prompt, default_examples, parse_component_description, ChatTurn, FewShotExample,
    ImageAttachment, PromptBundle, PromptConfig, PromptError,
};
use crate::provider::{ChunkStream, Provider, ProviderConfig, ProviderError, Usage};
use crate::stream::{Phase, StreamEvent, StreamState};
use crate::validator::{build_self_correction_prompt, CorrectionOutcome, Issue, OutcomeStatus};
use crate::verify::RequirementSpec;

/// Self-correction re-prompts allowed per round.
pub const MAX_CORRECTIONS: u32 = 1;

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub prompt: PromptConfig,
    pub layout: LayoutConfig,
    pub provider: ProviderConfig,
    pub examples: Vec<FewShotExample>,
}

impl PipelineConfig {
    pub fn new(provider: ProviderConfig) -> Self {
        Self {
            prompt: PromptConfig::default(),
            layout: LayoutConfig::default(),
            provider,
            examples: default_examples(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GenerationRequest {
    pub user_text: String,
    pub image: Option<ImageAttachment>,
    pub history: Vec<ChatTurn>,
    pub current: Option<Diagram>,
}

/// Progress reported while a round runs.
#[derive(Debug, Clone, PartialEq)]
pub enum PipelineEvent {
    Text(String),
    Phase(Phase),
    Repair(Vec<Issue>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutcome {
    pub diagram: Diagram,
    /// Canonical serialization of `diagram`, after layout.
    pub xml: String,
    /// Validator verdict on the first model response.
    pub first_pass: OutcomeStatus,
    pub correction_iterations: u32,
    pub usage: Usage,
    /// Issues repaired locally in the accepted response.
    pub repairs: Vec<Issue>,
    pub layout_warnings: Vec<LayoutWarning>,
    /// Raw text of the accepted response.
    pub response_text: String,
    /// Image description and the requirements parsed from it, if an image was given.
    pub description: Option<String>,
    pub description_spec: Option<RequirementSpec>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("response could not be turned into a diagram after {correction_iterations} correction(s)")]
    Validation {
        outcome: Box<CorrectionOutcome>,
        first_pass: OutcomeStatus,
        correction_iterations: u32,
    },
    #[error("generated diagram violates structural invariants: {0:?}")]
    Integrity(Vec<Violation>),
    #[error("generation stopped")]
    Stopped { partial: String },
}

impl PipelineError {
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Provider(e) => e.kind(),
            PipelineError::Prompt(_) => "prompt",
            PipelineError::Validation { .. } => "validation",
            PipelineError::Integrity(_) => "integrity",
            PipelineError::Stopped { .. } => "stopped",
        }
    }
}

enum Streamed {
    Done(Box<StreamEvent>, String),
    Stopped(String),
}

/// Streams one provider call through a fresh state machine.
async fn stream_once(
    provider: &Provider,
    cfg: &ProviderConfig,
    bundle: &PromptBundle,
    cancel: &CancellationToken,
    usage: &mut Usage,
    on_event: &mut impl FnMut(PipelineEvent),
) -> Result<Streamed, PipelineError> {
    let mut state = StreamState::new();
    let mut chunks = tokio::select! {
        biased;
        _ = cancel.cancelled() => return Ok(Streamed::Stopped(String::new())),
        s = provider.send(cfg, bundle) => s?,
    };
    loop {
        let next = tokio::select! {
            biased;
            _ = cancel.cancelled() => None,
            item = chunks.next() => Some(item),
        };
        let Some(item) = next else {
            drop(chunks);
            state.stop().ok();
            return Ok(Streamed::Stopped(state.buffer().to_string()));
        };
        let chunk = match item {
            Some(Ok(c)) => c,
            Some(Err(e)) => return Err(e.into()),
            None => return Err(ProviderError::Protocol("stream ended without a final chunk".into()).into()),
        };
        if let Some(u) = chunk.usage {
            *usage += u;
        }
        let events = state
            .feed(&chunk)
            .map_err(|e| PipelineError::Provider(ProviderError::Protocol(e.to_string())))?;
        for ev in events {
            match ev {
                StreamEvent::TextAppended(t) => on_event(PipelineEvent::Text(t)),
                StreamEvent::PhaseTransition(p) => on_event(PipelineEvent::Phase(p)),
                StreamEvent::RepairApplied(issues) => on_event(PipelineEvent::Repair(issues)),
                terminal => {
                    let mut text = state.buffer().to_string();
                    if !chunk.is_final {
                        drain(&mut chunks, cancel, usage, &mut text, on_event).await;
                    }
                    return Ok(Streamed::Done(Box::new(terminal), text));
                }
            }
        }
    }
}

/// Reads what follows an early-closed document: trailing prose and the final
/// usage figures. Failures here cannot affect the already accepted diagram.
async fn drain(
    chunks: &mut ChunkStream,
    cancel: &CancellationToken,
    usage: &mut Usage,
    text: &mut String,
    on_event: &mut impl FnMut(PipelineEvent),
) {
    loop {
        let item = tokio::select! {
            biased;
            _ = cancel.cancelled() => return,
            item = chunks.next() => item,
        };
        let Some(Ok(c)) = item else { return };
        if let Some(u) = c.usage {
            *usage += u;
        }
        if !c.text.is_empty() {
            text.push_str(&c.text);
            on_event(PipelineEvent::Text(c.text));
        }
        if c.is_final {
            return;
        }
    }
}

/// Collects the full text of a describe-only call, forwarding fragments.
async fn describe(
    provider: &Provider,
    cfg: &ProviderConfig,
    image: ImageAttachment,
    cancel: &CancellationToken,
    usage: &mut Usage,
    on_event: &mut impl FnMut(PipelineEvent),
) -> Result<Option<String>, PipelineError> {
    let bundle = build_image_description_prompt(image)?;
    let mut chunks = tokio::select! {
        biased;
        _ = cancel.cancelled() => return Ok(None),
        s = provider.send(cfg, &bundle) => s?,
    };
    let mut text = String::new();
    loop {
        let item = tokio::select! {
            biased;
            _ = cancel.cancelled() => return Ok(None),
            item = chunks.next() => item,
        };
        match item {
            Some(Ok(c)) => {
                if let Some(u) = c.usage {
                    *usage += u;
                }
                if !c.text.is_empty() {
                    text.push_str(&c.text);
                    on_event(PipelineEvent::Text(c.text));
                }
                if c.is_final {
                    return Ok(Some(text));
                }
            }
            Some(Err(e)) => return Err(e.into()),
            None => return Ok(Some(text)),
        }
    }
}

/// Runs a full round. Progress goes to `on_event`; the result carries the
/// laid-out diagram or the reason for failure.
pub async fn run_generation(
    provider: &Provider,
    cfg: &PipelineConfig,
    req: GenerationRequest,
    cancel: CancellationToken,
    mut on_event: impl FnMut(PipelineEvent),
) -> Result<GenerationOutcome, PipelineError> {
    let mut usage = Usage::default();
    let mut user_text = req.user_text.clone();
    let mut description = None;
    if let Some(image) = req.image.clone() {
        let Some(text) = describe(provider, &cfg.provider, image, &cancel, &mut usage, &mut on_event).await? else {
            return Err(PipelineError::Stopped { partial: String::new() });
        };
        on_event(PipelineEvent::Text("\n\n".into()));
        user_text = format!(
            "{}\n\nThe reference image contains these components and connections:\n{}",
            req.user_text.trim_end(),
            text.trim()
        );
        description = Some(text);
    }

    let mut bundle = assemble(&req.history, req.current.as_ref(), &user_text, &cfg.examples, &cfg.prompt)?;
    let mut first_pass = None;
    let mut corrections = 0;
    loop {
        let streamed = stream_once(provider, &cfg.provider, &bundle, &cancel, &mut usage, &mut on_event).await?;
        let (event, response_text) = match streamed {
            Streamed::Stopped(partial) => return Err(PipelineError::Stopped { partial }),
            Streamed::Done(ev, text) => (ev, text),
        };
        match *event {
            StreamEvent::DiagramReady { diagram, outcome } => {
                let first_pass = *first_pass.get_or_insert(outcome.status);
                let violations = diagram.integrity_check();
                if !violations.is_empty() {
                    return Err(PipelineError::Integrity(violations));
                }
                let (placed, layout_warnings) = layout_with_report(&diagram, &cfg.layout);
                let xml = serialize(&placed).map_err(|e| match e {
                    crate::codec::SerializeError::IntegrityViolation(v) => PipelineError::Integrity(v),
                })?;
                let repairs = if outcome.status == OutcomeStatus::RepairedLocally { outcome.issues } else { Vec::new() };
                return Ok(GenerationOutcome {
                    diagram: placed,
                    xml,
                    first_pass,
                    correction_iterations: corrections,
                    usage,
                    repairs,
                    layout_warnings,
                    response_text,
                    description_spec: description.as_deref().map(parse_component_description),
                    description,
                });
            }
            StreamEvent::Error(outcome) => {
                let first = *first_pass.get_or_insert(outcome.status);
                let retry = outcome.status == OutcomeStatus::NeedsReprompt && corrections < MAX_CORRECTIONS;
                let residual: Vec<Issue> = outcome.issues.iter().filter(|i| !i.repaired).cloned().collect();
                match (retry, outcome.extracted.as_deref()) {
                    (true, Some(bad)) if !residual.is_empty() => {
                        bundle = build_self_correction_prompt(bad, &residual, &cfg.prompt)
                            .expect("residual issues are non-empty");
                        corrections += 1;
                    }
                    _ => {
                        return Err(PipelineError::Validation {
                            outcome: Box::new(outcome),
                            first_pass: first,
                            correction_iterations: corrections,
                        })
                    }
                }
            }
            StreamEvent::Stopped { partial } => return Err(PipelineError::Stopped { partial }),
            _ => unreachable!("stream_once returns only terminal events"),
        }
    }
}
