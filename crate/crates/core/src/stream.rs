//! Two-phase streaming: raw text first, the parsed diagram once the response
//! is complete.
//!
//! Completion is detected by tracking element depth over the XML region
//! incrementally. When depth returns to zero the buffer is validated once;
//! if that fails the machine keeps accumulating and validates again on the
//! provider's final chunk.

use serde::{Deserialize, Serialize};

use crate::codec::parse;
use crate::lexer::RegionScanner;
use crate::model::Diagram;
use crate::provider::TokenChunk;
use crate::validator::{validate_and_correct, CorrectionOutcome, Issue, IssueCategory, OutcomeStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Textual,
    Visual,
    Failed,
    Stopped,
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        self != Phase::Textual
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StreamEvent {
    TextAppended(String),
    PhaseTransition(Phase),
    RepairApplied(Vec<Issue>),
    DiagramReady { diagram: Diagram, outcome: CorrectionOutcome },
    Error(CorrectionOutcome),
    Stopped { partial: String },
}

impl StreamEvent {
    pub fn is_terminal(&self) -> bool {
        matches!(self, StreamEvent::DiagramReady { .. } | StreamEvent::Error(_) | StreamEvent::Stopped { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum StreamError {
    #[error("stream already finished ({0:?})")]
    FedAfterTerminal(Phase),
}

#[derive(Debug, Clone)]
pub struct StreamState {
    phase: Phase,
    buffer: String,
    scanner: RegionScanner,
    early_attempted: bool,
    /// Outcome of the last validation and the buffer length it saw.
    last_validation: Option<(usize, CorrectionOutcome)>,
}

impl Default for StreamState {
    fn default() -> Self {
        Self::new()
    }
}

impl StreamState {
    pub fn new() -> Self {
        Self {
            phase: Phase::Textual,
            buffer: String::new(),
            scanner: RegionScanner::new(),
            early_attempted: false,
            last_validation: None,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn buffer(&self) -> &str {
        &self.buffer
    }

    pub fn open_tag_depth(&self) -> usize {
        self.scanner.depth
    }

    pub fn root_tag_seen(&self) -> bool {
        self.scanner.root_seen()
    }

    fn validate(&mut self) -> CorrectionOutcome {
        if let Some((len, outcome)) = &self.last_validation {
            if *len == self.buffer.len() {
                return outcome.clone();
            }
        }
        let outcome = validate_and_correct(&self.buffer);
        self.last_validation = Some((self.buffer.len(), outcome.clone()));
        outcome
    }

    fn succeed(&mut self, outcome: CorrectionOutcome, events: &mut Vec<StreamEvent>) -> bool {
        let Some(diagram) = outcome.xml.as_deref().and_then(|x| parse(x).ok()) else {
            return false;
        };
        self.phase = Phase::Visual;
        events.push(StreamEvent::PhaseTransition(Phase::Visual));
        if outcome.status == OutcomeStatus::RepairedLocally {
            events.push(StreamEvent::RepairApplied(outcome.issues.clone()));
        }
        events.push(StreamEvent::DiagramReady { diagram, outcome });
        true
    }

    pub fn feed(&mut self, chunk: &TokenChunk) -> Result<Vec<StreamEvent>, StreamError> {
        if self.phase.is_terminal() {
            return Err(StreamError::FedAfterTerminal(self.phase));
        }
        let mut events = Vec::new();
        if !chunk.text.is_empty() {
            self.buffer.push_str(&chunk.text);
            events.push(StreamEvent::TextAppended(chunk.text.clone()));
        }
        self.scanner.advance(&self.buffer, chunk.is_final);

        if !self.early_attempted && self.scanner.end.is_some() {
            self.early_attempted = true;
            let outcome = self.validate();
            if outcome.status.is_usable() && self.succeed(outcome, &mut events) {
                return Ok(events);
            }
        }
        if chunk.is_final {
            let mut outcome = self.validate();
            if outcome.status.is_usable() && self.succeed(outcome.clone(), &mut events) {
                return Ok(events);
            }
            if outcome.status.is_usable() {
                // Unreachable in practice: usable output always parses.
                outcome.status = OutcomeStatus::NeedsReprompt;
                outcome.issues.push(Issue {
                    category: IssueCategory::NotWellFormed,
                    detail: "validated output failed to parse".into(),
                    repaired: false,
                });
            }
            self.phase = Phase::Failed;
            events.push(StreamEvent::Error(outcome));
        }
        Ok(events)
    }

    /// User stop. Keeps the partial buffer; the caller cancels the provider.
    pub fn stop(&mut self) -> Result<Vec<StreamEvent>, StreamError> {
        if self.phase.is_terminal() {
            return Err(StreamError::FedAfterTerminal(self.phase));
        }
        self.phase = Phase::Stopped;
        Ok(vec![StreamEvent::Stopped {
            partial: self.buffer.clone(),
        }])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::mock::split_chunks;
    use crate::provider::Usage;
    use proptest::prelude::*;

    const FLOW: &str = r#"<mxfile><diagram name="Page-1"><mxGraphModel><root><mxCell id="0"/><mxCell id="1" parent="0"/><mxCell id="2" value="A &amp; &lt;b&gt;" vertex="1" parent="1"><mxGeometry x="1" y="2" width="3" height="4" as="geometry"/></mxCell><mxCell id="3" value="B" vertex="1" parent="1"><mxGeometry width="3" height="4" as="geometry"/></mxCell><mxCell id="4" edge="1" parent="1" source="2" target="3"/></root></mxGraphModel></diagram></mxfile>"#;

    /// Feeds `text` in `size`-character chunks; the last one is final.
    fn run(text: &str, size: usize) -> (StreamState, Vec<StreamEvent>) {
        let mut st = StreamState::new();
        let mut events = Vec::new();
        let pieces = split_chunks(text, size);
        let n = pieces.len();
        for (i, p) in pieces.into_iter().enumerate() {
            if st.phase().is_terminal() {
                break;
            }
            let chunk = if i + 1 == n { TokenChunk::last(p, Usage::default()) } else { TokenChunk::text(p) };
            events.extend(st.feed(&chunk).unwrap());
        }
        if !st.phase().is_terminal() {
            events.extend(st.feed(&TokenChunk::last("", Usage::default())).unwrap());
        }
        (st, events)
    }

    fn terminal(events: &[StreamEvent]) -> &StreamEvent {
        events.iter().find(|e| e.is_terminal()).unwrap()
    }

    #[test]
    fn char_chunks_reach_diagram_equal_to_whole_parse() {
        let (st, events) = run(FLOW, 1);
        assert_eq!(st.phase(), Phase::Visual);
        let texts = events.iter().filter(|e| matches!(e, StreamEvent::TextAppended(_))).count();
        assert_eq!(texts, FLOW.chars().count());
        let n = events.len();
        assert_eq!(events[n - 2], StreamEvent::PhaseTransition(Phase::Visual));
        match &events[n - 1] {
            StreamEvent::DiagramReady { diagram, .. } => assert_eq!(diagram, &parse(FLOW).unwrap()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn early_completion_before_final_chunk() {
        let mut st = StreamState::new();
        let events = st.feed(&TokenChunk::text(format!("Here you go:\n{FLOW}"))).unwrap();
        assert!(matches!(events.last(), Some(StreamEvent::DiagramReady { .. })));
        assert_eq!(st.open_tag_depth(), 0);
        assert!(st.root_tag_seen());
        assert_eq!(
            st.feed(&TokenChunk::text("more")),
            Err(StreamError::FedAfterTerminal(Phase::Visual))
        );
    }

    #[test]
    fn no_completion_while_open() {
        let mut st = StreamState::new();
        let half = &FLOW[..FLOW.len() / 2];
        let events = st.feed(&TokenChunk::text(half)).unwrap();
        assert_eq!(events.len(), 1);
        assert!(st.open_tag_depth() > 0);
        assert_eq!(st.phase(), Phase::Textual);
    }

    #[test]
    fn prose_only_fails_with_no_xml() {
        let (st, events) = run("not xml at all", 4);
        assert_eq!(st.phase(), Phase::Failed);
        match terminal(&events) {
            StreamEvent::Error(o) => assert_eq!(o.issues[0].category, IssueCategory::NoXmlFound),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_last_close_tag_is_repaired() {
        let text = FLOW.strip_suffix("</mxfile>").unwrap();
        let (_, events) = run(text, 5);
        let kinds: Vec<&str> = events
            .iter()
            .filter(|e| !matches!(e, StreamEvent::TextAppended(_)))
            .map(|e| match e {
                StreamEvent::PhaseTransition(_) => "phase",
                StreamEvent::RepairApplied(_) => "repair",
                StreamEvent::DiagramReady { .. } => "diagram",
                _ => "other",
            })
            .collect();
        assert_eq!(kinds, ["phase", "repair", "diagram"]);
    }

    #[test]
    fn failed_early_attempt_waits_for_final() {
        // Duplicate attribute: the region closes but cannot be repaired.
        let bad = FLOW.replace(r#"<mxCell id="3" value="B""#, r#"<mxCell id="3" id="9" value="B""#);
        let mut st = StreamState::new();
        assert_eq!(st.feed(&TokenChunk::text(bad.clone())).unwrap().len(), 1);
        assert_eq!(st.phase(), Phase::Textual);
        let events = st.feed(&TokenChunk::last("", Usage::default())).unwrap();
        match &events[..] {
            [StreamEvent::Error(o)] => assert_eq!(o.status, OutcomeStatus::NeedsReprompt),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stop_keeps_partial_buffer() {
        let mut st = StreamState::new();
        for p in ["<mx", "file>", "<diag"] {
            st.feed(&TokenChunk::text(p)).unwrap();
        }
        assert_eq!(
            st.stop().unwrap(),
            [StreamEvent::Stopped { partial: "<mxfile><diag".into() }]
        );
        assert_eq!(st.buffer(), "<mxfile><diag");
        assert!(st.feed(&TokenChunk::text("x")).is_err());
        assert!(st.stop().is_err());

        let mut fresh = StreamState::new();
        assert_eq!(fresh.stop().unwrap(), [StreamEvent::Stopped { partial: String::new() }]);
    }

    fn responses() -> Vec<String> {
        vec![
            FLOW.to_string(),
            format!("Sure!\n```xml\n{FLOW}\n```\nAnything else?"),
            FLOW.replace("A &amp;", "A &"),
            FLOW.strip_suffix("</mxfile>").unwrap().to_string(),
            FLOW.replace(r#"target="3""#, r#"target="77""#),
            "no diagram here".to_string(),
        ]
    }

    proptest! {
        #[test]
        fn chunking_invariance(idx in 0usize..6, size in 1usize..40) {
            let text = &responses()[idx];
            let (_, whole) = run(text, usize::MAX);
            let (st, parts) = run(text, size);
            prop_assert_eq!(terminal(&parts), terminal(&whole));
            prop_assert_eq!(parts.iter().filter(|e| e.is_terminal()).count(), 1);
            let joined: String = parts.iter().filter_map(|e| match e { StreamEvent::TextAppended(t) => Some(t.as_str()), _ => None }).collect();
            prop_assert_eq!(st.buffer(), joined.as_str());
        }
    }
}
