//! Incremental server-sent-events decoder.

/// One dispatched event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SseEvent {
    /// `event:` field; `"message"` when absent.
    pub event: String,
    /// `data:` lines joined with `\n`.
    pub data: String,
}

/// Feed bytes as they arrive; complete events come out in order. Partial
/// lines (including split UTF-8 sequences) are held until their newline.
#[derive(Debug, Default)]
pub struct SseDecoder {
    pending: Vec<u8>,
    event: Option<String>,
    data: Vec<String>,
}

impl SseDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn feed(&mut self, bytes: &[u8]) -> Vec<SseEvent> {
        self.pending.extend_from_slice(bytes);
        let mut out = Vec::new();
        while let Some(nl) = self.pending.iter().position(|b| *b == b'\n') {
            let mut line: Vec<u8> = self.pending.drain(..=nl).collect();
            line.pop();
            if line.last() == Some(&b'\r') {
                line.pop();
            }
            let line = String::from_utf8_lossy(&line).into_owned();
            self.line(&line, &mut out);
        }
        out
    }

    /// Flushes an event left unterminated at end of stream.
    pub fn finish(&mut self) -> Option<SseEvent> {
        if !self.pending.is_empty() {
            let rest = String::from_utf8_lossy(&std::mem::take(&mut self.pending)).into_owned();
            let mut out = Vec::new();
            self.line(rest.trim_end_matches('\r'), &mut out);
            if let Some(e) = out.pop() {
                return Some(e);
            }
        }
        self.dispatch()
    }

    fn line(&mut self, line: &str, out: &mut Vec<SseEvent>) {
        if line.is_empty() {
            out.extend(self.dispatch());
            return;
        }
        if line.starts_with(':') {
            return;
        }
        let (field, value) = match line.split_once(':') {
            Some((f, v)) => (f, v.strip_prefix(' ').unwrap_or(v)),
            None => (line, ""),
        };
        match field {
            "event" => self.event = Some(value.to_string()),
            "data" => self.data.push(value.to_string()),
            _ => {}
        }
    }

    fn dispatch(&mut self) -> Option<SseEvent> {
        let event = self.event.take();
        if self.data.is_empty() && event.is_none() {
            return None;
        }
        Some(SseEvent {
            event: event.unwrap_or_else(|| "message".to_string()),
            data: std::mem::take(&mut self.data).join("\n"),
        })
    }
}

/// Decodes a complete SSE body.
pub fn decode_all(body: &str) -> Vec<SseEvent> {
    let mut d = SseDecoder::new();
    let mut events = d.feed(body.as_bytes());
    events.extend(d.finish());
    events
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn events_and_multiline_data() {
        let got = decode_all("event: text\ndata: hello\n\n: comment\ndata: a\ndata: b\n\n");
        assert_eq!(
            got,
            [
                SseEvent { event: "text".into(), data: "hello".into() },
                SseEvent { event: "message".into(), data: "a\nb".into() },
            ]
        );
    }

    #[test]
    fn crlf_and_unterminated_tail() {
        let got = decode_all("data: x\r\n\r\ndata: tail");
        assert_eq!(got.len(), 2);
        assert_eq!(got[1].data, "tail");
    }

    proptest! {
        #[test]
        fn split_points_do_not_matter(cut in 0usize..60) {
            let body = "event: text\ndata: héllo wörld\n\nevent: done\ndata: {\"ok\":true}\n\n";
            let bytes = body.as_bytes();
            let cut = cut.min(bytes.len());
            let mut d = SseDecoder::new();
            let mut got = d.feed(&bytes[..cut]);
            got.extend(d.feed(&bytes[cut..]));
            prop_assert_eq!(got, decode_all(body));
        }
    }
}
