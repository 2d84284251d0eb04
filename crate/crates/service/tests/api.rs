use std::path::Path;

use drawgen_core::provider::sse::{SseDecoder, SseEvent};
use drawgen_core::provider::{Provider, ProviderConfig};
use drawgen_core::{check_wellformed, parse};
use drawgen_service::{AppState, ServiceConfig};
use futures::StreamExt;
use reqwest::StatusCode;
use serde_json::{json, Value};
use tempfile::TempDir;

const FLOW: &str = r#"<mxfile><diagram name="Page-1"><mxGraphModel><root><mxCell id="0"/><mxCell id="1" parent="0"/><mxCell id="2" value="A" vertex="1" parent="1"/><mxCell id="3" value="B" vertex="1" parent="1"/><mxCell id="4" value="C" vertex="1" parent="1"/><mxCell id="5" edge="1" parent="1" source="2" target="3"/><mxCell id="6" edge="1" parent="1" source="3" target="4"/></root></mxGraphModel></diagram></mxfile>"#;

struct Server {
    base: String,
    state: AppState,
    client: reqwest::Client,
    dir: TempDir,
}

fn write_script(dir: &Path, entries: &str) -> std::path::PathBuf {
    std::fs::write(dir.join("flow.xml"), FLOW).unwrap();
    std::fs::write(dir.join("broken.xml"), FLOW.replace(r#"<mxCell id="3" value="B""#, r#"<mxCell id="3" id="3" value="B""#)).unwrap();
    std::fs::write(dir.join("unclosed.xml"), FLOW.strip_suffix("</mxfile>").unwrap()).unwrap();
    let path = dir.join("script.toml");
    std::fs::write(&path, format!("version = 1\n{entries}")).unwrap();
    path
}

async fn start_in(dir: TempDir, entries: &str, tweak: impl FnOnce(&mut ServiceConfig)) -> Server {
    let script = write_script(dir.path(), entries);
    let mut cfg = ServiceConfig {
        provider: ProviderConfig::mock(script),
        ..ServiceConfig::default()
    };
    tweak(&mut cfg);
    let state = AppState::new(&cfg).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let serving = state.clone();
    tokio::spawn(async move { drawgen_service::serve(listener, serving, Some("http://ui.local")).await });
    Server {
        base,
        state,
        client: reqwest::Client::new(),
        dir,
    }
}

async fn start(entries: &str) -> Server {
    start_in(tempfile::tempdir().unwrap(), entries, |_| {}).await
}

impl Server {
    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn create(&self) -> String {
        let r = self.client.post(self.url("/api/sessions")).send().await.unwrap();
        assert_eq!(r.status(), StatusCode::CREATED);
        r.json::<Value>().await.unwrap()["session_id"].as_str().unwrap().to_string()
    }

    async fn post_chat(&self, id: &str, body: Value) -> reqwest::Response {
        self.client
            .post(self.url(&format!("/api/sessions/{id}/chat")))
            .json(&body)
            .send()
            .await
            .unwrap()
    }

    async fn chat(&self, id: &str, text: &str) -> (StatusCode, Vec<SseEvent>) {
        let r = self.post_chat(id, json!({ "text": text })).await;
        let status = r.status();
        if status != StatusCode::OK {
            return (status, Vec::new());
        }
        let body = r.text().await.unwrap();
        (status, drawgen_core::provider::sse::decode_all(&body))
    }

    async fn history_len(&self, id: &str) -> usize {
        let r = self.client.get(self.url(&format!("/api/sessions/{id}/history"))).send().await.unwrap();
        r.json::<Vec<Value>>().await.unwrap().len()
    }

    async fn diagram(&self, id: &str) -> String {
        self.client
            .get(self.url(&format!("/api/sessions/{id}/diagram")))
            .send()
            .await
            .unwrap()
            .text()
            .await
            .unwrap()
    }
}

/// text* phase? repair? (diagram|error) done
fn assert_order(events: &[SseEvent]) {
    let names: Vec<&str> = events.iter().map(|e| e.event.as_str()).collect();
    let mut i = 0;
    while names.get(i) == Some(&"text") {
        i += 1;
    }
    if names.get(i) == Some(&"phase") {
        i += 1;
    }
    if names.get(i) == Some(&"repair") {
        i += 1;
    }
    assert!(matches!(names.get(i), Some(&"diagram") | Some(&"error")), "{names:?}");
    assert_eq!(names.get(i + 1), Some(&"done"), "{names:?}");
    assert_eq!(names.len(), i + 2, "{names:?}");
}

fn done(events: &[SseEvent]) -> Value {
    serde_json::from_str(&events.last().unwrap().data).unwrap()
}

fn streamed_text(events: &[SseEvent]) -> String {
    events
        .iter()
        .filter(|e| e.event == "text")
        .map(|e| serde_json::from_str::<String>(&e.data).unwrap())
        .collect()
}

const FLOW_ENTRY: &str = "[[entry]]\nmatch = \"A -> B -> C\"\nresponse_file = \"flow.xml\"\n";

#[tokio::test]
async fn create_and_fetch_skeleton() {
    let s = start("").await;
    let a = s.create().await;
    let b = s.create().await;
    assert_ne!(a, b);
    assert_eq!(a.len(), 32);
    let r = s.client.get(s.url(&format!("/api/sessions/{a}/diagram"))).send().await.unwrap();
    assert_eq!(r.headers()["content-type"], "application/xml");
    let d = parse(&r.text().await.unwrap()).unwrap();
    assert_eq!(d.cells.len(), 2);
    assert_eq!(s.history_len(&a).await, 1);
}

#[tokio::test]
async fn session_limit() {
    let s = start_in(tempfile::tempdir().unwrap(), "", |c| c.max_sessions = 2).await;
    s.create().await;
    s.create().await;
    let r = s.client.post(s.url("/api/sessions")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn unknown_session_is_404() {
    let s = start("").await;
    for r in [
        s.client.get(s.url("/api/sessions/nope/diagram")).send().await.unwrap(),
        s.client.get(s.url("/api/sessions/nope/history")).send().await.unwrap(),
        s.post_chat("nope", json!({"text": "x"})).await,
        s.client.delete(s.url("/api/sessions/nope/chat")).send().await.unwrap(),
    ] {
        assert_eq!(r.status(), StatusCode::NOT_FOUND);
        assert_eq!(r.json::<Value>().await.unwrap()["error"]["kind"], "not_found");
    }
}

#[tokio::test]
async fn flowchart_round() {
    let s = start(FLOW_ENTRY).await;
    let id = s.create().await;
    let (status, events) = s.chat(&id, "Draw a flowchart with A -> B -> C.").await;
    assert_eq!(status, StatusCode::OK);
    assert_order(&events);
    let names: Vec<&str> = events.iter().map(|e| e.event.as_str()).collect();
    assert!(names.iter().filter(|n| **n == "text").count() > 1);
    assert_eq!(&names[names.len() - 3..], ["phase", "diagram", "done"]);
    assert_eq!(events[names.len() - 3].data, "visual");
    assert_eq!(streamed_text(&events), FLOW);

    let xml = &events[names.len() - 2].data;
    assert!(check_wellformed(xml).is_empty());
    let d = parse(xml).unwrap();
    assert_eq!((d.vertices().count(), d.edges().count()), (3, 2));
    let done = done(&events);
    assert_eq!(done["status"], "ok");
    assert_eq!(done["correction_iterations"], 0);
    assert_eq!(done["version"], 1);

    assert_eq!(s.history_len(&id).await, 2);
    assert_eq!(&s.diagram(&id).await, xml);
    let log: Vec<Value> = s
        .client
        .get(s.url(&format!("/api/sessions/{id}/history")))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(log[1]["summary"], "+3 vertices (A, B, C), +2 edges");
    assert_eq!(log[1]["origin"], "user_prompt");
    let mut keys: Vec<&String> = log[1].as_object().unwrap().keys().collect();
    keys.sort();
    assert_eq!(keys, ["origin", "summary", "timestamp", "version"]);
}

#[tokio::test]
async fn follow_up_round_carries_context() {
    let s = start(&format!("{FLOW_ENTRY}[[entry]]\nmatch = \"rename\"\nresponse_file = \"flow.xml\"\n")).await;
    let id = s.create().await;
    s.chat(&id, "A -> B -> C").await;
    s.chat(&id, "rename A").await;
    let reqs = s.state.settings().provider().mock().unwrap().requests();
    assert_eq!(reqs.len(), 2);
    let second = &reqs[1].bundle;
    assert!(second.last_user_text().contains("<<<CURRENT_DIAGRAM>>>"));
    assert!(second.turns.iter().any(|t| t.text == "A -> B -> C"));
    assert_eq!(s.history_len(&id).await, 3);
}

#[tokio::test]
async fn repair_event_precedes_diagram() {
    let s = start("[[entry]]\nmatch = \"\"\nresponse_file = \"unclosed.xml\"\n").await;
    let id = s.create().await;
    let (_, events) = s.chat(&id, "flow").await;
    assert_order(&events);
    let repair = events.iter().find(|e| e.event == "repair").unwrap();
    let issues: Vec<Value> = serde_json::from_str(&repair.data).unwrap();
    assert!(issues.iter().all(|i| i["repaired"] == true));
    assert_eq!(s.history_len(&id).await, 2);
}

#[tokio::test]
async fn self_correction_is_transparent() {
    let s = start(
        "[[entry]]\nmatch = \"flow\"\nresponse_file = \"broken.xml\"\n[[entry]]\nmatch = \"previous output\"\nresponse_file = \"flow.xml\"\n",
    )
    .await;
    let id = s.create().await;
    let (_, events) = s.chat(&id, "flow").await;
    assert_order(&events);
    let done = done(&events);
    assert_eq!(done["status"], "ok");
    assert_eq!(done["correction_iterations"], 1);
    assert_eq!(s.history_len(&id).await, 2);
}

#[tokio::test]
async fn unrecoverable_response_appends_nothing() {
    let s = start("[default]\nresponse_file = \"broken.xml\"\n").await;
    let id = s.create().await;
    let (_, events) = s.chat(&id, "flow").await;
    assert_order(&events);
    let err: Value = serde_json::from_str(&events[events.len() - 2].data).unwrap();
    assert_eq!(err["kind"], "validation");
    assert!(!err["issues"].as_array().unwrap().is_empty());
    let done = done(&events);
    assert_eq!(done["status"], "failed");
    assert_eq!(done["correction_iterations"], 1);
    assert_eq!(s.history_len(&id).await, 1);
}

#[tokio::test]
async fn injected_transport_error_mid_stream() {
    let s = start("[[entry]]\nmatch = \"\"\nresponse_file = \"flow.xml\"\ninject_error = { at_chunk = 3, kind = \"transport\" }\n").await;
    let id = s.create().await;
    let (status, events) = s.chat(&id, "flow").await;
    assert_eq!(status, StatusCode::OK);
    assert_order(&events);
    assert_eq!(events.iter().filter(|e| e.event == "text").count(), 2);
    let err: Value = serde_json::from_str(&events[events.len() - 2].data).unwrap();
    assert_eq!(err["kind"], "transport");
    assert_eq!(err["status"], 502);
    assert_eq!(done(&events)["status"], "failed");
    assert_eq!(s.history_len(&id).await, 1);
}

#[tokio::test]
async fn provider_failure_before_streaming_is_502() {
    // No entry matches and there is no default.
    let s = start("[[entry]]\nmatch = \"something else\"\nresponse = \"x\"\n").await;
    let id = s.create().await;
    let r = s.post_chat(&id, json!({"text": "flow"})).await;
    assert_eq!(r.status(), StatusCode::BAD_GATEWAY);
    assert_eq!(r.json::<Value>().await.unwrap()["error"]["kind"], "protocol");
    assert_eq!(s.history_len(&id).await, 1);
    // The session is free again.
    assert_eq!(s.post_chat(&id, json!({"text": "flow"})).await.status(), StatusCode::BAD_GATEWAY);
}

async fn next_event(body: &mut (impl futures::Stream<Item = reqwest::Result<bytes::Bytes>> + Unpin), d: &mut SseDecoder, buf: &mut Vec<SseEvent>) -> SseEvent {
    loop {
        if !buf.is_empty() {
            return buf.remove(0);
        }
        let chunk = body.next().await.expect("stream ended").unwrap();
        buf.extend(d.feed(&chunk));
    }
}

const SLOW_ENTRY: &str = "[[entry]]\nmatch = \"\"\nresponse_file = \"flow.xml\"\nchunk_size = 8\ndelay_ms = 30\n";

#[tokio::test]
async fn concurrent_generation_is_409() {
    let s = start(SLOW_ENTRY).await;
    let id = s.create().await;
    let other = s.create().await;
    let first = s.post_chat(&id, json!({"text": "flow"})).await;
    assert_eq!(first.status(), StatusCode::OK);
    let second = s.post_chat(&id, json!({"text": "flow"})).await;
    assert_eq!(second.status(), StatusCode::CONFLICT);
    // Other sessions are unaffected.
    assert_eq!(s.post_chat(&other, json!({"text": ""})).await.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let events = drawgen_core::provider::sse::decode_all(&first.text().await.unwrap());
    assert_order(&events);
    assert_eq!(s.history_len(&id).await, 2);
}

#[tokio::test]
async fn stop_mid_stream() {
    let s = start(SLOW_ENTRY).await;
    let id = s.create().await;
    let before = s.diagram(&id).await;
    let idle = s.client.delete(s.url(&format!("/api/sessions/{id}/chat"))).send().await.unwrap();
    assert_eq!(idle.status(), StatusCode::NOT_FOUND);

    let r = s.post_chat(&id, json!({"text": "flow"})).await;
    let mut body = r.bytes_stream();
    let mut dec = SseDecoder::new();
    let mut buf = Vec::new();
    let mut events = vec![next_event(&mut body, &mut dec, &mut buf).await];
    assert_eq!(events[0].event, "text");
    let stop = s.client.delete(s.url(&format!("/api/sessions/{id}/chat"))).send().await.unwrap();
    assert_eq!(stop.status(), StatusCode::ACCEPTED);
    loop {
        let e = next_event(&mut body, &mut dec, &mut buf).await;
        let last = e.event == "done";
        events.push(e);
        if last {
            break;
        }
    }
    assert_order(&events);
    let err: Value = serde_json::from_str(&events[events.len() - 2].data).unwrap();
    assert_eq!(err["kind"], "stopped");
    assert!(FLOW.starts_with(err["partial"].as_str().unwrap()));
    assert_eq!(done(&events)["status"], "stopped");
    assert!(streamed_text(&events).len() < FLOW.len());
    assert_eq!(s.history_len(&id).await, 1);
    assert_eq!(s.diagram(&id).await, before);
}

#[tokio::test]
async fn restore_and_import() {
    let s = start(FLOW_ENTRY).await;
    let id = s.create().await;
    let empty = s.diagram(&id).await;
    s.chat(&id, "A -> B -> C").await;
    let r = s.client.post(s.url(&format!("/api/sessions/{id}/history/0/restore"))).send().await.unwrap();
    let body: Value = r.json().await.unwrap();
    assert_eq!(body["version"], 2);
    assert_eq!(body["xml"], empty);
    assert_eq!(s.diagram(&id).await, empty);
    let v1 = s.client.get(s.url(&format!("/api/sessions/{id}/history/1"))).send().await.unwrap();
    assert_eq!(parse(&v1.text().await.unwrap()).unwrap().vertices().count(), 3);

    let missing = s.client.post(s.url(&format!("/api/sessions/{id}/history/99/restore"))).send().await.unwrap();
    assert_eq!(missing.status(), StatusCode::NOT_FOUND);
    assert_eq!(
        s.client.get(s.url(&format!("/api/sessions/{id}/history/99"))).send().await.unwrap().status(),
        StatusCode::NOT_FOUND
    );

    let imported = s
        .client
        .post(s.url(&format!("/api/sessions/{id}/history")))
        .json(&json!({"xml": FLOW, "summary": "edited in editor"}))
        .send()
        .await
        .unwrap();
    assert_eq!(imported.status(), StatusCode::CREATED);
    assert_eq!(imported.json::<Value>().await.unwrap()["version"], 3);
    let bad = s
        .client
        .post(s.url(&format!("/api/sessions/{id}/history")))
        .json(&json!({"xml": "<mxfile"}))
        .send()
        .await
        .unwrap();
    assert_eq!(bad.status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(s.history_len(&id).await, 4);
}

#[tokio::test]
async fn settings_roundtrip() {
    let s = start(FLOW_ENTRY).await;
    let get = || async { s.client.get(s.url("/api/settings")).send().await.unwrap().json::<Value>().await.unwrap() };
    let initial = get().await;
    assert_eq!(initial["provider"]["temperature"], 0.2);
    assert_eq!(initial["api_key_set"], false);

    let put = |body: Value| {
        let req = s.client.put(s.url("/api/settings")).json(&body);
        async move { req.send().await.unwrap() }
    };
    assert_eq!(put(json!({"provider": {"temperature": 3.0}})).await.status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(put(json!({"layout": {"node_gap": -1.0}})).await.status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(put(json!({"bogus": 1})).await.status(), StatusCode::UNPROCESSABLE_ENTITY);

    let ok = put(json!({"provider": {"temperature": 0.3}, "layout": {"orientation": "vertical"}, "api_key": "sk-write-only"})).await;
    assert_eq!(ok.status(), StatusCode::OK);
    assert!(!ok.text().await.unwrap().contains("sk-write-only"));
    let after = get().await;
    assert_eq!(after["provider"]["temperature"], 0.3);
    assert_eq!(after["layout"]["orientation"], "vertical");
    assert_eq!(after["api_key_set"], true);
    assert!(!after.to_string().contains("sk-write-only"));

    let id = s.create().await;
    let (_, events) = s.chat(&id, "A -> B -> C").await;
    let reqs = s.state.settings().provider().mock().unwrap().requests();
    assert_eq!(reqs.last().unwrap().temperature, 0.3);
    assert!(reqs[0].bundle.turns[0].text.contains("top to bottom"));
    // Vertical layout stacks layers downwards.
    let d = parse(&events[events.len() - 2].data).unwrap();
    let ys: Vec<f64> = d.vertices().map(|v| v.geometry.as_ref().unwrap().y).collect();
    assert!(ys[0] < ys[1] && ys[1] < ys[2]);
}

#[tokio::test]
async fn image_round_streams_description_first() {
    let s = start(
        "[[entry]]\nmatch = \"connections\"\nresponse = \"A\\nB\\nC\\nA -> B\\nB -> C\\n\"\n[[entry]]\nmatch = \"B -> C\"\nresponse_file = \"flow.xml\"\n",
    )
    .await;
    let id = s.create().await;
    let png = base64::Engine::encode(&base64::engine::general_purpose::STANDARD, [0x89, b'P', b'N', b'G', 1, 2, 3]);
    let r = s.post_chat(&id, json!({"text": "Replicate this", "image": format!("data:image/png;base64,{png}")})).await;
    let events = drawgen_core::provider::sse::decode_all(&r.text().await.unwrap());
    assert_order(&events);
    assert!(streamed_text(&events).starts_with("A\nB\nC\nA -> B\nB -> C\n"));
    assert_eq!(done(&events)["status"], "ok");
    let reqs = s.state.settings().provider().mock().unwrap().requests();
    assert_eq!(reqs.len(), 2);
    assert_eq!(reqs[0].bundle.turns[1].image.as_ref().unwrap().media_type, "image/png");

    let bad = s.post_chat(&id, json!({"text": "x", "image": "!!!"})).await;
    assert_eq!(bad.status(), StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn history_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let data2 = data.clone();
    let s = start_in(dir, FLOW_ENTRY, move |c| c.data_dir = Some(data2)).await;
    let id = s.create().await;
    s.chat(&id, "A -> B -> C").await;
    let xml = s.diagram(&id).await;

    let cfg = ServiceConfig {
        data_dir: Some(data),
        provider: ProviderConfig::mock(s.dir.path().join("script.toml")),
        ..ServiceConfig::default()
    };
    let reloaded = AppState::new(&cfg).unwrap();
    assert_eq!(reloaded.session_ids(), std::slice::from_ref(&id));
    let session = reloaded.session(&id).unwrap();
    assert_eq!(session.with_history(|h| h.len()), 2);
    assert_eq!(session.with_history(|h| h.head().unwrap().xml_snapshot.clone()), xml);
}

#[tokio::test]
async fn cors_allows_configured_origin() {
    let s = start("").await;
    let r = s
        .client
        .request(reqwest::Method::OPTIONS, s.url("/api/settings"))
        .header("origin", "http://ui.local")
        .header("access-control-request-method", "PUT")
        .send()
        .await
        .unwrap();
    assert_eq!(r.headers()["access-control-allow-origin"], "http://ui.local");
}

#[tokio::test]
async fn with_provider_shares_mock_handle() {
    let dir = tempfile::tempdir().unwrap();
    let script = write_script(dir.path(), FLOW_ENTRY);
    let cfg = ServiceConfig {
        provider: ProviderConfig::mock(&script),
        ..ServiceConfig::default()
    };
    let provider = Provider::from_config(&cfg.provider).unwrap();
    let state = AppState::with_provider(&cfg, provider.clone()).unwrap();
    assert_eq!(state.settings().provider().mock().unwrap().remaining(), provider.mock().unwrap().remaining());
}
