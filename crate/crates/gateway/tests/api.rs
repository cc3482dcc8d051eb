mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use futures::{SinkExt, StreamExt};
use http_body_util::BodyExt;
use infohub_core::store::IngestOptions;
use infohub_gateway::api::router;
use infohub_gateway::{server, Hub, HubConfig};
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;
use tower::ServiceExt;

use common::{memory_config, memory_hub, POSTER};

async fn call(hub: &Arc<Hub>, method: Method, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty)).unwrap();
    let resp = router(Arc::clone(hub)).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

#[tokio::test]
async fn teach_matches_direct_ingest() {
    let hub = memory_hub();
    let (status, body) =
        call(&hub, Method::POST, "/teach", Some(&json!({"text": POSTER, "share": true}).to_string())).await;
    assert_eq!(status, StatusCode::OK);

    let direct = memory_hub();
    let ids = direct.store().ingest(POSTER, &IngestOptions::session("console").shared(true)).unwrap();
    assert_eq!(body["chunk_ids"], json!(ids));
    assert_eq!(body["store_size"], json!(ids.len()));
}

#[tokio::test]
async fn ask_on_empty_store_is_below_threshold() {
    let hub = memory_hub();
    let (status, body) = call(&hub, Method::POST, "/ask", Some(r#"{"question": "what is this?"}"#)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["below_threshold"], true);
    assert_eq!(body["citations"], json!([]));
    assert_eq!(body["text"], hub.engine().config().fallback_text);
}

#[tokio::test]
async fn ask_equals_direct_engine_call() {
    let hub = memory_hub();
    hub.teach(POSTER, &[], false, "p").unwrap();
    let q = "what do visitors do";
    let (_, body) = call(&hub, Method::POST, "/ask", Some(&json!({"question": q}).to_string())).await;
    let direct = hub.engine().ask(q).unwrap();
    assert_eq!(body, serde_json::to_value(&direct).unwrap());
    assert!(!direct.citations.is_empty());
}

#[tokio::test]
async fn chunk_filter_and_consent_toggle() {
    let hub = memory_hub();
    hub.teach("Shared sentence one.", &["a".into()], true, "p").unwrap();
    let private = hub.teach("Private sentence two.", &[], false, "p").unwrap();

    let (_, shared) = call(&hub, Method::GET, "/chunks?shareable=true", None).await;
    let shared = shared.as_array().unwrap();
    assert_eq!(shared.len(), 1);
    assert!(shared.iter().all(|c| c["shareable"] == true));
    let (_, tagged) = call(&hub, Method::GET, "/chunks?tag=a", None).await;
    assert_eq!(tagged.as_array().unwrap().len(), 1);
    let (_, all) = call(&hub, Method::GET, "/chunks", None).await;
    assert_eq!(all.as_array().unwrap().len(), 2);

    let uri = format!("/chunks/{}", private[0]);
    let (status, patched) = call(&hub, Method::PATCH, &uri, Some(r#"{"shareable": true}"#)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(patched["shareable"], true);
    let (_, fetched) = call(&hub, Method::GET, &uri, None).await;
    assert_eq!(fetched["shareable"], true);

    let (status, _) =
        call(&hub, Method::PATCH, &format!("/chunks/{}", "0".repeat(64)), Some(r#"{"shareable": true}"#)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&hub, Method::GET, "/chunks?shareable=maybe", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn malformed_json_is_400_with_error_body() {
    let hub = memory_hub();
    for (uri, body) in [("/teach", "{not json"), ("/ask", r#"{"q": 1}"#), ("/teach", r#"{"text": ""}"#)] {
        let (status, value) = call(&hub, Method::POST, uri, Some(body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{uri} {body}");
        assert!(value["error"].is_string(), "{value}");
    }
}

#[tokio::test]
async fn forget_session_removes_its_chunks() {
    let hub = memory_hub();
    hub.teach("Alpha says one thing.", &[], false, "s1").unwrap();
    hub.teach("Beta says another thing.", &[], false, "s2").unwrap();
    let (status, body) = call(&hub, Method::DELETE, "/sessions/s1/knowledge", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["removed"], 1);
    assert_eq!(hub.store().len(), 1);
}

#[tokio::test]
async fn peers_round_trip() {
    let hub = memory_hub();
    let (_, empty) = call(&hub, Method::GET, "/peers", None).await;
    assert_eq!(empty, json!([]));
    let (status, list) =
        call(&hub, Method::POST, "/peers", Some(r#"{"hub_id": "b", "address": "10.0.0.2:7171"}"#)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(list[0]["hub_id"], "b");
    assert_eq!(list[0]["status"]["last_attempt"], Value::Null);
}

#[tokio::test]
async fn survey_flow_and_export() {
    let hub = memory_hub();
    let def = json!({
        "id": "visit", "title": "Visit", "version": 1,
        "questions": [
            {"id": "q1", "prompt": "How was it, 1 to 5?", "kind": "scale_1_to_5"},
            {"id": "q2", "prompt": "Anything else?", "kind": "free_text"}
        ]
    });
    let (status, _) = call(&hub, Method::POST, "/surveys", Some(&def.to_string())).await;
    assert_eq!(status, StatusCode::CREATED);
    let (status, _) = call(&hub, Method::POST, "/surveys/nope/start", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (_, start) = call(&hub, Method::POST, "/surveys/visit/start", Some(r#"{"session": "v1"}"#)).await;
    assert_eq!(start["step"], "prompt");
    let run = start["run_id"].as_str().unwrap().to_string();
    let submit = format!("/surveys/runs/{run}/submit");
    let (_, step) = call(&hub, Method::POST, &submit, Some(r#"{"utterance": "great"}"#)).await;
    assert_eq!(step["step"], "reprompt");
    let (_, step) = call(&hub, Method::POST, &submit, Some(r#"{"utterance": "4"}"#)).await;
    assert_eq!(step["question_id"], "q2");
    let (_, step) = call(&hub, Method::POST, &submit, Some(r#"{"utterance": "lovely robot"}"#)).await;
    assert_eq!(step["step"], "done");
    assert_eq!(step["status"], "complete");
    let (status, _) = call(&hub, Method::POST, &submit, Some(r#"{"utterance": "late"}"#)).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (status, body) = call(&hub, Method::GET, "/export/surveys", None).await;
    assert_eq!(status, StatusCode::OK);
    let line: Value = match body {
        Value::String(s) => serde_json::from_str(s.lines().next().unwrap()).unwrap(),
        v => v,
    };
    assert_eq!(line["run_id"], run);
    assert_eq!(line["answers"][0]["parsed"], 4);
}

#[tokio::test]
async fn events_export_and_health() {
    let hub = memory_hub();
    hub.teach("Some fact to log.", &[], false, "p").unwrap();
    let (status, body) = call(&hub, Method::GET, "/export/events", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["kind"], "ingest");
    let (_, health) = call(&hub, Method::GET, "/healthz", None).await;
    assert_eq!(health["status"], "ok");
    assert_eq!(health["chunks"], 1);
}

#[tokio::test]
async fn static_console_is_served() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<h1>console</h1>").unwrap();
    let hub = Hub::open(HubConfig { static_dir: dir.path().display().to_string(), ..memory_config() }).unwrap();
    let (status, body) = call(&hub, Method::GET, "/index.html", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, Value::String("<h1>console</h1>".into()));
}

#[tokio::test]
async fn console_socket_chats_and_streams_events() {
    let hub = memory_hub();
    hub.teach(POSTER, &[], false, "p").unwrap();
    let running = server::start(Arc::clone(&hub)).await.unwrap();
    let url = format!("ws://{}/ws/console", running.http_addr);
    let (mut ws, _) = tokio_tungstenite::connect_async(url).await.unwrap();

    ws.send(Message::Text(
        json!({"type": "chat", "session": "tab-1", "text": "hey suzume chan what do visitors do"}).to_string().into(),
    ))
    .await
    .unwrap();
    // Events and the chat result may interleave in either order.
    let (mut saw_event, mut result) = (false, None);
    while !saw_event || result.is_none() {
        let msg = ws.next().await.unwrap().unwrap();
        let v: Value = serde_json::from_str(msg.to_text().unwrap()).unwrap();
        match v["type"].as_str().unwrap() {
            "event" => saw_event = true,
            "chat_result" => result = Some(v),
            other => panic!("unexpected {other}"),
        }
    }
    let result = result.unwrap();
    assert_eq!(result["session"], "tab-1");
    let kinds: Vec<&str> = result["actions"].as_array().unwrap().iter().map(|a| a["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["woke", "answered"]);
    assert!(!result["actions"][1]["answer"]["citations"].as_array().unwrap().is_empty());

    ws.send(Message::Text(r#"{"type": "bogus"}"#.into())).await.unwrap();
    loop {
        let v: Value = serde_json::from_str(ws.next().await.unwrap().unwrap().to_text().unwrap()).unwrap();
        if v["type"] == "error" {
            break;
        }
    }
    ws.close(None).await.unwrap();
    running.shutdown().await.unwrap();
}
