//! Remote policy and tool backends against a local HTTP stub.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use serde_json::{json, Map, Value};

use weaver::history::{HistoryState, Question, TokenCosts, VideoMeta};
use weaver::policy::{PolicyBackend, PolicyRequest, RemotePolicy, SamplingParams};
use weaver::protocol::ToolCall;
use weaver::toolkit::remote::RemoteToolBackend;
use weaver::toolkit::{ToolConfig, ToolStatus, Toolkit};

/// Serves `replies` in order, one per connection, and sends back each
/// request body it received.
fn serve(replies: Vec<Value>) -> (String, mpsc::Receiver<Value>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for reply in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        length = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0u8; length];
            reader.read_exact(&mut body).unwrap();
            tx.send(serde_json::from_slice(&body).unwrap()).unwrap();
            let payload = reply.to_string();
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            )
            .unwrap();
        }
    });
    (url, rx)
}

fn video() -> VideoMeta {
    VideoMeta {
        video_id: "world-7".into(),
        duration_s: 120.0,
        fps: 30.0,
        width: 640,
        height: 360,
    }
}

#[test]
fn chat_policy_round_trip() {
    let (url, requests) = serve(vec![json!({
        "choices": [{"message": {"role": "assistant", "content": "<answer>B</answer>"}}]
    })]);
    let q = Question::multiple_choice("How many times?", vec!["1".into(), "2".into()], 'B');
    let costs = TokenCosts::default();
    let h = HistoryState::init(&q, &video(), 4, "system text", &costs).unwrap();
    let ctx = h.assemble_context(8192).unwrap();
    let policy = RemotePolicy::new(url, "test-model", Duration::from_secs(5), 0);
    let request = PolicyRequest {
        context: &ctx,
        sampling: SamplingParams::default(),
        turn: 0,
    };
    assert_eq!(policy.next_response(&request).unwrap(), "<answer>B</answer>");

    let body = requests.recv().unwrap();
    assert_eq!(body["model"], "test-model");
    let messages = body["messages"].as_array().unwrap();
    assert_eq!(messages[0]["role"], "system");
    assert_eq!(messages[0]["content"], "system text");
    assert_eq!(messages[1]["role"], "user");
    let parts = messages[1]["content"].as_array().unwrap();
    assert_eq!(parts[0]["type"], "text");
    let frames: Vec<&str> = parts[1..]
        .iter()
        .map(|p| p["image_url"]["url"].as_str().unwrap())
        .collect();
    assert_eq!(frames.len(), 4);
    assert!(frames[0].starts_with("frame://world-7?t="));
}

#[test]
fn tool_server_spans_are_resampled() {
    let (url, requests) = serve(vec![json!({
        "status": "ok",
        "spans": [[30.0, 33.0], [70.0, 74.0], [200.0, 210.0]],
        "note": "count=2"
    })]);
    let toolkit = Toolkit::new(
        std::sync::Arc::new(RemoteToolBackend::new(url, Duration::from_secs(5), 0)),
        ToolConfig::default(),
    );
    let mut args = Map::new();
    args.insert("query".into(), json!("dog enters"));
    let result = toolkit.dispatch(&ToolCall::new("temporal_count", args), &video());
    assert_eq!(result.status, ToolStatus::Ok);
    let clip = result.clip.unwrap();
    // The out-of-video span is dropped; the rest sit on the 1 fps grid.
    assert_eq!(clip.frame_times, vec![30.0, 31.0, 32.0, 70.0, 71.0, 72.0, 73.0]);
    assert_eq!(result.note, "count=2");

    let body = requests.recv().unwrap();
    assert_eq!(body["tool"], "temporal_count");
    assert_eq!(body["video"], "world-7");
    assert_eq!(body["arguments"]["query"], "dog enters");
}

#[test]
fn unreachable_tool_server_is_not_found() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let toolkit = Toolkit::new(
        std::sync::Arc::new(RemoteToolBackend::new(format!("http://127.0.0.1:{port}/"), Duration::from_secs(2), 0)),
        ToolConfig::default(),
    );
    let result = toolkit.dispatch(&ToolCall::new("trim", json!({"start_s": 1.0, "end_s": 3.0}).as_object().unwrap().clone()), &video());
    assert_eq!(result.status, ToolStatus::NotFound);
    assert!(result.note.contains("backend unavailable"));
}
