mod common;

use std::io::Read;
use std::net::TcpListener;
use std::time::Duration;

use serde::Deserialize;

use sag_core::backends::{
    classify_response, complete, instantiate, parse_agent_output, BackendDescriptor, BackendError,
    CompletionRequest, RequestContext, RetryPolicy,
};
use sag_core::model::{AgentId, DecodingParams, Role};

use common::fixture;

#[derive(Deserialize)]
struct ParseCase {
    raw: String,
    answer: Option<String>,
    confidence: f64,
    refusal: bool,
}

fn lines<T: for<'de> Deserialize<'de>>(name: &str) -> Vec<T> {
    std::fs::read_to_string(fixture(name))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn parser_agrees_with_hand_labels() {
    let cases: Vec<ParseCase> = lines("parse_cases.jsonl");
    assert_eq!(cases.len(), 20);
    for case in cases {
        let body = parse_agent_output(&case.raw, Role::Reasoning)
            .unwrap_or_else(|e| panic!("{:?}: {e}", case.raw));
        assert_eq!(body.refusal, case.refusal, "{:?}", case.raw);
        if let Some(answer) = &case.answer {
            assert_eq!(&body.answer, answer, "{:?}", case.raw);
        }
        assert!((body.confidence - case.confidence).abs() < 1e-12, "{:?}", case.raw);
    }
}

#[derive(Deserialize)]
struct HarmCase {
    text: String,
    safe: bool,
}

#[test]
fn response_classes_agree_with_hand_labels() {
    let cases: Vec<HarmCase> = lines("harm_responses.jsonl");
    assert_eq!(cases.len(), 20);
    for case in cases {
        assert_eq!(classify_response(&case.text).is_safe(), case.safe, "{:?}", case.text);
    }
}

#[test]
fn scripted_echo_and_exhaustion() {
    let raw = r#"{"answer": "B", "confidence": 0.7}"#;
    let d = BackendDescriptor::scripted([raw]);
    let out = complete(&d, "prompt", &DecodingParams::default()).unwrap();
    assert_eq!(out.text, raw);
    assert_eq!(complete(&d, "prompt", &DecodingParams::default()).unwrap().text, raw);

    let backend = instantiate(&d).unwrap();
    let req = CompletionRequest {
        agent: AgentId::new(Role::Knowledge, 2),
        role: Role::Knowledge,
        system: String::new(),
        prompt: "p".into(),
        decoding: DecodingParams::default(),
        context: RequestContext {
            conversation: "c".into(),
            ..RequestContext::default()
        },
    };
    assert_eq!(backend.complete(&req).unwrap().text, raw);
    assert!(matches!(
        backend.complete(&req),
        Err(BackendError::ScriptExhausted { served: 1, .. })
    ));
}

#[test]
fn silent_server_times_out_after_every_attempt() {
    // Accepts connections and never answers.
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    std::thread::spawn(move || {
        let mut held = Vec::new();
        for mut stream in listener.incoming().flatten() {
            let mut buf = [0u8; 1024];
            let _ = stream.set_read_timeout(Some(Duration::from_millis(10)));
            let _ = stream.read(&mut buf);
            held.push(stream);
        }
    });
    let mut d = BackendDescriptor::http(format!("http://127.0.0.1:{port}/v1"), "m");
    d.retry = RetryPolicy {
        max_attempts: 2,
        initial_backoff_ms: 1,
        timeout_ms: 150,
    };
    match complete(&d, "hello", &DecodingParams::default()) {
        Err(BackendError::Timeout { attempts, .. }) => assert_eq!(attempts, 2),
        other => panic!("expected timeout, got {other:?}"),
    }
}
