use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use paace::backends::{
    BackendConfig, BackendError, CompletionBackend, CompletionRequest, Embedder, HashEmbedder, HttpBackend,
    HttpEmbedder, Message,
};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: String,
}

/// Serves the canned (status, body) replies in order, one per connection.
fn stub(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in replies {
            let (mut stream, _) = listener.accept().unwrap();
            let mut r = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            r.read_line(&mut line).unwrap();
            let path = line.split_whitespace().nth(1).unwrap_or_default().to_string();
            let (mut len, mut auth) = (0, None);
            loop {
                let mut h = String::new();
                r.read_line(&mut h).unwrap();
                let h = h.trim_end();
                if h.is_empty() {
                    break;
                }
                let (k, v) = h.split_once(':').unwrap();
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => len = v.trim().parse().unwrap(),
                    "authorization" => auth = Some(v.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; len];
            r.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen { path, auth, body: String::from_utf8(buf).unwrap() });
            let reply = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (format!("http://{addr}/v1"), seen)
}

fn cfg(endpoint: &str) -> BackendConfig {
    BackendConfig {
        endpoint: endpoint.into(),
        model: "m1".into(),
        timeout_secs: 5.0,
        retries: 2,
        ..BackendConfig::default()
    }
}

fn request() -> CompletionRequest {
    CompletionRequest::new(vec![Message::system("be brief"), Message::user("one two three")])
}

fn chat(text: &str, usage: bool) -> String {
    let mut v = serde_json::json!({ "choices": [{ "message": { "role": "assistant", "content": text } }] });
    if usage {
        v["usage"] = serde_json::json!({ "prompt_tokens": 11, "completion_tokens": 2 });
    }
    v.to_string()
}

#[test]
fn completion_reads_text_and_usage() {
    let (url, seen) = stub(vec![(200, chat("hello there", true)), (200, chat("a b c", false))]);
    let b = HttpBackend::new(cfg(&url)).unwrap();
    let r = b.complete(&request()).unwrap();
    assert_eq!((r.text.as_str(), r.prompt_tokens, r.completion_tokens), ("hello there", 11, 2));
    // without usage the counts fall back to whitespace tokens
    let r = b.complete(&request()).unwrap();
    assert_eq!(r.completion_tokens, 3);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/chat/completions");
    let body: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body["model"], "m1");
    assert_eq!(body["messages"][1]["content"], "one two three");
    assert_eq!(seen[0].auth, None);
}

#[test]
fn server_errors_are_retried() {
    let (url, seen) = stub(vec![(503, "{}".into()), (500, "{}".into()), (200, chat("ok", true))]);
    let r = HttpBackend::new(cfg(&url)).unwrap().complete(&request()).unwrap();
    assert_eq!(r.text, "ok");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn exhausted_retries_are_transport_errors() {
    let (url, _) = stub(vec![(502, "{}".into()), (502, "{}".into()), (502, "{}".into())]);
    let err = HttpBackend::new(cfg(&url)).unwrap().complete(&request()).unwrap_err();
    assert!(err.is_transport(), "{err}");
}

#[test]
fn bad_payloads_are_protocol_errors() {
    let (url, seen) =
        stub(vec![(400, "{\"error\":\"nope\"}".into()), (200, "{\"choices\":[]}".into()), (200, "not json".into())]);
    let b = HttpBackend::new(cfg(&url)).unwrap();
    for _ in 0..3 {
        assert!(matches!(b.complete(&request()), Err(BackendError::Protocol(_))));
    }
    // client errors are not retried
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn refused_connection_is_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let c = BackendConfig { retries: 0, ..cfg(&format!("http://127.0.0.1:{port}/v1")) };
    assert!(HttpBackend::new(c).unwrap().complete(&request()).unwrap_err().is_transport());
}

#[test]
fn token_is_sent_but_never_traced() {
    let secret = "sk-test-4f9d1c";
    std::env::set_var("PAACE_HTTP_TEST_TOKEN", secret);
    let (url, seen) = stub(vec![(200, chat(&format!("echo {secret}"), true))]);
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("teacher.trace.jsonl");
    let c = BackendConfig { auth_env: Some("PAACE_HTTP_TEST_TOKEN".into()), ..cfg(&url) };
    let b = HttpBackend::new(c).unwrap().with_trace(&trace).unwrap();
    let req = CompletionRequest::new(vec![Message::user(format!("my key is {secret}"))]);
    b.complete(&req).unwrap();
    assert_eq!(seen.lock().unwrap()[0].auth.as_deref(), Some(format!("Bearer {secret}").as_str()));
    let text = std::fs::read_to_string(&trace).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(!text.contains(secret));
    assert!(text.contains("[REDACTED]"));
}

#[test]
fn embeddings_endpoint() {
    let body = serde_json::json!({ "data": [{ "embedding": [0.5, -1.0, 2.0] }] }).to_string();
    let (url, seen) = stub(vec![(200, body), (200, "{\"data\":[{\"embedding\":[\"x\"]}]}".into())]);
    let e = HttpEmbedder::new(cfg(&url)).unwrap();
    let v = e.embed("some text").unwrap();
    assert_eq!(v.values, [0.5, -1.0, 2.0]);
    assert!((v.norm - 5.25f64.sqrt()).abs() < 1e-12);
    assert!(matches!(e.embed("x"), Err(BackendError::Protocol(_))));
    assert_eq!(seen.lock().unwrap()[0].path, "/v1/embeddings");
}

#[test]
fn hash_embedder_buckets_match_reference() {
    // independent FNV-1a over the token bytes
    let fnv = |s: &str| s.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3));
    let e = HashEmbedder { dim: 64 };
    let text = "alpha beta alpha γάμμα";
    let mut counts = [0.0f64; 64];
    for t in text.split_whitespace() {
        counts[(fnv(t) % 64) as usize] += 1.0;
    }
    let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
    let v = e.embed(text).unwrap();
    for (got, c) in v.values.iter().zip(counts) {
        assert!((got - c / norm).abs() < 1e-12);
    }
}
