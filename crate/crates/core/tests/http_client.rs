//! The HTTP client against a scripted local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use recallbench::client::{ChatModel, ChatRequest, ClientError, HttpModel, ModelEndpoint, RetryPolicy};
use recallbench::corpus::{Corpus, DistractorFunction, SimpleTokenizer};
use recallbench::semtrace;
use recallbench::tasks::{build_prompt, make_instances, InstanceGrid, TargetSnippet, TaskInstance, TaskType};

#[derive(Debug, Clone)]
struct Seen {
    authorization: Option<String>,
    body: String,
}

/// Serve one scripted `(status, body)` reply per connection.
fn serve(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, reply) in script {
            let Ok((mut stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = Some(line["authorization:".len()..].trim().to_string());
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(Seen {
                authorization: auth,
                body: String::from_utf8(body).unwrap(),
            });
            let resp = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
                reply.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    (url, seen)
}

fn ok_body(content: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": 100, "completion_tokens": 9}
    })
    .to_string()
}

fn instance() -> TaskInstance {
    let task = semtrace::generate(1, 2).unwrap();
    let corpus = Corpus::from_entries(
        (0..5)
            .map(|i| DistractorFunction::new(format!("d{i}"), format!("def g{i}():\n    return {i}")))
            .collect(),
    )
    .unwrap();
    let grid = InstanceGrid {
        task_type: TaskType::SemtraceOut,
        distractor_counts: vec![2],
        positions: 2,
        subset_fraction: 1.0,
        seed: 0,
        distractor_seed: None,
        key_seed: None,
        show_keys: false,
    };
    make_instances(&[TargetSnippet::from_semtrace(&task)], &corpus, &grid, &SimpleTokenizer)
        .unwrap()
        .remove(0)
}

fn endpoint(url: &str) -> ModelEndpoint {
    let mut ep = ModelEndpoint::new(url, "test-model");
    ep.retry = RetryPolicy {
        max_retries: 3,
        base_delay_ms: 10,
        max_delay_ms: 25,
    };
    ep.timeout_ms = 5_000;
    ep
}

fn call(model: &HttpModel) -> Result<recallbench::client::Completion, ClientError> {
    let inst = instance();
    let bundle = build_prompt(&inst, true);
    model.complete(&ChatRequest {
        bundle: &bundle,
        instance: &inst,
        max_tokens: 512,
    })
}

#[test]
fn success_captures_raw_body_and_sends_greedy_request() {
    let reply = ok_body("[1, 2, 3, 4]\n```");
    let (url, seen) = serve(vec![(200, reply.clone())]);
    std::env::set_var("RECALLBENCH_TEST_KEY_OK", "sk-test");
    let mut ep = endpoint(&url);
    ep.api_key_env = Some("RECALLBENCH_TEST_KEY_OK".into());
    let model = HttpModel::new(ep).unwrap();
    let c = call(&model).unwrap();
    assert_eq!(c.text, "[1, 2, 3, 4]\n```");
    assert_eq!(c.raw, reply);
    assert_eq!(c.usage.unwrap().completion_tokens, 9);
    assert_eq!(c.attempts, 1);

    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer sk-test"));
    let inst = instance();
    let bundle = build_prompt(&inst, true);
    let expected = model.request_body(&ChatRequest {
        bundle: &bundle,
        instance: &inst,
        max_tokens: 512,
    });
    assert_eq!(seen[0].body, expected);
    assert!(!seen[0].body.contains("sk-test"));
    let body: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body["temperature"], 0);
    assert_eq!(body["messages"].as_array().unwrap().last().unwrap()["role"], "assistant");
}

#[test]
fn transient_errors_are_retried_with_growing_delays() {
    let (url, seen) = serve(vec![
        (429, "{}".into()),
        (503, "{}".into()),
        (500, "{}".into()),
        (200, ok_body("ok")),
    ]);
    let delays = Arc::new(Mutex::new(Vec::new()));
    let d = delays.clone();
    let model = HttpModel::new(endpoint(&url))
        .unwrap()
        .with_sleeper(move |t: Duration| d.lock().unwrap().push(t));
    let c = call(&model).unwrap();
    assert_eq!((c.text.as_str(), c.attempts), ("ok", 4));
    assert_eq!(seen.lock().unwrap().len(), 4);
    let delays = delays.lock().unwrap().clone();
    assert_eq!(delays, vec![Duration::from_millis(10), Duration::from_millis(20), Duration::from_millis(25)]);
    assert!(delays.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn retry_budget_exhaustion_is_distinct() {
    let (url, _) = serve(vec![(503, "a".into()), (503, "b".into()), (503, "c".into()), (503, "d".into())]);
    let model = HttpModel::new(endpoint(&url)).unwrap().with_sleeper(|_| {});
    match call(&model) {
        Err(ClientError::RetriesExhausted { attempts, last }) => {
            assert_eq!(attempts, 4);
            assert!(last.contains("503"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn auth_failures_are_not_retried() {
    let (url, seen) = serve(vec![(401, "bad key".into()), (200, ok_body("never"))]);
    let model = HttpModel::new(endpoint(&url)).unwrap().with_sleeper(|_| panic!("no retry expected"));
    assert!(matches!(call(&model), Err(ClientError::AuthRejected { status: 401, .. })));
    assert_eq!(seen.lock().unwrap().len(), 1);

    let (url, _) = serve(vec![(400, "bad request".into())]);
    let model = HttpModel::new(endpoint(&url)).unwrap();
    assert!(matches!(call(&model), Err(ClientError::Http { status: 400, .. })));
}

#[test]
fn missing_key_fails_before_any_request() {
    let (url, seen) = serve(vec![(200, ok_body("x"))]);
    let mut ep = endpoint(&url);
    ep.api_key_env = Some("RECALLBENCH_TEST_KEY_UNSET".into());
    std::env::remove_var("RECALLBENCH_TEST_KEY_UNSET");
    let model = HttpModel::new(ep).unwrap();
    assert_eq!(
        call(&model).unwrap_err(),
        ClientError::AuthMissing("RECALLBENCH_TEST_KEY_UNSET".into())
    );
    thread::sleep(Duration::from_millis(50));
    assert!(seen.lock().unwrap().is_empty());
}

#[test]
fn connection_refused_is_retried_then_reported() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let model = HttpModel::new(endpoint(&format!("http://127.0.0.1:{port}/v1")))
        .unwrap()
        .with_sleeper(|_| {});
    assert!(matches!(call(&model), Err(ClientError::RetriesExhausted { attempts: 4, .. })));
}
