//! The completions client against a minimal HTTP/1.1 server on localhost.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use llmscreen::corpus::{Candidate, Topic};
use llmscreen::prompting::{PromptTemplate, DEFAULT_BUDGET};
use llmscreen::scoring::{
    Backend, BackendKind, BackendProfile, OpenAiCompletions, RetryPolicy, ScoreCache, ScoreRequest, Scorer,
};

struct Seen {
    bodies: Vec<serde_json::Value>,
    auth: Vec<Option<String>>,
}

/// Serves `responses` in order (status, body), one per connection.
fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Seen>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Seen {
        bodies: Vec::new(),
        auth: Vec::new(),
    }));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
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
                let (name, value) = line.split_once(':').unwrap_or((line, ""));
                if name.eq_ignore_ascii_case("content-length") {
                    len = value.trim().parse().unwrap();
                } else if name.eq_ignore_ascii_case("authorization") {
                    auth = Some(value.trim().to_string());
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            {
                let mut s = log.lock().unwrap();
                s.bodies.push(serde_json::from_slice(&buf).unwrap());
                s.auth.push(auth);
            }
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}/v1"), seen)
}

fn ok_body(yes: f64, no: f64) -> String {
    format!(
        r#"{{"choices":[{{"text":" yes","logprobs":{{"tokens":[" yes"],"top_logprobs":[{{" yes":{},"No":{},"maybe":-5.0}}]}}}}]}}"#,
        yes.ln(),
        no.ln()
    )
}

fn profile(endpoint: &str) -> BackendProfile {
    let mut p = BackendProfile::new("mock-llm", BackendKind::Openai);
    p.endpoint = Some(endpoint.to_string());
    p.model = Some("mock-7b".into());
    p.top_k = 5;
    p.timeout_secs = 5;
    p
}

#[test]
fn sends_one_token_request_and_parses_logprobs() {
    let (endpoint, seen) = serve(vec![(200, ok_body(0.6, 0.25))]);
    let client = OpenAiCompletions::from_profile(&profile(&endpoint)).unwrap();
    let dist = client
        .next_token(&ScoreRequest {
            topic_id: "t",
            doc_id: "d",
            prompt: "Review: x\nStudy: y\nThe answer is '",
        })
        .unwrap();
    let yn = llmscreen::scoring::extract_yes_no(&dist, &Default::default());
    assert!((yn.p_yes - 0.6).abs() < 1e-12);
    assert!((yn.p_no - 0.25).abs() < 1e-12);

    let s = seen.lock().unwrap();
    let body = &s.bodies[0];
    assert_eq!(body["max_tokens"], 1);
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["logprobs"], 5);
    assert_eq!(body["model"], "mock-7b");
    assert_eq!(body["prompt"], "Review: x\nStudy: y\nThe answer is '");
    assert_eq!(s.auth[0], None);
}

#[test]
fn api_key_comes_from_named_variable() {
    let (endpoint, seen) = serve(vec![(200, ok_body(0.5, 0.4))]);
    let mut p = profile(&endpoint);
    p.api_key_env = Some("LLMSCREEN_TEST_MOCK_KEY".into());
    assert!(OpenAiCompletions::from_profile(&p).is_err());
    std::env::set_var("LLMSCREEN_TEST_MOCK_KEY", "sk-test");
    let client = OpenAiCompletions::from_profile(&p).unwrap();
    client
        .next_token(&ScoreRequest {
            topic_id: "t",
            doc_id: "d",
            prompt: "p",
        })
        .unwrap();
    assert_eq!(seen.lock().unwrap().auth[0].as_deref(), Some("Bearer sk-test"));
}

#[test]
fn server_errors_are_retried_client_errors_are_not() {
    let (endpoint, _) = serve(vec![(503, "busy".into()), (200, ok_body(0.7, 0.2))]);
    let mut p = profile(&endpoint);
    p.retry = RetryPolicy {
        retries: 2,
        backoff_ms: 1,
    };
    let client = OpenAiCompletions::from_profile(&p).unwrap();
    let cache = ScoreCache::in_memory();
    let scorer = Scorer::from_profile(&client, &cache, &p);
    let topic = Topic {
        topic_id: "t".into(),
        title: "Review".into(),
    };
    let cand = [Candidate {
        doc_id: "d1".into(),
        title: "Study".into(),
        abstract_text: String::new(),
    }];
    let out = scorer
        .score_topic(&topic, &cand, &PromptTemplate::generic(), DEFAULT_BUDGET)
        .unwrap();
    assert_eq!(out.retries, 1);
    assert!((out.records[0].p_yes - 0.7).abs() < 1e-12);

    let (endpoint, seen) = serve(vec![(400, r#"{"error":"bad"}"#.into())]);
    let client = OpenAiCompletions::from_profile(&profile(&endpoint)).unwrap();
    let err = client
        .next_token(&ScoreRequest {
            topic_id: "t",
            doc_id: "d",
            prompt: "p",
        })
        .unwrap_err();
    assert!(!err.is_retryable());
    assert_eq!(seen.lock().unwrap().bodies.len(), 1);
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let client = OpenAiCompletions::from_profile(&profile(&format!("http://{addr}/v1"))).unwrap();
    let err = client
        .next_token(&ScoreRequest {
            topic_id: "t",
            doc_id: "d",
            prompt: "p",
        })
        .unwrap_err();
    assert!(err.is_retryable());
}
