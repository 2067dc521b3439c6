mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use agentvote::backend::{extract_content, Backend, HttpBackend};
use agentvote::config::{load_prompt, AgentSpec};
use agentvote::corpus::CorpusRecord;
use agentvote::runtime::{run_agent, AgentJob};
use agentvote::tables::read_agent_table;
use agentvote_core::{PromptTemplate, TaskSchema};
use serde_json::{json, Value};

struct Captured {
    headers: Vec<(String, String)>,
    body: Value,
}

impl Captured {
    fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }
}

/// Serves one scripted response per connection and reports each request.
fn stub(script: Vec<(u16, String)>) -> (String, mpsc::Receiver<Captured>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in script {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let mut headers = Vec::new();
            loop {
                line.clear();
                reader.read_line(&mut line).unwrap();
                let l = line.trim_end();
                if l.is_empty() {
                    break;
                }
                let (k, v) = l.split_once(':').unwrap();
                headers.push((k.trim().to_string(), v.trim().to_string()));
            }
            let len: usize = headers
                .iter()
                .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
                .map_or(0, |(_, v)| v.parse().unwrap());
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let _ = tx.send(Captured { headers, body: serde_json::from_slice(&buf).unwrap_or(Value::Null) });
            let mut out = stream;
            write!(
                out,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, rx)
}

fn completion(content: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

fn spec(yaml: &str) -> AgentSpec {
    serde_yaml::from_str(yaml).unwrap()
}

fn template() -> PromptTemplate {
    load_prompt(&common::assets().join("prompts").join("ecg_af.yaml")).unwrap()
}

#[test]
fn openai_request_shape_and_bearer_token() {
    std::env::set_var("AGENTVOTE_TEST_KEY", "tok-123");
    let (url, rx) = stub(vec![(200, completion(r#"{"Diagnosis": "AF", "AF_pr": 1, "Explanation": "x"}"#))]);
    let b = HttpBackend::new(&spec(&format!(
        "{{agent_id: g, backend: chat_completion_http, model: m1, endpoint: '{url}', api_key_env: AGENTVOTE_TEST_KEY, generation: {{temperature: 0, max_tokens: 64, seed: 9}}}}"
    )))
    .unwrap();
    let chat = template().render("Atrial fibrillation.").unwrap();
    let ex = b.invoke(&chat);
    assert_eq!(ex.outcome.as_deref(), Ok(r#"{"Diagnosis": "AF", "AF_pr": 1, "Explanation": "x"}"#));
    assert_eq!(ex.attempts, 1);
    let req = rx.recv().unwrap();
    assert_eq!(req.header("authorization"), Some("Bearer tok-123"));
    assert_eq!(req.body["model"], "m1");
    assert_eq!(req.body["temperature"], 0.0);
    assert_eq!(req.body["max_tokens"], 64);
    assert_eq!(req.body["seed"], 9);
    assert_eq!(req.body["messages"][0]["role"], "system");
    assert_eq!(req.body["messages"][1]["role"], "user");
    assert!(req.body["messages"][1]["content"].as_str().unwrap().contains("Atrial fibrillation."));
}

#[test]
fn local_server_shape() {
    let (url, rx) = stub(vec![(200, json!({"message": {"content": "hi"}}).to_string())]);
    let b = HttpBackend::new(&spec(&format!(
        "{{agent_id: l, backend: local_model_server, model: qwen, endpoint: '{url}', generation: {{max_tokens: 32, seed: 4}}}}"
    )))
    .unwrap();
    let ex = b.invoke(&template().render("AF").unwrap());
    assert_eq!(ex.outcome.as_deref(), Ok("hi"));
    let req = rx.recv().unwrap();
    assert_eq!(req.header("authorization"), None);
    assert_eq!(req.body["stream"], false);
    assert_eq!(req.body["options"]["num_predict"], 32);
    assert_eq!(req.body["options"]["seed"], 4);
    assert!(req.body.get("max_tokens").is_none());
}

#[test]
fn missing_key_variable_is_an_error() {
    let err = HttpBackend::new(&spec(
        "{agent_id: g, backend: chat_completion_http, model: m, endpoint: 'http://127.0.0.1:1/', api_key_env: AGENTVOTE_SURELY_UNSET}",
    ))
    .unwrap_err();
    assert!(err.to_string().contains("AGENTVOTE_SURELY_UNSET"), "{err}");
}

#[test]
fn server_errors_are_retried() {
    let (url, rx) = stub(vec![
        (500, "{}".into()),
        (429, "{}".into()),
        (200, completion("ok")),
    ]);
    let b = HttpBackend::new(&spec(&format!(
        "{{agent_id: g, backend: chat_completion_http, model: m, endpoint: '{url}', retry: {{max_attempts: 3, backoff_ms: 1}}}}"
    )))
    .unwrap();
    let ex = b.invoke(&template().render("AF").unwrap());
    assert_eq!(ex.outcome.as_deref(), Ok("ok"));
    assert_eq!(ex.attempts, 3);
    assert_eq!(rx.iter().take(3).count(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, _rx) = stub(vec![(400, "{}".into())]);
    let b = HttpBackend::new(&spec(&format!(
        "{{agent_id: g, backend: chat_completion_http, model: m, endpoint: '{url}', retry: {{backoff_ms: 1}}}}"
    )))
    .unwrap();
    let ex = b.invoke(&template().render("AF").unwrap());
    assert_eq!(ex.outcome, Err("HTTP 400".into()));
    assert_eq!(ex.attempts, 1);
}

#[test]
fn refused_connection_becomes_an_invalid_vote() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let b = Backend::Http(
        HttpBackend::new(&spec(&format!(
            "{{agent_id: g, backend: chat_completion_http, model: m, endpoint: 'http://127.0.0.1:{port}/', retry: {{max_attempts: 3, backoff_ms: 1}}}}"
        )))
        .unwrap(),
    );
    let Backend::Http(h) = &b else { unreachable!() };
    let ex = h.invoke(&template().render("AF").unwrap());
    assert_eq!(ex.attempts, 3);
    assert!(ex.outcome.as_ref().unwrap_err().starts_with("transport error"), "{:?}", ex.outcome);

    let dir = tempfile::tempdir().unwrap();
    let schema = TaskSchema::ecg_af();
    let tpl = template();
    let job = AgentJob {
        agent_id: "g",
        backend: &b,
        schema: &schema,
        template: &tpl,
        out_csv: dir.path().join("g.csv"),
        transcripts: Some(dir.path().join("g.jsonl")),
        concurrency: 2,
    };
    let corpus = vec![CorpusRecord { case_id: "c1".into(), report_text: "AF".into() }];
    let progress = run_agent(&job, &corpus).unwrap();
    assert_eq!((progress.completed, progress.invalid, progress.attempts), (1, 1, 3));
    let rows = read_agent_table(&job.out_csv).unwrap();
    assert_eq!(rows[0].parse_status, "invalid");
    assert!(rows[0].explanation.starts_with("transport error"), "{}", rows[0].explanation);
    let transcript = std::fs::read_to_string(dir.path().join("g.jsonl")).unwrap();
    let line: Value = serde_json::from_str(transcript.lines().next().unwrap()).unwrap();
    assert_eq!(line["attempts"], 3);
    assert_eq!(line["raw_response"], Value::Null);
}

#[test]
fn content_extraction_shapes() {
    assert_eq!(extract_content(&completion("a")).as_deref(), Some("a"));
    assert_eq!(extract_content(r#"{"choices":[{"text":"b"}]}"#).as_deref(), Some("b"));
    assert_eq!(extract_content(r#"{"message":{"content":"c"}}"#).as_deref(), Some("c"));
    assert_eq!(extract_content(r#"{"response":"d"}"#).as_deref(), Some("d"));
    assert_eq!(extract_content(r#"{"other":1}"#), None);
    assert_eq!(extract_content("not json"), None);
}
