//! Chat-completion client against a local mock server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, Mutex};

use ein::format::{read_ndtree, write_ndtree_file, LabeledTree};
use ein::stance::{
    label_dataset, HttpProvider, HttpProviderConfig, LabelCache, LabelError, PromptTemplates, RetryPolicy,
    StanceProvider,
};
use ein::tree::{build_tree, PropagationTree, RawNode};

#[derive(Debug, Clone)]
struct Seen {
    auth: Option<String>,
    body: serde_json::Value,
}

/// Answers `1` when the prompt's response sentence mentions "fake", `0`
/// otherwise; with `fail` set, every request gets HTTP 500.
fn serve(fail: bool) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    std::thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let log = Arc::clone(&log);
            std::thread::spawn(move || handle(stream, fail, &log));
        }
    });
    (url, seen)
}

fn handle(mut stream: TcpStream, fail: bool, log: &Mutex<Vec<Seen>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let (mut len, mut auth) = (0usize, None);
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            match k.to_ascii_lowercase().as_str() {
                "content-length" => len = v.trim().parse().unwrap(),
                "authorization" => auth = Some(v.trim().to_string()),
                _ => {}
            }
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).unwrap();
    let body: serde_json::Value = serde_json::from_slice(&body).unwrap();
    let prompt = body["messages"][0]["content"].as_str().unwrap_or_default().to_string();
    log.lock().unwrap().push(Seen { auth, body });

    let (status, payload) = if fail {
        ("500 Internal Server Error", r#"{"error":"down"}"#.to_string())
    } else {
        let response = prompt
            .split_once("Responsive post: '")
            .and_then(|(_, rest)| rest.split_once("'\n"))
            .map_or("", |(r, _)| r);
        let answer = if response.contains("fake") { "1" } else { "0" };
        (
            "200 OK",
            serde_json::json!({"choices": [{"message": {"role": "assistant", "content": answer}}]}).to_string(),
        )
    };
    let _ = write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
}

fn config(url: &str, token_env: Option<&str>) -> HttpProviderConfig {
    HttpProviderConfig {
        endpoint: url.to_string(),
        model: "mock-model".into(),
        temperature: 0.2,
        token_env: token_env.map(str::to_string),
        timeout_secs: 10,
    }
}

fn sample_trees() -> Vec<PropagationTree> {
    vec![
        build_tree(
            "e1",
            1,
            vec![
                RawNode::new(1, None, "big news"),
                RawNode::new(2, Some(1), "this is fake"),
                RawNode::new(3, Some(2), "yes it is fake"),
                RawNode::new(4, Some(1), "wow"),
            ],
        )
        .unwrap(),
        build_tree("e2", 0, vec![RawNode::new(1, None, "alone")]).unwrap(),
    ]
}

#[test]
fn labels_trees_through_the_endpoint() {
    std::env::set_var("EIN_TEST_TOKEN_LABELS", "secret");
    let (url, seen) = serve(false);
    let provider = HttpProvider::new(config(&url, Some("EIN_TEST_TOKEN_LABELS")), PromptTemplates::default()).unwrap();
    provider.require_token().unwrap();
    let mut cache = LabelCache::in_memory();
    let out = label_dataset(&sample_trees(), &provider, &mut cache, &RetryPolicy::no_backoff(), 2).unwrap();

    let labels = out[0].as_ref().unwrap();
    // canonical order: root, "this is fake", "wow", "yes it is fake"
    assert_eq!(labels.stances.values().copied().collect::<Vec<_>>(), vec![1, 0, 1]);
    assert_eq!(labels.states.values().copied().collect::<Vec<_>>(), vec![1, 0, 0]);
    assert!(matches!(out[1], Err(LabelError::NoResponses(_))));

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    for s in seen.iter() {
        assert_eq!(s.auth.as_deref(), Some("Bearer secret"));
        assert_eq!(s.body["model"], "mock-model");
        assert_eq!(s.body["temperature"], 0.2);
        assert_eq!(s.body["messages"][0]["role"], "user");
    }
    drop(seen);

    // a warm cache answers without the network
    let again = label_dataset(&sample_trees(), &provider, &mut cache, &RetryPolicy::no_backoff(), 2).unwrap();
    assert_eq!(again[0].as_ref().unwrap(), labels);
}

#[test]
fn missing_token_is_reported() {
    let (url, _) = serve(false);
    let provider =
        HttpProvider::new(config(&url, Some("EIN_TEST_TOKEN_SURELY_UNSET")), PromptTemplates::default()).unwrap();
    assert!(provider.require_token().is_err());
    let no_auth = HttpProvider::new(config(&url, None), PromptTemplates::default()).unwrap();
    assert!(no_auth.require_token().is_ok());
    assert_eq!(no_auth.query("a", "b", true).unwrap(), "0");
}

#[test]
fn server_errors_are_retried_then_surface() {
    let (url, seen) = serve(true);
    let provider = HttpProvider::new(config(&url, None), PromptTemplates::default()).unwrap();
    let policy = RetryPolicy {
        max_attempts: 3,
        base_backoff_ms: 1,
    };
    let out = label_dataset(&sample_trees()[..1], &provider, &mut LabelCache::in_memory(), &policy, 1).unwrap();
    assert!(matches!(out[0], Err(LabelError::Provider(_))));
    assert_eq!(seen.lock().unwrap().len(), 9, "three pairs, three attempts each");
}

fn run_label(trees: &Path, out: &Path, url: &str) -> std::process::Output {
    let cfg = trees.with_extension("toml");
    std::fs::write(&cfg, "[labeler]\nmax_attempts = 2\nbase_backoff_ms = 1\ntoken_env = \"\"\n").unwrap();
    Command::new(env!("CARGO_BIN_EXE_ein"))
        .args(["--config", cfg.to_str().unwrap(), "label", "--provider", "http", "--endpoint", url])
        .args(["--trees", trees.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .unwrap()
}

#[test]
fn cli_label_uses_http_and_maps_provider_failures() {
    let dir = tempfile::tempdir().unwrap();
    let trees = dir.path().join("trees.ndtree");
    let items: Vec<LabeledTree> = sample_trees().into_iter().map(LabeledTree::unlabeled).collect();
    write_ndtree_file(&trees, &items, None, false).unwrap();

    let (url, _) = serve(false);
    let out = dir.path().join("labeled.ndtree");
    let r = run_label(&trees, &out, &url);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let labeled = read_ndtree(&out).unwrap();
    assert!(labeled.trees[0].labels.is_some());
    assert!(labeled.trees[1].labels.is_none());
    assert_eq!(labeled.meta.unwrap()["command"], "label");

    let (bad_url, _) = serve(true);
    let failed = dir.path().join("failed.ndtree");
    let r = run_label(&trees, &failed, &bad_url);
    assert_eq!(r.status.code(), Some(4), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(!failed.exists());
}
