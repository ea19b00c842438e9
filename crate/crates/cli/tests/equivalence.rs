// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use flowroutes_core::model::Model;
use flowroutes_service::{router, AppState, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

fn toy() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/toy-gpt2")
}

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data/golden")
        .join(name)
}

struct Fixture {
    name: &'static str,
    body: Value,
    args: Vec<&'static str>,
}

fn fixtures() -> Vec<Fixture> {
    vec![
        Fixture {
            name: "ioi",
            body: json!({ "prompt": "When Mary and John went to the store, John gave a drink to", "tau": 0.04 }),
            args: vec![
                "--prompt",
                "When Mary and John went to the store, John gave a drink to",
                "--tau",
                "0.04",
            ],
        },
        Fixture {
            name: "full-cone",
            body: json!({ "prompt": "the cat sat", "tau": 0.0, "renormalize": false }),
            args: vec![
                "--prompt",
                "the cat sat",
                "--tau",
                "0",
                "--renormalize",
                "false",
            ],
        },
        Fixture {
            name: "interior-start",
            body: json!({ "prompt": "one two three four", "tau": 0.02, "position": 2 }),
            args: vec![
                "--prompt",
                "one two three four",
                "--tau",
                "0.02",
                "--position",
                "2",
            ],
        },
        Fixture {
            name: "ids",
            body: json!({ "ids": [10, 40, 77, 120, 5], "tau": 0.1 }),
            args: vec!["--ids", "10,40,77,120,5", "--tau", "0.1"],
        },
        Fixture {
            name: "single-node",
            body: json!({ "prompt": "hello world", "tau": 5.0 }),
            args: vec!["--prompt", "hello world", "--tau", "5"],
        },
    ]
}

/// Seeded GPT-2 style toy with room for the IOI prompt.
fn wide_toy(dir: &std::path::Path) -> PathBuf {
    let path = dir.join("wide-toy");
    let status = Command::new(env!("CARGO_BIN_EXE_flowroutes"))
        .args([
            "make-toy-model",
            "--n-ctx",
            "64",
            "--seed",
            "5",
            "--out",
            path.to_str().unwrap(),
        ])
        .stdout(Stdio::null())
        .status()
        .unwrap();
    assert!(status.success());
    path
}

fn cli_trace(model: &std::path::Path, f: &Fixture, out: &std::path::Path) -> String {
    let status = Command::new(env!("CARGO_BIN_EXE_flowroutes"))
        .args([
            "trace",
            "--model",
            model.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .args(&f.args)
        .stdout(Stdio::null())
        .status()
        .unwrap();
    assert!(status.success(), "{}", f.name);
    std::fs::read_to_string(out.join("trace.json")).unwrap()
}

#[tokio::test]
async fn service_trace_equals_cli_golden_json() {
    let dir = TempDir::new().unwrap();
    let model_dir = wide_toy(dir.path());
    let state = AppState::new(Model::load(&model_dir).unwrap(), ServiceConfig::default());
    for f in fixtures() {
        let cli = cli_trace(&model_dir, &f, &dir.path().join(f.name));
        let path = golden_path(&format!("trace-{}.json", f.name));
        if std::env::var_os("FLOWROUTES_BLESS").is_some() {
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(&path, &cli).unwrap();
        }
        let golden = std::fs::read_to_string(&path).unwrap();
        assert_eq!(cli, golden, "{}", f.name);

        let req = Request::post("/api/trace")
            .header("content-type", "application/json")
            .body(Body::from(f.body.to_string()))
            .unwrap();
        let resp = router(Arc::clone(&state)).oneshot(req).await.unwrap();
        assert_eq!(resp.status(), StatusCode::OK, "{}", f.name);
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let mut body: Value = serde_json::from_slice(&bytes).unwrap();
        let obj = body.as_object_mut().unwrap();
        assert!(obj.remove("elapsed_ms").unwrap().as_f64().unwrap() >= 0.0);
        assert!(obj.remove("predicted_token").unwrap().is_string());
        let expected: Value = serde_json::from_str(&golden).unwrap();
        assert_eq!(body, expected, "{}", f.name);
        if f.name == "single-node" {
            assert_eq!(body["nodes"].as_array().unwrap().len(), 1);
        }
    }
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn http(port: u16, request: &str) -> String {
    let mut stream = TcpStream::connect(("127.0.0.1", port)).unwrap();
    stream.write_all(request.as_bytes()).unwrap();
    let mut out = String::new();
    stream.read_to_string(&mut out).unwrap();
    out
}

#[test]
fn serve_answers_over_tcp() {
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let child = Command::new(env!("CARGO_BIN_EXE_flowroutes"))
        .args([
            "serve",
            "--model",
            toy().to_str().unwrap(),
            "--port",
            &port.to_string(),
            "--cache-cap",
            "4",
        ])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let _server = Server(child);
    let deadline = Instant::now() + Duration::from_secs(30);
    while TcpStream::connect(("127.0.0.1", port)).is_err() {
        assert!(Instant::now() < deadline, "server did not start");
        std::thread::sleep(Duration::from_millis(50));
    }
    let meta = http(
        port,
        "GET /api/meta HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n",
    );
    assert!(meta.starts_with("HTTP/1.1 200"), "{meta}");
    assert!(meta.contains("\"cache_cap\":4"));
    let body = r#"{"prompt": "the cat"}"#;
    let trace = http(
        port,
        &format!(
            "POST /api/trace HTTP/1.1\r\nHost: localhost\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        ),
    );
    assert!(trace.starts_with("HTTP/1.1 200"), "{trace}");
    assert!(trace.contains("x-flowroutes-cache: miss"));
    let heads = http(
        port,
        "GET /api/heads HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n",
    );
    assert!(heads.starts_with("HTTP/1.1 409"), "{heads}");
}
