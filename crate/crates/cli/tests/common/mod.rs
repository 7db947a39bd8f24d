#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use base64::Engine;
use coe_core::gateway::{ChatRequest, ImagePayload, Message, MockBackend, Part, RequestProfile, Task};
use coe_core::template;
use serde_json::{json, Value};

pub fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/synthetic")
}

pub fn golden() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn coe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coe"))
        .args(args)
        .env_remove("COE_API_KEY")
        .output()
        .expect("spawn coe")
}

#[track_caller]
pub fn coe_ok(args: &[&str]) -> String {
    let out = coe(args);
    assert!(
        out.status.success(),
        "coe {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Runs build-acd, cpe and explain for both fixture samples into `dir`,
/// with the fixture config unless `config` is given.
pub fn pipeline(dir: &Path, config: Option<&Path>, extra: &[&str]) {
    let fx = fixture();
    let config = config.map(Path::to_path_buf).unwrap_or_else(|| fx.join("config.toml"));
    let db = dir.join("acd.jsonl");
    let base = |rest: &[&str]| {
        let mut args = vec!["--config", s(&config)];
        args.extend_from_slice(extra);
        args.extend_from_slice(rest);
        coe_ok(&args);
    };
    base(&["build-acd", "--manifest", s(&fx.join("manifest.json")), "--out", s(&db)]);
    for (level, ext, csv) in [
        ("channel", "json", false),
        ("channel", "csv", true),
        ("layer", "json", false),
        ("layer", "csv", true),
        ("model", "json", false),
    ] {
        let out = dir.join(format!("cpe_{level}.{ext}"));
        let mut rest = vec!["cpe", "--db", s(&db), "--level", level, "--out", s(&out)];
        if csv {
            rest.push("--csv");
        }
        base(&rest);
    }
    for sample in ["tench_001", "tench_002"] {
        let out = dir.join(format!("{sample}.chain.json"));
        base(&[
            "explain",
            "--db",
            s(&db),
            "--relevance",
            s(&fx.join(format!("samples/{sample}.json"))),
            "--captions",
            s(&fx.join("captions.json")),
            "--manifest",
            s(&fx.join("manifest.json")),
            "--out",
            s(&out),
        ]);
    }
}

pub const PIPELINE_FILES: &[&str] = &[
    "acd.jsonl",
    "cpe_channel.json",
    "cpe_channel.csv",
    "cpe_layer.json",
    "cpe_layer.csv",
    "cpe_model.json",
    "tench_001.chain.json",
    "tench_002.chain.json",
];

fn task_of(text: &str) -> Task {
    let first = |t: &str| {
        t.lines()
            .next()
            .unwrap_or_default()
            .split('{')
            .next()
            .unwrap_or_default()
            .to_string()
    };
    let table = [
        (template::DESCRIBE, Task::Describe),
        (template::ENTAIL, Task::Entail),
        (template::FILTER, Task::Filter),
        (template::EXPLAIN, Task::Synthesize),
        (template::JUDGE, Task::Judge),
        (template::CAPTION, Task::Caption),
    ];
    for (t, task) in table {
        let prefix = first(t);
        if text.starts_with(&prefix) && !prefix.is_empty() {
            return task;
        }
    }
    panic!("unrecognized prompt: {}", &text[..text.len().min(80)]);
}

fn request_from_wire(body: &Value) -> ChatRequest {
    let b64 = base64::engine::general_purpose::STANDARD;
    let mut messages = Vec::new();
    for m in body["messages"].as_array().expect("messages") {
        let parts: Vec<Part> = m["content"]
            .as_array()
            .expect("content")
            .iter()
            .map(|p| match p["type"].as_str() {
                Some("text") => Part::Text(p["text"].as_str().unwrap().to_string()),
                _ => Part::Image(ImagePayload::new(
                    p["media_type"].as_str().unwrap(),
                    b64.decode(p["data"].as_str().unwrap()).unwrap(),
                )),
            })
            .collect();
        let mut msg = Message::user(parts);
        if m["role"] == "assistant" {
            msg.role = coe_core::gateway::Role::Assistant;
        }
        messages.push(msg);
    }
    let first_text = messages[0].texts().next().unwrap_or_default().to_string();
    let profile = RequestProfile::new(
        body["model"].as_str().unwrap_or_default(),
        body["temperature"].as_f64().unwrap_or_default(),
        body["max_tokens"].as_u64().unwrap_or_default() as u32,
    );
    ChatRequest::new(task_of(&first_text), &profile, messages)
}

/// HTTP endpoint that answers chat requests with the mock responders.
pub struct FakeEndpoint {
    pub url: String,
    pub hits: Arc<AtomicUsize>,
}

impl FakeEndpoint {
    pub fn start() -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
        let url = format!("http://{}/v1/chat", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        thread::spawn(move || {
            let mock = MockBackend::default();
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut length = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = line.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            length = v.trim().parse().unwrap_or(0);
                        }
                    }
                }
                let mut body = vec![0u8; length];
                if reader.read_exact(&mut body).is_err() {
                    continue;
                }
                counter.fetch_add(1, Ordering::SeqCst);
                let request = request_from_wire(&serde_json::from_slice(&body).unwrap());
                let answer = mock.respond(&request).expect("mock answers");
                let payload = json!({"choices": [{"message": {"content": answer}}]}).to_string();
                let _ = write!(
                    stream,
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    payload.len(),
                    payload
                );
            }
        });
        Self { url, hits }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

/// Config pointing remote roles at `url`, with the cache under `dir`.
pub fn remote_config(dir: &Path, url: &str, kind: &str) -> PathBuf {
    let fx = fixture();
    let text = format!(
        "n_patches = 5\nsynonyms = {:?}\ncache_dir = {:?}\n\n[backends]\ndescriber = \"{kind}\"\nentailment = \"lexical\"\nfilter = \"{kind}\"\nsynthesizer = \"{kind}\"\njudge = \"{kind}\"\ncaptioner = \"none\"\n\n[remote]\nurl = {:?}\nbackend_id = \"fake\"\n",
        s(&fx.join("synonyms.txt")),
        s(&dir.join("cache")),
        url
    );
    let path = dir.join(format!("{kind}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}
