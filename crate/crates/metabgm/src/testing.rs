//! Test fixtures shared by unit, integration and acceptance tests: a
//! scripted backend, a canned HTTP stub server, and a randomized snapshot
//! generator.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Instant;

use indexmap::IndexMap;
use rand::Rng;

use crate::backend::{BackendError, GenerationRequest, GenerationResult, TextBackend};
use crate::scene::{Flag, HostileInfo, SceneSnapshot};

/// Backend that replays a script of canned outputs or errors, recording
/// every prompt it receives.
pub struct ScriptedBackend {
    script: Mutex<VecDeque<Result<String, BackendError>>>,
    prompts: Mutex<Vec<String>>,
    /// Returned when the script runs dry.
    pub fallback: String,
}

impl ScriptedBackend {
    pub fn new(script: Vec<Result<String, BackendError>>) -> Self {
        Self {
            script: Mutex::new(script.into()),
            prompts: Mutex::new(Vec::new()),
            fallback: "scripted fallback output".into(),
        }
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().unwrap().clone()
    }
}

impl TextBackend for ScriptedBackend {
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        self.prompts.lock().unwrap().push(request.prompt.clone());
        let next = self.script.lock().unwrap().pop_front();
        let text = match next {
            Some(Ok(text)) => text,
            Some(Err(err)) => return Err(err),
            None => self.fallback.clone(),
        };
        Ok(GenerationResult {
            length: text.split_whitespace().count(),
            text,
            latency_ms: 0.0,
        })
    }
}

/// Backend that delegates to an inner backend but fails on selected
/// invocation indices (0-based). Used for degradation tests.
pub struct FaultInjectingBackend<B> {
    inner: B,
    fail_on: Vec<u64>,
    calls: Mutex<u64>,
}

impl<B: TextBackend> FaultInjectingBackend<B> {
    pub fn new(inner: B, fail_on: Vec<u64>) -> Self {
        Self {
            inner,
            fail_on,
            calls: Mutex::new(0),
        }
    }
}

impl<B: TextBackend> TextBackend for FaultInjectingBackend<B> {
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        let mut calls = self.calls.lock().unwrap();
        let index = *calls;
        *calls += 1;
        drop(calls);
        if self.fail_on.contains(&index) {
            return Err(BackendError::Unavailable {
                detail: format!("injected fault on call {index}"),
                status: Some(500),
                transient: false,
            });
        }
        self.inner.complete(request)
    }
}

#[derive(Debug, Clone)]
pub struct StubRequest {
    pub method: String,
    pub path: String,
    pub body: String,
}

/// Minimal single-threaded HTTP stub: answers each request with the next
/// queued (status, body) pair, or the default once the queue is empty.
pub struct StubServer {
    addr: SocketAddr,
    requests: Arc<Mutex<Vec<StubRequest>>>,
    responses: Arc<Mutex<VecDeque<(u16, String)>>>,
    shutdown: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(default_status: u16, default_body: &str) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("stub bind");
        let addr = listener.local_addr().unwrap();
        listener.set_nonblocking(true).unwrap();

        let requests: Arc<Mutex<Vec<StubRequest>>> = Arc::default();
        let responses: Arc<Mutex<VecDeque<(u16, String)>>> = Arc::default();
        let shutdown = Arc::new(AtomicBool::new(false));

        let default_body = default_body.to_string();
        let req_clone = Arc::clone(&requests);
        let resp_clone = Arc::clone(&responses);
        let stop = Arc::clone(&shutdown);
        let handle = std::thread::spawn(move || {
            let deadline = Instant::now() + std::time::Duration::from_secs(120);
            while !stop.load(Ordering::Relaxed) && Instant::now() < deadline {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let response = resp_clone
                            .lock()
                            .unwrap()
                            .pop_front()
                            .unwrap_or((default_status, default_body.clone()));
                        if let Some(request) = handle_one(stream, response) {
                            req_clone.lock().unwrap().push(request);
                        }
                    }
                    Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(std::time::Duration::from_millis(5));
                    }
                    Err(_) => break,
                }
            }
        });

        Self {
            addr,
            requests,
            responses,
            shutdown,
            handle: Some(handle),
        }
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn push_response(&self, status: u16, body: &str) {
        self.responses
            .lock()
            .unwrap()
            .push_back((status, body.to_string()));
    }

    pub fn requests(&self) -> Vec<StubRequest> {
        self.requests.lock().unwrap().clone()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn handle_one(mut stream: TcpStream, response: (u16, String)) -> Option<StubRequest> {
    stream.set_nonblocking(false).ok()?;
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line).ok()?;
    let mut parts = request_line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next().unwrap_or("/").to_string();

    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).ok()?;
        let line = line.trim();
        if line.is_empty() {
            break;
        }
        if let Some(v) = line
            .to_ascii_lowercase()
            .strip_prefix("content-length:")
            .map(str::trim)
        {
            content_length = v.parse().unwrap_or(0);
        }
    }
    let mut body = vec![0u8; content_length];
    if content_length > 0 {
        reader.read_exact(&mut body).ok()?;
    }

    let (status, response_body) = response;
    let reason = match status {
        200 => "OK",
        202 => "Accepted",
        404 => "Not Found",
        500 => "Internal Server Error",
        _ => "Status",
    };
    let _ = write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        response_body.len(),
        response_body
    );
    let _ = stream.flush();

    Some(StubRequest {
        method,
        path,
        body: String::from_utf8_lossy(&body).into_owned(),
    })
}

/// A chat-completion response body carrying `text`, as the remote backend
/// expects it.
pub fn chat_completion_body(text: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"completion_tokens": text.split_whitespace().count()}
    })
    .to_string()
}

const BIOMES: [&str; 6] = ["Forest", "Desert", "Gravel Hills", "Swamp", "Taiga", "Plains"];
const TIMES: [&str; 4] = ["morning", "midday", "evening", "night"];
const WEATHERS: [&str; 3] = ["clear", "rain", "thunder"];
const FLAG_KEYS: [&str; 8] = [
    "NotOnFire",
    "Wet",
    "NotRunning",
    "Sneaking",
    "NotSneaking",
    "OnGround",
    "InWaterNotDeep",
    "Sprinting",
];

/// Randomized but always-valid snapshot, with `Not`-keys sprinkled into the
/// nested maps so filter properties actually bite.
pub fn random_snapshot(rng: &mut impl Rng, timestamp: u64) -> SceneSnapshot {
    let mut status = IndexMap::new();
    let mut movement = IndexMap::new();
    let mut position = IndexMap::new();
    for key in FLAG_KEYS {
        if rng.gen_bool(0.6) {
            let flag = if rng.gen_bool(0.5) {
                Flag::Bool(rng.gen_bool(0.5))
            } else {
                Flag::Num(rng.gen_range(-100.0..100.0))
            };
            match rng.gen_range(0..3) {
                0 => status.insert(key.to_string(), flag),
                1 => movement.insert(key.to_string(), flag),
                _ => position.insert(key.to_string(), flag),
            };
        }
    }
    position.insert("X".into(), Flag::Num(rng.gen_range(-1000.0..1000.0)));
    position.insert("Y".into(), Flag::Num(rng.gen_range(0.0..256.0)));

    let mut hostile_entity = IndexMap::new();
    if rng.gen_bool(0.3) {
        hostile_entity.insert(
            "Zombie".to_string(),
            HostileInfo::Num(rng.gen_range(1.0..5.0)),
        );
        if rng.gen_bool(0.5) {
            hostile_entity.insert(
                "NotableThreat".to_string(),
                HostileInfo::Text("skeleton archer".into()),
            );
        }
    }

    SceneSnapshot {
        timestamp,
        scene: BIOMES[rng.gen_range(0..BIOMES.len())].to_string(),
        time: TIMES[rng.gen_range(0..TIMES.len())].to_string(),
        weather: WEATHERS[rng.gen_range(0..WEATHERS.len())].to_string(),
        temperature: rng.gen_range(-1.0..2.0),
        health: rng.gen_range(0.0..=20.0),
        satiety: rng.gen_range(0.0..=20.0),
        status,
        movement,
        position,
        hostile_entity,
        being_attacked: rng.gen_bool(0.2),
        extras: IndexMap::new(),
    }
}
