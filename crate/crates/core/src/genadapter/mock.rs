//! Bundled deterministic mock of the step-proposal service.
//!
//! A minimal HTTP/1.1 server on an ephemeral loopback port. Responses are a
//! pure function of the request body, so searches driven through the mock
//! are fully reproducible. Failure injection (initial 5xx responses, fixed
//! delays) supports the retry and timeout tests.

use super::{GenRequest, GenResponse};
use crate::features::stable_hash;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

/// What the mock answers with.
#[derive(Debug, Clone)]
pub enum MockScript {
    /// Fixed proposal list regardless of the request.
    Echo {
        proposals: Vec<String>,
        logprobs: Option<Vec<f64>>,
    },
    /// Proposals derived by hashing the request state: `k` distinct step
    /// strings, with an answer-marker proposal mixed in when the request
    /// asks for solutions (and occasionally otherwise).
    Scripted,
    /// Verbatim body, for protocol-error tests.
    RawBody(String),
}

#[derive(Debug, Clone)]
pub struct MockBehavior {
    /// Respond 500 to this many initial requests.
    pub fail_first: usize,
    /// Sleep before answering.
    pub delay: Option<Duration>,
    pub script: MockScript,
}

impl Default for MockBehavior {
    fn default() -> Self {
        MockBehavior {
            fail_first: 0,
            delay: None,
            script: MockScript::Scripted,
        }
    }
}

pub struct MockGenServer {
    addr: std::net::SocketAddr,
    shutdown: Arc<AtomicBool>,
    requests: Arc<AtomicUsize>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl MockGenServer {
    pub fn spawn(behavior: MockBehavior) -> Self {
        Self::spawn_on(0, behavior).expect("bind ephemeral port")
    }

    /// Bind a specific port (0 picks an ephemeral one).
    pub fn spawn_on(port: u16, behavior: MockBehavior) -> std::io::Result<Self> {
        let listener = TcpListener::bind(("127.0.0.1", port))?;
        let addr = listener.local_addr().unwrap();
        let shutdown = Arc::new(AtomicBool::new(false));
        let requests = Arc::new(AtomicUsize::new(0));
        let thread_shutdown = shutdown.clone();
        let thread_requests = requests.clone();
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if thread_shutdown.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let n = thread_requests.fetch_add(1, Ordering::SeqCst);
                let _ = handle_connection(stream, &behavior, n);
            }
        });
        Ok(MockGenServer {
            addr,
            shutdown,
            requests,
            handle: Some(handle),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}/propose", self.addr)
    }

    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Drop for MockGenServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // unblock the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn handle_connection(
    mut stream: TcpStream,
    behavior: &MockBehavior,
    request_index: usize,
) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let body = read_request_body(&mut stream)?;

    if request_index < behavior.fail_first {
        return write_response(&mut stream, 500, "{\"error\":\"injected\"}");
    }
    if let Some(delay) = behavior.delay {
        std::thread::sleep(delay);
    }

    let response_body = match &behavior.script {
        MockScript::RawBody(raw) => raw.clone(),
        MockScript::Echo {
            proposals,
            logprobs,
        } => serde_json::to_string(&GenResponse {
            proposals: proposals.clone(),
            logprobs: logprobs.clone(),
        })
        .unwrap(),
        MockScript::Scripted => {
            let request: GenRequest = match serde_json::from_str(&body) {
                Ok(r) => r,
                Err(_) => return write_response(&mut stream, 400, "{\"error\":\"bad request\"}"),
            };
            serde_json::to_string(&scripted_response(&request)).unwrap()
        }
    };
    write_response(&mut stream, 200, &response_body)
}

/// Pure function of the request: hash-derived plan steps, with an answer
/// proposal when solutions are requested or the state hash says so.
fn scripted_response(request: &GenRequest) -> GenResponse {
    let h = stable_hash(&request.state);
    let mut proposals = Vec::with_capacity(request.k);
    for i in 0..request.k {
        let slot = h.wrapping_add(i as u64).wrapping_mul(0x9e37_79b9);
        let wants_answer = request.kind == "solution" || (i == request.k - 1 && h % 3 == 0);
        if wants_answer {
            let answer = (slot % 60) as i64 - 20;
            proposals.push(format!("the final answer is \\boxed{{{answer}}}"));
        } else {
            proposals.push(format!("consider subgoal {} next", slot % 17));
        }
    }
    GenResponse {
        proposals,
        logprobs: None,
    }
}

fn read_request_body(stream: &mut TcpStream) -> std::io::Result<String> {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line)?; // request line
    let mut content_length = 0usize;
    loop {
        let mut header = String::new();
        if reader.read_line(&mut header)? == 0 {
            break;
        }
        let header = header.trim();
        if header.is_empty() {
            break;
        }
        if let Some(value) = header.to_ascii_lowercase().strip_prefix("content-length:") {
            content_length = value.trim().parse().unwrap_or(0);
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    Ok(String::from_utf8_lossy(&body).into_owned())
}

fn write_response(stream: &mut TcpStream, status: u16, body: &str) -> std::io::Result<()> {
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        _ => "Internal Server Error",
    };
    let response = format!(
        "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(response.as_bytes())?;
    stream.flush()
}
