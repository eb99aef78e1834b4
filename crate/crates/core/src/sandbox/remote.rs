//! Remote sandbox backend: a client (and a minimal server) for the
//! execute-over-HTTP wire protocol.
//!
//! `POST /execute` with body `{"source": ..., "limits": {...}}` returns an
//! [`ExecResult`] as JSON. The request may additionally carry
//! `"seed_files": [{"name", "bytes" (base64), "readonly"}]`; servers that
//! predate the field ignore it.

use super::{ExecLimits, ExecResult, LocalSandbox, SandboxError, SeedFile};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::time::Duration;

#[derive(Debug, Serialize, Deserialize)]
pub struct ExecuteRequest {
    pub source: String,
    pub limits: ExecLimits,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seed_files: Vec<SeedFile>,
}

/// HTTP client for a remote execute endpoint.
#[derive(Debug, Clone)]
pub struct RemoteSandbox {
    base_url: String,
    client: reqwest::blocking::Client,
}

impl RemoteSandbox {
    pub fn new(base_url: impl Into<String>) -> Self {
        let base_url = base_url.into();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .expect("reqwest client construction");
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            client,
        }
    }

    pub fn execute(
        &self,
        source: &str,
        limits: &ExecLimits,
        seed: &[SeedFile],
    ) -> Result<ExecResult, SandboxError> {
        let request = ExecuteRequest {
            source: source.to_string(),
            limits: limits.clone(),
            seed_files: seed.to_vec(),
        };
        let url = format!("{}/execute", self.base_url);
        let response = self
            .client
            .post(&url)
            .json(&request)
            .send()
            .map_err(|e| SandboxError::Remote(format!("POST {url}: {e}")))?;
        let status = response.status();
        let body = response
            .text()
            .map_err(|e| SandboxError::Remote(format!("reading body: {e}")))?;
        if !status.is_success() {
            return Err(SandboxError::Remote(format!("{url} returned {status}: {body}")));
        }
        serde_json::from_str(&body)
            .map_err(|e| SandboxError::Remote(format!("malformed ExecResult: {e}")))
    }
}

/// Serves the execute API over a bound listener, one thread per connection,
/// until the listener errors. Intended for tests and small single-host
/// deployments of the local backend.
pub fn serve(listener: TcpListener, sandbox: Arc<LocalSandbox>) {
    for stream in listener.incoming() {
        let Ok(stream) = stream else { return };
        let sandbox = Arc::clone(&sandbox);
        std::thread::spawn(move || {
            let _ = handle_connection(stream, &sandbox);
        });
    }
}

/// Binds an ephemeral port, spawns the server thread, and returns its base
/// URL.
pub fn spawn_server(sandbox: LocalSandbox) -> std::io::Result<String> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let sandbox = Arc::new(sandbox);
    std::thread::spawn(move || serve(listener, sandbox));
    Ok(format!("http://{addr}"))
}

fn handle_connection(stream: TcpStream, sandbox: &LocalSandbox) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    let mut parts = request_line.split_whitespace();
    let method = parts.next().unwrap_or("").to_string();
    let path = parts.next().unwrap_or("").to_string();

    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some(value) = line
            .to_ascii_lowercase()
            .strip_prefix("content-length:")
            .map(str::trim)
            .and_then(|v| v.parse::<usize>().ok())
        {
            content_length = value;
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;

    let mut stream = stream;
    if method != "POST" || path != "/execute" {
        return write_response(&mut stream, 404, "{\"error\":\"not found\"}");
    }
    let request: ExecuteRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            let msg = serde_json::json!({ "error": e.to_string() }).to_string();
            return write_response(&mut stream, 400, &msg);
        }
    };
    match sandbox.execute(&request.source, &request.limits, &request.seed_files) {
        Ok(result) => {
            let body = serde_json::to_string(&result).expect("ExecResult serialization");
            write_response(&mut stream, 200, &body)
        }
        Err(e) => {
            let msg = serde_json::json!({ "error": e.to_string() }).to_string();
            write_response(&mut stream, 500, &msg)
        }
    }
}

fn write_response(stream: &mut TcpStream, status: u16, body: &str) -> std::io::Result<()> {
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        _ => "Internal Server Error",
    };
    write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    stream.flush()
}
