//! Generation backends and the assembly-to-wire conversion layer.
//!
//! [`to_chat_messages`] maps assembled prompt segments onto role-tagged
//! chat messages, order preserved. The default [`MockBackend`] is a pure
//! function of its input that deliberately echoes system facts, so
//! retrieval accuracy and leakage can be measured on responses as well as
//! prompts. [`RemoteBackend`] posts the same wire format to any configured
//! chat-completion endpoint.

use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};

use crate::controller::PromptAssembly;
use crate::conv::first_sentence;
use crate::error::{MemoryError, Result};
use crate::model::Role;

pub const BACKEND_URL_ENV: &str = "MMAG_BACKEND_URL";
const DEFAULT_MAX_IN_FLIGHT: usize = 4;

/// One wire message. No empty contents: conversion drops nothing because
/// assemblies never contain empty segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

/// Converts an assembly into chat messages, one per segment, order
/// preserved. Total and order-preserving: nothing is dropped or duplicated.
pub fn to_chat_messages(assembly: &PromptAssembly) -> Vec<ChatMessage> {
    assembly
        .segments
        .iter()
        .map(|seg| ChatMessage {
            role: seg.role,
            content: seg.content.clone(),
        })
        .collect()
}

/// A response generator. Implementations must be safe to call from several
/// threads at once.
pub trait GenerationBackend: Send + Sync {
    fn generate(&self, messages: &[ChatMessage], seed: u64) -> Result<String>;

    fn name(&self) -> &'static str;
}

fn check_messages(messages: &[ChatMessage]) -> Result<()> {
    if messages.is_empty() {
        return Err(MemoryError::backend("empty message list"));
    }
    if messages.last().map(|m| m.role) != Some(Role::User) {
        return Err(MemoryError::backend("last message must have role user"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Mock backends
// ---------------------------------------------------------------------------

/// Deterministic template backend:
/// `Reply to: <last user content> | known: <first sentences of the first
/// three system messages>`. Echoing system facts gives the harness signal
/// for response-level accuracy and leakage scans.
#[derive(Debug, Default, Clone, Copy)]
pub struct MockBackend;

impl GenerationBackend for MockBackend {
    fn generate(&self, messages: &[ChatMessage], _seed: u64) -> Result<String> {
        check_messages(messages)?;
        let query = &messages.last().unwrap().content;
        let known = messages
            .iter()
            .filter(|m| m.role == Role::System)
            .take(3)
            .map(|m| first_sentence(m.content.trim()))
            .collect::<Vec<_>>()
            .join("; ");
        if known.is_empty() {
            Ok(format!("Reply to: {query} | known:"))
        } else {
            Ok(format!("Reply to: {query} | known: {known}"))
        }
    }

    fn name(&self) -> &'static str {
        "mock"
    }
}

/// Mock variant that echoes nothing, for latency-only runs.
#[derive(Debug, Default, Clone, Copy)]
pub struct SilentBackend;

impl GenerationBackend for SilentBackend {
    fn generate(&self, messages: &[ChatMessage], _seed: u64) -> Result<String> {
        check_messages(messages)?;
        Ok("ok".to_string())
    }

    fn name(&self) -> &'static str {
        "silent"
    }
}

// ---------------------------------------------------------------------------
// Remote backend
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct WireRequest<'a> {
    messages: &'a [ChatMessage],
    seed: u64,
}

#[derive(Deserialize)]
struct WireResponse {
    content: String,
}

/// Generic chat-completion adapter: POST `{"messages": [...], "seed": n}`
/// to a configured URL, expect `{"content": "..."}` back. Endpoint-generic
/// by design; vendor specifics live in the endpoint, not here. In-flight
/// requests are bounded.
pub struct RemoteBackend {
    url: String,
    headers: Vec<(String, String)>,
    gate: InFlightGate,
}

impl RemoteBackend {
    pub fn new(url: impl Into<String>) -> RemoteBackend {
        RemoteBackend {
            url: url.into(),
            headers: Vec::new(),
            gate: InFlightGate::new(DEFAULT_MAX_IN_FLIGHT),
        }
    }

    /// Reads the endpoint from `MMAG_BACKEND_URL`.
    pub fn from_env() -> Result<RemoteBackend> {
        let url = std::env::var(BACKEND_URL_ENV)
            .map_err(|_| MemoryError::backend(format!("{BACKEND_URL_ENV} not set")))?;
        Ok(RemoteBackend::new(url))
    }

    pub fn with_header(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.headers.push((name.into(), value.into()));
        self
    }

    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.gate = InFlightGate::new(limit.max(1));
        self
    }
}

impl GenerationBackend for RemoteBackend {
    fn generate(&self, messages: &[ChatMessage], seed: u64) -> Result<String> {
        check_messages(messages)?;
        let _slot = self.gate.acquire();
        let body = serde_json::to_string(&WireRequest { messages, seed })?;
        let mut request = ureq::post(&self.url).set("content-type", "application/json");
        for (name, value) in &self.headers {
            request = request.set(name, value);
        }
        match request.send_string(&body) {
            Ok(response) => {
                let text = response
                    .into_string()
                    .map_err(|e| MemoryError::backend(format!("read response: {e}")))?;
                let parsed: WireResponse = serde_json::from_str(&text)
                    .map_err(|e| MemoryError::backend(format!("malformed response: {e}")))?;
                Ok(parsed.content)
            }
            Err(ureq::Error::Status(code, response)) => {
                let retry_after_ms = response
                    .header("retry-after")
                    .and_then(|v| v.trim().parse::<u64>().ok())
                    .map(|secs| secs * 1000);
                Err(MemoryError::Backend {
                    reason: format!("{} returned status {code}", self.url),
                    retry_after_ms,
                })
            }
            Err(e) => Err(MemoryError::backend(format!("transport: {e}"))),
        }
    }

    fn name(&self) -> &'static str {
        "remote"
    }
}

/// Counting gate bounding concurrent remote calls.
struct InFlightGate {
    limit: usize,
    state: Mutex<usize>,
    cond: Condvar,
}

struct InFlightSlot<'a>(&'a InFlightGate);

impl InFlightGate {
    fn new(limit: usize) -> InFlightGate {
        InFlightGate {
            limit,
            state: Mutex::new(0),
            cond: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightSlot<'_> {
        let mut in_flight = self.state.lock().unwrap();
        while *in_flight >= self.limit {
            in_flight = self.cond.wait(in_flight).unwrap();
        }
        *in_flight += 1;
        InFlightSlot(self)
    }
}

impl Drop for InFlightSlot<'_> {
    fn drop(&mut self) {
        let mut in_flight = self.0.state.lock().unwrap();
        *in_flight -= 1;
        self.0.cond.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn user(content: &str) -> ChatMessage {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    fn system(content: &str) -> ChatMessage {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    #[test]
    fn mock_without_system_segments() {
        let out = MockBackend.generate(&[user("ciao")], 0).unwrap();
        assert_eq!(out, "Reply to: ciao | known:");
    }

    #[test]
    fn mock_echoes_first_three_system_first_sentences() {
        let msgs = vec![
            system("my name is Ada. I like hiking."),
            system("Context: weather=rain"),
            system("Reminder: dentist at noon."),
            system("fourth system message. ignored."),
            user("what's up?"),
        ];
        let out = MockBackend.generate(&msgs, 0).unwrap();
        assert_eq!(
            out,
            "Reply to: what's up? | known: my name is Ada.; Context: weather=rain; Reminder: dentist at noon."
        );
    }

    #[test]
    fn mock_is_deterministic() {
        let msgs = vec![system("A fact."), user("q")];
        let a = MockBackend.generate(&msgs, 7).unwrap();
        let b = MockBackend.generate(&msgs, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mock_rejects_bad_shape() {
        assert!(MockBackend.generate(&[], 0).is_err());
        assert!(MockBackend.generate(&[system("only system")], 0).is_err());
    }

    #[test]
    fn silent_backend_has_no_echo() {
        let out = SilentBackend
            .generate(&[system("secret fact"), user("q")], 0)
            .unwrap();
        assert_eq!(out, "ok");
    }

    #[test]
    fn remote_backend_roundtrip_against_local_server() {
        use std::io::{Read, Write};
        use std::net::TcpListener;

        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = vec![0u8; 16384];
            let mut read = 0;
            // Read until the full JSON body (content-length) has arrived.
            let body = loop {
                let n = stream.read(&mut buf[read..]).unwrap();
                read += n;
                let text = String::from_utf8_lossy(&buf[..read]).to_string();
                if let Some(idx) = text.find("\r\n\r\n") {
                    let headers = &text[..idx];
                    let len: usize = headers
                        .lines()
                        .find(|l| l.to_lowercase().starts_with("content-length"))
                        .and_then(|l| l.split(':').nth(1))
                        .and_then(|v| v.trim().parse().ok())
                        .unwrap_or(0);
                    let body_start = idx + 4;
                    if read >= body_start + len {
                        break text[body_start..body_start + len].to_string();
                    }
                }
            };
            let request: serde_json::Value = serde_json::from_str(&body).unwrap();
            let last = request["messages"].as_array().unwrap().last().unwrap();
            let reply = serde_json::json!({
                "content": format!("remote says: {}", last["content"].as_str().unwrap())
            })
            .to_string();
            let response = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{}",
                reply.len(),
                reply
            );
            stream.write_all(response.as_bytes()).unwrap();
        });

        let backend = RemoteBackend::new(format!("http://{addr}/chat"))
            .with_header("x-api-key", "local-test");
        let out = backend.generate(&[user("ping")], 3).unwrap();
        assert_eq!(out, "remote says: ping");
        server.join().unwrap();
    }

    #[test]
    fn remote_backend_surfaces_status_and_retry_after() {
        use std::io::{Read, Write};
        use std::net::TcpListener;

        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = [0u8; 4096];
            let _ = stream.read(&mut buf).unwrap();
            let response =
                "HTTP/1.1 429 Too Many Requests\r\nretry-after: 2\r\ncontent-length: 0\r\n\r\n";
            stream.write_all(response.as_bytes()).unwrap();
        });

        let backend = RemoteBackend::new(format!("http://{addr}/chat"));
        match backend.generate(&[user("ping")], 0) {
            Err(MemoryError::Backend {
                reason,
                retry_after_ms,
            }) => {
                assert!(reason.contains("429"));
                assert_eq!(retry_after_ms, Some(2000));
            }
            other => panic!("expected backend error, got {other:?}"),
        }
        server.join().unwrap();
    }
}
