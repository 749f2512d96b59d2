//! Minimal HTTP/1.1 server speaking the completions wire format.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use serde_json::{json, Value};

pub type Handler = dyn Fn(&Value, usize) -> (u16, String) + Send + Sync;

pub struct Stub {
    pub base_url: String,
    requests: Arc<AtomicUsize>,
}

impl Stub {
    pub fn start(handler: impl Fn(&Value, usize) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub");
        let base_url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let counter = requests.clone();
        let handler: Arc<Handler> = Arc::new(handler);
        thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let handler = handler.clone();
                let n = counter.fetch_add(1, Ordering::SeqCst);
                thread::spawn(move || serve(stream, &*handler, n));
            }
        });
        Self { base_url, requests }
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

fn serve(stream: TcpStream, handler: &Handler, n: usize) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0; length];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let request: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    let (status, payload) = handler(&request, n);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
    let _ = stream.flush();
}

/// Whitespace tokenization where each token after the first carries its
/// leading space; offsets are in characters.
pub fn word_tokens(text: &str) -> (Vec<String>, Vec<usize>) {
    let mut tokens = Vec::new();
    let mut offsets = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    for (i, c) in text.chars().enumerate() {
        if c.is_whitespace() && !current.trim().is_empty() {
            tokens.push(std::mem::take(&mut current));
            offsets.push(start);
            start = i;
        }
        current.push(c);
    }
    if !current.is_empty() {
        tokens.push(current);
        offsets.push(start);
    }
    (tokens, offsets)
}

/// Deterministic log-probability the stub assigns to a token.
pub fn stub_logprob(token: &str) -> f64 {
    let sum: u32 = token.bytes().map(u32::from).sum();
    -0.05 * f64::from(1 + sum % 37) - 1e-3 * token.chars().count() as f64
}

pub fn echo_body(tokens: &[String], offsets: &[usize]) -> String {
    let logprobs: Vec<Value> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if i == 0 {
                Value::Null
            } else {
                json!(stub_logprob(t))
            }
        })
        .collect();
    json!({
        "choices": [{
            "text": tokens.concat(),
            "logprobs": {
                "tokens": tokens,
                "token_logprobs": logprobs,
                "text_offset": offsets,
            }
        }]
    })
    .to_string()
}

/// Echo scorer with word tokens; generation requests get `canned`.
pub fn echo_handler(canned: &'static str) -> impl Fn(&Value, usize) -> (u16, String) + Send + Sync {
    move |req, _| {
        if req["echo"] == json!(true) {
            let (tokens, offsets) = word_tokens(req["prompt"].as_str().unwrap_or_default());
            (200, echo_body(&tokens, &offsets))
        } else {
            (200, json!({"choices": [{"text": canned}]}).to_string())
        }
    }
}

/// Like [`echo_handler`] but splits the final token in two, so the server's
/// tokenization no longer lines up with the response tokens.
pub fn split_last_handler() -> impl Fn(&Value, usize) -> (u16, String) + Send + Sync {
    move |req, _| {
        let (mut tokens, mut offsets) = word_tokens(req["prompt"].as_str().unwrap_or_default());
        let last = tokens.pop().unwrap();
        let start = offsets.last().copied().unwrap();
        let cut = last.chars().count() / 2;
        let (a, b): (String, String) = (
            last.chars().take(cut).collect(),
            last.chars().skip(cut).collect(),
        );
        tokens.push(a);
        tokens.push(b);
        offsets.push(start + cut);
        (200, echo_body(&tokens, &offsets))
    }
}

/// Echo scorer whose log-probabilities shrink toward zero as the prompt
/// grows, so more context makes the response more likely.
pub fn context_sensitive_handler() -> impl Fn(&Value, usize) -> (u16, String) + Send + Sync {
    move |req, _| {
        let (tokens, offsets) = word_tokens(req["prompt"].as_str().unwrap_or_default());
        let scale = 1.0 / (1.0 + 0.05 * tokens.len() as f64);
        let logprobs: Vec<Value> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == 0 {
                    Value::Null
                } else {
                    json!(stub_logprob(t) * scale)
                }
            })
            .collect();
        let body = json!({
            "choices": [{
                "text": tokens.concat(),
                "logprobs": {"tokens": tokens, "token_logprobs": logprobs, "text_offset": offsets}
            }]
        });
        (200, body.to_string())
    }
}
