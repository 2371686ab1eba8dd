#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use loopcheck::backends::{last_user_text, BackendError, ChatBackend, ChatMessage, ChatReply, SamplingParams};
use serde_json::{json, Value};

type Responder = dyn Fn(usize, &Value) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server for chat-completions tests. Each request gets a
/// fresh connection-close response from `responder(index, body)`.
pub struct StubServer {
    pub url: String,
    bodies: Arc<Mutex<Vec<Value>>>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
    addr: std::net::SocketAddr,
}

impl StubServer {
    pub fn start<F>(responder: F) -> Self
    where
        F: Fn(usize, &Value) -> (u16, String) + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub");
        let addr = listener.local_addr().unwrap();
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let responder: Arc<Responder> = Arc::new(responder);
        let (b, s) = (bodies.clone(), stop.clone());
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if s.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let (b, r) = (b.clone(), responder.clone());
                std::thread::spawn(move || serve(stream, &b, &*r));
            }
        });
        Self { url: format!("http://{addr}/v1"), bodies, stop, handle: Some(handle), addr }
    }

    /// Answers every request with `n` (default 1) copies of `content`.
    pub fn echo(content: &'static str) -> Self {
        Self::start(move |_, body| {
            let n = body.get("n").and_then(Value::as_u64).unwrap_or(1);
            (200, completion(&vec![content; n as usize]))
        })
    }

    pub fn requests(&self) -> usize {
        self.bodies.lock().unwrap().len()
    }

    pub fn bodies(&self) -> Vec<Value> {
        self.bodies.lock().unwrap().clone()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(stream: TcpStream, bodies: &Mutex<Vec<Value>>, responder: &Responder) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut content_length = 0usize;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((k, v)) = l.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                content_length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut raw = vec![0; content_length];
    if reader.read_exact(&mut raw).is_err() {
        return;
    }
    let body: Value = serde_json::from_slice(&raw).unwrap_or(Value::Null);
    let index = {
        let mut b = bodies.lock().unwrap();
        b.push(body.clone());
        b.len() - 1
    };
    let (code, text) = responder(index, &body);
    let reason = if code == 200 { "OK" } else { "Error" };
    let resp = format!(
        "HTTP/1.1 {code} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    );
    let mut stream = stream;
    let _ = stream.write_all(resp.as_bytes());
    let _ = stream.flush();
}

pub fn completion(texts: &[&str]) -> String {
    let choices: Vec<Value> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| json!({"index": i, "message": {"role": "assistant", "content": t}, "finish_reason": "stop"}))
        .collect();
    json!({"id": "cmpl", "object": "chat.completion", "choices": choices}).to_string()
}

/// Structural check of a chat-completions request body.
pub fn validate_chat_request(body: &Value) -> Result<(), String> {
    let obj = body.as_object().ok_or("body is not an object")?;
    const ALLOWED: &[&str] = &["model", "messages", "temperature", "max_tokens", "n", "seed"];
    if let Some(k) = obj.keys().find(|k| !ALLOWED.contains(&k.as_str())) {
        return Err(format!("unexpected key `{k}`"));
    }
    match obj.get("model").and_then(Value::as_str) {
        Some(m) if !m.is_empty() => {}
        _ => return Err("`model` must be a non-empty string".into()),
    }
    let messages = obj.get("messages").and_then(Value::as_array).ok_or("`messages` must be an array")?;
    if messages.is_empty() {
        return Err("`messages` is empty".into());
    }
    for m in messages {
        let role = m.get("role").and_then(Value::as_str).ok_or("message without role")?;
        if !["system", "user", "assistant"].contains(&role) {
            return Err(format!("bad role {role}"));
        }
        match m.get("content") {
            Some(Value::String(_)) => {}
            Some(Value::Array(parts)) if !parts.is_empty() => {
                for p in parts {
                    match p.get("type").and_then(Value::as_str) {
                        Some("text") if p.get("text").is_some_and(Value::is_string) => {}
                        Some("image_url")
                            if p.pointer("/image_url/url").and_then(Value::as_str).is_some_and(|u| u.starts_with("data:")) => {}
                        _ => return Err(format!("bad content part {p}")),
                    }
                }
            }
            _ => return Err("message content must be a string or part array".into()),
        }
    }
    match obj.get("temperature").and_then(Value::as_f64) {
        Some(t) if (0.0..=2.0).contains(&t) => {}
        _ => return Err("`temperature` must be a number in [0, 2]".into()),
    }
    for (key, required) in [("max_tokens", true), ("n", false), ("seed", false)] {
        match obj.get(key) {
            None if !required => {}
            Some(v) if v.as_u64().is_some_and(|x| key == "seed" || x >= 1) => {}
            _ => return Err(format!("`{key}` must be a positive integer")),
        }
    }
    Ok(())
}

/// Backend answering from a closure over (prompt, call index for that prompt).
pub struct ScriptedBackend {
    script: Box<dyn Fn(&str, usize) -> String + Send + Sync>,
    counts: Mutex<std::collections::HashMap<String, usize>>,
}

impl ScriptedBackend {
    pub fn new(script: impl Fn(&str, usize) -> String + Send + Sync + 'static) -> Self {
        Self { script: Box::new(script), counts: Mutex::new(Default::default()) }
    }
}

impl ChatBackend for ScriptedBackend {
    fn id(&self) -> String {
        "scripted".into()
    }

    fn chat(&self, messages: &[ChatMessage], params: &SamplingParams) -> Result<ChatReply, BackendError> {
        let prompt = last_user_text(messages).to_string();
        let mut counts = self.counts.lock().unwrap();
        let mut texts = Vec::new();
        for _ in 0..params.n_samples {
            let k = counts.entry(prompt.clone()).or_default();
            texts.push((self.script)(&prompt, *k));
            *k += 1;
        }
        Ok(ChatReply::new(texts))
    }
}
