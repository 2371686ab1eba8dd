//! OpenAI-compatible `POST {endpoint}/chat/completions` client.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde_json::{json, Value};

use super::{
    cache_key, canonical_request, is_cacheable, validate_request, BackendConfig, BackendError, CacheEntry,
    ChatBackend, ChatMessage, ChatReply, MessageRole, ResponseCache, SamplingParams,
};

/// Counting semaphore capping in-flight requests.
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n), cv: Condvar::new() }
    }

    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().expect("slot lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("slot lock");
        }
        *free -= 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("slot lock") += 1;
        self.0.cv.notify_one();
    }
}

/// Exponential backoff with jitter: a uniform draw from `[d/2, d]` where
/// `d = min(cap, base * 2^attempt)`.
pub fn backoff_delay(attempt: u32, base: Duration, cap: Duration, rng: &mut impl Rng) -> Duration {
    let exp = base.saturating_mul(1u32.checked_shl(attempt.min(31)).unwrap_or(u32::MAX));
    let ceiling = exp.min(cap);
    if ceiling.is_zero() {
        return ceiling;
    }
    let nanos = ceiling.as_nanos() as u64;
    Duration::from_nanos(rng.gen_range(nanos / 2..=nanos))
}

pub struct HttpBackend {
    config: BackendConfig,
    client: reqwest::blocking::Client,
    url: String,
    cache: Option<ResponseCache>,
    slots: Slots,
    requests_sent: AtomicU64,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let endpoint = config.endpoint_url.as_deref().expect("validated");
        let url = format!("{}/chat/completions", endpoint.trim_end_matches('/'));
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout())
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let cache = config.cache_dir.as_deref().map(ResponseCache::open).transpose()?;
        let slots = Slots::new(config.max_in_flight);
        Ok(Self { config, client, url, cache, slots, requests_sent: AtomicU64::new(0) })
    }

    /// Number of HTTP requests issued so far, retries included.
    pub fn requests_sent(&self) -> u64 {
        self.requests_sent.load(Ordering::SeqCst)
    }

    /// JSON body for one request asking for `n` choices.
    pub fn request_body(&self, messages: &[ChatMessage], params: &SamplingParams, n: Option<u32>) -> Value {
        let messages: Vec<Value> = messages.iter().map(wire_message).collect();
        let mut body = json!({
            "model": self.config.model_name,
            "messages": messages,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        if let Some(n) = n {
            body["n"] = json!(n);
        }
        if let (Some(seed), true) = (params.seed, self.config.send_seed) {
            body["seed"] = json!(seed);
        }
        body
    }

    fn auth_token(&self) -> Result<Option<String>, BackendError> {
        match &self.config.auth_token_env_var {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| BackendError::AuthMissing(var.clone())),
        }
    }

    /// POST one body, retrying 429 and 5xx. Returns the parsed body and the retry count.
    fn post(&self, body: &Value, token: Option<&str>) -> Result<(Value, u32), BackendError> {
        let base = Duration::from_millis(self.config.backoff_base_ms);
        let cap = Duration::from_millis(self.config.backoff_cap_ms);
        let mut rng = rand::thread_rng();
        let mut attempt = 0;
        loop {
            let status_and_text = {
                let _slot = self.slots.acquire();
                self.requests_sent.fetch_add(1, Ordering::SeqCst);
                let mut req = self.client.post(&self.url).json(body);
                if let Some(token) = token {
                    req = req.bearer_auth(token);
                }
                let resp = req.send().map_err(map_transport)?;
                let status = resp.status();
                let text = resp.text().map_err(map_transport)?;
                (status, text)
            };
            let (status, text) = status_and_text;
            if status.is_success() {
                let parsed: Value = serde_json::from_str(&text)
                    .map_err(|e| BackendError::MalformedResponse(format!("invalid JSON: {e}")))?;
                return Ok((parsed, attempt));
            }
            let retryable = status.as_u16() == 429 || status.is_server_error();
            if !retryable || attempt >= self.config.max_retries {
                return Err(BackendError::HttpStatus { code: status.as_u16(), body: text });
            }
            let delay = backoff_delay(attempt, base, cap, &mut rng);
            tracing::debug!(status = status.as_u16(), attempt, ?delay, "retrying chat request");
            std::thread::sleep(delay);
            attempt += 1;
        }
    }
}

fn map_transport(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout
    } else {
        BackendError::Transport(e.to_string())
    }
}

fn wire_message(m: &ChatMessage) -> Value {
    let role = match m.role {
        MessageRole::System => "system",
        MessageRole::User => "user",
        MessageRole::Assistant => "assistant",
    };
    match &m.image {
        None => json!({ "role": role, "content": m.text }),
        Some(image) => json!({
            "role": role,
            "content": [
                { "type": "text", "text": m.text },
                { "type": "image_url", "image_url": { "url": image.data_url() } },
            ],
        }),
    }
}

/// Assistant contents of every choice in a chat-completions response body.
pub(crate) fn choice_texts(body: &Value) -> Result<Vec<String>, BackendError> {
    let choices = body
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::MalformedResponse("missing `choices`".into()))?;
    choices
        .iter()
        .map(|c| {
            c.pointer("/message/content")
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| BackendError::MalformedResponse("choice without message content".into()))
        })
        .collect()
}

impl ChatBackend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}", self.config.model_name)
    }

    fn chat(&self, messages: &[ChatMessage], params: &SamplingParams) -> Result<ChatReply, BackendError> {
        validate_request(messages, params)?;
        let start = Instant::now();
        let cache = self.cache.as_ref().filter(|_| is_cacheable(&self.config, params));
        let key = cache_key(&self.config, messages, params);
        if let Some(entry) = cache.and_then(|c| c.get(&key)) {
            let mut texts = Vec::new();
            for body in &entry.responses {
                texts.extend(choice_texts(body)?);
            }
            if texts.len() >= params.n_samples as usize {
                texts.truncate(params.n_samples as usize);
                return Ok(ChatReply { texts, retries: 0, cached: true, elapsed: Some(start.elapsed()) });
            }
        }

        let token = self.auth_token()?;
        let want = params.n_samples as usize;
        let mut texts = Vec::with_capacity(want);
        let mut bodies = Vec::new();
        let mut retries = 0;
        if self.config.supports_n {
            let (body, r) = self.post(&self.request_body(messages, params, Some(params.n_samples)), token.as_deref())?;
            retries += r;
            texts.extend(choice_texts(&body)?);
            bodies.push(body);
        }
        // Servers that ignore `n` get topped up with single-choice calls.
        while texts.len() < want {
            let (body, r) = self.post(&self.request_body(messages, params, None), token.as_deref())?;
            retries += r;
            let got = choice_texts(&body)?;
            if got.is_empty() {
                return Err(BackendError::MalformedResponse("response with no choices".into()));
            }
            texts.extend(got);
            bodies.push(body);
        }
        texts.truncate(want);

        if let Some(cache) = cache {
            let entry = CacheEntry {
                request: canonical_request(&self.config.model_name, messages, params),
                responses: bodies,
            };
            if let Err(e) = cache.put(&key, &entry) {
                tracing::warn!("cache write failed: {e}");
            }
        }
        Ok(ChatReply { texts, retries, cached: false, elapsed: Some(start.elapsed()) })
    }
}
