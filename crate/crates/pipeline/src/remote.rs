//! JSON-over-HTTP clients for the backend slots.
//!
//! Language-model slots speak a chat-completion protocol:
//! `POST {base}/chat/completions` with `{model, temperature, messages}` and
//! the reply text at `choices[0].message.content`.
//!
//! Transcription: `POST {base}/transcriptions` with
//! `{video_id, path, language}` returning `{segments: [{start, end, text}]}`.
//! A 415 or 422 answer means the media could not be decoded.
//!
//! Scoring: `POST {base}/score` with `{text, images: [base64 PNG, ...]}`
//! returning `{scores: [..]}`, one cosine per image.

use std::io::Cursor;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use ethoclip::corpus::VideoAsset;
use ethoclip::ethogram::Ethogram;
use image::RgbImage;
use serde_json::{json, Value};

use crate::backend::{
    BackendError, BackendResult, BackendSuite, BehaviorClassifier, ImageTextScorer, QualityJudge, Transcriber,
    TranslationRequest, Translator,
};
use crate::prompts::{render, render_ethogram, render_glossary, PromptSet};
use crate::types::Segment;

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    pub fn new(permits: usize) -> Self {
        Self {
            free: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Clone, Debug)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(250),
            timeout: Duration::from_secs(60),
        }
    }
}

/// One service endpoint: base URL, optional bearer key, retries and a shared limiter.
#[derive(Clone)]
pub struct HttpService {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    limiter: Arc<Limiter>,
}

impl HttpService {
    pub fn new(base_url: &str, api_key: Option<String>, retry: RetryPolicy, limiter: Arc<Limiter>) -> BackendResult<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(retry.timeout)
            .build()
            .map_err(|e| BackendError::Transport(format!("building http client: {e}")))?;
        Ok(Self {
            client,
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
            retry,
            limiter,
        })
    }

    fn attempt(&self, url: &str, body: &Value) -> BackendResult<Value> {
        let _permit = self.limiter.acquire();
        let mut req = self.client.post(url).json(body);
        if let Some(k) = &self.api_key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(|e| BackendError::Transport(format!("{url}: {e}")))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transport(format!("{url}: reading body: {e}")))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(BackendError::Transport(format!("{url}: HTTP {status}")));
        }
        if matches!(status.as_u16(), 415 | 422) {
            return Err(BackendError::Input(format!("{url}: HTTP {status}: {}", snippet(&text))));
        }
        if !status.is_success() {
            return Err(BackendError::Protocol(format!("{url}: HTTP {status}: {}", snippet(&text))));
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Protocol(format!("{url}: reply is not JSON: {e}")))
    }

    /// POSTs `body` to `{base}/{path}`, retrying transport failures with
    /// exponential backoff.
    pub fn post(&self, path: &str, body: &Value) -> BackendResult<Value> {
        let url = format!("{}/{}", self.base_url, path.trim_start_matches('/'));
        let mut delay = self.retry.base_delay;
        let mut attempt = 1;
        loop {
            match self.attempt(&url, body) {
                Err(e) if e.is_retryable() && attempt < self.retry.attempts => {
                    log::warn!("attempt {attempt}/{} failed: {e}", self.retry.attempts);
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

fn snippet(s: &str) -> String {
    s.chars().take(200).collect()
}

#[derive(Clone)]
pub struct ChatClient {
    pub service: HttpService,
    pub model: String,
}

impl ChatClient {
    pub fn complete(&self, prompt: &str) -> BackendResult<String> {
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let reply = self.service.post("chat/completions", &body)?;
        reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Protocol("reply has no choices[0].message.content".into()))
    }
}

/// Accepts a bare 0/1 (optionally quoted or followed by punctuation) or `{"score": n}`.
pub fn parse_quality_reply(reply: &str) -> BackendResult<u8> {
    let t = reply.trim().trim_matches(|c: char| c == '"' || c == '\'' || c == '.' || c.is_whitespace());
    match t {
        "0" => return Ok(0),
        "1" => return Ok(1),
        _ => {}
    }
    if let Ok(v) = serde_json::from_str::<Value>(t) {
        match v.get("score").and_then(Value::as_u64) {
            Some(0) => return Ok(0),
            Some(1) => return Ok(1),
            _ => {}
        }
    }
    Err(BackendError::Protocol(format!("quality reply is not 0 or 1: {:?}", snippet(reply))))
}

/// Accepts a JSON array of strings, possibly wrapped in prose or in `{"behaviors": [..]}`.
pub fn parse_behavior_reply(reply: &str) -> BackendResult<Vec<String>> {
    let bad = || BackendError::Protocol(format!("behavior reply is not a JSON list: {:?}", snippet(reply)));
    if let Ok(v) = serde_json::from_str::<Value>(reply.trim()) {
        if let Some(list) = v.get("behaviors") {
            return serde_json::from_value(list.clone()).map_err(|_| bad());
        }
    }
    let (open, close) = (reply.find('[').ok_or_else(bad)?, reply.rfind(']').ok_or_else(bad)?);
    if close < open {
        return Err(bad());
    }
    serde_json::from_str(&reply[open..=close]).map_err(|_| bad())
}

pub struct LlmJudge {
    pub chat: ChatClient,
    pub template: String,
}

impl QualityJudge for LlmJudge {
    fn score(&self, text: &str) -> BackendResult<u8> {
        parse_quality_reply(&self.chat.complete(&render(&self.template, &[("transcript", text)]))?)
    }
}

pub struct LlmClassifier {
    pub chat: ChatClient,
    pub template: String,
}

impl BehaviorClassifier for LlmClassifier {
    fn classify(&self, text: &str, ethogram: &Ethogram) -> BackendResult<Vec<String>> {
        let prompt = render(
            &self.template,
            &[("transcript", text), ("ethogram", &render_ethogram(ethogram))],
        );
        parse_behavior_reply(&self.chat.complete(&prompt)?)
    }
}

pub struct LlmTranslator {
    pub chat: ChatClient,
    pub template: String,
}

impl Translator for LlmTranslator {
    fn translate(&self, text: &str, request: &TranslationRequest<'_>) -> BackendResult<String> {
        let prompt = render(
            &self.template,
            &[
                ("transcript", text),
                ("glossary", &render_glossary(request.glossary, request.names)),
                ("source_language", request.source_language),
                ("target_language", request.target_language),
            ],
        );
        Ok(self.chat.complete(&prompt)?.trim().to_string())
    }
}

pub struct AsrClient {
    pub service: HttpService,
}

impl Transcriber for AsrClient {
    fn transcribe(&self, video: &VideoAsset, language: &str) -> BackendResult<Vec<Segment>> {
        let body = json!({
            "video_id": video.id,
            "path": video.path,
            "language": language,
        });
        let reply = self.service.post("transcriptions", &body)?;
        let segs = reply
            .get("segments")
            .cloned()
            .ok_or_else(|| BackendError::Protocol("transcription reply has no segments".into()))?;
        serde_json::from_value(segs).map_err(|e| BackendError::Protocol(format!("bad segment list: {e}")))
    }
}

pub struct RemoteScorer {
    pub service: HttpService,
}

pub fn png_base64(img: &RgbImage) -> BackendResult<String> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| BackendError::Input(format!("encoding frame: {e}")))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(buf.into_inner()))
}

impl ImageTextScorer for RemoteScorer {
    fn score_frames(&self, frames: &[RgbImage], text: &str) -> BackendResult<Vec<f64>> {
        let images = frames.iter().map(png_base64).collect::<BackendResult<Vec<_>>>()?;
        let reply = self.service.post("score", &json!({"text": text, "images": images}))?;
        reply
            .get("scores")
            .cloned()
            .and_then(|v| serde_json::from_value(v).ok())
            .ok_or_else(|| BackendError::Protocol("score reply has no numeric scores list".into()))
    }
}

pub const ENV_LLM_BASE_URL: &str = "PIPELINE_LLM_BASE_URL";
pub const ENV_LLM_MODEL: &str = "PIPELINE_LLM_MODEL";
pub const ENV_LLM_API_KEY: &str = "PIPELINE_LLM_API_KEY";
pub const ENV_ASR_BASE_URL: &str = "PIPELINE_ASR_BASE_URL";
pub const ENV_ASR_API_KEY: &str = "PIPELINE_ASR_API_KEY";
pub const ENV_SCORER_BASE_URL: &str = "PIPELINE_SCORER_BASE_URL";

#[derive(Clone, Debug, Default)]
pub struct RemoteSettings {
    pub llm_base_url: String,
    pub llm_model: String,
    pub llm_api_key: Option<String>,
    pub asr_base_url: String,
    pub asr_api_key: Option<String>,
    pub scorer_base_url: String,
    pub retry: RetryPolicy,
    pub concurrency: usize,
}

impl RemoteSettings {
    /// Reads the `PIPELINE_*` variables; every base URL and the model name are required.
    pub fn from_env() -> Result<Self, String> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, String> {
        let mut missing = Vec::new();
        let mut req = |k: &'static str| {
            get(k).filter(|v| !v.is_empty()).unwrap_or_else(|| {
                missing.push(k);
                String::new()
            })
        };
        let s = Self {
            llm_base_url: req(ENV_LLM_BASE_URL),
            llm_model: req(ENV_LLM_MODEL),
            asr_base_url: req(ENV_ASR_BASE_URL),
            scorer_base_url: req(ENV_SCORER_BASE_URL),
            llm_api_key: get(ENV_LLM_API_KEY).filter(|v| !v.is_empty()),
            asr_api_key: get(ENV_ASR_API_KEY).filter(|v| !v.is_empty()),
            retry: RetryPolicy::default(),
            concurrency: 4,
        };
        if missing.is_empty() {
            Ok(s)
        } else {
            Err(format!("missing environment variables: {}", missing.join(", ")))
        }
    }
}

impl BackendSuite {
    pub fn remote(settings: &RemoteSettings, prompts: &PromptSet) -> BackendResult<Self> {
        prompts.validate().map_err(BackendError::Input)?;
        let limiter = Arc::new(Limiter::new(settings.concurrency));
        let svc = |url: &str, key: &Option<String>| HttpService::new(url, key.clone(), settings.retry.clone(), limiter.clone());
        let chat = ChatClient {
            service: svc(&settings.llm_base_url, &settings.llm_api_key)?,
            model: settings.llm_model.clone(),
        };
        Ok(Self {
            transcriber: Arc::new(AsrClient {
                service: svc(&settings.asr_base_url, &settings.asr_api_key)?,
            }),
            quality_judge: Arc::new(LlmJudge {
                chat: chat.clone(),
                template: prompts.quality.clone(),
            }),
            behavior_classifier: Arc::new(LlmClassifier {
                chat: chat.clone(),
                template: prompts.behavior.clone(),
            }),
            translator: Arc::new(LlmTranslator {
                chat,
                template: prompts.translate.clone(),
            }),
            image_text_scorer: Arc::new(RemoteScorer {
                service: svc(&settings.scorer_base_url, &None)?,
            }),
        })
    }
}
