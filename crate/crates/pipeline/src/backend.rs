use std::collections::BTreeSet;
use std::sync::Arc;

use ethoclip::corpus::VideoAsset;
use ethoclip::ethogram::Ethogram;
use image::RgbImage;
use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};

use crate::types::Segment;

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    /// Unreachable service, timeout or 5xx. Worth retrying.
    #[error("transport error: {0}")]
    Transport(String),
    /// The service answered with something we cannot use.
    #[error("protocol error: {0}")]
    Protocol(String),
    /// The request itself was bad (e.g. undecodable media).
    #[error("input error: {0}")]
    Input(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            BackendError::Transport(_) => "transport",
            BackendError::Protocol(_) => "protocol",
            BackendError::Input(_) => "input",
        }
    }
}

pub type BackendResult<T> = Result<T, BackendError>;

pub trait Transcriber: Send + Sync {
    /// Segments in the original spoken language, in any order.
    fn transcribe(&self, video: &VideoAsset, language: &str) -> BackendResult<Vec<Segment>>;
}

pub trait QualityJudge: Send + Sync {
    /// 1 when the transcript describes observable behaviour, 0 otherwise.
    fn score(&self, text: &str) -> BackendResult<u8>;
}

pub trait BehaviorClassifier: Send + Sync {
    /// Raw labels; the pipeline normalises them against the ethogram.
    fn classify(&self, text: &str, ethogram: &Ethogram) -> BackendResult<Vec<String>>;
}

pub trait Translator: Send + Sync {
    fn translate(&self, text: &str, request: &TranslationRequest<'_>) -> BackendResult<String>;
}

pub trait ImageTextScorer: Send + Sync {
    /// One cosine similarity in [-1, 1] per frame.
    fn score_frames(&self, frames: &[RgbImage], text: &str) -> BackendResult<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlossaryEntry {
    pub source: String,
    pub target: String,
}

/// Domain phrases a literal translation gets wrong.
pub fn default_glossary() -> Vec<GlossaryEntry> {
    [
        ("está rolando uma interação", "an interaction is happening"),
        ("tá rolando uma interação", "an interaction is happening"),
        ("macaco-prego", "capuchin monkey"),
    ]
    .into_iter()
    .map(|(s, t)| GlossaryEntry {
        source: s.into(),
        target: t.into(),
    })
    .collect()
}

pub struct TranslationRequest<'a> {
    pub source_language: &'a str,
    pub target_language: &'a str,
    pub glossary: &'a [GlossaryEntry],
    pub names: &'a [String],
}

/// The five backend slots. Every slot is filled by construction.
#[derive(Clone)]
pub struct BackendSuite {
    pub transcriber: Arc<dyn Transcriber>,
    pub quality_judge: Arc<dyn QualityJudge>,
    pub behavior_classifier: Arc<dyn BehaviorClassifier>,
    pub translator: Arc<dyn Translator>,
    pub image_text_scorer: Arc<dyn ImageTextScorer>,
}

/// Keeps labels that exactly name an ethogram action, in first-seen order
/// without repeats. Returns the kept labels and the discarded ones.
pub fn normalize_behaviors(raw: &[String], ethogram: &Ethogram) -> (Vec<String>, Vec<String>) {
    let mut seen = BTreeSet::new();
    let mut kept = Vec::new();
    let mut unknown = Vec::new();
    for label in raw {
        let label = label.trim();
        if ethogram.contains(label) {
            if seen.insert(label.to_string()) {
                kept.push(label.to_string());
            }
        } else {
            unknown.push(label.to_string());
        }
    }
    (kept, unknown)
}

fn name_pattern(name: &str) -> Option<Regex> {
    let name = name.trim();
    if name.is_empty() {
        return None;
    }
    let words: Vec<String> = name.split_whitespace().map(regex::escape).collect();
    RegexBuilder::new(&format!(r"\b{}\b", words.join(r"\s+")))
        .case_insensitive(true)
        .build()
        .ok()
}

/// Replaces every name in `names` by "the monkey", capitalised at the start
/// of a sentence.
pub fn anonymize(text: &str, names: &[String]) -> String {
    let mut out = text.to_string();
    for re in names.iter().filter_map(|n| name_pattern(n)) {
        let mut next = String::with_capacity(out.len());
        let mut last = 0;
        for m in re.find_iter(&out) {
            next.push_str(&out[last..m.start()]);
            let before = next.trim_end();
            let sentence_start = before.is_empty() || before.ends_with(['.', '!', '?']);
            next.push_str(if sentence_start { "The monkey" } else { "the monkey" });
            last = m.end();
        }
        next.push_str(&out[last..]);
        out = next;
    }
    out
}

/// Names from `names` that still occur as tokens in `text`.
pub fn names_present<'a>(text: &str, names: &'a [String]) -> Vec<&'a str> {
    names
        .iter()
        .filter(|n| name_pattern(n).is_some_and(|re| re.is_match(text)))
        .map(String::as_str)
        .collect()
}

/// Case-insensitive phrase substitution, longest source phrase first.
pub fn apply_glossary(text: &str, glossary: &[GlossaryEntry]) -> String {
    let mut entries: Vec<&GlossaryEntry> = glossary.iter().filter(|g| !g.source.trim().is_empty()).collect();
    entries.sort_by_key(|g| std::cmp::Reverse(g.source.chars().count()));
    let mut out = text.to_string();
    for g in entries {
        let words: Vec<String> = g.source.split_whitespace().map(regex::escape).collect();
        if let Ok(re) = RegexBuilder::new(&words.join(r"\s+")).case_insensitive(true).build() {
            out = re.replace_all(&out, regex::NoExpand(&g.target)).into_owned();
        }
    }
    out
}
