//! Deterministic stand-ins for every backend slot, so the whole chain runs offline.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use ethoclip::corpus::VideoAsset;
use ethoclip::ethogram::Ethogram;
use image::RgbImage;
use sha2::{Digest, Sha256};

use crate::backend::{
    anonymize, apply_glossary, BackendError, BackendResult, BackendSuite, BehaviorClassifier, ImageTextScorer,
    QualityJudge, Transcriber, TranslationRequest, Translator,
};
use crate::types::Segment;

/// Returns pre-recorded segments per video id; unknown ids are silent.
#[derive(Clone, Debug, Default)]
pub struct ScriptedTranscriber {
    pub scripts: BTreeMap<String, Vec<Segment>>,
}

impl ScriptedTranscriber {
    pub fn new(scripts: BTreeMap<String, Vec<Segment>>) -> Self {
        Self { scripts }
    }

    /// Reads `{"<video_id>": [{"start", "end", "text"}, ...], ...}`.
    pub fn from_json_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let scripts = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(Self { scripts })
    }
}

impl Transcriber for ScriptedTranscriber {
    fn transcribe(&self, video: &VideoAsset, _language: &str) -> BackendResult<Vec<Segment>> {
        Ok(self.scripts.get(&video.id).cloned().unwrap_or_default())
    }
}

/// Marks plans, excuses and other non-observations as irrelevant.
#[derive(Clone, Debug)]
pub struct RuleJudge {
    pub drop_phrases: Vec<String>,
}

impl Default for RuleJudge {
    fn default() -> Self {
        let phrases = [
            "we shall",
            "we will",
            "we'll",
            "we are going to",
            "we're going to",
            "let's",
            "let us",
            "i will",
            "i'll",
            "we should",
            "we need to",
            "we have to",
            "we can't see",
            "i can't see",
            "we lost",
            "sorry",
            "battery",
        ];
        Self {
            drop_phrases: phrases.into_iter().map(String::from).collect(),
        }
    }
}

impl QualityJudge for RuleJudge {
    fn score(&self, text: &str) -> BackendResult<u8> {
        let lower = text.to_lowercase();
        if lower.trim().is_empty() {
            return Ok(0);
        }
        Ok(u8::from(!self.drop_phrases.iter().any(|p| lower.contains(p.as_str()))))
    }
}

/// Tags an action when the text contains one of its keywords, allowing
/// plural and verb endings on the last word.
///
/// Keywords come from the action names: the lowercased name, its pieces
/// split on `/`, `,` and ` or `, and `-ing` names without the suffix.
#[derive(Clone, Debug)]
pub struct KeywordClassifier {
    table: Vec<(String, Vec<String>)>,
}

const SUFFIXES: [&str; 6] = ["", "s", "es", "d", "ed", "ing"];

impl KeywordClassifier {
    pub fn from_ethogram(ethogram: &Ethogram) -> Self {
        let table = ethogram
            .names()
            .map(|name| {
                let lower = name.to_lowercase();
                let mut kws = vec![lower.clone()];
                for piece in lower.split(['/', ',']).flat_map(|p| p.split(" or ")) {
                    let piece = piece.trim();
                    if !piece.is_empty() && !kws.iter().any(|k| k == piece) {
                        kws.push(piece.to_string());
                    }
                }
                for k in kws.clone() {
                    if let Some(stem) = k.strip_suffix("ing") {
                        if stem.len() >= 3 && !kws.iter().any(|x| x == stem) {
                            kws.push(stem.to_string());
                        }
                    }
                }
                (name.to_string(), kws)
            })
            .collect();
        Self { table }
    }

    pub fn keywords(&self, action: &str) -> Option<&[String]> {
        self.table.iter().find(|(a, _)| a == action).map(|(_, k)| k.as_slice())
    }

    fn words(text: &str) -> Vec<&str> {
        text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect()
    }

    /// `hug` matches hug, hugs, hugged, hugging; `chase` also matches chasing.
    fn word_form(word: &str, base: &str) -> bool {
        if let Some(rest) = word.strip_prefix(base) {
            if SUFFIXES.contains(&rest) {
                return true;
            }
            let mut cs = rest.chars();
            if cs.next() == base.chars().last() && matches!(cs.as_str(), "ing" | "ed") {
                return true;
            }
        }
        base.strip_suffix('e')
            .and_then(|stem| word.strip_prefix(stem))
            .is_some_and(|rest| rest == "ing")
    }

    fn matches(text_words: &[&str], kw: &str) -> bool {
        let kw_words = Self::words(kw);
        let Some((last, head)) = kw_words.split_last() else {
            return false;
        };
        text_words.windows(kw_words.len()).any(|w| {
            w[..head.len()] == *head && Self::word_form(w[head.len()], last)
        })
    }
}

impl BehaviorClassifier for KeywordClassifier {
    fn classify(&self, text: &str, ethogram: &Ethogram) -> BackendResult<Vec<String>> {
        let lower = text.to_lowercase();
        let words = Self::words(&lower);
        Ok(self
            .table
            .iter()
            .filter(|(a, _)| ethogram.contains(a))
            .filter(|(_, kws)| kws.iter().any(|k| Self::matches(&words, k)))
            .map(|(a, _)| a.clone())
            .collect())
    }
}

/// Returns a fixed label list per exact text, for exercising normalisation.
#[derive(Clone, Debug, Default)]
pub struct ScriptedClassifier {
    pub replies: HashMap<String, Vec<String>>,
}

impl BehaviorClassifier for ScriptedClassifier {
    fn classify(&self, text: &str, _ethogram: &Ethogram) -> BackendResult<Vec<String>> {
        Ok(self.replies.get(text).cloned().unwrap_or_default())
    }
}

/// Identity translation followed by glossary and name substitution.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityTranslator;

impl Translator for IdentityTranslator {
    fn translate(&self, text: &str, request: &TranslationRequest<'_>) -> BackendResult<String> {
        Ok(anonymize(&apply_glossary(text, request.glossary), request.names))
    }
}

/// Stable pseudo-similarity: SHA-256 of (text, frame) mapped to [-1, 1].
#[derive(Clone, Copy, Debug, Default)]
pub struct HashScorer;

impl HashScorer {
    pub fn frame_score(frame: &RgbImage, text: &str) -> f64 {
        let mut h = Sha256::new();
        h.update((text.len() as u64).to_le_bytes());
        h.update(text.as_bytes());
        h.update(frame.width().to_le_bytes());
        h.update(frame.height().to_le_bytes());
        h.update(frame.as_raw());
        let d = h.finalize();
        let mut word = [0u8; 8];
        word.copy_from_slice(&d[..8]);
        // 53 bits give an exactly representable uniform grid.
        let u = (u64::from_le_bytes(word) >> 11) as f64 / (1u64 << 53) as f64;
        2.0 * u - 1.0
    }
}

impl ImageTextScorer for HashScorer {
    fn score_frames(&self, frames: &[RgbImage], text: &str) -> BackendResult<Vec<f64>> {
        Ok(frames.iter().map(|f| Self::frame_score(f, text)).collect())
    }
}

/// The same score for every frame, looked up by text.
#[derive(Clone, Debug, Default)]
pub struct TableScorer {
    pub scores: HashMap<String, f64>,
    pub default: f64,
}

impl ImageTextScorer for TableScorer {
    fn score_frames(&self, frames: &[RgbImage], text: &str) -> BackendResult<Vec<f64>> {
        let s = self.scores.get(text).copied().unwrap_or(self.default);
        Ok(vec![s; frames.len()])
    }
}

/// Always fails with the given error; useful for failure accounting.
#[derive(Clone, Debug)]
pub struct Failing(pub BackendError);

impl QualityJudge for Failing {
    fn score(&self, _text: &str) -> BackendResult<u8> {
        Err(self.0.clone())
    }
}

impl Transcriber for Failing {
    fn transcribe(&self, _video: &VideoAsset, _language: &str) -> BackendResult<Vec<Segment>> {
        Err(self.0.clone())
    }
}

impl ImageTextScorer for Failing {
    fn score_frames(&self, _frames: &[RgbImage], _text: &str) -> BackendResult<Vec<f64>> {
        Err(self.0.clone())
    }
}

impl BackendSuite {
    /// All-fake suite around a scripted transcriber.
    pub fn fakes(transcriber: ScriptedTranscriber, ethogram: &Ethogram) -> Self {
        Self {
            transcriber: Arc::new(transcriber),
            quality_judge: Arc::new(RuleJudge::default()),
            behavior_classifier: Arc::new(KeywordClassifier::from_ethogram(ethogram)),
            translator: Arc::new(IdentityTranslator),
            image_text_scorer: Arc::new(HashScorer),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::default_glossary;

    #[test]
    fn judge_examples() {
        let j = RuleJudge::default();
        assert_eq!(j.score("We shall try to observe something.").unwrap(), 0);
        assert_eq!(j.score("We will go after the monkey.").unwrap(), 0);
        assert_eq!(j.score("The hug is happening again between monkeys.").unwrap(), 1);
        assert_eq!(j.score("   ").unwrap(), 0);
    }

    #[test]
    fn keyword_examples() {
        let e = Ethogram::capuchin();
        let c = KeywordClassifier::from_ethogram(&e);
        let tag = |t: &str| c.classify(t, &e).unwrap();
        assert_eq!(tag("The hug is happening again between monkeys."), vec!["Hug"]);
        assert!(tag("It is raining heavily.").is_empty());
        assert_eq!(tag("Two monkeys hugging"), vec!["Hug"]);
        assert_eq!(tag("one is chasing the other"), vec!["Chase"]);
        assert_eq!(tag("it rests now"), vec!["Rest/Sleep"]);
        assert_eq!(tag("the young one runs off"), vec!["Move, Walk or Run"]);
        assert_eq!(tag("a grooming session"), vec!["Grooming"]);
        assert!(tag("a huge tree").is_empty());
        assert!(c.keywords("Grooming").unwrap().contains(&"groom".to_string()));
    }

    #[test]
    fn every_action_reachable_by_its_name() {
        let e = Ethogram::capuchin();
        let c = KeywordClassifier::from_ethogram(&e);
        for name in e.names() {
            let got = c.classify(&format!("look: {} here", name.to_lowercase()), &e).unwrap();
            assert!(got.iter().any(|g| g == name), "{name}: {got:?}");
        }
    }

    #[test]
    fn translator_examples() {
        let names = vec!["Paçoca".to_string()];
        let g = default_glossary();
        let req = TranslationRequest {
            source_language: "pt",
            target_language: "en",
            glossary: &g,
            names: &names,
        };
        let t = IdentityTranslator;
        assert_eq!(t.translate("Paçoca eats a fruit", &req).unwrap(), "The monkey eats a fruit");
        let out = t.translate("está rolando uma interação", &req).unwrap();
        assert!(out.contains("interaction") && !out.contains("rolling"), "{out}");
    }

    #[test]
    fn hash_scorer_is_stable_and_bounded() {
        let f = RgbImage::from_pixel(4, 4, image::Rgb([10, 20, 30]));
        let a = HashScorer::frame_score(&f, "hug");
        assert_eq!(a, HashScorer::frame_score(&f, "hug"));
        assert_ne!(a, HashScorer::frame_score(&f, "chase"));
        assert!((-1.0..=1.0).contains(&a));
    }
}
