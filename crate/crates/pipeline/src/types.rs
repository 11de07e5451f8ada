use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Pipeline stages in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Transcribe,
    Quality,
    Behavior,
    Translate,
    Filter,
}

impl Stage {
    pub const ORDER: [Stage; 5] = [
        Stage::Transcribe,
        Stage::Quality,
        Stage::Behavior,
        Stage::Translate,
        Stage::Filter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Transcribe => "transcribe",
            Stage::Quality => "quality",
            Stage::Behavior => "behavior",
            Stage::Translate => "translate",
            Stage::Filter => "filter",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ORDER
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?} (expected one of transcribe, quality, behavior, translate, filter)"))
    }
}

/// `kept` or `dropped@<stage>` on the wire.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Status {
    Kept,
    Dropped(Stage),
}

impl Status {
    pub fn is_kept(self) -> bool {
        self == Status::Kept
    }

    pub fn dropped_at(self) -> Option<Stage> {
        match self {
            Status::Kept => None,
            Status::Dropped(s) => Some(s),
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Status::Kept => f.write_str("kept"),
            Status::Dropped(s) => write!(f, "dropped@{s}"),
        }
    }
}

impl FromStr for Status {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "kept" {
            return Ok(Status::Kept);
        }
        match s.strip_prefix("dropped@") {
            Some(stage) => Ok(Status::Dropped(stage.parse()?)),
            None => Err(format!("bad status {s:?}")),
        }
    }
}

impl Serialize for Status {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Status {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A timestamped segment as returned by a transcription backend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawTranscript {
    pub video_id: String,
    pub text: String,
    pub t_init: f64,
    pub t_end: f64,
    pub language: String,
}

impl RawTranscript {
    /// Checks `0 ≤ t_init < t_end ≤ duration`.
    pub fn validate(&self, duration: f64) -> Result<(), String> {
        let ok = self.t_init.is_finite() && self.t_end.is_finite();
        if !ok || self.t_init < 0.0 || self.t_init >= self.t_end {
            return Err(format!("segment [{}, {}] is empty or malformed", self.t_init, self.t_end));
        }
        if self.t_end > duration {
            return Err(format!(
                "segment [{}, {}] ends after the video ({duration} s)",
                self.t_init, self.t_end
            ));
        }
        Ok(())
    }
}

/// A transcript plus whatever annotations the stages it reached produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineRecord {
    #[serde(flatten)]
    pub transcript: RawTranscript,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behaviors: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detectable: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translated_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment_score: Option<f64>,
    pub status: Status,
    /// Why the record was dropped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl PipelineRecord {
    pub fn new(transcript: RawTranscript) -> Self {
        Self {
            transcript,
            quality: None,
            behaviors: None,
            detectable: None,
            translated_text: None,
            alignment_score: None,
            status: Status::Kept,
            reason: None,
        }
    }

    pub fn drop_at(&mut self, stage: Stage, reason: impl Into<String>) {
        self.status = Status::Dropped(stage);
        self.reason = Some(reason.into());
    }

    /// The text later stages see: the translation when there is one.
    pub fn working_text(&self) -> &str {
        self.translated_text.as_deref().unwrap_or(&self.transcript.text)
    }

    /// Stages that left an annotation on this record.
    pub fn annotated_stages(&self) -> Vec<Stage> {
        let mut v = Vec::new();
        if self.quality.is_some() {
            v.push(Stage::Quality);
        }
        if self.behaviors.is_some() || self.detectable.is_some() {
            v.push(Stage::Behavior);
        }
        if self.translated_text.is_some() {
            v.push(Stage::Translate);
        }
        if self.alignment_score.is_some() {
            v.push(Stage::Filter);
        }
        v
    }
}
