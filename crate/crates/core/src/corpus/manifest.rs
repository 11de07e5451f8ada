use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::ClipSpec;
use crate::checkpoint::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::model::SUPPORTED_FRAME_COUNTS;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One line of a pair manifest. Fields not listed here survive a read/write
/// round trip through `extra`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub video_id: String,
    pub t_init: f64,
    pub t_end: f64,
    pub n_frames: usize,
    pub frame_indices: Vec<usize>,
    pub text: String,
    #[serde(default)]
    pub behaviors: Vec<String>,
    pub split: Split,
    #[serde(default)]
    pub alignment_score: Option<f64>,
    pub schema_version: u32,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl ManifestRecord {
    pub fn new(clip: ClipSpec, text: impl Into<String>, behaviors: Vec<String>, split: Split) -> Self {
        Self {
            video_id: clip.video_id,
            t_init: clip.t_init,
            t_end: clip.t_end,
            n_frames: clip.n_frames,
            frame_indices: clip.frame_indices,
            text: text.into(),
            behaviors,
            split,
            alignment_score: None,
            schema_version: SCHEMA_VERSION,
            extra: Map::new(),
        }
    }

    pub fn clip(&self) -> ClipSpec {
        ClipSpec {
            video_id: self.video_id.clone(),
            t_init: self.t_init,
            t_end: self.t_end,
            n_frames: self.n_frames,
            frame_indices: self.frame_indices.clone(),
        }
    }

    pub fn clip_id(&self) -> String {
        self.clip().clip_id()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Input(format!(
                "schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.video_id.is_empty() {
            return Err(Error::Input("empty video_id".into()));
        }
        if !SUPPORTED_FRAME_COUNTS.contains(&self.n_frames) {
            return Err(Error::Input(format!("n_frames must be 8 or 16, got {}", self.n_frames)));
        }
        if !(self.t_init.is_finite() && self.t_end.is_finite() && self.t_init <= self.t_end) {
            return Err(Error::Input(format!("bad segment [{}, {}]", self.t_init, self.t_end)));
        }
        if let Some(s) = self.alignment_score {
            if !s.is_finite() {
                return Err(Error::Input("alignment_score is not finite".into()));
            }
        }
        self.clip().validate()
    }
}

/// Fails when a video id appears in both splits, naming the offending ids.
pub fn check_split_hygiene(records: &[ManifestRecord]) -> Result<()> {
    let mut by_split: BTreeMap<Split, BTreeSet<&str>> = BTreeMap::new();
    for r in records {
        by_split.entry(r.split).or_default().insert(&r.video_id);
    }
    let empty = BTreeSet::new();
    let train = by_split.get(&Split::Train).unwrap_or(&empty);
    let test = by_split.get(&Split::Test).unwrap_or(&empty);
    let shared: Vec<&str> = train.intersection(test).copied().collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::Input(format!(
            "video ids in both train and test splits: {}",
            shared.join(", ")
        )))
    }
}

/// Parses JSONL text. `path` is used only for error messages.
pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
        rec.validate().map_err(|e| at(e.to_string()))?;
        out.push(rec);
    }
    check_split_hygiene(&out)?;
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        line: 0,
        message: format!("not UTF-8: {e}"),
    })?;
    parse_manifest(&text, path)
}

pub fn render_manifest(records: &[ManifestRecord]) -> Result<String> {
    for (i, r) in records.iter().enumerate() {
        r.validate()
            .map_err(|e| Error::Input(format!("record {i} ({}): {e}", r.video_id)))?;
    }
    check_split_hygiene(records)?;
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<()> {
    write_atomic(path, render_manifest(records)?.as_bytes())
}
