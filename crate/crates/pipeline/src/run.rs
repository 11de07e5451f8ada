use std::collections::{BTreeMap, BTreeSet, HashMap};

use ethoclip::corpus::{ClipSpec, FrameSource, ManifestRecord, Split, VideoAsset};
use ethoclip::ethogram::Ethogram;
use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::{
    anonymize, default_glossary, normalize_behaviors, names_present, BackendError, BackendResult, BackendSuite,
    GlossaryEntry, ImageTextScorer, Transcriber, TranslationRequest,
};
use crate::types::{PipelineRecord, RawTranscript, Stage, Status};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("pipeline configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] ethoclip::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Pairs scoring below this are dropped; equal scores are kept.
    pub threshold: f64,
    /// Frames sampled from the segment and scored (8 or 16).
    pub frames_per_clip: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            threshold: 0.32,
            frames_per_clip: 8,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        // -1 itself is allowed as the "keep everything" setting.
        if !(self.threshold >= -1.0 && self.threshold < 1.0) {
            return Err(PipelineError::Config(format!(
                "filter threshold must lie in [-1, 1), got {}",
                self.threshold
            )));
        }
        if !ethoclip::model::SUPPORTED_FRAME_COUNTS.contains(&self.frames_per_clip) {
            return Err(PipelineError::Config(format!(
                "frames_per_clip must be 8 or 16, got {}",
                self.frames_per_clip
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub filter: FilterConfig,
    pub source_language: String,
    pub target_language: String,
    pub glossary: Vec<GlossaryEntry>,
    /// Monkey names to anonymise.
    pub names: Vec<String>,
    /// Stages that neither annotate nor drop.
    pub disabled: BTreeSet<Stage>,
    /// Worker threads, which also bounds in-flight backend calls.
    pub concurrency: usize,
    /// Videos whose kept pairs go to the test split.
    pub test_videos: BTreeSet<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            filter: FilterConfig::default(),
            source_language: "pt".into(),
            target_language: "en".into(),
            glossary: default_glossary(),
            names: Vec::new(),
            disabled: BTreeSet::new(),
            concurrency: 4,
            test_videos: BTreeSet::new(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.filter.validate()?;
        if self.concurrency == 0 {
            return Err(PipelineError::Config("concurrency must be at least 1".into()));
        }
        if self.disabled.contains(&Stage::Transcribe) {
            return Err(PipelineError::Config("the transcribe stage cannot be disabled".into()));
        }
        Ok(())
    }

    pub fn enabled(&self, stage: Stage) -> bool {
        !self.disabled.contains(&stage)
    }
}

/// Segments from the backend, validated and ordered by start time.
pub fn transcribe(video: &VideoAsset, backend: &dyn Transcriber, language: &str) -> BackendResult<Vec<RawTranscript>> {
    let mut out = backend
        .transcribe(video, language)?
        .into_iter()
        .map(|s| RawTranscript {
            video_id: video.id.clone(),
            text: s.text,
            t_init: s.start,
            t_end: s.end,
            language: language.to_string(),
        })
        .collect::<Vec<_>>();
    for t in &out {
        t.validate(video.duration)
            .map_err(|e| BackendError::Input(format!("{}: {e}", video.id)))?;
    }
    out.sort_by(|a, b| a.t_init.total_cmp(&b.t_init));
    Ok(out)
}

/// Largest per-frame score; `None` for an empty list.
pub fn max_score(scores: &[f64]) -> Option<f64> {
    scores.iter().copied().reduce(f64::max)
}

/// Max over frames of the scorer's image-text cosine.
pub fn frame_text_similarity(frames: &[RgbImage], text: &str, scorer: &dyn ImageTextScorer) -> BackendResult<f64> {
    if frames.is_empty() {
        return Err(BackendError::Input("clip has no frames".into()));
    }
    let scores = scorer.score_frames(frames, text)?;
    if scores.len() != frames.len() {
        return Err(BackendError::Protocol(format!(
            "scorer returned {} scores for {} frames",
            scores.len(),
            frames.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !(s.is_finite() && (-1.0..=1.0).contains(*s))) {
        return Err(BackendError::Protocol(format!("score {bad} outside [-1, 1]")));
    }
    Ok(max_score(&scores).expect("non-empty"))
}

/// Applies the threshold to every record that reached the filter. Records
/// dropped earlier are left alone; those dropped by a previous filter pass
/// are re-judged.
pub fn filter_pairs(records: &mut [PipelineRecord], cfg: &FilterConfig) -> Result<(), PipelineError> {
    cfg.validate()?;
    for (i, r) in records.iter_mut().enumerate() {
        if matches!(r.status, Status::Dropped(s) if s != Stage::Filter) {
            continue;
        }
        let score = r
            .alignment_score
            .ok_or_else(|| PipelineError::Config(format!("record {i} has no alignment score")))?;
        if score >= cfg.threshold {
            r.status = Status::Kept;
            r.reason = None;
        } else {
            r.drop_at(Stage::Filter, format!("alignment {score:.4} below {}", cfg.threshold));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub enabled: bool,
    pub entered: usize,
    pub dropped: usize,
    pub kept: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub videos: usize,
    pub videos_failed: usize,
    pub transcripts: usize,
    pub stages: Vec<StageReport>,
    pub kept: usize,
    /// `<stage>.<kind>` → count, e.g. `quality.protocol` or `behavior.unknown_label`.
    pub failures: BTreeMap<String, usize>,
}

impl PipelineReport {
    pub fn stage(&self, stage: Stage) -> &StageReport {
        self.stages
            .iter()
            .find(|s| s.stage == stage)
            .expect("every stage is reported")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

pub struct PipelineOutput {
    pub records: Vec<PipelineRecord>,
    pub manifest: Vec<ManifestRecord>,
    pub report: PipelineReport,
}

impl PipelineOutput {
    pub fn kept(&self) -> impl Iterator<Item = &PipelineRecord> {
        self.records.iter().filter(|r| r.status.is_kept())
    }

    /// Kept records as fresh transcripts carrying their translated text.
    pub fn kept_transcripts(&self) -> Vec<RawTranscript> {
        self.kept()
            .map(|r| RawTranscript {
                text: r.working_text().to_string(),
                ..r.transcript.clone()
            })
            .collect()
    }
}

struct Outcome {
    record: PipelineRecord,
    failures: Vec<String>,
}

struct Context<'a> {
    assets: HashMap<&'a str, &'a VideoAsset>,
    frames: &'a dyn FrameSource,
    suite: &'a BackendSuite,
    ethogram: &'a Ethogram,
    config: &'a PipelineConfig,
}

impl Context<'_> {
    fn process(&self, t: RawTranscript) -> Outcome {
        let mut rec = PipelineRecord::new(t);
        let mut failures = Vec::new();
        let cfg = self.config;

        let Some(asset) = self.assets.get(rec.transcript.video_id.as_str()).copied() else {
            rec.drop_at(Stage::Transcribe, "unknown video id");
            failures.push("transcribe.unknown_video".into());
            return Outcome { record: rec, failures };
        };
        if let Err(e) = rec.transcript.validate(asset.duration) {
            rec.drop_at(Stage::Transcribe, e);
            failures.push("transcribe.invalid_segment".into());
            return Outcome { record: rec, failures };
        }

        macro_rules! fail {
            ($stage:expr, $err:expr) => {{
                let e: BackendError = $err;
                failures.push(format!("{}.{}", $stage, e.kind()));
                rec.drop_at($stage, e.to_string());
                return Outcome { record: rec, failures };
            }};
        }

        if cfg.enabled(Stage::Quality) {
            match self.suite.quality_judge.score(&rec.transcript.text) {
                Ok(q) if q <= 1 => {
                    rec.quality = Some(q);
                    if q == 0 {
                        rec.drop_at(Stage::Quality, "judged irrelevant");
                        return Outcome { record: rec, failures };
                    }
                }
                Ok(q) => fail!(Stage::Quality, BackendError::Protocol(format!("quality score {q}"))),
                Err(e) => fail!(Stage::Quality, e),
            }
        }

        if cfg.enabled(Stage::Behavior) {
            match self.suite.behavior_classifier.classify(&rec.transcript.text, self.ethogram) {
                Ok(raw) => {
                    let (labels, unknown) = normalize_behaviors(&raw, self.ethogram);
                    for u in &unknown {
                        log::warn!("{}: discarding label {u:?} outside the ethogram", rec.transcript.video_id);
                        failures.push("behavior.unknown_label".into());
                    }
                    let detectable = !labels.is_empty();
                    rec.behaviors = Some(labels);
                    rec.detectable = Some(u8::from(detectable));
                    if !detectable {
                        rec.drop_at(Stage::Behavior, "no ethogram behavior detected");
                        return Outcome { record: rec, failures };
                    }
                }
                Err(e) => fail!(Stage::Behavior, e),
            }
        }

        if cfg.enabled(Stage::Translate) {
            let req = TranslationRequest {
                source_language: &cfg.source_language,
                target_language: &cfg.target_language,
                glossary: &cfg.glossary,
                names: &cfg.names,
            };
            match self.suite.translator.translate(&rec.transcript.text, &req) {
                Ok(out) => {
                    // Enforce anonymity whatever the backend did.
                    let mut out = out.trim().to_string();
                    if !names_present(&out, &cfg.names).is_empty() {
                        out = anonymize(&out, &cfg.names);
                    }
                    if out.is_empty() {
                        rec.drop_at(Stage::Translate, "empty translation");
                        failures.push("translate.empty".into());
                        return Outcome { record: rec, failures };
                    }
                    rec.translated_text = Some(out);
                }
                Err(e) => fail!(Stage::Translate, e),
            }
        }

        if cfg.enabled(Stage::Filter) {
            let n = cfg.filter.frames_per_clip;
            let clip = match ClipSpec::resolve(asset, rec.transcript.t_init, rec.transcript.t_end, n) {
                Ok(c) => c,
                Err(e) => fail!(Stage::Filter, BackendError::Input(format!("clip: {e}"))),
            };
            let frames: Result<Vec<RgbImage>, _> = clip
                .frame_indices
                .iter()
                .map(|&i| self.frames.frame(&clip.video_id, i))
                .collect();
            let frames = match frames {
                Ok(f) => f,
                Err(e) => fail!(Stage::Filter, BackendError::Input(format!("frames: {e}"))),
            };
            match frame_text_similarity(&frames, rec.working_text(), self.suite.image_text_scorer.as_ref()) {
                Ok(score) => {
                    rec.alignment_score = Some(score);
                    if score < cfg.filter.threshold {
                        rec.drop_at(
                            Stage::Filter,
                            format!("alignment {score:.4} below {}", cfg.filter.threshold),
                        );
                    }
                }
                Err(e) => fail!(Stage::Filter, e),
            }
        }
        Outcome { record: rec, failures }
    }
}

fn thread_pool(config: &PipelineConfig) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(config.concurrency)
        .build()
        .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))
}

/// Transcribes every video, then runs the per-transcript stages.
pub fn run_pipeline(
    videos: &[VideoAsset],
    frames: &dyn FrameSource,
    suite: &BackendSuite,
    ethogram: &Ethogram,
    config: &PipelineConfig,
) -> Result<PipelineOutput, PipelineError> {
    config.validate()?;
    let pool = thread_pool(config)?;
    let per_video: Vec<BackendResult<Vec<RawTranscript>>> = pool.install(|| {
        videos
            .par_iter()
            .map(|v| {
                let mut segs = suite
                    .transcriber
                    .transcribe(v, &config.source_language)?
                    .into_iter()
                    .map(|s| RawTranscript {
                        video_id: v.id.clone(),
                        text: s.text,
                        t_init: s.start,
                        t_end: s.end,
                        language: config.source_language.clone(),
                    })
                    .collect::<Vec<_>>();
                segs.sort_by(|a, b| a.t_init.total_cmp(&b.t_init));
                Ok(segs)
            })
            .collect()
    });
    let mut transcripts = Vec::new();
    let mut video_failures = BTreeMap::new();
    let mut failed = 0;
    for (v, r) in videos.iter().zip(per_video) {
        match r {
            Ok(t) => transcripts.extend(t),
            Err(e) => {
                log::warn!("{}: transcription failed: {e}", v.id);
                failed += 1;
                *video_failures.entry(format!("transcribe.{}", e.kind())).or_insert(0) += 1;
            }
        }
    }
    let mut out = run_on_transcripts_with_pool(transcripts, videos, frames, suite, ethogram, config, &pool)?;
    out.report.videos = videos.len();
    out.report.videos_failed = failed;
    for (k, n) in video_failures {
        *out.report.failures.entry(k).or_insert(0) += n;
    }
    Ok(out)
}

/// Runs the stages after transcription on ready-made transcripts.
pub fn run_on_transcripts(
    transcripts: Vec<RawTranscript>,
    videos: &[VideoAsset],
    frames: &dyn FrameSource,
    suite: &BackendSuite,
    ethogram: &Ethogram,
    config: &PipelineConfig,
) -> Result<PipelineOutput, PipelineError> {
    config.validate()?;
    let pool = thread_pool(config)?;
    run_on_transcripts_with_pool(transcripts, videos, frames, suite, ethogram, config, &pool)
}

fn run_on_transcripts_with_pool(
    transcripts: Vec<RawTranscript>,
    videos: &[VideoAsset],
    frames: &dyn FrameSource,
    suite: &BackendSuite,
    ethogram: &Ethogram,
    config: &PipelineConfig,
    pool: &rayon::ThreadPool,
) -> Result<PipelineOutput, PipelineError> {
    let ctx = Context {
        assets: videos.iter().map(|v| (v.id.as_str(), v)).collect(),
        frames,
        suite,
        ethogram,
        config,
    };
    let outcomes: Vec<Outcome> = pool.install(|| transcripts.into_par_iter().map(|t| ctx.process(t)).collect());

    let mut report = PipelineReport {
        videos: ctx.assets.len(),
        transcripts: outcomes.len(),
        ..Default::default()
    };
    let mut records = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        for f in o.failures {
            *report.failures.entry(f).or_insert(0) += 1;
        }
        records.push(o.record);
    }
    let mut entered = records.len();
    for stage in Stage::ORDER {
        let dropped = records.iter().filter(|r| r.status == Status::Dropped(stage)).count();
        report.stages.push(StageReport {
            stage,
            enabled: config.enabled(stage),
            entered,
            dropped,
            kept: entered - dropped,
        });
        entered -= dropped;
    }
    report.kept = entered;

    let mut manifest = Vec::with_capacity(report.kept);
    for r in records.iter().filter(|r| r.status.is_kept()) {
        let asset = ctx.assets[r.transcript.video_id.as_str()];
        let clip = ClipSpec::resolve(asset, r.transcript.t_init, r.transcript.t_end, config.filter.frames_per_clip);
        let clip = match clip {
            Ok(c) => c,
            Err(e) => {
                // Only reachable with the filter disabled.
                log::warn!("{}: kept pair has no valid clip: {e}", r.transcript.video_id);
                *report.failures.entry("manifest.clip".into()).or_insert(0) += 1;
                continue;
            }
        };
        let split = if config.test_videos.contains(&clip.video_id) {
            Split::Test
        } else {
            Split::Train
        };
        let mut m = ManifestRecord::new(
            clip,
            r.working_text(),
            r.behaviors.clone().unwrap_or_default(),
            split,
        );
        m.alignment_score = r.alignment_score;
        m.extra.insert("source_text".into(), Value::String(r.transcript.text.clone()));
        m.extra.insert("language".into(), Value::String(r.transcript.language.clone()));
        manifest.push(m);
    }
    Ok(PipelineOutput {
        records,
        manifest,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fakes::{HashScorer, ScriptedTranscriber};
    use crate::types::Segment;

    fn asset(id: &str, duration: f64) -> VideoAsset {
        VideoAsset {
            id: id.into(),
            path: format!("{id}.mp4").into(),
            fps: 8.0,
            duration,
            total_frames: (duration * 8.0) as usize,
        }
    }

    #[test]
    fn transcribe_contract() {
        let mut scripts = BTreeMap::new();
        scripts.insert(
            "v".to_string(),
            vec![
                Segment { start: 2.0, end: 3.0, text: "b".into() },
                Segment { start: 0.0, end: 1.0, text: "a".into() },
            ],
        );
        let fake = ScriptedTranscriber::new(scripts);
        let got = transcribe(&asset("v", 4.0), &fake, "pt").unwrap();
        assert_eq!(got.iter().map(|t| t.text.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert!(got.iter().all(|t| t.language == "pt"));
        assert!(transcribe(&asset("silent", 4.0), &fake, "pt").unwrap().is_empty());
        let err = transcribe(&asset("v", 2.5), &fake, "pt").unwrap_err();
        assert_eq!(err.kind(), "input");
    }

    #[test]
    fn similarity_is_max_over_frames() {
        assert_eq!(max_score(&[0.1, 0.5, 0.3]), Some(0.5));
        assert_eq!(max_score(&[-0.2]), Some(-0.2));
        assert_eq!(max_score(&[]), None);
        let f = RgbImage::new(2, 2);
        let one = frame_text_similarity(std::slice::from_ref(&f), "x", &HashScorer).unwrap();
        assert_eq!(one, HashScorer::frame_score(&f, "x"));
        assert!(frame_text_similarity(&[], "x", &HashScorer).is_err());
    }

    fn scored(scores: &[f64]) -> Vec<PipelineRecord> {
        scores
            .iter()
            .map(|&s| {
                let mut r = PipelineRecord::new(RawTranscript {
                    video_id: "v".into(),
                    text: "t".into(),
                    t_init: 0.0,
                    t_end: 1.0,
                    language: "en".into(),
                });
                r.alignment_score = Some(s);
                r
            })
            .collect()
    }

    #[test]
    fn filter_boundary_keeps_equal() {
        let mut rs = scored(&[0.31, 0.32, 0.40]);
        filter_pairs(&mut rs, &FilterConfig::default()).unwrap();
        let st: Vec<bool> = rs.iter().map(|r| r.status.is_kept()).collect();
        assert_eq!(st, [false, true, true]);
        let cfg = FilterConfig {
            threshold: -1.0,
            ..Default::default()
        };
        filter_pairs(&mut rs, &cfg).unwrap();
        assert!(rs.iter().all(|r| r.status.is_kept()));
    }

    #[test]
    fn filter_needs_scores() {
        let mut rs = scored(&[0.5]);
        rs[0].alignment_score = None;
        assert!(filter_pairs(&mut rs, &FilterConfig::default()).is_err());
        rs[0].status = Status::Dropped(Stage::Quality);
        assert!(filter_pairs(&mut rs, &FilterConfig::default()).is_ok());
    }

    #[test]
    fn config_bounds() {
        assert!(FilterConfig { threshold: 1.0, ..Default::default() }.validate().is_err());
        assert!(FilterConfig { frames_per_clip: 4, ..Default::default() }.validate().is_err());
        let mut c = PipelineConfig::default();
        c.disabled.insert(Stage::Transcribe);
        assert!(c.validate().is_err());
        let parsed: PipelineConfig = serde_json::from_str(r#"{"disabled": ["quality"], "names": ["Paçoca"]}"#).unwrap();
        assert!(!parsed.enabled(Stage::Quality) && parsed.filter.threshold == 0.32);
    }
}
