//! Turns raw field narration into clean, anonymised, behaviour-tagged
//! video-text pairs.
//!
//! Stages run in a fixed order: transcribe, quality, behavior, translate,
//! filter. Each transcript is processed independently and a record dropped
//! at one stage carries no annotations from later ones.

pub mod backend;
pub mod fakes;
pub mod prompts;
pub mod remote;
pub mod run;
pub mod types;

pub use backend::{BackendError, BackendSuite, GlossaryEntry};
pub use run::{
    filter_pairs, frame_text_similarity, run_on_transcripts, run_pipeline, FilterConfig, PipelineConfig,
    PipelineError, PipelineOutput, PipelineReport,
};
pub use types::{PipelineRecord, RawTranscript, Segment, Stage, Status};
