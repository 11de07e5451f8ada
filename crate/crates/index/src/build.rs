use std::collections::HashSet;

use ethoclip::checkpoint::{fingerprint, CheckpointKind};
use ethoclip::corpus::{extract_clip, FrameSource, ManifestRecord};
use ethoclip::model::{ByteTokenizer, DualEncoder};
use ethoclip::Scalar;

use crate::format::{EntryMeta, Index, IndexEntry};
use crate::IndexError;

/// Fingerprint of the model's full parameter set, adapters included.
pub fn model_fingerprint<T: Scalar>(model: &DualEncoder<T>) -> Result<String, IndexError> {
    Ok(fingerprint(&model.to_checkpoint(CheckpointKind::Full)?.to_bytes()?))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BuildOptions {
    /// Write an index even when some records fail.
    pub allow_partial: bool,
}

#[derive(Debug)]
pub struct BuildOutcome {
    pub index: Index,
    /// `(clip id, reason)` for every record left out.
    pub failures: Vec<(String, String)>,
}

/// Encodes every manifest record's clip with `model`.
pub fn build_index<T: Scalar>(
    records: &[ManifestRecord],
    source: &dyn FrameSource,
    model: &DualEncoder<T>,
    options: BuildOptions,
) -> Result<BuildOutcome, IndexError> {
    let cfg = model.config();
    let mut seen = HashSet::new();
    let mut failures = Vec::new();
    let mut clips = Vec::new();
    let mut kept = Vec::new();
    for r in records {
        let id = r.clip_id();
        if !seen.insert(id.clone()) {
            return Err(IndexError::Build(format!("clip id {id} appears twice in the manifest")));
        }
        let clip = r.validate().and_then(|_| {
            if r.n_frames != cfg.frames_per_clip {
                return Err(ethoclip::Error::Input(format!(
                    "clip has {} frames, model expects {}",
                    r.n_frames, cfg.frames_per_clip
                )));
            }
            extract_clip(source, &r.clip(), cfg)
        });
        match clip {
            Ok(c) => {
                clips.push(c);
                kept.push(r);
            }
            Err(e) => failures.push((id, e.to_string())),
        }
    }
    if !failures.is_empty() && !options.allow_partial {
        let listed: Vec<String> = failures.iter().take(5).map(|(id, e)| format!("{id}: {e}")).collect();
        return Err(IndexError::Build(format!(
            "{} of {} records failed (pass allow_partial to skip them): {}",
            failures.len(),
            records.len(),
            listed.join("; ")
        )));
    }
    let enc = model.encode_videos(&clips)?;
    let entries = kept
        .iter()
        .zip(enc.embeddings.to_rows())
        .map(|(r, row)| IndexEntry {
            clip_id: r.clip_id(),
            embedding: row.iter().map(|v| v.to_f64_lossy() as f32).collect(),
            meta: EntryMeta {
                video_id: r.video_id.clone(),
                t_init: r.t_init,
                t_end: r.t_end,
                n_frames: r.n_frames,
                frame_indices: r.frame_indices.clone(),
                behaviors: r.behaviors.clone(),
                text: r.text.clone(),
            },
        })
        .collect();
    let index = Index::new(cfg.embed_dim, model_fingerprint(model)?, entries)?;
    Ok(BuildOutcome { index, failures })
}

/// Refuses a model whose dimension or fingerprint differs from the index.
pub fn check_compatible<T: Scalar>(index: &Index, model: &DualEncoder<T>) -> Result<(), IndexError> {
    let d = model.config().embed_dim;
    if d != index.dim {
        return Err(IndexError::Mismatch(format!(
            "index dimension {} but checkpoint embeds into {d}",
            index.dim
        )));
    }
    let fp = model_fingerprint(model)?;
    if fp != index.fingerprint {
        return Err(IndexError::Mismatch(format!(
            "index was built with checkpoint {} but the loaded checkpoint is {fp}",
            index.fingerprint
        )));
    }
    Ok(())
}

/// Unit-norm bypass embedding of one query text, widened to f64.
pub fn encode_query<T: Scalar>(model: &DualEncoder<T>, text: &str) -> Result<Vec<f64>, IndexError> {
    let tok = ByteTokenizer::new(model.config().max_text_len).encode(text)?;
    let m = model.encode_texts_bypass(&[tok])?;
    Ok(m.row(0).iter().map(|v| v.to_f64_lossy()).collect())
}
