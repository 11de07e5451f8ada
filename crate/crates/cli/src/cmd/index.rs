use std::collections::BTreeMap;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use ethoclip::corpus::{FrameSource, PngSequenceSource};
use ethoclip::model::DualEncoder;
use ethoclip_index::service::serve as serve_http;
use ethoclip_index::{build_index, BuildOptions, Engine, Index, Service};
use serde_json::{json, Value};

use super::load_records;
use crate::{IndexCommand, ServeArgs};

pub fn run(cmd: IndexCommand) -> Result<Value> {
    match cmd {
        IndexCommand::Build {
            manifest,
            source,
            checkpoint,
            out,
            split,
            allow_partial,
        } => {
            let records = load_records(&manifest, split)?;
            let model =
                DualEncoder::<f64>::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let src = PngSequenceSource::new(source);
            let built = build_index(&records, &src, &model, BuildOptions { allow_partial })?;
            for (id, why) in &built.failures {
                log::warn!("skipped {id}: {why}");
            }
            built.index.save(&out)?;
            Ok(json!({
                "out": out,
                "entries": built.index.len(),
                "skipped": built.failures.len(),
                "d": built.index.dim,
                "fingerprint": built.index.fingerprint,
            }))
        }
        IndexCommand::Inspect { index, entries } => {
            let idx = Index::load(&index)?;
            let mut behaviors: BTreeMap<&str, usize> = BTreeMap::new();
            for e in &idx.entries {
                for b in &e.meta.behaviors {
                    *behaviors.entry(b).or_default() += 1;
                }
            }
            let mut v = json!({
                "d": idx.dim,
                "count": idx.len(),
                "normalized": idx.normalized,
                "fingerprint": idx.fingerprint,
                "behaviors": behaviors,
            });
            if entries {
                v["entries"] = idx
                    .entries
                    .iter()
                    .map(|e| {
                        let mut m = serde_json::to_value(&e.meta).expect("metadata serialises");
                        m["clip_id"] = json!(e.clip_id);
                        m
                    })
                    .collect();
            }
            Ok(v)
        }
    }
}

/// Loads the index and checkpoint, refusing a mismatched pair, then serves
/// until the process is killed.
pub fn serve(a: ServeArgs) -> Result<Value> {
    let index = Index::load(&a.index)?;
    let model = DualEncoder::<f64>::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let frames: Option<Arc<dyn FrameSource>> = a
        .source
        .as_ref()
        .map(|p| Arc::new(PngSequenceSource::new(p)) as Arc<dyn FrameSource>);
    let engine = Engine::new(index, model, frames)?;
    let service = Service::new(engine, a.ethogram.load()?);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    if let Err(e) = rt.block_on(serve_http(service, a.bind)) {
        bail!("serving on {}: {e}", a.bind);
    }
    Ok(json!({"stopped": true}))
}
