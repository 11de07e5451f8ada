use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use ethoclip::corpus::{extract_clip, montage, read_manifest, write_synthetic, PngSequenceSource, Split, SyntheticSpec};
use ethoclip::model::ModelConfig;
use serde_json::{json, Value};

use crate::{read_json, CorpusCommand};

pub fn run(cmd: CorpusCommand) -> Result<Value> {
    match cmd {
        CorpusCommand::Synth { out, spec, seed } => {
            let mut spec: SyntheticSpec = match spec {
                Some(p) => read_json(&p)?,
                None => SyntheticSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let corpus = write_synthetic(&spec, &out)?;
            Ok(json!({
                "out": out,
                "videos": corpus.assets.len(),
                "records": corpus.records.len(),
                "train": corpus.split(Split::Train).len(),
                "test": corpus.split(Split::Test).len(),
            }))
        }
        CorpusCommand::Extract {
            manifest,
            source,
            out,
            model_config,
        } => {
            let records = read_manifest(&manifest)?;
            let mut cfg: ModelConfig = match model_config {
                Some(p) => read_json(&p)?,
                None => ModelConfig::default(),
            };
            let src = PngSequenceSource::new(source);
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for r in &records {
                cfg.frames_per_clip = r.n_frames;
                let clip = extract_clip(&src, &r.clip(), &cfg).with_context(|| format!("clip {}", r.clip_id()))?;
                montage(&clip).save(out.join(format!("{}.png", r.clip_id())))?;
            }
            Ok(json!({"out": out, "clips": records.len()}))
        }
        CorpusCommand::Validate {
            manifest,
            source,
            ethogram,
        } => {
            // read_manifest validates every record and the split hygiene.
            let records = read_manifest(&manifest)?;
            let ethogram = ethogram.load()?;
            let mut problems = Vec::new();
            let mut behaviors: BTreeMap<&str, usize> = BTreeMap::new();
            for r in &records {
                for b in &r.behaviors {
                    *behaviors.entry(b).or_default() += 1;
                    if !ethogram.contains(b) {
                        problems.push(format!("{}: behaviour {b:?} is not in the ethogram", r.clip_id()));
                    }
                }
            }
            if let Some(root) = source {
                let src = PngSequenceSource::new(root);
                let cfg = ModelConfig::default();
                for r in &records {
                    let cfg = ModelConfig {
                        frames_per_clip: r.n_frames,
                        ..cfg.clone()
                    };
                    if let Err(e) = extract_clip(&src, &r.clip(), &cfg) {
                        problems.push(format!("{}: {e}", r.clip_id()));
                    }
                }
            }
            if !problems.is_empty() {
                for p in &problems {
                    log::error!("{p}");
                }
                bail!("{} problem(s) in {}", problems.len(), manifest.display());
            }
            let count = |s: Split| records.iter().filter(|r| r.split == s).count();
            Ok(json!({
                "records": records.len(),
                "train": count(Split::Train),
                "test": count(Split::Test),
                "behaviors": behaviors,
            }))
        }
    }
}
