use anyhow::{anyhow, bail, Result};
use ethoclip::corpus::{write_manifest, PngSequenceSource, VideoAsset};
use ethoclip_pipeline::fakes::ScriptedTranscriber;
use ethoclip_pipeline::prompts::PromptSet;
use ethoclip_pipeline::remote::RemoteSettings;
use ethoclip_pipeline::{run_pipeline, BackendSuite, PipelineConfig};
use serde_json::Value;

use crate::{read_json, Backends, PipelineArgs};

pub fn run(a: PipelineArgs) -> Result<Value> {
    let assets: Vec<VideoAsset> = read_json(&a.assets)?;
    let config: PipelineConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    };
    let ethogram = a.ethogram.load()?;
    let suite = match a.backends {
        Backends::Fake => {
            let Some(t) = &a.transcripts else {
                bail!("--backends fake needs --transcripts");
            };
            BackendSuite::fakes(ScriptedTranscriber::from_json_file(t).map_err(|e| anyhow!(e))?, &ethogram)
        }
        Backends::Remote => {
            let settings = RemoteSettings::from_env().map_err(|e| anyhow!(e))?;
            let prompts = match &a.prompts {
                Some(dir) => PromptSet::load_overrides(dir).map_err(|e| anyhow!(e))?,
                None => PromptSet::default(),
            };
            BackendSuite::remote(&settings, &prompts)?
        }
    };
    let source = PngSequenceSource::new(&a.source);
    let out = run_pipeline(&assets, &source, &suite, &ethogram, &config)?;
    write_manifest(&out.manifest, &a.out)?;
    let report: Value = serde_json::from_str(&out.report.to_json())?;
    if let Some(p) = &a.report {
        crate::write_json(p, &report)?;
    }
    Ok(report)
}
