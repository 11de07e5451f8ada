use anyhow::{Context, Result};
use ethoclip::corpus::PngSequenceSource;
use ethoclip::evaluation::{evaluate_retrieval, evaluate_zero_shot, EvalSet};
use ethoclip::model::DualEncoder;
use serde_json::Value;

use super::load_records;
use crate::{write_json, EvalCommand};

pub fn run(cmd: EvalCommand) -> Result<Value> {
    let (a, zero_shot) = match cmd {
        EvalCommand::Retrieval(a) => (a, false),
        EvalCommand::Zeroshot(a) => (a, true),
    };
    let model = DualEncoder::<f64>::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let ethogram = a.ethogram.load()?;
    let records = load_records(&a.manifest, a.split)?;
    let src = PngSequenceSource::new(&a.source);
    let set = EvalSet::from_records(&records.iter().collect::<Vec<_>>(), &src, model.config(), &ethogram)?;
    let videos = model.encode_videos(&set.clips)?;
    let report = if zero_shot {
        serde_json::to_value(evaluate_zero_shot(&model, &set, &videos)?)?
    } else {
        serde_json::to_value(evaluate_retrieval(&model, &set, &videos)?)?
    };
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    Ok(report)
}
