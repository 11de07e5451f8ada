use anyhow::{bail, Context, Result};
use ethoclip::checkpoint::CheckpointKind;
use ethoclip::corpus::{ManifestRecord, PngSequenceSource};
use ethoclip::evaluation::EvalSet;
use ethoclip::lora::LoraConfig;
use ethoclip::model::{DualEncoder, ModelConfig};
use ethoclip::trainer::{prepare_full, prepare_lora, run_sweep, PairSet, SweepGrid, TrainConfig, Trainer};
use serde_json::{json, Value};

use super::load_records;
use crate::{read_json, write_json, SplitArg, SweepArgs, TrainArgs};

/// Full checkpoint written next to the bundle when a run finishes.
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const HISTORY_FILE: &str = "history.json";

pub fn train(a: TrainArgs) -> Result<Value> {
    let records = load_records(&a.manifest, SplitArg::Train)?;
    let cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    let mut model = if a.full {
        let mc: ModelConfig = match &a.model_config {
            Some(p) => read_json(p)?,
            None => ModelConfig::default(),
        };
        DualEncoder::<f32>::new(ModelConfig {
            frames_per_clip: a.frames,
            ..mc
        })?
    } else {
        let base = a.base.as_ref().expect("clap requires --base without --full");
        let m = DualEncoder::<f32>::load(base).with_context(|| format!("loading {}", base.display()))?;
        if m.has_adapters() {
            bail!("{} already carries adapters; merge it or start from its base", base.display());
        }
        m
    };
    if model.config().frames_per_clip != a.frames {
        bail!(
            "--frames {} but the base checkpoint takes {}-frame clips",
            a.frames,
            model.config().frames_per_clip
        );
    }
    if let Some(r) = records.iter().find(|r| r.n_frames != a.frames) {
        bail!("clip {} has {} frames, expected {}", r.clip_id(), r.n_frames, a.frames);
    }
    let src = PngSequenceSource::new(&a.source);
    let refs: Vec<&ManifestRecord> = records.iter().collect();
    let data = PairSet::from_records(&refs, &src, model.config())?;

    let mut trainer = if a.resume {
        Trainer::resume(&a.out, &mut model).with_context(|| format!("resuming from {}", a.out.display()))?
    } else {
        if let Some(t) = a.temperature {
            model.set_temperature(t)?;
        }
        if a.full {
            prepare_full(&mut model, cfg.temperature.learnable);
        } else {
            let lora = LoraConfig {
                rank: a.rank.expect("clap requires --rank"),
                placement: a.placement.expect("clap requires --placement"),
                dropout: cfg.lora_dropout,
                seed: cfg.seed,
                ..LoraConfig::default()
            };
            prepare_lora(&mut model, &lora)?;
        }
        Trainer::new(&mut model, data.len(), &cfg)?
    };
    let total = trainer.total_updates();
    log::info!("{} pairs, {} updates", data.len(), total);
    let stop = a.max_updates.unwrap_or(usize::MAX);
    while !trainer.is_done() && trainer.step_count() < stop {
        let rec = trainer.step(&mut model, &data)?;
        if rec.step % 10 == 0 || rec.step == total {
            log::info!("step {}/{total} loss {:.4} lr {:.2e}", rec.step, rec.loss, rec.lr);
        }
        if a.save_every.is_some_and(|n| n > 0 && rec.step % n == 0) {
            trainer.save(&a.out, &model)?;
        }
    }
    trainer.save(&a.out, &model)?;
    write_json(&a.out.join(HISTORY_FILE), &trainer.history())?;
    let final_path = a.out.join(FINAL_CHECKPOINT);
    let done = trainer.is_done();
    if done {
        model.save(&final_path, CheckpointKind::Full)?;
    }
    Ok(json!({
        "done": done,
        "checkpoint": done.then_some(final_path),
        "pairs": data.len(),
        "updates": trainer.step_count(),
        "trainable_params": model.trainable_view().total,
        "final_loss": trainer.history().last().map(|h| h.loss),
        "temperature": model.temperature(),
    }))
}

pub fn sweep(a: SweepArgs) -> Result<Value> {
    let grid: SweepGrid = read_json(&a.grid)?;
    let base = DualEncoder::<f32>::load(&a.base).with_context(|| format!("loading {}", a.base.display()))?;
    let ethogram = a.ethogram.load()?;
    let src = PngSequenceSource::new(&a.source);
    let train = load_records(&a.manifest, SplitArg::Train)?;
    let test = load_records(&a.manifest, SplitArg::Test)?;
    let data = PairSet::from_records(&train.iter().collect::<Vec<_>>(), &src, base.config())?;
    let eval = EvalSet::from_records(&test.iter().collect::<Vec<_>>(), &src, base.config(), &ethogram)?;
    let report = run_sweep(&grid, &base, &data, &eval)?;
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    Ok(serde_json::to_value(report)?)
}
