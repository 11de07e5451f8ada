//! Resumable training state on disk:
//!
//! ```text
//! <dir>/model.ckpt      adapter-only checkpoint, or full when training without adapters
//! <dir>/optimizer.ckpt  AdamW first/second moments
//! <dir>/bundle.json     config, schedule position, data order, RNG state, history
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Schedule, StepRecord, TrainConfig, Trainer};
use crate::checkpoint::{read_file, write_atomic, Checkpoint, CheckpointKind};
use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::model::{DualEncoder, ParamId};
use crate::scalar::Scalar;

pub const MODEL_FILE: &str = "model.ckpt";
pub const OPTIMIZER_FILE: &str = "optimizer.ckpt";
pub const BUNDLE_FILE: &str = "bundle.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since JSON numbers cannot hold a u128.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |m: &str| Error::Format(format!("rng state: {m}"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad("seed is not hex"))?
            .try_into()
            .map_err(|_| bad("seed is not 32 bytes"))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("bad word position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleState {
    pub train_config: TrainConfig,
    pub lora: Option<LoraConfig>,
    /// Scalar width in bytes the run used; resume must match it.
    pub precision_bytes: usize,
    pub schedule: Schedule,
    pub n_pairs: usize,
    pub step: usize,
    pub epoch: usize,
    pub cursor: usize,
    pub order: Vec<usize>,
    pub rng: RngState,
    /// Names of the trained parameters, in optimizer order.
    pub trainable: Vec<String>,
    pub history: Vec<StepRecord>,
}

impl<T: Scalar> Trainer<T> {
    pub fn save(&self, dir: &Path, model: &DualEncoder<T>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let kind = if model.has_adapters() {
            CheckpointKind::Adapter
        } else {
            CheckpointKind::Full
        };
        model.save(&dir.join(MODEL_FILE), kind)?;
        let names: Vec<String> = self.ids.iter().map(|&id| model.params().entry(id).name.clone()).collect();
        let mut arrays = Vec::with_capacity(2 * names.len());
        for (i, name) in names.iter().enumerate() {
            arrays.push((format!("{name}.m"), self.m[i].cast()));
            arrays.push((format!("{name}.v"), self.v[i].cast()));
        }
        Checkpoint {
            kind: CheckpointKind::Optimizer,
            model: model.config().clone(),
            lora: model.lora_config().cloned(),
            arrays,
        }
        .save(&dir.join(OPTIMIZER_FILE))?;
        let state = BundleState {
            train_config: self.cfg.clone(),
            lora: model.lora_config().cloned(),
            precision_bytes: T::BYTES,
            schedule: self.schedule,
            n_pairs: self.n_pairs,
            step: self.step,
            epoch: self.epoch,
            cursor: self.cursor,
            order: self.order.clone(),
            rng: RngState::capture(&self.rng),
            trainable: names,
            history: self.history.clone(),
        };
        write_atomic(&dir.join(BUNDLE_FILE), &serde_json::to_vec_pretty(&state)?)
    }

    /// Restores training state saved by [`Trainer::save`]. `model` must be the
    /// base the run started from: without adapters for adapter bundles, any
    /// model of the same configuration for full bundles (it is overwritten).
    pub fn resume(dir: &Path, model: &mut DualEncoder<T>) -> Result<Self> {
        let state: BundleState = serde_json::from_slice(&read_file(&dir.join(BUNDLE_FILE))?)?;
        if state.precision_bytes != T::BYTES {
            return Err(Error::Config(format!(
                "bundle was written at {}-byte precision, resuming at {}",
                state.precision_bytes,
                T::BYTES
            )));
        }
        let ckpt = Checkpoint::load(&dir.join(MODEL_FILE))?;
        match ckpt.kind {
            CheckpointKind::Adapter => model.load_adapters(&ckpt)?,
            CheckpointKind::Full => *model = DualEncoder::from_checkpoint(&ckpt)?,
            CheckpointKind::Optimizer => return Err(Error::Format("model file holds optimizer state".into())),
        }
        let all: Vec<ParamId> = model.params().ids().collect();
        for id in all {
            model.params_mut().set_trainable(id, false);
        }
        let mut ids = Vec::with_capacity(state.trainable.len());
        for name in &state.trainable {
            let id = model
                .params()
                .id(name)
                .ok_or_else(|| Error::Format(format!("bundle names unknown parameter {name}")))?;
            model.params_mut().set_trainable(id, true);
            ids.push(id);
        }
        if model.has_adapters() {
            model.set_lora_dropout(state.train_config.lora_dropout)?;
        }

        let opt = Checkpoint::load(&dir.join(OPTIMIZER_FILE))?;
        if opt.kind != CheckpointKind::Optimizer || opt.arrays.len() != 2 * ids.len() {
            return Err(Error::Format("optimizer state does not match the bundle".into()));
        }
        let mut m = Vec::with_capacity(ids.len());
        let mut v = Vec::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            let shape = model.params().value(id).shape();
            let (mn, mm) = &opt.arrays[2 * i];
            let (vn, vm) = &opt.arrays[2 * i + 1];
            let name = &state.trainable[i];
            if *mn != format!("{name}.m") || *vn != format!("{name}.v") || mm.shape() != shape || vm.shape() != shape {
                return Err(Error::Format(format!("optimizer state for {name} is missing or misshapen")));
            }
            m.push(mm.cast::<T>());
            v.push(vm.cast::<T>());
        }
        Ok(Self {
            cfg: state.train_config,
            schedule: state.schedule,
            n_pairs: state.n_pairs,
            ids,
            m,
            v,
            step: state.step,
            epoch: state.epoch,
            cursor: state.cursor,
            order: state.order,
            rng: state.rng.restore()?,
            history: state.history,
        })
    }
}
