//! LoRA fine-tuning and full training with AdamW, gradient accumulation,
//! global-norm clipping and a warmup + cosine learning-rate schedule.

mod bundle;
mod sweep;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{extract_clip, FrameSource, ManifestRecord};
use crate::error::{Error, Result};
use crate::lora::{resolve_placement, LoraConfig, TrainableView};
use crate::losses::{dual_loss, dual_loss_node, ContrastiveConfig, DualLoss, LossMode};
use crate::matrix::Matrix;
use crate::model::{ByteTokenizer, ClipTensor, DualEncoder, ModelConfig, ParamId, ParamKind, Pass, TokenSequence};
use crate::scalar::Scalar;

pub use bundle::{BundleState, RngState, BUNDLE_FILE, MODEL_FILE, OPTIMIZER_FILE};
pub use sweep::{run_sweep, CellOverride, CellReport, SweepGrid, SweepReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub grad_accumulation_steps: usize,
    /// Decoupled; applied to every trainable parameter except the temperature.
    pub weight_decay: f64,
    pub lora_dropout: f64,
    pub clip_grad_max_norm: f64,
    pub peak_lr: f64,
    pub warmup_epochs: f64,
    pub epochs: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Bounds the learned temperature is clamped to after every update.
    pub temperature: ContrastiveConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            grad_accumulation_steps: 10,
            weight_decay: 0.8,
            lora_dropout: 0.5,
            clip_grad_max_norm: 1.0,
            peak_lr: 1e-3,
            warmup_epochs: 1.0,
            epochs: 30,
            seed: 0,
            loss_mode: LossMode::Dual,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            temperature: ContrastiveConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.grad_accumulation_steps == 0 {
            return bad("grad_accumulation_steps must be positive".into());
        }
        if !(self.weight_decay >= 0.0 && self.peak_lr >= 0.0 && self.clip_grad_max_norm > 0.0) {
            return bad("weight_decay and peak_lr must be non-negative, clip norm positive".into());
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return bad(format!("lora_dropout must be in [0, 1), got {}", self.lora_dropout));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return bad("AdamW betas must be in [0, 1) and eps positive".into());
        }
        if !(self.warmup_epochs >= 0.0) {
            return bad("warmup_epochs must be non-negative".into());
        }
        self.temperature.validate()
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accumulation_steps
    }

    /// Optimizer updates in one pass over `n_pairs`.
    pub fn updates_per_epoch(&self, n_pairs: usize) -> usize {
        n_pairs.div_ceil(self.effective_batch())
    }
}

/// Linear warmup from 0 to `peak`, then half-cosine down to 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    /// Update `u` (0-based) runs at `lr_at(u + 1)`, so the first update is not
    /// wasted at zero and the last is not either.
    pub fn for_run(cfg: &TrainConfig, n_pairs: usize) -> Self {
        let per_epoch = cfg.updates_per_epoch(n_pairs);
        Self {
            peak: cfg.peak_lr,
            warmup_steps: (cfg.warmup_epochs * per_epoch as f64).ceil() as usize,
            total_steps: cfg.epochs * per_epoch + 1,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps || self.total_steps <= self.warmup_steps {
            return if self.total_steps <= self.warmup_steps { self.peak } else { 0.0 };
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        self.peak * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
    }

    pub fn updates(&self) -> usize {
        self.total_steps.saturating_sub(1)
    }
}

/// Clips and tokenised captions, index-aligned.
#[derive(Clone, Debug, Default)]
pub struct PairSet {
    pub clips: Vec<ClipTensor>,
    pub texts: Vec<TokenSequence>,
}

impl PairSet {
    pub fn new(clips: Vec<ClipTensor>, texts: Vec<TokenSequence>) -> Result<Self> {
        if clips.len() != texts.len() {
            return Err(Error::shape(format!("{} texts", clips.len()), texts.len()));
        }
        Ok(Self { clips, texts })
    }

    pub fn from_records(records: &[&ManifestRecord], source: &dyn FrameSource, config: &ModelConfig) -> Result<Self> {
        let tok = ByteTokenizer::new(config.max_text_len);
        let clips = records
            .par_iter()
            .map(|r| extract_clip(source, &r.clip(), config))
            .collect::<Result<Vec<_>>>()?;
        let texts = records
            .iter()
            .map(|r| tok.encode(&r.text))
            .collect::<Result<Vec<_>>>()?;
        Self::new(clips, texts)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            clips: idx.iter().map(|&i| self.clips[i].clone()).collect(),
            texts: idx.iter().map(|&i| self.texts[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_bypass: f64,
    pub loss_prompted: f64,
    pub grad_norm: f64,
    pub clipped_grad_norm: f64,
    pub temperature: f64,
}

/// Loss and gradient of one micro-batch.
pub struct MicroResult<T> {
    pub loss: f64,
    pub bypass: f64,
    pub prompted: f64,
    pub grads: Vec<Option<Matrix<T>>>,
}

/// Forward and backward of the training objective on one batch. Gradients
/// are index-aligned with `ids`; `None` means the parameter was unreachable.
pub fn batch_gradients<T: Scalar>(
    model: &DualEncoder<T>,
    data: &PairSet,
    idx: &[usize],
    ids: &[ParamId],
    mode: LossMode,
    dropout: Option<ChaCha8Rng>,
) -> Result<MicroResult<T>> {
    let store = model.params();
    let mut pass = match dropout {
        Some(rng) => Pass::training(store, rng),
        None => Pass::new(store),
    };
    let clips: Vec<&ClipTensor> = idx.iter().map(|&i| &data.clips[i]).collect();
    let texts: Vec<&TokenSequence> = idx.iter().map(|&i| &data.texts[i]).collect();
    let b = model.batch_nodes(&mut pass, &clips, &texts)?;
    let log_tau = pass.param(model.log_tau_id());
    let l = dual_loss_node(&mut pass.graph, b.video, b.prompted, b.bypass, log_tau, mode)?;
    let g = &pass.graph;
    let (loss, bypass, prompted) = (
        g.scalar(l.total).to_f64_lossy(),
        g.scalar(l.bypass.cl).to_f64_lossy(),
        g.scalar(l.prompted.cl).to_f64_lossy(),
    );
    let bound: HashMap<ParamId, _> = pass.binder.bound().collect();
    let mut grads = g.backward(l.total);
    let grads = ids
        .iter()
        .map(|id| bound.get(id).and_then(|&n| grads.take(n)))
        .collect();
    Ok(MicroResult {
        loss,
        bypass,
        prompted,
        grads,
    })
}

/// Dual loss of the whole set as one batch, without dropout.
pub fn evaluate_loss<T: Scalar>(model: &DualEncoder<T>, data: &PairSet) -> Result<DualLoss> {
    let batch = model.encode_pair_batch(&data.clips, &data.texts)?;
    dual_loss(&batch, model.temperature())
}

/// Attaches adapters for `lora` and configures the model for adapter-only training.
pub fn prepare_lora<T: Scalar>(model: &mut DualEncoder<T>, lora: &LoraConfig) -> Result<TrainableView> {
    let cfg = model.config();
    let plan = resolve_placement(lora.placement, cfg.vision_layers, cfg.text_layers, &lora.target_kinds)?;
    model.attach_lora(&plan, lora)
}

/// Makes every parameter trainable, temperature optionally excluded.
pub fn prepare_full<T: Scalar>(model: &mut DualEncoder<T>, learn_temperature: bool) {
    model.set_all_trainable();
    let tau = model.log_tau_id();
    model.params_mut().set_trainable(tau, learn_temperature);
}

pub struct Trainer<T> {
    cfg: TrainConfig,
    schedule: Schedule,
    n_pairs: usize,
    ids: Vec<ParamId>,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    step: usize,
    epoch: usize,
    cursor: usize,
    order: Vec<usize>,
    rng: ChaCha8Rng,
    history: Vec<StepRecord>,
}

impl<T: Scalar> Trainer<T> {
    /// Trains whatever is currently flagged trainable in `model`.
    pub fn new(model: &mut DualEncoder<T>, n_pairs: usize, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if n_pairs < 2 {
            return Err(Error::Input(format!("need at least 2 training pairs, got {n_pairs}")));
        }
        if model.has_adapters() {
            model.set_lora_dropout(cfg.lora_dropout)?;
        }
        let ids = model.params().trainable_ids();
        if ids.is_empty() {
            return Err(Error::Config("no trainable parameters".into()));
        }
        let zeros = |id: &ParamId| {
            let (r, c) = model.params().value(*id).shape();
            Matrix::zeros(r, c)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            cfg: cfg.clone(),
            schedule: Schedule::for_run(cfg, n_pairs),
            n_pairs,
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
            step: 0,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
            rng,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn total_updates(&self) -> usize {
        self.schedule.updates()
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_updates()
    }

    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }

    pub fn trainable_ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// Micro-batches for the next update, each with its dropout seed.
    fn next_micro_batches(&mut self) -> Vec<(Vec<usize>, u64)> {
        if self.order.is_empty() || self.cursor >= self.n_pairs {
            if !self.order.is_empty() {
                self.epoch += 1;
            }
            self.order = (0..self.n_pairs).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let mut out = Vec::new();
        for _ in 0..self.cfg.grad_accumulation_steps {
            if self.cursor >= self.n_pairs {
                break;
            }
            let end = (self.cursor + self.cfg.batch_size).min(self.n_pairs);
            out.push((self.order[self.cursor..end].to_vec(), self.rng.next_u64()));
            self.cursor = end;
        }
        out
    }

    /// One optimizer update. Gradients of the micro-batches are averaged.
    pub fn step(&mut self, model: &mut DualEncoder<T>, data: &PairSet) -> Result<StepRecord> {
        if data.len() != self.n_pairs {
            return Err(Error::Input(format!(
                "trainer was set up for {} pairs, got {}",
                self.n_pairs,
                data.len()
            )));
        }
        let micro = self.next_micro_batches();
        let dropout = self.cfg.lora_dropout > 0.0 && model.has_adapters();
        let batches: Vec<(Vec<usize>, Option<u64>)> =
            micro.into_iter().map(|(idx, seed)| (idx, dropout.then_some(seed))).collect();
        let acc = match accumulate_gradients(model, data, &batches, &self.ids, self.cfg.loss_mode) {
            Ok(a) => a,
            Err((j, e)) => {
                let idx = batches.get(j).map(|b| b.0.as_slice()).unwrap_or(&[]);
                return Err(self.diagnostic(model, j, idx, &e));
            }
        };
        let Accumulated {
            mut grads,
            loss,
            bypass,
            prompted,
        } = acc;
        if let Some(i) = grads.iter().position(|a| !a.all_finite()) {
            let name = model.params().entry(self.ids[i]).name.clone();
            return Err(self.diagnostic(model, 0, &[], &format!("non-finite gradient for {name}")));
        }
        let acc = &mut grads;

        let grad_norm = global_norm(acc);
        let max = self.cfg.clip_grad_max_norm;
        if grad_norm > max {
            let s = T::lit(max / (grad_norm + 1e-6));
            for a in acc.iter_mut() {
                *a = a.scale(s);
            }
        }
        let clipped_grad_norm = global_norm(acc);

        let lr = self.schedule.lr_at(self.step + 1);
        self.adamw(model, acc, lr);
        let record = StepRecord {
            step: self.step,
            epoch: self.epoch,
            lr,
            loss,
            loss_bypass: bypass,
            loss_prompted: prompted,
            grad_norm,
            clipped_grad_norm,
            temperature: model.temperature().to_f64_lossy(),
        };
        self.step += 1;
        self.history.push(record.clone());
        log::debug!(
            "step {} epoch {} lr {:.3e} loss {:.5} |g| {:.4}",
            record.step,
            record.epoch,
            record.lr,
            record.loss,
            record.grad_norm
        );
        Ok(record)
    }

    fn adamw(&mut self, model: &mut DualEncoder<T>, grads: &[Matrix<T>], lr: f64) {
        let t = (self.step + 1) as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = T::lit(1.0 / (1.0 - b1.powi(t)));
        let c2 = T::lit(1.0 / (1.0 - b2.powi(t)));
        let (b1, b2, eps) = (T::lit(b1), T::lit(b2), T::lit(self.cfg.eps));
        let lr_t = T::lit(lr);
        let tau_id = model.log_tau_id();
        for (i, &id) in self.ids.iter().enumerate() {
            let decay = model.params().entry(id).kind != ParamKind::LogTemperature;
            let shrink = T::one() - lr_t * T::lit(self.cfg.weight_decay);
            let p = model.params_mut().value_mut(id).as_mut_slice();
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(grads[i].as_slice()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                if decay {
                    *p *= shrink;
                }
                let mh = *m * c1;
                let vh = *v * c2;
                *p -= lr_t * mh / (vh.sqrt() + eps);
            }
            if id == tau_id {
                let v = model.params_mut().value_mut(id).as_mut_slice();
                v[0] = self.cfg.temperature.clamp_log_tau(v[0]);
            }
        }
    }

    fn diagnostic(&self, model: &DualEncoder<T>, micro: usize, idx: &[usize], msg: &str) -> Error {
        Error::Numeric {
            what: format!(
                "training aborted at step {} (epoch {}, micro-batch {micro}, pairs {idx:?}, temperature {}, last loss {:?}): {msg}",
                self.step,
                self.epoch,
                model.temperature().to_f64_lossy(),
                self.history.last().map(|h| h.loss),
            ),
            index: Some(self.step),
        }
    }

    /// Runs updates until `max_steps` in total have been taken, or the schedule ends.
    pub fn run(&mut self, model: &mut DualEncoder<T>, data: &PairSet, max_steps: Option<usize>) -> Result<()> {
        let end = max_steps.unwrap_or(usize::MAX).min(self.total_updates());
        while self.step < end {
            self.step(model, data)?;
        }
        Ok(())
    }
}

/// Mean gradient and mean losses over micro-batches.
pub struct Accumulated<T> {
    pub grads: Vec<Matrix<T>>,
    pub loss: f64,
    pub bypass: f64,
    pub prompted: f64,
}

/// Runs every micro-batch (in parallel, summed in order) and averages the
/// gradients, as one optimizer update sees them. Each batch may carry a
/// dropout seed. On failure returns the offending micro-batch and a message.
pub fn accumulate_gradients<T: Scalar>(
    model: &DualEncoder<T>,
    data: &PairSet,
    batches: &[(Vec<usize>, Option<u64>)],
    ids: &[ParamId],
    mode: LossMode,
) -> std::result::Result<Accumulated<T>, (usize, String)> {
    if batches.is_empty() {
        return Err((0, "no micro-batches".into()));
    }
    let results: Vec<Result<MicroResult<T>>> = batches
        .par_iter()
        .map(|(idx, seed)| {
            let rng = seed.map(ChaCha8Rng::seed_from_u64);
            batch_gradients(model, data, idx, ids, mode, rng)
        })
        .collect();
    let mut grads: Vec<Matrix<T>> = ids
        .iter()
        .map(|&id| {
            let (r, c) = model.params().value(id).shape();
            Matrix::zeros(r, c)
        })
        .collect();
    let (mut loss, mut bypass, mut prompted) = (0.0, 0.0, 0.0);
    for (j, r) in results.into_iter().enumerate() {
        let r = r.map_err(|e| (j, e.to_string()))?;
        if !r.loss.is_finite() {
            return Err((j, format!("loss {} (bypass {}, prompted {})", r.loss, r.bypass, r.prompted)));
        }
        for (a, g) in grads.iter_mut().zip(&r.grads) {
            if let Some(g) = g {
                a.add_assign(g);
            }
        }
        loss += r.loss;
        bypass += r.bypass;
        prompted += r.prompted;
    }
    let k = batches.len() as f64;
    let inv = T::lit(1.0 / k);
    for a in &mut grads {
        *a = a.scale(inv);
    }
    Ok(Accumulated {
        grads,
        loss: loss / k,
        bypass: bypass / k,
        prompted: prompted / k,
    })
}

fn global_norm<T: Scalar>(grads: &[Matrix<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.as_slice())
        .map(|v| {
            let v = v.to_f64_lossy();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Trains `model` to the end of its schedule; returns the per-update history.
pub fn train<T: Scalar>(model: &mut DualEncoder<T>, data: &PairSet, cfg: &TrainConfig) -> Result<Vec<StepRecord>> {
    let mut t = Trainer::new(model, data.len(), cfg)?;
    t.run(model, data, None)?;
    Ok(t.history)
}

/// Attaches adapters and trains them; base weights stay frozen.
pub fn train_lora<T: Scalar>(
    model: &mut DualEncoder<T>,
    data: &PairSet,
    cfg: &TrainConfig,
    lora: &LoraConfig,
) -> Result<Vec<StepRecord>> {
    prepare_lora(model, lora)?;
    train(model, data, cfg)
}

/// Trains every weight, as when fitting a base model from scratch.
pub fn train_full<T: Scalar>(
    model: &mut DualEncoder<T>,
    data: &PairSet,
    cfg: &TrainConfig,
) -> Result<Vec<StepRecord>> {
    if model.has_adapters() {
        return Err(Error::Config("full training expects a model without adapters".into()));
    }
    let before: Vec<(ParamId, bool)> = model.params().entries().map(|(id, e)| (id, e.trainable)).collect();
    prepare_full(model, cfg.temperature.learnable);
    let out = train(model, data, cfg);
    for (id, t) in before {
        model.params_mut().set_trainable(id, t);
    }
    out
}
