//! Central finite-difference check of the training objective's gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::LossMode;
use crate::model::{DualEncoder, ParamId, ParamKind};
use crate::trainer::{batch_gradients, PairSet};

/// Worst agreement within one parameter group.
#[derive(Clone, Debug, Serialize)]
pub struct GroupCheck {
    pub group: String,
    pub entries: usize,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over the sampled entries.
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Coarse grouping by role: adapter halves and temperature get their own
/// group, base weights are grouped by tower.
pub fn param_group(name: &str, kind: ParamKind) -> String {
    match kind {
        ParamKind::LoraA => "lora_a".into(),
        ParamKind::LoraB => "lora_b".into(),
        ParamKind::LogTemperature => "temperature".into(),
        ParamKind::Base => name.split('.').next().unwrap_or(name).to_string(),
    }
}

/// Compares analytic gradients of the loss on `data` (one batch, no dropout)
/// with central differences of step `h`, sampling up to `per_param` entries
/// of every trainable parameter.
pub fn check_gradients(
    model: &mut DualEncoder<f64>,
    data: &PairSet,
    mode: LossMode,
    h: f64,
    per_param: usize,
    seed: u64,
) -> Result<Vec<GroupCheck>> {
    let ids: Vec<ParamId> = model.params().trainable_ids();
    let idx: Vec<usize> = (0..data.len()).collect();
    let analytic = batch_gradients(model, data, &idx, &ids, mode, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // group → (Σ (a−n)², Σ a², Σ n², count)
    let mut acc: BTreeMap<String, (f64, f64, f64, usize)> = BTreeMap::new();
    for (i, &id) in ids.iter().enumerate() {
        let e = model.params().entry(id);
        let group = param_group(&e.name, e.kind);
        let len = e.value.len();
        let picks = sample(&mut rng, len, per_param.min(len));
        for j in picks {
            let a = analytic.grads[i].as_ref().map_or(0.0, |g| g.as_slice()[j]);
            let orig = model.params().value(id).as_slice()[j];
            let mut eval = |v: f64| -> Result<f64> {
                model.params_mut().value_mut(id).as_mut_slice()[j] = v;
                Ok(batch_gradients(model, data, &idx, &[], mode, None)?.loss)
            };
            let plus = eval(orig + h)?;
            let minus = eval(orig - h)?;
            model.params_mut().value_mut(id).as_mut_slice()[j] = orig;
            let n = (plus - minus) / (2.0 * h);
            let s = acc.entry(group.clone()).or_default();
            s.0 += (a - n) * (a - n);
            s.1 += a * a;
            s.2 += n * n;
            s.3 += 1;
        }
    }
    Ok(acc
        .into_iter()
        .map(|(group, (d, a, n, entries))| {
            let denom = a.sqrt().max(n.sqrt());
            GroupCheck {
                group,
                entries,
                rel_error: if denom == 0.0 { 0.0 } else { d.sqrt() / denom },
                analytic_norm: a.sqrt(),
            }
        })
        .collect())
}
