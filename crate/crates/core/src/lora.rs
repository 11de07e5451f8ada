//! Low-rank adapters `W + scale·BA` on frozen linear maps.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::model::{DualEncoder, Linear, LoraSlot, ParamId, ParamKind};
use crate::scalar::Scalar;

pub const LORA_INIT_STD: f64 = 0.02;
pub const RANK_GRID: [usize; 4] = [1, 2, 4, 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    Upper,
    Bottom,
    Vertical,
}

impl Placement {
    pub const ALL: [Placement; 3] = [Placement::Upper, Placement::Bottom, Placement::Vertical];

    /// 1-based layer indices for a stack of depth `depth`.
    pub fn layers(self, depth: usize) -> Vec<usize> {
        let ceil = |num: usize, den: usize| num.div_ceil(den);
        let mut v = match self {
            Placement::Upper => vec![depth - 1, depth],
            Placement::Bottom => vec![ceil(depth, 2)],
            Placement::Vertical => vec![ceil(depth, 2), ceil(3 * depth, 4), depth],
        };
        v.dedup();
        v
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Placement::Upper => "upper",
            Placement::Bottom => "bottom",
            Placement::Vertical => "vertical",
        })
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "upper" => Ok(Placement::Upper),
            "bottom" => Ok(Placement::Bottom),
            "vertical" => Ok(Placement::Vertical),
            _ => Err(Error::Config(format!("unknown placement {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    AttentionValue,
    AttentionOutput,
    FeedForward,
    Projectors,
    MitEncoder,
    PromptDecoderUpper,
}

impl TargetKind {
    pub const ALL: [TargetKind; 6] = [
        TargetKind::AttentionValue,
        TargetKind::AttentionOutput,
        TargetKind::FeedForward,
        TargetKind::Projectors,
        TargetKind::MitEncoder,
        TargetKind::PromptDecoderUpper,
    ];

    fn is_layer_kind(self) -> bool {
        matches!(
            self,
            TargetKind::AttentionValue | TargetKind::AttentionOutput | TargetKind::FeedForward
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TargetKind::AttentionValue => "attention_value",
            TargetKind::AttentionOutput => "attention_output",
            TargetKind::FeedForward => "feed_forward",
            TargetKind::Projectors => "projectors",
            TargetKind::MitEncoder => "mit_encoder",
            TargetKind::PromptDecoderUpper => "prompt_decoder_upper",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    /// Scaling numerator; `None` means `alpha = rank`.
    pub alpha: Option<f64>,
    pub dropout: f64,
    pub placement: Placement,
    pub target_kinds: Vec<TargetKind>,
    /// Whether the temperature is trained alongside the adapters.
    pub learn_temperature: bool,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: None,
            dropout: 0.5,
            placement: Placement::Vertical,
            target_kinds: TargetKind::ALL.to_vec(),
            learn_temperature: true,
            seed: 0,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("LoRA alpha must be positive, got {a}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("LoRA dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64) / self.rank as f64
    }
}

/// Adapter sites chosen by a placement strategy. Layer indices are 1-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub vision_layers: Vec<usize>,
    pub text_layers: Vec<usize>,
    pub layer_kinds: Vec<TargetKind>,
    pub mit: bool,
    pub prompt_decoder_upper: bool,
    pub projectors: bool,
}

impl PlacementPlan {
    pub fn is_empty(&self) -> bool {
        let layered = !self.layer_kinds.is_empty()
            && !(self.vision_layers.is_empty() && self.text_layers.is_empty());
        !(layered || self.mit || self.prompt_decoder_upper || self.projectors)
    }
}

/// Resolves a placement strategy against stack depths.
pub fn resolve_placement(
    placement: Placement,
    l_v: usize,
    l_t: usize,
    targets: &[TargetKind],
) -> Result<PlacementPlan> {
    if l_v < 2 || l_t < 2 {
        return Err(Error::Config(format!(
            "placement needs stacks of depth >= 2, got vision {l_v}, text {l_t}"
        )));
    }
    let mut layer_kinds: Vec<TargetKind> =
        targets.iter().copied().filter(|k| k.is_layer_kind()).collect();
    layer_kinds.sort();
    layer_kinds.dedup();
    Ok(PlacementPlan {
        vision_layers: placement.layers(l_v),
        text_layers: placement.layers(l_t),
        layer_kinds,
        mit: targets.contains(&TargetKind::MitEncoder),
        prompt_decoder_upper: targets.contains(&TargetKind::PromptDecoderUpper),
        projectors: targets.contains(&TargetKind::Projectors),
    })
}

/// A standalone adapter around a frozen `p × q` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    pub w: Matrix<T>,
    pub b: Matrix<T>,
    pub a: Matrix<T>,
    pub scale: T,
    pub dropout: f64,
}

impl<T: Scalar> LoraAdapter<T> {
    /// `B = 0`, `A ~ N(0, 0.02²)`.
    pub fn new<R: Rng + ?Sized>(w: Matrix<T>, cfg: &LoraConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (p, q) = w.shape();
        Ok(Self {
            b: Matrix::zeros(p, cfg.rank),
            a: Matrix::normal(cfg.rank, q, LORA_INIT_STD, rng),
            w,
            scale: T::lit(cfg.scale()),
            dropout: cfg.dropout,
        })
    }

    pub fn from_parts(w: Matrix<T>, b: Matrix<T>, a: Matrix<T>, scale: T, dropout: f64) -> Result<Self> {
        if b.rows() != w.rows() || a.cols() != w.cols() || b.cols() != a.rows() {
            return Err(Error::Config(format!(
                "adapter shapes W {:?}, B {:?}, A {:?} disagree",
                w.shape(),
                b.shape(),
                a.shape()
            )));
        }
        Ok(Self { w, b, a, scale, dropout })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// `Wx + scale·B(A(drop(x)))`; dropout needs `rng` and `training`.
    pub fn forward(&self, x: &[T], training: bool, rng: Option<&mut ChaCha8Rng>) -> Result<Vec<T>> {
        if x.len() != self.w.cols() {
            return Err(Error::Config(format!(
                "adapter input of length {} for W with {} columns",
                x.len(),
                self.w.cols()
            )));
        }
        let mut y = self.w.mul_vec(x);
        let dropped: Vec<T>;
        let xd = match (training && self.dropout > 0.0, rng) {
            (true, Some(rng)) => {
                let keep = T::lit(1.0 / (1.0 - self.dropout));
                dropped = x
                    .iter()
                    .map(|&v| if rng.random::<f64>() < self.dropout { T::zero() } else { v * keep })
                    .collect();
                &dropped[..]
            }
            _ => x,
        };
        let ax = self.a.mul_vec(xd);
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += self.scale * dot(self.b.row(i), &ax);
        }
        Ok(y)
    }

    pub fn merge(&self) -> Matrix<T> {
        self.w.add(&self.b.matmul(&self.a).scale(self.scale))
    }
}

/// Trainable parameters after attachment, with scalar counts per target kind.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainableView {
    #[serde(skip)]
    pub ids: Vec<ParamId>,
    pub adapter_matrices: usize,
    pub counts: BTreeMap<String, usize>,
    pub total: usize,
}

#[derive(Clone, Copy)]
enum Site {
    Vision(usize),
    Text(usize),
    Mit(usize),
    PromptUpper,
}

fn block_linears<T>(model: &mut DualEncoder<T>, site: Site, kind: TargetKind) -> Vec<&mut Linear> {
    let (attn_v, attn_o, fc1, fc2) = match site {
        Site::Vision(i) => {
            let b = &mut model.vision.blocks[i];
            (&mut b.attn.wv, &mut b.attn.wo, &mut b.mlp.fc1, &mut b.mlp.fc2)
        }
        Site::Text(i) => {
            let b = &mut model.text.blocks[i];
            (&mut b.attn.wv, &mut b.attn.wo, &mut b.mlp.fc1, &mut b.mlp.fc2)
        }
        Site::Mit(i) => {
            let b = &mut model.mit.blocks[i];
            (&mut b.attn.wv, &mut b.attn.wo, &mut b.mlp.fc1, &mut b.mlp.fc2)
        }
        Site::PromptUpper => {
            let b = model.prompt.last_mut().expect("prompt generator has blocks");
            (&mut b.cross.wv, &mut b.cross.wo, &mut b.mlp.fc1, &mut b.mlp.fc2)
        }
    };
    match kind {
        TargetKind::AttentionValue => vec![attn_v],
        TargetKind::AttentionOutput => vec![attn_o],
        TargetKind::FeedForward => vec![fc1, fc2],
        _ => vec![],
    }
}

impl<T: Scalar> DualEncoder<T> {
    pub fn has_adapters(&self) -> bool {
        self.params.entries().any(|(_, e)| e.kind.is_adapter())
    }

    /// Freezes every base weight and attaches zero-initialised adapters at the
    /// planned sites. Returns the trainable view.
    pub fn attach_lora(&mut self, plan: &PlacementPlan, cfg: &LoraConfig) -> Result<TrainableView> {
        cfg.validate()?;
        if plan.is_empty() {
            return Err(Error::Config("LoRA plan has no targets".into()));
        }
        if self.has_adapters() {
            return Err(Error::Config("model already carries adapters".into()));
        }
        let (lv, lt) = (self.vision.blocks.len(), self.text.blocks.len());
        if let Some(&i) = plan.vision_layers.iter().find(|&&i| i == 0 || i > lv) {
            return Err(Error::Config(format!("vision layer {i} outside 1..={lv}")));
        }
        if let Some(&i) = plan.text_layers.iter().find(|&&i| i == 0 || i > lt) {
            return Err(Error::Config(format!("text layer {i} outside 1..={lt}")));
        }

        let mut sites: Vec<(Site, TargetKind, &'static str)> = Vec::new();
        for &k in &plan.layer_kinds {
            sites.extend(plan.vision_layers.iter().map(|&i| (Site::Vision(i - 1), k, k.as_str())));
            sites.extend(plan.text_layers.iter().map(|&i| (Site::Text(i - 1), k, k.as_str())));
        }
        let inner = [
            TargetKind::AttentionValue,
            TargetKind::AttentionOutput,
            TargetKind::FeedForward,
        ];
        if plan.mit {
            for i in 0..self.mit.blocks.len() {
                sites.extend(inner.iter().map(|&k| (Site::Mit(i), k, "mit_encoder")));
            }
        }
        if plan.prompt_decoder_upper && !self.prompt.is_empty() {
            sites.extend(inner.iter().map(|&k| (Site::PromptUpper, k, "prompt_decoder_upper")));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut targets: Vec<(String, usize, usize, &'static str)> = Vec::new();
        for (site, kind, label) in sites {
            for l in block_linears(self, site, kind) {
                targets.push((l.name.clone(), l.in_dim, l.out_dim, label));
            }
        }
        if plan.projectors {
            for l in [&self.video_proj, &self.text_proj] {
                targets.push((l.name.clone(), l.in_dim, l.out_dim, "projectors"));
            }
        }

        let mut slots: BTreeMap<String, LoraSlot> = BTreeMap::new();
        for (name, in_dim, out_dim, label) in &targets {
            let a = self.params.insert(
                format!("{name}.lora_a.{label}"),
                Matrix::normal(cfg.rank, *in_dim, LORA_INIT_STD, &mut rng),
                ParamKind::LoraA,
            );
            let b = self.params.insert(
                format!("{name}.lora_b.{label}"),
                Matrix::zeros(*out_dim, cfg.rank),
                ParamKind::LoraB,
            );
            slots.insert(
                name.clone(),
                LoraSlot {
                    a,
                    b,
                    scale: cfg.scale(),
                    dropout: cfg.dropout,
                },
            );
        }
        self.for_each_linear_mut(|l| {
            if let Some(s) = slots.remove(&l.name) {
                l.lora = Some(s);
            }
        });
        self.set_lora_trainable(cfg.learn_temperature);
        self.lora = Some(cfg.clone());
        Ok(self.trainable_view())
    }

    /// Adapters trainable, base frozen, temperature per `learn_temperature`.
    pub fn set_lora_trainable(&mut self, learn_temperature: bool) {
        let ids: Vec<(ParamId, ParamKind)> = self.params.entries().map(|(id, e)| (id, e.kind)).collect();
        for (id, kind) in ids {
            let t = match kind {
                ParamKind::Base => false,
                ParamKind::LoraA | ParamKind::LoraB => true,
                ParamKind::LogTemperature => learn_temperature,
            };
            self.params.set_trainable(id, t);
        }
    }

    /// Every parameter trainable; used when training a base model from scratch.
    /// Overrides the dropout rate of every attached adapter.
    pub fn set_lora_dropout(&mut self, p: f64) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("LoRA dropout must be in [0, 1), got {p}")));
        }
        self.for_each_linear_mut(|l| {
            if let Some(s) = &mut l.lora {
                s.dropout = p;
            }
        });
        if let Some(c) = &mut self.lora {
            c.dropout = p;
        }
        Ok(())
    }

    pub fn set_all_trainable(&mut self) {
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            self.params.set_trainable(id, true);
        }
    }

    pub fn trainable_view(&self) -> TrainableView {
        let mut view = TrainableView::default();
        for (id, e) in self.params.entries() {
            if !e.trainable {
                continue;
            }
            view.ids.push(id);
            view.total += e.value.len();
            let label = match e.kind {
                ParamKind::LoraA | ParamKind::LoraB => {
                    view.adapter_matrices += 1;
                    e.name.rsplit('.').next().unwrap_or("adapter").to_string()
                }
                ParamKind::LogTemperature => "temperature".to_string(),
                ParamKind::Base => "base".to_string(),
            };
            *view.counts.entry(label).or_default() += e.value.len();
        }
        view
    }

    fn for_each_linear_mut(&mut self, mut f: impl FnMut(&mut Linear)) {
        for b in self
            .vision
            .blocks
            .iter_mut()
            .chain(self.text.blocks.iter_mut())
            .chain(self.mit.blocks.iter_mut())
        {
            for l in b.linears_mut() {
                f(l);
            }
        }
        for b in &mut self.prompt {
            for l in b.linears_mut() {
                f(l);
            }
        }
        f(&mut self.vision.patch);
        f(&mut self.video_proj);
        f(&mut self.text_proj);
    }

    /// Standalone adapters for every attached slot, keyed by linear name.
    pub fn adapters(&self) -> BTreeMap<String, LoraAdapter<T>> {
        self.linears()
            .into_iter()
            .filter_map(|l| {
                let s = l.lora.as_ref()?;
                Some((
                    l.name.clone(),
                    LoraAdapter {
                        w: self.params.value(l.weight).clone(),
                        b: self.params.value(s.b).clone(),
                        a: self.params.value(s.a).clone(),
                        scale: T::lit(s.scale),
                        dropout: s.dropout,
                    },
                ))
            })
            .collect()
    }

    /// Folds every adapter into its base weight and removes the adapters.
    pub fn merge_lora(&self) -> DualEncoder<T> {
        let mut out = self.clone();
        let merged = self.adapters();
        let mut weights: Vec<(ParamId, Matrix<T>)> = Vec::new();
        out.for_each_linear_mut(|l| {
            if let Some(a) = merged.get(&l.name) {
                weights.push((l.weight, a.merge()));
            }
            l.lora = None;
        });
        for (id, w) in weights {
            out.params.set_value(id, w).expect("merged weight keeps its shape");
        }
        out.params.drop_adapters();
        out.lora = None;
        out
    }
}
