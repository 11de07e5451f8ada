//! Building blocks shared by every tower. Weights are stored `out × in`,
//! activations are row-per-token, so a linear map is `x · Wᵀ`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Binder, ParamId, ParamKind, ParamStore};
use crate::error::Result;
use crate::graph::{AttentionLayout, Graph, NodeId};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub(crate) const INIT_STD: f64 = 0.02;
pub(crate) const LN_EPS: f64 = 1e-5;

/// Low-rank delta attached to a [`Linear`]: `scale · B(A(drop(x)))`.
#[derive(Clone, Debug)]
pub struct LoraSlot {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
    pub dropout: f64,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub lora: Option<LoraSlot>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = store.insert(
            format!("{name}.weight"),
            Matrix::trunc_normal(out_dim, in_dim, INIT_STD, rng),
            ParamKind::Base,
        );
        let bias = bias.then(|| {
            store.insert(format!("{name}.bias"), Matrix::zeros(1, out_dim), ParamKind::Base)
        });
        Self {
            name: name.to_string(),
            weight,
            bias,
            lora: None,
            in_dim,
            out_dim,
        }
    }

    /// Identity when square, truncated normal otherwise. No bias.
    pub(crate) fn projector<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = if in_dim == out_dim {
            Matrix::identity(in_dim)
        } else {
            Matrix::trunc_normal(out_dim, in_dim, INIT_STD, rng)
        };
        let weight = store.insert(format!("{name}.weight"), w, ParamKind::Base);
        Self {
            name: name.to_string(),
            weight,
            bias: None,
            lora: None,
            in_dim,
            out_dim,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub(crate) fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gamma: store.insert(
                format!("{name}.gamma"),
                Matrix::filled(1, width, T::one()),
                ParamKind::Base,
            ),
            beta: store.insert(format!("{name}.beta"), Matrix::zeros(1, width), ParamKind::Base),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl Attention {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, w: usize) -> Self {
        Self {
            wq: Linear::new(store, rng, &format!("{name}.wq"), w, w, true),
            wk: Linear::new(store, rng, &format!("{name}.wk"), w, w, true),
            wv: Linear::new(store, rng, &format!("{name}.wv"), w, w, true),
            wo: Linear::new(store, rng, &format!("{name}.wo"), w, w, true),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        w: usize,
        hidden: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), w, hidden, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, w, true),
        }
    }
}

/// Pre-norm transformer encoder block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: Norm,
    pub attn: Attention,
    pub ln2: Norm,
    pub mlp: FeedForward,
}

impl EncoderBlock {
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        w: usize,
        hidden: usize,
    ) -> Self {
        Self {
            ln1: Norm::new(store, &format!("{name}.ln1"), w),
            attn: Attention::new(store, rng, &format!("{name}.attn"), w),
            ln2: Norm::new(store, &format!("{name}.ln2"), w),
            mlp: FeedForward::new(store, rng, &format!("{name}.mlp"), w, hidden),
        }
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 6] {
        [
            &mut self.attn.wq,
            &mut self.attn.wk,
            &mut self.attn.wv,
            &mut self.attn.wo,
            &mut self.mlp.fc1,
            &mut self.mlp.fc2,
        ]
    }
}

/// Cross-attention + feed-forward, both residual; no self-attention.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln_q: Norm,
    pub ln_kv: Norm,
    pub cross: Attention,
    pub ln2: Norm,
    pub mlp: FeedForward,
}

impl DecoderBlock {
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        w: usize,
        hidden: usize,
    ) -> Self {
        Self {
            ln_q: Norm::new(store, &format!("{name}.ln_q"), w),
            ln_kv: Norm::new(store, &format!("{name}.ln_kv"), w),
            cross: Attention::new(store, rng, &format!("{name}.cross"), w),
            ln2: Norm::new(store, &format!("{name}.ln2"), w),
            mlp: FeedForward::new(store, rng, &format!("{name}.mlp"), w, hidden),
        }
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 6] {
        [
            &mut self.cross.wq,
            &mut self.cross.wk,
            &mut self.cross.wv,
            &mut self.cross.wo,
            &mut self.mlp.fc1,
            &mut self.mlp.fc2,
        ]
    }
}

/// One forward pass: the tape, the parameter leaves bound so far, and the
/// dropout stream (present only in training mode).
pub struct Pass<'a, T: Scalar> {
    pub graph: Graph<T>,
    pub binder: Binder<'a, T>,
    pub dropout_rng: Option<ChaCha8Rng>,
}

impl<'a, T: Scalar> Pass<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            graph: Graph::new(),
            binder: Binder::new(store),
            dropout_rng: None,
        }
    }

    /// Every parameter bound as a constant; nothing is recorded for backward.
    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Self {
            graph: Graph::new(),
            binder: Binder::frozen(store),
            dropout_rng: None,
        }
    }

    pub fn training(store: &'a ParamStore<T>, rng: ChaCha8Rng) -> Self {
        Self {
            dropout_rng: Some(rng),
            ..Self::new(store)
        }
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.binder.node(&mut self.graph, id)
    }

    pub fn linear(&mut self, l: &Linear, x: NodeId) -> NodeId {
        let w = self.param(l.weight);
        let mut y = self.graph.matmul_nt(x, w);
        if let Some(b) = l.bias {
            let b = self.param(b);
            y = self.graph.add_tiled(y, b);
        }
        if let Some(slot) = &l.lora {
            let xd = self.dropout(x, slot.dropout);
            let a = self.param(slot.a);
            let b = self.param(slot.b);
            let xa = self.graph.matmul_nt(xd, a);
            let delta = self.graph.matmul_nt(xa, b);
            let delta = self.graph.scale(delta, T::lit(slot.scale));
            y = self.graph.add(y, delta);
        }
        y
    }

    fn dropout(&mut self, x: NodeId, p: f64) -> NodeId {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let (r, c) = self.graph.value(x).shape();
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..r * c)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mask = self
            .graph
            .constant(Matrix::from_vec(r, c, mask).expect("mask shape"));
        self.graph.mul(x, mask)
    }

    pub fn norm(&mut self, n: &Norm, x: NodeId) -> NodeId {
        let g = self.param(n.gamma);
        let b = self.param(n.beta);
        self.graph.layer_norm(x, g, b, LN_EPS)
    }

    fn feed_forward(&mut self, f: &FeedForward, x: NodeId) -> NodeId {
        let h = self.linear(&f.fc1, x);
        let h = self.graph.gelu(h);
        self.linear(&f.fc2, h)
    }

    fn attend(
        &mut self,
        a: &Attention,
        q_in: NodeId,
        kv_in: NodeId,
        layout: AttentionLayout,
    ) -> Result<NodeId> {
        let q = self.linear(&a.wq, q_in);
        let k = self.linear(&a.wk, kv_in);
        let v = self.linear(&a.wv, kv_in);
        let o = self.graph.attention(q, k, v, layout)?;
        Ok(self.linear(&a.wo, o))
    }

    pub fn encoder_block(
        &mut self,
        blk: &EncoderBlock,
        x: NodeId,
        layout: AttentionLayout,
    ) -> Result<NodeId> {
        let h = self.norm(&blk.ln1, x);
        let a = self.attend(&blk.attn, h, h, layout)?;
        let x = self.graph.add(x, a);
        let h = self.norm(&blk.ln2, x);
        let f = self.feed_forward(&blk.mlp, h);
        Ok(self.graph.add(x, f))
    }

    pub fn decoder_block(
        &mut self,
        blk: &DecoderBlock,
        x: NodeId,
        memory: NodeId,
        layout: AttentionLayout,
    ) -> Result<NodeId> {
        let q = self.norm(&blk.ln_q, x);
        let kv = self.norm(&blk.ln_kv, memory);
        let a = self.attend(&blk.cross, q, kv, layout)?;
        let x = self.graph.add(x, a);
        let h = self.norm(&blk.ln2, x);
        let f = self.feed_forward(&blk.mlp, h);
        Ok(self.graph.add(x, f))
    }
}
