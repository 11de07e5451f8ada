use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::ModelConfig;
use super::layers::{DecoderBlock, EncoderBlock, Linear, Norm, Pass, INIT_STD};
use super::params::{ParamId, ParamKind, ParamStore};
use super::types::{
    ClipTensor, EmbeddingVector, EncodedPairBatch, FrameEmbeddingSequence, TextFeatures,
    TokenSequence,
};
use crate::error::{Error, Result};
use crate::graph::{AttentionLayout, NodeId};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Clips encoded per inference graph; bounds peak memory of the tape.
const INFERENCE_CHUNK: usize = 16;

#[derive(Clone, Debug)]
pub struct VisionTower {
    pub patch: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub ln_post: Norm,
}

#[derive(Clone, Debug)]
pub struct TextTower {
    pub token_emb: ParamId,
    pub eos: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub ln_post: Norm,
}

#[derive(Clone, Debug)]
pub struct Mit {
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
}

/// Graph nodes of the video path for a batch of `n` clips of `t` frames.
#[derive(Clone, Copy, Debug)]
pub struct VideoNodes {
    /// `(n·t) × width` per-frame vision outputs.
    pub frames: NodeId,
    /// `(n·t) × width` MIT outputs, the prompt generator's memory.
    pub mit: NodeId,
    /// `n × width` mean-pooled MIT outputs.
    pub summary: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct TextNodes {
    /// `(n·len) × width`, `len` rows per sequence.
    pub tokens: NodeId,
    pub len: usize,
    /// `n × width` pooled summaries.
    pub summary: NodeId,
}

/// Raw (unnormalised) projector outputs of a batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchNodes {
    pub video: NodeId,
    pub prompted: NodeId,
    pub bypass: NodeId,
}

/// Normalised clip embeddings plus the MIT outputs the prompt generator needs.
#[derive(Clone, Debug)]
pub struct VideoEncoding<T> {
    pub embeddings: Matrix<T>,
    pub mit: Vec<Matrix<T>>,
}

/// Video-text dual encoder: per-frame vision transformer, multi-frame
/// integration transformer (MIT), text transformer, cross-attention prompt
/// generator, and two projectors into the shared space.
#[derive(Clone, Debug)]
pub struct DualEncoder<T> {
    pub(crate) config: ModelConfig,
    pub(crate) params: ParamStore<T>,
    pub(crate) vision: VisionTower,
    pub(crate) text: TextTower,
    pub(crate) mit: Mit,
    pub(crate) prompt: Vec<DecoderBlock>,
    pub(crate) video_proj: Linear,
    pub(crate) text_proj: Linear,
    pub(crate) log_tau: ParamId,
    pub(crate) lora: Option<crate::lora::LoraConfig>,
}

impl<T: Scalar> DualEncoder<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self::build(config))
    }

    /// Like [`DualEncoder::new`] but accepts any positive frame count; for toy
    /// configurations in tests and gradient checks.
    pub fn new_toy(config: ModelConfig) -> Result<Self> {
        config.validate_shapes()?;
        Ok(Self::build(config))
    }

    fn build(config: ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let mut p = ParamStore::new();
        let w = config.encoder_width;
        let hidden = config.mlp_width();
        let n_patch = config.patches_per_frame();

        let vision = VisionTower {
            patch: Linear::new(&mut p, &mut rng, "vision.patch", config.patch_dim(), w, true),
            cls: p.insert("vision.cls", Matrix::trunc_normal(1, w, INIT_STD, &mut rng), ParamKind::Base),
            pos: p.insert(
                "vision.pos",
                Matrix::trunc_normal(n_patch + 1, w, INIT_STD, &mut rng),
                ParamKind::Base,
            ),
            blocks: (0..config.vision_layers)
                .map(|i| EncoderBlock::new(&mut p, &mut rng, &format!("vision.blocks.{i}"), w, hidden))
                .collect(),
            ln_post: Norm::new(&mut p, "vision.ln_post", w),
        };
        let text = TextTower {
            token_emb: p.insert(
                "text.token_emb",
                Matrix::trunc_normal(config.text_vocab_size, w, INIT_STD, &mut rng),
                ParamKind::Base,
            ),
            eos: p.insert("text.eos", Matrix::trunc_normal(1, w, INIT_STD, &mut rng), ParamKind::Base),
            pos: p.insert(
                "text.pos",
                Matrix::trunc_normal(config.max_text_len + 1, w, INIT_STD, &mut rng),
                ParamKind::Base,
            ),
            blocks: (0..config.text_layers)
                .map(|i| EncoderBlock::new(&mut p, &mut rng, &format!("text.blocks.{i}"), w, hidden))
                .collect(),
            ln_post: Norm::new(&mut p, "text.ln_post", w),
        };
        let mit = Mit {
            pos: p.insert(
                "mit.pos",
                Matrix::trunc_normal(config.frames_per_clip, w, INIT_STD, &mut rng),
                ParamKind::Base,
            ),
            blocks: (0..config.mit_layers)
                .map(|i| EncoderBlock::new(&mut p, &mut rng, &format!("mit.blocks.{i}"), w, hidden))
                .collect(),
        };
        let prompt = (0..config.prompt_decoder_layers)
            .map(|i| DecoderBlock::new(&mut p, &mut rng, &format!("prompt.blocks.{i}"), w, hidden))
            .collect();
        let video_proj = Linear::projector(&mut p, &mut rng, "video_proj", w, config.embed_dim);
        let text_proj = Linear::projector(&mut p, &mut rng, "text_proj", w, config.embed_dim);
        let log_tau = p.insert(
            "log_tau",
            Matrix::filled(1, 1, T::lit(DEFAULT_TEMPERATURE.ln())),
            ParamKind::LogTemperature,
        );
        Self {
            config,
            params: p,
            vision,
            text,
            mit,
            prompt,
            video_proj,
            text_proj,
            log_tau,
            lora: None,
        }
    }

    /// Configuration of the attached adapters, if any.
    pub fn lora_config(&self) -> Option<&crate::lora::LoraConfig> {
        self.lora.as_ref()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn log_tau_id(&self) -> ParamId {
        self.log_tau
    }

    pub fn temperature(&self) -> T {
        self.params.value(self.log_tau).get(0, 0).exp()
    }

    pub fn set_temperature(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        self.params
            .set_value(self.log_tau, Matrix::filled(1, 1, T::lit(tau.ln())))
    }

    pub fn vision_blocks(&self) -> &[EncoderBlock] {
        &self.vision.blocks
    }

    pub fn text_blocks(&self) -> &[EncoderBlock] {
        &self.text.blocks
    }

    pub fn mit_blocks(&self) -> &[EncoderBlock] {
        &self.mit.blocks
    }

    pub fn prompt_blocks(&self) -> &[DecoderBlock] {
        &self.prompt
    }

    pub fn mit_pos_id(&self) -> ParamId {
        self.mit.pos
    }

    /// Every linear map in the model, in a fixed order.
    pub(crate) fn linears(&self) -> Vec<&Linear> {
        let mut out = vec![&self.vision.patch];
        for b in self.vision.blocks.iter().chain(&self.text.blocks).chain(&self.mit.blocks) {
            out.extend([&b.attn.wq, &b.attn.wk, &b.attn.wv, &b.attn.wo, &b.mlp.fc1, &b.mlp.fc2]);
        }
        for b in &self.prompt {
            out.extend([
                &b.cross.wq,
                &b.cross.wk,
                &b.cross.wv,
                &b.cross.wo,
                &b.mlp.fc1,
                &b.mlp.fc2,
            ]);
        }
        out.push(&self.video_proj);
        out.push(&self.text_proj);
        out
    }

    pub fn cast<U: Scalar>(&self) -> DualEncoder<U> {
        DualEncoder {
            config: self.config.clone(),
            params: self.params.cast(),
            vision: self.vision.clone(),
            text: self.text.clone(),
            mit: self.mit.clone(),
            prompt: self.prompt.clone(),
            video_proj: self.video_proj.clone(),
            text_proj: self.text_proj.clone(),
            log_tau: self.log_tau,
            lora: self.lora.clone(),
        }
    }

    fn zero_linear(&mut self, l: &Linear) {
        let w = self.params.value_mut(l.weight);
        *w = Matrix::zeros(w.rows(), w.cols());
        if let Some(b) = l.bias {
            let v = self.params.value_mut(b);
            *v = Matrix::zeros(v.rows(), v.cols());
        }
    }

    /// Zeroes the cross-attention output maps of every decoder block, so the
    /// prompt generator no longer reads the video.
    pub fn zero_cross_attention_output(&mut self) {
        for l in self.prompt.iter().map(|b| b.cross.wo.clone()).collect::<Vec<_>>() {
            self.zero_linear(&l);
        }
    }

    /// Additionally zeroes the decoder feed-forward outputs, making every
    /// decoder block an exact identity on its query.
    pub fn zero_prompt_injection(&mut self) {
        self.zero_cross_attention_output();
        for l in self.prompt.iter().map(|b| b.mlp.fc2.clone()).collect::<Vec<_>>() {
            self.zero_linear(&l);
        }
    }

    fn check_clip(&self, clip: &ClipTensor) -> Result<()> {
        let c = &self.config;
        if clip.frames() != c.frames_per_clip
            || clip.height() != c.frame_height
            || clip.width() != c.frame_width
            || clip.channels() != c.channels
        {
            return Err(Error::Config(format!(
                "clip {}x{}x{}x{} does not match model {}x{}x{}x{}",
                clip.frames(),
                clip.height(),
                clip.width(),
                clip.channels(),
                c.frames_per_clip,
                c.frame_height,
                c.frame_width,
                c.channels
            )));
        }
        Ok(())
    }

    /// `(frames · patches) × patch_dim`, patch pixels ordered (dy, dx, channel).
    fn patchify(&self, clips: &[&ClipTensor]) -> Matrix<T> {
        let c = &self.config;
        let ps = c.patch_size;
        let (gh, gw) = (c.frame_height / ps, c.frame_width / ps);
        let per_frame = gh * gw;
        let n_frames: usize = clips.iter().map(|x| x.frames()).sum();
        let mut out = Matrix::zeros(n_frames * per_frame, c.patch_dim());
        let mut f = 0;
        for clip in clips {
            for t in 0..clip.frames() {
                let px = clip.frame(t);
                for py in 0..gh {
                    for pxi in 0..gw {
                        let row = out.row_mut(f * per_frame + py * gw + pxi);
                        let mut k = 0;
                        for dy in 0..ps {
                            for dx in 0..ps {
                                let base = ((py * ps + dy) * c.frame_width + pxi * ps + dx) * c.channels;
                                for ch in 0..c.channels {
                                    row[k] = T::lit(f64::from(px[base + ch]));
                                    k += 1;
                                }
                            }
                        }
                    }
                }
                f += 1;
            }
        }
        out
    }

    /// Per-frame vision transformer; returns `(n·t) × width` CLS outputs.
    pub fn vision_nodes(&self, pass: &mut Pass<'_, T>, clips: &[&ClipTensor]) -> Result<NodeId> {
        for clip in clips {
            self.check_clip(clip)?;
        }
        let n_frames: usize = clips.iter().map(|x| x.frames()).sum();
        let per = self.config.patches_per_frame();
        let seq = per + 1;
        let patches = pass.graph.constant(self.patchify(clips));
        let emb = pass.linear(&self.vision.patch, patches);
        let cls = pass.param(self.vision.cls);
        let pool = pass.graph.concat_rows(&[cls, emb]);
        let order: Vec<usize> = (0..n_frames)
            .flat_map(|f| std::iter::once(0).chain((0..per).map(move |p| 1 + f * per + p)))
            .collect();
        let x = pass.graph.select_rows(pool, order);
        let pos = pass.param(self.vision.pos);
        let mut x = pass.graph.add_tiled(x, pos);
        let layout = AttentionLayout {
            groups: n_frames,
            q_len: seq,
            k_len: seq,
            heads: self.config.attention_heads,
            key_mask: None,
        };
        for blk in &self.vision.blocks {
            x = pass.encoder_block(blk, x, layout.clone())?;
        }
        let x = pass.norm(&self.vision.ln_post, x);
        Ok(pass.graph.select_rows(x, (0..n_frames).map(|f| f * seq).collect()))
    }

    /// MIT over `groups` sequences of `t` frame rows each.
    pub fn mit_nodes(&self, pass: &mut Pass<'_, T>, frames: NodeId, t: usize) -> Result<(NodeId, NodeId)> {
        let rows = pass.graph.value(frames).rows();
        if t != self.config.frames_per_clip || rows % t != 0 {
            return Err(Error::shape(
                format!("multiple of {} frame rows", self.config.frames_per_clip),
                rows,
            ));
        }
        if let Some(i) = pass.graph.value(frames).first_non_finite() {
            return Err(Error::numeric_at(
                "frame embedding is not finite",
                i / pass.graph.value(frames).cols(),
            ));
        }
        let pos = pass.param(self.mit.pos);
        let mut x = pass.graph.add_tiled(frames, pos);
        let layout = AttentionLayout {
            groups: rows / t,
            q_len: t,
            k_len: t,
            heads: self.config.attention_heads,
            key_mask: None,
        };
        for blk in &self.mit.blocks {
            x = pass.encoder_block(blk, x, layout.clone())?;
        }
        let summary = pass.graph.mean_groups(x, t);
        Ok((x, summary))
    }

    pub fn video_nodes(&self, pass: &mut Pass<'_, T>, clips: &[&ClipTensor]) -> Result<VideoNodes> {
        let frames = self.vision_nodes(pass, clips)?;
        let (mit, summary) = self.mit_nodes(pass, frames, self.config.frames_per_clip)?;
        Ok(VideoNodes { frames, mit, summary })
    }

    /// Text transformer. Each sequence becomes `len` rows: real tokens, the
    /// end-of-sequence summary slot, then padding; keys past the summary slot
    /// are masked.
    pub fn text_nodes(&self, pass: &mut Pass<'_, T>, texts: &[&TokenSequence]) -> Result<TextNodes> {
        if texts.is_empty() {
            return Err(Error::Input("empty text batch".into()));
        }
        let c = &self.config;
        for t in texts {
            t.check(c.text_vocab_size, c.max_text_len)?;
        }
        let len = texts.iter().map(|t| t.len()).max().unwrap_or(0) + 1;
        let eos_row = c.text_vocab_size;
        let mut ids = Vec::with_capacity(texts.len() * len);
        let mut mask = Vec::with_capacity(texts.len() * len);
        let mut summary_rows = Vec::with_capacity(texts.len());
        for (g, t) in texts.iter().enumerate() {
            let n = t.real_len();
            ids.extend(t.ids[..n].iter().map(|&i| i as usize));
            ids.push(eos_row);
            ids.extend(t.ids[n..].iter().map(|&i| i as usize));
            ids.resize((g + 1) * len, 0);
            mask.extend((0..len).map(|j| j <= n));
            summary_rows.push(g * len + n);
        }
        let table = pass.param(self.text.token_emb);
        let eos = pass.param(self.text.eos);
        let table = pass.graph.concat_rows(&[table, eos]);
        let x = pass.graph.select_rows(table, ids);
        let pos_all = pass.param(self.text.pos);
        let pos = pass.graph.select_rows(pos_all, (0..len).collect());
        let mut x = pass.graph.add_tiled(x, pos);
        let layout = AttentionLayout {
            groups: texts.len(),
            q_len: len,
            k_len: len,
            heads: c.attention_heads,
            key_mask: Some(mask),
        };
        for blk in &self.text.blocks {
            x = pass.encoder_block(blk, x, layout.clone())?;
        }
        let tokens = pass.norm(&self.text.ln_post, x);
        let summary = pass.graph.select_rows(tokens, summary_rows);
        Ok(TextNodes { tokens, len, summary })
    }

    /// Prompt generator: `queries` is `g × width`, `memory` is `(g·k) × width`.
    pub fn prompt_nodes(&self, pass: &mut Pass<'_, T>, queries: NodeId, memory: NodeId) -> Result<NodeId> {
        let g = pass.graph.value(queries).rows();
        let m = pass.graph.value(memory).rows();
        if g == 0 || m % g != 0 {
            return Err(Error::shape(format!("memory rows divisible by {g}"), m));
        }
        let layout = AttentionLayout {
            groups: g,
            q_len: 1,
            k_len: m / g,
            heads: self.config.attention_heads,
            key_mask: None,
        };
        let mut x = queries;
        for blk in &self.prompt {
            x = pass.decoder_block(blk, x, memory, layout.clone())?;
        }
        Ok(x)
    }

    pub fn project_video_node(&self, pass: &mut Pass<'_, T>, x: NodeId) -> NodeId {
        pass.linear(&self.video_proj, x)
    }

    pub fn project_text_node(&self, pass: &mut Pass<'_, T>, x: NodeId) -> NodeId {
        pass.linear(&self.text_proj, x)
    }

    /// Full forward of a paired batch, row `i` of every output is pair `i`.
    pub fn batch_nodes(
        &self,
        pass: &mut Pass<'_, T>,
        clips: &[&ClipTensor],
        texts: &[&TokenSequence],
    ) -> Result<BatchNodes> {
        if clips.len() != texts.len() {
            return Err(Error::shape(
                format!("{} token sequences", clips.len()),
                texts.len(),
            ));
        }
        let v = self.video_nodes(pass, clips)?;
        let t = self.text_nodes(pass, texts)?;
        let enhanced = self.prompt_nodes(pass, t.summary, v.mit)?;
        Ok(BatchNodes {
            video: self.project_video_node(pass, v.summary),
            prompted: self.project_text_node(pass, enhanced),
            bypass: self.project_text_node(pass, t.summary),
        })
    }

    pub fn encode_frames(&self, clip: &ClipTensor) -> Result<FrameEmbeddingSequence<T>> {
        let mut pass = Pass::inference(&self.params);
        let f = self.vision_nodes(&mut pass, &[clip])?;
        Ok(FrameEmbeddingSequence {
            frames: pass.graph.value(f).clone(),
        })
    }

    /// MIT per-frame outputs and their mean-pooled summary.
    pub fn integrate_frames_with_outputs(
        &self,
        frames: &FrameEmbeddingSequence<T>,
    ) -> Result<(Matrix<T>, Vec<T>)> {
        if frames.frames.cols() != self.config.encoder_width {
            return Err(Error::shape(self.config.encoder_width, frames.frames.cols()));
        }
        let mut pass = Pass::inference(&self.params);
        let f = pass.graph.constant(frames.frames.clone());
        let (mit, summary) = self.mit_nodes(&mut pass, f, frames.len())?;
        Ok((
            pass.graph.value(mit).clone(),
            pass.graph.value(summary).row(0).to_vec(),
        ))
    }

    pub fn integrate_frames(&self, frames: &FrameEmbeddingSequence<T>) -> Result<Vec<T>> {
        Ok(self.integrate_frames_with_outputs(frames)?.1)
    }

    pub fn encode_text(&self, tokens: &TokenSequence) -> Result<TextFeatures<T>> {
        let mut pass = Pass::inference(&self.params);
        let t = self.text_nodes(&mut pass, &[tokens])?;
        let all = pass.graph.value(t.tokens);
        let rows = tokens.len() + 1;
        let data = all.as_slice()[..rows * all.cols()].to_vec();
        Ok(TextFeatures {
            tokens: Matrix::from_vec(rows, all.cols(), data)?,
            summary: pass.graph.value(t.summary).row(0).to_vec(),
        })
    }

    pub fn generate_prompt(&self, text: &TextFeatures<T>, mit_frames: &Matrix<T>) -> Result<Vec<T>> {
        let w = self.config.encoder_width;
        if text.summary.len() != w || mit_frames.cols() != w {
            return Err(Error::shape(w, format!("{} / {}", text.summary.len(), mit_frames.cols())));
        }
        if text.summary.iter().any(|x| !x.is_finite()) || !mit_frames.all_finite() {
            return Err(Error::numeric("prompt generator input is not finite"));
        }
        let mut pass = Pass::inference(&self.params);
        let q = pass.graph.constant(Matrix::row_vector(&text.summary));
        let m = pass.graph.constant(mit_frames.clone());
        let out = self.prompt_nodes(&mut pass, q, m)?;
        Ok(pass.graph.value(out).row(0).to_vec())
    }

    fn project(&self, l: &Linear, summary: &[T], normalize: bool) -> Result<EmbeddingVector<T>> {
        if summary.len() != l.in_dim {
            return Err(Error::shape(l.in_dim, summary.len()));
        }
        let mut pass = Pass::inference(&self.params);
        let x = pass.graph.constant(Matrix::row_vector(summary));
        let y = pass.linear(l, x);
        let v = pass.graph.value(y).row(0).to_vec();
        if normalize {
            EmbeddingVector::normalize(v)
        } else {
            Ok(EmbeddingVector::raw(v))
        }
    }

    pub fn project_video(&self, summary: &[T], normalize: bool) -> Result<EmbeddingVector<T>> {
        self.project(&self.video_proj, summary, normalize)
    }

    pub fn project_text(&self, summary: &[T], normalize: bool) -> Result<EmbeddingVector<T>> {
        self.project(&self.text_proj, summary, normalize)
    }

    /// Raw projector outputs for a paired batch.
    pub fn encode_pair_batch(
        &self,
        clips: &[ClipTensor],
        texts: &[TokenSequence],
    ) -> Result<EncodedPairBatch<T>> {
        let clips: Vec<&ClipTensor> = clips.iter().collect();
        let texts: Vec<&TokenSequence> = texts.iter().collect();
        let mut pass = Pass::inference(&self.params);
        let b = self.batch_nodes(&mut pass, &clips, &texts)?;
        let g = &pass.graph;
        EncodedPairBatch::new(
            g.value(b.video).clone(),
            g.value(b.prompted).clone(),
            g.value(b.bypass).clone(),
        )
    }

    /// L2-normalised clip embeddings and per-clip MIT outputs, chunked and
    /// computed in parallel.
    pub fn encode_videos(&self, clips: &[ClipTensor]) -> Result<VideoEncoding<T>> {
        let t = self.config.frames_per_clip;
        let parts: Vec<(Matrix<T>, Matrix<T>)> = clips
            .par_chunks(INFERENCE_CHUNK)
            .map(|chunk| {
                let refs: Vec<&ClipTensor> = chunk.iter().collect();
                let mut pass = Pass::inference(&self.params);
                let v = self.video_nodes(&mut pass, &refs)?;
                let p = self.project_video_node(&mut pass, v.summary);
                let p = pass.graph.l2_normalize_rows(p)?;
                Ok((pass.graph.value(p).clone(), pass.graph.value(v.mit).clone()))
            })
            .collect::<Result<_>>()?;
        let mut rows = Vec::with_capacity(clips.len());
        let mut mit = Vec::with_capacity(clips.len());
        for (emb, m) in parts {
            rows.extend(emb.to_rows());
            for c in 0..emb.rows() {
                let data = m.as_slice()[c * t * m.cols()..(c + 1) * t * m.cols()].to_vec();
                mit.push(Matrix::from_vec(t, m.cols(), data)?);
            }
        }
        Ok(VideoEncoding {
            embeddings: stack(rows, self.config.embed_dim)?,
            mit,
        })
    }

    /// Pooled text summaries (`n × width`), before any projector.
    pub fn text_summaries(&self, texts: &[TokenSequence]) -> Result<Matrix<T>> {
        let parts: Vec<Matrix<T>> = texts
            .par_chunks(INFERENCE_CHUNK * 4)
            .map(|chunk| {
                let refs: Vec<&TokenSequence> = chunk.iter().collect();
                let mut pass = Pass::inference(&self.params);
                let t = self.text_nodes(&mut pass, &refs)?;
                Ok(pass.graph.value(t.summary).clone())
            })
            .collect::<Result<_>>()?;
        stack(parts.iter().flat_map(Matrix::to_rows).collect(), self.config.encoder_width)
    }

    /// L2-normalised bypass text embeddings: text transformer straight into
    /// the text projector.
    pub fn encode_texts_bypass(&self, texts: &[TokenSequence]) -> Result<Matrix<T>> {
        let s = self.text_summaries(texts)?;
        let mut pass = Pass::inference(&self.params);
        let x = pass.graph.constant(s);
        let p = self.project_text_node(&mut pass, x);
        let p = pass.graph.l2_normalize_rows(p)?;
        Ok(pass.graph.value(p).clone())
    }

    /// L2-normalised prompted embeddings of precomputed text summaries,
    /// conditioned on one clip's MIT outputs.
    pub fn prompted_from_summaries(&self, summaries: &Matrix<T>, mit: &Matrix<T>) -> Result<Matrix<T>> {
        let g = summaries.rows();
        let mut pass = Pass::inference(&self.params);
        let q = pass.graph.constant(summaries.clone());
        let m = pass.graph.constant(mit.clone());
        let memory = pass
            .graph
            .select_rows(m, (0..g).flat_map(|_| 0..mit.rows()).collect());
        let out = self.prompt_nodes(&mut pass, q, memory)?;
        let p = self.project_text_node(&mut pass, out);
        let p = pass.graph.l2_normalize_rows(p)?;
        Ok(pass.graph.value(p).clone())
    }
}

fn stack<T: Scalar>(rows: Vec<Vec<T>>, cols: usize) -> Result<Matrix<T>> {
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, cols));
    }
    Matrix::from_rows(&rows)
}
