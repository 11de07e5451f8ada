use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{l2_norm, Matrix};
use crate::scalar::Scalar;

/// `T` frames of `height × width × channels` pixel values in `[0, 1]`,
/// frame-major then row-major then channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipTensor {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ClipTensor {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let expected = frames * height * width * channels;
        if data.len() != expected {
            return Err(Error::shape(
                format!("{frames}x{height}x{width}x{channels} = {expected} values"),
                data.len(),
            ));
        }
        if frames == 0 {
            return Err(Error::Input("clip has no frames".into()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric_at("clip pixel is not finite", i));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input(format!(
                "clip pixel {i} = {} outside [0, 1]",
                data[i]
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            frames,
            height,
            width,
            channels,
            data: vec![0.0; frames * height * width * channels],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    /// A copy with frames reordered: output frame `i` is input frame `order[i]`.
    pub fn reorder_frames(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.frames {
            return Err(Error::shape(self.frames, order.len()));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for &t in order {
            if t >= self.frames {
                return Err(Error::Input(format!("frame index {t} out of range")));
            }
            data.extend_from_slice(self.frame(t));
        }
        Ok(Self { data, ..self.clone() })
    }

    /// Concatenates frames along time. Used to assemble clips from single images.
    pub fn from_frames(frames: &[Vec<f32>], height: usize, width: usize, channels: usize) -> Result<Self> {
        let data: Vec<f32> = frames.iter().flatten().copied().collect();
        Self::new(frames.len(), height, width, channels, data)
    }
}

/// Token ids plus a padding mask; `true` marks real tokens, which form a prefix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, mask: Vec<bool>) -> Result<Self> {
        if ids.len() != mask.len() {
            return Err(Error::shape(ids.len(), mask.len()));
        }
        let real = mask.iter().take_while(|&&m| m).count();
        if mask[real..].iter().any(|&m| m) {
            return Err(Error::Input("padding mask must be a prefix of real tokens".into()));
        }
        Ok(Self { ids, mask })
    }

    pub fn unpadded(ids: Vec<u32>) -> Self {
        let mask = vec![true; ids.len()];
        Self { ids, mask }
    }

    /// Number of real (unmasked) tokens.
    pub fn real_len(&self) -> usize {
        self.mask.iter().take_while(|&&m| m).count()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn padded_to(&self, len: usize, pad_id: u32) -> Self {
        let mut out = self.clone();
        while out.ids.len() < len {
            out.ids.push(pad_id);
            out.mask.push(false);
        }
        out
    }

    pub(crate) fn check(&self, vocab: usize, max_len: usize) -> Result<()> {
        if self.real_len() == 0 {
            return Err(Error::Input("empty token sequence".into()));
        }
        if self.ids.len() > max_len {
            return Err(Error::Input(format!(
                "token sequence of length {} exceeds max_text_len {max_len}",
                self.ids.len()
            )));
        }
        if let Some(&id) = self.ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::Input(format!("token id {id} >= vocab size {vocab}")));
        }
        Ok(())
    }
}

/// Byte-level tokenizer: one token per UTF-8 byte, truncated to `max_len`.
#[derive(Clone, Copy, Debug)]
pub struct ByteTokenizer {
    pub max_len: usize,
}

impl ByteTokenizer {
    pub fn new(max_len: usize) -> Self {
        Self { max_len }
    }

    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        let ids: Vec<u32> = text
            .trim()
            .to_lowercase()
            .bytes()
            .take(self.max_len)
            .map(u32::from)
            .collect();
        if ids.is_empty() {
            return Err(Error::Input("cannot tokenize empty text".into()));
        }
        Ok(TokenSequence::unpadded(ids))
    }
}

/// Per-frame embeddings `F = [f_1, …, f_T]`, one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEmbeddingSequence<T> {
    pub frames: Matrix<T>,
}

impl<T: Scalar> FrameEmbeddingSequence<T> {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector<T> {
    pub values: Vec<T>,
    pub normalized: bool,
}

impl<T: Scalar> EmbeddingVector<T> {
    pub fn raw(values: Vec<T>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    pub fn normalize(values: Vec<T>) -> Result<Self> {
        let n = l2_norm(&values);
        if !n.is_finite() {
            return Err(Error::numeric("embedding norm is not finite"));
        }
        if n == T::zero() {
            return Err(Error::numeric("cannot normalize a zero vector"));
        }
        Ok(Self {
            values: values.into_iter().map(|v| v / n).collect(),
            normalized: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> T {
        l2_norm(&self.values)
    }
}

/// Text features of one sequence: per-position outputs and the pooled summary.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures<T> {
    pub tokens: Matrix<T>,
    pub summary: Vec<T>,
}

/// Projected outputs of a batch, row `i` belonging to pair `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPairBatch<T> {
    pub video_embeddings: Matrix<T>,
    pub text_embeddings_prompted: Matrix<T>,
    pub text_embeddings_bypass: Matrix<T>,
}

impl<T: Scalar> EncodedPairBatch<T> {
    pub fn new(video: Matrix<T>, prompted: Matrix<T>, bypass: Matrix<T>) -> Result<Self> {
        if video.rows() != prompted.rows() || video.rows() != bypass.rows() {
            return Err(Error::shape(
                format!("{} rows in every matrix", video.rows()),
                format!("{} prompted, {} bypass", prompted.rows(), bypass.rows()),
            ));
        }
        Ok(Self {
            video_embeddings: video,
            text_embeddings_prompted: prompted,
            text_embeddings_bypass: bypass,
        })
    }

    pub fn len(&self) -> usize {
        self.video_embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
