use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frame counts the video tower is built for.
pub const SUPPORTED_FRAME_COUNTS: [usize; 2] = [8, 16];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Shared embedding dimension `d`.
    pub embed_dim: usize,
    pub encoder_width: usize,
    pub text_vocab_size: usize,
    pub max_text_len: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub vision_layers: usize,
    pub text_layers: usize,
    pub mit_layers: usize,
    pub prompt_decoder_layers: usize,
    pub attention_heads: usize,
    /// Hidden width of every feed-forward block, as a multiple of `encoder_width`.
    pub mlp_ratio: usize,
    pub frames_per_clip: usize,
    pub rng_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            encoder_width: 64,
            text_vocab_size: 256,
            max_text_len: 32,
            frame_height: 32,
            frame_width: 32,
            channels: 3,
            patch_size: 8,
            vision_layers: 4,
            text_layers: 4,
            mit_layers: 1,
            prompt_decoder_layers: 2,
            attention_heads: 4,
            mlp_ratio: 4,
            frames_per_clip: 8,
            rng_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Full validation, including the supported frame counts.
    pub fn validate(&self) -> Result<()> {
        self.validate_shapes()?;
        if !SUPPORTED_FRAME_COUNTS.contains(&self.frames_per_clip) {
            return Err(Error::Config(format!(
                "frames_per_clip must be one of {SUPPORTED_FRAME_COUNTS:?}, got {}",
                self.frames_per_clip
            )));
        }
        Ok(())
    }

    /// Shape consistency only; any positive frame count is accepted.
    pub fn validate_shapes(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("encoder_width", self.encoder_width),
            ("text_vocab_size", self.text_vocab_size),
            ("max_text_len", self.max_text_len),
            ("frame_height", self.frame_height),
            ("frame_width", self.frame_width),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("vision_layers", self.vision_layers),
            ("text_layers", self.text_layers),
            ("attention_heads", self.attention_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("frames_per_clip", self.frames_per_clip),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.frame_height % self.patch_size != 0 || self.frame_width % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "frame {}x{} not divisible by patch_size {}",
                self.frame_height, self.frame_width, self.patch_size
            )));
        }
        if self.encoder_width % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "encoder_width {} not divisible by attention_heads {}",
                self.encoder_width, self.attention_heads
            )));
        }
        Ok(())
    }

    pub fn patches_per_frame(&self) -> usize {
        (self.frame_height / self.patch_size) * (self.frame_width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_width(&self) -> usize {
        self.encoder_width * self.mlp_ratio
    }

    pub fn frame_len(&self) -> usize {
        self.frame_height * self.frame_width * self.channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
        assert_eq!(ModelConfig::default().patches_per_frame(), 16);
    }

    #[test]
    fn rejects_bad_patch_heads_and_frames() {
        let bad_patch = ModelConfig {
            patch_size: 5,
            ..Default::default()
        };
        assert!(matches!(bad_patch.validate(), Err(Error::Config(_))));
        let bad_heads = ModelConfig {
            attention_heads: 3,
            ..Default::default()
        };
        assert!(bad_heads.validate().is_err());
        let four = ModelConfig {
            frames_per_clip: 4,
            ..Default::default()
        };
        assert!(four.validate().is_err());
        four.validate_shapes().unwrap();
    }
}
