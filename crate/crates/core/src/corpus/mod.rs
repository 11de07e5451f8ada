//! Clip extraction, pair manifests and the synthetic corpus generator.

mod manifest;
mod synthetic;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClipTensor, ModelConfig, SUPPORTED_FRAME_COUNTS};

pub use manifest::{
    check_split_hygiene, parse_manifest, read_manifest, render_manifest, write_manifest, ManifestRecord, Split,
    SCHEMA_VERSION,
};
pub use synthetic::{
    generate_synthetic, write_synthetic, Archetype, SyntheticCorpus, SyntheticSpec, ARCHETYPES,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoAsset {
    pub id: String,
    pub path: PathBuf,
    pub fps: f64,
    pub duration: f64,
    pub total_frames: usize,
}

impl VideoAsset {
    pub fn validate(&self) -> Result<()> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Input(format!("{}: fps must be positive, got {}", self.id, self.fps)));
        }
        if !(self.duration.is_finite() && self.duration >= 0.0) {
            return Err(Error::Input(format!("{}: bad duration {}", self.id, self.duration)));
        }
        let implied = self.duration * self.fps;
        if (implied - self.total_frames as f64).abs() > 1.0 {
            return Err(Error::Input(format!(
                "{}: duration × fps = {implied:.2} but {} frames",
                self.id, self.total_frames
            )));
        }
        Ok(())
    }
}

/// Picks `n` frames from the segment `[t_init, t_end]` at the centre of `n`
/// equal strides.
pub fn sample_frame_indices(total_frames: usize, t_init: f64, t_end: f64, fps: f64, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Input("cannot sample zero frames".into()));
    }
    if !(t_init.is_finite() && t_end.is_finite() && fps.is_finite() && fps > 0.0) {
        return Err(Error::Input(format!("bad segment [{t_init}, {t_end}] at {fps} fps")));
    }
    if t_init < 0.0 || t_end < t_init {
        return Err(Error::Input(format!("segment [{t_init}, {t_end}] is empty or negative")));
    }
    let first = ((t_init * fps).floor() as usize).min(total_frames);
    let end = ((t_end * fps).ceil() as usize).min(total_frames);
    let r = end.saturating_sub(first);
    if r < n {
        return Err(Error::Input(format!(
            "segment [{t_init}, {t_end}] covers {r} frames, need {n}"
        )));
    }
    Ok((0..n).map(|k| first + ((2 * k + 1) * r) / (2 * n)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub video_id: String,
    pub t_init: f64,
    pub t_end: f64,
    pub n_frames: usize,
    pub frame_indices: Vec<usize>,
}

impl ClipSpec {
    pub fn resolve(asset: &VideoAsset, t_init: f64, t_end: f64, n_frames: usize) -> Result<Self> {
        if !SUPPORTED_FRAME_COUNTS.contains(&n_frames) {
            return Err(Error::Input(format!("clips have 8 or 16 frames, got {n_frames}")));
        }
        let frame_indices = sample_frame_indices(asset.total_frames, t_init, t_end, asset.fps, n_frames)?;
        Ok(Self {
            video_id: asset.id.clone(),
            t_init,
            t_end,
            n_frames,
            frame_indices,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_indices.len() != self.n_frames {
            return Err(Error::Input(format!(
                "{} frame indices for n_frames = {}",
                self.frame_indices.len(),
                self.n_frames
            )));
        }
        if let Some(w) = self.frame_indices.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Input(format!(
                "frame indices not strictly increasing at {} → {}",
                w[0], w[1]
            )));
        }
        Ok(())
    }

    /// Stable id: video id plus first and last sampled frame.
    pub fn clip_id(&self) -> String {
        let first = self.frame_indices.first().copied().unwrap_or(0);
        let last = self.frame_indices.last().copied().unwrap_or(0);
        format!("{}-{first}-{last}", self.video_id)
    }
}

/// Where decoded frames come from. Implement this to plug in a real container decoder.
pub trait FrameSource: Send + Sync {
    fn frame_count(&self, video_id: &str) -> Result<usize>;
    fn frame(&self, video_id: &str, index: usize) -> Result<RgbImage>;
}

/// Frames kept in memory, keyed by video id.
#[derive(Clone, Debug, Default)]
pub struct MemorySource {
    videos: BTreeMap<String, Vec<RgbImage>>,
}

impl MemorySource {
    pub fn insert(&mut self, video_id: impl Into<String>, frames: Vec<RgbImage>) {
        self.videos.insert(video_id.into(), frames);
    }

    pub fn video_ids(&self) -> impl Iterator<Item = &str> {
        self.videos.keys().map(String::as_str)
    }

    pub fn frames(&self, video_id: &str) -> Option<&[RgbImage]> {
        self.videos.get(video_id).map(Vec::as_slice)
    }
}

impl FrameSource for MemorySource {
    fn frame_count(&self, video_id: &str) -> Result<usize> {
        self.frames(video_id)
            .map(<[_]>::len)
            .ok_or_else(|| Error::Input(format!("unknown video {video_id:?}")))
    }

    fn frame(&self, video_id: &str, index: usize) -> Result<RgbImage> {
        let frames = self
            .frames(video_id)
            .ok_or_else(|| Error::Input(format!("unknown video {video_id:?}")))?;
        frames
            .get(index)
            .cloned()
            .ok_or_else(|| Error::Input(format!("{video_id}: frame index {index} out of range")))
    }
}

/// `root/<video_id>/<index:05>.png`.
#[derive(Clone, Debug)]
pub struct PngSequenceSource {
    root: PathBuf,
}

impl PngSequenceSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn frame_path(&self, video_id: &str, index: usize) -> PathBuf {
        frame_path(&self.root, video_id, index)
    }
}

pub(crate) fn frame_path(root: &Path, video_id: &str, index: usize) -> PathBuf {
    root.join(video_id).join(format!("{index:05}.png"))
}

impl FrameSource for PngSequenceSource {
    fn frame_count(&self, video_id: &str) -> Result<usize> {
        let dir = self.root.join(video_id);
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut n = 0;
        for e in entries {
            let e = e.map_err(|err| Error::io(&dir, err))?;
            if e.path().extension().is_some_and(|x| x == "png") {
                n += 1;
            }
        }
        Ok(n)
    }

    fn frame(&self, video_id: &str, index: usize) -> Result<RgbImage> {
        let path = self.frame_path(video_id, index);
        if !path.exists() {
            return Err(Error::Input(format!("{video_id}: frame index {index} out of range")));
        }
        let img = image::open(&path)
            .map_err(|e| Error::Input(format!("{video_id}: frame index {index} failed to decode: {e}")))?;
        Ok(img.to_rgb8())
    }
}

/// Decodes the sampled frames, resizes them to the model's frame size and
/// scales to `[0, 1]`.
pub fn extract_clip(source: &dyn FrameSource, spec: &ClipSpec, config: &ModelConfig) -> Result<ClipTensor> {
    spec.validate()?;
    let total = source.frame_count(&spec.video_id)?;
    if let Some(&bad) = spec.frame_indices.iter().find(|&&i| i >= total) {
        return Err(Error::Input(format!(
            "{}: frame index {bad} out of range ({total} frames)",
            spec.video_id
        )));
    }
    let (h, w, c) = (config.frame_height, config.frame_width, config.channels);
    if c != 1 && c != 3 {
        return Err(Error::Config(format!("frames have 1 or 3 channels, got {c}")));
    }
    let mut frames = Vec::with_capacity(spec.n_frames);
    for &i in &spec.frame_indices {
        let img = source.frame(&spec.video_id, i)?;
        frames.push(image_to_frame(&img, h, w, c));
    }
    ClipTensor::from_frames(&frames, h, w, c)
}

pub fn image_to_frame(img: &RgbImage, height: usize, width: usize, channels: usize) -> Vec<f32> {
    let resized;
    let img = if img.width() as usize == width && img.height() as usize == height {
        img
    } else {
        resized = image::imageops::resize(img, width as u32, height as u32, FilterType::Triangle);
        &resized
    };
    let mut out = Vec::with_capacity(height * width * channels);
    for p in img.pixels() {
        if channels == 1 {
            let [r, g, b] = p.0;
            out.push((0.299 * r as f32 + 0.587 * g as f32 + 0.114 * b as f32) / 255.0);
        } else {
            out.extend(p.0.iter().map(|&v| v as f32 / 255.0));
        }
    }
    out
}

/// Inverse of [`image_to_frame`] for 3-channel frames; used for montages.
pub fn frame_to_image(frame: &[f32], height: usize, width: usize, channels: usize) -> RgbImage {
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let o = (y as usize * width + x as usize) * channels;
        if channels == 1 {
            let v = q(frame[o]);
            image::Rgb([v, v, v])
        } else {
            image::Rgb([q(frame[o]), q(frame[o + 1]), q(frame[o + 2])])
        }
    })
}

/// Side-by-side strip of every frame of a clip.
pub fn montage(clip: &ClipTensor) -> RgbImage {
    let (h, w, c) = (clip.height(), clip.width(), clip.channels());
    let mut out = RgbImage::new((w * clip.frames()) as u32, h as u32);
    for t in 0..clip.frames() {
        let img = frame_to_image(clip.frame(t), h, w, c);
        image::imageops::replace(&mut out, &img, (t * w) as i64, 0);
    }
    out
}

#[cfg(test)]
mod tests;
