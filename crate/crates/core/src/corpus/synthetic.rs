use std::f64::consts::TAU;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{frame_path, render_manifest, ClipSpec, ManifestRecord, MemorySource, Split, VideoAsset};
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::model::{ClipTensor, ModelConfig, SUPPORTED_FRAME_COUNTS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Archetype {
    /// Word used in captions.
    pub token: &'static str,
    /// Ethogram action the archetype stands in for.
    pub behavior: &'static str,
}

/// Archetype `i` is drawn with colour `i % 2` and motion pattern `(i / 2) % 4`.
pub const ARCHETYPES: [Archetype; 8] = [
    Archetype { token: "hug", behavior: "Hug" },
    Archetype { token: "chase", behavior: "Chase" },
    Archetype { token: "groom", behavior: "Grooming" },
    Archetype { token: "play", behavior: "Play" },
    Archetype { token: "forage", behavior: "Forage" },
    Archetype { token: "rest", behavior: "Rest/Sleep" },
    Archetype { token: "fight", behavior: "Fight" },
    Archetype { token: "walk", behavior: "Move, Walk or Run" },
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub archetypes: usize,
    pub clips_per_archetype: usize,
    /// The last this-many clips of each archetype go to the test split.
    pub test_per_archetype: usize,
    pub frame_size: usize,
    pub frames_per_video: usize,
    pub fps: f64,
    pub n_frames: usize,
    /// Cycles of motion per video.
    pub speed: f64,
    /// Amplitude of per-pixel background noise.
    pub noise: f64,
    /// Each must contain `{name}`.
    pub templates: Vec<String>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            archetypes: 4,
            clips_per_archetype: 8,
            test_per_archetype: 2,
            frame_size: 32,
            frames_per_video: 32,
            fps: 8.0,
            n_frames: 8,
            speed: 1.0,
            noise: 0.1,
            templates: vec![
                "{name} by the monkeys".into(),
                "{name} again".into(),
                "{name} seen here".into(),
                "{name} in the group".into(),
            ],
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.archetypes < 2 || self.archetypes > ARCHETYPES.len() {
            return Err(Error::Config(format!(
                "archetypes must be in 2..={}, got {}",
                ARCHETYPES.len(),
                self.archetypes
            )));
        }
        if self.clips_per_archetype == 0 || self.test_per_archetype > self.clips_per_archetype {
            return Err(Error::Config(format!(
                "{} test clips out of {} per archetype",
                self.test_per_archetype, self.clips_per_archetype
            )));
        }
        if !SUPPORTED_FRAME_COUNTS.contains(&self.n_frames) {
            return Err(Error::Config(format!("n_frames must be 8 or 16, got {}", self.n_frames)));
        }
        if self.frames_per_video < self.n_frames {
            return Err(Error::Config(format!(
                "{} frames per video cannot supply {} samples",
                self.frames_per_video, self.n_frames
            )));
        }
        if self.frame_size < 4 {
            return Err(Error::Config(format!("frame_size {} is too small", self.frame_size)));
        }
        if !(self.fps > 0.0 && self.speed.is_finite() && (0.0..=1.0).contains(&self.noise)) {
            return Err(Error::Config("fps must be positive and noise in [0, 1]".into()));
        }
        if self.templates.is_empty() || self.templates.iter().any(|t| !t.contains("{name}")) {
            return Err(Error::Config("every caption template needs a {name} slot".into()));
        }
        Ok(())
    }

    pub fn total_pairs(&self) -> usize {
        self.archetypes * self.clips_per_archetype
    }
}

pub struct SyntheticCorpus {
    pub assets: Vec<VideoAsset>,
    pub source: MemorySource,
    pub records: Vec<ManifestRecord>,
}

impl SyntheticCorpus {
    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn clips(&self, records: &[&ManifestRecord], config: &ModelConfig) -> Result<Vec<ClipTensor>> {
        records
            .iter()
            .map(|r| super::extract_clip(&self.source, &r.clip(), config))
            .collect()
    }
}

struct Style {
    colour: [f64; 3],
    base: f64,
    phase: f64,
    speed: f64,
    offset: f64,
    flip: bool,
}

fn triangle(x: f64) -> f64 {
    let f = x.rem_euclid(1.0);
    if f < 0.5 {
        2.0 * f
    } else {
        2.0 - 2.0 * f
    }
}

/// Sprite centres in unit coordinates at time `u ∈ [0, 1]`.
fn sprites(pattern: usize, s: &Style, u: f64) -> Vec<(f64, f64)> {
    let w = s.phase + s.speed * u;
    match pattern {
        0 => vec![(0.15 + 0.7 * triangle(w), s.offset)],
        1 => {
            let dy = 0.3 * (TAU * w).sin();
            vec![(0.3, 0.5 + dy), (0.7, 0.5 - dy)]
        }
        2 => vec![(0.5 + 0.3 * (TAU * w).cos(), 0.5 + 0.3 * (TAU * w).sin())],
        _ => {
            let r = 0.35 * (1.0 - triangle(w));
            let sy = if s.flip { -r } else { r };
            vec![(0.5 - r, 0.5 - sy), (0.5 + r, 0.5 + sy)]
        }
    }
}

fn render_video(spec: &SyntheticSpec, archetype: usize, rng: &mut ChaCha8Rng) -> Vec<RgbImage> {
    let warm: [f64; 3] = [0.95, 0.45, 0.1];
    let cool = [0.1, 0.55, 0.95];
    let mut colour = if archetype % 2 == 0 { warm } else { cool };
    for c in &mut colour {
        *c = (*c + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0);
    }
    let style = Style {
        colour,
        base: rng.random_range(0.05..0.15),
        phase: rng.random_range(0.0..1.0),
        speed: spec.speed * rng.random_range(0.8..1.2),
        offset: rng.random_range(0.3..0.7),
        flip: rng.random_bool(0.5),
    };
    let pattern = (archetype / 2) % 4;
    let n = spec.frame_size;
    let half = (n as f64 / 8.0).max(1.0);
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    (0..spec.frames_per_video)
        .map(|f| {
            let u = f as f64 / (spec.frames_per_video.max(2) - 1) as f64;
            let centres: Vec<(f64, f64)> = sprites(pattern, &style, u)
                .into_iter()
                .map(|(x, y)| (x * n as f64, y * n as f64))
                .collect();
            let mut img = RgbImage::new(n as u32, n as u32);
            for (x, y, px) in img.enumerate_pixels_mut() {
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                let hit = centres.iter().any(|&(sx, sy)| (cx - sx).abs() <= half && (cy - sy).abs() <= half);
                *px = if hit {
                    Rgb(style.colour.map(q))
                } else {
                    let v = style.base + spec.noise * rng.random::<f64>();
                    Rgb([q(v), q(v), q(v)])
                };
            }
            img
        })
        .collect()
}

/// Procedural clips, one video per pair, with templated captions naming the archetype.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut source = MemorySource::default();
    let mut assets = Vec::new();
    let mut records = Vec::new();
    for (a, arch) in ARCHETYPES.iter().enumerate().take(spec.archetypes) {
        for k in 0..spec.clips_per_archetype {
            let id = format!("syn-{}-{k:03}", arch.token);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream((a * spec.clips_per_archetype + k) as u64);
            let frames = render_video(spec, a, &mut rng);
            let duration = spec.frames_per_video as f64 / spec.fps;
            let asset = VideoAsset {
                id: id.clone(),
                path: Path::new("frames").join(&id),
                fps: spec.fps,
                duration,
                total_frames: frames.len(),
            };
            let clip = ClipSpec::resolve(&asset, 0.0, duration, spec.n_frames)?;
            let template = &spec.templates[k % spec.templates.len()];
            let split = if k >= spec.clips_per_archetype - spec.test_per_archetype {
                Split::Test
            } else {
                Split::Train
            };
            records.push(ManifestRecord::new(
                clip,
                template.replace("{name}", arch.token),
                vec![arch.behavior.to_string()],
                split,
            ));
            source.insert(id, frames);
            assets.push(asset);
        }
    }
    Ok(SyntheticCorpus {
        assets,
        source,
        records,
    })
}

/// Writes `frames/<id>/<index>.png`, `assets.json` and `manifest.jsonl` under `root`.
pub fn write_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<SyntheticCorpus> {
    let corpus = generate_synthetic(spec)?;
    let frames_root = root.join("frames");
    for asset in &corpus.assets {
        let dir = frames_root.join(&asset.id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, img) in corpus.source.frames(&asset.id).unwrap_or_default().iter().enumerate() {
            img.save(frame_path(&frames_root, &asset.id, i))?;
        }
    }
    write_atomic(&root.join("assets.json"), &serde_json::to_vec_pretty(&corpus.assets)?)?;
    write_atomic(&root.join("manifest.jsonl"), render_manifest(&corpus.records)?.as_bytes())?;
    Ok(corpus)
}
