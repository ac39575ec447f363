//! Synthetic videos with a recognizable arrow of time, keyframe extraction,
//! and the dataset file format.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};

const DATASET_MAGIC: &[u8; 8] = b"BDIFDSET";

/// Background level of every generator, in `[0, 1]` units.
pub const BACKGROUND: f32 = 0.05;

/// Registered motion laws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MotionLaw {
    /// Disc starting at rest, constant acceleration, brightening over time.
    AccelBall,
    /// Square moving at constant velocity while shrinking 3% per frame,
    /// anchored at its top-left corner.
    ShrinkSlide,
}

impl MotionLaw {
    pub const ALL: [MotionLaw; 2] = [MotionLaw::AccelBall, MotionLaw::ShrinkSlide];

    pub fn name(self) -> &'static str {
        match self {
            MotionLaw::AccelBall => "accel_ball",
            MotionLaw::ShrinkSlide => "shrink_slide",
        }
    }
}

impl fmt::Display for MotionLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MotionLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown generator '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub generator: String,
    pub seed: u64,
    /// Motion parameters drawn by the generator (or sampler settings for
    /// generated clips).
    pub params: BTreeMap<String, f64>,
}

impl ClipMeta {
    pub fn new(generator: impl Into<String>, seed: u64) -> Self {
        Self {
            generator: generator.into(),
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> String {
        format!("{}/{}", self.generator, self.seed)
    }
}

/// An `N`-frame clip, `[N, C, H, W]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Array4<f32>,
    pub meta: ClipMeta,
}

impl VideoClip {
    pub fn new(frames: Array4<f32>, meta: ClipMeta) -> Result<Self> {
        if frames.dim().0 < 2 {
            return Err(Error::Argument(format!(
                "a clip needs at least 2 frames, got {}",
                frames.dim().0
            )));
        }
        if let Some(bad) = frames.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            frames: frames.as_standard_layout().into_owned(),
            meta,
        })
    }

    pub fn frames(&self) -> &Array4<f32> {
        &self.frames
    }

    pub fn into_frames(self) -> Array4<f32> {
        self.frames
    }

    pub fn frame(&self, n: usize) -> Array3<f32> {
        self.frames.index_axis(Axis(0), n).to_owned()
    }

    pub fn frame_count(&self) -> usize {
        self.frames.dim().0
    }

    /// `(N, C, H, W)`
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.frames.dim()
    }

    /// Same clip with frame order reversed.
    pub fn reversed(&self) -> Self {
        Self {
            frames: crate::temporal::flip_time(&self.frames, 0).expect("axis 0 exists"),
            meta: self.meta.clone(),
        }
    }
}

/// Pixel `[0, 1]` to latent `[-1, 1]` (the identity codec).
pub fn encode(pixels: &Array4<f32>) -> Array4<f32> {
    pixels.mapv(|v| 2.0 * v - 1.0)
}

pub fn encode_frame(pixels: &Array3<f32>) -> Array3<f32> {
    pixels.mapv(|v| 2.0 * v - 1.0)
}

/// Latent to pixels, clamped to `[0, 1]`.
pub fn decode(latent: &Array4<f32>) -> Array4<f32> {
    latent.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframePair {
    pub first: Array3<f32>,
    pub last: Array3<f32>,
    /// Number of frames strictly between the two keyframes.
    pub gap: usize,
    pub source_clip_id: Option<String>,
}

impl KeyframePair {
    pub fn new(first: Array3<f32>, last: Array3<f32>, gap: usize) -> Result<Self> {
        if first.dim() != last.dim() {
            return Err(Error::shape(first.shape(), last.shape()));
        }
        Ok(Self {
            first,
            last,
            gap,
            source_clip_id: None,
        })
    }
}

pub fn extract_keyframes(clip: &VideoClip) -> KeyframePair {
    let n = clip.frame_count();
    KeyframePair {
        first: clip.frame(0),
        last: clip.frame(n - 1),
        gap: n - 2,
        source_clip_id: Some(clip.meta.id()),
    }
}

/// Fraction of the pixel `[px, px+1] x [py, py+1]` covered by a disc, using a
/// one-pixel linear ramp across the boundary.
fn disc_coverage(px: usize, py: usize, cx: f64, cy: f64, r: f64) -> f64 {
    let dx = px as f64 + 0.5 - cx;
    let dy = py as f64 + 0.5 - cy;
    (r + 0.5 - (dx * dx + dy * dy).sqrt()).clamp(0.0, 1.0)
}

fn interval_overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

fn paint(frame: &mut ndarray::ArrayViewMut3<f32>, color: &[f64; 3], coverage: impl Fn(usize, usize) -> f64) {
    let (_, h, w) = frame.dim();
    for y in 0..h {
        for x in 0..w {
            let cov = coverage(x, y);
            if cov <= 0.0 {
                continue;
            }
            for (c, &col) in color.iter().enumerate() {
                let bg = BACKGROUND as f64;
                frame[[c, y, x]] = (bg + (col - bg) * cov) as f32;
            }
        }
    }
}

/// Renders one synthetic clip. Pure function of its arguments.
pub fn generate_clip(law: MotionLaw, seed: u64, frames: usize, height: usize, width: usize) -> Result<VideoClip> {
    if frames < 2 {
        return Err(Error::Argument(format!("need at least 2 frames, got {frames}")));
    }
    if height < 8 || width < 8 {
        return Err(Error::Argument(format!("frame size {height}x{width} too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = height.min(width) as f64;
    let scale = size / 32.0;
    let last = (frames - 1) as f64;
    let mut meta = ClipMeta::new(law.name(), seed);
    let mut video = Array4::<f32>::from_elem((frames, 3, height, width), BACKGROUND);

    match law {
        MotionLaw::AccelBall => {
            let radius = rng.random_range(2.5..3.5) * scale;
            let angle = rng.random_range(-std::f64::consts::FRAC_PI_4..std::f64::consts::FRAC_PI_4);
            let travel = rng.random_range(0.35..0.5) * size;
            let color = [
                rng.random_range(0.85..1.0),
                rng.random_range(0.85..1.0),
                rng.random_range(0.85..1.0),
            ];
            let (ux, uy) = (angle.cos(), angle.sin());
            let margin = radius + 1.0;
            let (tx, ty) = (travel * ux, travel * uy);
            let x0 = rng.random_range(margin..(width as f64 - margin - tx));
            let y_lo = margin - ty.min(0.0);
            let y_hi = height as f64 - margin - ty.max(0.0);
            let y0 = rng.random_range(y_lo..y_hi);
            let accel = 2.0 * travel / (last * last);
            for n in 0..frames {
                let d = 0.5 * accel * (n * n) as f64;
                let (cx, cy) = (x0 + d * ux, y0 + d * uy);
                let brightness = 0.6 + 0.4 * n as f64 / last;
                let col = color.map(|c| c * brightness);
                let mut f = video.index_axis_mut(Axis(0), n);
                paint(&mut f, &col, |x, y| disc_coverage(x, y, cx, cy, radius));
            }
            meta.params.extend([
                ("radius".to_string(), radius),
                ("angle".to_string(), angle),
                ("travel".to_string(), travel),
                ("acceleration".to_string(), accel),
                ("x0".to_string(), x0),
                ("y0".to_string(), y0),
            ]);
        }
        MotionLaw::ShrinkSlide => {
            let side0 = rng.random_range(8.0..11.0) * scale;
            let angle = rng.random_range(-std::f64::consts::FRAC_PI_4..std::f64::consts::FRAC_PI_4);
            let travel = rng.random_range(0.25..0.4) * size;
            let color = [
                rng.random_range(0.75..0.95),
                rng.random_range(0.75..0.95),
                rng.random_range(0.75..0.95),
            ];
            let (ux, uy) = (angle.cos(), angle.sin());
            let (tx, ty) = (travel * ux, travel * uy);
            let x0 = rng.random_range(1.0..(width as f64 - 1.0 - side0 - tx));
            let y_lo = 1.0 - ty.min(0.0);
            let y_hi = height as f64 - 1.0 - side0 - ty.max(0.0);
            let y0 = rng.random_range(y_lo..y_hi);
            for n in 0..frames {
                let side = side0 * 0.97f64.powi(n as i32);
                let (ax, ay) = (x0 + tx * n as f64 / last, y0 + ty * n as f64 / last);
                let mut f = video.index_axis_mut(Axis(0), n);
                paint(&mut f, &color, |x, y| {
                    interval_overlap(x as f64, x as f64 + 1.0, ax, ax + side)
                        * interval_overlap(y as f64, y as f64 + 1.0, ay, ay + side)
                });
            }
            meta.params.extend([
                ("side".to_string(), side0),
                ("angle".to_string(), angle),
                ("travel".to_string(), travel),
                ("x0".to_string(), x0),
                ("y0".to_string(), y0),
            ]);
        }
    }
    VideoClip::new(video, meta)
}

/// Generates `count` clips with seeds `base_seed, base_seed + 1, ...`.
pub fn generate_dataset(
    law: MotionLaw,
    count: usize,
    base_seed: u64,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<Vec<VideoClip>> {
    (0..count as u64)
        .map(|i| generate_clip(law, base_seed.wrapping_add(i), frames, height, width))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    count: usize,
    frames: usize,
    channels: usize,
    height: usize,
    width: usize,
    clips: Vec<ClipMeta>,
}

pub fn save_dataset(clips: &[VideoClip], path: &Path) -> Result<()> {
    let shape = clips.first().map(|c| c.shape()).unwrap_or((0, 0, 0, 0));
    if let Some(bad) = clips.iter().find(|c| c.shape() != shape) {
        let (n, c, h, w) = bad.shape();
        return Err(Error::shape(&[shape.0, shape.1, shape.2, shape.3], &[n, c, h, w]));
    }
    let manifest = DatasetManifest {
        format: "bidiff-dataset".into(),
        count: clips.len(),
        frames: shape.0,
        channels: shape.1,
        height: shape.2,
        width: shape.3,
        clips: clips.iter().map(|c| c.meta.clone()).collect(),
    };
    let total = clips.iter().map(|c| c.frames.len()).sum();
    let payload = clips.iter().flat_map(|c| c.frames.iter().copied());
    container::write(path, DATASET_MAGIC, &manifest, payload, total)
}

pub fn load_dataset(path: &Path) -> Result<Vec<VideoClip>> {
    let (m, values): (DatasetManifest, _) = container::read(path, DATASET_MAGIC)?;
    if m.clips.len() != m.count {
        return Err(Error::corrupt(path, "manifest clip list disagrees with count"));
    }
    let per_clip = m.frames * m.channels * m.height * m.width;
    if values.len() != per_clip * m.count {
        return Err(Error::corrupt(
            path,
            format!(
                "payload holds {} values, shape needs {}",
                values.len(),
                per_clip * m.count
            ),
        ));
    }
    m.clips
        .into_iter()
        .enumerate()
        .map(|(i, meta)| {
            let frames = Array4::from_shape_vec(
                (m.frames, m.channels, m.height, m.width),
                values[i * per_clip..(i + 1) * per_clip].to_vec(),
            )
            .expect("length checked");
            VideoClip::new(frames, meta).map_err(|e| Error::corrupt(path, e.to_string()))
        })
        .collect()
}

/// Splits frames `[N, C, H, W]` into a clip whose frame 0 and N−1 are the
/// given keyframes; used to store keyframe pairs as two-frame clips.
pub fn pair_as_clip(pair: &KeyframePair, meta: ClipMeta) -> Result<VideoClip> {
    let (c, h, w) = pair.first.dim();
    let mut frames = Array4::zeros((2, c, h, w));
    frames.slice_mut(s![0, .., .., ..]).assign(&pair.first);
    frames.slice_mut(s![1, .., .., ..]).assign(&pair.last);
    let mut meta = meta;
    meta.params.insert("gap".into(), pair.gap as f64);
    VideoClip::new(frames, meta)
}

/// Inverse of [`pair_as_clip`].
pub fn clip_as_pair(clip: &VideoClip) -> KeyframePair {
    let mut pair = extract_keyframes(clip);
    if let Some(&gap) = clip.meta.params.get("gap") {
        pair.gap = gap as usize;
    }
    pair
}
