//! Synthetic video/fMRI world with a known ground-truth encoding model.
//!
//! Stimuli are single colored shapes translating across a black frame, one
//! shape class per object category. Voxel responses are a fixed linear map of
//! renderer features plus Gaussian noise, acquired with a hemodynamic delay:
//! the response to clip `i` lands in acquisition window `i + delay`, and
//! clips whose responses fall outside the recording are dropped rather than
//! zero-padded.

use crate::error::{Error, Result};
use crate::seeding;
use crate::tensor::{load_f64, TensorContainer};
use ndarray::{Array1, Array2, Array4, ArrayD, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CLASS_NAMES: [&str; 8] = [
    "jellyfish", "person", "airplane", "turtle", "moon", "fish", "car", "building",
];

const CLASS_COLORS: [[f64; 3]; 8] = [
    [0.90, 0.30, 0.80], // jellyfish
    [0.20, 0.60, 0.90], // person
    [0.85, 0.90, 0.95], // airplane
    [0.20, 0.80, 0.30], // turtle
    [0.95, 0.95, 0.55], // moon
    [0.90, 0.50, 0.15], // fish
    [0.80, 0.15, 0.15], // car
    [0.55, 0.50, 0.60], // building
];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub n_classes: usize,
    pub frame_size: usize,
    pub clip_seconds: f64,
    pub train_fps: u32,
    pub infer_fps: u32,
    pub n_voxels: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_classes: 8,
            frame_size: 64,
            clip_seconds: 2.0,
            train_fps: 3,
            infer_fps: 8,
            n_voxels: 2048,
            noise_sigma: 0.25,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_classes > CLASS_NAMES.len() {
            return Err(Error::invalid(format!(
                "n_classes must be in 2..={}, got {}",
                CLASS_NAMES.len(),
                self.n_classes
            )));
        }
        for (fps, what) in [(self.train_fps, "train_fps"), (self.infer_fps, "infer_fps")] {
            let frames = fps as f64 * self.clip_seconds;
            if frames.fract() != 0.0 || frames < 1.0 {
                return Err(Error::invalid(format!(
                    "{what} x clip_seconds must be a positive integer, got {frames}"
                )));
            }
        }
        if self.frame_size < 16 {
            return Err(Error::invalid("frame_size must be at least 16"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::invalid("noise_sigma must be non-negative"));
        }
        Ok(())
    }

    /// Frames retained per clip at the training rate (N_f).
    pub fn n_frames_train(&self) -> usize {
        (self.train_fps as f64 * self.clip_seconds) as usize
    }

    pub fn n_frames_infer(&self) -> usize {
        (self.infer_fps as f64 * self.clip_seconds) as usize
    }

    pub fn feature_dim(&self) -> usize {
        // class one-hot + (start, velocity) + three frame centroids + reserved index
        self.n_classes + 4 + 6 + 1
    }
}

/// Object trajectory in unit frame coordinates: position(t) = start + velocity * t.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MotionParams {
    pub start: [f64; 2],
    pub velocity: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct VideoClip {
    /// `[n_frames, h, w, 3]`, values in [0, 1].
    pub frames: Array4<f64>,
    pub fps: u32,
    pub class_id: usize,
    pub motion: MotionParams,
}

impl VideoClip {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

#[derive(Debug, Clone)]
pub struct FmriSample {
    pub voxels: Array1<f64>,
    pub subject_id: u32,
    pub clip_index: usize,
    pub repeat_count: u32,
}

/// Fixed linear map from renderer features to voxel space. A quarter of the
/// voxels have an all-zero column and respond with pure noise; those are the
/// "inactive" voxels that the weight-export checks lean on.
#[derive(Debug, Clone)]
pub struct GroundTruthEncoder {
    /// `[feature_dim, n_voxels]`
    pub w_true: Array2<f64>,
    pub delay_samples: usize,
    pub active: Vec<bool>,
}

impl GroundTruthEncoder {
    pub fn from_world(world: &WorldSpec) -> Self {
        let f = world.feature_dim();
        let v = world.n_voxels;
        let mut rng = seeding::stream(world.seed, "w_true", 0);
        let scale = 1.0 / (f as f64).sqrt();
        let mut w = Array2::from_shape_simple_fn((f, v), || seeding::normal(&mut rng) * scale);
        let mut mask_rng = seeding::stream(world.seed, "w_true_inactive", 0);
        let mut active = vec![true; v];
        for (vi, a) in active.iter_mut().enumerate() {
            if mask_rng.random::<f64>() < 0.25 {
                *a = false;
                w.column_mut(vi).fill(0.0);
            }
        }
        GroundTruthEncoder {
            w_true: w,
            delay_samples: 2,
            active,
        }
    }

    /// Noise-free linear response to a feature vector.
    pub fn encode_features(&self, features: &Array1<f64>) -> Result<Array1<f64>> {
        if features.len() != self.w_true.shape()[0] {
            return Err(Error::ContractViolation(format!(
                "feature dimension {} does not match encoder ({})",
                features.len(),
                self.w_true.shape()[0]
            )));
        }
        Ok(self.w_true.t().dot(features))
    }
}

// ---- rendering ----

/// Signed distance to the class shape, centered at the origin, in pixels.
/// All shapes are even-symmetric so the luminance centroid tracks position.
fn shape_sdf(class_id: usize, px: f64, py: f64, r: f64) -> f64 {
    let ax = px.abs();
    let ay = py.abs();
    match class_id {
        // disk
        0 => (px * px + py * py).sqrt() - r,
        // vertical bar
        1 => (ax - 0.45 * r).max(ay - 1.3 * r),
        // horizontal bar
        2 => (ax - 1.3 * r).max(ay - 0.45 * r),
        // square
        3 => ax.max(ay) - 0.9 * r,
        // ring
        4 => ((px * px + py * py).sqrt() - 0.95 * r).abs() - 0.35 * r,
        // diamond
        5 => (ax + ay) - 1.25 * r,
        // plus
        6 => (ax - 0.4 * r).max(ay - 1.2 * r).min((ax - 1.2 * r).max(ay - 0.4 * r)),
        // hollow square
        7 => ((ax.max(ay)) - 0.85 * r).abs() - 0.3 * r,
        _ => unreachable!("class id validated by caller"),
    }
}

/// Render one clip at the requested frame rate. Deterministic in all inputs.
pub fn render_clip(
    class_id: usize,
    motion: MotionParams,
    world: &WorldSpec,
    fps: u32,
) -> Result<VideoClip> {
    if class_id >= world.n_classes {
        return Err(Error::invalid(format!(
            "class id {class_id} out of range (n_classes {})",
            world.n_classes
        )));
    }
    let n_frames = (fps as f64 * world.clip_seconds) as usize;
    let size = world.frame_size;
    let radius = 0.11 * size as f64;
    let edge = 1.5; // soft-edge width in pixels
    let color = CLASS_COLORS[class_id];
    let mut frames = Array4::<f64>::zeros((n_frames, size, size, 3));
    for t in 0..n_frames {
        let time = t as f64 / fps as f64;
        let cx = (motion.start[0] + motion.velocity[0] * time) * (size - 1) as f64;
        let cy = (motion.start[1] + motion.velocity[1] * time) * (size - 1) as f64;
        for y in 0..size {
            for x in 0..size {
                let d = shape_sdf(class_id, x as f64 - cx, y as f64 - cy, radius);
                let alpha = (0.5 - d / edge).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    for ch in 0..3 {
                        frames[[t, y, x, ch]] = (alpha * color[ch]).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(VideoClip {
        frames,
        fps,
        class_id,
        motion,
    })
}

/// Keep every k-th frame, `k = source_fps / target_fps`, starting at frame 0.
pub fn downsample_frames(clip: &VideoClip, target_fps: u32) -> Result<VideoClip> {
    if target_fps == 0 || clip.fps % target_fps != 0 {
        return Err(Error::invalid(format!(
            "source fps {} not divisible by target fps {target_fps}",
            clip.fps
        )));
    }
    let k = (clip.fps / target_fps) as usize;
    let idx: Vec<usize> = (0..clip.n_frames()).step_by(k).collect();
    let frames = clip.frames.select(Axis(0), &idx);
    Ok(VideoClip {
        frames,
        fps: target_fps,
        class_id: clip.class_id,
        motion: clip.motion,
    })
}

/// Luminance centroid of a frame in unit coordinates; (0.5, 0.5) for an
/// all-black frame.
fn frame_centroid(frame: ndarray::ArrayView3<f64>) -> [f64; 2] {
    let (h, w, _) = frame.dim();
    let mut mass = 0.0;
    let mut mx = 0.0;
    let mut my = 0.0;
    for y in 0..h {
        for x in 0..w {
            let lum = (frame[[y, x, 0]] + frame[[y, x, 1]] + frame[[y, x, 2]]) / 3.0;
            mass += lum;
            mx += lum * x as f64;
            my += lum * y as f64;
        }
    }
    if mass <= 1e-12 {
        return [0.5, 0.5];
    }
    [mx / mass / (w - 1) as f64, my / mass / (h - 1) as f64]
}

/// Renderer features: class one-hot, trajectory parameters, luminance
/// centroids of the first/middle/last frame, and a reserved slot carrying the
/// stimulus sequence index (used to audit delay bookkeeping).
pub fn clip_features(clip: &VideoClip, world: &WorldSpec, reserved_index: usize) -> Array1<f64> {
    let mut f = Array1::<f64>::zeros(world.feature_dim());
    f[clip.class_id] = 1.0;
    let base = world.n_classes;
    f[base] = clip.motion.start[0];
    f[base + 1] = clip.motion.start[1];
    f[base + 2] = clip.motion.velocity[0];
    f[base + 3] = clip.motion.velocity[1];
    let n = clip.n_frames();
    for (slot, t) in [(0usize, 0usize), (1, n / 2), (2, n - 1)] {
        let c = frame_centroid(clip.frames.index_axis(Axis(0), t));
        f[base + 4 + 2 * slot] = c[0];
        f[base + 4 + 2 * slot + 1] = c[1];
    }
    f[base + 10] = reserved_index as f64 / 1024.0;
    f
}

/// One noisy voxel acquisition for a clip.
pub fn simulate_fmri(
    clip: &VideoClip,
    enc: &GroundTruthEncoder,
    world: &WorldSpec,
    noise_sigma: f64,
    reserved_index: usize,
    rng: &mut ChaCha8Rng,
) -> Result<FmriSample> {
    let features = clip_features(clip, world, reserved_index);
    let mut voxels = enc.encode_features(&features)?;
    if noise_sigma > 0.0 {
        for v in voxels.iter_mut() {
            *v += noise_sigma * seeding::normal(rng);
        }
    }
    Ok(FmriSample {
        voxels,
        subject_id: 1,
        clip_index: reserved_index,
        repeat_count: 1,
    })
}

// ---- dataset persistence ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: String,
    pub n_samples: usize,
    pub world: WorldSpec,
    pub seed: u64,
    pub delay_samples: usize,
    pub repeats: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelsFile {
    pub class_names: Vec<String>,
    pub labels: Vec<usize>,
    /// Acquisition window index each stored fMRI vector came from.
    pub acquisition_indices: Vec<usize>,
}

fn sample_motion(rng: &mut ChaCha8Rng, clip_seconds: f64) -> MotionParams {
    let margin = 0.22;
    let range = 1.0 - 2.0 * margin;
    let sx = margin + rng.random::<f64>() * range;
    let sy = margin + rng.random::<f64>() * range;
    let ex = margin + rng.random::<f64>() * range;
    let ey = margin + rng.random::<f64>() * range;
    MotionParams {
        start: [sx, sy],
        velocity: [(ex - sx) / clip_seconds, (ey - sy) / clip_seconds],
    }
}

/// Draw the (class, motion) content of stimulus clip `i` for a split.
pub fn clip_params(world: &WorldSpec, split: &str, i: usize) -> (usize, MotionParams) {
    let mut rng = seeding::stream(world.seed, &format!("clip/{split}"), i as u64);
    let class_id = rng.random_range(0..world.n_classes);
    let motion = sample_motion(&mut rng, world.clip_seconds);
    (class_id, motion)
}

fn averaged_fmri(
    clip: &VideoClip,
    enc: &GroundTruthEncoder,
    world: &WorldSpec,
    split: &str,
    i: usize,
    repeats: u32,
) -> Result<FmriSample> {
    let mut acc = Array1::<f64>::zeros(world.n_voxels);
    for r in 0..repeats {
        let mut rng = seeding::stream(
            world.seed,
            &format!("fmri/{split}/{i}"),
            r as u64,
        );
        let s = simulate_fmri(clip, enc, world, world.noise_sigma, i, &mut rng)?;
        acc += &s.voxels;
    }
    acc /= repeats as f64;
    Ok(FmriSample {
        voxels: acc,
        subject_id: 1,
        clip_index: i,
        repeat_count: repeats,
    })
}

fn write_split(
    dir: &Path,
    world: &WorldSpec,
    enc: &GroundTruthEncoder,
    split: &str,
    n: usize,
    repeats: u32,
) -> Result<()> {
    let clips_dir = dir.join("clips");
    let fmri_dir = dir.join("fmri");
    std::fs::create_dir_all(&clips_dir).map_err(|e| Error::io(&clips_dir, e))?;
    std::fs::create_dir_all(&fmri_dir).map_err(|e| Error::io(&fmri_dir, e))?;

    let delay = enc.delay_samples;
    let mut labels = Vec::with_capacity(n);
    let mut acq = Vec::with_capacity(n);
    // Stimulus clips i = 0..n+delay-1 play back to back; acquisition window
    // j records the response to clip j - delay. Only clips whose responses
    // land inside the recording become pairs, so the final `delay` clips are
    // shown but dropped.
    for i in 0..n {
        let (class_id, motion) = clip_params(world, split, i);
        let clip = render_clip(class_id, motion, world, world.train_fps)?;
        let fmri = averaged_fmri(&clip, enc, world, split, i, repeats)?;
        TensorContainer::from_f64_as_f32(&clip.frames.clone().into_dyn())
            .save(&clips_dir.join(format!("{i}.tns")))?;
        TensorContainer::from_f64_as_f32(&fmri.voxels.clone().into_dyn())
            .save(&fmri_dir.join(format!("{i}.tns")))?;
        labels.push(class_id);
        acq.push(i + delay);
    }
    // Tail clips exist as stimuli but have no recorded response.
    for i in n..n + delay {
        let _ = clip_params(world, split, i);
    }

    let manifest = SplitManifest {
        split: split.to_string(),
        n_samples: n,
        world: world.clone(),
        seed: world.seed,
        delay_samples: delay,
        repeats,
    };
    let mpath = dir.join("manifest.json");
    std::fs::write(
        &mpath,
        serde_json::to_string_pretty(&manifest).expect("serializable"),
    )
    .map_err(|e| Error::io(&mpath, e))?;
    let labels_file = LabelsFile {
        class_names: CLASS_NAMES[..world.n_classes]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        labels,
        acquisition_indices: acq,
    };
    let lpath = dir.join("labels.json");
    std::fs::write(
        &lpath,
        serde_json::to_string_pretty(&labels_file).expect("serializable"),
    )
    .map_err(|e| Error::io(&lpath, e))?;
    Ok(())
}

/// Generate and persist the train/test splits under `root/train` and
/// `root/test`. Train fMRI averages 2 noisy repeats, test averages
/// `test_repeats`.
pub fn make_dataset(
    world: &WorldSpec,
    n_train: usize,
    n_test: usize,
    test_repeats: u32,
    root: &Path,
) -> Result<()> {
    if n_train < 1 || n_test < 1 {
        return Err(Error::invalid("dataset split counts must be at least 1"));
    }
    world.validate()?;
    let enc = GroundTruthEncoder::from_world(world);
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_split(&root.join("train"), world, &enc, "train", n_train, 2)?;
    write_split(&root.join("test"), world, &enc, "test", n_test, test_repeats)?;
    Ok(())
}

/// Handle to one persisted split; tensors load on demand.
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: SplitManifest,
    pub labels: LabelsFile,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let mtext = std::fs::read_to_string(&mpath).map_err(|_| Error::NotReady {
            stage: format!("dataset manifest {}", mpath.display()),
        })?;
        let manifest: SplitManifest =
            serde_json::from_str(&mtext).map_err(|e| Error::CorruptFile {
                path: mpath.clone(),
                reason: e.to_string(),
            })?;
        let lpath = dir.join("labels.json");
        let ltext = std::fs::read_to_string(&lpath).map_err(|e| Error::io(&lpath, e))?;
        let labels: LabelsFile = serde_json::from_str(&ltext).map_err(|e| Error::CorruptFile {
            path: lpath.clone(),
            reason: e.to_string(),
        })?;
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.n_samples
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load_clip_frames(&self, i: usize) -> Result<ArrayD<f64>> {
        load_f64(&self.dir.join(format!("clips/{i}.tns")))
    }

    pub fn load_fmri(&self, i: usize) -> Result<Array1<f64>> {
        let arr = load_f64(&self.dir.join(format!("fmri/{i}.tns")))?;
        Ok(arr
            .into_dimensionality::<ndarray::Ix1>()
            .map_err(|_| Error::CorruptFile {
                path: self.dir.join(format!("fmri/{i}.tns")),
                reason: "fmri tensor is not 1-d".into(),
            })?)
    }
}
