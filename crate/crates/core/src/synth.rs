//! Synthetic eye sequences with class-specific motion.
//!
//! Each frame is a supersampled rendering of skin, an almond-shaped sclera
//! with an upper lid, an iris and a pupil. Classes differ only in how these
//! move over time: circular gaze in either direction, slow or fast blinks,
//! horizontal or vertical saccades and pupil pulsation. Phase, brightness,
//! eye position and speed are drawn per sequence, so a single frame of the
//! two gaze classes (or of the two blink classes) is statistically identical.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, SequenceMeta, Split, FRAMES_DIR, LABELS_FILE, META_FILE};
use crate::error::{Error, Result};
use crate::ingest::{encode_pgm, LumaFrame};
use crate::rng::derive_seed;
use crate::v2e::V2eParams;

const SKIN: f64 = 140.0;
const SCLERA: f64 = 215.0;
const IRIS: f64 = 90.0;
const PUPIL: f64 = 25.0;
const SUPERSAMPLE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Motion {
    GazeClockwise,
    GazeCounterClockwise,
    BlinkSlow,
    BlinkFast,
    SaccadeHorizontal,
    SaccadeVertical,
    PupilPulse,
}

impl Motion {
    pub const ALL: [Motion; 7] = [
        Motion::GazeClockwise,
        Motion::GazeCounterClockwise,
        Motion::BlinkSlow,
        Motion::BlinkFast,
        Motion::SaccadeHorizontal,
        Motion::SaccadeVertical,
        Motion::PupilPulse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Motion::GazeClockwise => "gaze_cw",
            Motion::GazeCounterClockwise => "gaze_ccw",
            Motion::BlinkSlow => "blink_slow",
            Motion::BlinkFast => "blink_fast",
            Motion::SaccadeHorizontal => "saccade_h",
            Motion::SaccadeVertical => "saccade_v",
            Motion::PupilPulse => "pupil_pulse",
        }
    }

    /// Period of the motion in frames.
    pub fn period(self) -> f64 {
        match self {
            Motion::GazeClockwise | Motion::GazeCounterClockwise => 32.0,
            Motion::BlinkSlow => 32.0,
            Motion::BlinkFast => 16.0,
            Motion::SaccadeHorizontal | Motion::SaccadeVertical => 16.0,
            Motion::PupilPulse => 14.0,
        }
    }
}

/// Label indices of the slow and fast blink classes. Phase is uniform, so
/// their single frames share one distribution and only the blink speed
/// tells them apart.
pub const DYNAMICS_PAIR: [usize; 2] = [2, 3];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub length_frames: usize,
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 7,
            train_per_class: 10,
            test_per_class: 10,
            length_frames: 64,
            width: 32,
            height: 24,
            fps: 60.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > Motion::ALL.len() {
            return Err(Error::Config(format!(
                "classes must be in 1..={}, got {}",
                Motion::ALL.len(),
                self.classes
            )));
        }
        if self.length_frames < 2 || self.width < 8 || self.height < 8 || !(self.fps > 0.0) {
            return Err(Error::Config(
                "need length_frames >= 2, width and height >= 8, fps > 0".into(),
            ));
        }
        if self.train_per_class + self.test_per_class == 0 {
            return Err(Error::Config("no sequences requested".into()));
        }
        Ok(())
    }
}

/// Per-sequence nuisance parameters.
#[derive(Debug, Clone, Copy)]
struct Nuisance {
    phase: f64,
    brightness: f64,
    dx: f64,
    dy: f64,
    speed: f64,
}

impl Nuisance {
    fn draw<R: Rng>(rng: &mut R) -> Self {
        Self {
            phase: rng.gen_range(0.0..TAU),
            brightness: rng.gen_range(0.75..1.25),
            dx: rng.gen_range(-1.5..1.5),
            dy: rng.gen_range(-1.0..1.0),
            speed: rng.gen_range(0.85..1.15),
        }
    }
}

/// Eye pose at one instant, in pixels.
#[derive(Debug, Clone, Copy)]
struct Pose {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    iris_x: f64,
    iris_y: f64,
    iris_r: f64,
    pupil_r: f64,
    /// 1 fully open, 0 closed.
    openness: f64,
}

fn pose(motion: Motion, k: usize, w: usize, h: usize, n: &Nuisance) -> Pose {
    let (wf, hf) = (w as f64, h as f64);
    let cx = wf / 2.0 + n.dx;
    let cy = hf / 2.0 + n.dy;
    let mut p = Pose {
        cx,
        cy,
        rx: 0.42 * wf,
        ry: 0.34 * hf,
        iris_x: cx,
        iris_y: cy,
        iris_r: 0.24 * hf,
        pupil_r: 0.11 * hf,
        openness: 1.0,
    };
    let phase = n.phase + TAU * k as f64 * n.speed / motion.period();
    let (ax, ay) = (0.17 * wf, 0.16 * hf);
    match motion {
        Motion::GazeClockwise | Motion::GazeCounterClockwise => {
            let dir = if motion == Motion::GazeClockwise { 1.0 } else { -1.0 };
            p.iris_x += ax * (dir * phase).cos();
            p.iris_y += ay * (dir * phase).sin();
        }
        Motion::BlinkSlow | Motion::BlinkFast => {
            p.openness = (0.5 + 0.55 * phase.cos()).clamp(0.0, 1.0);
        }
        Motion::SaccadeHorizontal => p.iris_x += ax * (4.0 * phase.sin()).tanh(),
        Motion::SaccadeVertical => p.iris_y += ay * (4.0 * phase.sin()).tanh(),
        Motion::PupilPulse => p.pupil_r *= 1.0 + 0.35 * phase.sin(),
    }
    p
}

fn shade(p: &Pose, x: f64, y: f64) -> f64 {
    let ex = (x - p.cx) / p.rx;
    let ey = (y - p.cy) / p.ry;
    let lid = p.cy - p.ry + (1.0 - p.openness) * 1.9 * p.ry;
    if ex * ex + ey * ey > 1.0 || y < lid {
        return SKIN;
    }
    let d2 = (x - p.iris_x).powi(2) + (y - p.iris_y).powi(2);
    if d2 <= p.pupil_r * p.pupil_r {
        PUPIL
    } else if d2 <= p.iris_r * p.iris_r {
        IRIS
    } else {
        SCLERA
    }
}

fn render(p: &Pose, w: usize, h: usize, brightness: f64, t_us: u64) -> LumaFrame {
    let s = SUPERSAMPLE as f64;
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for j in 0..SUPERSAMPLE {
                for i in 0..SUPERSAMPLE {
                    acc += shade(p, x as f64 + (i as f64 + 0.5) / s, y as f64 + (j as f64 + 0.5) / s);
                }
            }
            let v = acc / (s * s) * brightness;
            data.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    LumaFrame::new(w, h, data, t_us).expect("sized")
}

/// Renders one sequence of `motion` with nuisance drawn from `seed`.
pub fn render_sequence(motion: Motion, spec: &SynthSpec, seed: u64) -> Vec<LumaFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Nuisance::draw(&mut rng);
    (0..spec.length_frames)
        .map(|k| {
            let t_us = (k as f64 * 1e6 / spec.fps).round() as u64;
            render(&pose(motion, k, spec.width, spec.height, &n), spec.width, spec.height, n.brightness, t_us)
        })
        .collect()
}

/// One generated sequence.
#[derive(Debug, Clone)]
pub struct SynthSequence {
    pub split: Split,
    pub id: String,
    pub label: usize,
    pub frames: Vec<LumaFrame>,
}

pub fn class_names(spec: &SynthSpec) -> Vec<String> {
    Motion::ALL[..spec.classes].iter().map(|m| m.name().to_string()).collect()
}

/// Generates every sequence in memory, train split first. Sequence `i` of
/// every class in a split shares one nuisance draw, so nuisance carries no
/// label information.
pub fn generate(spec: &SynthSpec) -> Result<Vec<SynthSequence>> {
    spec.validate()?;
    let mut out = Vec::new();
    for (split, per_class) in [(Split::Train, spec.train_per_class), (Split::Test, spec.test_per_class)] {
        for (label, motion) in Motion::ALL[..spec.classes].iter().enumerate() {
            for i in 0..per_class {
                let id = format!("{}_{i:03}", motion.name());
                let seed = derive_seed(spec.seed, &format!("synth/{split}/{i}"));
                out.push(SynthSequence {
                    split,
                    id,
                    label,
                    frames: render_sequence(*motion, spec, seed),
                });
            }
        }
    }
    Ok(out)
}

/// Generates and converts both splits in memory. Equivalent to writing the
/// dataset with [`synth_dataset`] and loading it back.
pub fn build_datasets(spec: &SynthSpec, params: &V2eParams) -> Result<(Dataset, Dataset)> {
    let labels = class_names(spec);
    let (train, test): (Vec<_>, Vec<_>) = generate(spec)?.into_iter().partition(|s| s.split == Split::Train);
    let items = |mut v: Vec<SynthSequence>| -> Vec<_> {
        v.sort_by(|a, b| a.id.cmp(&b.id));
        v.into_iter().map(|s| (s.id, s.label, spec.fps, s.frames)).collect()
    };
    Ok((
        Dataset::from_frames(labels.clone(), Split::Train, items(train), params)?,
        Dataset::from_frames(labels, Split::Test, items(test), params)?,
    ))
}

/// Writes a dataset to `root`, which must be absent or empty.
pub fn synth_dataset(root: &Path, spec: &SynthSpec) -> Result<usize> {
    spec.validate()?;
    if root.exists() {
        let mut entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        if entries.next().is_some() {
            return Err(Error::Dataset(format!(
                "target directory {} is not empty",
                root.display()
            )));
        }
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let labels = root.join(LABELS_FILE);
    fs::write(&labels, class_names(spec).join("\n") + "\n").map_err(|e| Error::io(&labels, e))?;
    let seqs = generate(spec)?;
    for s in &seqs {
        let dir = root.join(s.split.name()).join(&s.id);
        let fdir = dir.join(FRAMES_DIR);
        fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
        let meta = dir.join(META_FILE);
        fs::write(&meta, SequenceMeta { fps: spec.fps, label: s.label }.render())
            .map_err(|e| Error::io(&meta, e))?;
        for (k, f) in s.frames.iter().enumerate() {
            let p = fdir.join(format!("{k:06}.pgm"));
            fs::write(&p, encode_pgm(f)).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(seqs.len())
}
