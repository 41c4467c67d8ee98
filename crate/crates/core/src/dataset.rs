//! On-disk dataset layout.
//!
//! ```text
//! root/labels.txt                       one class name per line
//! root/{train,test}/<seq_id>/meta.txt   fps=60, label=<index>
//! root/{train,test}/<seq_id>/frames/000000.pgm (or .png)
//! root/{train,test}/<seq_id>/events.evt1        optional
//! ```
//!
//! Sequences without a stored event stream are converted on load, with a
//! simulator seed derived from the run seed and `split/seq_id`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::events::{read_stream, EventStream, Sequence, StreamFormat};
use crate::ingest::{decode_frame, FrameFormat, LumaFrame, DEFAULT_FPS};
use crate::rng::derive_seed;
use crate::v2e::{convert_video, V2eParams};

pub const LABELS_FILE: &str = "labels.txt";
pub const META_FILE: &str = "meta.txt";
pub const FRAMES_DIR: &str = "frames";
pub const EVENTS_FILE: &str = "events.evt1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parsed `meta.txt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceMeta {
    pub fps: f64,
    pub label: usize,
}

impl SequenceMeta {
    pub fn parse(text: &str) -> Result<Self> {
        let mut fps = DEFAULT_FPS;
        let mut label = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Dataset(format!("meta line {line:?} is not key=value")))?;
            match k.trim() {
                "fps" => {
                    fps = v
                        .trim()
                        .parse()
                        .ok()
                        .filter(|f: &f64| *f > 0.0 && f.is_finite())
                        .ok_or_else(|| Error::Dataset(format!("invalid fps {v:?}")))?
                }
                "label" => {
                    label = Some(
                        v.trim()
                            .parse()
                            .map_err(|_| Error::Dataset(format!("invalid label {v:?}")))?,
                    )
                }
                _ => {}
            }
        }
        Ok(Self {
            fps,
            label: label.ok_or_else(|| Error::Dataset("meta.txt has no label".into()))?,
        })
    }

    pub fn render(&self) -> String {
        format!("fps={}\nlabel={}\n", self.fps, self.label)
    }
}

pub fn read_labels(root: &Path) -> Result<Vec<String>> {
    let path = root.join(LABELS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let labels: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if labels.is_empty() {
        return Err(Error::Dataset(format!("{} lists no classes", path.display())));
    }
    Ok(labels)
}

/// Sequence directories of a split, sorted by id.
pub fn list_sequences(root: &Path, split: Split) -> Result<Vec<(String, PathBuf)>> {
    let dir = root.join(split.name());
    let mut out = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        if entry.path().is_dir() {
            out.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// True if `dir` looks like a single sequence directory.
pub fn is_sequence_dir(dir: &Path) -> bool {
    dir.join(META_FILE).is_file() && dir.join(FRAMES_DIR).is_dir()
}

/// Reads the numbered frames of a sequence and stamps them at `k/fps`.
pub fn load_frames(dir: &Path, fps: f64) -> Result<Vec<LumaFrame>> {
    let fdir = dir.join(FRAMES_DIR);
    let mut paths: Vec<PathBuf> = fs::read_dir(&fdir)
        .map_err(|e| Error::io(&fdir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Dataset(format!("{} holds no frames", fdir.display())));
    }
    paths
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let raw = fs::read(p).map_err(|e| Error::io(p, e))?;
            let format = if p.extension().and_then(|e| e.to_str()) == Some("png") {
                FrameFormat::Png
            } else {
                FrameFormat::Pgm
            };
            let mut f = decode_frame(&raw, format)
                .map_err(|e| Error::Dataset(format!("{}: {e}", p.display())))?;
            f.t_us = (k as f64 * 1e6 / fps).round() as u64;
            Ok(f)
        })
        .collect()
}

/// Loads one sequence directory. Uses `events.evt1` when present,
/// otherwise converts the frames with `params`.
pub fn load_sequence(dir: &Path, id: &str, params: &V2eParams) -> Result<Sequence> {
    let meta_path = dir.join(META_FILE);
    let meta = SequenceMeta::parse(&fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
    let frames = load_frames(dir, meta.fps)?;
    let (w, h) = (frames[0].width, frames[0].height);
    if frames.iter().any(|f| f.width != w || f.height != h) {
        return Err(Error::Dataset(format!("{id}: frames differ in size")));
    }
    let ev_path = dir.join(EVENTS_FILE);
    let events = if ev_path.is_file() {
        let s = read_stream(&ev_path, StreamFormat::Evt1)?;
        if s.width as usize != w || s.height as usize != h {
            return Err(Error::Dataset(format!(
                "{id}: events are {}x{}, frames {w}x{h}",
                s.width, s.height
            )));
        }
        s
    } else if frames.len() >= 2 {
        convert_video(&frames, params)?
    } else {
        EventStream::new(w as u32, h as u32, Vec::new())?
    };
    Ok(Sequence {
        id: id.to_string(),
        label: meta.label,
        fps: meta.fps,
        frames,
        events,
    })
}

/// Simulator parameters for one sequence of a split.
pub fn sequence_params(base: &V2eParams, split: Split, id: &str) -> V2eParams {
    V2eParams {
        seed: derive_seed(base.seed, &format!("{split}/{id}")),
        ..base.clone()
    }
}

/// A loaded split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub labels: Vec<String>,
    pub split: Split,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    /// Loads every sequence of `split`; conversion runs in parallel and is
    /// deterministic for any thread count.
    pub fn load(root: &Path, split: Split, params: &V2eParams) -> Result<Self> {
        let labels = read_labels(root)?;
        let dirs = list_sequences(root, split)?;
        let sequences: Vec<Sequence> = dirs
            .par_iter()
            .map(|(id, dir)| load_sequence(dir, id, &sequence_params(params, split, id)))
            .collect::<Result<_>>()?;
        if let Some(s) = sequences.iter().find(|s| s.label >= labels.len()) {
            return Err(Error::Dataset(format!(
                "{}: label {} but only {} classes",
                s.id,
                s.label,
                labels.len()
            )));
        }
        Ok(Self {
            labels,
            split,
            sequences,
        })
    }

    /// Builds a split from frames already in memory, converting each
    /// sequence to events exactly as [`Dataset::load`] would.
    pub fn from_frames(
        labels: Vec<String>,
        split: Split,
        items: Vec<(String, usize, f64, Vec<LumaFrame>)>,
        params: &V2eParams,
    ) -> Result<Self> {
        let sequences = items
            .into_par_iter()
            .map(|(id, label, fps, frames)| {
                let p = sequence_params(params, split, &id);
                let events = convert_video(&frames, &p)?;
                Ok(Sequence {
                    id,
                    label,
                    fps,
                    frames,
                    events,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            labels,
            split,
            sequences,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    /// Keeps only sequences whose label is in `keep`.
    pub fn filter_labels(&self, keep: &[usize]) -> Self {
        Self {
            labels: self.labels.clone(),
            split: self.split,
            sequences: self
                .sequences
                .iter()
                .filter(|s| keep.contains(&s.label))
                .cloned()
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meta_parsing() {
        let m = SequenceMeta::parse("fps=30\nlabel=4\n").unwrap();
        assert_eq!(m, SequenceMeta { fps: 30.0, label: 4 });
        assert_eq!(SequenceMeta::parse(&m.render()).unwrap(), m);
        assert_eq!(SequenceMeta::parse("label=1").unwrap().fps, 60.0);
        assert!(SequenceMeta::parse("fps=60").is_err());
        assert!(SequenceMeta::parse("label=x").is_err());
        assert!(SequenceMeta::parse("fps=0\nlabel=1").is_err());
    }

    #[test]
    fn per_sequence_seeds_differ() {
        let base = V2eParams::default();
        let a = sequence_params(&base, Split::Train, "s1").seed;
        let b = sequence_params(&base, Split::Train, "s2").seed;
        let c = sequence_params(&base, Split::Test, "s1").seed;
        assert!(a != b && a != c && b != c);
    }
}
