//! Turns sampled clips into network input tensors.

use crate::adsn::{AdsnConfig, EventEncoding, InputMode};
use crate::error::{Error, Result};
use crate::events::{Clip, EventFrame};
use crate::ingest::LumaFrame;
use crate::nn::{pool_bins, Tensor};

/// A batch ready for the network.
#[derive(Debug, Clone)]
pub struct ModelInput {
    /// `N×G×H×W`, each frame min-max normalized to `[0, 1]`.
    pub grays: Tensor<f64>,
    /// One `N×2×H×W` tensor (ON, OFF) per step.
    pub events: Vec<Tensor<f64>>,
    pub labels: Vec<usize>,
}

impl ModelInput {
    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }
}

/// Area-averages (or replicates, when enlarging) a plane to `oh×ow`.
pub fn resize_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if h == oh && w == ow {
        return src.to_vec();
    }
    let mut out = Vec::with_capacity(oh * ow);
    for (y0, y1) in pool_bins(h, oh) {
        for (x0, x1) in pool_bins(w, ow) {
            let mut acc = 0.0;
            for y in y0..y1 {
                acc += src[y * w + x0..y * w + x1].iter().sum::<f64>();
            }
            out.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    out
}

/// Min-max normalization; a constant frame maps to zeros.
pub fn normalize_gray(frame: &LumaFrame) -> Vec<f64> {
    let lo = *frame.data.iter().min().unwrap_or(&0);
    let hi = *frame.data.iter().max().unwrap_or(&0);
    let span = f64::from(hi - lo);
    frame
        .data
        .iter()
        .map(|&v| if span > 0.0 { f64::from(v - lo) / span } else { 0.0 })
        .collect()
}

/// 99th-percentile (nearest rank) of all ON and OFF counts in a clip.
pub fn clip_p99(frames: &[EventFrame]) -> u32 {
    let mut all: Vec<u32> = frames
        .iter()
        .flat_map(|f| f.on_counts.iter().chain(&f.off_counts).copied())
        .collect();
    if all.is_empty() {
        return 0;
    }
    let rank = ((0.99 * all.len() as f64).ceil() as usize).clamp(1, all.len());
    let (_, v, _) = all.select_nth_unstable(rank - 1);
    *v
}

fn gray_frames<'a>(clip: &'a Clip, cfg: &AdsnConfig) -> Vec<&'a LumaFrame> {
    let g = &clip.grays;
    match cfg.input_mode {
        InputMode::FirstLast => vec![&g[0], &g[g.len() - 1]],
        InputMode::FirstOnly => vec![&g[0], &g[0]],
        InputMode::FirstSecond => vec![&g[0], &g[1.min(g.len() - 1)]],
        InputMode::AllFrames => g.iter().collect(),
    }
}

/// Builds a batch from clips, resizing to the configured input size.
pub fn prepare(clips: &[&Clip], cfg: &AdsnConfig) -> Result<ModelInput> {
    if clips.is_empty() {
        return Err(Error::Dataset("empty batch".into()));
    }
    let (oh, ow) = (cfg.input_height, cfg.input_width);
    let n = clips.len();
    let gch = cfg.gray_channels();
    let mut grays = Vec::with_capacity(n * gch * oh * ow);
    let mut events = vec![Vec::with_capacity(n * 2 * oh * ow); cfg.n_steps];
    for clip in clips {
        if clip.event_frames.len() != cfg.n_steps || clip.grays.len() != cfg.n_steps {
            return Err(Error::Dataset(format!(
                "clip has {} event frames and {} gray frames, model expects {}",
                clip.event_frames.len(),
                clip.grays.len(),
                cfg.n_steps
            )));
        }
        if clip.label >= cfg.num_classes {
            return Err(Error::Dataset(format!(
                "label {} out of range for {} classes",
                clip.label, cfg.num_classes
            )));
        }
        for f in gray_frames(clip, cfg) {
            grays.extend(resize_plane(&normalize_gray(f), f.height, f.width, oh, ow));
        }
        let scale = 1.0 / f64::from(clip_p99(&clip.event_frames).max(1));
        for (t, ef) in clip.event_frames.iter().enumerate() {
            for counts in [&ef.on_counts, &ef.off_counts] {
                let plane: Vec<f64> = counts
                    .iter()
                    .map(|&c| match cfg.event_encoding {
                        EventEncoding::Counts => f64::from(c) * scale,
                        EventEncoding::Binary => f64::from(u8::from(c > 0)),
                    })
                    .collect();
                events[t].extend(resize_plane(&plane, ef.height, ef.width, oh, ow));
            }
        }
    }
    Ok(ModelInput {
        grays: Tensor::new(&[n, gch, oh, ow], grays)?,
        events: events
            .into_iter()
            .map(|e| Tensor::new(&[n, 2, oh, ow], e))
            .collect::<Result<_>>()?,
        labels: clips.iter().map(|c| c.label).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_averages_blocks() {
        let src: Vec<f64> = (0..16).map(f64::from).collect();
        let out = resize_plane(&src, 4, 4, 2, 2);
        assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
        assert_eq!(resize_plane(&src, 4, 4, 4, 4), src);
    }

    #[test]
    fn gray_normalization() {
        let f = LumaFrame::new(3, 1, vec![10, 20, 30], 0).unwrap();
        assert_eq!(normalize_gray(&f), vec![0.0, 0.5, 1.0]);
        let c = LumaFrame::filled(2, 2, 77, 0);
        assert_eq!(normalize_gray(&c), vec![0.0; 4]);
    }

    #[test]
    fn percentile() {
        let mut on = vec![0u32; 100];
        on[99] = 50;
        on[98] = 4;
        let frame = EventFrame {
            width: 100,
            height: 1,
            on_counts: on,
            off_counts: vec![0; 100],
            t_start_us: 0,
            t_end_us: 1,
        };
        // 200 values: rank 198 is still zero
        assert_eq!(clip_p99(std::slice::from_ref(&frame)), 0);
    }
}
