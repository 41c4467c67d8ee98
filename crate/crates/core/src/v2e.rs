//! DVS pixel model: turns a luma sequence into an asynchronous event stream.
//!
//! Each source frame interval runs the same per-pixel pipeline:
//!
//! 1. luma is mapped to log intensity (lin-log),
//! 2. a first-order IIR low-pass whose cutoff grows with luma filters it,
//! 3. the memorized level `l_mem` leaks downward at a constant rate,
//! 4. the signed change `l_lp - l_mem` is quantized into ON/OFF events,
//! 5. Poisson shot noise may add one extra event and reset the pixel.
//!
//! All randomness is keyed by `(seed, pixel, interval)` so the output does
//! not depend on how rows are spread over threads.

use std::f64::consts::TAU;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::events::EventStream;
use crate::ingest::{normalize_luma, LogFrame, LumaFrame};
use crate::rng::CounterRng;

/// Lower bound applied to sampled per-pixel thresholds.
pub const MIN_THRESHOLD: f64 = 0.01;

/// Pixels per parallel work item.
const PAR_CHUNK: usize = 256;

/// Stream-id bit reserved for threshold sampling, disjoint from noise streams.
const THRESHOLD_STREAM: u64 = 1 << 62;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    /// `eps = min(1, 2*pi*f*dt)`
    Euler,
    /// `eps = 1 - exp(-2*pi*f*dt)`
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct V2eParams {
    /// Nominal ON threshold, log units.
    pub theta_on: f64,
    /// Nominal OFF threshold, log units.
    pub theta_off: f64,
    /// Std-dev of per-pixel threshold mismatch, log units.
    pub sigma_theta: f64,
    /// Cutoff at full white, Hz. `f64::INFINITY` disables the filter.
    pub f3db_max: f64,
    /// Fraction of `f3db_max` kept at zero luma.
    pub bw_floor: f64,
    /// Leak event rate, Hz.
    pub leak_rate: f64,
    /// Shot-noise rate in darkness, Hz (ON and OFF combined).
    pub noise_rate_rn: f64,
    /// Noise reduction factor at full white.
    pub noise_bright_factor_c: f64,
    pub filter: FilterKind,
    pub seed: u64,
}

impl Default for V2eParams {
    fn default() -> Self {
        Self {
            theta_on: 0.2,
            theta_off: 0.2,
            sigma_theta: 0.02,
            f3db_max: 300.0,
            bw_floor: 0.1,
            leak_rate: 0.1,
            noise_rate_rn: 1.0,
            noise_bright_factor_c: 0.25,
            filter: FilterKind::Euler,
            seed: 0,
        }
    }
}

impl V2eParams {
    /// Pure quantizer settings: no mismatch, no leak, no noise.
    pub fn noiseless(mut self) -> Self {
        self.sigma_theta = 0.0;
        self.leak_rate = 0.0;
        self.noise_rate_rn = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("v2e: {what}")));
        if !(self.theta_on > 0.0 && self.theta_off > 0.0) {
            return bad("thresholds must be positive");
        }
        if !(self.sigma_theta >= 0.0) {
            return bad("sigma_theta must be >= 0");
        }
        if !(self.bw_floor > 0.0 && self.bw_floor <= 1.0) {
            return bad("bw_floor must lie in (0, 1]");
        }
        if !(self.f3db_max > 0.0) {
            return bad("f3db_max must be positive");
        }
        if !(self.noise_bright_factor_c > 0.0 && self.noise_bright_factor_c < 1.0) {
            return bad("noise_bright_factor_c must lie in (0, 1)");
        }
        if !(self.leak_rate >= 0.0 && self.noise_rate_rn >= 0.0) {
            return bad("leak_rate and noise_rate_rn must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Polarity {
    Off = 0,
    On = 1,
}

/// One brightness-change event. Field order gives the stream sort order:
/// time, then row, column, polarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DvsEvent {
    pub t_us: u64,
    pub y: u16,
    pub x: u16,
    pub polarity: Polarity,
}

impl DvsEvent {
    pub fn new(t_us: u64, x: u16, y: u16, polarity: Polarity) -> Self {
        Self {
            t_us,
            y,
            x,
            polarity,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelState {
    /// Memorized log intensity.
    pub l_mem: f64,
    /// Low-pass filtered log intensity.
    pub l_lp: f64,
    pub theta_on: f64,
    pub theta_off: f64,
    /// Total leak decrement applied to `l_mem` so far.
    pub leak_accum: f64,
}

#[derive(Clone)]
pub struct PixelArrayState {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<PixelState>,
    /// Per-pixel draws use the pixel index as stream id and `step` as counter.
    rng: CounterRng,
    /// Number of completed intervals.
    pub step: u64,
}

impl std::fmt::Debug for PixelArrayState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PixelArrayState")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("step", &self.step)
            .finish_non_exhaustive()
    }
}

pub fn init_state(first: &LogFrame, params: &V2eParams) -> Result<PixelArrayState> {
    params.validate()?;
    if first.width == 0 || first.height == 0 || first.data.is_empty() {
        return Err(Error::Stream("zero-sized frame".into()));
    }
    if first.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial log frame".into()));
    }
    let rng = CounterRng::new(params.seed);
    let pixels = first
        .data
        .par_iter()
        .with_min_len(PAR_CHUNK)
        .enumerate()
        .map(|(i, &l)| {
            let (theta_on, theta_off) = if params.sigma_theta > 0.0 {
                let mut r = rng.stream(THRESHOLD_STREAM | i as u64);
                let on = Normal::new(params.theta_on, params.sigma_theta)
                    .expect("validated sigma")
                    .sample(&mut r);
                let off = Normal::new(params.theta_off, params.sigma_theta)
                    .expect("validated sigma")
                    .sample(&mut r);
                (on.max(MIN_THRESHOLD), off.max(MIN_THRESHOLD))
            } else {
                (params.theta_on, params.theta_off)
            };
            PixelState {
                l_mem: l,
                l_lp: l,
                theta_on,
                theta_off,
                leak_accum: 0.0,
            }
        })
        .collect();
    Ok(PixelArrayState {
        width: first.width,
        height: first.height,
        pixels,
        rng,
        step: 0,
    })
}

/// Filter cutoff for normalized luma: `f3db_max * (floor + (1 - floor) * y)`.
pub fn bandwidth(y_norm: f64, params: &V2eParams) -> f64 {
    params.f3db_max * (params.bw_floor + (1.0 - params.bw_floor) * y_norm)
}

/// Shot-noise rate for normalized luma: `R_n` in darkness down to `c*R_n`
/// at full white.
pub fn noise_rate(y_norm: f64, params: &V2eParams) -> f64 {
    params.noise_rate_rn * (1.0 - (1.0 - params.noise_bright_factor_c) * y_norm)
}

fn filter_gain(f: f64, dt: f64, kind: FilterKind) -> f64 {
    if dt == 0.0 {
        return 0.0;
    }
    let x = TAU * f * dt;
    match kind {
        FilterKind::Euler => x.min(1.0),
        FilterKind::Exact => 1.0 - (-x).exp(),
    }
}

/// Magnitude-floored signed event count for a log change.
pub fn quantize(delta: f64, theta_on: f64, theta_off: f64) -> i64 {
    if delta > 0.0 {
        (delta / theta_on).floor() as i64
    } else if delta < 0.0 {
        -((-delta / theta_off).floor() as i64)
    } else {
        0
    }
}

/// Timestamp of event `i` of `n` spread evenly over `(t0, t1]`.
pub fn spread_timestamp(t0: u64, t1: u64, i: u64, n: u64) -> u64 {
    t0 + ((i + 1) * (t1 - t0)).div_ceil(n)
}

impl PixelArrayState {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    fn check_frame(&self, w: usize, h: usize) -> Result<()> {
        if w != self.width || h != self.height {
            return Err(Error::shape(
                "v2e",
                format!("frame {w}x{h} vs state {}x{}", self.width, self.height),
            ));
        }
        Ok(())
    }

    pub fn lowpass_step(
        &mut self,
        target: &LogFrame,
        luma_norm: &[f64],
        dt: f64,
        params: &V2eParams,
    ) -> Result<()> {
        if !(dt >= 0.0) {
            return Err(Error::Domain {
                value: dt,
                domain: "dt >= 0",
            });
        }
        self.check_frame(target.width, target.height)?;
        self.pixels
            .par_iter_mut()
            .with_min_len(PAR_CHUNK)
            .zip(target.data.par_iter().zip(luma_norm.par_iter()))
            .for_each(|(px, (&l, &y))| {
                let eps = filter_gain(bandwidth(y, params), dt, params.filter);
                px.l_lp += eps * (l - px.l_lp);
            });
        Ok(())
    }

    /// Lowers every `l_mem` by `leak_rate * theta_on_nominal * dt`; the
    /// following [`emit_events`](Self::emit_events) turns the accumulated
    /// drop into ON events.
    pub fn leak_step(&mut self, dt: f64, params: &V2eParams) -> Result<()> {
        if !(dt >= 0.0) {
            return Err(Error::Domain {
                value: dt,
                domain: "dt >= 0",
            });
        }
        if params.leak_rate == 0.0 {
            return Ok(());
        }
        let drop = params.leak_rate * params.theta_on * dt;
        self.pixels
            .par_iter_mut()
            .with_min_len(PAR_CHUNK)
            .for_each(|px| {
                px.l_mem -= drop;
                px.leak_accum += drop;
            });
        Ok(())
    }

    pub fn emit_events(&mut self, t0_us: u64, t1_us: u64) -> Vec<DvsEvent> {
        let width = self.width;
        self.pixels
            .par_chunks_mut(PAR_CHUNK)
            .enumerate()
            .flat_map_iter(|(chunk, pixels)| {
                let mut out = Vec::new();
                for (j, px) in pixels.iter_mut().enumerate() {
                    let n = quantize(px.l_lp - px.l_mem, px.theta_on, px.theta_off);
                    if n == 0 {
                        continue;
                    }
                    let (polarity, theta) = if n > 0 {
                        (Polarity::On, px.theta_on)
                    } else {
                        (Polarity::Off, px.theta_off)
                    };
                    px.l_mem += n.signum() as f64 * n.unsigned_abs() as f64 * theta;
                    let idx = chunk * PAR_CHUNK + j;
                    let (x, y) = ((idx % width) as u16, (idx / width) as u16);
                    let count = n.unsigned_abs();
                    out.extend((0..count).map(|i| {
                        DvsEvent::new(spread_timestamp(t0_us, t1_us, i, count), x, y, polarity)
                    }));
                }
                out
            })
            .collect()
    }

    /// One Bernoulli trial per pixel: ON when `u < p/2`, OFF when
    /// `u > 1 - p/2`, with `p = r(y) * dt`. A noise event resets the pixel
    /// (`l_mem = l_lp`). Events are stamped at `t_us`.
    pub fn shot_noise_step(
        &mut self,
        luma_norm: &[f64],
        dt: f64,
        t_us: u64,
        params: &V2eParams,
    ) -> Result<Vec<DvsEvent>> {
        if !(dt >= 0.0) {
            return Err(Error::Domain {
                value: dt,
                domain: "dt >= 0",
            });
        }
        if luma_norm.len() != self.pixels.len() {
            return Err(Error::shape(
                "shot_noise_step",
                format!("{} luma values for {} pixels", luma_norm.len(), self.pixels.len()),
            ));
        }
        let step = self.step;
        self.step += 1;
        if params.noise_rate_rn == 0.0 || dt == 0.0 {
            return Ok(Vec::new());
        }
        if params.noise_rate_rn * dt > 1.0 {
            return Err(Error::Config(format!(
                "shot noise probability {:.3} exceeds 1; use a smaller time step",
                params.noise_rate_rn * dt
            )));
        }
        let width = self.width;
        let rng = &self.rng;
        let events = self
            .pixels
            .par_chunks_mut(PAR_CHUNK)
            .enumerate()
            .flat_map_iter(|(chunk, pixels)| {
                let mut out = Vec::new();
                for (j, px) in pixels.iter_mut().enumerate() {
                    let idx = chunk * PAR_CHUNK + j;
                    let half_p = 0.5 * noise_rate(luma_norm[idx], params) * dt;
                    let u = rng.uniform(idx as u64, step);
                    let polarity = if u < half_p {
                        Polarity::On
                    } else if u > 1.0 - half_p {
                        Polarity::Off
                    } else {
                        continue;
                    };
                    px.l_mem = px.l_lp;
                    out.push(DvsEvent::new(
                        t_us,
                        (idx % width) as u16,
                        (idx / width) as u16,
                        polarity,
                    ));
                }
                out
            })
            .collect();
        Ok(events)
    }
}

/// Frame-by-frame simulator.
pub struct Simulator {
    params: V2eParams,
    state: PixelArrayState,
    last_t_us: u64,
}

impl Simulator {
    pub fn new(first: &LumaFrame, params: V2eParams) -> Result<Self> {
        let state = init_state(&LogFrame::from_luma(first), &params)?;
        Ok(Self {
            params,
            state,
            last_t_us: first.t_us,
        })
    }

    pub fn state(&self) -> &PixelArrayState {
        &self.state
    }

    /// Advances over the interval ending at `frame.t_us`; returned events are
    /// sorted.
    pub fn push_frame(&mut self, frame: &LumaFrame) -> Result<Vec<DvsEvent>> {
        self.state.check_frame(frame.width, frame.height)?;
        if frame.t_us <= self.last_t_us {
            return Err(Error::Stream(format!(
                "timestamps must increase: {} after {}",
                frame.t_us, self.last_t_us
            )));
        }
        let (t0, t1) = (self.last_t_us, frame.t_us);
        let dt = (t1 - t0) as f64 * 1e-6;
        let log = LogFrame::from_luma(frame);
        let y_norm: Vec<f64> = frame.data.iter().map(|&y| normalize_luma(y)).collect();

        self.state.lowpass_step(&log, &y_norm, dt, &self.params)?;
        self.state.leak_step(dt, &self.params)?;
        let mut events = self.state.emit_events(t0, t1);
        events.extend(self.state.shot_noise_step(&y_norm, dt, t1, &self.params)?);
        events.sort_unstable();
        self.last_t_us = t1;
        Ok(events)
    }
}

/// Runs the pixel model over a whole sequence.
pub fn convert_video(frames: &[LumaFrame], params: &V2eParams) -> Result<EventStream> {
    if frames.len() < 2 {
        return Err(Error::Stream(format!(
            "need at least 2 frames, got {}",
            frames.len()
        )));
    }
    let mut sim = Simulator::new(&frames[0], params.clone())?;
    let mut events = Vec::new();
    for frame in &frames[1..] {
        events.extend(sim.push_frame(frame)?);
    }
    EventStream::new(frames[0].width as u32, frames[0].height as u32, events)
}
