//! Frame decoding and the luma to log-intensity mapping that feeds the pixel
//! model.

use crate::error::{Error, Result};

/// Luma level (DN) below which the log mapping is replaced by a line through
/// the origin.
pub const LIN_LOG_JUNCTION: f64 = 20.0;

/// Default frame rate when a sequence does not say otherwise.
pub const DEFAULT_FPS: f64 = 60.0;

/// One 8-bit grayscale frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LumaFrame {
    pub width: usize,
    pub height: usize,
    /// Row-major luma in DN.
    pub data: Vec<u8>,
    pub t_us: u64,
}

impl LumaFrame {
    pub fn new(width: usize, height: usize, data: Vec<u8>, t_us: u64) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(
                "LumaFrame",
                format!("{} values for {}x{}", data.len(), width, height),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
            t_us,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8, t_us: u64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
            t_us,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// Log intensity per pixel, natural-log units.
#[derive(Debug, Clone, PartialEq)]
pub struct LogFrame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    pub t_us: u64,
}

impl LogFrame {
    pub fn from_luma(frame: &LumaFrame) -> Self {
        Self {
            width: frame.width,
            height: frame.height,
            data: frame.data.iter().map(|&y| lin_log_dn(y)).collect(),
            t_us: frame.t_us,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameFormat {
    /// Binary `P5` PGM, maxval 255.
    Pgm,
    /// PNG; color images are reduced to luma.
    Png,
    /// Raw interleaved 8-bit RGB.
    RgbTriplets { width: usize, height: usize },
}

/// BT.601 luma, rounded to the nearest DN.
pub fn luma_from_rgb(r: u8, g: u8, b: u8) -> u8 {
    let y = 0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b);
    y.round().clamp(0.0, 255.0) as u8
}

pub fn decode_frame(raw: &[u8], format: FrameFormat) -> Result<LumaFrame> {
    match format {
        FrameFormat::Pgm => decode_pgm(raw),
        FrameFormat::Png => decode_png(raw),
        FrameFormat::RgbTriplets { width, height } => {
            let need = width * height * 3;
            if raw.len() < need {
                return Err(Error::Decode {
                    offset: raw.len(),
                    reason: format!("expected {need} bytes of RGB data"),
                });
            }
            let data = raw[..need]
                .chunks_exact(3)
                .map(|p| luma_from_rgb(p[0], p[1], p[2]))
                .collect();
            LumaFrame::new(width, height, data, 0)
        }
    }
}

pub fn encode_pgm(frame: &LumaFrame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend_from_slice(&frame.data);
    out
}

fn decode_pgm(raw: &[u8]) -> Result<LumaFrame> {
    let mut pos = 0usize;
    let magic = next_token(raw, &mut pos)?;
    if magic != b"P5" {
        return Err(Error::Decode {
            offset: 0,
            reason: "missing P5 magic".into(),
        });
    }
    let width = parse_header_number(raw, &mut pos)?;
    let height = parse_header_number(raw, &mut pos)?;
    let maxval = parse_header_number(raw, &mut pos)?;
    if maxval != 255 {
        return Err(Error::Decode {
            offset: pos - maxval.to_string().len(),
            reason: format!("unsupported maxval {maxval}"),
        });
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height;
    if raw.len() < pos + need {
        return Err(Error::Decode {
            offset: raw.len(),
            reason: format!("truncated raster: need {need} bytes from offset {pos}"),
        });
    }
    LumaFrame::new(width, height, raw[pos..pos + need].to_vec(), 0)
}

fn next_token<'a>(raw: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < raw.len() && raw[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < raw.len() && raw[*pos] == b'#' {
            while *pos < raw.len() && raw[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < raw.len() && !raw[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Decode {
            offset: start,
            reason: "truncated header".into(),
        });
    }
    Ok(&raw[start..*pos])
}

fn parse_header_number(raw: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = next_token(raw, pos)?;
    let start = *pos - tok.len();
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Decode {
            offset: start,
            reason: format!("bad header number {:?}", String::from_utf8_lossy(tok)),
        })
}

fn decode_png(raw: &[u8]) -> Result<LumaFrame> {
    let img = image::load_from_memory_with_format(raw, image::ImageFormat::Png).map_err(|e| {
        Error::Decode {
            offset: 0,
            reason: e.to_string(),
        }
    })?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let data = match img {
        image::DynamicImage::ImageLuma8(buf) => buf.into_raw(),
        other => other
            .to_rgb8()
            .pixels()
            .map(|p| luma_from_rgb(p[0], p[1], p[2]))
            .collect(),
    };
    LumaFrame::new(width, height, data, 0)
}

/// Lin-log mapping: `ln(Y)` above the junction, the chord `(Y/20)·ln 20`
/// at and below it. Continuous at `Y = 20`.
pub fn lin_log(y: f64) -> Result<f64> {
    if !(0.0..=255.0).contains(&y) {
        return Err(Error::Domain {
            value: y,
            domain: "luma DN [0, 255]",
        });
    }
    Ok(lin_log_unchecked(y))
}

#[inline]
fn lin_log_unchecked(y: f64) -> f64 {
    if y <= LIN_LOG_JUNCTION {
        y / LIN_LOG_JUNCTION * LIN_LOG_JUNCTION.ln()
    } else {
        y.ln()
    }
}

#[inline]
pub fn lin_log_dn(y: u8) -> f64 {
    lin_log_unchecked(f64::from(y))
}

#[inline]
pub fn normalize_luma(y: u8) -> f64 {
    f64::from(y) / 255.0
}
