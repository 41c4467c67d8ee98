use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How class probabilities are read out of the per-step outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputMode {
    /// Softmax of the time-averaged membrane potential of the last layer.
    MeanPotential,
    /// Softmax of the last step's membrane potential.
    LastPotential,
    /// Softmax of the last step's binary spikes.
    LastSpike,
}

/// Which gray frames feed the spatial branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    FirstLast,
    /// First frame in both slots.
    FirstOnly,
    /// First and second used frames.
    FirstSecond,
    /// Every used frame as a channel.
    AllFrames,
}

/// Event-frame encoding fed to the temporal branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventEncoding {
    /// Counts scaled by the clip's 99th-percentile count.
    Counts,
    /// 1 where any event fired.
    Binary,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($text => Ok($ty::$variant),)+
                    _ => Err(Error::Config(format!(
                        "unknown {} {s:?}, expected one of: {}",
                        stringify!($ty),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

keyword_enum!(OutputMode {
    MeanPotential => "mean_potential",
    LastPotential => "last_potential",
    LastSpike => "last_spike",
});

keyword_enum!(InputMode {
    FirstLast => "first_last",
    FirstOnly => "first_only",
    FirstSecond => "first_second",
    AllFrames => "all_frames",
});

keyword_enum!(EventEncoding {
    Counts => "counts",
    Binary => "binary",
});

/// Network hyperparameters. Serialized as `key=value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct AdsnConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub base_channels: usize,
    pub attention_scales: Vec<usize>,
    pub heads: usize,
    /// Event frames per clip.
    pub n_steps: usize,
    pub theta: f64,
    pub alpha: f64,
    pub surrogate_width: f64,
    pub head_hidden: usize,
    pub num_classes: usize,
    pub output_mode: OutputMode,
    pub input_mode: InputMode,
    pub event_encoding: EventEncoding,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for AdsnConfig {
    fn default() -> Self {
        Self {
            input_height: 72,
            input_width: 96,
            base_channels: 16,
            attention_scales: vec![3, 5, 7],
            heads: 4,
            n_steps: 4,
            theta: 0.3,
            alpha: 0.2,
            surrogate_width: 1.0,
            head_hidden: 128,
            num_classes: 7,
            output_mode: OutputMode::MeanPotential,
            input_mode: InputMode::FirstLast,
            event_encoding: EventEncoding::Counts,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl AdsnConfig {
    pub const KEYS: &'static [&'static str] = &[
        "input_height",
        "input_width",
        "base_channels",
        "attention_scales",
        "heads",
        "n_steps",
        "theta",
        "alpha",
        "surrogate_width",
        "head_hidden",
        "num_classes",
        "output_mode",
        "input_mode",
        "event_encoding",
        "bn_eps",
        "bn_momentum",
    ];

    /// Gray channels entering the spatial branch.
    /// Desk-scale preset for 32x24 inputs: eight base channels and two
    /// attention heads, everything else at the defaults.
    pub fn desk() -> Self {
        Self {
            input_height: 24,
            input_width: 32,
            base_channels: 8,
            heads: 2,
            ..Default::default()
        }
    }

    pub fn gray_channels(&self) -> usize {
        match self.input_mode {
            InputMode::AllFrames => self.n_steps,
            _ => 2,
        }
    }

    /// Channels of the deepest feature maps.
    pub fn feature_channels(&self) -> usize {
        4 * self.base_channels
    }

    /// Height and width after the two stride-2 stages.
    pub fn feature_size(&self) -> (usize, usize) {
        let down = |n: usize| n.div_ceil(2);
        (down(down(self.input_height)), down(down(self.input_width)))
    }

    /// Token grid after the 2×2 pooling in front of self-attention.
    pub fn token_grid(&self) -> (usize, usize) {
        let (h, w) = self.feature_size();
        ((h / 2).max(1), (w / 2).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_height < 4 || self.input_width < 4 {
            return bad(format!(
                "input size {}x{} must be at least 4x4",
                self.input_width, self.input_height
            ));
        }
        if self.base_channels == 0 || self.head_hidden == 0 || self.num_classes < 2 {
            return bad("base_channels, head_hidden must be positive and num_classes >= 2".into());
        }
        if self.attention_scales.is_empty()
            || self.attention_scales.iter().any(|k| k % 2 == 0)
            || self.attention_scales.windows(2).any(|w| w[0] >= w[1])
        {
            return bad(format!(
                "attention_scales {:?} must be odd and strictly ascending",
                self.attention_scales
            ));
        }
        if self.heads == 0 || !self.feature_channels().is_multiple_of(self.heads) {
            return bad(format!(
                "feature width {} is not divisible by {} heads",
                self.feature_channels(),
                self.heads
            ));
        }
        if self.n_steps == 0 {
            return bad("n_steps must be at least 1".into());
        }
        if !(self.theta > 0.0) || !(0.0..1.0).contains(&self.alpha) || !(self.surrogate_width > 0.0) {
            return bad(format!(
                "need theta > 0, 0 <= alpha < 1, surrogate_width > 0 (got {}, {}, {})",
                self.theta, self.alpha, self.surrogate_width
            ));
        }
        if self.input_mode == InputMode::FirstSecond && self.n_steps < 2 {
            return bad("input_mode first_second needs n_steps >= 2".into());
        }
        Ok(())
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "input_height" => self.input_height = parse(key, value)?,
            "input_width" => self.input_width = parse(key, value)?,
            "base_channels" => self.base_channels = parse(key, value)?,
            "attention_scales" => {
                self.attention_scales = value
                    .split(',')
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "heads" => self.heads = parse(key, value)?,
            "n_steps" => self.n_steps = parse(key, value)?,
            "theta" => self.theta = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "surrogate_width" => self.surrogate_width = parse(key, value)?,
            "head_hidden" => self.head_hidden = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "output_mode" => self.output_mode = value.trim().parse()?,
            "input_mode" => self.input_mode = value.trim().parse()?,
            "event_encoding" => self.event_encoding = value.trim().parse()?,
            "bn_eps" => self.bn_eps = parse(key, value)?,
            "bn_momentum" => self.bn_momentum = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "input_height" => self.input_height.to_string(),
            "input_width" => self.input_width.to_string(),
            "base_channels" => self.base_channels.to_string(),
            "attention_scales" => self
                .attention_scales
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "heads" => self.heads.to_string(),
            "n_steps" => self.n_steps.to_string(),
            "theta" => self.theta.to_string(),
            "alpha" => self.alpha.to_string(),
            "surrogate_width" => self.surrogate_width.to_string(),
            "head_hidden" => self.head_hidden.to_string(),
            "num_classes" => self.num_classes.to_string(),
            "output_mode" => self.output_mode.to_string(),
            "input_mode" => self.input_mode.to_string(),
            "event_encoding" => self.event_encoding.to_string(),
            "bn_eps" => self.bn_eps.to_string(),
            "bn_momentum" => self.bn_momentum.to_string(),
            _ => return None,
        })
    }

    pub fn to_kv(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("listed key")))
            .collect()
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut c = AdsnConfig::default();
        c.set("attention_scales", "3,5").unwrap();
        c.set("output_mode", "last_spike").unwrap();
        c.set("theta", "0.25").unwrap();
        let back = AdsnConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = AdsnConfig::default();
        assert!(c.set("nope", "1").is_err());
        assert!(c.set("output_mode", "mean").is_err());
        c.set("attention_scales", "5,3").unwrap();
        assert!(c.validate().is_err());
        let c = AdsnConfig {
            heads: 3,
            ..AdsnConfig::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("heads"));
    }

    #[test]
    fn geometry() {
        let c = AdsnConfig {
            input_height: 24,
            input_width: 32,
            ..Default::default()
        };
        assert_eq!(c.feature_size(), (6, 8));
        assert_eq!(c.token_grid(), (3, 4));
        assert_eq!(AdsnConfig::default().feature_size(), (18, 24));
    }
}
