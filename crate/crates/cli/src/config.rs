//! Flat `section.key=value` run configuration.
//!
//! Resolution order: built-in desk defaults, then a config file, then
//! `--set` overrides, then dedicated flags. The resolved form lists every key
//! and parses back to the same configuration.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use evgaze::adsn::AdsnConfig;
use evgaze::events::ClipSpec;
use evgaze::synth::SynthSpec;
use evgaze::training::TrainConfig;
use evgaze::v2e::{FilterKind, V2eParams};
use evgaze::{Error, Result};

/// File name of the resolved configuration written next to outputs.
pub const RESOLVED_FILE: &str = "run.cfg";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub protocol: ClipSpec,
    pub reps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: AdsnConfig,
    pub train: TrainConfig,
    pub v2e: V2eParams,
    pub synth: SynthSpec,
    pub eval: EvalSettings,
}

const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "lr",
    "weight_decay",
    "beta1",
    "beta2",
    "grad_clip",
    "protocol",
    "seed",
];
const V2E_KEYS: &[&str] = &[
    "theta_on",
    "theta_off",
    "sigma_theta",
    "f3db_max",
    "bw_floor",
    "leak_rate",
    "noise_rate_rn",
    "noise_bright_factor_c",
    "filter",
    "seed",
];
const SYNTH_KEYS: &[&str] = &[
    "classes",
    "train_per_class",
    "test_per_class",
    "length_frames",
    "width",
    "height",
    "fps",
    "seed",
];
const EVAL_KEYS: &[&str] = &["protocol", "reps", "seed"];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn filter_name(f: FilterKind) -> &'static str {
    match f {
        FilterKind::Euler => "euler",
        FilterKind::Exact => "exact",
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: AdsnConfig::desk(),
            train: TrainConfig::default(),
            v2e: V2eParams::default(),
            synth: SynthSpec::default(),
            eval: EvalSettings {
                protocol: ClipSpec::new(4, 3).expect("valid"),
                reps: 20,
                seed: 0,
            },
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("unknown key {key:?}: expected section.field")))?;
        let v = value.trim();
        match section {
            "model" => self.model.set(field, v),
            "train" => {
                let t = &mut self.train;
                match field {
                    "epochs" => t.epochs = parse(key, v)?,
                    "batch_size" => t.batch_size = parse(key, v)?,
                    "lr" => t.lr = parse(key, v)?,
                    "weight_decay" => t.weight_decay = parse(key, v)?,
                    "beta1" => t.beta1 = parse(key, v)?,
                    "beta2" => t.beta2 = parse(key, v)?,
                    "grad_clip" => t.grad_clip = parse(key, v)?,
                    "protocol" => t.clip_spec = v.parse()?,
                    "seed" => t.seed = parse(key, v)?,
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }
            "v2e" => {
                let p = &mut self.v2e;
                match field {
                    "theta_on" => p.theta_on = parse(key, v)?,
                    "theta_off" => p.theta_off = parse(key, v)?,
                    "sigma_theta" => p.sigma_theta = parse(key, v)?,
                    "f3db_max" => p.f3db_max = parse(key, v)?,
                    "bw_floor" => p.bw_floor = parse(key, v)?,
                    "leak_rate" => p.leak_rate = parse(key, v)?,
                    "noise_rate_rn" => p.noise_rate_rn = parse(key, v)?,
                    "noise_bright_factor_c" => p.noise_bright_factor_c = parse(key, v)?,
                    "filter" => {
                        p.filter = match v {
                            "euler" => FilterKind::Euler,
                            "exact" => FilterKind::Exact,
                            _ => return Err(Error::Config(format!("{key} must be euler or exact, got {v:?}"))),
                        }
                    }
                    "seed" => p.seed = parse(key, v)?,
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }
            "synth" => {
                let s = &mut self.synth;
                match field {
                    "classes" => s.classes = parse(key, v)?,
                    "train_per_class" => s.train_per_class = parse(key, v)?,
                    "test_per_class" => s.test_per_class = parse(key, v)?,
                    "length_frames" => s.length_frames = parse(key, v)?,
                    "width" => s.width = parse(key, v)?,
                    "height" => s.height = parse(key, v)?,
                    "fps" => s.fps = parse(key, v)?,
                    "seed" => s.seed = parse(key, v)?,
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }
            "eval" => {
                let e = &mut self.eval;
                match field {
                    "protocol" => e.protocol = v.parse()?,
                    "reps" => e.reps = parse(key, v)?,
                    "seed" => e.seed = parse(key, v)?,
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }
            _ => Err(Error::Config(format!("unknown key {key:?}"))),
        }
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (section, field) = key.split_once('.')?;
        Some(match section {
            "model" => return self.model.get(field),
            "train" => {
                let t = &self.train;
                match field {
                    "epochs" => t.epochs.to_string(),
                    "batch_size" => t.batch_size.to_string(),
                    "lr" => t.lr.to_string(),
                    "weight_decay" => t.weight_decay.to_string(),
                    "beta1" => t.beta1.to_string(),
                    "beta2" => t.beta2.to_string(),
                    "grad_clip" => t.grad_clip.to_string(),
                    "protocol" => t.clip_spec.to_string(),
                    "seed" => t.seed.to_string(),
                    _ => return None,
                }
            }
            "v2e" => {
                let p = &self.v2e;
                match field {
                    "theta_on" => p.theta_on.to_string(),
                    "theta_off" => p.theta_off.to_string(),
                    "sigma_theta" => p.sigma_theta.to_string(),
                    "f3db_max" => p.f3db_max.to_string(),
                    "bw_floor" => p.bw_floor.to_string(),
                    "leak_rate" => p.leak_rate.to_string(),
                    "noise_rate_rn" => p.noise_rate_rn.to_string(),
                    "noise_bright_factor_c" => p.noise_bright_factor_c.to_string(),
                    "filter" => filter_name(p.filter).to_string(),
                    "seed" => p.seed.to_string(),
                    _ => return None,
                }
            }
            "synth" => {
                let s = &self.synth;
                match field {
                    "classes" => s.classes.to_string(),
                    "train_per_class" => s.train_per_class.to_string(),
                    "test_per_class" => s.test_per_class.to_string(),
                    "length_frames" => s.length_frames.to_string(),
                    "width" => s.width.to_string(),
                    "height" => s.height.to_string(),
                    "fps" => s.fps.to_string(),
                    "seed" => s.seed.to_string(),
                    _ => return None,
                }
            }
            "eval" => {
                let e = &self.eval;
                match field {
                    "protocol" => e.protocol.to_string(),
                    "reps" => e.reps.to_string(),
                    "seed" => e.seed.to_string(),
                    _ => return None,
                }
            }
            _ => return None,
        })
    }

    /// Every key in a fixed order.
    pub fn keys() -> Vec<String> {
        let mut out: Vec<String> = AdsnConfig::KEYS.iter().map(|k| format!("model.{k}")).collect();
        for (section, keys) in [("train", TRAIN_KEYS), ("v2e", V2E_KEYS), ("synth", SYNTH_KEYS), ("eval", EVAL_KEYS)] {
            out.extend(keys.iter().map(|k| format!("{section}.{k}")));
        }
        out
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key=value", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set {assignment:?}: expected key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.v2e.validate()?;
        self.synth.validate()?;
        if self.eval.reps == 0 {
            return Err(Error::Config("eval.reps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        Self::keys()
            .iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("listed key")))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("model.output_mode", "last_spike").unwrap();
        cfg.set("v2e.f3db_max", "inf").unwrap();
        cfg.set("v2e.filter", "exact").unwrap();
        cfg.set("train.protocol", "E8-S7").unwrap();
        cfg.set("train.lr", "0.0003").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.render(), "test").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.render(), cfg.render());
    }

    #[test]
    fn every_key_is_readable() {
        let cfg = RunConfig::default();
        for k in RunConfig::keys() {
            let v = cfg.get(&k).unwrap_or_else(|| panic!("{k}"));
            let mut c = cfg.clone();
            c.set(&k, &v).unwrap();
            assert_eq!(c, cfg, "{k}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        for bad in ["model.depth", "train.momentum", "nope.x", "epochs", "eval.reps.x"] {
            let e = cfg.set(bad, "1").unwrap_err();
            assert!(e.to_string().contains("unknown"), "{bad}: {e}");
        }
        let e = cfg.apply_text("train.epochs=3\nfoo.bar=1\n", "f.cfg").unwrap_err();
        assert!(e.to_string().contains("f.cfg:2"), "{e}");
    }

    #[test]
    fn later_sources_win() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("train.epochs=7\ntrain.seed=2", "file").unwrap();
        cfg.apply_override("train.epochs=9").unwrap();
        assert_eq!(cfg.train.epochs, 9);
        assert_eq!(cfg.train.seed, 2);
        assert!(cfg.apply_override("train.epochs").is_err());
    }
}
