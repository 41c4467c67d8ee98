//! Surrogate-gradient training through time with Adam.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::adsn::{prepare, Adsn};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::events::{random_start, sample_clip, Clip, ClipSpec};
use crate::nn::{Adam, AdamConfig};
use crate::rng::split;

/// Optimization settings. Desk-scale defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    pub clip_spec: ClipSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            grad_clip: 5.0,
            clip_spec: ClipSpec::new(4, 3).expect("valid"),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("lr must be >= 0 and grad_clip > 0".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Accuracy of the training-mode predictions on the sampled clips.
    pub train_war: f64,
    /// Trainable tensors whose gradient was zero in every batch.
    pub dead_params: Vec<String>,
}

/// Model, optimizer and schedule state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Adsn,
    pub config: TrainConfig,
    opt: Adam,
    epoch: usize,
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best })
}

impl Trainer {
    pub fn new(model: Adsn, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.config.n_steps != config.clip_spec.x {
            return Err(Error::Config(format!(
                "model expects {} steps but clip spec {} has {}",
                model.config.n_steps, config.clip_spec, config.clip_spec.x
            )));
        }
        let opt = Adam::new(config.adam());
        Ok(Self {
            model,
            config,
            opt,
            epoch: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One pass over the dataset in shuffled batches, each sequence
    /// contributing one clip with a fresh random start.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let mut rng = split(self.config.seed, self.epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let starts: Vec<usize> = order
            .iter()
            .map(|&i| random_start(data.sequences[i].len(), &self.config.clip_spec, &mut rng))
            .collect();
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut live: Vec<(String, bool)> =
            self.model.params.trainable().map(|n| (n.to_string(), false)).collect();
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let offset = b * self.config.batch_size;
            let spec = &self.config.clip_spec;
            let clips: Vec<Clip> = chunk
                .par_iter()
                .zip(&starts[offset..offset + chunk.len()])
                .map(|(&i, &s)| sample_clip(&data.sequences[i], spec, s))
                .collect::<Result<_>>()?;
            let refs: Vec<&Clip> = clips.iter().collect();
            let input = prepare(&refs, &self.model.config)?;
            self.model.params.zero_grad();
            let r = self.model.train_batch(&input).map_err(|e| self.diagnose(b, e))?;
            for (name, seen) in live.iter_mut().filter(|(_, seen)| !*seen) {
                *seen = self.model.params.grad(name).iter().any(|&g| g != 0.0);
            }
            self.model.params.clip_grad_norm(self.config.grad_clip);
            self.opt
                .step(&mut self.model.params)
                .map_err(|e| self.diagnose(b, e))?;
            loss_sum += r.loss * chunk.len() as f64;
            correct += r
                .probs
                .iter()
                .zip(&input.labels)
                .filter(|(p, &y)| argmax(p) == y)
                .count();
        }
        self.epoch += 1;
        Ok(EpochStats {
            epoch: self.epoch,
            mean_loss: loss_sum / data.len() as f64,
            train_war: correct as f64 / data.len() as f64,
            dead_params: live.into_iter().filter(|(_, s)| !s).map(|(n, _)| n).collect(),
        })
    }

    fn diagnose(&self, batch: usize, e: Error) -> Error {
        match e {
            Error::NonFinite(msg) => {
                let norms: Vec<String> = self
                    .model
                    .params
                    .trainable()
                    .map(|n| {
                        let t = self.model.params.get(n);
                        let norm = t.data().iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
                        format!("{n}={norm:.4e}")
                    })
                    .collect();
                Error::NonFinite(format!(
                    "{msg} at epoch {}, batch {batch}; parameter norms: {}",
                    self.epoch + 1,
                    norms.join(", ")
                ))
            }
            other => other,
        }
    }

    /// Runs the remaining epochs, reporting each to `on_epoch`.
    pub fn fit(&mut self, data: &Dataset, mut on_epoch: impl FnMut(&EpochStats)) -> Result<Vec<EpochStats>> {
        let mut all = Vec::new();
        while self.epoch < self.config.epochs {
            let s = self.train_epoch(data)?;
            on_epoch(&s);
            all.push(s);
        }
        Ok(all)
    }

    pub fn into_model(self) -> Adsn {
        self.model
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adsn::AdsnConfig;
    use crate::synth::{build_datasets, SynthSpec};
    use crate::v2e::V2eParams;

    fn tiny() -> (Dataset, AdsnConfig) {
        let spec = SynthSpec {
            train_per_class: 1,
            test_per_class: 0,
            length_frames: 20,
            width: 16,
            height: 12,
            ..Default::default()
        };
        let (train, _) = build_datasets(&spec, &V2eParams::default()).unwrap();
        let cfg = AdsnConfig {
            input_height: 12,
            input_width: 16,
            base_channels: 4,
            heads: 2,
            ..Default::default()
        };
        (train, cfg)
    }

    fn trainer(cfg: &AdsnConfig, tc: TrainConfig) -> Trainer {
        Trainer::new(Adsn::new(cfg.clone(), 3).unwrap(), tc).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (data, cfg) = tiny();
        let mut t = trainer(&cfg, TrainConfig { lr: 0.0, epochs: 1, batch_size: 4, ..Default::default() });
        let before = t.model.params.clone();
        t.train_epoch(&data).unwrap();
        for n in before.trainable() {
            assert_eq!(before.get(n).data(), t.model.params.get(n).data(), "{n}");
        }
    }

    #[test]
    fn fixed_seed_repeats_epoch_stats() {
        let (data, cfg) = tiny();
        let tc = TrainConfig { epochs: 2, batch_size: 4, seed: 9, ..Default::default() };
        let a = trainer(&cfg, tc.clone()).fit(&data, |_| {}).unwrap();
        let b = trainer(&cfg, tc).fit(&data, |_| {}).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let (data, cfg) = tiny();
        let mut t = trainer(&cfg, TrainConfig { batch_size: 4, ..Default::default() });
        let s = t.train_epoch(&data).unwrap();
        assert!(s.dead_params.is_empty(), "{:?}", s.dead_params);
    }

    #[test]
    fn memorizes_a_single_sample() {
        let (data, cfg) = tiny();
        let one = Dataset {
            sequences: vec![data.sequences[4].clone()],
            ..data
        };
        let mut t = trainer(&cfg, TrainConfig { epochs: 100, ..Default::default() });
        let stats = t.fit(&one, |_| {}).unwrap();
        let initial = stats[0].mean_loss;
        assert!(stats[19].mean_loss <= 0.5 * initial, "{} -> {}", initial, stats[19].mean_loss);
        let target = 0.01 * 7f64.ln() / 7.0;
        assert!(stats[99].mean_loss < target, "final {} >= {target}", stats[99].mean_loss);
    }

    #[test]
    fn rejects_mismatched_steps() {
        let (_, cfg) = tiny();
        let tc = TrainConfig { clip_spec: ClipSpec::new(8, 7).unwrap(), ..Default::default() };
        assert!(Trainer::new(Adsn::new(cfg, 0).unwrap(), tc).is_err());
    }
}
