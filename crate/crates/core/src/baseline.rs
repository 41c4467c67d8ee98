//! Static single-frame baseline: multinomial logistic regression on the
//! pixels of one gray frame. It sees no motion, so classes that differ only
//! in their dynamics stay at chance for it.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::ingest::LumaFrame;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRegConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.5,
            l2: 1e-3,
        }
    }
}

/// Softmax regression on standardized features.
#[derive(Debug, Clone)]
pub struct LogisticRegression {
    classes: usize,
    dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

pub fn frame_features(frame: &LumaFrame) -> Vec<f64> {
    frame.data.iter().map(|&v| f64::from(v) / 255.0).collect()
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

impl LogisticRegression {
    /// Full-batch gradient descent on the mean cross-entropy plus an L2
    /// penalty.
    pub fn fit(samples: &[(Vec<f64>, usize)], classes: usize, cfg: &LogRegConfig) -> Result<Self> {
        let Some((first, _)) = samples.first() else {
            return Err(Error::Dataset("no training samples".into()));
        };
        let dim = first.len();
        if samples.iter().any(|(x, y)| x.len() != dim || *y >= classes) {
            return Err(Error::Dataset("inconsistent feature length or label".into()));
        }
        let n = samples.len() as f64;
        let mut mean = vec![0.0; dim];
        for (x, _) in samples {
            mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / n);
        }
        let mut std = vec![0.0; dim];
        for (x, _) in samples {
            std.iter_mut()
                .zip(x.iter().zip(&mean))
                .for_each(|(s, (v, m))| *s += (v - m).powi(2) / n);
        }
        std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-6));
        let xs: Vec<Vec<f64>> = samples
            .iter()
            .map(|(x, _)| x.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect())
            .collect();

        let mut model = Self {
            classes,
            dim,
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
            mean,
            std,
        };
        let mut gw = vec![0.0; classes * dim];
        let mut gb = vec![0.0; classes];
        for _ in 0..cfg.epochs {
            gw.fill(0.0);
            gb.fill(0.0);
            for (x, (_, y)) in xs.iter().zip(samples) {
                let mut p = model.logits_std(x);
                softmax_in_place(&mut p);
                p[*y] -= 1.0;
                for (c, &d) in p.iter().enumerate() {
                    gb[c] += d / n;
                    let row = &mut gw[c * dim..(c + 1) * dim];
                    row.iter_mut().zip(x).for_each(|(g, v)| *g += d * v / n);
                }
            }
            for (w, g) in model.weights.iter_mut().zip(&gw) {
                *w -= cfg.lr * (g + cfg.l2 * *w);
            }
            for (b, g) in model.bias.iter_mut().zip(&gb) {
                *b -= cfg.lr * g;
            }
        }
        Ok(model)
    }

    fn logits_std(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                self.bias[c]
                    + self.weights[c * self.dim..(c + 1) * self.dim]
                        .iter()
                        .zip(x)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let xs: Vec<f64> = x
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        let z = self.logits_std(&xs);
        (0..z.len()).fold(0, |best, i| if z[i] > z[best] { i } else { best })
    }
}

/// Trains on every frame of the training sequences whose label is in
/// `labels` and returns the frame-level accuracy on the test sequences.
pub fn single_frame_accuracy(train: &Dataset, test: &Dataset, labels: &[usize], cfg: &LogRegConfig) -> Result<f64> {
    let remap = |l: usize| labels.iter().position(|&k| k == l);
    let collect = |d: &Dataset| -> Vec<(Vec<f64>, usize)> {
        d.sequences
            .iter()
            .filter_map(|s| remap(s.label).map(|y| (s, y)))
            .flat_map(|(s, y)| s.frames.iter().map(move |f| (frame_features(f), y)))
            .collect()
    };
    let tr = collect(train);
    let te = collect(test);
    if te.is_empty() {
        return Err(Error::Dataset("no test frames for the requested labels".into()));
    }
    let model = LogisticRegression::fit(&tr, labels.len(), cfg)?;
    let correct = te.iter().filter(|(x, y)| model.predict(x) == *y).count();
    Ok(correct as f64 / te.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_linearly_separable_data() {
        let samples: Vec<(Vec<f64>, usize)> = (0..40)
            .map(|i| {
                let y = i % 2;
                let x = i as f64 * 0.01;
                (vec![if y == 0 { -1.0 - x } else { 1.0 + x }, x], y)
            })
            .collect();
        let m = LogisticRegression::fit(&samples, 2, &LogRegConfig::default()).unwrap();
        assert!(samples.iter().all(|(x, y)| m.predict(x) == *y));
    }
}
