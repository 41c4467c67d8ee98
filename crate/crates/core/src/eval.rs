//! Recall metrics and the repeated random-start evaluation protocol.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::adsn::Adsn;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::events::{random_start, sample_clip, Clip, ClipSpec};
use crate::rng::split;

/// Rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[&[u64]]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Config("confusion matrix must be square".into()));
        }
        Ok(Self {
            classes: k,
            counts: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth * self.classes..(truth + 1) * self.classes].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    /// Recall of one class, `None` if it has no samples.
    pub fn recall(&self, class: usize) -> Option<f64> {
        let n = self.row_sum(class);
        (n > 0).then(|| self.get(class, class) as f64 / n as f64)
    }

    /// Overall accuracy.
    pub fn war(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Dataset("confusion matrix is empty".into()));
        }
        Ok(self.trace() as f64 / total as f64)
    }

    /// Mean per-class recall; every class needs at least one sample.
    pub fn uar(&self) -> Result<f64> {
        self.uar_named(&[])
    }

    /// As [`ConfusionMatrix::uar`], naming classes by `names` in errors.
    pub fn uar_named(&self, names: &[String]) -> Result<f64> {
        if self.classes == 0 {
            return Err(Error::Dataset("confusion matrix is empty".into()));
        }
        let mut sum = 0.0;
        for c in 0..self.classes {
            let r = self.recall(c).ok_or_else(|| {
                let name = names.get(c).cloned().unwrap_or_else(|| format!("class {c}"));
                Error::Dataset(format!("{name} has no samples, recall undefined"))
            })?;
            sum += r;
        }
        Ok(sum / self.classes as f64)
    }
}

/// Anything that maps clips to class indices.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;
    fn predict(&self, clips: &[&Clip]) -> Result<Vec<usize>>;
}

impl Classifier for Adsn {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn predict(&self, clips: &[&Clip]) -> Result<Vec<usize>> {
        Ok(self
            .predict_proba(clips)?
            .iter()
            .map(|p| (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b }))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepResult {
    pub war: f64,
    pub uar: f64,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolReport {
    pub spec: ClipSpec,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub reps: Vec<RepResult>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl ProtocolReport {
    pub fn clip_frames(&self) -> usize {
        self.spec.duration_frames()
    }

    /// Mean and sample standard deviation of WAR over repetitions.
    pub fn war(&self) -> (f64, f64) {
        mean_std(&self.reps.iter().map(|r| r.war).collect::<Vec<_>>())
    }

    pub fn uar(&self) -> (f64, f64) {
        mean_std(&self.reps.iter().map(|r| r.uar).collect::<Vec<_>>())
    }

    /// Per-class recall averaged over repetitions.
    pub fn class_accuracy(&self) -> Vec<f64> {
        (0..self.class_names.len())
            .map(|c| {
                self.reps.iter().map(|r| r.confusion.recall(c).unwrap_or(0.0)).sum::<f64>()
                    / self.reps.len() as f64
            })
            .collect()
    }

    /// Summed confusion matrix over all repetitions.
    pub fn pooled_confusion(&self) -> ConfusionMatrix {
        let k = self.class_names.len();
        let mut cm = ConfusionMatrix::new(k);
        for r in &self.reps {
            for (a, b) in cm.counts.iter_mut().zip(&r.confusion.counts) {
                *a += b;
            }
        }
        cm
    }

    /// `key=value` lines.
    pub fn machine_lines(&self) -> Vec<String> {
        let (wm, ws) = self.war();
        let (um, us) = self.uar();
        let mut out = vec![
            format!("protocol={}", self.spec),
            format!("clip_frames={}", self.clip_frames()),
            format!("reps={}", self.reps.len()),
            format!("seed={}", self.seed),
            format!("war_mean={wm:.6}"),
            format!("war_std={ws:.6}"),
            format!("uar_mean={um:.6}"),
            format!("uar_std={us:.6}"),
        ];
        for (i, r) in self.reps.iter().enumerate() {
            out.push(format!("rep{i}_war={:.6}", r.war));
            out.push(format!("rep{i}_uar={:.6}", r.uar));
        }
        for (name, acc) in self.class_names.iter().zip(self.class_accuracy()) {
            out.push(format!("class_{name}_acc={acc:.6}"));
        }
        out
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let (wm, ws) = self.war();
        let (um, us) = self.uar();
        let mut s = String::new();
        let _ = writeln!(
            s,
            "protocol {} ({} frames, {:.3} s), {} repetitions",
            self.spec,
            self.clip_frames(),
            self.spec.duration_seconds(),
            self.reps.len()
        );
        let width = self.class_names.iter().map(String::len).max().unwrap_or(5).max(5);
        let _ = writeln!(s, "{:<width$}  accuracy", "class");
        for (name, acc) in self.class_names.iter().zip(self.class_accuracy()) {
            let _ = writeln!(s, "{name:<width$}  {:>7.2}%", 100.0 * acc);
        }
        let _ = writeln!(s, "{:<width$}  {:>7.2}% ± {:.2}", "WAR", 100.0 * wm, 100.0 * ws);
        let _ = writeln!(s, "{:<width$}  {:>7.2}% ± {:.2}", "UAR", 100.0 * um, 100.0 * us);
        s
    }
}

/// Prediction batch size inside one repetition.
const EVAL_BATCH: usize = 64;

/// One random-start clip per test sequence per repetition; repetition `r`
/// draws from stream `split(seed, r)`. Repetitions run in parallel and are
/// assembled in order.
pub fn evaluate_protocol<C: Classifier>(
    model: &C,
    data: &Dataset,
    spec: &ClipSpec,
    reps: usize,
    seed: u64,
) -> Result<ProtocolReport> {
    if data.is_empty() {
        return Err(Error::Dataset("test set is empty".into()));
    }
    if reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    let k = model.num_classes();
    if k != data.num_classes() {
        return Err(Error::Config(format!(
            "model has {k} classes, dataset {}",
            data.num_classes()
        )));
    }
    let results = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = split(seed, r as u64);
            let starts: Vec<usize> = data
                .sequences
                .iter()
                .map(|s| random_start(s.len(), spec, &mut rng))
                .collect();
            let mut cm = ConfusionMatrix::new(k);
            for (seqs, st) in data.sequences.chunks(EVAL_BATCH).zip(starts.chunks(EVAL_BATCH)) {
                let clips = seqs
                    .iter()
                    .zip(st)
                    .map(|(s, &t)| sample_clip(s, spec, t))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&Clip> = clips.iter().collect();
                for (c, p) in clips.iter().zip(model.predict(&refs)?) {
                    cm.add(c.label, p);
                }
            }
            Ok(RepResult {
                war: cm.war()?,
                uar: cm.uar_named(&data.labels)?,
                confusion: cm,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProtocolReport {
        spec: *spec,
        seed,
        class_names: data.labels.clone(),
        reps: results,
    })
}
