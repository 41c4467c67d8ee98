//! Evaluation protocol against classifiers with known behavior.

use evgaze::eval::{evaluate_protocol, Classifier};
use evgaze::events::{Clip, ClipSpec};
use evgaze::synth::{build_datasets, SynthSpec};
use evgaze::v2e::V2eParams;
use evgaze::Result;

struct Oracle(usize);

impl Classifier for Oracle {
    fn num_classes(&self) -> usize {
        self.0
    }

    fn predict(&self, clips: &[&Clip]) -> Result<Vec<usize>> {
        Ok(clips.iter().map(|c| c.label).collect())
    }
}

struct Constant(usize);

impl Classifier for Constant {
    fn num_classes(&self) -> usize {
        self.0
    }

    fn predict(&self, clips: &[&Clip]) -> Result<Vec<usize>> {
        Ok(vec![0; clips.len()])
    }
}

fn small() -> SynthSpec {
    SynthSpec {
        train_per_class: 1,
        test_per_class: 3,
        length_frames: 30,
        width: 16,
        height: 12,
        ..SynthSpec::default()
    }
}

#[test]
fn oracle_scores_perfectly() {
    let (_, test) = build_datasets(&small(), &V2eParams::default()).unwrap();
    let spec = ClipSpec::new(4, 3).unwrap();
    let r = evaluate_protocol(&Oracle(7), &test, &spec, 5, 0).unwrap();
    assert_eq!(r.reps.len(), 5);
    assert_eq!(r.war(), (1.0, 0.0));
    assert_eq!(r.uar(), (1.0, 0.0));
    assert_eq!(r.clip_frames(), 13);
}

#[test]
fn constant_prediction_sits_at_chance() {
    let (_, test) = build_datasets(&small(), &V2eParams::default()).unwrap();
    let spec = ClipSpec::new(4, 3).unwrap();
    let r = evaluate_protocol(&Constant(7), &test, &spec, 3, 1).unwrap();
    assert!((r.war().0 - 1.0 / 7.0).abs() < 1e-12);
    assert!((r.uar().0 - 1.0 / 7.0).abs() < 1e-12);
    let acc = r.class_accuracy();
    assert_eq!(acc[0], 1.0);
    assert!(acc[1..].iter().all(|&a| a == 0.0));
}

#[test]
fn longer_protocol_uses_57_frames() {
    let spec = SynthSpec {
        length_frames: 64,
        ..small()
    };
    let (_, test) = build_datasets(&spec, &V2eParams::default()).unwrap();
    let clip = ClipSpec::new(8, 7).unwrap();
    let r = evaluate_protocol(&Oracle(7), &test, &clip, 2, 0).unwrap();
    assert_eq!(r.clip_frames(), 57);
    assert!(r.machine_lines().iter().any(|l| l == "clip_frames=57"));
}

#[test]
fn class_mismatch_is_rejected() {
    let (_, test) = build_datasets(&small(), &V2eParams::default()).unwrap();
    let spec = ClipSpec::new(4, 3).unwrap();
    assert!(evaluate_protocol(&Oracle(5), &test, &spec, 1, 0).is_err());
    assert!(evaluate_protocol(&Oracle(7), &test, &spec, 0, 0).is_err());
}
