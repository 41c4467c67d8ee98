//! Finite-difference gradient suite over every differentiable primitive and
//! the complete non-spiking loss path.
//!
//! Spikes are replaced by the identity so the network becomes smooth almost
//! everywhere; the binary spike and its rectangular surrogate are covered by
//! unit tests instead.

use std::collections::HashMap;

use crate::adsn::{Adsn, AdsnConfig, ModelInput, Net};
use crate::error::Result;
use crate::nn::gradcheck::{check, max_rel_error, probe, test_tensor, GradCheck};
use crate::nn::{Graph, SpikeMode, Tensor, Var};

/// Default threshold on the relative error.
pub const TOLERANCE: f64 = 1e-6;
/// Threshold for checks that go through multi-head self-attention.
pub const ATTENTION_TOLERANCE: f64 = 1e-5;
const EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub threshold: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

fn run<F>(name: &'static str, threshold: f64, inputs: &[Tensor<f64>], f: F) -> Result<CheckResult>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let checks: Vec<GradCheck> = check(inputs, EPS, f)?;
    Ok(CheckResult {
        name,
        max_rel_error: max_rel_error(&checks),
        threshold,
    })
}

/// Configuration of the model-level checks: small enough that perturbing
/// every parameter stays fast.
pub fn suite_config() -> AdsnConfig {
    AdsnConfig {
        input_height: 8,
        input_width: 12,
        base_channels: 2,
        attention_scales: vec![3, 5],
        heads: 2,
        n_steps: 2,
        head_hidden: 6,
        num_classes: 3,
        ..Default::default()
    }
}

fn bind(g: &mut Graph<f64>, model: &Adsn, names: &[String], leaves: &[Var]) -> HashMap<String, Var> {
    let mut map: HashMap<String, Var> = names.iter().cloned().zip(leaves.iter().copied()).collect();
    for n in model.params.names() {
        if !map.contains_key(n) {
            let v = g.constant(model.params.get(n).cast());
            map.insert(n.clone(), v);
        }
    }
    map
}

fn params_with(model: &Adsn, prefix: &str) -> (Vec<String>, Vec<Tensor<f64>>) {
    let names: Vec<String> = model
        .params
        .trainable()
        .filter(|n| n.starts_with(prefix))
        .map(str::to_string)
        .collect();
    let tensors = names.iter().map(|n| model.params.get(n).cast()).collect();
    (names, tensors)
}

fn unit_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let t = test_tensor(shape, seed);
    let data = t.data().iter().map(|v| 0.5 * (v + 1.0)).collect();
    Tensor::new(shape, data).expect("sized")
}

fn suite_input(cfg: &AdsnConfig) -> ModelInput {
    let (h, w) = (cfg.input_height, cfg.input_width);
    ModelInput {
        grays: unit_tensor(&[2, cfg.gray_channels(), h, w], 900),
        events: (0..cfg.n_steps)
            .map(|t| unit_tensor(&[2, 2, h, w], 901 + t as u64))
            .collect(),
        labels: vec![0, 2],
    }
}

fn primitive_checks() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    out.push(run(
        "conv2d",
        TOLERANCE,
        &[test_tensor(&[2, 3, 5, 5], 1), test_tensor(&[4, 3, 3, 3], 2), test_tensor(&[4], 3)],
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            probe(g, y, 9)
        },
    )?);
    out.push(run(
        "conv2d_stride2",
        TOLERANCE,
        &[test_tensor(&[2, 2, 7, 6], 4), test_tensor(&[3, 2, 3, 3], 5)],
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, 2, 1)?;
            probe(g, y, 10)
        },
    )?);
    out.push(run(
        "conv2d_1x1",
        TOLERANCE,
        &[test_tensor(&[2, 3, 4, 4], 6), test_tensor(&[2, 3, 1, 1], 7)],
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, 1, 0)?;
            probe(g, y, 11)
        },
    )?);
    let bn_inputs = [test_tensor(&[3, 2, 3, 3], 12), test_tensor(&[2], 13), test_tensor(&[2], 14)];
    out.push(run("batch_norm_train", TOLERANCE, &bn_inputs, |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], None, 1e-5)?;
        probe(g, y, 15)
    })?);
    out.push(run("batch_norm_eval", TOLERANCE, &bn_inputs, |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], Some((&[0.1, -0.2], &[0.5, 2.0])), 1e-5)?;
        probe(g, y, 16)
    })?);
    out.push(run(
        "linear",
        TOLERANCE,
        &[test_tensor(&[3, 5], 20), test_tensor(&[4, 5], 21), test_tensor(&[4], 22)],
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            probe(g, y, 23)
        },
    )?);
    let x = [test_tensor(&[4, 6], 24)];
    out.push(run("relu", TOLERANCE, &x, |g, v| {
        let y = g.relu(v[0]);
        probe(g, y, 25)
    })?);
    out.push(run("sigmoid", TOLERANCE, &x, |g, v| {
        let y = g.sigmoid(v[0]);
        probe(g, y, 26)
    })?);
    out.push(run("scale_add_mul", TOLERANCE, &[test_tensor(&[4, 6], 27), test_tensor(&[4, 6], 28)], |g, v| {
        let s = g.scale(v[0], -1.5);
        let a = g.add(s, v[1])?;
        let m = g.mul(a, v[0])?;
        probe(g, m, 29)
    })?);
    out.push(run("adaptive_avg_pool", TOLERANCE, &[test_tensor(&[2, 3, 5, 7], 30)], |g, v| {
        let y = g.adaptive_avg_pool(v[0], 2, 3)?;
        probe(g, y, 31)
    })?);
    out.push(run("softmax", TOLERANCE, &[test_tensor(&[3, 4, 5], 32)], |g, v| {
        let y = g.softmax(v[0], 1)?;
        probe(g, y, 33)
    })?);
    out.push(run(
        "concat_slice",
        TOLERANCE,
        &[test_tensor(&[2, 3, 2, 2], 34), test_tensor(&[2, 1, 2, 2], 35)],
        |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let s = g.slice(c, 1, 1, 3)?;
            probe(g, s, 36)
        },
    )?);
    out.push(run("permute_reshape", TOLERANCE, &[test_tensor(&[2, 3, 4], 37)], |g, v| {
        let p = g.permute(v[0], &[2, 0, 1])?;
        let r = g.reshape(p, &[8, 3])?;
        probe(g, r, 38)
    })?);
    out.push(run(
        "mul_channel",
        TOLERANCE,
        &[test_tensor(&[2, 3, 2, 2], 40), test_tensor(&[2, 3, 1, 1], 41)],
        |g, v| {
            let y = g.mul_channel(v[0], v[1])?;
            probe(g, y, 42)
        },
    )?);
    out.push(run("bmm", TOLERANCE, &[test_tensor(&[2, 3, 4], 43), test_tensor(&[2, 4, 5], 44)], |g, v| {
        let y = g.bmm(v[0], v[1])?;
        probe(g, y, 45)
    })?);
    out.push(run(
        "lif_potential",
        TOLERANCE,
        &[test_tensor(&[2, 3], 50), test_tensor(&[2, 3], 51), test_tensor(&[2, 3], 52)],
        |g, v| {
            let v1 = g.lif_potential(None, v[0], 0.2)?;
            let p1 = g.spike(v1, 0.3, 1.0, SpikeMode::Transparent);
            let v2 = g.lif_potential(Some((v1, p1)), v[1], 0.2)?;
            let p2 = g.spike(v2, 0.3, 1.0, SpikeMode::Transparent);
            let v3 = g.lif_potential(Some((v2, p2)), v[2], 0.2)?;
            probe(g, v3, 53)
        },
    )?);
    out.push(run("cross_entropy", TOLERANCE, &[test_tensor(&[3, 7], 60)], |g, v| {
        let p = g.softmax(v[0], 1)?;
        g.cross_entropy(p, &[0, 6, 3], 1.0 / 7.0)
    })?);
    Ok(out)
}

fn model_checks() -> Result<Vec<CheckResult>> {
    let cfg = suite_config();
    let model = Adsn::new(cfg.clone(), 77)?;
    let mut out = Vec::new();
    let c = cfg.base_channels;

    let (names, mut inputs) = params_with(&model, "spatial.msa.");
    inputs.insert(0, test_tensor(&[2, c, 6, 6], 70));
    out.push(run("multiscale_attention", TOLERANCE, &inputs, |g, v| {
        let vars = bind(g, &model, &names, &v[1..]);
        let mut net = Net::new(&cfg, &vars, true, SpikeMode::Transparent);
        let y = net.multiscale_attention(g, v[0], "spatial.msa")?;
        probe(g, y, 71)
    })?);

    let (names, mut inputs) = params_with(&model, "guide.");
    let d = cfg.feature_channels();
    inputs.insert(0, test_tensor(&[2, d, 2, 3], 72));
    inputs.insert(1, test_tensor(&[2, d, 2, 3], 73));
    out.push(run("guide_attention", TOLERANCE, &inputs, |g, v| {
        let vars = bind(g, &model, &names, &v[2..]);
        let mut net = Net::new(&cfg, &vars, true, SpikeMode::Transparent);
        let y = net.guide_attention(g, v[0], v[1])?;
        probe(g, y, 74)
    })?);

    let (names, mut inputs) = params_with(&model, "attn.");
    inputs.insert(0, test_tensor(&[2, 3, d], 75));
    out.push(run("mhsa", ATTENTION_TOLERANCE, &inputs, |g, v| {
        let vars = bind(g, &model, &names, &v[1..]);
        let net = Net::new(&cfg, &vars, true, SpikeMode::Transparent);
        let y = net.mhsa(g, v[0])?;
        probe(g, y, 76)
    })?);

    let (names, inputs) = params_with(&model, "");
    let input = suite_input(&cfg);
    out.push(run("model_loss", TOLERANCE, &inputs, |g, v| {
        let vars = bind(g, &model, &names, v);
        let mut net = Net::new(&cfg, &vars, true, SpikeMode::Transparent);
        let fwd = net.forward(g, &input)?;
        net.loss(g, fwd.probs, &input.labels)
    })?);
    Ok(out)
}

/// Runs every check in a fixed order.
pub fn gradient_suite() -> Result<Vec<CheckResult>> {
    let mut out = primitive_checks()?;
    out.extend(model_checks()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let results = gradient_suite().unwrap();
        assert!(results.len() >= 20);
        for r in &results {
            assert!(r.passed(), "{}: {:e} >= {:e}", r.name, r.max_rel_error, r.threshold);
        }
    }
}
