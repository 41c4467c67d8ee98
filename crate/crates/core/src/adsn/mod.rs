//! The attention driving-state network.
//!
//! A spatial branch encodes two gray frames once per clip. A spiking
//! temporal branch consumes one event frame per step, is steered by the
//! spatial features through a gated residual, mixes spatial tokens with
//! self-attention and feeds a two-layer spiking head whose membrane
//! potential is the per-step output.

mod config;
pub mod input;

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;

pub use config::{AdsnConfig, EventEncoding, InputMode, OutputMode};
pub use input::{prepare, ModelInput};

use crate::error::{Error, Result};
use crate::events::Clip;
use crate::nn::{BatchStats, Graph, ParamStore, Real, SpikeMode, Tensor, Var};

/// Kind of a named tensor, for initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Weight { fan_in: usize },
    Zero,
    One,
    /// Non-trainable running mean.
    RunningMean,
    /// Non-trainable running variance.
    RunningVar,
}

/// Every tensor the network needs, with shape and init, in a fixed order.
fn param_specs(cfg: &AdsnConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let c = cfg.base_channels;
    let d = cfg.feature_channels();
    let conv = |out: &mut Vec<_>, name: &str, cin: usize, cout: usize, k: usize| {
        out.push((format!("{name}.w"), vec![cout, cin, k, k], Init::Weight { fan_in: cin * k * k }));
        out.push((format!("{name}.b"), vec![cout], Init::Zero));
    };
    let bn = |out: &mut Vec<_>, name: &str, ch: usize| {
        out.push((format!("{name}.gamma"), vec![ch], Init::One));
        out.push((format!("{name}.beta"), vec![ch], Init::Zero));
        out.push((format!("{name}.mean"), vec![ch], Init::RunningMean));
        out.push((format!("{name}.var"), vec![ch], Init::RunningVar));
    };
    let linear = |out: &mut Vec<_>, name: &str, fin: usize, fout: usize| {
        out.push((format!("{name}.w"), vec![fout, fin], Init::Weight { fan_in: fin }));
        out.push((format!("{name}.b"), vec![fout], Init::Zero));
    };
    let msa = |out: &mut Vec<_>, name: &str, cin: usize, cout: usize| {
        for &k in &cfg.attention_scales {
            conv(out, &format!("{name}.branch{k}"), cin, cout, k);
        }
        conv(out, &format!("{name}.gate.c1"), cout, cout, 1);
        bn(out, &format!("{name}.gate.bn"), cout);
        conv(out, &format!("{name}.gate.c2"), cout, cout, 1);
        conv(out, &format!("{name}.fuse"), cfg.attention_scales.len() * cout, cout, 1);
    };

    conv(&mut out, "spatial.ls", cfg.gray_channels(), c, 1);
    msa(&mut out, "spatial.msa", c, c);
    conv(&mut out, "spatial.conv1", c, 2 * c, 3);
    bn(&mut out, "spatial.bn1", 2 * c);
    conv(&mut out, "spatial.conv2", 2 * c, d, 3);

    msa(&mut out, "temporal.msa", 2, c);
    conv(&mut out, "temporal.conv1", c, 2 * c, 3);
    conv(&mut out, "temporal.conv2", 2 * c, d, 3);

    conv(&mut out, "guide.conv", d, d, 1);
    bn(&mut out, "guide.bn", d);

    for p in ["q", "k", "v", "o"] {
        linear(&mut out, &format!("attn.{p}"), d, d);
    }

    let (th, tw) = cfg.token_grid();
    linear(&mut out, "head.fc1", d * th * tw, cfg.head_hidden);
    linear(&mut out, "head.fc2", cfg.head_hidden, cfg.num_classes);
    out
}

/// Per-layer LIF state carried across steps: `(potential, spikes)`.
#[derive(Debug, Clone, Default)]
pub struct TemporalState {
    layers: [Option<(Var, Var)>; 5],
}

impl TemporalState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Output of one temporal step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// Membrane potential of the class layer, `N×K`.
    pub potential: Var,
    /// Spikes of the class layer, `N×K`.
    pub spikes: Var,
    /// Temporal features before the gate, `N×4C×h×w`.
    pub features: Var,
}

/// Nodes produced by a full forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Class probabilities `N×K`.
    pub probs: Var,
    /// Per-step class-layer potentials.
    pub potentials: Vec<Var>,
    pub last_spikes: Var,
    pub spatial_features: Var,
    pub spatial_spikes: Var,
}

/// Graph-building context: bound parameter vars and run mode.
pub struct Net<'a> {
    pub cfg: &'a AdsnConfig,
    pub vars: &'a HashMap<String, Var>,
    pub training: bool,
    pub spike_mode: SpikeMode,
    /// Batch-norm statistics gathered in training mode.
    pub stats: Vec<(String, BatchStats)>,
}

impl<'a> Net<'a> {
    pub fn new(cfg: &'a AdsnConfig, vars: &'a HashMap<String, Var>, training: bool, spike_mode: SpikeMode) -> Self {
        Self {
            cfg,
            vars,
            training,
            spike_mode,
            stats: Vec::new(),
        }
    }

    fn p(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    fn conv<T: Real>(&self, g: &mut Graph<T>, x: Var, name: &str, stride: usize) -> Result<Var> {
        let w = self.p(&format!("{name}.w"));
        let k = g.shape(w)[2];
        g.conv2d(x, w, Some(self.p(&format!("{name}.b"))), stride, k / 2)
    }

    fn linear<T: Real>(&self, g: &mut Graph<T>, x: Var, name: &str) -> Result<Var> {
        g.linear(x, self.p(&format!("{name}.w")), Some(self.p(&format!("{name}.b"))))
    }

    /// Batch norm followed by ReLU.
    fn phi<T: Real>(&mut self, g: &mut Graph<T>, x: Var, name: &str) -> Result<Var> {
        let gamma = self.p(&format!("{name}.gamma"));
        let beta = self.p(&format!("{name}.beta"));
        let (y, stats) = if self.training {
            g.batch_norm(x, gamma, beta, None, self.cfg.bn_eps)?
        } else {
            let mean = g.value(self.p(&format!("{name}.mean"))).data().to_vec();
            let var = g.value(self.p(&format!("{name}.var"))).data().to_vec();
            g.batch_norm(x, gamma, beta, Some((&mean, &var)), self.cfg.bn_eps)?
        };
        if let Some(s) = stats {
            self.stats.push((name.to_string(), s));
        }
        Ok(g.relu(y))
    }

    fn lif<T: Real>(&self, g: &mut Graph<T>, slot: &mut Option<(Var, Var)>, x: Var) -> Result<(Var, Var)> {
        let v = g.lif_potential(*slot, x, self.cfg.alpha)?;
        let p = g.spike(v, self.cfg.theta, self.cfg.surrogate_width, self.spike_mode);
        *slot = Some((v, p));
        Ok((v, p))
    }

    /// Per-branch, per-channel attention weights over the scale branches.
    /// Returns the branch outputs and their weights (`N×C×1×1` each).
    pub fn multiscale_weights<T: Real>(
        &mut self,
        g: &mut Graph<T>,
        x: Var,
        name: &str,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let scales = self.cfg.attention_scales.clone();
        let branches = scales
            .iter()
            .map(|k| self.conv(g, x, &format!("{name}.branch{k}"), 1))
            .collect::<Result<Vec<_>>>()?;
        let n = g.shape(x)[0];
        let c = g.shape(branches[0])[1];
        // One shared scoring path over all branches, stacked on the batch axis.
        let pooled = branches
            .iter()
            .map(|&b| g.adaptive_avg_pool(b, 1, 1))
            .collect::<Result<Vec<_>>>()?;
        let stacked = g.concat(&pooled, 0)?;
        let h = self.conv(g, stacked, &format!("{name}.gate.c1"), 1)?;
        let h = self.phi(g, h, &format!("{name}.gate.bn"))?;
        let scores = self.conv(g, h, &format!("{name}.gate.c2"), 1)?;
        let nb = branches.len();
        let scores = g.reshape(scores, &[nb, n, c])?;
        let weights = g.softmax(scores, 0)?;
        let mut omegas = Vec::with_capacity(nb);
        for j in 0..nb {
            let w = g.slice(weights, 0, j, 1)?;
            omegas.push(g.reshape(w, &[n, c, 1, 1])?);
        }
        Ok((branches, omegas))
    }

    /// Multi-scale attention: weighted scale branches fused by a 1×1 conv.
    pub fn multiscale_attention<T: Real>(&mut self, g: &mut Graph<T>, x: Var, name: &str) -> Result<Var> {
        let (branches, omegas) = self.multiscale_weights(g, x, name)?;
        let weighted = branches
            .iter()
            .zip(&omegas)
            .map(|(&b, &w)| g.mul_channel(b, w))
            .collect::<Result<Vec<_>>>()?;
        let cat = g.concat(&weighted, 1)?;
        self.conv(g, cat, &format!("{name}.fuse"), 1)
    }

    /// Spatial features and their spikes from the gray-frame stack.
    pub fn spatial<T: Real>(&mut self, g: &mut Graph<T>, grays: Var) -> Result<(Var, Var)> {
        let ls = self.conv(g, grays, "spatial.ls", 1)?;
        let att = self.multiscale_attention(g, ls, "spatial.msa")?;
        let res = g.add(att, ls)?;
        let h = self.conv(g, res, "spatial.conv1", 2)?;
        let h = self.phi(g, h, "spatial.bn1")?;
        let fs = self.conv(g, h, "spatial.conv2", 2)?;
        let mut fresh = None;
        let (_, js) = self.lif(g, &mut fresh, fs)?;
        Ok((fs, js))
    }

    /// Channel gate from the product of spatial and temporal features.
    pub fn guide_gate<T: Real>(&mut self, g: &mut Graph<T>, fs: Var, fe: Var) -> Result<Var> {
        let delta = g.mul(fs, fe)?;
        let fc = g.adaptive_avg_pool(delta, 1, 1)?;
        let h = self.conv(g, fc, "guide.conv", 1)?;
        let h = self.phi(g, h, "guide.bn")?;
        Ok(g.sigmoid(h))
    }

    /// `fe·gate + fe`.
    pub fn gated_residual<T: Real>(g: &mut Graph<T>, fe: Var, gate: Var) -> Result<Var> {
        let scaled = g.mul_channel(fe, gate)?;
        g.add(scaled, fe)
    }

    pub fn guide_attention<T: Real>(&mut self, g: &mut Graph<T>, fs: Var, fe: Var) -> Result<Var> {
        let gate = self.guide_gate(g, fs, fe)?;
        Self::gated_residual(g, fe, gate)
    }

    /// Multi-head self-attention over tokens: `N×P×D -> N×P×D`.
    pub fn mhsa<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (n, p, d) = (s[0], s[1], s[2]);
        let heads = self.cfg.heads;
        if d % heads != 0 {
            return Err(Error::shape("mhsa", format!("width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let flat = g.reshape(x, &[n * p, d])?;
        let split = |g: &mut Graph<T>, v: Var, axes: &[usize], shape: &[usize]| -> Result<Var> {
            let v = g.reshape(v, &[n, p, heads, dh])?;
            let v = g.permute(v, axes)?;
            g.reshape(v, shape)
        };
        let q = self.linear(g, flat, "attn.q")?;
        let k = self.linear(g, flat, "attn.k")?;
        let v = self.linear(g, flat, "attn.v")?;
        let q = split(g, q, &[0, 2, 1, 3], &[n * heads, p, dh])?;
        let kt = split(g, k, &[0, 2, 3, 1], &[n * heads, dh, p])?;
        let v = split(g, v, &[0, 2, 1, 3], &[n * heads, p, dh])?;
        let scores = g.bmm(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = g.softmax(scores, 2)?;
        let mixed = g.bmm(att, v)?;
        let mixed = g.reshape(mixed, &[n, heads, p, dh])?;
        let mixed = g.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = g.reshape(mixed, &[n * p, d])?;
        let out = self.linear(g, mixed, "attn.o")?;
        g.reshape(out, &[n, p, d])
    }

    /// `N×D×h×w` feature map to `N×(h·w)×D` tokens after pooling.
    fn tokens<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (th, tw) = self.cfg.token_grid();
        let pooled = g.adaptive_avg_pool(x, th, tw)?;
        let s = g.shape(pooled).to_vec();
        let r = g.reshape(pooled, &[s[0], s[1], th * tw])?;
        g.permute(r, &[0, 2, 1])
    }

    /// Pools the spatial spikes to token resolution, once per clip.
    pub fn spatial_tokens<T: Real>(&self, g: &mut Graph<T>, js: Var) -> Result<Var> {
        self.tokens(g, js)
    }

    /// One step of the temporal branch and head.
    pub fn temporal_step<T: Real>(
        &mut self,
        g: &mut Graph<T>,
        events: Var,
        fs: Var,
        js_tokens: Var,
        state: &mut TemporalState,
    ) -> Result<StepOutput> {
        let s = self.multiscale_attention(g, events, "temporal.msa")?;
        let (_, a) = self.lif(g, &mut state.layers[0], s)?;
        let h = self.conv(g, a, "temporal.conv1", 2)?;
        let (_, b) = self.lif(g, &mut state.layers[1], h)?;
        let fe = self.conv(g, b, "temporal.conv2", 2)?;
        let fcp = self.guide_attention(g, fs, fe)?;
        let tok = self.tokens(g, fcp)?;
        let je = self.mhsa(g, tok)?;
        let (_, c) = self.lif(g, &mut state.layers[2], je)?;
        let jc = g.add(c, js_tokens)?;
        let n = g.shape(jc)[0];
        let width: usize = g.shape(jc)[1..].iter().product();
        let flat = g.reshape(jc, &[n, width])?;
        let h1 = self.linear(g, flat, "head.fc1")?;
        let (_, d) = self.lif(g, &mut state.layers[3], h1)?;
        let o = self.linear(g, d, "head.fc2")?;
        let (potential, spikes) = self.lif(g, &mut state.layers[4], o)?;
        Ok(StepOutput {
            potential,
            spikes,
            features: fe,
        })
    }

    /// Full forward pass over a prepared batch.
    pub fn forward<T: Real>(&mut self, g: &mut Graph<T>, input: &ModelInput) -> Result<ForwardOutput> {
        if input.events.len() != self.cfg.n_steps {
            return Err(Error::Config(format!(
                "input has {} steps, model expects {}",
                input.events.len(),
                self.cfg.n_steps
            )));
        }
        let grays = g.constant(input.grays.cast());
        let (fs, js) = self.spatial(g, grays)?;
        let js_tokens = self.spatial_tokens(g, js)?;
        let mut state = TemporalState::new();
        let mut potentials = Vec::with_capacity(self.cfg.n_steps);
        let mut last_spikes = None;
        for e in &input.events {
            let ev = g.constant(e.cast());
            let out = self.temporal_step(g, ev, fs, js_tokens, &mut state)?;
            potentials.push(out.potential);
            last_spikes = Some(out.spikes);
        }
        let last_spikes = last_spikes.expect("at least one step");
        let logits = match self.cfg.output_mode {
            OutputMode::MeanPotential => {
                let mut acc = potentials[0];
                for &p in &potentials[1..] {
                    acc = g.add(acc, p)?;
                }
                g.scale(acc, 1.0 / potentials.len() as f64)
            }
            OutputMode::LastPotential => *potentials.last().expect("at least one step"),
            OutputMode::LastSpike => last_spikes,
        };
        let probs = g.softmax(logits, 1)?;
        Ok(ForwardOutput {
            probs,
            potentials,
            last_spikes,
            spatial_features: fs,
            spatial_spikes: js,
        })
    }

    /// Cross-entropy with the `1/K` factor.
    pub fn loss<T: Real>(&self, g: &mut Graph<T>, probs: Var, labels: &[usize]) -> Result<Var> {
        g.cross_entropy(probs, labels, 1.0 / self.cfg.num_classes as f64)
    }
}

/// Parameters plus configuration.
#[derive(Debug, Clone)]
pub struct Adsn {
    pub config: AdsnConfig,
    pub params: ParamStore,
}

/// Result of a training-mode forward/backward over one batch.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub loss: f64,
    pub probs: Vec<Vec<f64>>,
}

impl Adsn {
    /// Fresh network: Kaiming-uniform weights, zero biases, unit BN scale.
    pub fn new(config: AdsnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in param_specs(&config) {
            match init {
                Init::Weight { fan_in } => params.add_kaiming(&name, &shape, fan_in, &mut rng),
                Init::Zero => params.add_param(&name, Tensor::zeros(&shape)),
                Init::One => params.add_param(&name, Tensor::full(&shape, 1.0)),
                Init::RunningMean => params.add_buffer(&name, Tensor::zeros(&shape)),
                Init::RunningVar => params.add_buffer(&name, Tensor::full(&shape, 1.0)),
            }
        }
        Ok(Self { config, params })
    }

    /// Loads parameters saved by [`Adsn::save`] into a network of `config`.
    pub fn load(config: AdsnConfig, path: &Path) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.load(path)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    /// Places every parameter and buffer on the graph.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>) -> HashMap<String, Var> {
        self.params
            .names()
            .iter()
            .map(|n| (n.clone(), self.params.var(g, n)))
            .collect()
    }

    /// Inference-mode class probabilities, one row per clip.
    pub fn predict_proba(&self, clips: &[&Clip]) -> Result<Vec<Vec<f64>>> {
        let input = prepare(clips, &self.config)?;
        self.predict_input(&input)
    }

    pub fn predict_input(&self, input: &ModelInput) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::<f32>::new();
        let vars = self.bind(&mut g);
        let mut net = Net::new(&self.config, &vars, false, SpikeMode::Binary);
        let out = net.forward(&mut g, input)?;
        Ok(rows(&g, out.probs))
    }

    /// Training-mode forward and backward. Gradients are added to the
    /// parameter store; running statistics are updated.
    pub fn train_batch(&mut self, input: &ModelInput) -> Result<BatchResult> {
        let mut g = Graph::<f32>::new();
        let vars = self.bind(&mut g);
        let mut net = Net::new(&self.config, &vars, true, SpikeMode::Binary);
        let out = net.forward(&mut g, input)?;
        let loss = net.loss(&mut g, out.probs, &input.labels)?;
        let stats = std::mem::take(&mut net.stats);
        let loss_value = f64::from(g.value(loss).data()[0]);
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("loss is {loss_value}")));
        }
        g.backward(loss)?;
        for name in self.params.trainable().map(str::to_string).collect::<Vec<_>>() {
            if let Some(grad) = g.grad(vars[&name]) {
                self.params.accumulate_grad(&name, grad);
            }
        }
        self.update_running_stats(&stats);
        Ok(BatchResult {
            loss: loss_value,
            probs: rows(&g, out.probs),
        })
    }

    /// Folds batch statistics into the running estimates; several calls of
    /// the same layer in one pass are averaged first.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) {
        let mut grouped: Vec<(&str, Vec<&BatchStats>)> = Vec::new();
        for (name, s) in stats {
            match grouped.iter_mut().find(|(n, _)| n == name) {
                Some((_, v)) => v.push(s),
                None => grouped.push((name, vec![s])),
            }
        }
        let m = self.config.bn_momentum;
        for (name, list) in grouped {
            let k = list.len() as f64;
            for (suffix, pick) in [("mean", 0), ("var", 1)] {
                let t = self.params.get_mut(&format!("{name}.{suffix}"));
                for (i, r) in t.data_mut().iter_mut().enumerate() {
                    let avg = list
                        .iter()
                        .map(|s| if pick == 0 { s.mean[i] } else { s.var[i] })
                        .sum::<f64>()
                        / k;
                    *r = ((1.0 - m) * f64::from(*r) + m * avg) as f32;
                }
            }
        }
    }
}

fn rows<T: Real>(g: &Graph<T>, v: Var) -> Vec<Vec<f64>> {
    let t = g.value(v);
    let k = t.shape()[1];
    t.data()
        .chunks(k)
        .map(|r| r.iter().map(|x| x.as_f64()).collect())
        .collect()
}

#[cfg(test)]
mod tests;
