use rand::{Rng, SeedableRng};

use super::*;
use crate::events::EventFrame;
use crate::ingest::LumaFrame;
use crate::nn::gradcheck::{check, max_rel_error, probe, test_tensor};

fn small_config() -> AdsnConfig {
    AdsnConfig {
        input_height: 12,
        input_width: 16,
        base_channels: 2,
        heads: 2,
        n_steps: 3,
        head_hidden: 8,
        ..Default::default()
    }
}

fn random_clip(cfg: &AdsnConfig, seed: u64, label: usize) -> Clip {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.input_width, cfg.input_height);
    let grays = (0..cfg.n_steps)
        .map(|i| LumaFrame::new(w, h, (0..w * h).map(|_| rng.gen()).collect(), i as u64).unwrap())
        .collect();
    let event_frames = (0..cfg.n_steps)
        .map(|i| EventFrame {
            width: w,
            height: h,
            on_counts: (0..w * h).map(|_| rng.gen_range(0..3)).collect(),
            off_counts: (0..w * h).map(|_| rng.gen_range(0..3)).collect(),
            t_start_us: i as u64,
            t_end_us: i as u64 + 1,
        })
        .collect();
    Clip {
        event_frames,
        grays,
        label,
        frame_indices: (0..cfg.n_steps).collect(),
    }
}

fn zero_clip(cfg: &AdsnConfig) -> Clip {
    let (w, h) = (cfg.input_width, cfg.input_height);
    Clip {
        event_frames: (0..cfg.n_steps)
            .map(|i| EventFrame {
                width: w,
                height: h,
                on_counts: vec![0; w * h],
                off_counts: vec![0; w * h],
                t_start_us: i as u64,
                t_end_us: i as u64 + 1,
            })
            .collect(),
        grays: (0..cfg.n_steps).map(|i| LumaFrame::filled(w, h, 0, i as u64)).collect(),
        label: 0,
        frame_indices: (0..cfg.n_steps).collect(),
    }
}

/// Binds trainable parameters from f64 leaves and buffers as constants.
fn bind_from(
    g: &mut Graph<f64>,
    model: &Adsn,
    names: &[String],
    leaves: &[Var],
) -> HashMap<String, Var> {
    let mut map: HashMap<String, Var> = names.iter().cloned().zip(leaves.iter().copied()).collect();
    for n in model.params.names() {
        if !map.contains_key(n) {
            let v = g.constant(model.params.get(n).cast());
            map.insert(n.clone(), v);
        }
    }
    map
}

fn trainable_f64(model: &Adsn, filter: impl Fn(&str) -> bool) -> (Vec<String>, Vec<Tensor<f64>>) {
    let names: Vec<String> = model
        .params
        .trainable()
        .filter(|n| filter(n))
        .map(str::to_string)
        .collect();
    let tensors = names.iter().map(|n| model.params.get(n).cast()).collect();
    (names, tensors)
}

#[test]
fn tied_branches_get_equal_weights() {
    let cfg = AdsnConfig {
        attention_scales: vec![3, 5],
        ..small_config()
    };
    let mut model = Adsn::new(cfg.clone(), 1).unwrap();
    // embed the 3×3 kernel in the centre of the 5×5 one
    let w3 = model.params.get("spatial.msa.branch3.w").clone();
    let (co, ci) = (w3.dim(0), w3.dim(1));
    let w5 = model.params.get_mut("spatial.msa.branch5.w").data_mut();
    w5.fill(0.0);
    for o in 0..co {
        for i in 0..ci {
            for y in 0..3 {
                for x in 0..3 {
                    w5[((o * ci + i) * 5 + y + 1) * 5 + x + 1] = w3.data()[((o * ci + i) * 3 + y) * 3 + x];
                }
            }
        }
    }
    let mut g = Graph::<f64>::new();
    let vars = model.bind(&mut g);
    let mut net = Net::new(&cfg, &vars, true, SpikeMode::Binary);
    let x = g.constant(test_tensor(&[2, 2, 9, 9], 3));
    let (branches, omegas) = net.multiscale_weights(&mut g, x, "spatial.msa").unwrap();
    for (a, b) in g.value(branches[0]).data().iter().zip(g.value(branches[1]).data()) {
        assert!((a - b).abs() < 1e-5);
    }
    for &w in &omegas {
        assert!(g.value(w).data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }
}

#[test]
fn multiscale_preserves_shape() {
    let cfg = small_config();
    let model = Adsn::new(cfg.clone(), 2).unwrap();
    for (h, w) in [(7, 7), (9, 13), (12, 8)] {
        let mut g = Graph::<f32>::new();
        let vars = model.bind(&mut g);
        let mut net = Net::new(&cfg, &vars, true, SpikeMode::Binary);
        let x = g.constant(test_tensor(&[1, 2, h, w], 4).cast());
        let y = net.multiscale_attention(&mut g, x, "spatial.msa").unwrap();
        assert_eq!(g.shape(y), [1, 2, h, w]);
    }
}

#[test]
fn multiscale_gradient_matches_finite_differences() {
    let cfg = AdsnConfig {
        attention_scales: vec![3, 5],
        ..small_config()
    };
    let model = Adsn::new(cfg.clone(), 5).unwrap();
    let (names, mut inputs) = trainable_f64(&model, |n| n.starts_with("spatial.msa."));
    inputs.insert(0, test_tensor(&[1, 2, 8, 8], 6));
    let c = check(&inputs, 1e-6, |g, v| {
        let vars = bind_from(g, &model, &names, &v[1..]);
        let mut net = Net::new(&cfg, &vars, true, SpikeMode::Transparent);
        let y = net.multiscale_attention(g, v[0], "spatial.msa")?;
        probe(g, y, 7)
    })
    .unwrap();
    let gate: f64 = c[1..]
        .iter()
        .zip(&names)
        .filter(|(_, n)| n.contains(".gate."))
        .map(|(c, _)| c.analytic.iter().map(|v| v.abs()).sum::<f64>())
        .sum();
    assert!(gate > 0.0, "no gradient reaches the scoring path");
    let e = max_rel_error(&c);
    assert!(e < 1e-5, "rel error {e:e}");
}

#[test]
fn spatial_zero_input_gives_zero_features() {
    let cfg = small_config();
    let model = Adsn::new(cfg.clone(), 8).unwrap();
    let input = prepare(&[&zero_clip(&cfg)], &cfg).unwrap();
    let mut g = Graph::<f32>::new();
    let vars = model.bind(&mut g);
    let mut net = Net::new(&cfg, &vars, true, SpikeMode::Binary);
    let grays = g.constant(input.grays.cast());
    let (fs, js) = net.spatial(&mut g, grays).unwrap();
    assert!(g.value(fs).data().iter().all(|&v| v == 0.0));
    assert!(g.value(js).data().iter().all(|&v| v == 0.0));
}

#[test]
fn spikes_are_binary() {
    let cfg = small_config();
    let model = Adsn::new(cfg.clone(), 9).unwrap();
    let clips: Vec<Clip> = (0..3).map(|i| random_clip(&cfg, i, 0)).collect();
    let refs: Vec<&Clip> = clips.iter().collect();
    let input = prepare(&refs, &cfg).unwrap();
    let mut g = Graph::<f32>::new();
    let vars = model.bind(&mut g);
    let mut net = Net::new(&cfg, &vars, true, SpikeMode::Binary);
    let out = net.forward(&mut g, &input).unwrap();
    for v in [out.spatial_spikes, out.last_spikes] {
        assert!(g.value(v).data().iter().all(|&x| x == 0.0 || x == 1.0));
    }
}

#[test]
fn first_only_duplicates_first_frame() {
    let cfg = AdsnConfig {
        input_mode: InputMode::FirstOnly,
        ..small_config()
    };
    let clip = random_clip(&cfg, 10, 0);
    let input = prepare(&[&clip], &cfg).unwrap();
    let plane = cfg.input_height * cfg.input_width;
    let d = input.grays.data();
    assert_eq!(&d[..plane], &d[plane..2 * plane]);
    let all = AdsnConfig {
        input_mode: InputMode::AllFrames,
        ..small_config()
    };
    assert_eq!(prepare(&[&clip], &all).unwrap().grays.shape()[1], 3);
}

#[test]
fn guide_gate_extremes() {
    let mut g = Graph::<f64>::new();
    let fe = g.constant(test_tensor(&[2, 3, 2, 2], 11));
    let zero = g.constant(Tensor::zeros(&[2, 3, 1, 1]));
    let one = g.constant(Tensor::full(&[2, 3, 1, 1], 1.0));
    let id = Net::gated_residual(&mut g, fe, zero).unwrap();
    assert_eq!(g.value(id).data(), g.value(fe).data());
    let twice = Net::gated_residual(&mut g, fe, one).unwrap();
    for (a, b) in g.value(twice).data().iter().zip(g.value(fe).data()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn guide_with_zero_spatial_features_scales_by_one_and_a_half() {
    let cfg = small_config();
    let model = Adsn::new(cfg.clone(), 12).unwrap();
    for training in [true, false] {
        let mut g = Graph::<f64>::new();
        let vars = model.bind(&mut g);
        let mut net = Net::new(&cfg, &vars, training, SpikeMode::Binary);
        let fs = g.constant(Tensor::zeros(&[2, 8, 3, 4]));
        let fe = g.constant(test_tensor(&[2, 8, 3, 4], 13));
        let out = net.guide_attention(&mut g, fs, fe).unwrap();
        for (a, b) in g.value(out).data().iter().zip(g.value(fe).data()) {
            assert!((a - 1.5 * b).abs() < 1e-12);
        }
    }
}

#[test]
fn mhsa_single_token_is_value_then_output_projection() {
    let cfg = small_config();
    let model = Adsn::new(cfg.clone(), 14).unwrap();
    let mut g = Graph::<f64>::new();
    let vars = model.bind(&mut g);
    let net = Net::new(&cfg, &vars, false, SpikeMode::Binary);
    let x = g.constant(test_tensor(&[2, 1, 8], 15));
    let y = net.mhsa(&mut g, x).unwrap();
    let flat = g.reshape(x, &[2, 8]).unwrap();
    let v = g.linear(flat, vars["attn.v.w"], Some(vars["attn.v.b"])).unwrap();
    let o = g.linear(v, vars["attn.o.w"], Some(vars["attn.o.b"])).unwrap();
    for (a, b) in g.value(y).data().iter().zip(g.value(o).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn mhsa_is_permutation_equivariant() {
    let cfg = small_config();
    let model = Adsn::new(cfg.clone(), 16).unwrap();
    let mut g = Graph::<f64>::new();
    let vars = model.bind(&mut g);
    let net = Net::new(&cfg, &vars, false, SpikeMode::Binary);
    let xt = test_tensor(&[1, 4, 8], 17);
    let perm = [2usize, 0, 3, 1];
    let mut permuted = Vec::new();
    for &p in &perm {
        permuted.extend_from_slice(&xt.data()[p * 8..(p + 1) * 8]);
    }
    let x = g.constant(xt);
    let xp = g.constant(Tensor::new(&[1, 4, 8], permuted).unwrap());
    let y = net.mhsa(&mut g, x).unwrap();
    let yp = net.mhsa(&mut g, xp).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        let a = &g.value(yp).data()[i * 8..(i + 1) * 8];
        let b = &g.value(y).data()[p * 8..(p + 1) * 8];
        for (u, v) in a.iter().zip(b) {
            assert!((u - v).abs() < 1e-12);
        }
    }
    let mut bad = cfg.clone();
    bad.heads = 3;
    let net = Net::new(&bad, &vars, false, SpikeMode::Binary);
    assert!(net.mhsa(&mut g, x).is_err());
}

#[test]
fn mhsa_gradient_matches_finite_differences() {
    let cfg = small_config();
    let model = Adsn::new(cfg.clone(), 18).unwrap();
    let (names, mut inputs) = trainable_f64(&model, |n| n.starts_with("attn."));
    inputs.insert(0, test_tensor(&[2, 3, 8], 19));
    let c = check(&inputs, 1e-6, |g, v| {
        let vars = bind_from(g, &model, &names, &v[1..]);
        let net = Net::new(&cfg, &vars, true, SpikeMode::Transparent);
        let y = net.mhsa(g, v[0])?;
        probe(g, y, 20)
    })
    .unwrap();
    let e = max_rel_error(&c);
    assert!(e < 1e-5, "rel error {e:e}");
}

#[test]
fn zero_input_gives_constant_outputs() {
    let cfg = small_config();
    let model = Adsn::new(cfg.clone(), 21).unwrap();
    let input = prepare(&[&zero_clip(&cfg)], &cfg).unwrap();
    let mut g = Graph::<f32>::new();
    let vars = model.bind(&mut g);
    let mut net = Net::new(&cfg, &vars, false, SpikeMode::Binary);
    let out = net.forward(&mut g, &input).unwrap();
    let first = g.value(out.potentials[0]).data().to_vec();
    assert_eq!(first.len(), 7);
    for &p in &out.potentials[1..] {
        assert_eq!(g.value(p).data(), &first[..]);
    }
}

#[test]
fn temporal_state_carries_memory() {
    let cfg = small_config();
    let model = Adsn::new(cfg.clone(), 22).unwrap();
    let clip = random_clip(&cfg, 23, 0);
    let input = prepare(&[&clip], &cfg).unwrap();
    let run = |reset: bool| {
        let mut g = Graph::<f64>::new();
        let vars = model.bind(&mut g);
        let mut net = Net::new(&cfg, &vars, false, SpikeMode::Binary);
        let grays = g.constant(input.grays.clone());
        let (fs, js) = net.spatial(&mut g, grays).unwrap();
        let jt = net.spatial_tokens(&mut g, js).unwrap();
        let mut state = TemporalState::new();
        let e1 = g.constant(input.events[0].clone());
        net.temporal_step(&mut g, e1, fs, jt, &mut state).unwrap();
        if reset {
            state = TemporalState::new();
        }
        let e2 = g.constant(input.events[1].clone());
        let o = net.temporal_step(&mut g, e2, fs, jt, &mut state).unwrap();
        g.value(o.potential).data().to_vec()
    };
    assert_ne!(run(false), run(true));
}

#[test]
fn readout_modes_and_probabilities() {
    let mut cfg = small_config();
    cfg.n_steps = 1;
    let clip = random_clip(&cfg, 24, 3);
    let mean = Adsn::new(cfg.clone(), 25).unwrap();
    let mut last = mean.clone();
    last.config.output_mode = OutputMode::LastPotential;
    let a = mean.predict_proba(&[&clip]).unwrap();
    let b = last.predict_proba(&[&clip]).unwrap();
    assert_eq!(a, b);
    assert!((a[0].iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert_eq!(a[0].len(), 7);
    assert_eq!(mean.predict_proba(&[&clip]).unwrap(), a);
}

#[test]
fn inference_ignores_batch_position() {
    let cfg = small_config();
    let model = Adsn::new(cfg.clone(), 26).unwrap();
    let clips: Vec<Clip> = (0..3).map(|i| random_clip(&cfg, 30 + i, 0)).collect();
    let fwd = model.predict_proba(&[&clips[0], &clips[1], &clips[2]]).unwrap();
    let rev = model.predict_proba(&[&clips[2], &clips[1], &clips[0]]).unwrap();
    let alone = model.predict_proba(&[&clips[1]]).unwrap();
    for (x, y) in fwd[0].iter().zip(&rev[2]) {
        assert!((x - y).abs() < 1e-6);
    }
    for (x, y) in fwd[1].iter().zip(&alone[0]) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn checkpoint_restores_identical_outputs() {
    let cfg = small_config();
    let model = Adsn::new(cfg.clone(), 27).unwrap();
    let clip = random_clip(&cfg, 28, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let back = Adsn::load(cfg.clone(), &path).unwrap();
    assert_eq!(model.predict_proba(&[&clip]).unwrap(), back.predict_proba(&[&clip]).unwrap());
    let wider = AdsnConfig {
        base_channels: 4,
        ..cfg
    };
    let err = Adsn::load(wider, &path).unwrap_err().to_string();
    assert!(err.contains("spatial.ls.w"), "{err}");
}

#[test]
fn training_step_updates_running_stats_and_grads() {
    let cfg = small_config();
    let mut model = Adsn::new(cfg.clone(), 29).unwrap();
    let clips: Vec<Clip> = (0..4).map(|i| random_clip(&cfg, 40 + i, (i % 7) as usize)).collect();
    let refs: Vec<&Clip> = clips.iter().collect();
    let input = prepare(&refs, &cfg).unwrap();
    let before = model.params.get("spatial.bn1.mean").clone();
    let r = model.train_batch(&input).unwrap();
    assert!(r.loss > 0.0 && r.loss.is_finite());
    assert_ne!(model.params.get("spatial.bn1.mean"), &before);
    assert!(model.params.grad_norm() > 0.0);
}
