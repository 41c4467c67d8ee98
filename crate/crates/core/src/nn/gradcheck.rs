//! Central finite-difference checks of the backward pass.

use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};

/// Analytic vs numeric gradient for one input.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// `max|a - n| / max(max|a|, max|n|)`, zero when both vanish.
    pub fn rel_error(&self) -> f64 {
        let diff = self
            .analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        let scale = self
            .analytic
            .iter()
            .chain(&self.numeric)
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }
}

/// Checks every input of a scalar-valued function built by `f`.
///
/// `f` receives a fresh graph and leaf vars for `inputs`, and must return a
/// single-element node.
pub fn check<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::shape("gradcheck", format!("output {:?}", g.shape(out))));
    }
    g.backward(out)?;

    let mut work = inputs.to_vec();
    let mut res = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * eps));
        }
        res.push(GradCheck { analytic, numeric });
    }
    Ok(res)
}

/// Relative error over the gradient of all inputs taken together: largest
/// absolute deviation divided by the largest gradient magnitude anywhere.
/// Inputs whose true gradient vanishes (a key bias under softmax) are then
/// judged against the scale of the whole gradient.
pub fn max_rel_error(checks: &[GradCheck]) -> f64 {
    let all = GradCheck {
        analytic: checks.iter().flat_map(|c| c.analytic.iter().copied()).collect(),
        numeric: checks.iter().flat_map(|c| c.numeric.iter().copied()).collect(),
    };
    all.rel_error()
}

/// Deterministic pseudo-random tensor in `[-1, 1)` for checks.
pub fn test_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized")
}

/// Fixed random weights that turn a tensor into a scalar probe.
pub fn probe(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let w = test_tensor(g.shape(x), seed ^ 0x5eed).into_data();
    g.weighted_sum(x, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::SpikeMode;

    const EPS: f64 = 1e-6;
    const TOL: f64 = 1e-6;

    fn assert_ok(name: &str, checks: &[GradCheck], tol: f64) {
        let e = max_rel_error(checks);
        assert!(e < tol, "{name}: rel error {e:e}");
    }

    #[test]
    fn conv2d_3x3_stride_1() {
        let inputs = [
            test_tensor(&[2, 3, 5, 5], 1),
            test_tensor(&[4, 3, 3, 3], 2),
            test_tensor(&[4], 3),
        ];
        let c = check(&inputs, EPS, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            probe(g, y, 9)
        })
        .unwrap();
        assert_ok("conv2d", &c, TOL);
    }

    #[test]
    fn conv2d_strided_and_pointwise() {
        let inputs = [test_tensor(&[2, 2, 7, 6], 4), test_tensor(&[3, 2, 3, 3], 5)];
        let c = check(&inputs, EPS, |g, v| {
            let y = g.conv2d(v[0], v[1], None, 2, 1)?;
            probe(g, y, 10)
        })
        .unwrap();
        assert_ok("conv2d stride 2", &c, TOL);
        let inputs = [test_tensor(&[2, 3, 4, 4], 6), test_tensor(&[2, 3, 1, 1], 7)];
        let c = check(&inputs, EPS, |g, v| {
            let y = g.conv2d(v[0], v[1], None, 1, 0)?;
            probe(g, y, 11)
        })
        .unwrap();
        assert_ok("conv2d 1x1", &c, TOL);
    }

    #[test]
    fn batch_norm_training_and_eval() {
        let inputs = [
            test_tensor(&[3, 2, 3, 3], 12),
            test_tensor(&[2], 13),
            test_tensor(&[2], 14),
        ];
        let c = check(&inputs, EPS, |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], None, 1e-5)?;
            probe(g, y, 15)
        })
        .unwrap();
        assert_ok("batch_norm train", &c, TOL);
        let c = check(&inputs, EPS, |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], Some((&[0.1, -0.2], &[0.5, 2.0])), 1e-5)?;
            probe(g, y, 16)
        })
        .unwrap();
        assert_ok("batch_norm eval", &c, TOL);
    }

    #[test]
    fn linear_relu_sigmoid() {
        let inputs = [
            test_tensor(&[3, 5], 20),
            test_tensor(&[4, 5], 21),
            test_tensor(&[4], 22),
        ];
        let c = check(&inputs, EPS, |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            let y = g.sigmoid(y);
            let z = g.relu(v[0]);
            let z = g.scale(z, 0.5);
            let a = probe(g, y, 23)?;
            let b = probe(g, z, 24)?;
            g.add(a, b)
        })
        .unwrap();
        assert_ok("linear/sigmoid/relu", &c, TOL);
    }

    #[test]
    fn pool_softmax_concat_slice_permute() {
        let inputs = [test_tensor(&[2, 3, 5, 7], 30), test_tensor(&[2, 3, 5, 7], 31)];
        let c = check(&inputs, EPS, |g, v| {
            let cat = g.concat(&[v[0], v[1]], 1)?;
            let p = g.adaptive_avg_pool(cat, 2, 3)?;
            let s = g.softmax(p, 1)?;
            let sl = g.slice(s, 1, 2, 3)?;
            let pm = g.permute(sl, &[0, 2, 3, 1])?;
            let r = g.reshape(pm, &[12, 3])?;
            probe(g, r, 32)
        })
        .unwrap();
        assert_ok("pool/softmax/concat/slice/permute", &c, TOL);
    }

    #[test]
    fn mul_channel_and_bmm() {
        let inputs = [
            test_tensor(&[2, 3, 2, 2], 40),
            test_tensor(&[2, 3, 1, 1], 41),
            test_tensor(&[2, 3, 4], 42),
            test_tensor(&[2, 4, 5], 43),
        ];
        let c = check(&inputs, EPS, |g, v| {
            let m = g.mul_channel(v[0], v[1])?;
            let e = g.mul(m, v[0])?;
            let b = g.bmm(v[2], v[3])?;
            let a = probe(g, e, 44)?;
            let bb = probe(g, b, 45)?;
            g.add(a, bb)
        })
        .unwrap();
        assert_ok("mul_channel/bmm", &c, TOL);
    }

    #[test]
    fn lif_potential_transparent() {
        let inputs = [test_tensor(&[2, 3], 50), test_tensor(&[2, 3], 51), test_tensor(&[2, 3], 52)];
        let c = check(&inputs, EPS, |g, v| {
            let v1 = g.lif_potential(None, v[0], 0.2)?;
            let p1 = g.spike(v1, 0.3, 1.0, SpikeMode::Transparent);
            let v2 = g.lif_potential(Some((v1, p1)), v[1], 0.2)?;
            let p2 = g.spike(v2, 0.3, 1.0, SpikeMode::Transparent);
            let v3 = g.lif_potential(Some((v2, p2)), v[2], 0.2)?;
            probe(g, v3, 53)
        })
        .unwrap();
        assert_ok("lif potential", &c, TOL);
    }

    #[test]
    fn cross_entropy_through_softmax() {
        let inputs = [test_tensor(&[3, 7], 60)];
        let c = check(&inputs, EPS, |g, v| {
            let p = g.softmax(v[0], 1)?;
            g.cross_entropy(p, &[0, 6, 3], 1.0 / 7.0)
        })
        .unwrap();
        assert_ok("cross entropy", &c, TOL);
    }

    #[test]
    fn binary_spike_uses_surrogate() {
        let mut g = Graph::<f64>::new();
        let v = g.leaf(Tensor::from_f64(&[3], &[0.3, 0.75, 1.5]).unwrap(), true);
        let p = g.spike(v, 0.3, 1.0, SpikeMode::Binary);
        assert_eq!(g.value(p).data(), &[1.0, 1.0, 1.0]);
        let s = g.weighted_sum(p, vec![1.0; 3]).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[1.0, 1.0, 0.0]);
    }
}
