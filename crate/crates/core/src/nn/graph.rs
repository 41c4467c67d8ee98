//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its value and enough context to
//! run its backward rule. Inputs always precede outputs on the tape, so
//! [`Graph::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::nn::conv::{col2im, conv_out_len, im2col};
use crate::nn::{gemm, Layout, Real, Tensor};

/// Probability floor inside the cross-entropy log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeMode {
    /// Heaviside forward, rectangular surrogate backward.
    Binary,
    /// Identity; keeps the whole network smooth for finite-difference checks.
    Transparent,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulChannel {
        x: Var,
        g: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    AvgPool {
        x: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Bmm(Var, Var),
    LifPotential {
        v_prev: Option<(Var, Var)>,
        x: Var,
        alpha: T,
    },
    Spike {
        v: Var,
        theta: T,
        width: T,
        mode: SpikeMode,
    },
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
        scale: T,
    },
    WeightedSum {
        x: Var,
        w: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm, for the caller
/// to fold into running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, axis, inner)` factorization of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor::new(v.shape(), v.data().iter().map(|&a| f(a)).collect()).expect("same size")
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("same size")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let out = self.zip(a, b, |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let out = self.zip(a, b, |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.map(x, |a| a * c);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// `x (N×C×…) * g (N×C×1×…)`, the gate broadcast over trailing dims.
    pub fn mul_channel(&mut self, x: Var, g: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let gs = self.shape(g);
        if xs.len() < 2 || gs.len() < 2 || xs[..2] != gs[..2] || gs[2..].iter().any(|&d| d != 1) {
            return Err(Error::shape("mul_channel", format!("{xs:?} by {gs:?}")));
        }
        let inner: usize = xs[2..].iter().product();
        let gv = self.value(g).data();
        let data = self
            .value(x)
            .data()
            .chunks(inner)
            .zip(gv)
            .flat_map(|(row, &s)| row.iter().map(move |&v| v * s))
            .collect();
        let out = Tensor::new(&xs, data)?;
        let rg = self.any_grad(&[x, g]);
        Ok(self.push(out, Op::MulChannel { x, g }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |a| a.max(T::zero()));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, |a| T::one() / (T::one() + (-a).exp()));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Cross-correlation of `N×C×H×W` with `K×C×k×k`, zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?}, weight {ws:?}, stride {stride}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {} filters", self.shape(b), ws[0]),
                ));
            }
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, ksz) = (ws[0], ws[2]);
        let ho = conv_out_len(h, ksz, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {ksz} larger than padded {h}")))?;
        let wo = conv_out_len(wd, ksz, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {ksz} larger than padded {wd}")))?;
        let p = ho * wo;
        let rows = c * ksz * ksz;
        let direct = ksz == 1 && stride == 1 && pad == 0;
        let mut out = vec![T::zero(); n * k * p];
        let mut cols = vec![T::zero(); if direct { 0 } else { rows * p }];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..n {
            let xn = &xv[s * c * h * wd..(s + 1) * c * h * wd];
            let src: &[T] = if direct {
                xn
            } else {
                im2col(xn, c, h, wd, ksz, stride, pad, ho, wo, &mut cols);
                &cols
            };
            let on = &mut out[s * k * p..(s + 1) * k * p];
            gemm(k, rows, p, wv, Layout::rows(rows), src, Layout::rows(p), T::zero(), on, Layout::rows(p));
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (row, &bias) in on.chunks_mut(p).zip(bv) {
                    row.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let out = Tensor::new(&[n, k, ho, wo], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// `x (N×F) · wᵀ (F×O) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", format!("input {xs:?}, weight {ws:?}")));
        }
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("linear", format!("bias {:?} for {o} outputs", self.shape(b))));
            }
        }
        let mut out = vec![T::zero(); n * o];
        gemm(
            n,
            f,
            o,
            self.value(x).data(),
            Layout::rows(f),
            self.value(w).data(),
            Layout::transposed(f),
            T::zero(),
            &mut out,
            Layout::rows(o),
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                add_into(row, bv);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(Tensor::new(&[n, o], out)?, Op::Linear { x, w, b }, rg))
    }

    /// Per-channel normalization over all dims except 1. Training mode uses
    /// batch statistics and returns them; otherwise `running` is used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(Error::shape(
                "batch_norm",
                format!("input {xs:?}, gamma {:?}", self.shape(gamma)),
            ));
        }
        let (n, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        let m = n * inner;
        let xv = self.value(x).data();
        let (mean, var, stats) = match running {
            Some((rm, rv)) => (
                rm.iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
                rv.iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
                None,
            ),
            None => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for s in 0..n {
                    for ch in 0..c {
                        let row = &xv[(s * c + ch) * inner..(s * c + ch + 1) * inner];
                        mean[ch] += row.iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                for s in 0..n {
                    for ch in 0..c {
                        let row = &xv[(s * c + ch) * inner..(s * c + ch + 1) * inner];
                        var[ch] += row.iter().map(|v| (v.as_f64() - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                let unbiased = var
                    .iter()
                    .map(|v| if m > 1 { v / (m - 1) as f64 } else { 0.0 })
                    .collect();
                var.iter_mut().for_each(|v| *v /= m as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * inner;
                let mu = T::from_f64(mean[ch]);
                for i in base..base + inner {
                    let h = (xv[i] - mu) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let training = stats.is_some();
        let rg = self.any_grad(&[x, gamma, beta]);
        let v = self.push(
            Tensor::new(&xs, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Adaptive average pooling of `N×C×H×W` to `N×C×oh×ow`.
    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || oh == 0 || ow == 0 || oh > xs[2] || ow > xs[3] {
            return Err(Error::shape("adaptive_avg_pool", format!("{xs:?} to {oh}x{ow}")));
        }
        let (h, w) = (xs[2], xs[3]);
        let planes = xs[0] * xs[1];
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        for pl in 0..planes {
            let src = &xv[pl * h * w..(pl + 1) * h * w];
            for (y0, y1) in pool_bins(h, oh) {
                for (x0, x1) in pool_bins(w, ow) {
                    let mut acc = T::zero();
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            acc += src[yy * w + xx];
                        }
                    }
                    out.push(acc / T::from_f64(((y1 - y0) * (x1 - x0)) as f64));
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[xs[0], xs[1], oh, ow], out)?, Op::AvgPool { x }, rg))
    }

    /// Softmax along `axis`, max-shifted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::shape("softmax", format!("axis {axis} of {xs:?}")));
        }
        let (outer, len, inner) = split_axis(&xs, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mx = (0..len).map(|k| xv[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut sum = 0.0f64;
                for k in 0..len {
                    let e = (xv[idx(k)] - mx).exp();
                    out[idx(k)] = e;
                    sum += e.as_f64();
                }
                let inv = T::from_f64(1.0 / sum);
                for k in 0..len {
                    out[idx(k)] *= inv;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&xs, out)?, Op::Softmax { x, axis }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let rg = self.any_grad(xs);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] || len == 0 {
            return Err(Error::shape("slice", format!("{start}+{len} on axis {axis} of {xs:?}")));
        }
        let (outer, full, inner) = split_axis(&xs, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Output dim `i` is input dim `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len() || axes.iter().any(|&a| a >= xs.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} for {xs:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| xs[a]).collect();
        let data = permute_data(self.value(x).data(), &xs, axes);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Batched matmul `B×M×K · B×K×N`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bt * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..bt {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                Layout::rows(k),
                &bv[i * k * n..(i + 1) * k * n],
                Layout::rows(n),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                Layout::rows(n),
            );
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[bt, m, n], out)?, Op::Bmm(a, b), rg))
    }

    /// Membrane update `V = alpha·V_prev·(1 - P_prev) + X`; with no previous
    /// state `V = X`.
    pub fn lif_potential(&mut self, prev: Option<(Var, Var)>, x: Var, alpha: f64) -> Result<Var> {
        let alpha = T::from_f64(alpha);
        let out = match prev {
            None => self.value(x).clone(),
            Some((v, p)) => {
                same_shape("lif_potential", self.shape(v), self.shape(x))?;
                same_shape("lif_potential", self.shape(p), self.shape(x))?;
                let (vv, pv, xv) = (self.value(v).data(), self.value(p).data(), self.value(x).data());
                let data = (0..xv.len())
                    .map(|i| alpha * vv[i] * (T::one() - pv[i]) + xv[i])
                    .collect();
                Tensor::new(self.shape(x), data)?
            }
        };
        let mut deps = vec![x];
        if let Some((v, p)) = prev {
            deps.extend([v, p]);
        }
        let rg = self.any_grad(&deps);
        Ok(self.push(
            out,
            Op::LifPotential {
                v_prev: prev,
                x,
                alpha,
            },
            rg,
        ))
    }

    /// `P = h(V - theta)` with `h(0) = 1`.
    pub fn spike(&mut self, v: Var, theta: f64, width: f64, mode: SpikeMode) -> Var {
        let theta_t = T::from_f64(theta);
        let out = match mode {
            SpikeMode::Binary => self.map(v, |a| if a - theta_t >= T::zero() { T::one() } else { T::zero() }),
            SpikeMode::Transparent => self.value(v).clone(),
        };
        let rg = self.any_grad(&[v]);
        self.push(
            out,
            Op::Spike {
                v,
                theta: theta_t,
                width: T::from_f64(width),
                mode,
            },
            rg,
        )
    }

    /// Batch mean of `-scale·ln(max(p[label], 1e-12))` over rows of `N×K`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize], scale: f64) -> Result<Var> {
        let s = self.shape(probs).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", format!("{s:?} with {} labels", labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(Error::Config(format!("label {l} out of range for {} classes", s[1])));
        }
        let pv = self.value(probs).data();
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(n, &l)| -scale * pv[n * s[1] + l].as_f64().max(PROB_FLOOR).ln())
            .sum();
        let out = Tensor::scalar(T::from_f64(total / labels.len() as f64));
        let rg = self.any_grad(&[probs]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
                scale: T::from_f64(scale),
            },
            rg,
        ))
    }

    /// `Σ w_i x_i`, a scalar probe for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, w: Vec<T>) -> Result<Var> {
        if w.len() != self.value(x).numel() {
            return Err(Error::shape("weighted_sum", format!("{} weights", w.len())));
        }
        let s: f64 = self.value(x).data().iter().zip(&w).map(|(a, b)| (*a * *b).as_f64()).sum();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(T::from_f64(s)), Op::WeightedSum { x, w }, rg))
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => add_into(acc, &g),
            None => node.grad = Some(g),
        }
    }

    /// Seeds `d loss = 1` and propagates to every node that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss shape {:?}", self.shape(loss))));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.backward_node(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, gv) in contribs {
                self.accumulate(v, gv);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.to_vec()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    res.push((*a, g.iter().zip(bv).map(|(&d, &y)| d * y).collect()));
                }
                if self.wants(*b) {
                    res.push((*b, g.iter().zip(av).map(|(&d, &x)| d * x).collect()));
                }
            }
            Op::Scale(x, c) => res.push((*x, g.iter().map(|&d| d * *c).collect())),
            Op::MulChannel { x, g: gate } => {
                let xv = self.value(*x);
                let inner: usize = xv.shape()[2..].iter().product();
                let gv = self.value(*gate).data();
                if self.wants(*x) {
                    let dx = g
                        .chunks(inner)
                        .zip(gv)
                        .flat_map(|(row, &s)| row.iter().map(move |&d| d * s))
                        .collect();
                    res.push((*x, dx));
                }
                if self.wants(*gate) {
                    let dg = g
                        .chunks(inner)
                        .zip(xv.data().chunks(inner))
                        .map(|(dr, xr)| dr.iter().zip(xr).fold(T::zero(), |acc, (&d, &v)| acc + d * v))
                        .collect();
                    res.push((*gate, dg));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                res.push((*x, g.iter().zip(xv).map(|(&d, &v)| if v > T::zero() { d } else { T::zero() }).collect()));
            }
            Op::Sigmoid(x) => {
                res.push((*x, g.iter().zip(out).map(|(&d, &s)| d * s * (T::one() - s)).collect()));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.conv_backward(*x, *w, *b, *stride, *pad, node.value.shape(), g, &mut res);
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, f) = (xs[0], xs[1]);
                let o = self.shape(*w)[0];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * f];
                    gemm(n, o, f, g, Layout::rows(o), self.value(*w).data(), Layout::rows(f), T::zero(), &mut dx, Layout::rows(f));
                    res.push((*x, dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); o * f];
                    gemm(o, n, f, g, Layout::transposed(o), self.value(*x).data(), Layout::rows(f), T::zero(), &mut dw, Layout::rows(f));
                    res.push((*w, dw));
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); o];
                    for row in g.chunks(o) {
                        add_into(&mut db, row);
                    }
                    res.push((*b, db));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let m = (n * inner) as f64;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * inner;
                        for j in base..base + inner {
                            dgamma[ch] += (g[j] * xhat[j]).as_f64();
                            dbeta[ch] += g[j].as_f64();
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * inner;
                            let scale = gv[ch] * inv_std[ch];
                            for j in base..base + inner {
                                dx[j] = if *training {
                                    // dx = γ/σ · (g - mean(g) - x̂·mean(g·x̂))
                                    scale
                                        * (g[j]
                                            - T::from_f64(dbeta[ch] / m)
                                            - xhat[j] * T::from_f64(dgamma[ch] / m))
                                } else {
                                    scale * g[j]
                                };
                            }
                        }
                    }
                    res.push((*x, dx));
                }
                res.push((*gamma, dgamma.into_iter().map(T::from_f64).collect()));
                res.push((*beta, dbeta.into_iter().map(T::from_f64).collect()));
            }
            Op::AvgPool { x } => {
                let xs = self.shape(*x);
                let (h, w) = (xs[2], xs[3]);
                let os = node.value.shape();
                let (oh, ow) = (os[2], os[3]);
                let planes = xs[0] * xs[1];
                let mut dx = vec![T::zero(); planes * h * w];
                for pl in 0..planes {
                    let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
                    let mut k = pl * oh * ow;
                    for (y0, y1) in pool_bins(h, oh) {
                        for (x0, x1) in pool_bins(w, ow) {
                            let d = g[k] / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    dst[yy * w + xx] += d;
                                }
                            }
                            k += 1;
                        }
                    }
                }
                res.push((*x, dx));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot = (0..len).fold(T::zero(), |acc, k| acc + g[idx(k)] * out[idx(k)]);
                        for k in 0..len {
                            dx[idx(k)] = out[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                res.push((*x, dx));
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            d.extend_from_slice(&g[from..from + len * inner]);
                        }
                        res.push((v, d));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, full, inner) = split_axis(xs, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    let to = (o * full + start) * inner;
                    dx[to..to + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                res.push((*x, dx));
            }
            Op::Reshape(x) => res.push((*x, g.to_vec())),
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                res.push((*x, permute_data(g, node.value.shape(), &inverse)));
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let mut da = vec![T::zero(); bt * m * k];
                    for i in 0..bt {
                        gemm(m, n, k, &g[i * m * n..(i + 1) * m * n], Layout::rows(n), &bv[i * k * n..(i + 1) * k * n], Layout::transposed(n), T::zero(), &mut da[i * m * k..(i + 1) * m * k], Layout::rows(k));
                    }
                    res.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); bt * k * n];
                    for i in 0..bt {
                        gemm(k, m, n, &av[i * m * k..(i + 1) * m * k], Layout::transposed(k), &g[i * m * n..(i + 1) * m * n], Layout::rows(n), T::zero(), &mut db[i * k * n..(i + 1) * k * n], Layout::rows(n));
                    }
                    res.push((*b, db));
                }
            }
            Op::LifPotential { v_prev, x, alpha } => {
                res.push((*x, g.to_vec()));
                if let Some((v, p)) = v_prev {
                    let (vv, pv) = (self.value(*v).data(), self.value(*p).data());
                    if self.wants(*v) {
                        res.push((*v, g.iter().zip(pv).map(|(&d, &s)| d * *alpha * (T::one() - s)).collect()));
                    }
                    if self.wants(*p) {
                        res.push((*p, g.iter().zip(vv).map(|(&d, &u)| -d * *alpha * u).collect()));
                    }
                }
            }
            Op::Spike { v, theta, width, mode } => match mode {
                SpikeMode::Transparent => res.push((*v, g.to_vec())),
                SpikeMode::Binary => {
                    let vv = self.value(*v).data();
                    let dx = g
                        .iter()
                        .zip(vv)
                        .map(|(&d, &u)| d * surrogate(u - *theta, *width))
                        .collect();
                    res.push((*v, dx));
                }
            },
            Op::CrossEntropy { probs, labels, scale } => {
                let s = self.shape(*probs);
                let k = s[1];
                let pv = self.value(*probs).data();
                let nrm = T::from_f64(labels.len() as f64);
                let mut dp = vec![T::zero(); pv.len()];
                for (n, &l) in labels.iter().enumerate() {
                    let p = pv[n * k + l];
                    if p.as_f64() > PROB_FLOOR {
                        dp[n * k + l] = -g[0] * *scale / (p * nrm);
                    }
                }
                res.push((*probs, dp));
            }
            Op::WeightedSum { x, w } => res.push((*x, w.iter().map(|&c| c * g[0]).collect())),
        }
        res
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_shape: &[usize],
        g: &[T],
        res: &mut Vec<(Var, Vec<T>)>,
    ) {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, ksz) = (ws[0], ws[2]);
        let (ho, wo) = (out_shape[2], out_shape[3]);
        let p = ho * wo;
        let rows = c * ksz * ksz;
        let direct = ksz == 1 && stride == 1 && pad == 0;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let mut dw = vec![T::zero(); if want_w { k * rows } else { 0 }];
        let mut dx = vec![T::zero(); if want_x { xv.len() } else { 0 }];
        let mut cols = vec![T::zero(); if direct { 0 } else { rows * p }];
        let mut dcols = vec![T::zero(); rows * p];
        for s in 0..n {
            let gn = &g[s * k * p..(s + 1) * k * p];
            if want_w {
                let xn = &xv[s * c * h * wd..(s + 1) * c * h * wd];
                let src: &[T] = if direct {
                    xn
                } else {
                    im2col(xn, c, h, wd, ksz, stride, pad, ho, wo, &mut cols);
                    &cols
                };
                gemm(k, p, rows, gn, Layout::rows(p), src, Layout::transposed(p), T::one(), &mut dw, Layout::rows(rows));
            }
            if want_x {
                let dxn = &mut dx[s * c * h * wd..(s + 1) * c * h * wd];
                if direct {
                    gemm(rows, k, p, wv, Layout::transposed(rows), gn, Layout::rows(p), T::one(), dxn, Layout::rows(p));
                } else {
                    gemm(rows, k, p, wv, Layout::transposed(rows), gn, Layout::rows(p), T::zero(), &mut dcols, Layout::rows(p));
                    col2im(&dcols, c, h, wd, ksz, stride, pad, ho, wo, dxn);
                }
            }
        }
        if want_x {
            res.push((x, dx));
        }
        if want_w {
            res.push((w, dw));
        }
        if let Some(b) = b {
            let mut db = vec![T::zero(); k];
            for s in 0..n {
                for (kk, acc) in db.iter_mut().enumerate() {
                    let row = &g[(s * k + kk) * p..(s * k + kk + 1) * p];
                    *acc += row.iter().fold(T::zero(), |a, &v| a + v);
                }
            }
            res.push((b, db));
        }
    }
}

/// Rectangular surrogate for `dh/dv`: `1/a` inside `|v - theta| < a/2`.
pub fn surrogate<T: Real>(v_minus_theta: T, width: T) -> T {
    if v_minus_theta.abs() < width / T::from_f64(2.0) {
        T::one() / width
    } else {
        T::zero()
    }
}

/// Adaptive pooling bins: `[floor(i·n/m), ceil((i+1)·n/m))`.
pub(crate) fn pool_bins(n: usize, m: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..m).map(move |i| (i * n / m, ((i + 1) * n).div_ceil(m)))
}

fn permute_data<T: Real>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn identity_1x1_conv() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]));
        let w = g.constant(t(&[2, 2, 1, 1], &[1., 0., 0., 1.]));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn ones_kernel_on_impulse() {
        let mut g = Graph::<f64>::new();
        let mut img = vec![0.0; 25];
        img[12] = 1.0;
        let x = g.constant(t(&[1, 1, 5, 5], &img));
        let w = g.constant(t(&[1, 1, 3, 3], &[1.0; 9]));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let out = g.value(y).data();
        for yy in 0..5 {
            for xx in 0..5 {
                let inside = (1..=3).contains(&yy) && (1..=3).contains(&xx);
                assert_eq!(out[yy * 5 + xx], if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn conv_shape_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
        let err = g.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[1, 3, 4, 4]") && err.contains("[2, 2, 3, 3]"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 4], &[2.0; 4]));
        let y = g.softmax(x, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let a = g.constant(t(&[1, 3], &[0.3, -1.2, 2.5]));
        let b = g.constant(t(&[1, 3], &[100.3, 98.8, 102.5]));
        let (sa, sb) = (g.softmax(a, 1).unwrap(), g.softmax(b, 1).unwrap());
        for (p, q) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            assert!((p - q).abs() < 1e-6);
        }
        assert!((g.value(sa).data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pool_constant_map() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 3, 5, 7], 1.75));
        let y = g.adaptive_avg_pool(x, 1, 1).unwrap();
        assert_eq!(g.shape(y), [2, 3, 1, 1]);
        assert!(g.value(y).data().iter().all(|&v| (v - 1.75).abs() < 1e-15));
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.constant(t(&[2, 3, 4], &data));
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), [4, 2, 3]);
        // y[k][i][j] = x[i][j][k]
        assert_eq!(g.value(y).data()[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
        let z = g.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(z).data(), &data[..]);
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(t(&[1, 7], &[1.0 / 7.0; 7]));
        let l = g.cross_entropy(p, &[3], 1.0 / 7.0).unwrap();
        assert!((g.value(l).data()[0] - 7f64.ln() / 7.0).abs() < 1e-12);
        assert!((g.value(l).data()[0] - 0.27799).abs() < 1e-5);
        let mut one_hot = vec![0.0; 7];
        one_hot[2] = 1.0;
        let p = g.constant(t(&[1, 7], &one_hot));
        let l = g.cross_entropy(p, &[2], 1.0 / 7.0).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        assert!(g.cross_entropy(p, &[7], 1.0 / 7.0).is_err());
    }

    #[test]
    fn surrogate_window() {
        assert_eq!(surrogate(0.0f64, 1.0), 1.0);
        assert_eq!(surrogate(1.0f64, 1.0), 0.0);
        assert_eq!(surrogate(0.4f64, 1.0), 1.0);
        assert_eq!(surrogate(0.0f64, 0.5), 2.0);
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        // y = x*x + x, dy/dx = 2x + 1
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1], &[3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[7.0]);
    }
}
