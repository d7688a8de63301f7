//! Operation tape and reverse-mode sweep.
//!
//! Every op evaluates eagerly, stores its output value on the tape and the
//! minimum it needs to run backward. Node ids are handed out in evaluation
//! order, so the tape is topologically sorted by construction and
//! [`Tape::backward`] is a single reverse scan.

use super::gemm::gemm;
use super::params::{ParamSet, RunningStats};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::metrics::LEVEL_THRESHOLDS;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Value soft HSS reports when its chance-agreement denominator vanishes.
pub const SOFT_HSS_FLOOR: f64 = 1e-10;

enum Op {
    Leaf {
        param: Option<usize>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AdaptiveAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Recip(Var),
    ClampMin(Var, f64),
    MeanAll(Var),
    Mse(Var, Var),
    Reshape(Var),
    Cab {
        input: Var,
        lambda: f64,
    },
    ChannelPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Gate {
        input: Var,
        gate: Var,
    },
    SoftHss {
        pred: Var,
        obs: Vec<u8>,
        tau: f64,
        degenerate: bool,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-writer recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Five-level membership probabilities of one value and their derivatives
/// with respect to that value.
pub(crate) fn soft_level_row(y: f64, tau: f64) -> ([f64; 5], [f64; 5]) {
    // upper[j] = P(value above threshold j), with upper[0] = 1 and
    // upper[5] = 0, so level l gets upper[l] - upper[l + 1].
    let mut upper = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let mut dupper = [0.0; 6];
    for (j, t) in LEVEL_THRESHOLDS.iter().enumerate() {
        let v = sigmoid((y - t) / tau);
        upper[j + 1] = v;
        dupper[j + 1] = v * (1.0 - v) / tau;
    }
    let mut probs = [0.0; 5];
    let mut dprobs = [0.0; 5];
    for l in 0..5 {
        probs[l] = upper[l] - upper[l + 1];
        dprobs[l] = dupper[l] - dupper[l + 1];
    }
    (probs, dprobs)
}

fn im2col(
    x: &[f64],
    (cin, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    col: &mut [f64],
) {
    let p = ho * wo;
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        dst[oy * wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            x[(c * h + iy as usize) * w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(
    col: &[f64],
    (cin, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    dx: &mut [f64],
) {
    let p = ho * wo;
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dx[(c * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn pool_bounds(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward target with respect to `v`, if `v`
    /// participates in differentiation.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite output recorded on tape");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Records a value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.push(t, Op::Leaf { param: None }, false)
    }

    /// Records a free leaf; it is differentiated when `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        let value = Tensor::new(&shape, t.into_data()).unwrap();
        self.push(value, Op::Leaf { param: None }, rg)
    }

    /// Records a copy of a named parameter. Its gradient flows back into the
    /// set via [`Tape::backward_into`].
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        let id = params.id(name)?;
        let t = params.by_id(id);
        let value = Tensor::new(t.shape(), t.data().to_vec())?;
        Ok(self.push(value, Op::Leaf { param: Some(id) }, t.requires_grad()))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, cin, h, w) = self.value(input).dims4("conv2d")?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4("conv2d")?;
        if wcin != cin {
            return Err(Error::shape("conv2d", self.shape(input), self.shape(weight)));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::shape("conv2d bias", self.shape(bias), &[cout]));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!("conv2d kernel {kh}x{kw} must be odd")));
        }
        if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape("conv2d", self.shape(input), self.shape(weight)));
        }
        if (h + 2 * padding - kh) % stride != 0 || (w + 2 * padding - kw) % stride != 0 {
            return Err(Error::invalid(format!(
                "conv2d output extent not integral for input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
            )));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let k = cin * kh * kw;
        let p = ho * wo;
        let mut out = vec![0.0; n * cout * p];
        let mut col = vec![0.0; k * p];
        let x = self.data(input);
        let wt = self.data(weight);
        let b = self.data(bias);
        for s in 0..n {
            im2col(&x[s * cin * h * w..(s + 1) * cin * h * w], (cin, h, w), (kh, kw), stride, padding, (ho, wo), &mut col);
            let dst = &mut out[s * cout * p..(s + 1) * cout * p];
            for (co, row) in dst.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v = b[co]);
            }
            gemm(cout, k, p, wt, false, &col, false, 1.0, dst);
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        let value = Tensor::new(&[n, cout, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// Per-channel batch normalization over (batch, height, width).
    ///
    /// Train mode normalizes with the batch moments and moves `stats`
    /// toward them with momentum [`BN_MOMENTUM`] (unbiased variance); eval
    /// mode normalizes with `stats` and leaves them untouched.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: BnMode,
        eps: f64,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("batchnorm2d")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.mean.len() != c {
            return Err(Error::shape("batchnorm2d", self.shape(input), self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("batchnorm eps must be positive"));
        }
        let m = n * h * w;
        let hw = h * w;
        let train = mode == BnMode::Train;
        if train && m <= 1 {
            return Err(Error::Degenerate(
                "batchnorm in train mode needs more than one value per channel".into(),
            ));
        }
        let x = self.data(input);
        let (gm, bt) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let (mean, var) = if train {
                let mut sum = 0.0;
                for s in 0..n {
                    sum += x[(s * c + ch) * hw..(s * c + ch + 1) * hw].iter().sum::<f64>();
                }
                let mean = sum / m as f64;
                let mut sq = 0.0;
                for s in 0..n {
                    sq += x[(s * c + ch) * hw..(s * c + ch + 1) * hw]
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f64>();
                }
                let var = sq / m as f64;
                stats.mean[ch] = (1.0 - BN_MOMENTUM) * stats.mean[ch] + BN_MOMENTUM * mean;
                stats.var[ch] = (1.0 - BN_MOMENTUM) * stats.var[ch] + BN_MOMENTUM * sq / (m - 1) as f64;
                (mean, var)
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            let is = 1.0 / (var + eps).sqrt();
            inv_std[ch] = is;
            for s in 0..n {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (x[i] - mean) * is;
                    xhat[i] = xh;
                    out[i] = gm[ch] * xh + bt[ch];
                }
            }
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    fn map_unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).unwrap();
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map_unary(a, |v| v * c, Op::Scale(a, c))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        if self.data(a).iter().any(|&v| v == 0.0) {
            return Err(Error::Degenerate("reciprocal of zero".into()));
        }
        Ok(self.map_unary(a, |v| 1.0 / v, Op::Recip(a)))
    }

    /// `max(a, floor)` elementwise; gradient passes where `a >= floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.map_unary(a, |v| v.max(floor), Op::ClampMin(a, floor))
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("maxpool2d")?;
        if k == 0 || stride == 0 || h < k || w < k {
            return Err(Error::invalid(format!("maxpool2d window {k} on {h}x{w}")));
        }
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let x = self.data(input);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = base + (oy * stride + dy) * w + ox * stride + dx;
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(input);
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }, rg))
    }

    pub fn adaptive_avgpool2d(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("adaptive_avgpool2d")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("adaptive_avgpool2d output must be non-empty"));
        }
        let x = self.data(input);
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..out_h {
                let (y0, y1) = pool_bounds(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = pool_bounds(ox, w, out_w);
                    let mut sum = 0.0;
                    for yy in y0..y1 {
                        sum += x[base + yy * w + x0..base + yy * w + x1].iter().sum::<f64>();
                    }
                    out.push(sum / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        let rg = self.rg(input);
        let value = Tensor::new(&[n, c, out_h, out_w], out)?;
        Ok(self.push(value, Op::AdaptiveAvgPool(input), rg))
    }

    /// `input[N,D] · weight[D,E] + bias[E]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, d) = match self.shape(input) {
            &[n, d] => (n, d),
            s => return Err(Error::shape("linear", s, self.shape(weight))),
        };
        let e = match self.shape(weight) {
            &[wd, e] if wd == d => e,
            s => return Err(Error::shape("linear", self.shape(input), s)),
        };
        if self.shape(bias) != [e] {
            return Err(Error::shape("linear bias", self.shape(bias), &[e]));
        }
        let b = self.data(bias);
        let mut out: Vec<f64> = (0..n).flat_map(|_| b.iter().copied()).collect();
        gemm(n, d, e, self.data(input), false, self.data(weight), false, 1.0, &mut out);
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        let value = Tensor::new(&[n, e], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul_elem", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::Empty("mean_all"));
        }
        let mean = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(mean), Op::MeanAll(a), rg))
    }

    /// Mean of squared differences over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::shape("mse_loss", self.shape(pred), self.shape(target)));
        }
        let n = self.value(pred).numel();
        if n == 0 {
            return Err(Error::Empty("mse_loss"));
        }
        let sum: f64 = self
            .data(pred)
            .iter()
            .zip(self.data(target))
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(sum / n as f64), Op::Mse(pred, target), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Channel-aware attention: every pixel of each (sample, channel) plane
    /// is scaled by `sigmoid((z - mean)^2 / (4 (S / n + lambda)) + 0.5)`
    /// where `S` is the plane's sum of squared deviations and
    /// `n = h*w - 1`.
    pub fn cab(&mut self, input: Var, lambda: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("cab")?;
        let hw = h * w;
        if hw < 2 {
            return Err(Error::invalid(format!(
                "channel-aware block needs at least two pixels per plane, got {h}x{w}"
            )));
        }
        if lambda <= 0.0 {
            return Err(Error::invalid("channel-aware lambda must be positive"));
        }
        let x = self.data(input);
        let mut out = vec![0.0; x.len()];
        for plane in 0..n * c {
            let z = &x[plane * hw..(plane + 1) * hw];
            let weights = cab_weights(z, lambda);
            for (i, wgt) in weights.iter().enumerate() {
                out[plane * hw + i] = z[i] * wgt;
            }
        }
        let rg = self.rg(input);
        let value = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(value, Op::Cab { input, lambda }, rg))
    }

    /// Stacks the channel mean and channel max into a two-channel map.
    pub fn channel_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("channel_pool")?;
        if c == 0 {
            return Err(Error::Empty("channel_pool"));
        }
        let hw = h * w;
        let x = self.data(input);
        let mut out = vec![0.0; n * 2 * hw];
        let mut argmax = vec![0usize; n * hw];
        for s in 0..n {
            for p in 0..hw {
                let mut sum = 0.0;
                let mut best = (s * c) * hw + p;
                for ch in 0..c {
                    let i = (s * c + ch) * hw + p;
                    sum += x[i];
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out[(s * 2) * hw + p] = sum / c as f64;
                out[(s * 2 + 1) * hw + p] = x[best];
                argmax[s * hw + p] = best;
            }
        }
        let rg = self.rg(input);
        let value = Tensor::new(&[n, 2, h, w], out)?;
        Ok(self.push(value, Op::ChannelPool { input, argmax }, rg))
    }

    /// Multiplies `input[N,C,H,W]` by a single-channel map `gate[N,1,H,W]`
    /// broadcast over channels.
    pub fn gate(&mut self, input: Var, gate: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("gate")?;
        if self.shape(gate) != [n, 1, h, w] {
            return Err(Error::shape("gate", self.shape(input), self.shape(gate)));
        }
        let hw = h * w;
        let x = self.data(input);
        let m = self.data(gate);
        let mut out = vec![0.0; x.len()];
        for s in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    let i = (s * c + ch) * hw + p;
                    out[i] = x[i] * m[s * hw + p];
                }
            }
        }
        let rg = self.rg(input) || self.rg(gate);
        let value = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(value, Op::Gate { input, gate }, rg))
    }

    /// Heidke skill score of a soft contingency table: observations are
    /// binned hard (`obs` holds level indices 0..5), predictions contribute
    /// sigmoid-smoothed level memberships with temperature `tau`.
    pub fn soft_hss(&mut self, pred: Var, obs: &[u8], tau: f64) -> Result<Var> {
        let n = self.value(pred).numel();
        if obs.len() != n {
            return Err(Error::shape("soft_hss", self.shape(pred), &[obs.len()]));
        }
        if n == 0 {
            return Err(Error::Empty("soft_hss"));
        }
        if tau <= 0.0 {
            return Err(Error::invalid("soft level temperature must be positive"));
        }
        if let Some(bad) = obs.iter().find(|&&o| o >= 5) {
            return Err(Error::invalid(format!("observation level {bad} out of range")));
        }
        let (table, rows) = soft_table(self.data(pred), obs, tau);
        let nt = n as f64;
        let acc: f64 = (0..5).map(|i| table[i][i]).sum::<f64>() / nt;
        let chance: f64 = (0..5)
            .map(|i| rows[i] * (0..5).map(|r| table[r][i]).sum::<f64>())
            .sum::<f64>()
            / (nt * nt);
        let degenerate = 1.0 - chance <= 1e-12;
        let value = if degenerate {
            log::warn!("soft HSS denominator vanished; reporting {SOFT_HSS_FLOOR}");
            SOFT_HSS_FLOOR
        } else {
            (acc - chance) / (1.0 - chance)
        };
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(value),
            Op::SoftHss {
                pred,
                obs: obs.to_vec(),
                tau,
                degenerate,
            },
            rg,
        ))
    }

    /// Reverse sweep from a one-element `loss`. Gradients of earlier calls
    /// on this tape are discarded; parameter sets only accumulate through
    /// [`Tape::backward_into`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                propagate(&self.nodes, i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Runs [`Tape::backward`] and adds each parameter leaf's gradient into
    /// `params`. Repeated calls accumulate until `params.zero_grad()`.
    pub fn backward_into(&mut self, loss: Var, params: &mut ParamSet) -> Result<()> {
        self.backward(loss)?;
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Leaf { param: Some(id) }, Some(g)) = (&node.op, g) {
                params.by_id_mut(*id).accumulate_grad(g);
            }
        }
        Ok(())
    }
}

/// Per-pixel channel-attention weights of one plane:
/// `sigmoid((z - mean)^2 / (4 (var + lambda)) + 0.5)` with the unbiased
/// variance.
pub fn cab_weights(z: &[f64], lambda: f64) -> Vec<f64> {
    let hw = z.len();
    let mean = z.iter().sum::<f64>() / hw as f64;
    let ss: f64 = z.iter().map(|v| (v - mean) * (v - mean)).sum();
    let denom = 4.0 * (ss / (hw - 1) as f64 + lambda);
    z.iter()
        .map(|v| sigmoid((v - mean) * (v - mean) / denom + 0.5))
        .collect()
}

/// Expected counts `table[obs][pred]` and observed-row totals.
fn soft_table(pred: &[f64], obs: &[u8], tau: f64) -> ([[f64; 5]; 5], [f64; 5]) {
    let mut table = [[0.0; 5]; 5];
    let mut rows = [0.0; 5];
    for (&y, &o) in pred.iter().zip(obs) {
        let (p, _) = soft_level_row(y, tau);
        let o = o as usize;
        rows[o] += 1.0;
        for j in 0..5 {
            table[o][j] += p[j];
        }
    }
    (table, rows)
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf { .. } => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            padding,
        } => {
            let (n, cin, h, w) = nodes[input.0].value.dims4("conv2d").unwrap();
            let (cout, _, kh, kw) = nodes[weight.0].value.dims4("conv2d").unwrap();
            let (_, _, ho, wo) = node.value.dims4("conv2d").unwrap();
            let (k, p) = (cin * kh * kw, ho * wo);
            if let Some(db) = slot(nodes, grads, *bias) {
                for s in 0..n {
                    for co in 0..cout {
                        db[co] += g[(s * cout + co) * p..(s * cout + co + 1) * p].iter().sum::<f64>();
                    }
                }
            }
            let x = val(*input);
            let wt = val(*weight);
            let mut col = vec![0.0; k * p];
            if nodes[weight.0].requires_grad {
                let dw = slot(nodes, grads, *weight).unwrap();
                for s in 0..n {
                    im2col(&x[s * cin * h * w..(s + 1) * cin * h * w], (cin, h, w), (kh, kw), *stride, *padding, (ho, wo), &mut col);
                    gemm(cout, p, k, &g[s * cout * p..(s + 1) * cout * p], false, &col, true, 1.0, dw);
                }
            }
            if let Some(dx) = slot(nodes, grads, *input) {
                for s in 0..n {
                    gemm(k, cout, p, wt, true, &g[s * cout * p..(s + 1) * cout * p], false, 0.0, &mut col);
                    col2im(&col, (cin, h, w), (kh, kw), *stride, *padding, (ho, wo), &mut dx[s * cin * h * w..(s + 1) * cin * h * w]);
                }
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let (n, c, h, w) = node.value.dims4("batchnorm2d").unwrap();
            let hw = h * w;
            let m = (n * hw) as f64;
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    for i in base..base + hw {
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * xhat[i];
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *beta) {
                db.iter_mut().zip(&sum_g).for_each(|(a, b)| *a += b);
            }
            if let Some(dg) = slot(nodes, grads, *gamma) {
                dg.iter_mut().zip(&sum_gx).for_each(|(a, b)| *a += b);
            }
            let gm = val(*gamma).to_vec();
            if let Some(dx) = slot(nodes, grads, *input) {
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        let k = gm[ch] * inv_std[ch];
                        for i in base..base + hw {
                            dx[i] += if *train {
                                k / m * (m * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch])
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
            }
        }
        Op::Relu(a) => {
            let x = val(*a);
            if let Some(dx) = slot(nodes, grads, *a) {
                for ((d, &xv), &gv) in dx.iter_mut().zip(x).zip(g) {
                    if xv > 0.0 {
                        *d += gv;
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            if let Some(dx) = slot(nodes, grads, *a) {
                for ((d, &yv), &gv) in dx.iter_mut().zip(y).zip(g) {
                    *d += gv * yv * (1.0 - yv);
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(dx) = slot(nodes, grads, *a) {
                dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * c);
            }
        }
        Op::Recip(a) => {
            let y = node.value.data();
            if let Some(dx) = slot(nodes, grads, *a) {
                for ((d, &yv), &gv) in dx.iter_mut().zip(y).zip(g) {
                    *d -= gv * yv * yv;
                }
            }
        }
        Op::ClampMin(a, floor) => {
            let x = val(*a);
            if let Some(dx) = slot(nodes, grads, *a) {
                for ((d, &xv), &gv) in dx.iter_mut().zip(x).zip(g) {
                    if xv >= *floor {
                        *d += gv;
                    }
                }
            }
        }
        Op::MaxPool { input, argmax } => {
            if let Some(dx) = slot(nodes, grads, *input) {
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
            }
        }
        Op::AdaptiveAvgPool(input) => {
            let (n, c, h, w) = nodes[input.0].value.dims4("adaptive_avgpool2d").unwrap();
            let (_, _, oh, ow) = node.value.dims4("adaptive_avgpool2d").unwrap();
            if let Some(dx) = slot(nodes, grads, *input) {
                for plane in 0..n * c {
                    let base = plane * h * w;
                    for oy in 0..oh {
                        let (y0, y1) = pool_bounds(oy, h, oh);
                        for ox in 0..ow {
                            let (x0, x1) = pool_bounds(ox, w, ow);
                            let share = g[(plane * oh + oy) * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    dx[base + yy * w + xx] += share;
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::Linear { input, weight, bias } => {
            let (n, d) = (nodes[input.0].value.shape()[0], nodes[input.0].value.shape()[1]);
            let e = nodes[weight.0].value.shape()[1];
            if let Some(db) = slot(nodes, grads, *bias) {
                for row in g.chunks(e) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
            }
            let x = val(*input);
            let wt = val(*weight);
            if let Some(dw) = slot(nodes, grads, *weight) {
                gemm(d, n, e, x, true, g, false, 1.0, dw);
            }
            if let Some(dx) = slot(nodes, grads, *input) {
                gemm(n, e, d, g, false, wt, true, 1.0, dx);
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(dx) = slot(nodes, grads, v) {
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
            }
        }
        Op::Mul(a, b) => {
            let (xa, xb) = (val(*a).to_vec(), val(*b).to_vec());
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, &o), &gv) in da.iter_mut().zip(&xb).zip(g) {
                    *d += gv * o;
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for ((d, &o), &gv) in db.iter_mut().zip(&xa).zip(g) {
                    *d += gv * o;
                }
            }
        }
        Op::MeanAll(a) => {
            if let Some(dx) = slot(nodes, grads, *a) {
                let share = g[0] / dx.len() as f64;
                dx.iter_mut().for_each(|d| *d += share);
            }
        }
        Op::Mse(p, t) => {
            let (xp, xt) = (val(*p), val(*t));
            let k = 2.0 * g[0] / xp.len() as f64;
            let diff: Vec<f64> = xp.iter().zip(xt).map(|(a, b)| k * (a - b)).collect();
            if let Some(dp) = slot(nodes, grads, *p) {
                dp.iter_mut().zip(&diff).for_each(|(d, v)| *d += v);
            }
            if let Some(dt) = slot(nodes, grads, *t) {
                dt.iter_mut().zip(&diff).for_each(|(d, v)| *d -= v);
            }
        }
        Op::Reshape(a) => {
            if let Some(dx) = slot(nodes, grads, *a) {
                dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
            }
        }
        Op::Cab { input, lambda } => {
            let (_, _, h, w) = node.value.dims4("cab").unwrap();
            let hw = h * w;
            let x = val(*input);
            if let Some(dx) = slot(nodes, grads, *input) {
                for (plane, (zs, gs)) in x.chunks(hw).zip(g.chunks(hw)).enumerate() {
                    cab_backward(zs, gs, *lambda, &mut dx[plane * hw..(plane + 1) * hw]);
                }
            }
        }
        Op::ChannelPool { input, argmax } => {
            let (n, c, h, w) = nodes[input.0].value.dims4("channel_pool").unwrap();
            let hw = h * w;
            if let Some(dx) = slot(nodes, grads, *input) {
                for s in 0..n {
                    for p in 0..hw {
                        let gm = g[(s * 2) * hw + p] / c as f64;
                        for ch in 0..c {
                            dx[(s * c + ch) * hw + p] += gm;
                        }
                        dx[argmax[s * hw + p]] += g[(s * 2 + 1) * hw + p];
                    }
                }
            }
        }
        Op::Gate { input, gate } => {
            let (n, c, h, w) = node.value.dims4("gate").unwrap();
            let hw = h * w;
            let x = val(*input).to_vec();
            let m = val(*gate).to_vec();
            if let Some(dx) = slot(nodes, grads, *input) {
                for s in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            let i = (s * c + ch) * hw + p;
                            dx[i] += g[i] * m[s * hw + p];
                        }
                    }
                }
            }
            if let Some(dm) = slot(nodes, grads, *gate) {
                for s in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            let i = (s * c + ch) * hw + p;
                            dm[s * hw + p] += g[i] * x[i];
                        }
                    }
                }
            }
        }
        Op::SoftHss {
            pred,
            obs,
            tau,
            degenerate,
        } => {
            if *degenerate {
                return;
            }
            let y = val(*pred);
            let (table, rows) = soft_table(y, obs, *tau);
            let nt = y.len() as f64;
            let acc: f64 = (0..5).map(|i| table[i][i]).sum::<f64>() / nt;
            let chance: f64 = (0..5)
                .map(|i| rows[i] * (0..5).map(|r| table[r][i]).sum::<f64>())
                .sum::<f64>()
                / (nt * nt);
            let one_minus = 1.0 - chance;
            let d_diag = 1.0 / (nt * one_minus);
            let d_chance = (acc - 1.0) / (one_minus * one_minus) / (nt * nt);
            if let Some(dy) = slot(nodes, grads, *pred) {
                for (p, (&yv, &o)) in y.iter().zip(obs).enumerate() {
                    let (_, dp) = soft_level_row(yv, *tau);
                    let mut total = 0.0;
                    for j in 0..5 {
                        let mut dh = d_chance * rows[j];
                        if j == o as usize {
                            dh += d_diag;
                        }
                        total += dh * dp[j];
                    }
                    dy[p] += g[0] * total;
                }
            }
        }
    }
}

fn cab_backward(z: &[f64], g: &[f64], lambda: f64, dz: &mut [f64]) {
    let hw = z.len();
    let mean = z.iter().sum::<f64>() / hw as f64;
    let d: Vec<f64> = z.iter().map(|v| v - mean).collect();
    let ss: f64 = d.iter().map(|v| v * v).sum();
    let n = (hw - 1) as f64;
    let denom = 4.0 * (ss / n + lambda);
    // a_k = dL/de_k where e_k is the sigmoid argument.
    let mut a = vec![0.0; hw];
    let mut direct = vec![0.0; hw];
    for k in 0..hw {
        let w = sigmoid(d[k] * d[k] / denom + 0.5);
        direct[k] = g[k] * w;
        a[k] = g[k] * z[k] * w * (1.0 - w);
    }
    let d_denom: f64 = -a.iter().zip(&d).map(|(ak, dk)| ak * dk * dk).sum::<f64>() / (denom * denom);
    let dd: Vec<f64> = (0..hw)
        .map(|k| 2.0 * d[k] * a[k] / denom + d_denom * 4.0 / n * 2.0 * d[k])
        .collect();
    let dd_mean = dd.iter().sum::<f64>() / hw as f64;
    for k in 0..hw {
        dz[k] += direct[k] + dd[k] - dd_mean;
    }
}
