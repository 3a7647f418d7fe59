//! Reverse-mode differentiation over a linear tape of array operations.
//!
//! Every forward pass in the crate (training and inference) is expressed on a
//! [`Tape`]. Parameters enter by name through [`Tape::param`]; whether a name
//! receives gradients is decided by the tape's trainable filter, so a frozen
//! module is simply one whose names the filter rejects.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array3, Axis, IxDyn};
use rustfft::num_complex::Complex64;

use crate::fft;
use crate::kernels::{self, Padding};
use crate::tensor::{view1, view2, view3, view4, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Smallest likelihood used when converting probabilities to bits.
pub const LIKELIHOOD_FLOOR: f64 = 1.0 / 32768.0;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    /// `max(x, bound)` passing gradients through whenever they would raise the value.
    LowerBound(Var, f64),
    Sum(Var),
    Mean(Var),
    /// Value replaced, gradient routed to the parent unchanged.
    StraightThrough(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    ConvT {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Var,
        padding: Padding,
    },
    Pointwise {
        x: Var,
        w: Var,
        b: Var,
    },
    Gdn {
        x: Var,
        beta: Var,
        gamma: Var,
        inverse: bool,
    },
    Rfft2(Var),
    Irfft2(Var),
    ComplexAbs(Var),
    ComplexScale(Var, Var),
    Concat(Vec<Var>),
    SliceChannels(Var, usize),
    Crop(Var),
    GaussianBits {
        y: Var,
        mu: Var,
        sigma: Var,
    },
    LogisticBits {
        z: Var,
        loc: Var,
        scale: Var,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftmaxXent {
        logits: Var,
        label: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

type Filter = Box<dyn Fn(&str) -> bool + Send + Sync>;

/// Records operations for a single forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    trainable: Option<Filter>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn to_complex(t: &Tensor) -> ndarray::Array3<Complex64> {
    let s = t.shape();
    Array3::from_shape_fn((s[0], s[1], s[2]), |(c, i, j)| {
        Complex64::new(t[[c, i, j, 0]], t[[c, i, j, 1]])
    })
}

fn from_complex(z: &Array3<Complex64>) -> Tensor {
    let (c, h, w) = z.dim();
    Tensor::from_shape_fn(IxDyn(&[c, h, w, 2]), |ix| {
        let v = z[[ix[0], ix[1], ix[2]]];
        if ix[3] == 0 {
            v.re
        } else {
            v.im
        }
    })
}

/// Standard normal cumulative distribution.
pub fn normal_cdf(t: f64) -> f64 {
    0.5 * libm::erfc(-t / std::f64::consts::SQRT_2)
}

fn normal_pdf(t: f64) -> f64 {
    (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Interval probability of the integer bin centred `v` away from the mean of a
/// Gaussian with scale `sigma`, with derivatives `(p, dp/dv, dp/dsigma)`.
pub fn gaussian_interval(v: f64, sigma: f64) -> (f64, f64, f64) {
    let v = v.abs();
    let u = (0.5 - v) / sigma;
    let l = (-0.5 - v) / sigma;
    let p = normal_cdf(u) - normal_cdf(l);
    let (pu, pl) = (normal_pdf(u), normal_pdf(l));
    (p, (pl - pu) / sigma, (l * pl - u * pu) / sigma)
}

/// Same as [`gaussian_interval`] for a logistic distribution with scale `s`.
pub fn logistic_interval(v: f64, s: f64) -> (f64, f64, f64) {
    let v = v.abs();
    let u = (0.5 - v) / s;
    let l = (-0.5 - v) / s;
    let (su, sl) = (sigmoid(u), sigmoid(l));
    let p = su - sl;
    let (du, dl) = (su * (1.0 - su), sl * (1.0 - sl));
    (p, (dl - du) / s, (l * dl - u * du) / s)
}

fn bits_of(p: f64) -> f64 {
    -p.max(LIKELIHOOD_FLOOR).log2()
}

fn dbits_dp(p: f64) -> f64 {
    -1.0 / (p.max(LIKELIHOOD_FLOOR) * std::f64::consts::LN_2)
}

impl Tape {
    /// A tape on which no parameter is trainable.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            trainable: None,
        }
    }

    /// A tape whose parameters named so that `filter` accepts them receive
    /// gradients.
    pub fn with_trainable(filter: impl Fn(&str) -> bool + Send + Sync + 'static) -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            trainable: Some(Box::new(filter)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.iter().next().copied().unwrap_or(0.0)
    }

    /// Records an input; `requires_grad` marks it for differentiation.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a named parameter once per tape.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let trainable = self.trainable.as_ref().is_some_and(|f| f(name));
        let v = self.leaf(value.clone(), trainable);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) + s;
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn lower_bound(&mut self, a: Var, bound: f64) -> Var {
        let v = self.value(a).mapv(|x| x.max(bound));
        self.push(v, Op::LowerBound(a, bound), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::from_elem(IxDyn(&[]), self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::from_elem(IxDyn(&[]), t.sum() / t.len() as f64);
        self.push(v, Op::Mean(a), &[a])
    }

    /// Mean squared difference of two equally shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Replaces the forward value of `a` by `value`, keeping the identity
    /// gradient (straight-through estimator).
    pub fn straight_through(&mut self, a: Var, value: Tensor) -> Var {
        assert_eq!(value.shape(), self.value(a).shape());
        self.push(value, Op::StraightThrough(a), &[a])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let v = kernels::conv2d(
            view3(self.value(x)),
            view4(self.value(w)),
            view1(self.value(b)),
            stride,
            pad,
        );
        self.push(v.into_dyn(), Op::Conv2d { x, w, b, stride, pad }, &[x, w, b])
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize, out_pad: usize) -> Var {
        let v = kernels::conv_transpose2d(
            view3(self.value(x)),
            view4(self.value(w)),
            view1(self.value(b)),
            stride,
            pad,
            out_pad,
        );
        self.push(v.into_dyn(), Op::ConvT { x, w, b, stride, pad }, &[x, w, b])
    }

    pub fn depthwise(&mut self, x: Var, w: Var, b: Var, padding: Padding) -> Var {
        let v = kernels::depthwise(
            view3(self.value(x)),
            view3(self.value(w)),
            view1(self.value(b)),
            padding,
        );
        self.push(v.into_dyn(), Op::Depthwise { x, w, b, padding }, &[x, w, b])
    }

    pub fn pointwise(&mut self, x: Var, w: Var, b: Var) -> Var {
        let v = kernels::pointwise(view3(self.value(x)), view2(self.value(w)), view1(self.value(b)));
        self.push(v.into_dyn(), Op::Pointwise { x, w, b }, &[x, w, b])
    }

    pub fn gdn(&mut self, x: Var, beta: Var, gamma: Var, inverse: bool) -> Var {
        let v = kernels::gdn(
            view3(self.value(x)),
            view1(self.value(beta)),
            view2(self.value(gamma)),
            inverse,
        );
        self.push(
            v.into_dyn(),
            Op::Gdn {
                x,
                beta,
                gamma,
                inverse,
            },
            &[x, beta, gamma],
        )
    }

    /// Real-input spectrum stored as `C x H x (W/2+1) x 2` (real, imaginary).
    pub fn rfft2(&mut self, x: Var) -> Var {
        let z = fft::rfft2(view3(self.value(x)));
        self.push(from_complex(&z), Op::Rfft2(x), &[x])
    }

    /// Inverse of [`Tape::rfft2`] with explicit output width.
    pub fn irfft2(&mut self, z: Var, width: usize) -> Var {
        let v = fft::irfft2(to_complex(self.value(z)).view(), width);
        self.push(v.into_dyn(), Op::Irfft2(z), &[z])
    }

    pub fn complex_abs(&mut self, z: Var) -> Var {
        let t = self.value(z);
        let v = t.map_axis(Axis(3), |c| c[0].hypot(c[1]));
        self.push(v, Op::ComplexAbs(z), &[z])
    }

    /// Multiplies a complex spectrum by a real array of matching shape.
    pub fn complex_scale(&mut self, z: Var, s: Var) -> Var {
        let sv = self.value(s).clone().insert_axis(Axis(3));
        let v = self.value(z) * &sv;
        self.push(v, Op::ComplexScale(z, s), &[z, s])
    }

    /// Concatenates rank-3 values along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("matching spatial dims");
        self.push(v, Op::Concat(parts.to_vec()), parts)
    }

    /// Channels `start..start+len` of a rank-3 value.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self
            .value(x)
            .slice_axis(Axis(0), (start..start + len).into())
            .to_owned();
        self.push(v, Op::SliceChannels(x, start), &[x])
    }

    /// Top-left spatial crop of a rank-3 value.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Var {
        let v = self.value(x).slice_each_axis(|ax| match ax.axis.index() {
            1 => (0..h).into(),
            2 => (0..w).into(),
            _ => (..).into(),
        });
        let v = v.to_owned();
        self.push(v, Op::Crop(x), &[x])
    }

    /// Per-element bits `-log2 P(y)` of unit-width bins under `N(mu, sigma)`.
    pub fn gaussian_bits(&mut self, y: Var, mu: Var, sigma: Var) -> Var {
        let (yv, mv, sv) = (self.value(y), self.value(mu), self.value(sigma));
        let mut out = yv.clone();
        ndarray::Zip::from(&mut out)
            .and(yv)
            .and(mv)
            .and(sv)
            .for_each(|o, &y, &m, &s| {
                *o = bits_of(gaussian_interval(y - m, s).0);
            });
        self.push(out, Op::GaussianBits { y, mu, sigma }, &[y, mu, sigma])
    }

    /// Per-element bits of `z` (`C x H x W`) under per-channel logistic
    /// distributions with location `loc` and scale `scale` (both length `C`).
    pub fn logistic_bits(&mut self, z: Var, loc: Var, scale: Var) -> Var {
        let zv = self.value(z);
        let (lv, sv) = (view1(self.value(loc)), view1(self.value(scale)));
        let mut out = zv.clone();
        for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            plane.mapv_inplace(|v| bits_of(logistic_interval(v - lv[c], sv[c]).0));
        }
        self.push(out, Op::LogisticBits { z, loc, scale }, &[z, loc, scale])
    }

    /// `C x H x W -> C` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = (t.shape()[1] * t.shape()[2]) as f64;
        let v = t.sum_axis(Axis(2)).sum_axis(Axis(1)) / n;
        self.push(v, Op::GlobalAvgPool(x), &[x])
    }

    /// Dense layer on a vector: `w (O x I) . x + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let v = view2(self.value(w)).dot(&view1(self.value(x))) + view1(self.value(b));
        self.push(v.into_dyn(), Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Cross-entropy of a logit vector against a class label (natural log).
    pub fn softmax_xent(&mut self, logits: Var, label: usize) -> Var {
        let l = self.value(logits);
        let m = l.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + l.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let v = Tensor::from_elem(IxDyn(&[]), lse - l[[label]]);
        self.push(v, Op::SoftmaxXent { logits, label }, &[logits])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.raw_dim()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, op: &Op, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: &Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => *e += &d,
                slot => *slot = Some(d),
            }
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * val(b));
                acc(*b, g * val(a));
            }
            Op::Scale(a, s) => acc(*a, g * *s),
            Op::AddScalar(a) | Op::StraightThrough(a) => acc(*a, g.clone()),
            Op::Relu(a) => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(val(a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                acc(*a, g * &y.mapv(|s| s * (1.0 - s)));
            }
            Op::Exp(a) => acc(*a, g * &self.nodes[idx].value),
            Op::LowerBound(a, bound) => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(val(a)).for_each(|d, &x| {
                    if x < *bound && *d > 0.0 {
                        *d = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::Sum(a) => acc(*a, Tensor::from_elem(val(a).raw_dim(), g.sum())),
            Op::Mean(a) => {
                let n = val(a).len() as f64;
                acc(*a, Tensor::from_elem(val(a).raw_dim(), g.sum() / n));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (gx, gw, gb) = kernels::conv2d_backward(view3(val(x)), view4(val(w)), view3(g), *stride, *pad);
                acc(*x, gx.into_dyn());
                acc(
                    *w,
                    gw.as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(val(w).raw_dim())
                        .expect("weight shape"),
                );
                acc(*b, gb.into_dyn());
            }
            Op::ConvT { x, w, b, stride, pad } => {
                let (gx, gw, gb) =
                    kernels::conv_transpose2d_backward(view3(val(x)), view4(val(w)), view3(g), *stride, *pad);
                acc(*x, gx.into_dyn());
                acc(
                    *w,
                    gw.as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(val(w).raw_dim())
                        .expect("weight shape"),
                );
                acc(*b, gb.into_dyn());
            }
            Op::Depthwise { x, w, b, padding } => {
                let (gx, gw, gb) = kernels::depthwise_backward(view3(val(x)), view3(val(w)), view3(g), *padding);
                acc(*x, gx.into_dyn());
                acc(*w, gw.into_dyn());
                acc(*b, gb.into_dyn());
            }
            Op::Pointwise { x, w, b } => {
                let (gx, gw, gb) = kernels::pointwise_backward(view3(val(x)), view2(val(w)), view3(g));
                acc(*x, gx.into_dyn());
                acc(*w, gw.into_dyn());
                acc(*b, gb.into_dyn());
            }
            Op::Gdn {
                x,
                beta,
                gamma,
                inverse,
            } => {
                let (gx, gb, gg) =
                    kernels::gdn_backward(view3(val(x)), view1(val(beta)), view2(val(gamma)), view3(g), *inverse);
                acc(*x, gx.into_dyn());
                acc(*beta, gb.into_dyn());
                acc(*gamma, gg.into_dyn());
            }
            Op::Rfft2(x) => {
                let width = val(x).shape()[2];
                acc(*x, fft::rfft2_adjoint(to_complex(g).view(), width).into_dyn());
            }
            Op::Irfft2(z) => acc(*z, from_complex(&fft::irfft2_adjoint(view3(g)))),
            Op::ComplexAbs(z) => {
                let zv = val(z);
                let a = &self.nodes[idx].value;
                let mut d = zv.clone();
                for ((c, i, j, k), dv) in d.indexed_iter_mut().map(|(ix, v)| ((ix[0], ix[1], ix[2], ix[3]), v)) {
                    let amp = a[[c, i, j]];
                    *dv = if amp > 0.0 {
                        g[[c, i, j]] * zv[[c, i, j, k]] / amp
                    } else {
                        0.0
                    };
                }
                acc(*z, d);
            }
            Op::ComplexScale(z, s) => {
                let sv = val(s).clone().insert_axis(Axis(3));
                acc(*z, g * &sv);
                let prod = g * val(z);
                acc(*s, prod.sum_axis(Axis(3)));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let c = val(p).shape()[0];
                    acc(*p, g.slice_axis(Axis(0), (start..start + c).into()).to_owned());
                    start += c;
                }
            }
            Op::SliceChannels(x, start) => {
                let mut d = Tensor::zeros(val(x).raw_dim());
                let len = g.shape()[0];
                d.slice_axis_mut(Axis(0), (*start..*start + len).into()).assign(g);
                acc(*x, d);
            }
            Op::Crop(x) => {
                let mut d = Tensor::zeros(val(x).raw_dim());
                let (h, w) = (g.shape()[1], g.shape()[2]);
                d.slice_each_axis_mut(|ax| match ax.axis.index() {
                    1 => (0..h).into(),
                    2 => (0..w).into(),
                    _ => (..).into(),
                })
                .assign(g);
                acc(*x, d);
            }
            Op::GaussianBits { y, mu, sigma } => {
                let (yv, mv, sv) = (val(y), val(mu), val(sigma));
                let mut gy = g.clone();
                let mut gs = g.clone();
                ndarray::Zip::from(&mut gy)
                    .and(&mut gs)
                    .and(yv)
                    .and(mv)
                    .and(sv)
                    .for_each(|gy, gs, &y, &m, &s| {
                        let d = y - m;
                        let (p, dv, dsig) = gaussian_interval(d, s);
                        let up = *gy * dbits_dp(p);
                        *gy = up * dv * d.signum() * (d != 0.0) as u8 as f64;
                        *gs = up * dsig;
                    });
                acc(*mu, -&gy);
                acc(*y, gy);
                acc(*sigma, gs);
            }
            Op::LogisticBits { z, loc, scale } => {
                let zv = val(z);
                let (lv, sv) = (view1(val(loc)), view1(val(scale)));
                let c = zv.shape()[0];
                let mut gz = g.clone();
                let mut gl = ndarray::Array1::<f64>::zeros(c);
                let mut gsc = ndarray::Array1::<f64>::zeros(c);
                for ch in 0..c {
                    let zp = zv.index_axis(Axis(0), ch);
                    let mut gp = gz.index_axis_mut(Axis(0), ch);
                    ndarray::Zip::from(&mut gp).and(&zp).for_each(|gv, &zval| {
                        let d = zval - lv[ch];
                        let (p, dv, ds) = logistic_interval(d, sv[ch]);
                        let up = *gv * dbits_dp(p);
                        let dz = up * dv * d.signum() * (d != 0.0) as u8 as f64;
                        gl[ch] -= dz;
                        gsc[ch] += up * ds;
                        *gv = dz;
                    });
                }
                acc(*z, gz);
                acc(*loc, gl.into_dyn());
                acc(*scale, gsc.into_dyn());
            }
            Op::GlobalAvgPool(x) => {
                let s = val(x).shape();
                let n = (s[1] * s[2]) as f64;
                let gv = view1(g);
                let d = Tensor::from_shape_fn(val(x).raw_dim(), |ix| gv[ix[0]] / n);
                acc(*x, d);
            }
            Op::Linear { x, w, b } => {
                let gv = view1(g);
                let wv = view2(val(w));
                let xv = view1(val(x));
                acc(*x, wv.t().dot(&gv).into_dyn());
                let gw = ndarray::Array2::from_shape_fn(wv.raw_dim(), |(o, i)| gv[o] * xv[i]);
                acc(*w, gw.into_dyn());
                acc(*b, gv.to_owned().into_dyn());
            }
            Op::SoftmaxXent { logits, label } => {
                let l = val(logits);
                let m = l.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let z: f64 = l.iter().map(|v| (v - m).exp()).sum();
                let gs = g.sum();
                let mut d = l.mapv(|v| (v - m).exp() / z * gs);
                d[[*label]] -= gs;
                acc(*logits, d);
            }
        }
    }

    /// Gradients of every trainable named parameter.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.params {
            if !self.nodes[v.0].needs_grad {
                continue;
            }
            let g = grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.raw_dim()));
            out.insert(name.clone(), g);
        }
        out
    }

    /// Names of the trainable parameters recorded so far.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names: Vec<_> = self
            .params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].needs_grad)
            .map(|(n, _)| n.clone())
            .collect();
        names.sort();
        names
    }
}
