//! Parameterized building blocks shared by the codec, adapters, task model
//! and mask generator.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::kernels::Padding;
use crate::tensor::{join, kaiming, zeros, ParamSet, Tensor};

/// Per-location channel map (1x1 convolution). `weight` is `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Linear {
            weight: kaiming(&[output, input], input, 1.0, rng),
            bias: zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: zeros(&[output, input]),
            bias: zeros(&[output]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Applies the map at every spatial location of a `C x H x W` value.
    pub fn apply(&self, t: &mut Tape, name: &str, x: Var) -> Var {
        let w = t.param(&join(name, "weight"), &self.weight);
        let b = t.param(&join(name, "bias"), &self.bias);
        t.pointwise(x, w, b)
    }

    /// Applies the map to a vector.
    pub fn apply_vec(&self, t: &mut Tape, name: &str, x: Var) -> Var {
        let w = t.param(&join(name, "weight"), &self.weight);
        let b = t.param(&join(name, "bias"), &self.bias);
        t.linear(x, w, b)
    }
}

impl ParamSet for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Per-channel `k x k` convolution with stride one.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseConv {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DepthwiseConv {
    pub fn init<R: Rng>(channels: usize, kernel: usize, rng: &mut R) -> Self {
        DepthwiseConv {
            weight: kaiming(&[channels, kernel, kernel], kernel * kernel, 1.0, rng),
            bias: zeros(&[channels]),
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn apply(&self, t: &mut Tape, name: &str, x: Var, padding: Padding) -> Var {
        let w = t.param(&join(name, "weight"), &self.weight);
        let b = t.param(&join(name, "bias"), &self.bias);
        t.depthwise(x, w, b, padding)
    }
}

impl ParamSet for DepthwiseConv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Strided convolution (`transposed == false`, weight `out x in x k x k`)
/// or transposed convolution (`transposed == true`, weight `in x out x k x k`).
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub transposed: bool,
}

impl Conv {
    pub fn init<R: Rng>(input: usize, output: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        Conv {
            weight: kaiming(&[output, input, kernel, kernel], input * kernel * kernel, 1.0, rng),
            bias: zeros(&[output]),
            stride,
            transposed: false,
        }
    }

    pub fn init_transposed<R: Rng>(input: usize, output: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        // fan-in of a stride-s transposed conv is roughly in * k^2 / s^2
        let fan_in = (input * kernel * kernel / (stride * stride)).max(1);
        Conv {
            weight: kaiming(&[input, output, kernel, kernel], fan_in, 1.0, rng),
            bias: zeros(&[output]),
            stride,
            transposed: true,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn in_dim(&self) -> usize {
        if self.transposed {
            self.weight.shape()[0]
        } else {
            self.weight.shape()[1]
        }
    }

    pub fn out_dim(&self) -> usize {
        if self.transposed {
            self.weight.shape()[1]
        } else {
            self.weight.shape()[0]
        }
    }

    pub fn apply(&self, t: &mut Tape, name: &str, x: Var) -> Var {
        let w = t.param(&join(name, "weight"), &self.weight);
        let b = t.param(&join(name, "bias"), &self.bias);
        let k = self.kernel();
        if self.transposed {
            t.conv_transpose2d(x, w, b, self.stride, k / 2, self.stride - 1)
        } else {
            t.conv2d(x, w, b, self.stride, k / 2)
        }
    }
}

impl ParamSet for Conv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
