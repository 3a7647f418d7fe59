//! Dense numeric kernels shared by the inference path and the autodiff tape.
//!
//! All feature maps are channel-first `C x H x W`. Every forward kernel has a
//! matching backward kernel returning gradients for each input.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis};

/// Boundary handling for stride-1 depthwise convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero ("same") padding.
    Zero,
    /// Periodic boundary.
    Circular,
}

/// Geometry of a strided convolution window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Unfolds sliding windows into a `(C*k*k) x (Ho*Wo)` matrix.
pub fn im2col(x: ArrayView3<f64>, g: ConvGeom, ho: usize, wo: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let k = g.kernel;
    let mut cols = Array2::<f64>::zeros((c * k * k, ho * wo));
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        for a in 0..k {
            for b in 0..k {
                let row = (ch * k + a) * k + b;
                let dst = &mut cs[row * ho * wo..(row + 1) * ho * wo];
                for i in 0..ho {
                    let y = (i * g.stride + a) as isize - g.pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let src = &xs[(ch * h + y as usize) * w..(ch * h + y as usize + 1) * w];
                    for j in 0..wo {
                        let xx = (j * g.stride + b) as isize - g.pad as isize;
                        if xx >= 0 && xx < w as isize {
                            dst[i * wo + j] = src[xx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters window columns back into a `C x H x W` map.
pub fn col2im(cols: ArrayView2<f64>, c: usize, h: usize, w: usize, g: ConvGeom, ho: usize, wo: usize) -> Array3<f64> {
    let k = g.kernel;
    let mut out = Array3::<f64>::zeros((c, h, w));
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        for a in 0..k {
            for b in 0..k {
                let row = (ch * k + a) * k + b;
                let src = &cs[row * ho * wo..(row + 1) * ho * wo];
                for i in 0..ho {
                    let y = (i * g.stride + a) as isize - g.pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let dst = &mut os[(ch * h + y as usize) * w..(ch * h + y as usize + 1) * w];
                    for j in 0..wo {
                        let xx = (j * g.stride + b) as isize - g.pad as isize;
                        if xx >= 0 && xx < w as isize {
                            dst[xx as usize] += src[i * wo + j];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Reshapes a matrix product into `C x H x W`, copying only when the
/// product came back in column-major order.
fn reshape3(a: Array2<f64>, dim: (usize, usize, usize)) -> Array3<f64> {
    let a = if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    };
    a.into_shape_with_order(dim).expect("contiguous")
}

fn flat3(x: &Array3<f64>) -> ArrayView2<'_, f64> {
    let (c, h, w) = x.dim();
    x.view().into_shape_with_order((c, h * w)).expect("contiguous")
}

fn add_bias(y: &mut Array3<f64>, b: ArrayView1<f64>) {
    for (mut plane, &bv) in y.axis_iter_mut(Axis(0)).zip(b.iter()) {
        plane += bv;
    }
}

fn bias_grad(gy: ArrayView3<f64>) -> Array1<f64> {
    gy.sum_axis(Axis(2)).sum_axis(Axis(1))
}

/// Strided 2-D convolution, weight layout `O x C x k x k`.
pub fn conv2d(x: ArrayView3<f64>, w: ArrayView4<f64>, b: ArrayView1<f64>, stride: usize, pad: usize) -> Array3<f64> {
    let (o, c, k, _) = w.dim();
    let (_, h, wd) = x.dim();
    let g = ConvGeom { kernel: k, stride, pad };
    let (ho, wo) = (g.out_len(h), g.out_len(wd));
    let cols = im2col(x, g, ho, wo);
    let wm = w.as_standard_layout();
    let wm = wm.view().into_shape_with_order((o, c * k * k)).expect("contiguous");
    let y = wm.dot(&cols);
    let mut y = reshape3(y, (o, ho, wo));
    add_bias(&mut y, b);
    y
}

/// Gradients of [`conv2d`] with respect to `(x, w, b)`.
pub fn conv2d_backward(
    x: ArrayView3<f64>,
    w: ArrayView4<f64>,
    gy: ArrayView3<f64>,
    stride: usize,
    pad: usize,
) -> (Array3<f64>, Array2<f64>, Array1<f64>) {
    let (o, c, k, _) = w.dim();
    let (_, h, wd) = x.dim();
    let (_, ho, wo) = gy.dim();
    let g = ConvGeom { kernel: k, stride, pad };
    let cols = im2col(x, g, ho, wo);
    let gy_std = gy.as_standard_layout().to_owned();
    let gym = flat3(&gy_std);
    let wm = w.as_standard_layout();
    let wm = wm.view().into_shape_with_order((o, c * k * k)).expect("contiguous");
    let gw = gym.dot(&cols.t());
    let gcols = wm.t().dot(&gym);
    let gx = col2im(gcols.view(), c, h, wd, g, ho, wo);
    (gx, gw, bias_grad(gy))
}

/// Transposed convolution, weight layout `C_in x O x k x k`. Output size is
/// `(H - 1) * stride - 2 * pad + k + out_pad`.
pub fn conv_transpose2d(
    x: ArrayView3<f64>,
    w: ArrayView4<f64>,
    b: ArrayView1<f64>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Array3<f64> {
    let (c, o, k, _) = w.dim();
    let (_, h, wd) = x.dim();
    let g = ConvGeom { kernel: k, stride, pad };
    let ho = (h - 1) * stride + k + out_pad - 2 * pad;
    let wo = (wd - 1) * stride + k + out_pad - 2 * pad;
    let xs = x.as_standard_layout().to_owned();
    let wm = w.as_standard_layout();
    let wm = wm.view().into_shape_with_order((c, o * k * k)).expect("contiguous");
    let cols = wm.t().dot(&flat3(&xs));
    let mut y = col2im(cols.view(), o, ho, wo, g, h, wd);
    add_bias(&mut y, b);
    y
}

/// Gradients of [`conv_transpose2d`] with respect to `(x, w, b)`.
pub fn conv_transpose2d_backward(
    x: ArrayView3<f64>,
    w: ArrayView4<f64>,
    gy: ArrayView3<f64>,
    stride: usize,
    pad: usize,
) -> (Array3<f64>, Array2<f64>, Array1<f64>) {
    let (c, o, k, _) = w.dim();
    let (_, h, wd) = x.dim();
    let g = ConvGeom { kernel: k, stride, pad };
    let gcols = im2col(gy, g, h, wd);
    let xs = x.as_standard_layout().to_owned();
    let xm = flat3(&xs);
    let wm = w.as_standard_layout();
    let wm = wm.view().into_shape_with_order((c, o * k * k)).expect("contiguous");
    let gx = reshape3(wm.dot(&gcols), (c, h, wd));
    let gw = xm.dot(&gcols.t());
    (gx, gw, bias_grad(gy))
}

/// Per-channel stride-1 convolution with odd kernel `k`, output size equals
/// input size. Weight layout `C x k x k`.
pub fn depthwise(x: ArrayView3<f64>, w: ArrayView3<f64>, b: ArrayView1<f64>, padding: Padding) -> Array3<f64> {
    let (c, h, wd) = x.dim();
    let k = w.dim().1;
    let r = (k / 2) as isize;
    let mut y = Array3::<f64>::zeros((c, h, wd));
    for ch in 0..c {
        let bv = b[ch];
        for i in 0..h {
            for j in 0..wd {
                let mut acc = bv;
                for a in 0..k {
                    let Some(yy) = wrap(i as isize + a as isize - r, h, padding) else {
                        continue;
                    };
                    for bb in 0..k {
                        let Some(xx) = wrap(j as isize + bb as isize - r, wd, padding) else {
                            continue;
                        };
                        acc += w[[ch, a, bb]] * x[[ch, yy, xx]];
                    }
                }
                y[[ch, i, j]] = acc;
            }
        }
    }
    y
}

#[inline]
fn wrap(p: isize, n: usize, padding: Padding) -> Option<usize> {
    match padding {
        Padding::Zero => (p >= 0 && p < n as isize).then_some(p as usize),
        Padding::Circular => Some(p.rem_euclid(n as isize) as usize),
    }
}

/// Gradients of [`depthwise`] with respect to `(x, w, b)`.
pub fn depthwise_backward(
    x: ArrayView3<f64>,
    w: ArrayView3<f64>,
    gy: ArrayView3<f64>,
    padding: Padding,
) -> (Array3<f64>, Array3<f64>, Array1<f64>) {
    let (c, h, wd) = x.dim();
    let k = w.dim().1;
    let r = (k / 2) as isize;
    let mut gx = Array3::<f64>::zeros((c, h, wd));
    let mut gw = Array3::<f64>::zeros((c, k, k));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..wd {
                let g = gy[[ch, i, j]];
                if g == 0.0 {
                    continue;
                }
                for a in 0..k {
                    let Some(yy) = wrap(i as isize + a as isize - r, h, padding) else {
                        continue;
                    };
                    for bb in 0..k {
                        let Some(xx) = wrap(j as isize + bb as isize - r, wd, padding) else {
                            continue;
                        };
                        gw[[ch, a, bb]] += g * x[[ch, yy, xx]];
                        gx[[ch, yy, xx]] += g * w[[ch, a, bb]];
                    }
                }
            }
        }
    }
    (gx, gw, bias_grad(gy))
}

/// Per-location linear map across channels (a 1x1 convolution), weight
/// layout `O x C`.
pub fn pointwise(x: ArrayView3<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array3<f64> {
    let (_, h, wd) = x.dim();
    let xs = x.as_standard_layout().to_owned();
    let y = w.dot(&flat3(&xs));
    let mut y = reshape3(y, (w.nrows(), h, wd));
    add_bias(&mut y, b);
    y
}

/// Gradients of [`pointwise`] with respect to `(x, w, b)`.
pub fn pointwise_backward(
    x: ArrayView3<f64>,
    w: ArrayView2<f64>,
    gy: ArrayView3<f64>,
) -> (Array3<f64>, Array2<f64>, Array1<f64>) {
    let (c, h, wd) = x.dim();
    let xs = x.as_standard_layout().to_owned();
    let gys = gy.as_standard_layout().to_owned();
    let gym = flat3(&gys);
    let gx = reshape3(w.t().dot(&gym), (c, h, wd));
    let gw = gym.dot(&flat3(&xs).t());
    (gx, gw, bias_grad(gy))
}

/// Divisive normalization: `y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)`
/// at every spatial location; `inverse` multiplies instead.
pub fn gdn(x: ArrayView3<f64>, beta: ArrayView1<f64>, gamma: ArrayView2<f64>, inverse: bool) -> Array3<f64> {
    let norm = gdn_norm(x, beta, gamma);
    let xs = x.as_standard_layout();
    if inverse {
        &xs * &norm.mapv(f64::sqrt)
    } else {
        &xs / &norm.mapv(f64::sqrt)
    }
}

fn gdn_norm(x: ArrayView3<f64>, beta: ArrayView1<f64>, gamma: ArrayView2<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let sq = x.mapv(|v| v * v);
    let mut n = reshape3(gamma.dot(&flat3(&sq)), (c, h, w));
    add_bias(&mut n, beta);
    n
}

/// Gradients of [`gdn`] with respect to `(x, beta, gamma)`.
pub fn gdn_backward(
    x: ArrayView3<f64>,
    beta: ArrayView1<f64>,
    gamma: ArrayView2<f64>,
    gy: ArrayView3<f64>,
    inverse: bool,
) -> (Array3<f64>, Array1<f64>, Array2<f64>) {
    let (c, h, w) = x.dim();
    let n = gdn_norm(x, beta, gamma);
    let d = n.mapv(f64::sqrt);
    let xs = x.as_standard_layout().to_owned();
    let (direct, gn) = if inverse {
        // y = x * d, dy/dn = x / (2 d)
        (&gy * &d, &gy * &xs / (&d * 2.0))
    } else {
        // y = x / d, dy/dn = -x / (2 n d)
        (&gy / &d, -(&gy * &xs) / (&n * &d * 2.0))
    };
    let gnm = flat3(&gn);
    let back = reshape3(gamma.t().dot(&gnm), (c, h, w));
    let gx = direct + &(back * &xs * 2.0);
    let sq = xs.mapv(|v| v * v);
    let ggamma = gnm.dot(&flat3(&sq).t());
    let gbeta = bias_grad(gn.view());
    (gx, gbeta, ggamma)
}
