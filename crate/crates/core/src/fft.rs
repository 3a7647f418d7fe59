//! Two-dimensional discrete Fourier transforms over the spatial axes of
//! channel-first arrays, backed by `rustfft`.
//!
//! Conventions follow the common real-input layout: the forward real
//! transform keeps `W/2 + 1` columns, the inverse takes an explicit output
//! width and scales by `1 / (H * W)`. Adjoint maps of both real transforms
//! are exposed for reverse-mode differentiation.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// Number of retained columns of a real transform of width `w`.
pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// In-place unnormalized complex transform of a single `H x W` plane along
/// both axes.
fn fft2_plane(plane: &mut Array2<Complex64>, inverse: bool) {
    let (h, w) = plane.dim();
    let row_fft = plan(w, inverse);
    let mut buf = vec![Complex64::default(); w.max(h)];
    for mut row in plane.rows_mut() {
        for (b, v) in buf.iter_mut().zip(row.iter()) {
            *b = *v;
        }
        row_fft.process(&mut buf[..w]);
        for (v, b) in row.iter_mut().zip(buf.iter()) {
            *v = *b;
        }
    }
    fft_columns(plane, inverse, &mut buf);
}

fn fft_columns(plane: &mut Array2<Complex64>, inverse: bool, buf: &mut Vec<Complex64>) {
    let h = plane.nrows();
    let col_fft = plan(h, inverse);
    buf.resize(buf.len().max(h), Complex64::default());
    for mut col in plane.columns_mut() {
        for (b, v) in buf.iter_mut().zip(col.iter()) {
            *b = *v;
        }
        col_fft.process(&mut buf[..h]);
        for (v, b) in col.iter_mut().zip(buf.iter()) {
            *v = *b;
        }
    }
}

/// Full complex 2-D transform of a real `C x H x W` array.
pub fn fft2(x: ArrayView3<f64>) -> Array3<Complex64> {
    let mut out = x.mapv(|v| Complex64::new(v, 0.0));
    for mut plane in out.axis_iter_mut(Axis(0)) {
        let mut owned = plane.to_owned();
        fft2_plane(&mut owned, false);
        plane.assign(&owned);
    }
    out
}

/// Real-input forward transform keeping `W/2 + 1` columns.
pub fn rfft2(x: ArrayView3<f64>) -> Array3<Complex64> {
    let (c, h, w) = x.dim();
    let wh = half_width(w);
    let full = fft2(x);
    let mut out = Array3::<Complex64>::zeros((c, h, wh));
    out.assign(&full.slice(ndarray::s![.., .., ..wh]));
    out
}

/// Inverse of [`rfft2`] producing an output of width `width`.
///
/// The imaginary parts of the zero column (and of the Nyquist column for
/// even widths) do not contribute, matching the Hermitian extension used by
/// common tensor libraries.
pub fn irfft2(z: ArrayView3<Complex64>, width: usize) -> Array3<f64> {
    let (c, h, wh) = z.dim();
    assert_eq!(wh, half_width(width), "half-spectrum width mismatch");
    let scale = 1.0 / (h * width) as f64;
    let mut out = Array3::<f64>::zeros((c, h, width));
    let mut buf = Vec::new();
    for ch in 0..c {
        let mut cols = z.index_axis(Axis(0), ch).to_owned();
        fft_columns(&mut cols, true, &mut buf);
        let row_fft = plan(width, true);
        let mut row = vec![Complex64::default(); width];
        for r in 0..h {
            for j in 0..width {
                row[j] = if j < wh {
                    cols[[r, j]]
                } else {
                    cols[[r, width - j]].conj()
                };
            }
            row[0].im = 0.0;
            if width % 2 == 0 {
                row[width / 2].im = 0.0;
            }
            row_fft.process(&mut row);
            for j in 0..width {
                out[[ch, r, j]] = row[j].re * scale;
            }
        }
    }
    out
}

/// Adjoint of [`irfft2`]: maps a real gradient `C x H x W` to the gradient
/// with respect to the real and imaginary parts of the half spectrum.
pub fn irfft2_adjoint(g: ArrayView3<f64>) -> Array3<Complex64> {
    let (_, h, w) = g.dim();
    let scale = 1.0 / (h * w) as f64;
    let mut out = rfft2(g);
    let nyquist = if w % 2 == 0 { Some(w / 2) } else { None };
    for ((_, _, j), v) in out.indexed_iter_mut() {
        let alpha = if j == 0 || Some(j) == nyquist { 1.0 } else { 2.0 };
        *v *= alpha * scale;
    }
    out
}

/// Adjoint of [`rfft2`] for an input of width `width`.
pub fn rfft2_adjoint(g: ArrayView3<Complex64>, width: usize) -> Array3<f64> {
    let (c, h, wh) = g.dim();
    let mut out = Array3::<f64>::zeros((c, h, width));
    for ch in 0..c {
        let mut plane = Array2::<Complex64>::zeros((h, width));
        plane
            .slice_mut(ndarray::s![.., ..wh])
            .assign(&g.index_axis(Axis(0), ch));
        fft2_plane(&mut plane, true);
        out.index_axis_mut(Axis(0), ch).assign(&plane.mapv(|v| v.re));
    }
    out
}

/// Moves the zero-frequency bin to the centre of each plane.
pub fn fftshift2<T: Clone>(x: &Array2<T>) -> Array2<T> {
    let (h, w) = x.dim();
    Array2::from_shape_fn((h, w), |(i, j)| x[[(i + h - h / 2) % h, (j + w - w / 2) % w]].clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn naive_dft(x: &Array3<f64>) -> Array3<Complex64> {
        let (c, h, w) = x.dim();
        Array3::from_shape_fn((c, h, w), |(ch, k, l)| {
            let mut acc = Complex64::default();
            for a in 0..h {
                for b in 0..w {
                    let t = -2.0 * PI * ((k * a) as f64 / h as f64 + (l * b) as f64 / w as f64);
                    acc += Complex64::from_polar(x[[ch, a, b]], t);
                }
            }
            acc
        })
    }

    fn random(c: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn forward_matches_naive_dft() {
        for &(h, w) in &[(4, 4), (5, 3), (6, 7), (1, 1), (2, 8)] {
            let x = random(2, h, w, (h * 10 + w) as u64);
            let fast = fft2(x.view());
            let slow = naive_dft(&x);
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn real_roundtrip_odd_and_even() {
        for &(h, w) in &[(4, 4), (5, 7), (8, 3), (1, 6), (64, 64)] {
            let x = random(3, h, w, 7);
            let back = irfft2(rfft2(x.view()).view(), w);
            let err = (&back - &x).mapv(f64::abs).fold(0.0_f64, |m, &v| m.max(v));
            assert!(err < 1e-10, "{h}x{w}: {err}");
        }
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(h, w) in &[(4, 4), (5, 7), (6, 5), (3, 2)] {
            let x = random(2, h, w, 11);
            let wh = half_width(w);
            let g = Array3::from_shape_fn((2, h, wh), |_| {
                Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            });
            // <rfft2(x), g> == <x, rfft2_adjoint(g)> with the real inner product
            let fx = rfft2(x.view());
            let lhs: f64 = fx.iter().zip(g.iter()).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
            let rhs: f64 = x
                .iter()
                .zip(rfft2_adjoint(g.view(), w).iter())
                .map(|(a, b)| a * b)
                .sum();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));

            let y = random(2, h, w, 12);
            let iz = irfft2(g.view(), w);
            let lhs: f64 = iz.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
            let adj = irfft2_adjoint(y.view());
            let rhs: f64 = g.iter().zip(adj.iter()).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn shift_centres_dc() {
        let mut m = Array2::<f64>::zeros((5, 4));
        m[[0, 0]] = 1.0;
        let s = fftshift2(&m);
        assert_eq!(s[[2, 2]], 1.0);
    }
}
