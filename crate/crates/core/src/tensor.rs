//! Shared array type and small helpers.

use ndarray::{Array3, ArrayD, ArrayView1, ArrayView2, ArrayView3, ArrayView4, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Dynamic-rank `f64` array used for every parameter and activation.
pub type Tensor = ArrayD<f64>;

pub(crate) fn view1(t: &Tensor) -> ArrayView1<'_, f64> {
    t.view().into_dimensionality().expect("rank-1 tensor")
}

pub(crate) fn view2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view().into_dimensionality().expect("rank-2 tensor")
}

pub(crate) fn view3(t: &Tensor) -> ArrayView3<'_, f64> {
    t.view().into_dimensionality().expect("rank-3 tensor")
}

pub(crate) fn view4(t: &Tensor) -> ArrayView4<'_, f64> {
    t.view().into_dimensionality().expect("rank-4 tensor")
}

/// `(channels, height, width)` of a rank-3 tensor.
pub fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::dim(format!("expected a C x H x W array, got shape {s:?}"))),
    }
}

pub fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(IxDyn(shape))
}

/// Zero-mean normal initialization with standard deviation `sqrt(2 / fan_in)`
/// scaled by `gain`.
pub fn kaiming<R: Rng>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor {
    let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_shape_fn(IxDyn(shape), |_| normal.sample(rng))
}

pub fn into3(t: Tensor) -> Array3<f64> {
    t.into_dimensionality().expect("rank-3 tensor")
}

/// Feeds shape and little-endian values of a named tensor into a hasher.
pub(crate) fn hash_tensor(hasher: &mut Sha256, name: &str, t: &Tensor) {
    hasher.update((name.len() as u64).to_le_bytes());
    hasher.update(name.as_bytes());
    hasher.update((t.ndim() as u64).to_le_bytes());
    for &d in t.shape() {
        hasher.update((d as u64).to_le_bytes());
    }
    for v in t.iter() {
        hasher.update(v.to_le_bytes());
    }
}

/// Named parameter traversal implemented by every weight container.
pub trait ParamSet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    /// SHA-256 over names, shapes and values of every parameter.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.visit("", &mut |name, t| hash_tensor(&mut h, name, t));
        hex::encode(h.finalize())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: ParamSet> ParamSet for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: ParamSet> ParamSet for Option<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        if let Some(v) = self {
            v.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Some(v) = self {
            v.visit_mut(prefix, f);
        }
    }
}

/// Flattens every parameter into a name-keyed map.
pub fn named_tensors<P: ParamSet + ?Sized>(p: &P, prefix: &str) -> std::collections::BTreeMap<String, Tensor> {
    let mut out = std::collections::BTreeMap::new();
    p.visit(prefix, &mut |name, t| {
        out.insert(name.to_string(), t.clone());
    });
    out
}

/// Overwrites every parameter of `p` from a name-keyed map, checking shapes.
pub fn load_named<P: ParamSet + ?Sized>(
    p: &mut P,
    prefix: &str,
    src: &std::collections::BTreeMap<String, Tensor>,
) -> Result<()> {
    let mut err = None;
    p.visit_mut(prefix, &mut |name, t| {
        if err.is_some() {
            return;
        }
        match src.get(name) {
            Some(v) if v.shape() == t.shape() => t.assign(v),
            Some(v) => {
                err = Some(Error::Checkpoint(format!(
                    "shape mismatch for {name}: expected {:?}, found {:?}",
                    t.shape(),
                    v.shape()
                )))
            }
            None => err = Some(Error::Checkpoint(format!("missing tensor {name}"))),
        }
    });
    err.map_or(Ok(()), Err)
}
