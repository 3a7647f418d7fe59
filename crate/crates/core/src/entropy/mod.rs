//! Likelihood models, rate estimation and lossless coding of quantized
//! latents.

pub mod bitstream;
pub mod range;

use ndarray::{Array3, Axis, Zip};

use crate::autodiff::{gaussian_interval, logistic_interval, normal_cdf, Tape, Var, LIKELIHOOD_FLOOR};
use crate::codec::{EntropyParameters, SIGMA_MIN};
use crate::error::{Error, Result};
use crate::tensor::{join, zeros, ParamSet, Tensor};
use range::{RangeDecoder, RangeEncoder, TOTAL};

pub use bitstream::{compress, decode_latents, decompress, Bitstream, CodingMode, Header};

/// Coding support spans this many scales on each side of the mean.
pub const TAIL_SCALES: f64 = 16.0;
const MAX_HALF_WIDTH: f64 = 2048.0;

/// Per-channel logistic density for the hyper-latent.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedPrior {
    pub loc: Tensor,
    /// Natural log of the scale, so the scale stays positive.
    pub log_scale: Tensor,
}

impl FactorizedPrior {
    pub fn new(channels: usize) -> Self {
        FactorizedPrior {
            loc: zeros(&[channels]),
            log_scale: zeros(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.loc.len()
    }

    pub fn scales(&self) -> Vec<f64> {
        self.log_scale.iter().map(|v| v.exp()).collect()
    }

    /// Per-element bits of `z` on the tape.
    pub fn bits_tape(&self, t: &mut Tape, prefix: &str, z: Var) -> Var {
        let loc = t.param(&join(prefix, "loc"), &self.loc);
        let ls = t.param(&join(prefix, "log_scale"), &self.log_scale);
        let scale = t.exp(ls);
        t.logistic_bits(z, loc, scale)
    }
}

impl ParamSet for FactorizedPrior {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "loc"), &self.loc);
        f(&join(prefix, "log_scale"), &self.log_scale);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "loc"), &mut self.loc);
        f(&join(prefix, "log_scale"), &mut self.log_scale);
    }
}

fn bits(p: f64) -> f64 {
    -p.max(LIKELIHOOD_FLOOR).log2()
}

fn check_params(shape: (usize, usize, usize), p: &EntropyParameters) -> Result<()> {
    if p.mu.dim() != shape || p.sigma.dim() != shape {
        return Err(Error::dim(format!(
            "entropy parameters {:?}/{:?} do not match latent {shape:?}",
            p.mu.dim(),
            p.sigma.dim()
        )));
    }
    if p.sigma.iter().any(|&s| !(s >= SIGMA_MIN)) || p.mu.iter().any(|m| !m.is_finite()) {
        return Err(Error::Numeric(format!(
            "scales must be finite and at least {SIGMA_MIN}"
        )));
    }
    Ok(())
}

/// Bits per element of `y_hat` under unit-width Gaussian bins.
pub fn gaussian_bits(y_hat: &Array3<f64>, params: &EntropyParameters) -> Result<Array3<f64>> {
    check_params(y_hat.dim(), params)?;
    let mut out = y_hat.clone();
    Zip::from(&mut out)
        .and(&params.mu)
        .and(&params.sigma)
        .for_each(|o, &m, &s| {
            *o = bits(gaussian_interval(*o - m, s).0);
        });
    Ok(out)
}

/// Bits per element of `z_hat` under the factorized prior.
pub fn factorized_bits(z_hat: &Array3<f64>, prior: &FactorizedPrior) -> Result<Array3<f64>> {
    if z_hat.dim().0 != prior.channels() {
        return Err(Error::dim(format!(
            "hyper-latent has {} channels, prior has {}",
            z_hat.dim().0,
            prior.channels()
        )));
    }
    let scales = prior.scales();
    let mut out = z_hat.clone();
    for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        let (l, s) = (prior.loc[c], scales[c]);
        plane.mapv_inplace(|v| bits(logistic_interval(v - l, s).0));
    }
    Ok(out)
}

/// Estimated bits per pixel of a latent/hyper-latent pair.
pub fn estimate_rate(
    y_hat: &Array3<f64>,
    params: &EntropyParameters,
    z_hat: &Array3<f64>,
    prior: &FactorizedPrior,
    pixel_count: usize,
) -> Result<f64> {
    if pixel_count == 0 {
        return Err(Error::Input("pixel count must be positive".into()));
    }
    let total = gaussian_bits(y_hat, params)?.sum() + factorized_bits(z_hat, prior)?.sum();
    Ok(total / pixel_count as f64)
}

/// Symbol table for integers `lo .. lo + n` plus a trailing escape symbol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolModel {
    pub lo: i64,
    pub cdf: Vec<u32>,
}

impl SymbolModel {
    fn symbols(&self) -> usize {
        self.cdf.len() - 2
    }

    /// Builds a table from the CDF `f` evaluated at bin edges.
    fn from_cdf(center: f64, width: f64, f: impl Fn(f64) -> f64) -> Self {
        let half = (TAIL_SCALES * width).ceil().min(MAX_HALF_WIDTH);
        let lo = (center - half).floor() as i64;
        let hi = (center + half).ceil() as i64;
        let n = (hi - lo + 1) as usize;
        let mut edges = Vec::with_capacity(n + 1);
        for k in 0..=n {
            edges.push(f(lo as f64 + k as f64 - 0.5));
        }
        let mut probs: Vec<f64> = edges.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect();
        probs.push((edges[0] + (1.0 - edges[n])).max(0.0));
        SymbolModel {
            lo,
            cdf: quantize_pmf(&probs),
        }
    }

    pub fn gaussian(mu: f64, sigma: f64) -> Self {
        Self::from_cdf(mu, sigma, |x| normal_cdf((x - mu) / sigma))
    }

    pub fn logistic(loc: f64, scale: f64) -> Self {
        Self::from_cdf(loc, scale, |x| 1.0 / (1.0 + (-(x - loc) / scale).exp()))
    }

    pub fn encode(&self, enc: &mut RangeEncoder, v: i64) -> Result<()> {
        let idx = v - self.lo;
        if idx >= 0 && (idx as usize) < self.symbols() {
            enc.encode_symbol(&self.cdf, idx as usize);
            return Ok(());
        }
        enc.encode_symbol(&self.cdf, self.symbols());
        let v32 = i32::try_from(v).map_err(|_| Error::Coder(format!("latent value {v} out of range")))?;
        let zz = ((v32 << 1) ^ (v32 >> 31)) as u32;
        enc.encode_bypass(zz >> 16);
        enc.encode_bypass(zz & 0xffff);
        Ok(())
    }

    pub fn decode(&self, dec: &mut RangeDecoder) -> Result<i64> {
        let s = dec.decode_symbol(&self.cdf)?;
        if s < self.symbols() {
            return Ok(self.lo + s as i64);
        }
        let zz = (dec.decode_bypass()? << 16) | dec.decode_bypass()?;
        Ok((((zz >> 1) as i32) ^ -((zz & 1) as i32)) as i64)
    }
}

/// Quantizes a probability vector to a cumulative table summing to [`TOTAL`]
/// with every frequency at least one.
fn quantize_pmf(probs: &[f64]) -> Vec<u32> {
    let total: f64 = probs.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    let mut freq: Vec<i64> = probs
        .iter()
        .map(|p| ((p / total) * TOTAL as f64).round().max(1.0) as i64)
        .collect();
    let mut excess: i64 = freq.iter().sum::<i64>() - TOTAL as i64;
    while excess != 0 {
        let (imax, &fmax) = freq
            .iter()
            .enumerate()
            .max_by_key(|(i, f)| (**f, usize::MAX - i))
            .unwrap();
        if excess < 0 {
            freq[imax] -= excess;
            excess = 0;
        } else {
            let take = excess.min(fmax - 1);
            freq[imax] -= take;
            excess -= take;
        }
    }
    let mut cdf = Vec::with_capacity(freq.len() + 1);
    let mut acc = 0u32;
    cdf.push(0);
    for f in freq {
        acc += f as u32;
        cdf.push(acc);
    }
    cdf
}

fn to_int(v: f64) -> Result<i64> {
    if !v.is_finite() || v.fract() != 0.0 {
        return Err(Error::Coder(format!("cannot code non-integer value {v}")));
    }
    Ok(v as i64)
}

/// Codes a quantized latent under its Gaussian parameters. Elements where
/// `mask` is false are skipped (the decoder fills them with zero).
pub fn encode_latent(y_hat: &Array3<f64>, params: &EntropyParameters, mask: Option<&Array3<bool>>) -> Result<Vec<u8>> {
    check_params(y_hat.dim(), params)?;
    if let Some(m) = mask {
        if m.dim() != y_hat.dim() {
            return Err(Error::dim("mask shape differs from latent"));
        }
    }
    let mut enc = RangeEncoder::new();
    for (idx, &v) in y_hat.indexed_iter() {
        if mask.is_some_and(|m| !m[idx]) {
            continue;
        }
        SymbolModel::gaussian(params.mu[idx], params.sigma[idx]).encode(&mut enc, to_int(v)?)?;
    }
    Ok(enc.finish())
}

pub fn decode_latent(bytes: &[u8], params: &EntropyParameters, mask: Option<&Array3<bool>>) -> Result<Array3<f64>> {
    check_params(params.mu.dim(), params)?;
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Array3::zeros(params.mu.dim());
    for (idx, o) in out.indexed_iter_mut() {
        if mask.is_some_and(|m| !m[idx]) {
            continue;
        }
        *o = SymbolModel::gaussian(params.mu[idx], params.sigma[idx]).decode(&mut dec)? as f64;
    }
    dec.finish()?;
    Ok(out)
}

pub fn encode_hyper(z_hat: &Array3<f64>, prior: &FactorizedPrior) -> Result<Vec<u8>> {
    if z_hat.dim().0 != prior.channels() {
        return Err(Error::dim("hyper-latent channels differ from prior"));
    }
    let scales = prior.scales();
    let mut enc = RangeEncoder::new();
    for (c, plane) in z_hat.axis_iter(Axis(0)).enumerate() {
        let model = SymbolModel::logistic(prior.loc[c], scales[c]);
        for &v in plane.iter() {
            model.encode(&mut enc, to_int(v)?)?;
        }
    }
    Ok(enc.finish())
}

pub fn decode_hyper(bytes: &[u8], prior: &FactorizedPrior, dims: (usize, usize)) -> Result<Array3<f64>> {
    let scales = prior.scales();
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Array3::zeros((prior.channels(), dims.0, dims.1));
    for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        let model = SymbolModel::logistic(prior.loc[c], scales[c]);
        for o in plane.iter_mut() {
            *o = model.decode(&mut dec)? as f64;
        }
    }
    dec.finish()?;
    Ok(out)
}
