//! Container format and the compress / decompress pipelines.
//!
//! Layout (little-endian): magic `SFMA`, version, mode, padded height and
//! width (u16), original height and width (u16), latent and hyper-latent
//! channel counts (u16), lambda id, mask convention, section count, one u32
//! length per section, then the section payloads.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSet;
use crate::codec::{
    analyze, crop_image, hyper_analyze_with, hyper_len, hyper_synthesize_with, pad_image, synthesize, CodecWeights,
    DOWNSAMPLE,
};
use crate::error::{Error, Result};

use super::{decode_hyper, decode_latent, encode_hyper, encode_latent, FactorizedPrior};

pub const MAGIC: &[u8; 4] = b"SFMA";
pub const VERSION: u8 = 1;
/// Mask convention byte: 1 means "mask value 1 keeps the element".
pub const MASK_ONE_KEEPS: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodingMode {
    /// Base codec only; reconstructs for viewing.
    Human,
    /// Adapter-equipped codec; reconstructs for a machine task.
    Machine,
    /// Base plus enhancement layers (see the `scalable` module).
    Scalable,
}

impl CodingMode {
    fn to_byte(self) -> u8 {
        match self {
            CodingMode::Human => 0,
            CodingMode::Machine => 1,
            CodingMode::Scalable => 2,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(CodingMode::Human),
            1 => Ok(CodingMode::Machine),
            2 => Ok(CodingMode::Scalable),
            _ => Err(Error::Stream(format!("unknown mode byte {b}"))),
        }
    }
}

impl std::str::FromStr for CodingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "human" => Ok(CodingMode::Human),
            "machine" => Ok(CodingMode::Machine),
            "scalable" => Ok(CodingMode::Scalable),
            _ => Err(Error::config(format!("unknown mode {s:?} (human, machine, scalable)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub mode: CodingMode,
    pub padded_h: u16,
    pub padded_w: u16,
    pub orig_h: u16,
    pub orig_w: u16,
    pub latent_channels: u16,
    pub hyper_channels: u16,
    pub lambda_id: u8,
    pub mask_convention: u8,
}

impl Header {
    pub fn latent_hw(&self) -> (usize, usize) {
        (self.padded_h as usize / DOWNSAMPLE, self.padded_w as usize / DOWNSAMPLE)
    }

    pub fn hyper_hw(&self) -> (usize, usize) {
        let (h, w) = self.latent_hw();
        (hyper_len(h), hyper_len(w))
    }

    /// Checks the header against the codec that will decode it.
    pub fn check_codec(&self, codec: &CodecWeights) -> Result<()> {
        if self.latent_channels as usize != codec.config.m_channels
            || self.hyper_channels as usize != codec.config.n_channels
        {
            return Err(Error::Stream(format!(
                "stream was coded with M={} N={}, codec has M={} N={}",
                self.latent_channels, self.hyper_channels, codec.config.m_channels, codec.config.n_channels
            )));
        }
        Ok(())
    }
}

/// Parsed container: header plus opaque section payloads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub sections: Vec<Vec<u8>>,
}

const FIXED_LEN: usize = 4 + 1 + 1 + 2 * 6 + 1 + 1 + 1;

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(FIXED_LEN + self.sections.iter().map(|s| s.len() + 4).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(h.mode.to_byte());
        for v in [
            h.padded_h,
            h.padded_w,
            h.orig_h,
            h.orig_w,
            h.latent_channels,
            h.hyper_channels,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(h.lambda_id);
        out.push(h.mask_convention);
        out.push(self.sections.len() as u8);
        for s in &self.sections {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        }
        for s in &self.sections {
            out.extend_from_slice(s);
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::Stream("truncated header".into());
        if bytes.len() < FIXED_LEN {
            return Err(truncated());
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Stream("bad magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Stream(format!("unsupported version {}", bytes[4])));
        }
        let mode = CodingMode::from_byte(bytes[5])?;
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let header = Header {
            mode,
            padded_h: u16_at(6),
            padded_w: u16_at(8),
            orig_h: u16_at(10),
            orig_w: u16_at(12),
            latent_channels: u16_at(14),
            hyper_channels: u16_at(16),
            lambda_id: bytes[18],
            mask_convention: bytes[19],
        };
        let n = bytes[20] as usize;
        let mut pos = FIXED_LEN;
        if bytes.len() < pos + 4 * n {
            return Err(truncated());
        }
        let lens: Vec<usize> = (0..n)
            .map(|k| u32::from_le_bytes(bytes[pos + 4 * k..pos + 4 * k + 4].try_into().unwrap()) as usize)
            .collect();
        pos += 4 * n;
        let mut sections = Vec::with_capacity(n);
        for len in lens {
            let end = pos
                .checked_add(len)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::Stream("truncated section payload".into()))?;
            sections.push(bytes[pos..end].to_vec());
            pos = end;
        }
        if pos != bytes.len() {
            return Err(Error::Stream(format!("{} trailing bytes", bytes.len() - pos)));
        }
        let h = &header;
        if h.padded_h == 0
            || h.padded_w == 0
            || h.padded_h as usize % DOWNSAMPLE != 0
            || h.padded_w as usize % DOWNSAMPLE != 0
            || h.orig_h == 0
            || h.orig_w == 0
            || h.orig_h > h.padded_h
            || h.orig_w > h.padded_w
        {
            return Err(Error::Stream("inconsistent image dimensions in header".into()));
        }
        Ok(Bitstream { header, sections })
    }

    /// Total size in bits.
    pub fn bits(&self) -> usize {
        8 * self.to_bytes().len()
    }
}

/// Validates an image with values in `[0, 1]` and pads it for the codec.
pub(crate) fn prepare_image(x: &Array3<f64>) -> Result<(Array3<f64>, Header)> {
    let (c, h, w) = x.dim();
    if c != 3 {
        return Err(Error::Input(format!("expected a 3-channel image, got {c}")));
    }
    if h == 0 || w == 0 || h > u16::MAX as usize - DOWNSAMPLE || w > u16::MAX as usize - DOWNSAMPLE {
        return Err(Error::Input(format!("unsupported image size {h}x{w}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("image contains non-finite values".into()));
    }
    let padded = pad_image(x, DOWNSAMPLE);
    let header = Header {
        mode: CodingMode::Human,
        padded_h: padded.dim().1 as u16,
        padded_w: padded.dim().2 as u16,
        orig_h: h as u16,
        orig_w: w as u16,
        latent_channels: 0,
        hyper_channels: 0,
        lambda_id: 0,
        mask_convention: 0,
    };
    Ok((padded, header))
}

fn mode_adapters<'a>(mode: CodingMode, adapters: Option<&'a AdapterSet>) -> Result<Option<&'a AdapterSet>> {
    match mode {
        CodingMode::Human => Ok(None),
        CodingMode::Machine => adapters
            .map(Some)
            .ok_or_else(|| Error::config("machine mode requires an adapter set")),
        CodingMode::Scalable => Err(Error::config("scalable streams are produced by the scalable module")),
    }
}

/// Compresses an image (`3 x H x W`, values in `[0, 1]`). Human mode ignores
/// `adapters`; machine mode requires them.
pub fn compress(
    x: &Array3<f64>,
    codec: &CodecWeights,
    adapters: Option<&AdapterSet>,
    prior: &FactorizedPrior,
    mode: CodingMode,
    lambda_id: u8,
) -> Result<Vec<u8>> {
    let adapters = mode_adapters(mode, adapters)?;
    let (padded, mut header) = prepare_image(x)?;
    header.mode = mode;
    header.lambda_id = lambda_id;
    header.latent_channels = codec.config.m_channels as u16;
    header.hyper_channels = codec.config.n_channels as u16;
    let y = analyze(&padded, codec, adapters)?;
    let z = hyper_analyze_with(&y, codec, adapters)?;
    let z_hat = z.mapv(f64::round);
    let params = hyper_synthesize_with(&z_hat, codec, header.latent_hw(), adapters)?;
    let y_hat = y.mapv(f64::round);
    let sections = vec![encode_hyper(&z_hat, prior)?, encode_latent(&y_hat, &params, None)?];
    Ok(Bitstream { header, sections }.to_bytes())
}

/// Quantized latent carried by a human or machine stream.
pub fn decode_latents(
    stream: &Bitstream,
    codec: &CodecWeights,
    adapters: Option<&AdapterSet>,
    prior: &FactorizedPrior,
) -> Result<Array3<f64>> {
    let adapters = mode_adapters(stream.header.mode, adapters)?;
    stream.header.check_codec(codec)?;
    if stream.sections.len() != 2 {
        return Err(Error::Stream(format!(
            "expected 2 sections, found {}",
            stream.sections.len()
        )));
    }
    let z_hat = decode_hyper(&stream.sections[0], prior, stream.header.hyper_hw())?;
    let params = hyper_synthesize_with(&z_hat, codec, stream.header.latent_hw(), adapters)?;
    decode_latent(&stream.sections[1], &params, None)
}

/// Decodes a human or machine stream back to an image of the original size.
pub fn decompress(
    bytes: &[u8],
    codec: &CodecWeights,
    adapters: Option<&AdapterSet>,
    prior: &FactorizedPrior,
) -> Result<Array3<f64>> {
    let stream = Bitstream::parse(bytes)?;
    let y_hat = decode_latents(&stream, codec, adapters, prior)?;
    let adapters = mode_adapters(stream.header.mode, adapters)?;
    let x = synthesize(&y_hat, codec, adapters)?;
    Ok(crop_image(
        &x,
        stream.header.orig_h as usize,
        stream.header.orig_w as usize,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_roundtrip_and_rejections() {
        let b = Bitstream {
            header: Header {
                mode: CodingMode::Machine,
                padded_h: 64,
                padded_w: 48,
                orig_h: 60,
                orig_w: 33,
                latent_channels: 192,
                hyper_channels: 128,
                lambda_id: 3,
                mask_convention: 0,
            },
            sections: vec![vec![1, 2, 3], vec![], vec![9; 300]],
        };
        let bytes = b.to_bytes();
        assert_eq!(Bitstream::parse(&bytes).unwrap(), b);
        assert!(Bitstream::parse(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Bitstream::parse(&bad), Err(Error::Stream(_))));
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(Bitstream::parse(&bad).is_err());
        let mut bad = bytes;
        bad[5] = 7;
        assert!(Bitstream::parse(&bad).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("machine".parse::<CodingMode>().unwrap(), CodingMode::Machine);
        assert!(matches!("robot".parse::<CodingMode>(), Err(Error::Config(_))));
    }
}
