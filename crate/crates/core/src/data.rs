//! Deterministic labeled synthetic images and raster IO.
//!
//! Each image is a smooth high-contrast background (colour blobs plus faint
//! isotropic grain) with one small oriented grating patch. The patch
//! orientation is the class label. A pixel-fidelity codec spends its bits on
//! the background long before it keeps the faint high-frequency patch.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of patch orientations the generator knows about.
pub const MAX_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Square image side in pixels.
    pub size: usize,
    pub classes: usize,
    pub train_len: usize,
    pub eval_len: usize,
    /// Amplitude of the background grain.
    pub texture_amplitude: f64,
    /// Peak amplitude of the class-carrying grating patch.
    pub contrast: f64,
    /// Grating frequency range in cycles per pixel.
    pub frequency: [f64; 2],
    /// Patch radius range as a fraction of the image side.
    pub patch_radius: [f64; 2],
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            size: 64,
            classes: MAX_CLASSES,
            train_len: 512,
            eval_len: 256,
            texture_amplitude: 0.04,
            contrast: 0.4,
            frequency: [0.08, 0.12],
            patch_radius: [0.3, 0.4],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Array3<f64>,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub config: DatasetConfig,
}

impl SyntheticDataset {
    pub fn new(config: DatasetConfig) -> Result<Self> {
        if config.size < 8 {
            return Err(Error::config("dataset image size must be at least 8"));
        }
        if config.classes < 2 || config.classes > MAX_CLASSES {
            return Err(Error::config(format!("dataset classes must be in 2..={MAX_CLASSES}")));
        }
        if !(0.0..=0.5).contains(&config.texture_amplitude) || !(0.0..=1.0).contains(&config.contrast) {
            return Err(Error::config("texture amplitude or contrast out of range"));
        }
        let [flo, fhi] = config.frequency;
        if !(flo > 0.0 && flo <= fhi && fhi <= 0.5) {
            return Err(Error::config(
                "grating frequency range must satisfy 0 < lo <= hi <= 0.5",
            ));
        }
        let [rlo, rhi] = config.patch_radius;
        if !(rlo > 0.0 && rlo < rhi && rhi < 0.5) {
            return Err(Error::config("patch radius range must satisfy 0 < lo < hi < 0.5"));
        }
        Ok(SyntheticDataset { config })
    }

    pub fn len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.config.train_len,
            Split::Eval => self.config.eval_len,
        }
    }

    pub fn is_empty(&self, split: Split) -> bool {
        self.len(split) == 0
    }

    /// The `index`-th sample of a split. Labels cycle through the classes so
    /// every split is balanced.
    pub fn sample(&self, split: Split, index: usize) -> Sample {
        let stream = match split {
            Split::Train => 0u64,
            Split::Eval => 1u64,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream((stream << 40) | index as u64);
        let label = index % self.config.classes;
        Sample {
            image: render(&self.config, label, &mut rng),
            label,
        }
    }

    pub fn samples(&self, split: Split, range: std::ops::Range<usize>) -> Vec<Sample> {
        range.map(|i| self.sample(split, i)).collect()
    }
}

fn render(cfg: &DatasetConfig, label: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    use std::f64::consts::{PI, TAU};
    let n = cfg.size;
    let s = n as f64;
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.35..0.65));
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let (by, bx) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
            let width = rng.gen_range(s / 6.0..s / 3.0);
            (by, bx, width, std::array::from_fn(|_| rng.gen_range(-0.25..0.25)))
        })
        .collect();
    // isotropic grain: white noise smoothed by a 3x3 box
    let white: Vec<f64> = (0..(n + 2) * (n + 2)).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let radius = rng.gen_range(cfg.patch_radius[0]..cfg.patch_radius[1]) * s;
    let cy = rng.gen_range(radius..s - radius);
    let cx = rng.gen_range(radius..s - radius);
    let theta = label as f64 * PI / cfg.classes as f64 + rng.gen_range(-0.12..0.12);
    let [flo, fhi] = cfg.frequency;
    let freq = rng.gen_range(flo..=fhi) * TAU;
    let phase = rng.gen_range(0.0..TAU);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.7..1.0));

    let mut img = Array3::zeros((3, n, n));
    for i in 0..n {
        for j in 0..n {
            let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
            let mut grain = 0.0;
            for di in 0..3 {
                for dj in 0..3 {
                    grain += white[(i + di) * (n + 2) + j + dj];
                }
            }
            grain *= cfg.texture_amplitude / 3.0;
            let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() / radius;
            let window = if d < 1.0 { 0.5 + 0.5 * (PI * d).cos() } else { 0.0 };
            let wave = (freq * (x * theta.cos() + y * theta.sin()) + phase).sin();
            for c in 0..3 {
                let mut val = base[c] + grain;
                for &(by, bx, width, tone) in &blobs {
                    val += tone[c] * (-((y - by).powi(2) + (x - bx).powi(2)) / (2.0 * width * width)).exp();
                }
                val += cfg.contrast * tint[c] * window * wave;
                img[[c, i, j]] = val.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Reads an 8-bit raster into a `3 x H x W` array in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, i, j)| {
        img.get_pixel(j as u32, i as u32)[c] as f64 / 255.0
    }))
}

/// Quantizes to 8 bits per channel.
pub fn to_rgb8(x: &Array3<f64>) -> Result<image::RgbImage> {
    let (c, h, w) = x.dim();
    if c != 3 {
        return Err(Error::dim(format!("expected 3 channels, got {c}")));
    }
    Ok(image::RgbImage::from_fn(w as u32, h as u32, |j, i| {
        image::Rgb(std::array::from_fn(|ch| {
            (x[[ch, i as usize, j as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    }))
}

/// Writes a PNG.
pub fn write_image(path: &Path, x: &Array3<f64>) -> Result<()> {
    to_rgb8(x)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Writes a single-channel map as an 8-bit grayscale PNG, min-max normalized.
pub fn write_gray(path: &Path, map: &ndarray::Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img = image::GrayImage::from_fn(w as u32, h as u32, |j, i| {
        image::Luma([(((map[[i as usize, j as usize]] - lo) / span) * 255.0).round() as u8])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
