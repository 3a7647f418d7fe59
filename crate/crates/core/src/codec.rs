//! Frozen base codec: a four-stage mean-scale hyperprior transform pair with
//! divisive normalization, plus adapter insertion points.

use ndarray::{s, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSet, AdapterSite, StageFeature};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::layers::Conv;
use crate::tensor::{into3, join, view1, view2, ParamSet, Tensor};

/// Lower bound of predicted Gaussian scales.
pub const SIGMA_MIN: f64 = 0.11;
/// Lower bound of GDN offsets.
pub const BETA_MIN: f64 = 1e-6;
const LATENT_GAIN: f64 = 3.0;
const HYPER_GAIN: f64 = 4.0;
const OUTPUT_GAIN: f64 = 0.05;

/// Spatial downsampling factor of the analysis transform.
pub const DOWNSAMPLE: usize = 16;

/// Channel widths of the base codec. Four stride-2 stages on each side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    /// Internal width `N`.
    pub n_channels: usize,
    /// Latent width `M`.
    pub m_channels: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            n_channels: 128,
            m_channels: 192,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 || self.m_channels < 2 {
            return Err(Error::config("codec widths must be positive (M >= 2)"));
        }
        Ok(())
    }

    fn hyper_mid(&self) -> usize {
        self.m_channels * 3 / 2
    }
}

/// Generalized divisive normalization parameters for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GdnParams {
    /// Per-channel offsets, `>= BETA_MIN`.
    pub beta: Tensor,
    /// Non-negative `C x C` coupling matrix.
    pub gamma: Tensor,
}

impl GdnParams {
    pub fn new(channels: usize) -> Self {
        let beta = Tensor::ones(ndarray::IxDyn(&[channels]));
        let gamma = ndarray::Array2::<f64>::eye(channels).mapv(|v| v * 0.1).into_dyn();
        GdnParams { beta, gamma }
    }

    pub fn channels(&self) -> usize {
        self.beta.len()
    }

    /// Projects the parameters back onto `beta >= BETA_MIN`, `gamma >= 0`.
    pub fn project(&mut self) {
        self.beta.mapv_inplace(|b| b.max(BETA_MIN));
        self.gamma.mapv_inplace(|g| g.max(0.0));
    }

    fn apply(&self, t: &mut Tape, name: &str, x: Var, inverse: bool) -> Var {
        let beta = t.param(&join(name, "beta"), &self.beta);
        let gamma = t.param(&join(name, "gamma"), &self.gamma);
        t.gdn(x, beta, gamma, inverse)
    }
}

impl ParamSet for GdnParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "gamma"), &self.gamma);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "gamma"), &mut self.gamma);
    }
}

/// Divisive normalization of a stage feature.
pub fn gdn(x: &StageFeature, p: &GdnParams, inverse: bool) -> Result<StageFeature> {
    if x.channels() != p.channels() {
        return Err(Error::dim(format!(
            "GDN over {} channels applied to {} channels",
            p.channels(),
            x.channels()
        )));
    }
    let y = kernels::gdn(x.data().view(), view1(&p.beta), view2(&p.gamma), inverse);
    StageFeature::new(y)
}

/// Analysis stage: strided convolution followed by GDN (absent on the last stage).
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub conv: Conv,
    pub gdn: Option<GdnParams>,
}

impl ParamSet for Stage {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.gdn.visit(&join(prefix, "gdn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.gdn.visit_mut(&join(prefix, "gdn"), f);
    }
}

/// All base-codec weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CodecWeights {
    pub config: CodecConfig,
    pub analysis: Vec<Stage>,
    pub synthesis: Vec<Stage>,
    pub hyper_analysis: Vec<Conv>,
    pub hyper_synthesis: Vec<Conv>,
}

impl ParamSet for CodecWeights {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.analysis.visit(&join(prefix, "ga"), f);
        self.synthesis.visit(&join(prefix, "gs"), f);
        self.hyper_analysis.visit(&join(prefix, "ha"), f);
        self.hyper_synthesis.visit(&join(prefix, "hs"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.analysis.visit_mut(&join(prefix, "ga"), f);
        self.synthesis.visit_mut(&join(prefix, "gs"), f);
        self.hyper_analysis.visit_mut(&join(prefix, "ha"), f);
        self.hyper_synthesis.visit_mut(&join(prefix, "hs"), f);
    }
}

/// Name prefix of base-codec parameters on a tape.
pub const CODEC_PREFIX: &str = "codec";
/// Name prefix of adapter parameters on a tape.
pub const ADAPTER_PREFIX: &str = "adapters";

/// Quantization applied to a latent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// Nearest integer, ties away from zero.
    Round,
    /// Additive uniform noise on `[-0.5, 0.5)` (training proxy).
    Noise,
    /// Rounding in the forward pass, identity gradient.
    Ste,
}

/// Quantizes a latent. `seed` keys the noise of [`QuantMode::Noise`].
pub fn quantize(y: &Array3<f64>, mode: QuantMode, seed: u64) -> Result<Array3<f64>> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("cannot quantize non-finite latent".into()));
    }
    Ok(match mode {
        QuantMode::Round | QuantMode::Ste => y.mapv(f64::round),
        QuantMode::Noise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            y.mapv(|v| v + rng.gen_range(-0.5..0.5))
        }
    })
}

/// Quantization on the tape.
pub fn quantize_tape<R: Rng>(t: &mut Tape, y: Var, mode: QuantMode, rng: &mut R) -> Var {
    match mode {
        QuantMode::Round => {
            let v = t.value(y).mapv(f64::round);
            t.constant(v)
        }
        QuantMode::Ste => {
            let v = t.value(y).mapv(f64::round);
            t.straight_through(y, v)
        }
        QuantMode::Noise => {
            let noise = t.value(y).mapv(|_| rng.gen_range(-0.5..0.5));
            let n = t.constant(noise);
            t.add(y, n)
        }
    }
}

/// Gaussian mean and scale per latent element.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyParameters {
    pub mu: Array3<f64>,
    pub sigma: Array3<f64>,
}

/// Spatial size of the hyper-latent for a latent of size `n`.
pub fn hyper_len(n: usize) -> usize {
    let g = kernels::ConvGeom {
        kernel: 5,
        stride: 2,
        pad: 2,
    };
    g.out_len(g.out_len(n))
}

impl CodecWeights {
    /// Randomly initialized weights (used before toy pretraining).
    pub fn init(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m) = (config.n_channels, config.m_channels);
        let mut analysis = vec![
            Stage {
                conv: Conv::init(3, n, 5, 2, &mut rng),
                gdn: Some(GdnParams::new(n)),
            },
            Stage {
                conv: Conv::init(n, n, 5, 2, &mut rng),
                gdn: Some(GdnParams::new(n)),
            },
            Stage {
                conv: Conv::init(n, n, 5, 2, &mut rng),
                gdn: Some(GdnParams::new(n)),
            },
            Stage {
                conv: Conv::init(n, m, 5, 2, &mut rng),
                gdn: None,
            },
        ];
        let mut synthesis = vec![
            Stage {
                conv: Conv::init_transposed(m, n, 5, 2, &mut rng),
                gdn: Some(GdnParams::new(n)),
            },
            Stage {
                conv: Conv::init_transposed(n, n, 5, 2, &mut rng),
                gdn: Some(GdnParams::new(n)),
            },
            Stage {
                conv: Conv::init_transposed(n, n, 5, 2, &mut rng),
                gdn: Some(GdnParams::new(n)),
            },
            Stage {
                conv: Conv::init_transposed(n, 3, 5, 2, &mut rng),
                gdn: None,
            },
        ];
        let mut hyper_analysis = vec![
            Conv::init(m, n, 3, 1, &mut rng),
            Conv::init(n, n, 5, 2, &mut rng),
            Conv::init(n, n, 5, 2, &mut rng),
        ];
        let mid = config.hyper_mid();
        // images live in [0, 1]; start reconstructions near mid-gray
        synthesis[3].conv.bias.fill(0.5);
        synthesis[3].conv.weight.mapv_inplace(|v| v * OUTPUT_GAIN);
        // latents must start well above the quantization step or the noise
        // proxy drowns them; the synthesis input layer compensates
        analysis[3].conv.weight.mapv_inplace(|v| v * LATENT_GAIN);
        synthesis[0].conv.weight.mapv_inplace(|v| v / LATENT_GAIN);
        let mut hyper_synthesis = vec![
            Conv::init_transposed(n, m, 5, 2, &mut rng),
            Conv::init_transposed(m, mid, 5, 2, &mut rng),
            Conv::init(mid, 2 * m, 3, 1, &mut rng),
        ];
        // start with small scale logits so early rates stay moderate
        hyper_synthesis[2].weight.mapv_inplace(|v| v * 0.1);
        hyper_analysis[2].weight.mapv_inplace(|v| v * HYPER_GAIN);
        hyper_synthesis[0].weight.mapv_inplace(|v| v / HYPER_GAIN);
        Ok(CodecWeights {
            config,
            analysis,
            synthesis,
            hyper_analysis,
            hyper_synthesis,
        })
    }

    /// Projects every GDN layer onto its constraint set.
    pub fn project(&mut self) {
        for st in self.analysis.iter_mut().chain(self.synthesis.iter_mut()) {
            if let Some(g) = &mut st.gdn {
                g.project();
            }
        }
    }

    /// Analysis transform on the tape; adapters (if any) run after the
    /// encoder stages listed in their placement.
    pub fn analyze_tape(&self, t: &mut Tape, x: Var, adapters: Option<&AdapterSet>) -> Result<Var> {
        let mut h = x;
        for (i, st) in self.analysis.iter().enumerate() {
            let name = join(&join(CODEC_PREFIX, "ga"), &i.to_string());
            h = st.conv.apply(t, &join(&name, "conv"), h);
            if let Some(g) = &st.gdn {
                h = g.apply(t, &join(&name, "gdn"), h, false);
            }
            if let Some(a) = adapters {
                h = a.apply(t, AdapterSite::Encoder(i + 1), h, ADAPTER_PREFIX)?;
            }
        }
        Ok(h)
    }

    /// Synthesis transform on the tape (no output clamping).
    pub fn synthesize_tape(&self, t: &mut Tape, y: Var, adapters: Option<&AdapterSet>) -> Result<Var> {
        let mut h = y;
        for (i, st) in self.synthesis.iter().enumerate() {
            let name = join(&join(CODEC_PREFIX, "gs"), &i.to_string());
            h = st.conv.apply(t, &join(&name, "conv"), h);
            if let Some(g) = &st.gdn {
                h = g.apply(t, &join(&name, "gdn"), h, true);
            }
            if let Some(a) = adapters {
                h = a.apply(t, AdapterSite::Decoder(i + 1), h, ADAPTER_PREFIX)?;
            }
        }
        Ok(h)
    }

    pub fn hyper_analyze_tape(&self, t: &mut Tape, y: Var, adapters: Option<&AdapterSet>) -> Result<Var> {
        let mut h = y;
        let last = self.hyper_analysis.len() - 1;
        for (i, conv) in self.hyper_analysis.iter().enumerate() {
            h = conv.apply(t, &join(&join(CODEC_PREFIX, "ha"), &i.to_string()), h);
            if i < last {
                h = t.relu(h);
            }
            if i == 0 {
                if let Some(a) = adapters {
                    h = a.apply(t, AdapterSite::HyperEncoder, h, ADAPTER_PREFIX)?;
                }
            }
        }
        Ok(h)
    }

    /// Hyper synthesis on the tape, returning `(mu, sigma)` cropped to the
    /// latent size `(lh, lw)`.
    pub fn hyper_synthesize_tape(
        &self,
        t: &mut Tape,
        z_hat: Var,
        latent_hw: (usize, usize),
        adapters: Option<&AdapterSet>,
    ) -> Result<(Var, Var)> {
        let mut h = z_hat;
        let last = self.hyper_synthesis.len() - 1;
        for (i, conv) in self.hyper_synthesis.iter().enumerate() {
            h = conv.apply(t, &join(&join(CODEC_PREFIX, "hs"), &i.to_string()), h);
            if i < last {
                h = t.relu(h);
            }
            if i == 0 {
                if let Some(a) = adapters {
                    h = a.apply(t, AdapterSite::HyperDecoder, h, ADAPTER_PREFIX)?;
                }
            }
        }
        let shape = t.value(h).shape().to_vec();
        let (lh, lw) = latent_hw;
        if shape[1] < lh || shape[2] < lw {
            return Err(Error::dim(format!(
                "hyper synthesis produced {}x{}, latent is {lh}x{lw}",
                shape[1], shape[2]
            )));
        }
        let h = t.crop(h, lh, lw);
        let m = self.config.m_channels;
        let mu = t.slice_channels(h, 0, m);
        let raw = t.slice_channels(h, m, m);
        let e = t.exp(raw);
        let sigma = t.lower_bound(e, SIGMA_MIN);
        Ok((mu, sigma))
    }

    fn check_image(&self, x: &Array3<f64>) -> Result<()> {
        let (c, h, w) = x.dim();
        if c != 3 {
            return Err(Error::dim(format!("expected a 3-channel image, got {c}")));
        }
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 || h == 0 || w == 0 {
            return Err(Error::dim(format!(
                "image {h}x{w} is not a positive multiple of {DOWNSAMPLE}"
            )));
        }
        Ok(())
    }

    fn check_latent(&self, y: &Array3<f64>) -> Result<()> {
        let c = y.dim().0;
        if c != self.config.m_channels {
            return Err(Error::dim(format!(
                "latent has {c} channels, codec expects {}",
                self.config.m_channels
            )));
        }
        Ok(())
    }
}

fn eval<F>(input: &Array3<f64>, f: F) -> Result<Array3<f64>>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut t = Tape::new();
    let x = t.constant(input.clone().into_dyn());
    let y = f(&mut t, x)?;
    Ok(into3(t.value(y).clone()))
}

/// Latent `y` (`M x H/16 x W/16`) of an image with values in `[0, 1]`.
pub fn analyze(x: &Array3<f64>, codec: &CodecWeights, adapters: Option<&AdapterSet>) -> Result<Array3<f64>> {
    codec.check_image(x)?;
    eval(x, |t, v| codec.analyze_tape(t, v, adapters))
}

/// Reconstruction from a (quantized) latent, clamped to `[0, 1]`.
pub fn synthesize(y_hat: &Array3<f64>, codec: &CodecWeights, adapters: Option<&AdapterSet>) -> Result<Array3<f64>> {
    codec.check_latent(y_hat)?;
    let x = eval(y_hat, |t, v| codec.synthesize_tape(t, v, adapters))?;
    Ok(x.mapv(|v| v.clamp(0.0, 1.0)))
}

/// Hyper-latent `z` of a latent.
pub fn hyper_analyze(y: &Array3<f64>, codec: &CodecWeights) -> Result<Array3<f64>> {
    hyper_analyze_with(y, codec, None)
}

pub fn hyper_analyze_with(y: &Array3<f64>, codec: &CodecWeights, adapters: Option<&AdapterSet>) -> Result<Array3<f64>> {
    codec.check_latent(y)?;
    eval(y, |t, v| codec.hyper_analyze_tape(t, v, adapters))
}

/// Gaussian parameters for a latent of spatial size `latent_hw`.
pub fn hyper_synthesize(
    z_hat: &Array3<f64>,
    codec: &CodecWeights,
    latent_hw: (usize, usize),
) -> Result<EntropyParameters> {
    hyper_synthesize_with(z_hat, codec, latent_hw, None)
}

pub fn hyper_synthesize_with(
    z_hat: &Array3<f64>,
    codec: &CodecWeights,
    latent_hw: (usize, usize),
    adapters: Option<&AdapterSet>,
) -> Result<EntropyParameters> {
    if z_hat.dim().0 != codec.config.n_channels {
        return Err(Error::dim(format!(
            "hyper-latent has {} channels, codec expects {}",
            z_hat.dim().0,
            codec.config.n_channels
        )));
    }
    let mut t = Tape::new();
    let z = t.constant(z_hat.clone().into_dyn());
    let (mu, sigma) = codec.hyper_synthesize_tape(&mut t, z, latent_hw, adapters)?;
    Ok(EntropyParameters {
        mu: into3(t.value(mu).clone()),
        sigma: into3(t.value(sigma).clone()),
    })
}

/// Reflect-pads an image so both spatial sizes are multiples of `multiple`.
pub fn pad_image(x: &Array3<f64>, multiple: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    let reflect = |i: usize, n: usize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let r = i % period;
        if r < n {
            r
        } else {
            period - r
        }
    };
    Array3::from_shape_fn((c, ph, pw), |(ch, i, j)| x[[ch, reflect(i, h), reflect(j, w)]])
}

/// Top-left crop back to the original size.
pub fn crop_image(x: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
    x.slice(s![.., ..h, ..w]).to_owned()
}

/// Channel widths at each adapter site for this codec.
pub fn site_channels(config: &CodecConfig, site: AdapterSite) -> usize {
    match site {
        AdapterSite::Encoder(_) | AdapterSite::Decoder(_) | AdapterSite::HyperEncoder => config.n_channels,
        AdapterSite::HyperDecoder => config.m_channels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdapterSpec, PlacementConfig};

    fn image(h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, h, w), |_| rng.gen_range(0.0..1.0))
    }

    fn toy() -> CodecWeights {
        CodecWeights::init(
            CodecConfig {
                n_channels: 8,
                m_channels: 12,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn gdn_identity_and_scalar_case() {
        let x = StageFeature::new(image(3, 4, 2)).unwrap();
        let mut p = GdnParams::new(3);
        p.gamma.fill(0.0);
        assert_eq!(gdn(&x, &p, false).unwrap(), x);
        let one = StageFeature::new(Array3::from_elem((1, 1, 1), 2.0)).unwrap();
        let mut p = GdnParams::new(1);
        p.gamma[[0, 0]] = 0.75;
        assert!((gdn(&one, &p, false).unwrap().data()[[0, 0, 0]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gdn_channel_check() {
        let x = StageFeature::new(image(2, 3, 4)).unwrap();
        let y = gdn(&x, &GdnParams::new(3), true).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
        assert!(matches!(gdn(&x, &GdnParams::new(2), false), Err(Error::Dimension(_))));
    }

    #[test]
    fn shape_contracts() {
        let c = toy();
        let x = image(64, 48, 3);
        let y = analyze(&x, &c, None).unwrap();
        assert_eq!(y.dim(), (12, 4, 3));
        let z = hyper_analyze(&y, &c).unwrap();
        assert_eq!(z.dim(), (8, 1, 1));
        let p = hyper_synthesize(&z.mapv(f64::round), &c, (4, 3)).unwrap();
        assert_eq!(p.mu.dim(), (12, 4, 3));
        assert!(p.sigma.iter().all(|&s| s >= SIGMA_MIN));
        let xr = synthesize(&y.mapv(f64::round), &c, None).unwrap();
        assert_eq!(xr.dim(), (3, 64, 48));
        assert!(xr.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rejects_unpadded_input() {
        assert!(matches!(
            analyze(&image(20, 32, 0), &toy(), None),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_init_adapters_are_transparent() {
        let c = toy();
        let set = AdapterSet::init(
            &AdapterSpec {
                middle_dim: 4,
                ..Default::default()
            },
            &PlacementConfig {
                hyper_encoder: true,
                hyper_decoder: true,
                ..Default::default()
            },
            |s| site_channels(&c.config, s),
            7,
        )
        .unwrap();
        let x = image(32, 32, 5);
        let y0 = analyze(&x, &c, None).unwrap();
        let y1 = analyze(&x, &c, Some(&set)).unwrap();
        assert_eq!(y0, y1);
        let q = y0.mapv(f64::round);
        assert_eq!(
            synthesize(&q, &c, None).unwrap(),
            synthesize(&q, &c, Some(&set)).unwrap()
        );
        let z0 = hyper_analyze_with(&y0, &c, None).unwrap();
        assert_eq!(z0, hyper_analyze_with(&y0, &c, Some(&set)).unwrap());
        let zq = z0.mapv(f64::round);
        assert_eq!(
            hyper_synthesize_with(&zq, &c, (2, 2), None).unwrap(),
            hyper_synthesize_with(&zq, &c, (2, 2), Some(&set)).unwrap()
        );
    }

    #[test]
    fn quantization_modes() {
        let y = Array3::from_shape_vec((1, 1, 4), vec![1.4, -0.5, 0.5, 2.5]).unwrap();
        let r = quantize(&y, QuantMode::Round, 0).unwrap();
        assert_eq!(r.as_slice().unwrap(), &[1.0, -1.0, 1.0, 3.0]);
        let n = quantize(&y, QuantMode::Noise, 3).unwrap();
        for (a, b) in n.iter().zip(y.iter()) {
            assert!(*a >= b - 0.5 && *a < b + 0.5);
        }
        assert_eq!(n, quantize(&y, QuantMode::Noise, 3).unwrap());
        assert!(quantize(&y.mapv(|_| f64::NAN), QuantMode::Round, 0).is_err());
    }

    #[test]
    fn reflect_padding_and_crop() {
        let x = image(5, 7, 1);
        let p = pad_image(&x, 16);
        assert_eq!(p.dim(), (3, 16, 16));
        assert_eq!(crop_image(&p, 5, 7), x);
        assert_eq!(p[[0, 5, 0]], x[[0, 3, 0]]);
    }
}
