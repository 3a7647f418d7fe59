//! Two-layer coding. A mask generator over the entropy parameters selects
//! the latent elements of a base layer that serves a machine task through
//! decoder-side adapters. The remaining elements form an enhancement layer,
//! and base plus enhancement decode to the unmodified human-vision image.
//!
//! Both sides recompute the mask from the decoded hyper-latent, so no mask
//! bits are sent. Elements outside the mask are skipped by the base stream
//! rather than coded as zeros.

use std::collections::BTreeMap;

use ndarray::{Array3, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Gumbel;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSet, AdapterSpec, PlacementConfig};
use crate::autodiff::{Tape, Var};
use crate::codec::{
    analyze, crop_image, hyper_analyze, hyper_synthesize, quantize_tape, site_channels, synthesize, CodecWeights,
    EntropyParameters, QuantMode, ADAPTER_PREFIX,
};
use crate::data::Sample;
use crate::entropy::bitstream::{prepare_image, MASK_ONE_KEEPS};
use crate::entropy::{
    decode_hyper, decode_latent, encode_hyper, encode_latent, gaussian_bits, Bitstream, CodingMode, FactorizedPrior,
};
use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::optim::{accumulate, Adam};
use crate::task::{distortion_tape, TaskDistortionModel};
use crate::tensor::{into3, join, ParamSet, Tensor};
use crate::training::{MetricRow, StepLosses, PRIOR_PREFIX};

/// Name prefix of mask-generator parameters on a tape.
pub const MASK_PREFIX: &str = "mask";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskGeneratorConfig {
    pub hidden: usize,
    /// Gumbel-softmax temperature.
    pub temperature: f64,
    /// Initial keep-minus-drop logit (positive starts with most elements kept).
    pub keep_bias: f64,
}

impl Default for MaskGeneratorConfig {
    fn default() -> Self {
        MaskGeneratorConfig {
            hidden: 32,
            temperature: 1.0,
            keep_bias: 2.0,
        }
    }
}

/// Three 3x3 convolutions from `concat(mu, sigma)` (`2M` channels) to
/// per-element keep and drop logits (channels `0..M` and `M..2M`).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskGenerator {
    pub layers: Vec<Conv>,
    pub temperature: f64,
}

impl ParamSet for MaskGenerator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.layers.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.layers.visit_mut(prefix, f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Gumbel-softmax sample: hard forward value, soft gradient.
    HardSt,
    /// Deterministic argmax of the logits.
    Eval,
    /// Relaxed Gumbel-sigmoid sample, the function whose gradient `HardSt`
    /// passes through.
    Soft,
}

impl MaskGenerator {
    pub fn init(latent_channels: usize, config: &MaskGeneratorConfig, seed: u64) -> Result<Self> {
        if !(config.temperature > 0.0) {
            return Err(Error::config("mask temperature must be positive"));
        }
        if latent_channels == 0 || config.hidden == 0 {
            return Err(Error::config("mask generator needs positive channel counts"));
        }
        let m = latent_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut last = Conv::init(config.hidden, 2 * m, 3, 1, &mut rng);
        last.weight.mapv_inplace(|v| v * 0.1);
        last.bias.slice_mut(ndarray::s![..m]).fill(config.keep_bias);
        let layers = vec![
            Conv::init(2 * m, config.hidden, 3, 1, &mut rng),
            Conv::init(config.hidden, config.hidden, 3, 1, &mut rng),
            last,
        ];
        Ok(MaskGenerator {
            layers,
            temperature: config.temperature,
        })
    }

    pub fn latent_channels(&self) -> usize {
        self.layers[0].in_dim() / 2
    }

    /// Keep-minus-drop logit difference on the tape.
    fn logit_gap(&self, t: &mut Tape, mu: Var, sigma: Var) -> Result<Var> {
        let m = self.latent_channels();
        let (sm, ss) = (t.value(mu).shape().to_vec(), t.value(sigma).shape().to_vec());
        if sm != ss || sm.len() != 3 || sm[0] != m {
            return Err(Error::dim(format!(
                "mask generator expects {m}-channel mu and sigma, got {sm:?} and {ss:?}"
            )));
        }
        let mut h = t.concat_channels(&[mu, sigma]);
        let last = self.layers.len() - 1;
        for (i, conv) in self.layers.iter().enumerate() {
            h = conv.apply(t, &join(MASK_PREFIX, &i.to_string()), h);
            if i < last {
                h = t.relu(h);
            }
        }
        let keep = t.slice_channels(h, 0, m);
        let drop = t.slice_channels(h, m, m);
        Ok(t.sub(keep, drop))
    }
}

/// Mask on the tape. `HardSt` draws Gumbel noise from `rng`; the forward
/// value is the hard one-hot choice and the gradient is that of the
/// two-class softmax keep probability.
pub fn generate_mask_tape<R: Rng>(
    t: &mut Tape,
    mu: Var,
    sigma: Var,
    gen: &MaskGenerator,
    mode: MaskMode,
    rng: &mut R,
) -> Result<Var> {
    if !(gen.temperature > 0.0) {
        return Err(Error::config("mask temperature must be positive"));
    }
    let gap = gen.logit_gap(t, mu, sigma)?;
    match mode {
        MaskMode::Eval => {
            let hard = t.value(gap).mapv(|d| if d > 0.0 { 1.0 } else { 0.0 });
            Ok(t.constant(hard))
        }
        MaskMode::HardSt | MaskMode::Soft => {
            let gumbel = Gumbel::new(0.0, 1.0).expect("valid Gumbel");
            // difference of the two classes' Gumbel noises
            let noise = t.value(gap).mapv(|_| rng.sample(gumbel) - rng.sample(gumbel));
            let n = t.constant(noise);
            let noisy = t.add(gap, n);
            let scaled = t.scale(noisy, 1.0 / gen.temperature);
            let soft = t.sigmoid(scaled);
            if mode == MaskMode::Soft {
                return Ok(soft);
            }
            let hard = t.value(noisy).mapv(|d| if d > 0.0 { 1.0 } else { 0.0 });
            Ok(t.straight_through(soft, hard))
        }
    }
}

/// Mask for the given entropy parameters, binary except in `Soft` mode. `seed`
/// keys the Gumbel noise of the sampling modes.
pub fn generate_mask(
    params: &EntropyParameters,
    gen: &MaskGenerator,
    mode: MaskMode,
    seed: u64,
) -> Result<Array3<f64>> {
    let mut t = Tape::new();
    let mu = t.constant(params.mu.clone().into_dyn());
    let sigma = t.constant(params.sigma.clone().into_dyn());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = generate_mask_tape(&mut t, mu, sigma, gen, mode, &mut rng)?;
    Ok(into3(t.value(m).clone()))
}

fn to_bool(mask: &Array3<f64>) -> Result<Array3<bool>> {
    if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Input("mask entries must be 0 or 1".into()));
    }
    Ok(mask.mapv(|v| v == 1.0))
}

/// `(mask * y_hat, (1 - mask) * y_hat)`.
pub fn split_latent(y_hat: &Array3<f64>, mask: &Array3<f64>) -> Result<(Array3<f64>, Array3<f64>)> {
    if y_hat.dim() != mask.dim() {
        return Err(Error::dim(format!("latent {:?} vs mask {:?}", y_hat.dim(), mask.dim())));
    }
    let keep = to_bool(mask)?;
    let mut base = Array3::zeros(y_hat.dim());
    let mut rest = Array3::zeros(y_hat.dim());
    Zip::from(&mut base)
        .and(&mut rest)
        .and(y_hat)
        .and(&keep)
        .for_each(|b, r, &y, &k| {
            if k {
                *b = y;
            } else {
                *r = y;
            }
        });
    Ok((base, rest))
}

/// Estimated base-layer bits: Gaussian bits summed over kept elements.
pub fn base_layer_bits(y_hat: &Array3<f64>, params: &EntropyParameters, mask: &Array3<f64>) -> Result<f64> {
    let bits = gaussian_bits(y_hat, params)?;
    let keep = to_bool(mask)?;
    if keep.dim() != bits.dim() {
        return Err(Error::dim("mask shape differs from latent"));
    }
    Ok(Zip::from(&bits)
        .and(&keep)
        .fold(0.0, |acc, &b, &k| if k { acc + b } else { acc }))
}

fn check_decoder_only(adapters: &AdapterSet) -> Result<()> {
    let p = &adapters.placement;
    if !p.encoder_stages.is_empty() || p.hyper_encoder || p.hyper_decoder {
        return Err(Error::config("scalable mode only allows decoder-stage adapters"));
    }
    Ok(())
}

/// Machine-vision reconstruction of the base latent through decoder adapters.
pub fn decode_base(y1: &Array3<f64>, codec: &CodecWeights, adapters: &AdapterSet) -> Result<Array3<f64>> {
    check_decoder_only(adapters)?;
    synthesize(y1, codec, Some(adapters))
}

/// Human-vision reconstruction of the full latent by the unmodified codec.
pub fn decode_full(y_hat: &Array3<f64>, codec: &CodecWeights) -> Result<Array3<f64>> {
    synthesize(y_hat, codec, None)
}

/// Compresses into `[hyper, base, enhancement]` sections.
pub fn compress_scalable(
    x: &Array3<f64>,
    codec: &CodecWeights,
    prior: &FactorizedPrior,
    gen: &MaskGenerator,
    lambda_id: u8,
) -> Result<Vec<u8>> {
    let (padded, mut header) = prepare_image(x)?;
    header.mode = CodingMode::Scalable;
    header.lambda_id = lambda_id;
    header.latent_channels = codec.config.m_channels as u16;
    header.hyper_channels = codec.config.n_channels as u16;
    header.mask_convention = MASK_ONE_KEEPS;
    let y = analyze(&padded, codec, None)?;
    let z_hat = hyper_analyze(&y, codec)?.mapv(f64::round);
    let params = hyper_synthesize(&z_hat, codec, header.latent_hw())?;
    let keep = to_bool(&generate_mask(&params, gen, MaskMode::Eval, 0)?)?;
    let y_hat = y.mapv(f64::round);
    let sections = vec![
        encode_hyper(&z_hat, prior)?,
        encode_latent(&y_hat, &params, Some(&keep))?,
        encode_latent(&y_hat, &params, Some(&keep.mapv(|k| !k)))?,
    ];
    Ok(Bitstream { header, sections }.to_bytes())
}

/// Latents recovered from a scalable stream.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalableLatents {
    pub mask: Array3<f64>,
    /// `mask * y_hat`, decodable from the hyper and base sections alone.
    pub base: Array3<f64>,
    pub full: Array3<f64>,
}

fn parse_scalable(bytes: &[u8], codec: &CodecWeights) -> Result<Bitstream> {
    let stream = Bitstream::parse(bytes)?;
    if stream.header.mode != CodingMode::Scalable {
        return Err(Error::Stream("not a scalable stream".into()));
    }
    if stream.header.mask_convention != MASK_ONE_KEEPS {
        return Err(Error::Stream(format!(
            "unknown mask convention {}",
            stream.header.mask_convention
        )));
    }
    stream.header.check_codec(codec)?;
    if stream.sections.len() != 3 {
        return Err(Error::Stream(format!(
            "expected 3 sections, found {}",
            stream.sections.len()
        )));
    }
    Ok(stream)
}

/// Decodes the base layer and, when `with_enhancement`, the full latent.
/// Without it `full` equals `base`.
pub fn decode_scalable_latents(
    bytes: &[u8],
    codec: &CodecWeights,
    prior: &FactorizedPrior,
    gen: &MaskGenerator,
    with_enhancement: bool,
) -> Result<ScalableLatents> {
    let stream = parse_scalable(bytes, codec)?;
    let z_hat = decode_hyper(&stream.sections[0], prior, stream.header.hyper_hw())?;
    let params = hyper_synthesize(&z_hat, codec, stream.header.latent_hw())?;
    let mask = generate_mask(&params, gen, MaskMode::Eval, 0)?;
    let keep = to_bool(&mask)?;
    let base = decode_latent(&stream.sections[1], &params, Some(&keep))?;
    let full = if with_enhancement {
        base.clone() + decode_latent(&stream.sections[2], &params, Some(&keep.mapv(|k| !k)))?
    } else {
        base.clone()
    };
    Ok(ScalableLatents { mask, base, full })
}

fn crop_to_header(x: Array3<f64>, bytes: &[u8]) -> Result<Array3<f64>> {
    let h = Bitstream::parse(bytes)?.header;
    Ok(crop_image(&x, h.orig_h as usize, h.orig_w as usize))
}

/// Machine-vision image from the hyper and base sections.
pub fn decompress_base(
    bytes: &[u8],
    codec: &CodecWeights,
    prior: &FactorizedPrior,
    gen: &MaskGenerator,
    adapters: &AdapterSet,
) -> Result<Array3<f64>> {
    let lat = decode_scalable_latents(bytes, codec, prior, gen, false)?;
    crop_to_header(decode_base(&lat.base, codec, adapters)?, bytes)
}

/// Human-vision image from all sections.
pub fn decompress_full(
    bytes: &[u8],
    codec: &CodecWeights,
    prior: &FactorizedPrior,
    gen: &MaskGenerator,
) -> Result<Array3<f64>> {
    let lat = decode_scalable_latents(bytes, codec, prior, gen, true)?;
    crop_to_header(decode_full(&lat.full, codec)?, bytes)
}

/// Payload sizes of a scalable stream, in bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBits {
    pub hyper: usize,
    pub base: usize,
    pub enhancement: usize,
}

pub fn layer_bits(bytes: &[u8]) -> Result<LayerBits> {
    let s = Bitstream::parse(bytes)?;
    if s.header.mode != CodingMode::Scalable || s.sections.len() != 3 {
        return Err(Error::Stream("not a scalable stream".into()));
    }
    Ok(LayerBits {
        hyper: 8 * s.sections[0].len(),
        base: 8 * s.sections[1].len(),
        enhancement: 8 * s.sections[2].len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalableTrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub generator: MaskGeneratorConfig,
    pub adapter: AdapterSpec,
    pub seed: u64,
}

impl Default for ScalableTrainConfig {
    fn default() -> Self {
        ScalableTrainConfig {
            lambda: 10.0,
            epochs: 2,
            batch_size: 4,
            lr: 1e-3,
            generator: MaskGeneratorConfig::default(),
            adapter: AdapterSpec::default(),
            seed: 0,
        }
    }
}

/// Mask generator plus decoder-side adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalableModel {
    pub generator: MaskGenerator,
    pub adapters: AdapterSet,
}

impl ScalableModel {
    pub fn init(codec: &CodecWeights, config: &ScalableTrainConfig) -> Result<Self> {
        let generator = MaskGenerator::init(codec.config.m_channels, &config.generator, config.seed)?;
        let adapters = AdapterSet::init(
            &config.adapter,
            &PlacementConfig::decoder_only(),
            |s| site_channels(&codec.config, s),
            config.seed,
        )?;
        Ok(ScalableModel { generator, adapters })
    }
}

/// One step on the generator and decoder adapters: base-layer rate (noise
/// proxy, masked) plus `lambda` times the task distortion of the base decode.
pub fn scalable_step(
    batch: &[Array3<f64>],
    codec: &CodecWeights,
    prior: &FactorizedPrior,
    model: &mut ScalableModel,
    task: &dyn TaskDistortionModel,
    lambda: f64,
    opts: &mut (Adam, Adam),
    rng: &mut ChaCha8Rng,
) -> Result<(StepLosses, BTreeMap<String, Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    check_decoder_only(&model.adapters)?;
    let scale = 1.0 / batch.len() as f64;
    let mut grads = BTreeMap::new();
    let mut sum = StepLosses {
        loss: 0.0,
        rate: 0.0,
        distortion: 0.0,
    };
    for x in batch {
        let (_, h, w) = x.dim();
        let reference = task.stage_features(x)?;
        let mut t = Tape::with_trainable(|n| n.starts_with("mask.") || n.starts_with("adapters."));
        let xv = t.constant(x.clone().into_dyn());
        let y = codec.analyze_tape(&mut t, xv, None)?;
        let z = codec.hyper_analyze_tape(&mut t, y, None)?;
        let z_tilde = quantize_tape(&mut t, z, QuantMode::Noise, rng);
        let z_bits = prior.bits_tape(&mut t, PRIOR_PREFIX, z_tilde);
        let lat = t.value(y).shape().to_vec();
        let (mu, sigma) = codec.hyper_synthesize_tape(&mut t, z_tilde, (lat[1], lat[2]), None)?;
        let mask = generate_mask_tape(&mut t, mu, sigma, &model.generator, MaskMode::HardSt, rng)?;
        let y_tilde = quantize_tape(&mut t, y, QuantMode::Noise, rng);
        let y_bits = t.gaussian_bits(y_tilde, mu, sigma);
        let kept_bits = t.mul(y_bits, mask);
        let sy = t.sum(kept_bits);
        let sz = t.sum(z_bits);
        let bits = t.add(sy, sz);
        let rate = t.scale(bits, 1.0 / (h * w) as f64);
        let y_hat = quantize_tape(&mut t, y, QuantMode::Ste, rng);
        let y1 = t.mul(y_hat, mask);
        let x1 = codec.synthesize_tape(&mut t, y1, Some(&model.adapters))?;
        let d = distortion_tape(&mut t, task, x1, &reference)?;
        let wd = t.scale(d, lambda);
        let loss = t.add(rate, wd);
        let l = StepLosses {
            loss: t.scalar(loss),
            rate: t.scalar(rate),
            distortion: t.scalar(d),
        };
        if !l.loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite scalable loss {l:?}")));
        }
        sum.loss += l.loss * scale;
        sum.rate += l.rate * scale;
        sum.distortion += l.distortion * scale;
        let g = t.backward(loss);
        accumulate(&mut grads, t.param_grads(&g), scale);
    }
    opts.0.step(&mut model.generator, MASK_PREFIX, &grads)?;
    opts.1.step(&mut model.adapters, ADAPTER_PREFIX, &grads)?;
    Ok((sum, grads))
}

/// Trains a fresh mask generator and decoder adapters against a frozen codec.
pub fn train_scalable(
    codec: &CodecWeights,
    prior: &FactorizedPrior,
    task: &dyn TaskDistortionModel,
    train: &[Sample],
    config: &ScalableTrainConfig,
) -> Result<(ScalableModel, Vec<MetricRow>)> {
    if !(config.lambda > 0.0) || config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::config(
            "scalable training needs positive lambda, batch size and lr",
        ));
    }
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut model = ScalableModel::init(codec, config)?;
    let mut opts = (Adam::new(config.lr), Adam::new(config.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5ca1_ab1e);
    let mut rows = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<Array3<f64>> = idx.iter().map(|&i| train[i].image.clone()).collect();
            let (l, _) = scalable_step(
                &batch,
                codec,
                prior,
                &mut model,
                task,
                config.lambda,
                &mut opts,
                &mut rng,
            )?;
            rows.push(MetricRow {
                step,
                epoch,
                loss: l.loss,
                rate: l.rate,
                distortion: l.distortion,
                lr: config.lr,
            });
            step += 1;
        }
    }
    Ok((model, rows))
}
