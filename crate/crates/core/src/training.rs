//! Rate plus task-distortion optimization of adapters, and rate plus MSE
//! pretraining of the base codec.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSet, AdapterSpec, PlacementConfig};
use crate::autodiff::{Tape, Var};
use crate::codec::{quantize_tape, site_channels, CodecConfig, CodecWeights, QuantMode, ADAPTER_PREFIX, CODEC_PREFIX};
use crate::data::Sample;
use crate::entropy::FactorizedPrior;
use crate::error::{Error, Result};
use crate::optim::{accumulate, Adam};
use crate::task::{distortion_tape, TaskDistortionModel};
use crate::tensor::Tensor;

/// Name prefix of the hyper-latent prior on a tape.
pub const PRIOR_PREFIX: &str = "prior";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Schedule {
    /// Multiply the rate by `gamma` at each milestone epoch.
    MultiStep {
        milestones: Vec<usize>,
        gamma: f64,
    },
    Constant,
}

impl Schedule {
    /// The classification schedule: halve at epochs 2 and 4.
    pub fn classification() -> Self {
        Schedule::MultiStep {
            milestones: vec![2, 4],
            gamma: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub schedule: Schedule,
    /// Training crop side; toy runs use the dataset image size.
    pub crop_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 10.0,
            batch_size: 8,
            epochs: 5,
            base_lr: 1e-4,
            schedule: Schedule::classification(),
            crop_size: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::config("lambda must be positive and finite"));
        }
        if self.batch_size == 0 || !(self.base_lr > 0.0) {
            return Err(Error::config("batch size and learning rate must be positive"));
        }
        if let Schedule::MultiStep { milestones, gamma } = &self.schedule {
            if milestones.windows(2).any(|w| w[1] <= w[0]) || !(*gamma > 0.0 && *gamma <= 1.0) {
                return Err(Error::config("milestones must increase and gamma lie in (0, 1]"));
            }
        }
        Ok(())
    }

    /// Learning rate during `epoch` (zero-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match &self.schedule {
            Schedule::Constant => self.base_lr,
            Schedule::MultiStep { milestones, gamma } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                self.base_lr * gamma.powi(passed as i32)
            }
        }
    }
}

/// Learning rate for each epoch of the run.
pub fn run_schedule(config: &TrainConfig) -> Vec<f64> {
    (0..config.epochs).map(|e| config.lr_at(e)).collect()
}

pub fn rd_loss(rate_bpp: f64, distortion: f64, lambda: f64) -> f64 {
    rate_bpp + lambda * distortion
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub loss: f64,
    pub rate: f64,
    pub distortion: f64,
}

/// Noise-proxy rate (bits per pixel) and straight-through reconstruction of
/// one image on the tape.
pub fn forward_train<R: rand::Rng>(
    t: &mut Tape,
    x: &Array3<f64>,
    codec: &CodecWeights,
    adapters: Option<&AdapterSet>,
    prior: &FactorizedPrior,
    decode_quant: QuantMode,
    rng: &mut R,
) -> Result<(Var, Var)> {
    let (_, h, w) = x.dim();
    let xv = t.constant(x.clone().into_dyn());
    let y = codec.analyze_tape(t, xv, adapters)?;
    let z = codec.hyper_analyze_tape(t, y, adapters)?;
    let z_tilde = quantize_tape(t, z, QuantMode::Noise, rng);
    let z_bits = prior.bits_tape(t, PRIOR_PREFIX, z_tilde);
    let lat = t.value(y).shape().to_vec();
    let (mu, sigma) = codec.hyper_synthesize_tape(t, z_tilde, (lat[1], lat[2]), adapters)?;
    let y_tilde = quantize_tape(t, y, QuantMode::Noise, rng);
    let y_bits = t.gaussian_bits(y_tilde, mu, sigma);
    let sy = t.sum(y_bits);
    let sz = t.sum(z_bits);
    let bits = t.add(sy, sz);
    let rate = t.scale(bits, 1.0 / (h * w) as f64);
    let y_hat = match decode_quant {
        QuantMode::Noise => y_tilde,
        q => quantize_tape(t, y, q, rng),
    };
    let x_hat = codec.synthesize_tape(t, y_hat, adapters)?;
    Ok((rate, x_hat))
}

fn check_finite(l: &StepLosses) -> Result<()> {
    if !l.loss.is_finite() || !l.rate.is_finite() || !l.distortion.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss: loss={} rate={} distortion={}",
            l.loss, l.rate, l.distortion
        )));
    }
    Ok(())
}

/// One optimization step on the adapters only. Returns the batch-mean losses
/// and the gradients that were applied (keyed by tape name).
pub fn train_step(
    batch: &[Array3<f64>],
    codec: &CodecWeights,
    adapters: &mut AdapterSet,
    prior: &FactorizedPrior,
    model: &dyn TaskDistortionModel,
    config: &TrainConfig,
    opt: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<(StepLosses, BTreeMap<String, Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = BTreeMap::new();
    let mut sum = StepLosses {
        loss: 0.0,
        rate: 0.0,
        distortion: 0.0,
    };
    for x in batch {
        let reference = model.stage_features(x)?;
        let mut t = Tape::with_trainable(|n| n.starts_with("adapters."));
        let (rate, x_hat) = forward_train(&mut t, x, codec, Some(adapters), prior, QuantMode::Ste, rng)?;
        let d = distortion_tape(&mut t, model, x_hat, &reference)?;
        let wd = t.scale(d, config.lambda);
        let loss = t.add(rate, wd);
        let l = StepLosses {
            loss: t.scalar(loss),
            rate: t.scalar(rate),
            distortion: t.scalar(d),
        };
        check_finite(&l)?;
        sum.loss += l.loss * scale;
        sum.rate += l.rate * scale;
        sum.distortion += l.distortion * scale;
        let g = t.backward(loss);
        accumulate(&mut grads, t.param_grads(&g), scale);
    }
    opt.step(adapters, ADAPTER_PREFIX, &grads)?;
    Ok((sum, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub rate: f64,
    pub distortion: f64,
    pub lr: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,epoch,loss,rate,distortion,lr")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.step, r.epoch, r.loss, r.rate, r.distortion, r.lr
        )?;
    }
    f.flush()?;
    Ok(())
}

fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Trains a fresh adapter set against a frozen codec and task model.
pub fn train_adapters(
    codec: &CodecWeights,
    prior: &FactorizedPrior,
    model: &dyn TaskDistortionModel,
    spec: &AdapterSpec,
    placement: &PlacementConfig,
    train: &[Sample],
    config: &TrainConfig,
) -> Result<(AdapterSet, Vec<MetricRow>)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut adapters = AdapterSet::init(spec, placement, |s| site_channels(&codec.config, s), config.seed)?;
    let mut opt = Adam::new(config.base_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5f3a_9c11);
    let mut rows = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        opt.lr = config.lr_at(epoch);
        for idx in epoch_batches(train.len(), config.batch_size, &mut rng) {
            let batch: Vec<Array3<f64>> = idx.iter().map(|&i| train[i].image.clone()).collect();
            let (l, _) = train_step(&batch, codec, &mut adapters, prior, model, config, &mut opt, &mut rng)?;
            rows.push(MetricRow {
                step,
                epoch,
                loss: l.loss,
                rate: l.rate,
                distortion: l.distortion,
                lr: opt.lr,
            });
            step += 1;
        }
    }
    Ok((adapters, rows))
}

/// Settings for pretraining the base codec for pixel fidelity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseTrainConfig {
    pub codec: CodecConfig,
    /// Weight of `255^2 * MSE` against bits per pixel.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Quantization proxy on the reconstruction path.
    pub decode_quant: QuantMode,
    pub seed: u64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        BaseTrainConfig {
            codec: CodecConfig::default(),
            lambda: 0.01,
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            decode_quant: QuantMode::Noise,
            seed: 0,
        }
    }
}

/// Rate plus scaled MSE pretraining of codec and prior. `init` warm-starts
/// from existing weights.
pub fn pretrain_base(
    config: &BaseTrainConfig,
    train: &[Sample],
    init: Option<(CodecWeights, FactorizedPrior)>,
) -> Result<(CodecWeights, FactorizedPrior, Vec<MetricRow>)> {
    if !(config.lambda > 0.0) || config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::config(
            "base pretraining needs positive lambda, batch size and lr",
        ));
    }
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let (mut codec, mut prior) = match init {
        Some(w) => w,
        None => {
            let c = CodecWeights::init(config.codec, config.seed)?;
            let p = FactorizedPrior::new(config.codec.n_channels);
            (c, p)
        }
    };
    let mut opt_c = Adam::new(config.lr);
    let mut opt_p = Adam::new(config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xba5e);
    let mut rows = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        for idx in epoch_batches(train.len(), config.batch_size, &mut rng) {
            let scale = 1.0 / idx.len() as f64;
            let mut grads = BTreeMap::new();
            let mut sum = StepLosses {
                loss: 0.0,
                rate: 0.0,
                distortion: 0.0,
            };
            for &i in &idx {
                let x = &train[i].image;
                let mut t = Tape::with_trainable(|n| n.starts_with("codec.") || n.starts_with("prior."));
                let (rate, x_hat) = forward_train(&mut t, x, &codec, None, &prior, config.decode_quant, &mut rng)?;
                let xv = t.constant(x.clone().into_dyn());
                let d = t.mse(x_hat, xv);
                let wd = t.scale(d, config.lambda * 255.0 * 255.0);
                let loss = t.add(rate, wd);
                let l = StepLosses {
                    loss: t.scalar(loss),
                    rate: t.scalar(rate),
                    distortion: t.scalar(d),
                };
                check_finite(&l)?;
                sum.loss += l.loss * scale;
                sum.rate += l.rate * scale;
                sum.distortion += l.distortion * scale;
                let g = t.backward(loss);
                accumulate(&mut grads, t.param_grads(&g), scale);
            }
            opt_c.step(&mut codec, CODEC_PREFIX, &grads)?;
            opt_p.step(&mut prior, PRIOR_PREFIX, &grads)?;
            codec.project();
            rows.push(MetricRow {
                step,
                epoch,
                loss: sum.loss,
                rate: sum.rate,
                distortion: sum.distortion,
                lr: config.lr,
            });
            step += 1;
        }
    }
    Ok((codec, prior, rows))
}
