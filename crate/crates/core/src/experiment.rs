//! End-to-end experiment steps on the synthetic dataset: pretraining the
//! frozen components, adapter grids, rate-accuracy evaluation and ablations.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSet, AdapterSpec, PlacementConfig, Variant};
use crate::analysis::{bd_metric, BdMode, RdCurve, RdPoint};
use crate::codec::{CodecWeights, ADAPTER_PREFIX};
use crate::config::RunConfig;
use crate::data::{Sample, Split, SyntheticDataset};
use crate::entropy::{compress, decompress, Bitstream, CodingMode, FactorizedPrior};
use crate::error::{Error, Result};
use crate::scalable::{train_scalable, ScalableModel, ScalableTrainConfig};
use crate::task::ConvClassifier;
use crate::tensor::ParamSet;
use crate::training::{pretrain_base, train_adapters, BaseTrainConfig, MetricRow, TrainConfig};

/// Frozen base codec with its hyper-latent prior.
#[derive(Clone, Debug, PartialEq)]
pub struct Base {
    pub codec: CodecWeights,
    pub prior: FactorizedPrior,
}

impl Base {
    /// Checksum over codec and prior weights.
    pub fn checksum(&self) -> String {
        format!("{}:{}", self.codec.checksum(), self.prior.checksum())
    }
}

fn dataset(cfg: &RunConfig) -> Result<SyntheticDataset> {
    SyntheticDataset::new(cfg.dataset.clone())
}

pub fn train_samples(cfg: &RunConfig, len: usize) -> Result<Vec<Sample>> {
    Ok(dataset(cfg)?.samples(Split::Train, 0..len))
}

pub fn eval_samples(cfg: &RunConfig) -> Result<Vec<Sample>> {
    Ok(dataset(cfg)?.samples(Split::Eval, 0..cfg.eval.eval_len))
}

/// Trains the toy classifier on clean images. Returns the model and the
/// per-epoch losses.
pub fn pretrain_task(cfg: &RunConfig) -> Result<(ConvClassifier, Vec<f64>)> {
    let mut m = ConvClassifier::init(&cfg.task_model(), cfg.seed)?;
    let train = train_samples(cfg, cfg.task.train_len)?;
    let losses = m.pretrain(&train, cfg.task.epochs, cfg.task.batch_size, cfg.task.lr, cfg.seed)?;
    Ok((m, losses))
}

/// One base codec per lambda id, each warm-started from the previous.
pub fn pretrain_bases(cfg: &RunConfig) -> Result<Vec<(Base, Vec<MetricRow>)>> {
    let train = train_samples(cfg, cfg.base.train_len)?;
    let mut out: Vec<(Base, Vec<MetricRow>)> = Vec::new();
    for (i, &lambda) in cfg.base.lambdas.iter().enumerate() {
        let warm = out.last().map(|(b, _)| (b.codec.clone(), b.prior.clone()));
        let bc = BaseTrainConfig {
            codec: cfg.codec,
            lambda,
            epochs: if warm.is_some() {
                cfg.base.warm_epochs
            } else {
                cfg.base.first_epochs
            },
            batch_size: cfg.base.batch_size,
            lr: cfg.base.lr,
            decode_quant: cfg.base.decode_quant,
            seed: cfg.seed.wrapping_add(i as u64),
        };
        let (codec, prior, rows) = pretrain_base(&bc, &train, warm)?;
        out.push((Base { codec, prior }, rows));
    }
    Ok(out)
}

/// Adapter training settings for lambda id `id`.
pub fn adapter_train_config(cfg: &RunConfig, id: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lambda: cfg.train.lambdas[id],
        batch_size: cfg.train.batch_size,
        epochs: cfg.train.epochs,
        base_lr: cfg.train.base_lr,
        schedule: cfg.train.schedule.clone(),
        crop_size: cfg.dataset.size,
        seed,
    }
}

/// Trains one adapter set per base codec.
pub fn train_adapter_grid(
    cfg: &RunConfig,
    bases: &[Base],
    task: &ConvClassifier,
    spec: &AdapterSpec,
    placement: &PlacementConfig,
    seed: u64,
) -> Result<Vec<(AdapterSet, Vec<MetricRow>)>> {
    if bases.len() != cfg.lambda_count() {
        return Err(Error::config(format!(
            "{} base codecs for {} lambdas",
            bases.len(),
            cfg.lambda_count()
        )));
    }
    let train = train_samples(cfg, cfg.train.train_len)?;
    bases
        .iter()
        .enumerate()
        .map(|(i, b)| {
            train_adapters(
                &b.codec,
                &b.prior,
                task,
                spec,
                placement,
                &train,
                &adapter_train_config(cfg, i, seed),
            )
        })
        .collect()
}

pub fn train_scalable_grid(
    cfg: &RunConfig,
    bases: &[Base],
    task: &ConvClassifier,
) -> Result<Vec<(ScalableModel, Vec<MetricRow>)>> {
    let train = train_samples(cfg, cfg.train.train_len)?;
    bases
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let sc = ScalableTrainConfig {
                lambda: cfg.train.lambdas[i],
                epochs: cfg.scalable.epochs,
                batch_size: cfg.scalable.batch_size,
                lr: cfg.scalable.lr,
                generator: cfg.scalable.generator,
                adapter: cfg.adapter.clone(),
                seed: cfg.seed,
            };
            train_scalable(&b.codec, &b.prior, task, &train, &sc)
        })
        .collect()
}

/// Payload bits (section bytes, no container header) of a stream.
pub fn payload_bits(bytes: &[u8]) -> Result<usize> {
    Ok(Bitstream::parse(bytes)?.sections.iter().map(|s| 8 * s.len()).sum())
}

pub fn psnr(x: &Array3<f64>, x_hat: &Array3<f64>) -> f64 {
    let mse = (x - x_hat).mapv(|d| d * d).mean().unwrap_or(0.0);
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Averages over an evaluation set of real coded streams.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    /// Payload bits per original pixel.
    pub bpp: f64,
    /// Top-1 accuracy of the task model on the reconstructions, percent.
    pub accuracy: f64,
    pub psnr: f64,
}

/// Human mode when `adapters` is `None`, machine mode otherwise.
pub fn evaluate(
    base: &Base,
    adapters: Option<&AdapterSet>,
    task: &ConvClassifier,
    samples: &[Sample],
) -> Result<EvalStats> {
    if samples.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mode = if adapters.is_some() {
        CodingMode::Machine
    } else {
        CodingMode::Human
    };
    let (mut bits, mut pixels, mut hits, mut mse) = (0usize, 0usize, 0usize, 0.0);
    for s in samples {
        let bytes = compress(&s.image, &base.codec, adapters, &base.prior, mode, 0)?;
        bits += payload_bits(&bytes)?;
        pixels += s.image.dim().1 * s.image.dim().2;
        let r = decompress(&bytes, &base.codec, adapters, &base.prior)?;
        hits += (task.predict(&r) == s.label) as usize;
        mse += (&s.image - &r).mapv(|d| d * d).mean().unwrap_or(0.0);
    }
    let n = samples.len() as f64;
    Ok(EvalStats {
        bpp: bits as f64 / pixels as f64,
        accuracy: 100.0 * hits as f64 / n,
        psnr: -10.0 * (mse / n).log10(),
    })
}

/// Rate-accuracy curve from one evaluation per lambda id.
pub fn accuracy_curve(label: &str, stats: &[EvalStats]) -> Result<RdCurve> {
    RdCurve::new(
        label,
        stats
            .iter()
            .map(|s| RdPoint {
                bpp: s.bpp,
                quality: s.accuracy,
            })
            .collect(),
    )
}

pub fn psnr_curve(label: &str, stats: &[EvalStats]) -> Result<RdCurve> {
    RdCurve::new(
        label,
        stats
            .iter()
            .map(|s| RdPoint {
                bpp: s.bpp,
                quality: s.psnr,
            })
            .collect(),
    )
}

/// One run of an ablation sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub middle_dim: usize,
    pub variant: Variant,
    pub placement: String,
    pub seed: u64,
    /// Trainable adapter parameters (per lambda id).
    pub params: usize,
    pub stats: Vec<EvalStats>,
    /// Accuracy BD-rate against the frozen base, percent.
    pub bd_rate: f64,
}

pub fn placement_label(p: &PlacementConfig) -> String {
    let list = |s: &std::collections::BTreeSet<usize>| s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("");
    let mut label = format!("enc{}_dec{}", list(&p.encoder_stages), list(&p.decoder_stages));
    if p.hyper_encoder {
        label.push_str("_he");
    }
    if p.hyper_decoder {
        label.push_str("_hd");
    }
    label
}

/// Sweeps the ablation grid (middle dims x variants x placements x seeds).
/// `anchor` is the frozen-base rate-accuracy curve. `on_row` sees each row
/// as soon as it is finished.
pub fn ablate(
    cfg: &RunConfig,
    bases: &[Base],
    task: &ConvClassifier,
    anchor: &RdCurve,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let eval = eval_samples(cfg)?;
    let mut rows = Vec::new();
    for &middle_dim in &cfg.ablate.middle_dims {
        for &variant in &cfg.ablate.variants {
            for placement in &cfg.ablate.placements {
                for &seed in &cfg.ablate.seeds {
                    let spec = AdapterSpec {
                        middle_dim,
                        variant,
                        ..cfg.adapter.clone()
                    };
                    let sets = train_adapter_grid(cfg, bases, task, &spec, placement, seed)?;
                    let mut stats = Vec::new();
                    for (b, (a, _)) in bases.iter().zip(&sets) {
                        stats.push(evaluate(b, Some(a), task, &eval)?);
                    }
                    let label = format!("c{middle_dim}_{variant}_{}_s{seed}", placement_label(placement));
                    let curve = accuracy_curve(&label, &stats)?;
                    let bd = bd_metric(anchor, &curve, BdMode::BdRate)?;
                    let mut params = 0;
                    sets[0].0.visit(ADAPTER_PREFIX, &mut |_, t| params += t.len());
                    let row = AblationRow {
                        middle_dim,
                        variant,
                        placement: placement_label(placement),
                        seed,
                        params,
                        stats,
                        bd_rate: bd.value,
                    };
                    on_row(&row);
                    rows.push(row);
                }
            }
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("middle_dim,variant,placement,seed,params,bd_rate,bpp,accuracy\n");
    for r in rows {
        let join = |f: fn(&EvalStats) -> f64| r.stats.iter().map(|e| f(e).to_string()).collect::<Vec<_>>().join(";");
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.middle_dim,
            r.variant,
            r.placement,
            r.seed,
            r.params,
            r.bd_rate,
            join(|e| e.bpp),
            join(|e| e.accuracy)
        ));
    }
    s
}
