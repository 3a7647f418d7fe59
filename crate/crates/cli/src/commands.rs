//! Verb implementations. Every verb reads the run directory layout:
//!
//! ```text
//! task.ckpt             toy task model
//! base_<id>.ckpt        base codec and prior for lambda id <id>
//! adapters_<id>.ckpt    machine-mode adapters
//! scalable_<id>.ckpt    mask generator and decoder adapters
//! manifest_<verb>.json  record of the last run of <verb>
//! ```

use std::path::{Path, PathBuf};

use serde_json::json;
use sfma_core::analysis::{bd_metric, bit_allocation_map, emit_reports, psd_map, BdMode, BdRow, RdCurve};
use sfma_core::checkpoint::{
    adapter_checkpoint, base_checkpoint, load_adapters, load_base, load_scalable, load_task, scalable_checkpoint,
    task_checkpoint, Checkpoint,
};
use sfma_core::codec::{analyze, hyper_analyze_with, hyper_synthesize_with, pad_image, CodecWeights, DOWNSAMPLE};
use sfma_core::config::RunConfig;
use sfma_core::data::{read_image, write_image};
use sfma_core::entropy::{compress as compress_stream, decompress as decompress_stream, gaussian_bits};
use sfma_core::experiment::{
    ablate as run_ablation, ablation_csv, accuracy_curve, eval_samples, evaluate, payload_bits, pretrain_bases,
    pretrain_task, psnr_curve, train_adapter_grid, train_scalable_grid, Base, EvalStats,
};
use sfma_core::manifest::Manifest;
use sfma_core::scalable::{compress_scalable, decompress_base, decompress_full, MaskGenerator};
use sfma_core::task::ConvClassifier;
use sfma_core::training::write_metrics_csv;
use sfma_core::{AdapterSet, Bitstream, CodingMode, Error, ParamSet, Result};

use crate::Common;

pub struct Context {
    pub config: RunConfig,
    pub config_path: Option<PathBuf>,
    /// `--out` as given.
    pub out: Option<PathBuf>,
    /// `--mode` as given.
    pub mode_flag: Option<CodingMode>,
    pub lambda_id: u8,
}

impl Context {
    pub fn new(c: &Common) -> Result<Self> {
        let mut config = match &c.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = c.seed {
            config.seed = s;
        }
        let mode_flag = c.mode.as_deref().map(str::parse::<CodingMode>).transpose()?;
        if let Some(m) = mode_flag {
            config.mode = m;
        }
        config.lambda(c.lambda_id)?;
        Ok(Context {
            config,
            config_path: c.config.clone(),
            out: c.out.clone(),
            mode_flag,
            lambda_id: c.lambda_id,
        })
    }

    /// Run directory for training and evaluation verbs.
    fn run_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| self.config.out_dir.clone())
    }

    fn manifest(&self, verb: &str) -> Result<Manifest> {
        let mut m = Manifest::new(verb, self.config.hash(), self.config.seed);
        if let Some(p) = &self.config_path {
            m.input(p)?;
        }
        Ok(m)
    }
}

fn task_path(run: &Path) -> PathBuf {
    run.join("task.ckpt")
}

fn base_path(run: &Path, id: usize) -> PathBuf {
    run.join(format!("base_{id}.ckpt"))
}

fn adapters_path(run: &Path, id: usize) -> PathBuf {
    run.join(format!("adapters_{id}.ckpt"))
}

fn scalable_path(run: &Path, id: usize) -> PathBuf {
    run.join(format!("scalable_{id}.ckpt"))
}

fn read_task(run: &Path, m: &mut Manifest) -> Result<ConvClassifier> {
    let p = task_path(run);
    m.input(&p)?;
    load_task(&Checkpoint::load(&p)?)
}

fn read_base(cfg: &RunConfig, run: &Path, id: usize, m: &mut Manifest) -> Result<Base> {
    let p = base_path(run, id);
    m.input(&p)?;
    let (codec, prior) = load_base(&Checkpoint::load(&p)?)?;
    if codec.config != cfg.codec {
        return Err(Error::Config(format!(
            "{} holds a {:?} codec, config asks for {:?}",
            p.display(),
            codec.config,
            cfg.codec
        )));
    }
    Ok(Base { codec, prior })
}

fn read_bases(cfg: &RunConfig, run: &Path, m: &mut Manifest) -> Result<Vec<Base>> {
    (0..cfg.lambda_count()).map(|i| read_base(cfg, run, i, m)).collect()
}

fn read_adapters(run: &Path, id: usize, codec: &CodecWeights, m: &mut Manifest) -> Result<AdapterSet> {
    let p = adapters_path(run, id);
    m.input(&p)?;
    Ok(load_adapters(&Checkpoint::load(&p)?, &codec.config)?.0)
}

fn read_scalable(run: &Path, id: usize, codec: &CodecWeights, m: &mut Manifest) -> Result<(MaskGenerator, AdapterSet)> {
    let p = scalable_path(run, id);
    m.input(&p)?;
    let (g, a, _) = load_scalable(&Checkpoint::load(&p)?, &codec.config)?;
    Ok((g, a))
}

fn save(ck: &Checkpoint, path: &Path, m: &mut Manifest) -> Result<()> {
    ck.save(path)?;
    m.output(path)
}

fn write_text(path: &Path, text: &str, m: &mut Manifest) -> Result<()> {
    std::fs::write(path, text)?;
    m.output(path)
}

fn finish(m: Manifest, path: &Path) -> Result<()> {
    m.write(path)?;
    println!("manifest: {}", path.display());
    Ok(())
}

fn stats_json(s: &EvalStats) -> serde_json::Value {
    json!({ "bpp": s.bpp, "accuracy": s.accuracy, "psnr": s.psnr })
}

pub fn pretrain_base(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let run = ctx.run_dir();
    std::fs::create_dir_all(&run)?;
    let mut m = ctx.manifest("pretrain-base")?;

    let (task, losses) = pretrain_task(cfg)?;
    save(&task_checkpoint(&task, &cfg.task_model()), &task_path(&run), &mut m)?;
    let loss_csv: String = std::iter::once("epoch,loss\n".to_string())
        .chain(losses.iter().enumerate().map(|(e, l)| format!("{e},{l}\n")))
        .collect();
    write_text(&run.join("task_losses.csv"), &loss_csv, &mut m)?;

    let bases: Vec<(Base, Option<Vec<_>>)> = if cfg.base.import.is_empty() {
        pretrain_bases(cfg)?
            .into_iter()
            .map(|(b, rows)| (b, Some(rows)))
            .collect()
    } else {
        let mut out = Vec::new();
        for p in &cfg.base.import {
            m.input(p)?;
            let (codec, prior) = load_base(&Checkpoint::load(p)?)?;
            if codec.config != cfg.codec {
                return Err(Error::Config(format!(
                    "imported {} does not match the configured codec",
                    p.display()
                )));
            }
            out.push((Base { codec, prior }, None));
        }
        out
    };

    let eval = eval_samples(cfg)?;
    let untrained = Base {
        codec: CodecWeights::init(cfg.codec, cfg.seed)?,
        prior: sfma_core::FactorizedPrior::new(cfg.codec.n_channels),
    };
    let untrained_stats = evaluate(&untrained, None, &task, &eval)?;
    let mut summary = Vec::new();
    for (i, (b, rows)) in bases.iter().enumerate() {
        let ck = base_checkpoint(&b.codec, &b.prior)
            .with_meta("frozen", "true")
            .with_meta("lambda", cfg.base.lambdas[i].to_string());
        save(&ck, &base_path(&run, i), &mut m)?;
        if let Some(rows) = rows {
            let p = run.join(format!("metrics_base_{i}.csv"));
            write_metrics_csv(&p, rows)?;
            m.output(&p)?;
        }
        let s = evaluate(b, None, &task, &eval)?;
        println!(
            "base {i}: lambda {} bpp {:.4} psnr {:.2} dB accuracy {:.1}%",
            cfg.base.lambdas[i], s.bpp, s.psnr, s.accuracy
        );
        summary.push(
            json!({ "lambda_id": i, "lambda": cfg.base.lambdas[i], "eval": stats_json(&s), "checksum": b.checksum() }),
        );
    }
    let clean = task.accuracy(eval.iter().map(|s| (&s.image, s.label)));
    m.summary = json!({ "bases": summary, "untrained": stats_json(&untrained_stats), "task_clean_accuracy": clean });
    finish(m, &run.join("manifest_pretrain-base.json"))
}

pub fn train_adapters(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let run = ctx.run_dir();
    let mut m = ctx.manifest("train-adapters")?;
    let task = read_task(&run, &mut m)?;
    let bases = read_bases(cfg, &run, &mut m)?;
    let before: Vec<String> = bases.iter().map(Base::checksum).collect();
    let mut summary = Vec::new();
    match cfg.mode {
        CodingMode::Human => return Err(Error::config("human mode has no adapters to train")),
        CodingMode::Machine => {
            let sets = train_adapter_grid(cfg, &bases, &task, &cfg.adapter, &cfg.placement, cfg.seed)?;
            for (i, (a, rows)) in sets.iter().enumerate() {
                let p = adapters_path(&run, i);
                save(
                    &adapter_checkpoint(a, &cfg.adapter).with_meta("lambda", cfg.train.lambdas[i].to_string()),
                    &p,
                    &mut m,
                )?;
                let mp = run.join(format!("metrics_adapters_{i}.csv"));
                write_metrics_csv(&mp, rows)?;
                m.output(&mp)?;
                let base_bytes = std::fs::metadata(base_path(&run, i))?.len();
                let adapter_bytes = std::fs::metadata(&p)?.len();
                summary.push(json!({
                    "lambda_id": i,
                    "trainable_params": a.param_count(),
                    "base_params": bases[i].codec.param_count(),
                    "adapter_bytes": adapter_bytes,
                    "base_bytes": base_bytes,
                }));
                println!("adapters {i}: {} parameters, {adapter_bytes} bytes", a.param_count());
            }
        }
        CodingMode::Scalable => {
            let models = train_scalable_grid(cfg, &bases, &task)?;
            for (i, (sm, rows)) in models.iter().enumerate() {
                let ck = scalable_checkpoint(&sm.generator, &cfg.scalable.generator, &sm.adapters, &cfg.adapter);
                save(&ck, &scalable_path(&run, i), &mut m)?;
                let mp = run.join(format!("metrics_scalable_{i}.csv"));
                write_metrics_csv(&mp, rows)?;
                m.output(&mp)?;
                let params = sm.generator.param_count() + sm.adapters.param_count();
                summary.push(json!({ "lambda_id": i, "trainable_params": params }));
                println!("scalable {i}: {params} parameters");
            }
        }
    }
    let after: Vec<String> = bases.iter().map(Base::checksum).collect();
    if before != after {
        return Err(Error::Numeric("base weights changed during adapter training".into()));
    }
    m.summary = json!({ "mode": cfg.mode, "runs": summary, "base_checksums": after });
    finish(m, &run.join("manifest_train-adapters.json"))
}

pub fn compress(ctx: &Context, input: &Path) -> Result<()> {
    let cfg = &ctx.config;
    let run = cfg.out_dir.clone();
    let id = ctx.lambda_id as usize;
    let out = ctx.out.clone().unwrap_or_else(|| input.with_extension("sfma"));
    let mut m = ctx.manifest("compress")?;
    m.input(input)?;
    let x = read_image(input)?;
    let base = read_base(cfg, &run, id, &mut m)?;
    let bytes = match cfg.mode {
        CodingMode::Human => compress_stream(&x, &base.codec, None, &base.prior, CodingMode::Human, ctx.lambda_id)?,
        CodingMode::Machine => {
            let a = read_adapters(&run, id, &base.codec, &mut m)?;
            compress_stream(
                &x,
                &base.codec,
                Some(&a),
                &base.prior,
                CodingMode::Machine,
                ctx.lambda_id,
            )?
        }
        CodingMode::Scalable => {
            let (g, _) = read_scalable(&run, id, &base.codec, &mut m)?;
            compress_scalable(&x, &base.codec, &base.prior, &g, ctx.lambda_id)?
        }
    };
    std::fs::write(&out, &bytes)?;
    m.output(&out)?;
    let pixels = (x.dim().1 * x.dim().2) as f64;
    let bpp = payload_bits(&bytes)? as f64 / pixels;
    println!("{}: {} bytes, {bpp:.4} bpp", out.display(), bytes.len());
    m.summary = json!({ "mode": cfg.mode, "lambda_id": id, "bytes": bytes.len(), "bpp": bpp });
    finish(m, &PathBuf::from(format!("{}.manifest.json", out.display())))
}

pub fn decompress(ctx: &Context, input: &Path) -> Result<()> {
    let cfg = &ctx.config;
    let run = cfg.out_dir.clone();
    let out = ctx.out.clone().unwrap_or_else(|| input.with_extension("png"));
    let mut m = ctx.manifest("decompress")?;
    m.input(input)?;
    let bytes = std::fs::read(input).map_err(|e| Error::Data(format!("{}: {e}", input.display())))?;
    let header = Bitstream::parse(&bytes)?.header;
    let id = header.lambda_id as usize;
    cfg.lambda(header.lambda_id)?;
    let base = read_base(cfg, &run, id, &mut m)?;
    let (x, layer) = match header.mode {
        CodingMode::Human => (decompress_stream(&bytes, &base.codec, None, &base.prior)?, "human"),
        CodingMode::Machine => {
            let a = read_adapters(&run, id, &base.codec, &mut m)?;
            (
                decompress_stream(&bytes, &base.codec, Some(&a), &base.prior)?,
                "machine",
            )
        }
        CodingMode::Scalable => {
            let (g, a) = read_scalable(&run, id, &base.codec, &mut m)?;
            if ctx.mode_flag == Some(CodingMode::Machine) {
                (decompress_base(&bytes, &base.codec, &base.prior, &g, &a)?, "base")
            } else {
                (decompress_full(&bytes, &base.codec, &base.prior, &g)?, "full")
            }
        }
    };
    write_image(&out, &x)?;
    m.output(&out)?;
    let bpp = payload_bits(&bytes)? as f64 / (header.orig_h as f64 * header.orig_w as f64);
    println!(
        "{}: {}x{} ({layer}), {bpp:.4} bpp",
        out.display(),
        header.orig_w,
        header.orig_h
    );
    m.summary = json!({ "mode": header.mode, "layer": layer, "lambda_id": id, "bpp": bpp });
    finish(m, &PathBuf::from(format!("{}.manifest.json", out.display())))
}

fn bd_rows(anchor: &RdCurve, test: &RdCurve) -> Result<Vec<BdRow>> {
    [BdMode::BdRate, BdMode::BdQuality]
        .into_iter()
        .map(|mode| {
            Ok(BdRow {
                anchor: anchor.label.clone(),
                test: test.label.clone(),
                result: bd_metric(anchor, test, mode)?,
            })
        })
        .collect()
}

fn stats_csv(rows: &[(usize, &str, EvalStats)]) -> String {
    let mut s = String::from("lambda_id,codec,bpp,accuracy,psnr\n");
    for (i, kind, e) in rows {
        s.push_str(&format!("{i},{kind},{},{},{}\n", e.bpp, e.accuracy, e.psnr));
    }
    s
}

pub fn eval_rd(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let run = ctx.run_dir();
    let mut m = ctx.manifest("eval-rd")?;
    let task = read_task(&run, &mut m)?;
    let bases = read_bases(cfg, &run, &mut m)?;
    let eval = eval_samples(cfg)?;
    let (mut frozen, mut adapted) = (Vec::new(), Vec::new());
    for (i, b) in bases.iter().enumerate() {
        frozen.push(evaluate(b, None, &task, &eval)?);
        let a = read_adapters(&run, i, &b.codec, &mut m)?;
        adapted.push(evaluate(b, Some(&a), &task, &eval)?);
        println!(
            "lambda id {i}: frozen {:.4} bpp {:.1}% | adapted {:.4} bpp {:.1}%",
            frozen[i].bpp, frozen[i].accuracy, adapted[i].bpp, adapted[i].accuracy
        );
    }
    let dir = run.join("eval");
    std::fs::create_dir_all(&dir)?;
    let rows: Vec<(usize, &str, EvalStats)> = frozen
        .iter()
        .enumerate()
        .map(|(i, s)| (i, "frozen", *s))
        .chain(adapted.iter().enumerate().map(|(i, s)| (i, "adapted", *s)))
        .collect();
    write_text(&dir.join("eval_stats.csv"), &stats_csv(&rows), &mut m)?;

    let acc = (
        accuracy_curve("frozen_accuracy", &frozen)?,
        accuracy_curve("adapted_accuracy", &adapted)?,
    );
    let psnr = (
        psnr_curve("frozen_psnr", &frozen)?,
        psnr_curve("adapted_psnr", &adapted)?,
    );
    let mut bd = bd_rows(&acc.0, &acc.0)?;
    bd.extend(bd_rows(&acc.0, &acc.1)?);
    bd.extend(bd_rows(&psnr.0, &psnr.1)?);
    for p in emit_reports(&[acc.0.clone(), acc.1.clone()], &bd, &[], "accuracy (%)", &dir)? {
        m.output(&p)?;
    }
    let psnr_dir = dir.join("psnr");
    for p in emit_reports(&[psnr.0, psnr.1], &[], &[], "PSNR (dB)", &psnr_dir)? {
        m.output(&p)?;
    }
    for r in &bd {
        println!("{} vs {}: {} = {:.3}", r.test, r.anchor, r.result.mode, r.result.value);
    }
    m.summary = json!({
        "frozen": frozen.iter().map(stats_json).collect::<Vec<_>>(),
        "adapted": adapted.iter().map(stats_json).collect::<Vec<_>>(),
        "bd": bd,
    });
    finish(m, &run.join("manifest_eval-rd.json"))
}

/// Per-location bits and PSD of the quantized latent of `x`.
fn latent_maps(
    x: &ndarray::Array3<f64>,
    base: &Base,
    adapters: Option<&AdapterSet>,
    log: bool,
) -> Result<(ndarray::Array2<f64>, ndarray::Array2<f64>)> {
    let padded = pad_image(x, DOWNSAMPLE);
    let y = analyze(&padded, &base.codec, adapters)?;
    let z_hat = hyper_analyze_with(&y, &base.codec, adapters)?.mapv(f64::round);
    let (_, h, w) = y.dim();
    let params = hyper_synthesize_with(&z_hat, &base.codec, (h, w), adapters)?;
    let y_hat = y.mapv(f64::round);
    Ok((
        bit_allocation_map(&gaussian_bits(&y_hat, &params)?)?,
        psd_map(&y_hat, log)?,
    ))
}

pub fn analyze_latent(ctx: &Context, input: &Path) -> Result<()> {
    let cfg = &ctx.config;
    let run = ctx.run_dir();
    let id = ctx.lambda_id as usize;
    let mut m = ctx.manifest("analyze-latent")?;
    m.input(input)?;
    let x = read_image(input)?;
    let base = read_base(cfg, &run, id, &mut m)?;
    let mut maps = Vec::new();
    let (bits, psd) = latent_maps(&x, &base, None, cfg.eval.psd_log)?;
    maps.push(("base_bits".to_string(), bits));
    maps.push(("base_psd".to_string(), psd));
    if adapters_path(&run, id).exists() {
        let a = read_adapters(&run, id, &base.codec, &mut m)?;
        let (bits, psd) = latent_maps(&x, &base, Some(&a), cfg.eval.psd_log)?;
        maps.push(("adapted_bits".to_string(), bits));
        maps.push(("adapted_psd".to_string(), psd));
    }
    let dir = run.join("analysis");
    for p in emit_reports(&[], &[], &maps, "", &dir)? {
        m.output(&p)?;
    }
    let totals: Vec<_> = maps
        .iter()
        .filter(|(n, _)| n.ends_with("bits"))
        .map(|(n, b)| json!({ "map": n, "mean_bits": b.mean().unwrap_or(0.0) }))
        .collect();
    println!("{} maps written to {}", maps.len(), dir.display());
    m.summary = json!({ "lambda_id": id, "maps": maps.len(), "bits": totals });
    finish(m, &run.join("manifest_analyze-latent.json"))
}

pub fn ablate(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let run = ctx.run_dir();
    let mut m = ctx.manifest("ablate")?;
    let task = read_task(&run, &mut m)?;
    let bases = read_bases(cfg, &run, &mut m)?;
    let before: Vec<String> = bases.iter().map(Base::checksum).collect();
    let eval = eval_samples(cfg)?;
    let frozen = bases
        .iter()
        .map(|b| evaluate(b, None, &task, &eval))
        .collect::<Result<Vec<_>>>()?;
    let anchor = accuracy_curve("frozen", &frozen)?;
    let rows = run_ablation(cfg, &bases, &task, &anchor, |r| {
        println!(
            "middle {} {} {} seed {}: {} params, BD-rate {:.2}%",
            r.middle_dim, r.variant, r.placement, r.seed, r.params, r.bd_rate
        )
    })?;
    if bases.iter().map(Base::checksum).collect::<Vec<_>>() != before {
        return Err(Error::Numeric("base weights changed during the sweep".into()));
    }
    let dir = run.join("ablate");
    std::fs::create_dir_all(&dir)?;
    write_text(&dir.join("ablation.csv"), &ablation_csv(&rows), &mut m)?;
    m.summary = json!({ "frozen": frozen.iter().map(stats_json).collect::<Vec<_>>(), "rows": rows });
    finish(m, &run.join("manifest_ablate.json"))
}
