//! Spatial-frequency modulation adapters.
//!
//! An adapter is a residual bottleneck plugged after a codec stage. It has a
//! frequency branch (gating the amplitude spectrum of a down-projected
//! feature) and a spatial branch (a gated depthwise path). Both branches end
//! in a zero-initialized up-projection, so a fresh adapter is an exact
//! identity and can be removed without changing the host network.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::layers::{DepthwiseConv, Linear};
use crate::tensor::{into3, join, ParamSet, Tensor};

/// Arrangement of the two branches inside one adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Frequency and spatial branches in parallel (the default).
    SfmaParallel,
    SmaOnly,
    FmaOnly,
    /// Frequency residual first, spatial residual on its output.
    FmaThenSma,
    /// Spatial residual first, frequency residual on its output.
    SmaThenFma,
    /// Two independent spatial branches in parallel.
    DualSma,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::SfmaParallel,
        Variant::SmaOnly,
        Variant::FmaOnly,
        Variant::FmaThenSma,
        Variant::SmaThenFma,
        Variant::DualSma,
    ];

    fn has_fma(self) -> bool {
        !matches!(self, Variant::SmaOnly | Variant::DualSma)
    }

    fn has_sma(self) -> bool {
        self != Variant::FmaOnly
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::SfmaParallel => "sfma_parallel",
            Variant::SmaOnly => "sma_only",
            Variant::FmaOnly => "fma_only",
            Variant::FmaThenSma => "fma_then_sma",
            Variant::SmaThenFma => "sma_then_fma",
            Variant::DualSma => "dual_sma",
        };
        f.write_str(s)
    }
}

/// Which algebraic form of the branches to evaluate.
///
/// `Reference` gates the amplitude spectrum with a sigmoid and applies a
/// ReLU after the inverse transform; its spatial branch is
/// `up(relu(dw(down1 x) * down2 x))`. `Equation` gates the spectrum with a
/// ReLU of the modulation logits and uses `up(down1 x * relu(dw(down2 x)))`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchForm {
    #[default]
    Reference,
    Equation,
}

/// Shape and arrangement of one adapter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SfmaConfig {
    pub in_dim: usize,
    pub middle_dim: usize,
    pub factor: f64,
    pub variant: Variant,
    pub fma_kernel: usize,
    pub sma_kernel: usize,
    pub form: BranchForm,
    pub padding: Padding,
}

impl SfmaConfig {
    pub fn new(in_dim: usize, middle_dim: usize) -> Self {
        SfmaConfig {
            in_dim,
            middle_dim,
            factor: 1.0,
            variant: Variant::SfmaParallel,
            fma_kernel: 3,
            sma_kernel: 5,
            form: BranchForm::Reference,
            padding: Padding::Zero,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.middle_dim == 0 {
            return Err(Error::config("adapter dimensions must be positive"));
        }
        if self.middle_dim > self.in_dim {
            return Err(Error::config(format!(
                "middle dimension {} exceeds input dimension {}",
                self.middle_dim, self.in_dim
            )));
        }
        for k in [self.fma_kernel, self.sma_kernel] {
            if k == 0 || k % 2 == 0 {
                return Err(Error::config(format!("kernel size {k} must be odd and positive")));
            }
        }
        if !self.factor.is_finite() {
            return Err(Error::config("adapter factor must be finite"));
        }
        Ok(())
    }
}

/// Frequency branch parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FmaWeights {
    pub down: Linear,
    pub dw: DepthwiseConv,
    pub inter: Linear,
    pub up: Linear,
}

/// Spatial branch parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SmaWeights {
    pub down1: Linear,
    pub down2: Linear,
    pub dw: DepthwiseConv,
    pub up: Linear,
}

/// All learnable parameters of one adapter. Branches absent from the
/// configured variant are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct SfmaWeights {
    pub fma: Option<FmaWeights>,
    pub sma: Option<SmaWeights>,
    /// Second spatial branch, used only by [`Variant::DualSma`].
    pub sma2: Option<SmaWeights>,
}

impl ParamSet for FmaWeights {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.down.visit(&join(prefix, "down"), f);
        self.dw.visit(&join(prefix, "dw"), f);
        self.inter.visit(&join(prefix, "inter"), f);
        self.up.visit(&join(prefix, "up"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.down.visit_mut(&join(prefix, "down"), f);
        self.dw.visit_mut(&join(prefix, "dw"), f);
        self.inter.visit_mut(&join(prefix, "inter"), f);
        self.up.visit_mut(&join(prefix, "up"), f);
    }
}

impl ParamSet for SmaWeights {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.down1.visit(&join(prefix, "down1"), f);
        self.down2.visit(&join(prefix, "down2"), f);
        self.dw.visit(&join(prefix, "dw"), f);
        self.up.visit(&join(prefix, "up"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.down1.visit_mut(&join(prefix, "down1"), f);
        self.down2.visit_mut(&join(prefix, "down2"), f);
        self.dw.visit_mut(&join(prefix, "dw"), f);
        self.up.visit_mut(&join(prefix, "up"), f);
    }
}

impl ParamSet for SfmaWeights {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.fma.visit(&join(prefix, "fma"), f);
        self.sma.visit(&join(prefix, "sma"), f);
        self.sma2.visit(&join(prefix, "sma2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.fma.visit_mut(&join(prefix, "fma"), f);
        self.sma.visit_mut(&join(prefix, "sma"), f);
        self.sma2.visit_mut(&join(prefix, "sma2"), f);
    }
}

/// Feature map flowing between codec stages (`C x H x W`).
#[derive(Clone, Debug, PartialEq)]
pub struct StageFeature(Array3<f64>);

impl StageFeature {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::dim(format!("empty stage feature {c}x{h}x{w}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("stage feature contains non-finite values".into()));
        }
        Ok(StageFeature(data))
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.dim().0
    }
}

fn init_fma(cfg: &SfmaConfig, rng: &mut ChaCha8Rng) -> FmaWeights {
    FmaWeights {
        down: Linear::init(cfg.in_dim, cfg.middle_dim, rng),
        dw: DepthwiseConv::init(cfg.middle_dim, cfg.fma_kernel, rng),
        inter: Linear::init(cfg.middle_dim, cfg.middle_dim, rng),
        up: Linear::zeros(cfg.middle_dim, cfg.in_dim),
    }
}

fn init_sma(cfg: &SfmaConfig, rng: &mut ChaCha8Rng) -> SmaWeights {
    SmaWeights {
        down1: Linear::init(cfg.in_dim, cfg.middle_dim, rng),
        down2: Linear::init(cfg.in_dim, cfg.middle_dim, rng),
        dw: DepthwiseConv::init(cfg.middle_dim, cfg.sma_kernel, rng),
        up: Linear::zeros(cfg.middle_dim, cfg.in_dim),
    }
}

/// Fresh adapter weights: Kaiming-normal down, middle and depthwise maps,
/// zero biases, and all-zero up-projections.
pub fn init_adapter(config: &SfmaConfig, seed: u64) -> Result<SfmaWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = config.variant;
    let fma = v.has_fma().then(|| init_fma(config, &mut rng));
    let sma = v.has_sma().then(|| init_sma(config, &mut rng));
    let sma2 = (v == Variant::DualSma).then(|| init_sma(config, &mut rng));
    Ok(SfmaWeights { fma, sma, sma2 })
}

/// Frequency branch on the tape; output is not residual-added.
pub fn fma_tape(t: &mut Tape, x: Var, w: &FmaWeights, cfg: &SfmaConfig, name: &str) -> Var {
    let width = t.value(x).shape()[2];
    let d = w.down.apply(t, &join(name, "down"), x);
    let spec = t.rfft2(d);
    let amp = t.complex_abs(spec);
    let a = w.dw.apply(t, &join(name, "dw"), amp, cfg.padding);
    let a = t.relu(a);
    let logits = w.inter.apply(t, &join(name, "inter"), a);
    let gate = match cfg.form {
        BranchForm::Reference => t.sigmoid(logits),
        BranchForm::Equation => t.relu(logits),
    };
    // scaling the complex value by a real gate keeps its phase
    let gated = t.complex_scale(spec, gate);
    let mut y = t.irfft2(gated, width);
    if cfg.form == BranchForm::Reference {
        y = t.relu(y);
    }
    w.up.apply(t, &join(name, "up"), y)
}

/// Spatial branch on the tape; output is not residual-added.
pub fn sma_tape(t: &mut Tape, x: Var, w: &SmaWeights, cfg: &SfmaConfig, name: &str) -> Var {
    let d1 = w.down1.apply(t, &join(name, "down1"), x);
    let d2 = w.down2.apply(t, &join(name, "down2"), x);
    let m = match cfg.form {
        BranchForm::Reference => {
            let c = w.dw.apply(t, &join(name, "dw"), d1, cfg.padding);
            let p = t.mul(c, d2);
            t.relu(p)
        }
        BranchForm::Equation => {
            let c = w.dw.apply(t, &join(name, "dw"), d2, cfg.padding);
            let g = t.relu(c);
            t.mul(d1, g)
        }
    };
    w.up.apply(t, &join(name, "up"), m)
}

fn missing(branch: &str, v: Variant) -> Error {
    Error::config(format!("variant {v} requires {branch} weights"))
}

fn residual(t: &mut Tape, x: Var, branch: Var, factor: f64) -> Var {
    let s = t.scale(branch, factor);
    t.add(x, s)
}

/// Full adapter on the tape: `x + factor * adapted(x)` for the configured
/// variant.
pub fn sfma_tape(t: &mut Tape, x: Var, w: &SfmaWeights, cfg: &SfmaConfig, name: &str) -> Result<Var> {
    let v = cfg.variant;
    let fma = || w.fma.as_ref().ok_or_else(|| missing("frequency", v));
    let sma = || w.sma.as_ref().ok_or_else(|| missing("spatial", v));
    let (fname, sname) = (join(name, "fma"), join(name, "sma"));
    Ok(match v {
        Variant::SfmaParallel => {
            let (fw, sw) = (fma()?, sma()?);
            let f = fma_tape(t, x, fw, cfg, &fname);
            let s = sma_tape(t, x, sw, cfg, &sname);
            let both = t.add(f, s);
            residual(t, x, both, cfg.factor)
        }
        Variant::SmaOnly => {
            let s = sma_tape(t, x, sma()?, cfg, &sname);
            residual(t, x, s, cfg.factor)
        }
        Variant::FmaOnly => {
            let f = fma_tape(t, x, fma()?, cfg, &fname);
            residual(t, x, f, cfg.factor)
        }
        Variant::FmaThenSma => {
            let (fw, sw) = (fma()?, sma()?);
            let f = fma_tape(t, x, fw, cfg, &fname);
            let x1 = residual(t, x, f, cfg.factor);
            let s = sma_tape(t, x1, sw, cfg, &sname);
            residual(t, x1, s, cfg.factor)
        }
        Variant::SmaThenFma => {
            let (fw, sw) = (fma()?, sma()?);
            let s = sma_tape(t, x, sw, cfg, &sname);
            let x1 = residual(t, x, s, cfg.factor);
            let f = fma_tape(t, x1, fw, cfg, &fname);
            residual(t, x1, f, cfg.factor)
        }
        Variant::DualSma => {
            let sw2 = w.sma2.as_ref().ok_or_else(|| missing("second spatial", v))?;
            let s1 = sma_tape(t, x, sma()?, cfg, &sname);
            let s2 = sma_tape(t, x, sw2, cfg, &join(name, "sma2"));
            let both = t.add(s1, s2);
            residual(t, x, both, cfg.factor)
        }
    })
}

fn check_input(x: &StageFeature, cfg: &SfmaConfig) -> Result<()> {
    cfg.validate()?;
    if x.channels() != cfg.in_dim {
        return Err(Error::dim(format!(
            "adapter expects {} channels, feature has {}",
            cfg.in_dim,
            x.channels()
        )));
    }
    Ok(())
}

fn check_linear(l: &Linear, input: usize, output: usize, what: &str) -> Result<()> {
    if l.in_dim() != input || l.out_dim() != output {
        return Err(Error::dim(format!(
            "{what}: expected {output}x{input} map, found {}x{}",
            l.out_dim(),
            l.in_dim()
        )));
    }
    Ok(())
}

fn run(x: &StageFeature, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<StageFeature> {
    let mut t = Tape::new();
    let xv = t.constant(x.data().clone().into_dyn());
    let y = f(&mut t, xv)?;
    Ok(StageFeature(into3(t.value(y).clone())))
}

/// Frequency-branch output for `x` (shape preserved, not residual-added).
pub fn fma_forward(x: &StageFeature, w: &SfmaWeights, cfg: &SfmaConfig) -> Result<StageFeature> {
    check_input(x, cfg)?;
    let fw = w.fma.as_ref().ok_or_else(|| missing("frequency", cfg.variant))?;
    check_linear(&fw.down, cfg.in_dim, cfg.middle_dim, "fma.down")?;
    check_linear(&fw.up, cfg.middle_dim, cfg.in_dim, "fma.up")?;
    run(x, |t, xv| Ok(fma_tape(t, xv, fw, cfg, "fma")))
}

/// Spatial-branch output for `x` (shape preserved, not residual-added).
pub fn sma_forward(x: &StageFeature, w: &SfmaWeights, cfg: &SfmaConfig) -> Result<StageFeature> {
    check_input(x, cfg)?;
    let sw = w.sma.as_ref().ok_or_else(|| missing("spatial", cfg.variant))?;
    check_linear(&sw.down1, cfg.in_dim, cfg.middle_dim, "sma.down1")?;
    check_linear(&sw.up, cfg.middle_dim, cfg.in_dim, "sma.up")?;
    run(x, |t, xv| Ok(sma_tape(t, xv, sw, cfg, "sma")))
}

/// Adapted feature `x + factor * adapted(x)`.
pub fn sfma_forward(x: &StageFeature, w: &SfmaWeights, cfg: &SfmaConfig) -> Result<StageFeature> {
    check_input(x, cfg)?;
    run(x, |t, xv| sfma_tape(t, xv, w, cfg, ""))
}

/// Where adapters are inserted in the codec.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlacementConfig {
    pub encoder_stages: BTreeSet<usize>,
    pub decoder_stages: BTreeSet<usize>,
    pub hyper_encoder: bool,
    pub hyper_decoder: bool,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        PlacementConfig {
            encoder_stages: [1, 2, 3].into(),
            decoder_stages: [1, 2, 3].into(),
            hyper_encoder: false,
            hyper_decoder: false,
        }
    }
}

impl PlacementConfig {
    /// Decoder-side adapters only, as used by the scalable pipeline.
    pub fn decoder_only() -> Self {
        PlacementConfig {
            encoder_stages: BTreeSet::new(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in self.encoder_stages.iter().chain(&self.decoder_stages) {
            if !(1..=3).contains(s) {
                return Err(Error::config(format!("adapter stage {s} outside 1..=3")));
            }
        }
        Ok(())
    }

    pub fn sites(&self) -> Vec<AdapterSite> {
        let mut out: Vec<_> = self.encoder_stages.iter().map(|&s| AdapterSite::Encoder(s)).collect();
        out.extend(self.decoder_stages.iter().map(|&s| AdapterSite::Decoder(s)));
        if self.hyper_encoder {
            out.push(AdapterSite::HyperEncoder);
        }
        if self.hyper_decoder {
            out.push(AdapterSite::HyperDecoder);
        }
        out
    }
}

/// Insertion point of one adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AdapterSite {
    /// After encoder stage `j` (1-based).
    Encoder(usize),
    /// After decoder stage `j` (1-based).
    Decoder(usize),
    /// After the first hyper-encoder layer.
    HyperEncoder,
    /// After the first hyper-decoder layer.
    HyperDecoder,
}

impl fmt::Display for AdapterSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdapterSite::Encoder(j) => write!(f, "enc{j}"),
            AdapterSite::Decoder(j) => write!(f, "dec{j}"),
            AdapterSite::HyperEncoder => f.write_str("hyper_enc"),
            AdapterSite::HyperDecoder => f.write_str("hyper_dec"),
        }
    }
}

impl AdapterSite {
    fn ordinal(self) -> u64 {
        match self {
            AdapterSite::Encoder(j) => j as u64,
            AdapterSite::Decoder(j) => 10 + j as u64,
            AdapterSite::HyperEncoder => 20,
            AdapterSite::HyperDecoder => 21,
        }
    }
}

/// One adapter with its configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub config: SfmaConfig,
    pub weights: SfmaWeights,
}

/// Adapters keyed by insertion site, plus the placement they realize.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub placement: PlacementConfig,
    pub adapters: BTreeMap<AdapterSite, Adapter>,
}

/// Per-set adapter hyperparameters shared by every site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSpec {
    pub middle_dim: usize,
    pub factor: f64,
    pub variant: Variant,
    pub form: BranchForm,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        AdapterSpec {
            middle_dim: 64,
            factor: 1.0,
            variant: Variant::SfmaParallel,
            form: BranchForm::Reference,
        }
    }
}

impl AdapterSet {
    /// Zero-initialized adapters at every site of `placement`. `site_dims`
    /// gives the host channel count at each site.
    pub fn init(
        spec: &AdapterSpec,
        placement: &PlacementConfig,
        site_dims: impl Fn(AdapterSite) -> usize,
        seed: u64,
    ) -> Result<Self> {
        placement.validate()?;
        let mut adapters = BTreeMap::new();
        for site in placement.sites() {
            let mut config = SfmaConfig::new(site_dims(site), spec.middle_dim);
            config.factor = spec.factor;
            config.variant = spec.variant;
            config.form = spec.form;
            let weights = init_adapter(&config, seed.wrapping_mul(1000).wrapping_add(site.ordinal()))?;
            adapters.insert(site, Adapter { config, weights });
        }
        Ok(AdapterSet {
            placement: placement.clone(),
            adapters,
        })
    }

    pub fn get(&self, site: AdapterSite) -> Option<&Adapter> {
        self.adapters.get(&site)
    }

    /// Applies the adapter at `site` on the tape, if one is present.
    pub fn apply(&self, t: &mut Tape, site: AdapterSite, x: Var, prefix: &str) -> Result<Var> {
        let Some(a) = self.adapters.get(&site) else {
            return Ok(x);
        };
        let c = t.value(x).shape()[0];
        if c != a.config.in_dim {
            return Err(Error::config(format!(
                "adapter at {site} expects {} channels, stage produces {c}",
                a.config.in_dim
            )));
        }
        sfma_tape(t, x, &a.weights, &a.config, &join(prefix, &site.to_string()))
    }
}

impl ParamSet for AdapterSet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (site, a) in &self.adapters {
            a.weights.visit(&join(prefix, &site.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (site, a) in self.adapters.iter_mut() {
            a.weights.visit_mut(&join(prefix, &site.to_string()), f);
        }
    }
}
