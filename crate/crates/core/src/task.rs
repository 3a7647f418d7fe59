//! Task models that turn images into stage features, plus the toy classifier
//! used as the machine-vision consumer.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::layers::{Conv, Linear};
use crate::optim::Adam;
use crate::tensor::{into3, join, ParamSet, Tensor};

/// Frozen feature extractor whose stage outputs define the task distortion.
pub trait TaskDistortionModel {
    /// Stage features of `x` recorded on the tape, in stage order.
    fn stage_features_tape(&self, t: &mut Tape, x: Var) -> Result<Vec<Var>>;

    fn stage_features(&self, x: &Array3<f64>) -> Result<Vec<Array3<f64>>> {
        let mut t = Tape::new();
        let v = t.constant(x.clone().into_dyn());
        let feats = self.stage_features_tape(&mut t, v)?;
        Ok(feats.into_iter().map(|f| into3(t.value(f).clone())).collect())
    }
}

/// Returns the input as its only stage.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl TaskDistortionModel for IdentityExtractor {
    fn stage_features_tape(&self, _t: &mut Tape, x: Var) -> Result<Vec<Var>> {
        Ok(vec![x])
    }
}

/// Mean over stages of the feature MSE between `x` and `x_hat`.
pub fn perceptual_distortion(x: &Array3<f64>, x_hat: &Array3<f64>, model: &dyn TaskDistortionModel) -> Result<f64> {
    if x.dim() != x_hat.dim() {
        return Err(Error::dim(format!(
            "image {:?} vs reconstruction {:?}",
            x.dim(),
            x_hat.dim()
        )));
    }
    let fa = model.stage_features(x)?;
    let fb = model.stage_features(x_hat)?;
    stage_mse(&fa, &fb)
}

fn stage_mse(fa: &[Array3<f64>], fb: &[Array3<f64>]) -> Result<f64> {
    if fa.is_empty() || fa.len() != fb.len() {
        return Err(Error::dim("task model produced no or mismatched stages"));
    }
    let mut total = 0.0;
    for (a, b) in fa.iter().zip(fb) {
        if a.dim() != b.dim() {
            return Err(Error::dim(format!("stage shape {:?} vs {:?}", a.dim(), b.dim())));
        }
        total += (a - b).mapv(|d| d * d).mean().unwrap_or(0.0);
    }
    Ok(total / fa.len() as f64)
}

/// Task distortion on the tape against precomputed reference features.
pub fn distortion_tape(
    t: &mut Tape,
    model: &dyn TaskDistortionModel,
    x_hat: Var,
    reference: &[Array3<f64>],
) -> Result<Var> {
    let feats = model.stage_features_tape(t, x_hat)?;
    if feats.len() != reference.len() || feats.is_empty() {
        return Err(Error::dim("reference features do not match the task model stages"));
    }
    let mut acc: Option<Var> = None;
    for (f, r) in feats.into_iter().zip(reference) {
        if t.value(f).shape() != r.shape() {
            return Err(Error::dim(format!(
                "stage shape {:?} vs {:?}",
                t.value(f).shape(),
                r.shape()
            )));
        }
        let rv = t.constant(r.clone().into_dyn());
        let m = t.mse(f, rv);
        acc = Some(match acc {
            Some(a) => t.add(a, m),
            None => m,
        });
    }
    let n = reference.len() as f64;
    Ok(t.scale(acc.expect("non-empty"), 1.0 / n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskModelConfig {
    /// Output channels of each stride-2 conv stage.
    pub widths: Vec<usize>,
    pub classes: usize,
}

impl Default for TaskModelConfig {
    fn default() -> Self {
        TaskModelConfig {
            widths: vec![16, 32, 48],
            classes: 4,
        }
    }
}

/// Small classifier: stride-2 3x3 conv + relu stages, global pooling and a
/// linear head. The stage outputs are the distortion features.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvClassifier {
    pub stages: Vec<Conv>,
    pub head: Linear,
}

pub const TASK_PREFIX: &str = "task";

impl ParamSet for ConvClassifier {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.stages.visit(&join(prefix, "stages"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.stages.visit_mut(&join(prefix, "stages"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

impl ConvClassifier {
    pub fn init(config: &TaskModelConfig, seed: u64) -> Result<Self> {
        if config.widths.is_empty() || config.widths.contains(&0) || config.classes < 2 {
            return Err(Error::config("task model needs at least one stage and two classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        let mut c = 3;
        for &w in &config.widths {
            stages.push(Conv::init(c, w, 3, 2, &mut rng));
            c = w;
        }
        Ok(ConvClassifier {
            stages,
            head: Linear::init(c, config.classes, &mut rng),
        })
    }

    pub fn classes(&self) -> usize {
        self.head.out_dim()
    }

    fn stages_with_prefix(&self, t: &mut Tape, x: Var) -> Vec<Var> {
        let mut h = t.add_scalar(x, -0.5);
        let mut out = Vec::new();
        for (i, conv) in self.stages.iter().enumerate() {
            h = conv.apply(t, &join(&join(TASK_PREFIX, "stages"), &i.to_string()), h);
            h = t.relu(h);
            out.push(h);
        }
        out
    }

    pub fn logits_tape(&self, t: &mut Tape, x: Var) -> Var {
        let feats = self.stages_with_prefix(t, x);
        let pooled = t.global_avg_pool(*feats.last().expect("at least one stage"));
        self.head.apply_vec(t, &join(TASK_PREFIX, "head"), pooled)
    }

    pub fn predict(&self, x: &Array3<f64>) -> usize {
        let mut t = Tape::new();
        let v = t.constant(x.clone().into_dyn());
        let l = self.logits_tape(&mut t, v);
        let logits = t.value(l);
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[[best]] {
                best = i;
            }
        }
        best
    }

    /// Top-1 accuracy in percent.
    pub fn accuracy<'a>(&self, samples: impl IntoIterator<Item = (&'a Array3<f64>, usize)>) -> f64 {
        let (mut hit, mut n) = (0usize, 0usize);
        for (x, label) in samples {
            hit += (self.predict(x) == label) as usize;
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            100.0 * hit as f64 / n as f64
        }
    }

    /// Cross-entropy training on clean images.
    pub fn pretrain(&mut self, train: &[Sample], epochs: usize, batch: usize, lr: f64, seed: u64) -> Result<Vec<f64>> {
        if train.is_empty() || batch == 0 {
            return Err(Error::Data("empty training set or zero batch size".into()));
        }
        if let Some(s) = train.iter().find(|s| s.label >= self.classes()) {
            return Err(Error::Data(format!(
                "label {} exceeds class count {}",
                s.label,
                self.classes()
            )));
        }
        let mut opt = Adam::new(lr);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut losses = Vec::new();
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(batch) {
                let mut grads = std::collections::BTreeMap::<String, Tensor>::new();
                for &i in chunk {
                    let mut t = Tape::with_trainable(|n| n.starts_with(TASK_PREFIX));
                    let x = t.constant(train[i].image.clone().into_dyn());
                    let logits = self.logits_tape(&mut t, x);
                    let loss = t.softmax_xent(logits, train[i].label);
                    epoch_loss += t.scalar(loss);
                    let g = t.backward(loss);
                    crate::optim::accumulate(&mut grads, t.param_grads(&g), 1.0 / chunk.len() as f64);
                }
                opt.step(self, TASK_PREFIX, &grads)?;
            }
            losses.push(epoch_loss / train.len() as f64);
        }
        Ok(losses)
    }
}

impl TaskDistortionModel for ConvClassifier {
    fn stage_features_tape(&self, t: &mut Tape, x: Var) -> Result<Vec<Var>> {
        if t.value(x).shape().first() != Some(&3) {
            return Err(Error::dim("task model expects a 3-channel image"));
        }
        Ok(self.stages_with_prefix(t, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetConfig, Split, SyntheticDataset};
    use rand::Rng;

    fn image(seed: u64, h: usize, w: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, h, w), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn distortion_basics() {
        let x = image(1, 8, 8);
        let y = image(2, 8, 8);
        assert_eq!(perceptual_distortion(&x, &x, &IdentityExtractor).unwrap(), 0.0);
        let mse = (&x - &y).mapv(|d| d * d).mean().unwrap();
        assert!((perceptual_distortion(&x, &y, &IdentityExtractor).unwrap() - mse).abs() < 1e-15);
        assert!(perceptual_distortion(&x, &image(3, 8, 4), &IdentityExtractor).is_err());
    }

    #[test]
    fn tape_distortion_matches_direct() {
        let m = ConvClassifier::init(&TaskModelConfig::default(), 4).unwrap();
        let (x, y) = (image(5, 16, 16), image(6, 16, 16));
        let reference = m.stage_features(&x).unwrap();
        let mut t = Tape::new();
        let v = t.constant(y.clone().into_dyn());
        let d = distortion_tape(&mut t, &m, v, &reference).unwrap();
        let direct = perceptual_distortion(&x, &y, &m).unwrap();
        assert!((t.scalar(d) - direct).abs() < 1e-12 * direct.max(1.0));
    }

    #[test]
    fn classifier_learns_shapes() {
        let ds = SyntheticDataset::new(DatasetConfig {
            size: 32,
            ..Default::default()
        })
        .unwrap();
        let train = ds.samples(Split::Train, 0..256);
        let eval = ds.samples(Split::Eval, 0..128);
        let mut m = ConvClassifier::init(&TaskModelConfig::default(), 0).unwrap();
        let before = m.accuracy(eval.iter().map(|s| (&s.image, s.label)));
        let losses = m.pretrain(&train, 6, 16, 3e-3, 1).unwrap();
        let after = m.accuracy(eval.iter().map(|s| (&s.image, s.label)));
        assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
        assert!(after > before.max(60.0), "accuracy {before} -> {after}");
    }
}
