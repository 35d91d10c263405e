//! Transfer-learning classifier: a frozen pretrained convolutional backbone
//! feeding a small dense head trained with binary cross-entropy plus L2.

pub mod backbone;
mod checkpoint;
pub mod head;
mod optim;

use std::path::PathBuf;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{preprocess_image, Label, PreprocessConfig, Sample};
use crate::error::{Error, Result};

pub use backbone::{Backbone, BackboneSpec, VGG16_WEIGHTS_ENV};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use head::{Head, LossBreakdown};
pub use optim::OptimizerKind;

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub backbone: BackboneSpec,
    #[serde(default = "default_true")]
    pub freeze_backbone: bool,
    #[serde(default = "ModelConfig::default_head_widths")]
    pub head_widths: (usize, usize),
    #[serde(default)]
    pub l2_lambda: f64,
    #[serde(default = "ModelConfig::default_input_side")]
    pub input_side: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneSpec::default(),
            freeze_backbone: true,
            head_widths: Self::default_head_widths(),
            l2_lambda: 0.0,
            input_side: Self::default_input_side(),
        }
    }
}

impl ModelConfig {
    fn default_head_widths() -> (usize, usize) {
        (256, 64)
    }

    fn default_input_side() -> usize {
        224
    }

    /// Desk-scale configuration over the compact backbone.
    pub fn compact(input_side: usize, base_width: usize, head_widths: (usize, usize)) -> Self {
        ModelConfig {
            backbone: BackboneSpec::compact(base_width, 0),
            head_widths,
            input_side,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_widths.0 == 0 || self.head_widths.1 == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.l2_lambda) {
            return Err(Error::Range(format!("l2_lambda {} not in [0, 1)", self.l2_lambda)));
        }
        if self.input_side < 32 {
            return Err(Error::Range(format!(
                "input_side {} is below the 32px the five pooling stages need",
                self.input_side
            )));
        }
        Ok(())
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig::with_side(self.input_side as u32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub rng_seed: u64,
    /// Sequential, order-fixed gradient accumulation. Off allows parallel
    /// per-sample backbone gradients when the backbone is trainable.
    #[serde(default = "default_true")]
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.01,
            batch_size: 4,
            epochs: 5,
            rng_seed: 0,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Range("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Range("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Range(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub final_train_accuracy: f64,
    pub final_val_accuracy: Option<f64>,
}

impl TrainReport {
    /// Train minus validation accuracy at the final epoch.
    pub fn overfitting_gap(&self) -> Option<f64> {
        self.final_val_accuracy.map(|v| self.final_train_accuracy - v)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    backbone: Arc<Backbone>,
    head: Head,
    history: Vec<EpochRecord>,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.head == other.head
            && self.history == other.history
            && (Arc::ptr_eq(&self.backbone, &other.backbone) || self.backbone == other.backbone)
    }
}

pub fn build_model(cfg: &ModelConfig, rng_seed: u64) -> Result<Model> {
    cfg.validate()?;
    let backbone = Arc::new(Backbone::load(&cfg.backbone)?);
    Model::with_backbone(cfg.clone(), backbone, rng_seed)
}

impl Model {
    /// Builds a model around an already loaded backbone, so several models
    /// (sweep cells, sessions) can share one feature cache.
    pub fn with_backbone(cfg: ModelConfig, backbone: Arc<Backbone>, rng_seed: u64) -> Result<Model> {
        cfg.validate()?;
        if *backbone.spec() != cfg.backbone {
            return Err(Error::Config("backbone does not match model config".into()));
        }
        let dim = backbone.feature_dim(cfg.input_side);
        let head = Head::init(dim, cfg.head_widths, rng_seed);
        Ok(Model {
            config: cfg,
            backbone,
            head,
            history: Vec::new(),
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        backbone: Backbone,
        head: Head,
        history: Vec<EpochRecord>,
    ) -> Model {
        Model {
            config,
            backbone: Arc::new(backbone),
            head,
            history,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn shared_backbone(&self) -> Arc<Backbone> {
        Arc::clone(&self.backbone)
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Head {
        &mut self.head
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn trainable_parameter_count(&self) -> usize {
        let head = self.head.parameter_count();
        if self.config.freeze_backbone {
            head
        } else {
            head + self.backbone.parameter_count()
        }
    }

    /// Backbone features for each sample, one row per sample. With a frozen
    /// backbone results are memoized per image path.
    pub fn features(&self, samples: &[Sample]) -> Result<Array2<f64>> {
        let preprocess = self.config.preprocess();
        let frozen = self.config.freeze_backbone;
        let rows: Vec<Arc<[f32]>> = samples
            .par_iter()
            .map(|s| {
                if frozen {
                    if let Some(f) = self.backbone.cached(&s.image_ref) {
                        return Ok(f);
                    }
                }
                let img = preprocess_image(s, &preprocess)?;
                let f: Arc<[f32]> = self.backbone.extract(&backbone::to_chw(&img)).into();
                if frozen {
                    self.backbone.store(s.image_ref.clone(), Arc::clone(&f));
                }
                Ok(f)
            })
            .collect::<Result<_>>()?;
        let dim = self.head.input_dim();
        let mut out = Array2::<f64>::zeros((rows.len(), dim));
        for (mut dst, src) in out.outer_iter_mut().zip(&rows) {
            for (d, &v) in dst.iter_mut().zip(src.iter()) {
                *d = f64::from(v);
            }
        }
        Ok(out)
    }

    pub fn predict_proba(&self, samples: &[Sample]) -> Result<Vec<f64>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.features(samples)?;
        Ok(self.head.predict_proba(x.view()))
    }

    pub fn predict_label(&self, samples: &[Sample], threshold: f64) -> Result<Vec<Label>> {
        check_threshold(threshold)?;
        Ok(labels_from_probs(&self.predict_proba(samples)?, threshold))
    }

    fn accuracy(&self, samples: &[Sample], labels: &[Label]) -> Result<f64> {
        let preds = self.predict_label(samples, 0.5)?;
        let correct = preds.iter().zip(labels).filter(|(p, t)| p == t).count();
        Ok(correct as f64 / labels.len().max(1) as f64)
    }

    fn fit(
        &mut self,
        samples: &[Sample],
        labels: &[Label],
        cfg: &TrainConfig,
        batch_size: usize,
        val: Option<(&[Sample], &[Label])>,
    ) -> Result<Vec<EpochRecord>> {
        let y: Vec<f64> = labels.iter().map(|l| l.as_f64()).collect();
        let lambda = self.config.l2_lambda;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let mut opt = optim::Optimizer::new(cfg.optimizer, cfg.learning_rate);

        let frozen = self.config.freeze_backbone;
        let cached = if frozen { Some(self.features(samples)?) } else { None };
        let images = if frozen {
            Vec::new()
        } else {
            let preprocess = self.config.preprocess();
            samples
                .par_iter()
                .map(|s| preprocess_image(s, &preprocess).map(|i| backbone::to_chw(&i)))
                .collect::<Result<Vec<_>>>()?
        };

        let mut records = Vec::with_capacity(cfg.epochs);
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            for batch in order.chunks(batch_size) {
                let yb: Vec<f64> = batch.iter().map(|&i| y[i]).collect();
                let loss = match &cached {
                    Some(x) => {
                        let xb = x.select(Axis(0), batch);
                        let (loss, grads, _) = self.head.loss_and_grads(xb.view(), &yb, lambda);
                        opt.begin_step();
                        apply_head(&mut opt, &mut self.head, &grads);
                        loss
                    }
                    None => self.backbone_step(&images, batch, &yb, lambda, cfg, &mut opt),
                };
                if !loss.total.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        loss: loss.total,
                    });
                }
                loss_sum += loss.total * batch.len() as f64;
            }
            let train_loss = loss_sum / samples.len() as f64;
            let val_accuracy = match val {
                Some((vs, vl)) if !vs.is_empty() => Some(self.accuracy(vs, vl)?),
                _ => None,
            };
            tracing::debug!(epoch, train_loss, ?val_accuracy, "epoch finished");
            records.push(EpochRecord {
                epoch,
                train_loss,
                val_accuracy,
            });
        }
        self.history.extend(records.iter().cloned());
        Ok(records)
    }

    /// One optimization step through the trainable backbone.
    fn backbone_step(
        &mut self,
        images: &[ndarray::Array3<f32>],
        batch: &[usize],
        y: &[f64],
        lambda: f64,
        cfg: &TrainConfig,
        opt: &mut optim::Optimizer,
    ) -> LossBreakdown {
        let backbone = &self.backbone;
        let traces: Vec<_> = if cfg.deterministic {
            batch.iter().map(|&i| backbone.extract_traced(&images[i])).collect()
        } else {
            batch.par_iter().map(|&i| backbone.extract_traced(&images[i])).collect()
        };
        let dim = self.head.input_dim();
        let mut xb = Array2::<f64>::zeros((batch.len(), dim));
        for (mut row, t) in xb.outer_iter_mut().zip(&traces) {
            for (d, &v) in row.iter_mut().zip(t.features()) {
                *d = f64::from(v);
            }
        }
        let (loss, head_grads, dx) = self.head.loss_and_grads(xb.view(), y, lambda);

        let per_sample = |(t, row): (&backbone::Trace, ndarray::ArrayView1<f64>)| {
            let g: Vec<f32> = row.iter().map(|&v| v as f32).collect();
            let mut grads = backbone.zero_grads();
            backbone.backward(t, &g, &mut grads);
            grads
        };
        let sum = |mut a: backbone::BackboneGrads, b: backbone::BackboneGrads| {
            for (ga, gb) in a.iter_mut().zip(b) {
                ga.weight += &gb.weight;
                ga.bias += &gb.bias;
            }
            a
        };
        let bb_grads = if cfg.deterministic {
            traces
                .iter()
                .zip(dx.outer_iter())
                .map(per_sample)
                .fold(backbone.zero_grads(), sum)
        } else {
            let rows: Vec<_> = dx.outer_iter().collect();
            traces
                .par_iter()
                .zip(rows)
                .map(per_sample)
                .reduce(|| backbone.zero_grads(), sum)
        };

        opt.begin_step();
        apply_head(opt, &mut self.head, &head_grads);
        let backbone = Arc::make_mut(&mut self.backbone);
        for (conv, g) in backbone.convs_mut().iter_mut().zip(&bb_grads) {
            opt.update(
                conv.weight.as_slice_mut().expect("standard layout"),
                g.weight.as_slice().expect("standard layout"),
            );
            opt.update(
                conv.bias.as_slice_mut().expect("standard layout"),
                g.bias.as_slice().expect("standard layout"),
            );
        }
        loss
    }
}

fn apply_head(opt: &mut optim::Optimizer, head: &mut Head, grads: &Head) {
    for (layer, g) in head.layers_mut().into_iter().zip(grads.layers()) {
        opt.update(
            layer.weight.as_slice_mut().expect("standard layout"),
            g.weight.as_slice().expect("standard layout"),
        );
        opt.update(
            layer.bias.as_slice_mut().expect("standard layout"),
            g.bias.as_slice().expect("standard layout"),
        );
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::Range(format!("threshold {threshold} not in (0, 1)")))
    }
}

/// Label 1 iff `p >= threshold`; a probability exactly at the threshold
/// goes to class 1.
pub fn labels_from_probs(probs: &[f64], threshold: f64) -> Vec<Label> {
    probs.iter().map(|&p| Label::from(p >= threshold)).collect()
}

fn training_labels(samples: &[Sample]) -> Result<Vec<Label>> {
    samples
        .iter()
        .map(|s| s.training_label().ok_or_else(|| Error::MissingLabel(s.id.clone())))
        .collect()
}

/// Trains for `cfg.epochs` epochs and returns the final-epoch model.
pub fn train(
    mut model: Model,
    train_samples: &[Sample],
    cfg: &TrainConfig,
    val_samples: &[Sample],
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if train_samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size > train_samples.len() {
        return Err(Error::Range(format!(
            "batch_size {} exceeds {} training samples",
            cfg.batch_size,
            train_samples.len()
        )));
    }
    let labels = training_labels(train_samples)?;
    let val_labels = training_labels(val_samples)?;
    let epochs = model.fit(
        train_samples,
        &labels,
        cfg,
        cfg.batch_size,
        Some((val_samples, &val_labels)),
    )?;
    let final_train_accuracy = model.accuracy(train_samples, &labels)?;
    let final_val_accuracy = epochs.last().and_then(|e| e.val_accuracy);
    Ok((
        model,
        TrainReport {
            epochs,
            final_train_accuracy,
            final_val_accuracy,
        },
    ))
}

/// Continues optimization from the current weights. The batch size is
/// clamped to the number of samples so a short final query still trains.
pub fn fine_tune(mut model: Model, labeled_samples: &[Sample], cfg: &TrainConfig) -> Result<Model> {
    cfg.validate()?;
    if labeled_samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels = training_labels(labeled_samples)?;
    let batch = cfg.batch_size.min(labeled_samples.len());
    model.fit(labeled_samples, &labels, cfg, batch, None)?;
    Ok(model)
}

pub fn predict_proba(model: &Model, samples: &[Sample]) -> Result<Vec<f64>> {
    model.predict_proba(samples)
}

pub fn predict_label(model: &Model, samples: &[Sample], threshold: f64) -> Result<Vec<Label>> {
    model.predict_label(samples, threshold)
}

/// Path-free description of where a model's weights came from, for reports.
pub fn describe_backbone(spec: &BackboneSpec) -> String {
    match spec {
        BackboneSpec::Vgg16Imagenet { weights } => format!(
            "vgg16_imagenet ({})",
            weights
                .as_ref()
                .map_or_else(|| format!("${VGG16_WEIGHTS_ENV}"), |p: &PathBuf| p.display().to_string())
        ),
        BackboneSpec::CompactVgg16 { base_width, seed } => {
            format!("compact_vgg16 (base width {base_width}, seed {seed})")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_at_threshold_goes_to_class_one() {
        assert_eq!(labels_from_probs(&[0.5], 0.5), vec![Label::One]);
        assert_eq!(labels_from_probs(&[0.2, 0.9], 0.5), vec![Label::Zero, Label::One]);
    }

    #[test]
    fn threshold_bounds() {
        assert!(check_threshold(0.0).is_err());
        assert!(check_threshold(1.0).is_err());
        assert!(check_threshold(0.3).is_ok());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::compact(32, 2, (4, 2));
        assert!(cfg.validate().is_ok());
        cfg.l2_lambda = 1.0;
        assert!(matches!(cfg.validate(), Err(Error::Range(_))));
        cfg.l2_lambda = 0.0;
        cfg.head_widths = (0, 2);
        assert!(cfg.validate().is_err());
        let t = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(matches!(t.validate(), Err(Error::Range(_))));
    }

    #[test]
    fn model_config_defaults_from_json() {
        let cfg: ModelConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ModelConfig::default());
        assert_eq!(cfg.head_widths, (256, 64));
        assert!(cfg.freeze_backbone);
        let cfg: ModelConfig = serde_json::from_str(
            r#"{"backbone":{"kind":"compact_vgg16","base_width":4,"seed":1},"input_side":32}"#,
        )
        .unwrap();
        assert_eq!(cfg.backbone, BackboneSpec::compact(4, 1));
    }

    use crate::dataset::Split;
    use crate::synthetic::tiny_dataset;

    fn tiny_model(freeze: bool) -> Model {
        let mut cfg = ModelConfig::compact(32, 2, (4, 3));
        cfg.freeze_backbone = freeze;
        build_model(&cfg, 7).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (_dir, m) = tiny_dataset(4);
        let train_set = m.split_samples(Split::Train);
        let val = m.split_samples(Split::Validation);
        let (a, ra) = train(tiny_model(true), &train_set, &quick(), &val).unwrap();
        let (b, rb) = train(tiny_model(true), &train_set, &quick(), &val).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(ra, rb);
        assert_eq!(ra.epochs.len(), 2);
        assert_eq!(a.history().len(), 2);
    }

    #[test]
    fn frozen_backbone_is_untouched_and_unfrozen_moves() {
        let (_dir, m) = tiny_dataset(2);
        let train_set = m.split_samples(Split::Train);
        let frozen = tiny_model(true);
        let before = frozen.backbone().convs().to_vec();
        let (frozen, _) = train(frozen, &train_set, &quick(), &[]).unwrap();
        assert_eq!(frozen.backbone().convs(), before.as_slice());

        let open = tiny_model(false);
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 0.05,
            ..quick()
        };
        let (open, _) = train(open, &train_set, &cfg, &[]).unwrap();
        assert_ne!(open.backbone().convs(), before.as_slice());
    }

    #[test]
    fn trainable_counts_follow_freeze_flag() {
        let frozen = tiny_model(true);
        let open = tiny_model(false);
        let head = frozen.head().parameter_count();
        // Base width 2 ends at 16 channels on a 1x1 map at side 32.
        assert_eq!(head, 16 * 4 + 4 + 4 * 3 + 3 + 3 + 1);
        assert_eq!(frozen.trainable_parameter_count(), head);
        assert_eq!(
            open.trainable_parameter_count(),
            head + open.backbone().parameter_count()
        );
    }

    #[test]
    fn predict_handles_empty_and_duplicate_inputs() {
        let (_dir, m) = tiny_dataset(1);
        let model = tiny_model(true);
        assert!(model.predict_proba(&[]).unwrap().is_empty());
        let s = m.samples()[0].clone();
        let p = model.predict_proba(&[s.clone(), s.clone(), s]).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|&v| v == p[0] && (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn train_preconditions() {
        let (_dir, m) = tiny_dataset(1);
        let train_set = m.split_samples(Split::Train);
        assert!(matches!(
            train(tiny_model(true), &[], &quick(), &[]),
            Err(Error::EmptyDataset)
        ));
        assert!(matches!(
            train(tiny_model(true), &train_set, &quick(), &[]),
            Err(Error::Range(_))
        ));
        let mut unlabeled = train_set.clone();
        unlabeled[0].true_label = None;
        let cfg = TrainConfig {
            batch_size: 1,
            ..quick()
        };
        assert!(matches!(
            train(tiny_model(true), &unlabeled, &cfg, &[]),
            Err(Error::MissingLabel(_))
        ));
    }

    #[test]
    fn non_finite_loss_is_divergence() {
        let (_dir, m) = tiny_dataset(2);
        let mut model = tiny_model(true);
        model.head_mut().output.bias.fill(f64::NAN);
        let err = train(model, &m.split_samples(Split::Train), &quick(), &[]).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 1, .. }));
    }

    #[test]
    fn fine_tune_clamps_batch_and_extends_history() {
        let (_dir, m) = tiny_dataset(1);
        let two = m.split_samples(Split::Train);
        let cfg = TrainConfig {
            batch_size: 32,
            ..quick()
        };
        let model = fine_tune(tiny_model(true), &two, &cfg).unwrap();
        assert_eq!(model.history().len(), 2);
        let model = fine_tune(model, &two, &cfg).unwrap();
        assert_eq!(model.history().len(), 4);
    }
}
