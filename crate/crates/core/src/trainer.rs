//! Cross-entropy training of the classifier and the localization evaluation.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::attribution::{self, MapOptions, MapSource};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::kv;
use crate::metrics::{self, ComponentPolicy, EvalReport, Prediction};
use crate::model::{self, checkpoint, ForwardOptions, ModelConfig, Target, Vit};
use crate::padl::Mode;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

impl FromStr for Optimizer {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "adam" => Ok(Optimizer::Adam),
            "sgd" => Ok(Optimizer::Sgd),
            _ => Err(format!("unknown optimizer {s:?} (adam, sgd)")),
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Adam => "adam",
            Optimizer::Sgd => "sgd",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Multiplicative learning-rate decay applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub padl_enabled: bool,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 1e-3,
            weight_decay: 0.0,
            lr_decay: 0.5,
            lr_decay_every: 3,
            batch_size: 32,
            seed: 0,
            padl_enabled: true,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    /// Learning rate, weight decay and schedule as published for the
    /// ImageNet runs.
    pub fn paper() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 0.0,
            lr_decay: 0.1,
            lr_decay_every: 3,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay {} outside (0, 1]", self.lr_decay));
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} is negative", self.weight_decay));
        }
        Ok(())
    }

    pub fn apply(&mut self, key: &str, raw: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = kv::value(key, raw)?,
            "lr" => self.lr = kv::value(key, raw)?,
            "weight_decay" => self.weight_decay = kv::value(key, raw)?,
            "lr_decay" => self.lr_decay = kv::value(key, raw)?,
            "lr_decay_every" => self.lr_decay_every = kv::value(key, raw)?,
            "batch_size" => self.batch_size = kv::value(key, raw)?,
            "seed" => self.seed = kv::value(key, raw)?,
            "padl_enabled" => self.padl_enabled = kv::flag(key, raw)?,
            "optimizer" => self.optimizer = kv::value(key, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("lr_decay", format!("{:?}", self.lr_decay)),
            ("lr_decay_every", self.lr_decay_every.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("padl_enabled", self.padl_enabled.to_string()),
            ("optimizer", self.optimizer.to_string()),
        ]
    }
}

/// Step decay: `lr · decay^⌊epoch / every⌋`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.lr_decay.powi((epoch / cfg.lr_decay_every) as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
}

pub fn render_log(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch\tlr\ttrain_loss\ttrain_acc\n");
    for e in log {
        let _ = writeln!(s, "{}\t{:e}\t{:.6}\t{:.4}", e.epoch, e.lr, e.train_loss, e.train_acc);
    }
    s
}

/// Loss, correctness and parameter gradients of one sample.
struct SampleGrad {
    loss: f64,
    correct: bool,
    grads: Vec<Tensor>,
}

fn sample_grad(vit: &Vit, image: &Tensor, label: usize, mode: Mode, padl_seed: u64) -> Result<SampleGrad> {
    let r = vit.forward_with(
        image,
        &ForwardOptions {
            mode,
            target: Some(Target::Loss(label)),
            padl_seed,
            trainable: true,
            ..Default::default()
        },
    )?;
    let out = r.target_node.expect("loss recorded");
    let loss = r.tape.value(out).data()[0];
    let mut g = r.tape.backward(out)?;
    let grads = r
        .param_nodes()
        .iter()
        .map(|&id| g.take(id).unwrap_or_else(|| Tensor::zeros(r.tape.value(id).shape())))
        .collect();
    Ok(SampleGrad {
        loss,
        correct: model::argmax(&r.logits) == label,
        grads,
    })
}

struct OptState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptState {
    fn new(vit: &Vit) -> Self {
        let zeros: Vec<Vec<f64>> = vit.params.named().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        OptState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, vit: &mut Vit, grads: &[Vec<f64>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (c1, c2) = (1.0 - BETA1.powi(self.t), 1.0 - BETA2.powi(self.t));
        for (k, p) in vit.params.tensors_mut().into_iter().enumerate() {
            let g = &grads[k];
            let data = p.data_mut();
            for i in 0..data.len() {
                let gi = g[i] + cfg.weight_decay * data[i];
                match cfg.optimizer {
                    Optimizer::Sgd => data[i] -= lr * gi,
                    Optimizer::Adam => {
                        let m = &mut self.m[k][i];
                        let v = &mut self.v[k][i];
                        *m = BETA1 * *m + (1.0 - BETA1) * gi;
                        *v = BETA2 * *v + (1.0 - BETA2) * gi * gi;
                        data[i] -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Vit,
    pub log: Vec<EpochLog>,
}

/// Trains from the seeded initialization. Batches are shuffled per epoch from
/// the run seed; each sample's p-ADL stream comes from
/// `(seed, epoch, step, sample)`, so runs differing only in `padl_enabled`
/// see the same batches. Per-sample gradients are summed in batch order,
/// which keeps results independent of the thread count.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    samples: &[Sample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut vit = Vit::new(model_cfg.clone())?;
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let n = model_cfg.image_size;
    if let Some(s) = samples.iter().find(|s| s.label >= model_cfg.num_classes) {
        return Err(Error::invalid(format!("{}: label {} out of range", s.id, s.label)));
    }
    if let Some(s) = samples.iter().find(|s| (s.image.width, s.image.height) != (n, n)) {
        return Err(Error::invalid(format!("{}: image size does not match the model", s.id)));
    }
    let mode = if cfg.padl_enabled { Mode::Train } else { Mode::Eval };
    let mut opt = OptState::new(&vit);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        order.sort_unstable();
        order.shuffle(&mut seed::rng(&[cfg.seed, 0x5_4ff1e, epoch as u64]));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let padl_seed = seed::derive(&[cfg.seed, epoch as u64, step as u64, i as u64]);
                    sample_grad(&vit, &samples[i].tensor(), samples[i].label, mode, padl_seed)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut total: Vec<Vec<f64>> = vit.params.named().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
            for r in &results {
                loss_sum += r.loss;
                correct += r.correct as usize;
                for (acc, g) in total.iter_mut().zip(&r.grads) {
                    for (a, v) in acc.iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            total.iter_mut().flatten().for_each(|v| *v *= scale);
            opt.step(&mut vit, &total, lr, cfg);
        }
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / samples.len() as f64,
            train_acc: 100.0 * correct as f64 / samples.len() as f64,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { model: vit, log })
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.tsv";

/// Trains and writes `model.ckpt` and `train_log.tsv` into `out_dir`.
pub fn train_to_dir(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    samples: &[Sample],
    out_dir: &Path,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let outcome = train(model_cfg, cfg, samples, on_epoch)?;
    checkpoint::save(&outcome.model, &out_dir.join(CHECKPOINT_FILE))?;
    let log_path = out_dir.join(LOG_FILE);
    fs::write(&log_path, render_log(&outcome.log)).map_err(|e| Error::io(&log_path, e))?;
    Ok(outcome)
}

/// Mean cross-entropy and accuracy in eval mode.
pub fn dataset_loss(vit: &Vit, samples: &[Sample]) -> Result<(f64, f64)> {
    let per = samples
        .par_iter()
        .map(|s| {
            let r = vit.forward_with(
                &s.tensor(),
                &ForwardOptions {
                    target: Some(Target::Loss(s.label)),
                    ..Default::default()
                },
            )?;
            let loss = r.tape.value(r.target_node.expect("loss")).data()[0];
            Ok((loss, model::argmax(&r.logits) == s.label))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per.len() as f64;
    Ok((
        per.iter().map(|p| p.0).sum::<f64>() / n,
        100.0 * per.iter().filter(|p| p.1).count() as f64 / n,
    ))
}

/// Which class the attribution targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClassSource {
    GroundTruth,
    Predicted,
    /// Ground-truth maps for the box metrics, predicted-class maps for Top-1-Loc.
    #[default]
    Protocol,
}

impl FromStr for ClassSource {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ground_truth" | "gt" => Ok(ClassSource::GroundTruth),
            "predicted" => Ok(ClassSource::Predicted),
            "protocol" => Ok(ClassSource::Protocol),
            _ => Err(format!("unknown class source {s:?} (ground_truth, predicted, protocol)")),
        }
    }
}

impl fmt::Display for ClassSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassSource::GroundTruth => "ground_truth",
            ClassSource::Predicted => "predicted",
            ClassSource::Protocol => "protocol",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub map: MapOptions,
    pub class_source: ClassSource,
    pub tau_steps: usize,
    pub policy: ComponentPolicy,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            map: MapOptions::default(),
            class_source: ClassSource::Protocol,
            tau_steps: metrics::DEFAULT_TAU_STEPS,
            policy: ComponentPolicy::Largest,
        }
    }
}

/// Upsampled, normalized map for an image.
pub fn image_map(vit: &Vit, image: &Tensor, class: Option<usize>, opts: &MapOptions) -> Result<(Tensor, usize)> {
    let ex = attribution::explain(vit, image, class, opts)?;
    let up = attribution::upsample_map(&ex.map.grid, vit.config.image_size)?;
    Ok((metrics::normalize_map(&up), ex.predicted))
}

/// Ground-truth-class and predicted-class predictions for every sample.
pub fn predictions(vit: &Vit, samples: &[Sample], opts: &EvalOptions) -> Result<(Vec<Prediction>, Vec<Prediction>)> {
    let pairs = samples
        .par_iter()
        .map(|s| {
            let image = s.tensor();
            let mk = |map: Tensor, predicted: usize| Prediction {
                id: s.id.clone(),
                map,
                predicted_class: predicted,
                label: s.label,
                gt_boxes: s.gt_boxes.clone(),
            };
            if opts.map.source == MapSource::Ar {
                let (map, predicted) = image_map(vit, &image, None, &opts.map)?;
                let p = mk(map, predicted);
                return Ok((p.clone(), p));
            }
            let need_gt = opts.class_source != ClassSource::Predicted;
            let need_pred = opts.class_source != ClassSource::GroundTruth;
            let gt = if need_gt {
                let (map, predicted) = image_map(vit, &image, Some(s.label), &opts.map)?;
                Some(mk(map, predicted))
            } else {
                None
            };
            let pred = match &gt {
                Some(g) if !need_pred || g.predicted_class == s.label => g.clone(),
                _ => {
                    let (map, predicted) = image_map(vit, &image, None, &opts.map)?;
                    mk(map, predicted)
                }
            };
            Ok((gt.unwrap_or_else(|| pred.clone()), pred))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(pairs.into_iter().unzip())
}

/// Eval-mode forward, attribution and the full metric pipeline.
pub fn evaluate(vit: &Vit, samples: &[Sample], opts: &EvalOptions) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let n = vit.config.image_size;
    if let Some(s) = samples.iter().find(|s| (s.image.width, s.image.height) != (n, n)) {
        return Err(Error::Shape(format!(
            "{}: {}×{} image, checkpoint expects {n}×{n}",
            s.id, s.image.width, s.image.height
        )));
    }
    if let Some(s) = samples.iter().find(|s| s.label >= vit.config.num_classes) {
        return Err(Error::Shape(format!(
            "{}: label {} but the checkpoint has {} classes",
            s.id, s.label, vit.config.num_classes
        )));
    }
    let (gt, pred) = predictions(vit, samples, opts)?;
    let grid = metrics::tau_grid(opts.tau_steps.max(1));
    match opts.class_source {
        ClassSource::GroundTruth => EvalReport::compute(&gt, &gt, &grid, opts.policy),
        ClassSource::Predicted => EvalReport::compute(&pred, &pred, &grid, opts.policy),
        ClassSource::Protocol => EvalReport::compute(&gt, &pred, &grid, opts.policy),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{self, DatasetSpec, Split};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 4,
            depth: 2,
            embed_dim: 16,
            heads: 2,
            num_classes: 4,
            seed: 3,
            ..ModelConfig::desk()
        }
    }

    fn tiny_samples(n: usize) -> Vec<Sample> {
        let spec = DatasetSpec {
            num_classes: 4,
            image_size: 16,
            area_min: 0.1,
            area_max: 0.2,
            train_images: n,
            test_images: 1,
            seed: 1,
            ..DatasetSpec::default()
        };
        (0..n)
            .map(|i| {
                let r = dataset::render(&spec, Split::Train, i);
                Sample {
                    id: format!("{i}"),
                    image: r.image,
                    label: r.label,
                    gt_boxes: vec![r.bbox],
                }
            })
            .collect()
    }

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::paper();
        assert_eq!(lr_schedule(0, &cfg), 1e-4);
        assert!((lr_schedule(3, &cfg) - 1e-5).abs() < 1e-20);
        assert!((lr_schedule(7, &cfg) - 1e-6).abs() < 1e-21);
        assert!((lr_schedule(2, &cfg) - 1e-4).abs() < 1e-20);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&tiny_model(), &cfg, &tiny_samples(4), |_| {}).unwrap();
        assert_eq!(out.model, Vit::new(tiny_model()).unwrap());
        assert!(out.log.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let samples = tiny_samples(12);
        let a = train(&tiny_model(), &cfg, &samples, |_| {}).unwrap();
        let b = train(&tiny_model(), &cfg, &samples, |_| {}).unwrap();
        assert_eq!(
            checkpoint::encode_checkpoint(&a.model),
            checkpoint::encode_checkpoint(&b.model)
        );
        assert_eq!(a.log, b.log);
        let off = TrainConfig {
            padl_enabled: false,
            ..cfg
        };
        let c = train(&tiny_model(), &off, &samples, |_| {}).unwrap();
        assert_ne!(a.model, c.model);
        assert_eq!(a.model.params.parameter_count(), c.model.params.parameter_count());
    }

    #[test]
    fn loss_goes_down() {
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 8,
            lr: 2e-3,
            lr_decay: 1.0,
            padl_enabled: false,
            ..TrainConfig::default()
        };
        let samples = tiny_samples(32);
        let init = Vit::new(tiny_model()).unwrap();
        let (before, _) = dataset_loss(&init, &samples).unwrap();
        let out = train(&tiny_model(), &cfg, &samples, |_| {}).unwrap();
        let (after, _) = dataset_loss(&out.model, &samples).unwrap();
        assert!(after < before, "{before} -> {after}");
        assert!(out.log.last().unwrap().train_loss < out.log[0].train_loss);
    }

    #[test]
    fn single_sample_overfits_monotonically() {
        let samples = tiny_samples(1);
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 1,
            lr: 1e-2,
            lr_decay: 1.0,
            optimizer: Optimizer::Sgd,
            padl_enabled: false,
            ..TrainConfig::default()
        };
        let out = train(&tiny_model(), &cfg, &samples, |_| {}).unwrap();
        let losses: Vec<f64> = out.log.iter().map(|e| e.train_loss).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(train(&tiny_model(), &TrainConfig::default(), &[], |_| {}).is_err());
        let bad = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(train(&tiny_model(), &bad, &tiny_samples(2), |_| {}).is_err());
        let mut wrong = tiny_samples(2);
        wrong[0].label = 9;
        assert!(train(&tiny_model(), &TrainConfig::default(), &wrong, |_| {}).is_err());
    }

    #[test]
    fn ar_report_ignores_class_source() {
        let vit = Vit::new(tiny_model()).unwrap();
        let samples = tiny_samples(6);
        let mut opts = EvalOptions::default();
        opts.map.source = MapSource::Ar;
        let mut reports = Vec::new();
        for cs in [ClassSource::GroundTruth, ClassSource::Predicted, ClassSource::Protocol] {
            opts.class_source = cs;
            reports.push(evaluate(&vit, &samples, &opts).unwrap());
        }
        assert_eq!(reports[0], reports[1]);
        assert_eq!(reports[1], reports[2]);
        let r = &reports[0];
        assert_eq!(r.max_box_acc_v2, metrics::mean_of(r.per_delta.iter().map(|d| d.accuracy)));
    }

    #[test]
    fn gar_evaluation_runs_and_is_deterministic() {
        let vit = Vit::new(tiny_model()).unwrap();
        let samples = tiny_samples(5);
        let opts = EvalOptions::default();
        let a = evaluate(&vit, &samples, &opts).unwrap();
        let b = evaluate(&vit, &samples, &opts).unwrap();
        assert_eq!(a.to_tsv(), b.to_tsv());
        assert_eq!(a.images, 5);
    }
}
