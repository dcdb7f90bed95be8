//! Gradient computation, the training loop with early stopping, and the two
//! training entry points.

pub mod checkpoint;
pub mod gradcheck;
mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::classifier::{evaluate_prepared, ClassifierModel, Setup};
use crate::corpus::{Dataset, Instance};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::extractor::ExtractorModel;
use crate::metrics::{macro_f1, token_f1};
use crate::params::{accumulate_grads, ParamSet};

pub use optim::{optimizer_step, AdamWConfig, OptimizerState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DevMetric {
    MacroF1,
    /// Mean of Macro-F1 and Token-F1.
    MacroF1TokenF1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub alpha: f64,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Stage-one selection metric; stage two always uses Macro-F1.
    pub dev_metric: DevMetric,
    pub rationale_hidden: usize,
    pub threshold: f64,
    /// Train stage two on gold rather than predicted rationale masks.
    pub gold_masks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 10,
            patience: 3,
            alpha: 0.09,
            seed: 17,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            dev_metric: DevMetric::MacroF1TokenF1,
            rationale_hidden: crate::rationale::DEFAULT_GRU_HIDDEN,
            threshold: crate::rationale::DEFAULT_THRESHOLD,
            gold_masks: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::invalid(format!("train.{field}"), "must be positive"))
            }
        };
        positive("learning_rate", self.learning_rate.is_finite() && self.learning_rate >= 0.0)?;
        positive("batch_size", self.batch_size > 0)?;
        positive("max_epochs", self.max_epochs > 0)?;
        positive("patience", self.patience > 0)?;
        positive("rationale_hidden", self.rationale_hidden > 0)?;
        if self.patience > self.max_epochs {
            return Err(Error::invalid("train.patience", "must not exceed max_epochs"));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::invalid("train.alpha", "must be finite and nonnegative"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("train.weight_decay", "must be finite and nonnegative"));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("train.{field}"), "must be in [0, 1)"));
            }
        }
        positive("eps", self.eps > 0.0)?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid("train.threshold", "must be in (0, 1)"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// A model trainable by [`fit`]: an ordered list of parameter sets, where the
/// position of a set is its tape slot, and a per-instance loss.
pub trait Trainable: Clone + Send + Sync {
    fn sets(&self) -> Vec<&ParamSet>;
    fn sets_mut(&mut self) -> Vec<&mut ParamSet>;
    fn loss(&self, tape: &mut Tape, inst: &Instance, alpha: f64, dropout: Option<&mut ChaCha8Rng>) -> Result<Var>;
    fn dropout_rate(&self) -> f64;
}

impl Trainable for ExtractorModel {
    fn sets(&self) -> Vec<&ParamSet> {
        self.param_sets().to_vec()
    }

    fn sets_mut(&mut self) -> Vec<&mut ParamSet> {
        vec![&mut self.encoder.set, &mut self.rationale.set, &mut self.class_head.set]
    }

    fn loss(&self, tape: &mut Tape, inst: &Instance, alpha: f64, dropout: Option<&mut ChaCha8Rng>) -> Result<Var> {
        self.record_loss(tape, inst, alpha, dropout)
    }

    fn dropout_rate(&self) -> f64 {
        self.encoder.cfg.dropout_rate
    }
}

impl Trainable for ClassifierModel {
    fn sets(&self) -> Vec<&ParamSet> {
        self.param_sets().to_vec()
    }

    fn sets_mut(&mut self) -> Vec<&mut ParamSet> {
        vec![&mut self.encoder.set, &mut self.head.set]
    }

    fn loss(&self, tape: &mut Tape, inst: &Instance, _alpha: f64, dropout: Option<&mut ChaCha8Rng>) -> Result<Var> {
        self.record_loss(tape, inst, dropout)
    }

    fn dropout_rate(&self) -> f64 {
        self.encoder.cfg.dropout_rate
    }
}

/// Gradients per parameter set, laid out like [`Trainable::sets`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub sets: Vec<Vec<Mat>>,
}

impl Gradients {
    pub fn flat(&self) -> Vec<Mat> {
        self.sets.iter().flatten().cloned().collect()
    }
}

/// Per-instance dropout streams; `None` disables dropout.
#[derive(Clone, Copy, Debug)]
pub struct DropoutSeed {
    pub seed: u64,
    pub step: u64,
}

fn instance_gradients<M: Trainable>(
    model: &M,
    inst: &Instance,
    alpha: f64,
    weight: f64,
    dropout: Option<(DropoutSeed, usize)>,
) -> Result<(f64, Vec<Vec<Mat>>)> {
    let mut rng = dropout.map(|(d, i)| {
        let mut r = ChaCha8Rng::seed_from_u64(d.seed);
        r.set_stream(d.step.wrapping_mul(1 << 16).wrapping_add(i as u64));
        r
    });
    let mut tape = Tape::new();
    let loss = model.loss(&mut tape, inst, alpha, rng.as_mut())?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {value} on instance {}", inst.id)));
    }
    tape.backward(loss, weight);
    let sets = model.sets();
    let mut grads: Vec<Vec<Mat>> = sets.iter().map(|s| s.zeros_like()).collect();
    for (slot, g) in grads.iter_mut().enumerate() {
        accumulate_grads(&tape, slot as u8, g, 1.0);
    }
    if grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numerical(format!("non-finite gradient on instance {}", inst.id)));
    }
    Ok((value, grads))
}

/// Gradients of the batch-mean loss, and that mean. Instances may be processed
/// in parallel; the reduction runs in batch order.
pub fn compute_gradients<M: Trainable>(
    model: &M,
    batch: &[&Instance],
    alpha: f64,
    dropout: Option<DropoutSeed>,
    parallel: bool,
) -> Result<(Gradients, f64)> {
    if batch.is_empty() {
        return Err(Error::invalid("batch", "empty batch"));
    }
    let weight = 1.0 / batch.len() as f64;
    let dropout = dropout.filter(|_| model.dropout_rate() > 0.0);
    let run = |(i, inst): (usize, &&Instance)| instance_gradients(model, inst, alpha, weight, dropout.map(|d| (d, i)));
    let parts: Vec<Result<(f64, Vec<Vec<Mat>>)>> = if parallel {
        batch.par_iter().enumerate().map(run).collect()
    } else {
        batch.iter().enumerate().map(run).collect()
    };
    let mut total: Option<Vec<Vec<Mat>>> = None;
    let mut loss = 0.0;
    for part in parts {
        let (value, grads) = part?;
        loss += value * weight;
        match &mut total {
            None => total = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().flatten().zip(grads.iter().flatten()) {
                    *a += g;
                }
            }
        }
    }
    Ok((
        Gradients {
            sets: total.expect("nonempty batch"),
        },
        loss,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best dev score; stops after `patience` epochs without a strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<(usize, f64)>,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, score: f64) -> StopDecision {
        let improved = self.best.is_none_or(|(_, b)| score > b);
        if improved {
            self.best = Some((epoch, score));
            self.bad_epochs = 0;
            StopDecision::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DevMetrics {
    pub macro_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_f1: Option<f64>,
    /// The value used for model selection.
    pub selection: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev: DevMetrics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub kind: String,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Shuffled instance order for `epoch`, reproducible from `(seed, epoch)` alone.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Mini-batch AdamW with per-epoch dev evaluation and early stopping.
/// Returns the model from the best dev epoch, rounded to single precision
/// so that it equals its checkpoint.
pub fn fit<M: Trainable>(
    mut model: M,
    train: &[Instance],
    cfg: &TrainConfig,
    kind: &str,
    parallel: bool,
    mut evaluate: impl FnMut(&M) -> Result<DevMetrics>,
) -> Result<(M, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("train", "empty training set"));
    }
    let adamw = cfg.adamw();
    let mut state = OptimizerState::new(&model.sets());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut log = TrainLog {
        kind: kind.to_string(),
        ..TrainLog::default()
    };
    let mut step = 0u64;
    for epoch in 1..=cfg.max_epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &train[i]).collect();
            let dropout = Some(DropoutSeed { seed: cfg.seed, step });
            let (grads, loss) = compute_gradients(&model, &batch, cfg.alpha, dropout, parallel)?;
            loss_sum += loss * batch.len() as f64;
            optimizer_step(&mut model.sets_mut(), &grads.flat(), &mut state, &adamw);
            step += 1;
        }
        let dev = evaluate(&model)?;
        let decision = stopper.update(epoch, dev.selection);
        log::info!(
            "{kind} epoch {epoch}: train loss {:.5}, dev {:.4}",
            loss_sum / train.len() as f64,
            dev.selection
        );
        log.epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            dev,
        });
        match decision {
            StopDecision::Improved => best = model.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                log.stopped_early = true;
                break;
            }
        }
    }
    log.best_epoch = stopper.best.map_or(0, |(e, _)| e);
    for set in best.sets_mut() {
        round_to_f32(set);
    }
    Ok((best, log))
}

pub fn round_to_f32(set: &mut ParamSet) {
    for p in set.iter_mut() {
        p.value.mapv_inplace(|v| f64::from(v as f32));
    }
}

/// Dev metrics for a stage-one model.
pub fn extractor_dev_metrics(model: &ExtractorModel, dev: &Dataset, threshold: f64, metric: DevMetric) -> Result<DevMetrics> {
    let mut preds = Vec::with_capacity(dev.len());
    let mut pred_r = Vec::with_capacity(dev.len());
    let mut gold_r = Vec::with_capacity(dev.len());
    for inst in &dev.instances {
        let out = model.predict(inst, threshold)?;
        preds.push(out.pred_class);
        pred_r.push(out.rationale.word_labels);
        gold_r.push(
            inst.gold_rationale
                .clone()
                .ok_or_else(|| Error::invalid(format!("instance {}", inst.id), "dev instance has no gold rationale"))?,
        );
    }
    let golds: Vec<usize> = dev.instances.iter().map(|i| i.label).collect();
    let mf1 = macro_f1(&preds, &golds, &model.labels)?;
    let tf1 = token_f1(&pred_r, &gold_r)?;
    let selection = match metric {
        DevMetric::MacroF1 => mf1,
        DevMetric::MacroF1TokenF1 => (mf1 + tf1) / 2.0,
    };
    Ok(DevMetrics {
        macro_f1: mf1,
        token_f1: Some(tf1),
        selection,
    })
}

fn check_compatible(train: &Dataset, dev: &Dataset) -> Result<()> {
    if train.vocab != dev.vocab || train.labels != dev.labels {
        return Err(Error::invalid("dev", "train and dev sets must share vocabulary and label space"));
    }
    Ok(())
}

/// Trains the stage-one model on the combined loss.
pub fn train_extractor(
    train: &Dataset,
    dev: &Dataset,
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    parallel: bool,
) -> Result<(ExtractorModel, TrainLog)> {
    cfg.validate()?;
    check_compatible(train, dev)?;
    for ds in [train, dev] {
        if let Some(inst) = ds.instances.iter().find(|i| i.gold_rationale.is_none()) {
            return Err(Error::invalid(
                format!("instance {}", inst.id),
                "stage-one training needs gold rationales on every instance",
            ));
        }
    }
    let model = ExtractorModel::init(enc_cfg, cfg.rationale_hidden, train.labels.clone(), train.vocab.clone(), cfg.seed)?;
    fit(model, &train.instances, cfg, "extractor", parallel, |m| {
        extractor_dev_metrics(m, dev, cfg.threshold, cfg.dev_metric)
    })
}

/// Trains the stage-two classifier on already masked inputs.
pub fn train_classifier(
    masked_train: &Dataset,
    masked_dev: &Dataset,
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    parallel: bool,
) -> Result<(ClassifierModel, TrainLog)> {
    cfg.validate()?;
    check_compatible(masked_train, masked_dev)?;
    let model = ClassifierModel::init(
        enc_cfg,
        masked_train.labels.clone(),
        masked_train.vocab.clone(),
        cfg.seed.wrapping_add(100),
    )?;
    fit(model, &masked_train.instances, cfg, "classifier", parallel, |m| {
        let r = evaluate_prepared(m, masked_dev, Setup::R)?;
        Ok(DevMetrics {
            macro_f1: r.macro_f1,
            token_f1: None,
            selection: r.macro_f1,
        })
    })
}
