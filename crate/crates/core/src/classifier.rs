//! Stage-two classifier: a fresh encoder with a softmax head on the first
//! token embedding, fed rationale-masked inputs.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::corpus::{Dataset, Instance, LabelSpace, PatchGrid, TokenSeq, Vocab, MASK_TOKEN};
use crate::encoder::{encode, init_encoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::extractor::argmax;
use crate::masking::{mask_dataset, MaskMode, MaskingConfig, RationaleInputs};
use crate::metrics::{macro_f1, per_class_f1};
use crate::params::ParamSet;
use crate::rationale::{class_forward, ClassHeadParams};

pub const ENCODER_SLOT: u8 = 0;
pub const CLASS_SLOT: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    pub encoder: EncoderParams,
    pub head: ClassHeadParams,
    pub labels: LabelSpace,
    pub vocab: Vocab,
}

impl ClassifierModel {
    pub fn init(cfg: &EncoderConfig, labels: LabelSpace, vocab: Vocab, seed: u64) -> Result<Self> {
        if cfg.vocab_size != vocab.len() {
            return Err(Error::invalid(
                "encoder.vocab_size",
                format!("{} does not match the {}-entry vocabulary", cfg.vocab_size, vocab.len()),
            ));
        }
        Ok(Self {
            encoder: init_encoder(cfg, seed)?,
            head: ClassHeadParams::init(cfg.d_model, labels.len(), seed.wrapping_add(2))?,
            labels,
            vocab,
        })
    }

    /// Cross-entropy of the gold class.
    pub fn record_loss(&self, tape: &mut Tape, inst: &Instance, dropout: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let enc = self.encoder.forward(tape, ENCODER_SLOT, &inst.tokens, &inst.patches, dropout)?;
        let first = tape.slice_rows(enc.tokens, 0, 1);
        let dist = self.head.forward(tape, CLASS_SLOT, first);
        Ok(tape.neg_log_at(dist, inst.label))
    }

    /// Predicted class (lowest index on ties) and the class distribution.
    pub fn classify(&self, tokens: &TokenSeq, patches: &PatchGrid) -> Result<(usize, Vec<f64>)> {
        let emb = encode(&self.encoder, tokens, patches)?;
        let dist = class_forward(&self.head, &emb.token_embs.row(0).to_owned().insert_axis(ndarray::Axis(0)));
        Ok((argmax(&dist), dist))
    }

    pub fn param_sets(&self) -> [&ParamSet; 2] {
        [&self.encoder.set, &self.head.set]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setup {
    #[serde(rename = "X")]
    X,
    #[serde(rename = "R")]
    R,
    #[serde(rename = "XR")]
    XMinusR,
    #[serde(rename = "text-only")]
    TextOnly,
    #[serde(rename = "image-only")]
    ImageOnly,
}

impl Setup {
    pub const ALL: [Setup; 5] = [Setup::X, Setup::R, Setup::XMinusR, Setup::TextOnly, Setup::ImageOnly];

    pub fn name(self) -> &'static str {
        match self {
            Setup::X => "X",
            Setup::R => "R",
            Setup::XMinusR => "XR",
            Setup::TextOnly => "text-only",
            Setup::ImageOnly => "image-only",
        }
    }

    pub fn needs_rationales(self) -> bool {
        matches!(self, Setup::R | Setup::XMinusR)
    }
}

impl fmt::Display for Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "X" | "x" => Ok(Setup::X),
            "R" | "r" => Ok(Setup::R),
            "XR" | "X\\R" | "xr" => Ok(Setup::XMinusR),
            "text-only" | "text" => Ok(Setup::TextOnly),
            "image-only" | "image" => Ok(Setup::ImageOnly),
            other => Err(Error::invalid(
                "setup",
                format!("unknown setup {other:?}; expected X, R, XR, text-only or image-only"),
            )),
        }
    }
}

/// Inputs for `setup`. R and XR need predicted rationales and heatmaps.
pub fn build_setup(
    ds: &Dataset,
    setup: Setup,
    rationales: Option<&RationaleInputs<'_>>,
    masking: &MaskingConfig,
) -> Result<Dataset> {
    let replace = |f: &dyn Fn(&Instance) -> Result<Instance>| -> Result<Dataset> {
        Ok(Dataset {
            instances: ds.instances.iter().map(f).collect::<Result<_>>()?,
            labels: ds.labels.clone(),
            vocab: ds.vocab.clone(),
        })
    };
    match setup {
        Setup::X => Ok(ds.clone()),
        Setup::TextOnly => replace(&|inst| inst.with_inputs(inst.words.clone(), inst.patches.zeroed(), &ds.vocab)),
        Setup::ImageOnly => replace(&|inst| {
            let stars = vec![MASK_TOKEN.to_string(); inst.words.len()];
            inst.with_inputs(stars, inst.patches.clone(), &ds.vocab)
        }),
        Setup::R | Setup::XMinusR => {
            let inputs = rationales.ok_or_else(|| {
                Error::invalid("heatmaps", format!("setup {setup} needs rationale and heatmap dumps"))
            })?;
            let mode = if setup == Setup::R {
                MaskMode::KeepRationale
            } else {
                MaskMode::KeepComplement
            };
            mask_dataset(ds, inputs, mode, masking)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub setup: Setup,
    pub pred: String,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SetupResult {
    pub setup: Setup,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub predictions: Vec<Prediction>,
}

/// Classifies every instance of an already prepared setup dataset.
pub fn evaluate_prepared(model: &ClassifierModel, ds: &Dataset, setup: Setup) -> Result<SetupResult> {
    let mut preds = Vec::with_capacity(ds.len());
    let mut predictions = Vec::with_capacity(ds.len());
    for inst in &ds.instances {
        let (pred, probs) = model.classify(&inst.tokens, &inst.patches)?;
        preds.push(pred);
        predictions.push(Prediction {
            id: inst.id.clone(),
            setup,
            pred: model.labels.name(pred).to_string(),
            probs,
        });
    }
    let golds: Vec<usize> = ds.instances.iter().map(|i| i.label).collect();
    Ok(SetupResult {
        setup,
        macro_f1: macro_f1(&preds, &golds, &model.labels)?,
        per_class_f1: per_class_f1(&preds, &golds, model.labels.len())?,
        predictions,
    })
}

pub fn evaluate_setup(
    model: &ClassifierModel,
    ds: &Dataset,
    setup: Setup,
    rationales: Option<&RationaleInputs<'_>>,
    masking: &MaskingConfig,
) -> Result<SetupResult> {
    let prepared = build_setup(ds, setup, rationales, masking)?;
    evaluate_prepared(model, &prepared, setup)
}

pub fn save_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut out = String::new();
    for p in preds {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
