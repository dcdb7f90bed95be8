//! The stage-one model (encoder with rationale and class heads) and the
//! extraction step that turns its predictions into rationale and heatmap dumps.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::corpus::{word_labels_to_token_labels, Dataset, Instance, LabelSpace, Vocab};
use crate::encoder::{encode, init_encoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rationale::{
    bce_weights, class_forward, pool_tokens_to_words, rationale_forward, ClassHeadParams, RationaleHeadParams,
    RationalePrediction,
};
use crate::transport::{transfer_rationale, Heatmap, IpotConfig};

pub const ENCODER_SLOT: u8 = 0;
pub const RATIONALE_SLOT: u8 = 1;
pub const CLASS_SLOT: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorModel {
    pub encoder: EncoderParams,
    pub rationale: RationaleHeadParams,
    pub class_head: ClassHeadParams,
    pub labels: LabelSpace,
    pub vocab: Vocab,
}

/// Stage-one output for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorOutput {
    pub rationale: RationalePrediction,
    pub class_probs: Vec<f64>,
    pub pred_class: usize,
}

impl ExtractorModel {
    /// Fresh model; the three parts draw from independent seeds derived from `seed`.
    pub fn init(cfg: &EncoderConfig, rationale_hidden: usize, labels: LabelSpace, vocab: Vocab, seed: u64) -> Result<Self> {
        if cfg.vocab_size != vocab.len() {
            return Err(Error::invalid(
                "encoder.vocab_size",
                format!("{} does not match the {}-entry vocabulary", cfg.vocab_size, vocab.len()),
            ));
        }
        Ok(Self {
            encoder: init_encoder(cfg, seed)?,
            rationale: RationaleHeadParams::init(cfg.d_model, rationale_hidden, seed.wrapping_add(1))?,
            class_head: ClassHeadParams::init(cfg.d_model, labels.len(), seed.wrapping_add(2))?,
            labels,
            vocab,
        })
    }

    /// Combined loss `L_l + alpha·L_r` for one instance with gold rationales.
    pub fn record_loss(
        &self,
        tape: &mut Tape,
        inst: &Instance,
        alpha: f64,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let gold = inst
            .gold_rationale
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("instance {}", inst.id), "no gold rationale"))?;
        let token_labels = word_labels_to_token_labels(gold, &inst.tokens)?;
        let labels: Vec<u8> = token_labels[1..].to_vec();
        let weights = bce_weights(&labels);
        let labels: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();

        let enc = self.encoder.forward(tape, ENCODER_SLOT, &inst.tokens, &inst.patches, dropout)?;
        let rows = tape.slice_rows(enc.tokens, 1, inst.tokens.n());
        let probs = self.rationale.forward(tape, RATIONALE_SLOT, rows);
        let loss_r = tape.weighted_bce(probs, &labels, &weights);
        let dist = self.class_head.forward(tape, CLASS_SLOT, enc.pooler);
        let loss_l = tape.neg_log_at(dist, inst.label);
        let scaled = tape.scale(loss_r, alpha);
        Ok(tape.add(loss_l, scaled))
    }

    pub fn predict(&self, inst: &Instance, threshold: f64) -> Result<ExtractorOutput> {
        let emb = encode(&self.encoder, &inst.tokens, &inst.patches)?;
        let n = inst.tokens.n();
        let token_probs = rationale_forward(&self.rationale, &emb.token_embs.slice(ndarray::s![1..=n, ..]).to_owned())?;
        let rationale = pool_tokens_to_words(&token_probs, &inst.tokens, threshold)?;
        let class_probs = class_forward(&self.class_head, &emb.pooler);
        Ok(ExtractorOutput {
            pred_class: argmax(&class_probs),
            class_probs,
            rationale,
        })
    }

    pub fn param_sets(&self) -> [&ParamSet; 3] {
        [&self.encoder.set, &self.rationale.set, &self.class_head.set]
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Everything stage two needs about one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractRecord {
    pub id: String,
    pub pred_class: usize,
    pub rationale: RationalePrediction,
    pub rows: usize,
    pub cols: usize,
    pub heatmap: Heatmap,
}

/// Rationales and heatmaps for every instance, in dataset order.
pub fn extract(model: &ExtractorModel, ds: &Dataset, ipot: &IpotConfig, threshold: f64) -> Result<Vec<ExtractRecord>> {
    ds.instances
        .iter()
        .map(|inst| extract_one(model, inst, ipot, threshold))
        .collect()
}

pub fn extract_one(model: &ExtractorModel, inst: &Instance, ipot: &IpotConfig, threshold: f64) -> Result<ExtractRecord> {
    let emb = encode(&model.encoder, &inst.tokens, &inst.patches)?;
    let n = inst.tokens.n();
    let token_embs = emb.token_embs.slice(ndarray::s![1..=n, ..]).to_owned();
    let token_probs = rationale_forward(&model.rationale, &token_embs)?;
    let rationale = pool_tokens_to_words(&token_probs, &inst.tokens, threshold)?;
    let class_probs = class_forward(&model.class_head, &emb.pooler);
    let patch_embs = emb.patch_embs.slice(ndarray::s![1.., ..]).to_owned();
    let heatmap = transfer_rationale(&patch_embs, &token_embs, &rationale.token_labels, ipot)?;
    Ok(ExtractRecord {
        id: inst.id.clone(),
        pred_class: argmax(&class_probs),
        rationale,
        rows: inst.patches.rows,
        cols: inst.patches.cols,
        heatmap,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RationaleRecord {
    pub id: String,
    pub word_probs: Vec<f64>,
    pub word_labels: Vec<u8>,
    pub pred_class: String,
}

pub fn save_rationales(path: &Path, records: &[ExtractRecord], labels: &LabelSpace) -> Result<()> {
    let mut out = String::new();
    for r in records {
        let rec = RationaleRecord {
            id: r.id.clone(),
            word_probs: r.rationale.word_probs.clone(),
            word_labels: r.rationale.word_labels.clone(),
            pred_class: labels.name(r.pred_class).to_string(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_rationales(path: &Path) -> Result<Vec<RationaleRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RationaleRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.word_probs.len() != rec.word_labels.len() || rec.word_labels.iter().any(|&v| v > 1) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("inconsistent rationale record for {}", rec.id),
            });
        }
        out.push(rec);
    }
    Ok(out)
}
