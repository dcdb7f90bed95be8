//! Finite-difference verification of analytic gradients.

use serde::{Deserialize, Serialize};

use super::{compute_gradients, Trainable};
use crate::autograd::Tape;
use crate::corpus::{synth_generate, Instance, SynthConfig};
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::extractor::ExtractorModel;

/// Finite-difference step.
pub const EPS: f64 = 1e-4;
/// Denominator floor of the relative error.
pub const FLOOR: f64 = 1e-6;
/// Rationale head width used by [`standard_gradcheck`].
pub const CHECK_HIDDEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub eps: f64,
    pub floor: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn batch_loss<M: Trainable>(model: &M, batch: &[&Instance], alpha: f64) -> Result<f64> {
    let mut total = 0.0;
    for inst in batch {
        let mut tape = Tape::new();
        let loss = model.loss(&mut tape, inst, alpha, None)?;
        total += tape.scalar(loss);
    }
    Ok(total / batch.len() as f64)
}

/// Compares every gradient entry against a central difference with step `eps`.
pub fn gradcheck<M: Trainable>(
    model: &mut M,
    batch: &[&Instance],
    alpha: f64,
    eps: f64,
    floor: f64,
) -> Result<GradcheckReport> {
    let (grads, _) = compute_gradients(model, batch, alpha, None, false)?;
    let names: Vec<Vec<String>> = model
        .sets()
        .iter()
        .map(|s| s.iter().map(|p| p.name.clone()).collect())
        .collect();
    let mut tensors = Vec::new();
    for (s, set_grads) in grads.sets.iter().enumerate() {
        for (t, g) in set_grads.iter().enumerate() {
            let mut check = TensorCheck {
                name: format!("{s}.{}", names[s][t]),
                entries: g.len(),
                max_rel_err: 0.0,
                max_abs_err: 0.0,
            };
            for (idx, &analytic) in g.indexed_iter() {
                let original = model.sets()[s].get(t)[idx];
                model.sets_mut()[s].get_mut(t)[idx] = original + eps;
                let plus = batch_loss(model, batch, alpha)?;
                model.sets_mut()[s].get_mut(t)[idx] = original - eps;
                let minus = batch_loss(model, batch, alpha)?;
                model.sets_mut()[s].get_mut(t)[idx] = original;
                let numeric = (plus - minus) / (2.0 * eps);
                check.max_rel_err = check.max_rel_err.max(rel_err(analytic, numeric, floor));
                check.max_abs_err = check.max_abs_err.max((analytic - numeric).abs());
            }
            tensors.push(check);
        }
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        eps,
        floor,
        tensors,
        max_rel_err,
    })
}

/// Stage-one model with `d_model = 8`, one layer and two heads, checked on
/// the combined loss over two synthetic instances.
pub fn standard_gradcheck(seed: u64, alpha: f64) -> Result<GradcheckReport> {
    let ds = synth_generate(&SynthConfig {
        n_instances: 2,
        vocab_size: 60,
        words_per_instance: 5,
        grid_rows: 2,
        grid_cols: 2,
        p: 2,
        c: 3,
        seed,
        ..SynthConfig::default()
    })?;
    let cfg = EncoderConfig {
        vocab_size: ds.vocab.len(),
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        ff_dim: 16,
        max_tokens: 16,
        max_patches: 4,
        patch_input_dim: 12,
        dropout_rate: 0.0,
    };
    let mut model = ExtractorModel::init(&cfg, CHECK_HIDDEN, ds.labels.clone(), ds.vocab.clone(), seed)?;
    let batch: Vec<&Instance> = ds.instances.iter().collect();
    gradcheck(&mut model, &batch, alpha, EPS, FLOOR)
}
