//! Stage-one heads and losses: the GRU token rationale head, the auxiliary
//! class head, their losses, and token-to-word pooling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var, BCE_CLAMP, CE_CLAMP};
use crate::corpus::TokenSeq;
use crate::encoder::{check_same_layout, linear};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamSet};

pub const DEFAULT_GRU_HIDDEN: usize = 128;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Unidirectional GRU over token embeddings followed by a sigmoid projection.
///
/// Gates use the fused layout `[reset | update | candidate]`:
/// `r = σ(x·Wi_r + bi_r + h·Wh_r + bh_r)`, `z` likewise,
/// `n = tanh(x·Wi_n + bi_n + r ⊙ (h·Wh_n + bh_n))`, `h' = (1 - z) ⊙ n + z ⊙ h`.
#[derive(Clone, Debug, PartialEq)]
pub struct RationaleHeadParams {
    pub hidden: usize,
    pub set: ParamSet,
}

const W_I: usize = 0;
const W_H: usize = 1;
const B_I: usize = 2;
const B_H: usize = 3;
const W_O: usize = 4;
const B_O: usize = 5;

impl RationaleHeadParams {
    pub fn init(d_model: usize, hidden: usize, seed: u64) -> Result<Self> {
        if d_model == 0 || hidden == 0 {
            return Err(Error::invalid("rationale.hidden", "dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        set.push_uniform(&mut rng, "gru.w_i", (d_model, 3 * hidden), d_model);
        set.push_uniform(&mut rng, "gru.w_h", (hidden, 3 * hidden), hidden);
        set.push_zeros("gru.b_i", (1, 3 * hidden));
        set.push_zeros("gru.b_h", (1, 3 * hidden));
        set.push_uniform(&mut rng, "out.w", (hidden, 1), hidden);
        set.push_zeros("out.b", (1, 1));
        Ok(Self { hidden, set })
    }

    pub fn from_set(d_model: usize, hidden: usize, set: ParamSet) -> Result<Self> {
        let fresh = Self::init(d_model, hidden, 0)?;
        check_same_layout(&fresh.set, &set, "rationale head")?;
        Ok(Self { hidden, set })
    }

    pub fn d_model(&self) -> usize {
        self.set.get(W_I).nrows()
    }

    /// `token_rows` is `n×d` (CLS excluded); returns an `n×1` column of probabilities.
    pub fn forward(&self, tape: &mut Tape, slot: u8, token_rows: Var) -> Var {
        let p = Binder::new(slot, &self.set);
        let h_dim = self.hidden;
        let n = tape.value(token_rows).nrows();
        let xw = linear(tape, &p, token_rows, W_I, B_I);
        let w_h = p.bind(tape, W_H);
        let b_h = p.bind(tape, B_H);
        let mut h = tape.constant(Mat::zeros((1, h_dim)));
        let mut states = Vec::with_capacity(n);
        for t in 0..n {
            let xt = tape.slice_rows(xw, t, 1);
            let hw = tape.matmul(h, w_h);
            let hw = tape.add_row(hw, b_h);
            let gate = |tape: &mut Tape, k: usize| {
                let a = tape.slice_cols(xt, k * h_dim, h_dim);
                let b = tape.slice_cols(hw, k * h_dim, h_dim);
                (a, b)
            };
            let (xr, hr) = gate(tape, 0);
            let r = tape.add(xr, hr);
            let r = tape.sigmoid(r);
            let (xz, hz) = gate(tape, 1);
            let z = tape.add(xz, hz);
            let z = tape.sigmoid(z);
            let (xn, hn) = gate(tape, 2);
            let rh = tape.mul(r, hn);
            let cand = tape.add(xn, rh);
            let cand = tape.tanh(cand);
            let diff = tape.sub(h, cand);
            let keep = tape.mul(z, diff);
            h = tape.add(cand, keep);
            states.push(h);
        }
        let all = tape.concat_rows(&states);
        let logits = linear(tape, &p, all, W_O, B_O);
        tape.sigmoid(logits)
    }
}

/// Linear projection to class logits followed by softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassHeadParams {
    pub set: ParamSet,
}

impl ClassHeadParams {
    pub fn init(d_model: usize, n_classes: usize, seed: u64) -> Result<Self> {
        if d_model == 0 || n_classes == 0 {
            return Err(Error::invalid("class_head", "dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        set.push_uniform(&mut rng, "w", (d_model, n_classes), d_model);
        set.push_zeros("b", (1, n_classes));
        Ok(Self { set })
    }

    pub fn from_set(d_model: usize, n_classes: usize, set: ParamSet) -> Result<Self> {
        let fresh = Self::init(d_model, n_classes, 0)?;
        check_same_layout(&fresh.set, &set, "class head")?;
        Ok(Self { set })
    }

    pub fn n_classes(&self) -> usize {
        self.set.get(0).ncols()
    }

    /// `1×d` representation to a `1×L` distribution.
    pub fn forward(&self, tape: &mut Tape, slot: u8, rep: Var) -> Var {
        let p = Binder::new(slot, &self.set);
        let logits = linear(tape, &p, rep, 0, 1);
        tape.softmax_rows(logits)
    }
}

/// Inference-mode rationale probabilities for `token_embs` with the CLS row removed.
pub fn rationale_forward(head: &RationaleHeadParams, token_embs: &Mat) -> Result<Vec<f64>> {
    if token_embs.nrows() == 0 {
        return Err(Error::invalid("tokens", "empty token sequence"));
    }
    if token_embs.ncols() != head.d_model() {
        return Err(Error::invalid(
            "tokens",
            format!("embedding width {}, head expects {}", token_embs.ncols(), head.d_model()),
        ));
    }
    let mut tape = Tape::new();
    let x = tape.constant(token_embs.clone());
    let probs = head.forward(&mut tape, 0, x);
    Ok(tape.value(probs).iter().copied().collect())
}

/// Inference-mode class distribution for a `1×d` (or length-d) representation.
pub fn class_forward(head: &ClassHeadParams, rep: &Mat) -> Vec<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(rep.clone().into_shape_with_order((1, rep.len())).expect("row vector"));
    let probs = head.forward(&mut tape, 0, x);
    tape.value(probs).iter().copied().collect()
}

/// Per-token weights `n / n_{y_j}` where `n_{y_j}` counts tokens sharing `y_j`.
pub fn bce_weights(labels: &[u8]) -> Vec<f64> {
    let n = labels.len() as f64;
    let ones = labels.iter().filter(|&&y| y == 1).count() as f64;
    let zeros = n - ones;
    labels
        .iter()
        .map(|&y| if y == 1 { n / ones } else { n / zeros })
        .collect()
}

/// Class-balanced binary log-loss over one instance's tokens.
pub fn weighted_bce_loss(token_probs: &[f64], token_labels: &[u8]) -> Result<f64> {
    if token_probs.len() != token_labels.len() {
        return Err(Error::invalid(
            "token_labels",
            format!("{} probabilities for {} labels", token_probs.len(), token_labels.len()),
        ));
    }
    if token_probs.is_empty() {
        return Err(Error::invalid("tokens", "empty token sequence"));
    }
    let weights = bce_weights(token_labels);
    let mut loss = 0.0;
    for ((&p, &y), w) in token_probs.iter().zip(token_labels).zip(weights) {
        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let y = f64::from(y);
        loss -= w * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    Ok(loss)
}

pub fn cross_entropy_loss(dist: &[f64], gold: usize) -> Result<f64> {
    let p = dist
        .get(gold)
        .ok_or_else(|| Error::invalid("label", format!("class {gold} outside {} classes", dist.len())))?;
    Ok(-p.max(CE_CLAMP).ln())
}

pub fn combined_loss(loss_l: f64, loss_r: f64, alpha: f64) -> f64 {
    debug_assert!(alpha >= 0.0);
    loss_l + alpha * loss_r
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_l: f64,
    pub loss_r: f64,
    pub alpha: f64,
    pub combined: f64,
}

impl LossBreakdown {
    pub fn new(loss_l: f64, loss_r: f64, alpha: f64) -> Self {
        Self {
            loss_l,
            loss_r,
            alpha,
            combined: combined_loss(loss_l, loss_r, alpha),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RationalePrediction {
    pub token_probs: Vec<f64>,
    pub token_labels: Vec<u8>,
    pub word_probs: Vec<f64>,
    pub word_labels: Vec<u8>,
    pub threshold: f64,
}

/// Word probability is the max over the word's tokens; labels threshold at `threshold`.
pub fn pool_tokens_to_words(token_probs: &[f64], tokens: &TokenSeq, threshold: f64) -> Result<RationalePrediction> {
    if token_probs.len() != tokens.n() {
        return Err(Error::invalid(
            "token_probs",
            format!("{} probabilities for {} tokens", token_probs.len(), tokens.n()),
        ));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("threshold", format!("{threshold} not in (0, 1)")));
    }
    let word_probs: Vec<f64> = tokens
        .word_spans()
        .into_iter()
        .map(|span| token_probs[span].iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let label = |p: f64| u8::from(p >= threshold);
    Ok(RationalePrediction {
        token_probs: token_probs.to_vec(),
        token_labels: token_probs.iter().map(|&p| label(p)).collect(),
        word_labels: word_probs.iter().map(|&p| label(p)).collect(),
        word_probs,
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize_words, Vocab};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_rows(n: usize, d: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn probabilities_have_shape_and_range() {
        let head = RationaleHeadParams::init(8, 16, 3).unwrap();
        let probs = rationale_forward(&head, &random_rows(5, 8, 1)).unwrap();
        assert_eq!(probs.len(), 5);
        assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn zero_weights_give_one_half() {
        let mut head = RationaleHeadParams::init(8, 16, 3).unwrap();
        head.set.zero_all();
        let probs = rationale_forward(&head, &random_rows(4, 8, 2)).unwrap();
        assert!(probs.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn gru_is_order_sensitive() {
        let head = RationaleHeadParams::init(8, 16, 4).unwrap();
        let x = random_rows(4, 8, 3);
        let mut reversed = x.clone();
        reversed.invert_axis(ndarray::Axis(0));
        let fwd = rationale_forward(&head, &x).unwrap();
        let mut rev = rationale_forward(&head, &reversed).unwrap();
        rev.reverse();
        assert_ne!(fwd, rev);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let head = RationaleHeadParams::init(8, 16, 4).unwrap();
        assert!(rationale_forward(&head, &Mat::zeros((0, 8))).is_err());
    }

    #[test]
    fn weighted_bce_worked_example() {
        let loss = weighted_bce_loss(&[0.9, 0.1, 0.2, 0.8], &[1, 0, 0, 1]).unwrap();
        // 2 * (2 * -ln 0.9 + 2 * -ln 0.8)
        let oracle = 2.0 * (2.0 * -(0.9f64).ln() + 2.0 * -(0.8f64).ln());
        assert!((loss - oracle).abs() < 1e-12);
        // five-digit logs sum to 1.31400; full precision is 1.3140159...
        assert!((loss - 1.314016).abs() < 1e-6);
    }

    #[test]
    fn weighted_bce_near_zero_at_perfect_predictions() {
        let labels = [1, 0, 0, 0, 1];
        let probs: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();
        let loss = weighted_bce_loss(&probs, &labels).unwrap();
        let n = 5.0;
        assert!(loss >= 0.0);
        assert!(loss <= n * (n / 2.0) * 1.2e-7);
    }

    #[test]
    fn weighted_bce_all_ones_is_plain_nll() {
        let probs = [0.7, 0.4, 0.9];
        let loss = weighted_bce_loss(&probs, &[1, 1, 1]).unwrap();
        let nll: f64 = probs.iter().map(|p: &f64| -p.ln()).sum();
        assert!((loss - nll).abs() < 1e-12);
    }

    #[test]
    fn weighted_bce_length_mismatch() {
        assert!(weighted_bce_loss(&[0.5], &[1, 0]).is_err());
    }

    #[test]
    fn class_head_zero_weights_uniform() {
        let mut head = ClassHeadParams::init(8, 5, 1).unwrap();
        head.set.zero_all();
        let dist = class_forward(&head, &random_rows(1, 8, 0));
        assert_eq!(dist.len(), 5);
        assert!(dist.iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn softmax_shift_invariance() {
        let head = ClassHeadParams::init(8, 5, 1).unwrap();
        let rep = random_rows(1, 8, 5);
        let base = class_forward(&head, &rep);
        let mut shifted = head.clone();
        shifted.set.get_mut(1).mapv_inplace(|b| b + 37.5);
        let moved = class_forward(&shifted, &rep);
        assert!((base.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (a, b) in base.iter().zip(&moved) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_entropy_values() {
        assert_eq!(cross_entropy_loss(&[0.0, 1.0], 1).unwrap(), 0.0);
        let uniform = cross_entropy_loss(&[0.2; 5], 3).unwrap();
        assert!((uniform - 1.60944).abs() < 1e-5);
        assert!((cross_entropy_loss(&[0.5, 0.5], 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(cross_entropy_loss(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn combined_loss_values() {
        assert_eq!(combined_loss(0.7, 3.0, 0.0), 0.7);
        assert!((combined_loss(1.0, 2.0, 0.09) - 1.18).abs() < 1e-12);
        assert_eq!(combined_loss(0.0, 0.0, 1.0), 0.0);
        let b = LossBreakdown::new(1.0, 2.0, 0.09);
        assert_eq!(b.combined, combined_loss(1.0, 2.0, 0.09));
    }

    fn seq(words: &[&str]) -> TokenSeq {
        let ws: Vec<String> = words.iter().map(|s| s.to_string()).collect();
        tokenize_words(&ws, &Vocab::new()).unwrap()
    }

    #[test]
    fn max_pooling_rule() {
        let t = seq(&["abcdefghijklmn", "x"]);
        let pred = pool_tokens_to_words(&[0.2, 0.7, 0.1], &t, 0.5).unwrap();
        assert_eq!(pred.word_labels, vec![1, 0]);
        assert_eq!(pred.word_probs, vec![0.7, 0.1]);
        assert_eq!(pred.token_labels, vec![0, 1, 0]);
        let low = pool_tokens_to_words(&[0.2, 0.3, 0.1], &t, 0.5).unwrap();
        assert_eq!(low.word_labels, vec![0, 0]);
    }

    proptest! {
        #[test]
        fn balanced_labels_double_the_nll(
            probs in prop::collection::vec(0.01f64..0.99, 2..20),
            seed in any::<u64>(),
        ) {
            let n = probs.len() / 2 * 2;
            let probs = &probs[..n];
            let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 0)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
            let nll: f64 = probs.iter().zip(&labels)
                .map(|(&p, &y)| if y == 1 { -p.ln() } else { -(1.0 - p).ln() })
                .sum();
            let loss = weighted_bce_loss(probs, &labels).unwrap();
            prop_assert!(loss >= 0.0);
            prop_assert!((loss - 2.0 * nll).abs() < 1e-9 * (1.0 + nll));
        }

        #[test]
        fn pooling_matches_brute_force(
            lens in prop::collection::vec(1usize..30, 1..12),
            seed in any::<u64>(),
            threshold in 0.05f64..0.95,
        ) {
            let words: Vec<String> = lens.iter().map(|&l| "q".repeat(l)).collect();
            let t = tokenize_words(&words, &Vocab::new()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let probs: Vec<f64> = (0..t.n()).map(|_| rng.random()).collect();
            let pred = pool_tokens_to_words(&probs, &t, threshold).unwrap();
            // brute force: for each word scan all tokens
            for w in 0..words.len() {
                let best = (0..t.n()).filter(|&j| t.word_of(j) == w).map(|j| probs[j]).fold(0.0, f64::max);
                prop_assert_eq!(pred.word_probs[w], best);
                prop_assert_eq!(pred.word_labels[w], u8::from(best >= threshold));
            }
        }

        #[test]
        fn raising_threshold_never_adds_rationale(
            probs in prop::collection::vec(0.0f64..1.0, 1..15),
            lo in 0.05f64..0.9,
            delta in 0.0f64..0.09,
        ) {
            let words: Vec<String> = (0..probs.len()).map(|i| format!("w{i}")).collect();
            let t = tokenize_words(&words, &Vocab::new()).unwrap();
            let a = pool_tokens_to_words(&probs, &t, lo).unwrap();
            let b = pool_tokens_to_words(&probs, &t, lo + delta).unwrap();
            for (x, y) in a.word_labels.iter().zip(&b.word_labels) {
                prop_assert!(y <= x);
            }
        }
    }
}
