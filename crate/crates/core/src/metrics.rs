//! Classification, plausibility and faithfulness metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::LabelSpace;
use crate::error::{Error, Result};
use crate::masking::top_indices;
use crate::transport::Heatmap;

/// Per-class F1 over every class in the space; classes never predicted and
/// never gold score 0.
pub fn per_class_f1(preds: &[usize], golds: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    if preds.len() != golds.len() {
        return Err(Error::invalid(
            "predictions",
            format!("{} predictions for {} gold labels", preds.len(), golds.len()),
        ));
    }
    if preds.is_empty() {
        return Err(Error::invalid("predictions", "no instances"));
    }
    if let Some(&bad) = preds.iter().chain(golds).find(|&&c| c >= n_classes) {
        return Err(Error::invalid("label", format!("class {bad} outside {n_classes} classes")));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &g) in preds.iter().zip(golds) {
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    Ok((0..n_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect())
}

pub fn macro_f1(preds: &[usize], golds: &[usize], labels: &LabelSpace) -> Result<f64> {
    let f1 = per_class_f1(preds, golds, labels.len())?;
    Ok(f1.iter().sum::<f64>() / f1.len() as f64)
}

/// Word-level micro F1 of predicted against gold rationale words over the whole corpus.
pub fn token_f1(pred: &[Vec<u8>], gold: &[Vec<u8>]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::invalid(
            "rationales",
            format!("{} predicted for {} gold instances", pred.len(), gold.len()),
        ));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::invalid(
                "rationales",
                format!("instance {i}: {} predicted labels for {} words", p.len(), g.len()),
            ));
        }
        for (&a, &b) in p.iter().zip(g) {
            match (a, b) {
                (1, 1) => tp += 1,
                (1, _) => fp += 1,
                (_, 1) => fn_ += 1,
                _ => {}
            }
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 })
}

/// `perf(X) - perf(X\R)`.
pub fn comprehensiveness(perf_x: f64, perf_x_minus_r: f64) -> f64 {
    perf_x - perf_x_minus_r
}

/// `perf(X) - perf(R)`.
pub fn sufficiency(perf_x: f64, perf_r: f64) -> f64 {
    perf_x - perf_r
}

/// Share of the top-`k` patches by `h` (lower index first on ties) that are gold.
pub fn patch_precision_at_k(h: &Heatmap, gold: &[usize], k: usize) -> Result<f64> {
    if k == 0 || k > h.len() {
        return Err(Error::invalid("k", format!("{k} not in 1..={}", h.len())));
    }
    if gold.is_empty() {
        return Err(Error::invalid("gold", "empty gold patch set"));
    }
    let hits = top_indices(&h.h, k).into_iter().filter(|i| gold.contains(i)).count();
    Ok(hits as f64 / k as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Macro-F1 per evaluated setup (`X`, `R`, `XR`, `text-only`, `image-only`).
    pub macro_f1: BTreeMap<String, f64>,
    /// Per-class F1 per setup.
    pub per_class_f1: BTreeMap<String, BTreeMap<String, f64>>,
    pub token_f1: Option<f64>,
    pub comprehensiveness: Option<f64>,
    pub sufficiency: Option<f64>,
    pub patch_precision_at_k: Option<f64>,
    pub counts: BTreeMap<String, usize>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Fixed-width plain-text summary.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<28}{:>10}", "metric", "value");
        let _ = writeln!(out, "{}", "-".repeat(38));
        for (setup, v) in &self.macro_f1 {
            let _ = writeln!(out, "{:<28}{:>10.4}", format!("macro_f1[{setup}]"), v);
        }
        let optional = [
            ("token_f1", self.token_f1),
            ("comprehensiveness", self.comprehensiveness),
            ("sufficiency", self.sufficiency),
            ("patch_precision_at_k", self.patch_precision_at_k),
        ];
        for (name, v) in optional {
            if let Some(v) = v {
                let _ = writeln!(out, "{name:<28}{v:>10.4}");
            }
        }
        for (name, n) in &self.counts {
            let _ = writeln!(out, "{:<28}{:>10}", format!("count[{name}]"), n);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn space(n: usize) -> LabelSpace {
        LabelSpace::with_size(n).unwrap()
    }

    #[test]
    fn perfect_macro_f1() {
        let g: Vec<usize> = (0..10).map(|i| i % 5).collect();
        assert_eq!(macro_f1(&g, &g, &space(5)).unwrap(), 1.0);
    }

    #[test]
    fn two_class_worked_example() {
        let f = macro_f1(&[0, 1, 1, 1], &[0, 0, 1, 1], &space(2)).unwrap();
        // F1_A = 2/3, F1_B = 4/5
        assert!((f - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        assert!((f - 0.73333).abs() < 1e-5);
    }

    #[test]
    fn absent_class_counts_as_zero() {
        assert_eq!(macro_f1(&[0, 1], &[0, 1], &space(4)).unwrap(), 0.5);
    }

    #[test]
    fn label_outside_space_is_rejected() {
        assert!(macro_f1(&[0, 5], &[0, 1], &space(5)).is_err());
        assert!(macro_f1(&[], &[], &space(5)).is_err());
    }

    #[test]
    fn token_f1_examples() {
        let g = vec![vec![0, 0, 0, 1, 1, 1, 0, 0]];
        let p = vec![vec![0, 0, 0, 0, 1, 1, 1, 0]];
        assert!((token_f1(&p, &g).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(token_f1(&g, &g).unwrap(), 1.0);
        assert_eq!(token_f1(&[vec![0, 0]], &[vec![0, 0]]).unwrap(), 1.0);
        assert!(token_f1(&[vec![0]], &[vec![0, 1]]).is_err());
    }

    #[test]
    fn faithfulness_arithmetic() {
        assert!((comprehensiveness(0.822, 0.308) - 0.514).abs() < 1e-12);
        assert!((sufficiency(0.822, 0.750) - 0.072).abs() < 1e-12);
        assert_eq!(comprehensiveness(1.0, 0.0), 1.0);
        assert!(sufficiency(0.5, 0.7) < 0.0);
    }

    #[test]
    fn patch_precision_examples() {
        let h = Heatmap { h: vec![0.1, 0.9, 0.2, 0.8] };
        assert_eq!(patch_precision_at_k(&h, &[1, 3], 2).unwrap(), 1.0);
        let flat = Heatmap { h: vec![0.5; 10] };
        assert_eq!(patch_precision_at_k(&flat, &[5], 1).unwrap(), 0.0);
        assert_eq!(patch_precision_at_k(&flat, &[5, 7], 10).unwrap(), 0.2);
        assert!(patch_precision_at_k(&flat, &[5], 0).is_err());
    }

    #[test]
    fn report_serializes() {
        let mut r = EvalReport::default();
        r.macro_f1.insert("X".into(), 0.9);
        r.token_f1 = Some(0.8);
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_table().contains("macro_f1[X]"));
    }

    proptest! {
        #[test]
        fn self_differences_are_zero(x in 0.0f64..1.0) {
            prop_assert_eq!(comprehensiveness(x, x), 0.0);
            prop_assert_eq!(sufficiency(x, x), 0.0);
        }

        #[test]
        fn permutation_invariance(
            pairs in prop::collection::vec((0usize..4, 0usize..4, prop::collection::vec(0u8..2, 3)), 1..40),
            rot in 0usize..40,
        ) {
            let preds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let golds: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let pr: Vec<Vec<u8>> = pairs.iter().map(|p| p.2.clone()).collect();
            let gr: Vec<Vec<u8>> = pairs.iter().rev().map(|p| p.2.clone()).collect();
            let k = rot % pairs.len();
            let rotate = |v: &[usize]| [&v[k..], &v[..k]].concat();
            let rotate_r = |v: &[Vec<u8>]| [&v[k..], &v[..k]].concat();
            let a = macro_f1(&preds, &golds, &space(4)).unwrap();
            let b = macro_f1(&rotate(&preds), &rotate(&golds), &space(4)).unwrap();
            prop_assert_eq!(a, b);
            let a = token_f1(&pr, &gr).unwrap();
            let b = token_f1(&rotate_r(&pr), &rotate_r(&gr)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
