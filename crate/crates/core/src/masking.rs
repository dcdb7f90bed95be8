//! Building the rationale-only (R) and non-rationale (X\R) inputs.

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Instance, PatchGrid, MASK_TOKEN};
use crate::error::{Error, Result};
use crate::transport::Heatmap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MaskMode {
    /// Keep rationale words and attenuate patches by `h`.
    KeepRationale,
    /// Keep non-rationale words and attenuate patches by `1 - h`.
    KeepComplement,
}

impl MaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::KeepRationale => "KEEP_RATIONALE",
            MaskMode::KeepComplement => "KEEP_COMPLEMENT",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    /// Word-level rationale threshold.
    pub threshold: f64,
    /// When set, heatmaps are binarized to this top fraction of patches before masking.
    pub top_fraction: Option<f64>,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            top_fraction: None,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid("masking.threshold", "must be in (0, 1)"));
        }
        if let Some(f) = self.top_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::invalid("masking.top_fraction", "must be in (0, 1]"));
            }
        }
        Ok(())
    }
}

pub fn mask_text(words: &[String], labels: &[u8], mode: MaskMode) -> Result<Vec<String>> {
    if words.len() != labels.len() {
        return Err(Error::invalid(
            "word_labels",
            format!("{} labels for {} words", labels.len(), words.len()),
        ));
    }
    let keep = match mode {
        MaskMode::KeepRationale => 1,
        MaskMode::KeepComplement => 0,
    };
    Ok(words
        .iter()
        .zip(labels)
        .map(|(w, &y)| if y == keep { w.clone() } else { MASK_TOKEN.to_string() })
        .collect())
}

/// Patch `k` becomes `h_k·x` (rationale) or `x - h_k·x` (complement); the
/// complement is formed by subtraction so the two outputs add back to `x`.
pub fn mask_patches(grid: &PatchGrid, h: &Heatmap, mode: MaskMode) -> Result<PatchGrid> {
    if h.len() != grid.m() {
        return Err(Error::invalid(
            "heatmap",
            format!("{} scores for {} patches", h.len(), grid.m()),
        ));
    }
    let mut out = grid.clone();
    for (k, &hk) in h.h.iter().enumerate() {
        for v in out.patch_mut(k) {
            let kept = hk * *v;
            *v = match mode {
                MaskMode::KeepRationale => kept,
                MaskMode::KeepComplement => *v - kept,
            };
        }
    }
    Ok(out)
}

/// Marks the `ceil(fraction·m)` highest-scoring patches with 1; ties go to the lower index.
pub fn top_fraction_binarize(h: &Heatmap, fraction: f64) -> Result<Heatmap> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("fraction", format!("{fraction} not in (0, 1]")));
    }
    let m = h.len();
    let keep = ((fraction * m as f64).ceil() as usize).min(m);
    let mut out = vec![0.0; m];
    for k in top_indices(&h.h, keep) {
        out[k] = 1.0;
    }
    Ok(Heatmap { h: out })
}

/// Indices of the `k` largest values, ordered by value descending then index ascending.
pub fn top_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Masked copy of one instance. Gold annotations are carried over unchanged.
pub fn mask_instance(
    inst: &Instance,
    word_labels: &[u8],
    h: &Heatmap,
    mode: MaskMode,
    vocab: &crate::corpus::Vocab,
) -> Result<Instance> {
    let words = mask_text(&inst.words, word_labels, mode)?;
    let patches = mask_patches(&inst.patches, h, mode)?;
    inst.with_inputs(words, patches, vocab)
}

/// Rationale inputs for every instance of a dataset, matched by position.
pub struct RationaleInputs<'a> {
    pub word_labels: &'a [Vec<u8>],
    pub heatmaps: &'a [Heatmap],
}

pub fn mask_dataset(ds: &Dataset, inputs: &RationaleInputs<'_>, mode: MaskMode, cfg: &MaskingConfig) -> Result<Dataset> {
    if inputs.word_labels.len() != ds.len() || inputs.heatmaps.len() != ds.len() {
        return Err(Error::invalid(
            "rationales",
            format!(
                "{} rationale / {} heatmap records for {} instances",
                inputs.word_labels.len(),
                inputs.heatmaps.len(),
                ds.len()
            ),
        ));
    }
    let mut instances = Vec::with_capacity(ds.len());
    for ((inst, labels), h) in ds.instances.iter().zip(inputs.word_labels).zip(inputs.heatmaps) {
        let h = match cfg.top_fraction {
            Some(f) => top_fraction_binarize(h, f)?,
            None => h.clone(),
        };
        instances.push(mask_instance(inst, labels, &h, mode, &ds.vocab)?);
    }
    Ok(Dataset {
        instances,
        labels: ds.labels.clone(),
        vocab: ds.vocab.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn earthquake_example() {
        let w = words("Pics from Iran 204 person killed and 1600 injured by #earthquake");
        let labels = [0, 0, 0, 1, 1, 1, 1, 1, 1, 0, 0];
        let r = mask_text(&w, &labels, MaskMode::KeepRationale).unwrap().join(" ");
        let c = mask_text(&w, &labels, MaskMode::KeepComplement).unwrap().join(" ");
        assert_eq!(r, "* * * 204 person killed and 1600 injured * *");
        assert_eq!(c, "Pics from Iran * * * * * * by #earthquake");
    }

    #[test]
    fn all_rationale_is_identity() {
        let w = words("a b c");
        assert_eq!(mask_text(&w, &[1, 1, 1], MaskMode::KeepRationale).unwrap(), w);
        assert!(mask_text(&w, &[1, 1], MaskMode::KeepRationale).is_err());
    }

    fn grid(rng: &mut ChaCha8Rng, m: usize) -> PatchGrid {
        let data = (0..m * 4).map(|_| f64::from(rng.random::<f32>())).collect();
        PatchGrid::new(2, 1, 1, m, data).unwrap()
    }

    #[test]
    fn patch_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = grid(&mut rng, 5);
        let ones = Heatmap { h: vec![1.0; 5] };
        assert_eq!(mask_patches(&g, &ones, MaskMode::KeepRationale).unwrap(), g);
        let zero = mask_patches(&g, &Heatmap::zeros(5), MaskMode::KeepRationale).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));
        assert!(mask_patches(&g, &Heatmap::zeros(4), MaskMode::KeepRationale).is_err());
    }

    #[test]
    fn binarize_examples() {
        let h = |v: &[f64]| Heatmap { h: v.to_vec() };
        assert_eq!(top_fraction_binarize(&h(&[0.2, 0.9, 0.0]), 1.0).unwrap().h, vec![1.0; 3]);
        assert_eq!(
            top_fraction_binarize(&h(&[0.9, 0.1, 0.5, 0.5]), 0.25).unwrap().h,
            vec![1.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(
            top_fraction_binarize(&h(&[0.5; 4]), 0.5).unwrap().h,
            vec![1.0, 1.0, 0.0, 0.0]
        );
        assert!(top_fraction_binarize(&h(&[0.5]), 0.0).is_err());
    }

    proptest! {
        #[test]
        fn stars_partition_positions(labels in prop::collection::vec(0u8..2, 1..30)) {
            let w: Vec<String> = (0..labels.len()).map(|i| format!("w{i}")).collect();
            let r = mask_text(&w, &labels, MaskMode::KeepRationale).unwrap();
            let c = mask_text(&w, &labels, MaskMode::KeepComplement).unwrap();
            for i in 0..w.len() {
                prop_assert!((r[i] == MASK_TOKEN) != (c[i] == MASK_TOKEN));
                prop_assert!(r[i] == w[i] || c[i] == w[i]);
            }
        }

        #[test]
        fn rationale_plus_complement_is_the_input(seed in any::<u64>(), m in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = grid(&mut rng, m);
            let h = Heatmap { h: (0..m).map(|_| rng.random::<f64>()).collect() };
            let r = mask_patches(&g, &h, MaskMode::KeepRationale).unwrap();
            let c = mask_patches(&g, &h, MaskMode::KeepComplement).unwrap();
            for i in 0..g.data.len() {
                prop_assert_eq!(r.data[i] + c.data[i], g.data[i]);
            }
        }

        #[test]
        fn binary_masking_is_idempotent(seed in any::<u64>(), m in 1usize..20, frac in 0.05f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = grid(&mut rng, m);
            let h = Heatmap { h: (0..m).map(|_| rng.random::<f64>()).collect() };
            let b = top_fraction_binarize(&h, frac).unwrap();
            for mode in [MaskMode::KeepRationale, MaskMode::KeepComplement] {
                let once = mask_patches(&g, &b, mode).unwrap();
                prop_assert_eq!(&mask_patches(&once, &b, mode).unwrap(), &once);
            }
            let w: Vec<String> = (0..m).map(|i| format!("w{i}")).collect();
            let labels: Vec<u8> = b.h.iter().map(|&v| v as u8).collect();
            let once = mask_text(&w, &labels, MaskMode::KeepRationale).unwrap();
            prop_assert_eq!(mask_text(&once, &labels, MaskMode::KeepRationale).unwrap(), once);
        }
    }
}
