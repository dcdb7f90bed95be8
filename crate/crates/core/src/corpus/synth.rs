//! Deterministic synthetic aligned corpus.
//!
//! Each class owns a disjoint set of signature words and a set of signature
//! patch prototypes. An instance of class `c` carries one to three of `c`'s
//! signature words among filler words (these are its gold rationale) and all
//! of `c`'s prototypes at random grid positions among Gaussian noise patches.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Instance, LabelSpace};
use super::image::PatchGrid;
use super::tokenize::{split_word, MAX_CHUNK_CHARS};
use super::vocab::Vocab;
use crate::error::{Error, Result};

/// Most signature words planted in one instance.
const MAX_SIGNATURE_WORDS: usize = 3;
/// Mean intensity of noise patches.
const NOISE_MEAN: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_classes: usize,
    /// Training instances.
    pub n_instances: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Number of distinct words (signature plus filler).
    pub vocab_size: usize,
    pub signature_tokens_per_class: usize,
    pub words_per_instance: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub p: usize,
    pub c: usize,
    pub signature_patches_per_class: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 5,
            n_instances: 1000,
            n_dev: 200,
            n_test: 200,
            vocab_size: 200,
            signature_tokens_per_class: 6,
            words_per_instance: 10,
            grid_rows: 4,
            grid_cols: 4,
            p: 4,
            c: 3,
            signature_patches_per_class: 2,
            noise_std: 0.15,
            seed: 17,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::invalid(format!("corpus.{field}"), msg));
        if self.n_classes == 0 {
            return bad("n_classes", "must be positive".into());
        }
        if self.signature_tokens_per_class == 0 {
            return bad("signature_tokens_per_class", "must be positive".into());
        }
        let signature_words = self.n_classes * self.signature_tokens_per_class;
        if self.vocab_size <= signature_words {
            return bad(
                "vocab_size",
                format!(
                    "{} words cannot hold {} disjoint signature words plus fillers",
                    self.vocab_size, signature_words
                ),
            );
        }
        if self.words_per_instance == 0 {
            return bad("words_per_instance", "must be positive".into());
        }
        if self.grid_rows == 0 || self.grid_cols == 0 || self.p == 0 {
            return bad("grid", "grid_rows, grid_cols and p must be positive".into());
        }
        if self.c != 1 && self.c != 3 {
            return bad("c", format!("{} channels; expected 1 or 3", self.c));
        }
        let m = self.grid_rows * self.grid_cols;
        if self.signature_patches_per_class == 0 || self.signature_patches_per_class > m {
            return bad(
                "signature_patches_per_class",
                format!("must be in 1..={m} for a {}x{} grid", self.grid_rows, self.grid_cols),
            );
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad("noise_std", "must be finite and nonnegative".into());
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.p * self.p * self.c
    }
}

/// Shared, seed-determined structure: words, signatures and prototypes.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    pub cfg: SynthConfig,
    pub vocab: Vocab,
    pub labels: LabelSpace,
    pub signature_words: Vec<Vec<String>>,
    pub filler_words: Vec<String>,
    pub prototypes: Vec<Vec<Vec<f64>>>,
}

impl SynthWorld {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let words = generate_words(&mut rng, cfg.vocab_size);
        let vocab = Vocab::from_tokens(words.iter().flat_map(|w| split_word(w)));
        let k = cfg.signature_tokens_per_class;
        let signature_words: Vec<Vec<String>> = (0..cfg.n_classes)
            .map(|c| words[c * k..(c + 1) * k].to_vec())
            .collect();
        let filler_words = words[cfg.n_classes * k..].to_vec();

        let dim = cfg.patch_dim();
        let prototypes = (0..cfg.n_classes)
            .map(|_| {
                (0..cfg.signature_patches_per_class)
                    .map(|_| unit_prototype(&mut rng, dim))
                    .collect()
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            labels: LabelSpace::with_size(cfg.n_classes)?,
            signature_words,
            filler_words,
            prototypes,
        })
    }

    /// Generates `n` instances from an independent stream. Labels are a
    /// shuffled balanced sequence, so class counts differ by at most one.
    pub fn instances(&self, n: usize, stream: u64, id_prefix: &str) -> Result<Vec<Instance>> {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream + 1);
        let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.n_classes).collect();
        labels.shuffle(&mut rng);
        let noise = Normal::new(NOISE_MEAN, cfg.noise_std).map_err(|e| Error::invalid("corpus.noise_std", e.to_string()))?;
        let m = cfg.grid_rows * cfg.grid_cols;
        let dim = cfg.patch_dim();

        let mut out = Vec::with_capacity(n);
        for (i, &label) in labels.iter().enumerate() {
            let n_words = cfg.words_per_instance;
            let max_sig = MAX_SIGNATURE_WORDS
                .min(n_words)
                .min(cfg.signature_tokens_per_class);
            let n_sig = rng.random_range(1..=max_sig);
            let sig_positions = rand::seq::index::sample(&mut rng, n_words, n_sig).into_vec();
            let sig_choice = rand::seq::index::sample(&mut rng, cfg.signature_tokens_per_class, n_sig).into_vec();
            let mut words = Vec::with_capacity(n_words);
            let mut rationale = vec![0u8; n_words];
            for (w, flag) in rationale.iter_mut().enumerate() {
                if let Some(s) = sig_positions.iter().position(|&p| p == w) {
                    words.push(self.signature_words[label][sig_choice[s]].clone());
                    *flag = 1;
                } else {
                    words.push(self.filler_words.choose(&mut rng).expect("fillers exist").clone());
                }
            }

            let planted = rand::seq::index::sample(&mut rng, m, cfg.signature_patches_per_class).into_vec();
            let mut data = Vec::with_capacity(m * dim);
            for k in 0..m {
                if let Some(j) = planted.iter().position(|&p| p == k) {
                    data.extend_from_slice(&self.prototypes[label][j]);
                } else {
                    data.extend((0..dim).map(|_| to_f32(noise.sample(&mut rng).clamp(0.0, 1.0))));
                }
            }
            let patches = PatchGrid::new(cfg.p, cfg.c, cfg.grid_rows, cfg.grid_cols, data)?;
            let mut inst = Instance::new(
                format!("{id_prefix}-{i:06}"),
                words,
                patches,
                label,
                Some(rationale),
                &self.vocab,
            )?;
            let mut sig = planted;
            sig.sort_unstable();
            inst.signature_patches = Some(sig);
            out.push(inst);
        }
        Ok(out)
    }

    pub fn dataset(&self, n: usize, stream: u64, id_prefix: &str) -> Result<Dataset> {
        Ok(Dataset {
            instances: self.instances(n, stream, id_prefix)?,
            labels: self.labels.clone(),
            vocab: self.vocab.clone(),
        })
    }
}

/// `cfg.n_instances` instances from the seed's first stream.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    SynthWorld::new(cfg)?.dataset(cfg.n_instances, 0, "train")
}

/// Train, dev and test splits sharing one world.
pub fn synth_splits(cfg: &SynthConfig) -> Result<(Dataset, Dataset, Dataset)> {
    let world = SynthWorld::new(cfg)?;
    Ok((
        world.dataset(cfg.n_instances, 0, "train")?,
        world.dataset(cfg.n_dev, 1, "dev")?,
        world.dataset(cfg.n_test, 2, "test")?,
    ))
}

fn to_f32(v: f64) -> f64 {
    f64::from(v as f32)
}

/// Unit-norm vector with entries in `[0, 1]`, rounded to single precision.
fn unit_prototype(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    raw.into_iter().map(|v| to_f32(v / norm)).collect()
}

/// Distinct lowercase pseudo-words, about a fifth of them longer than one
/// chunk. A candidate is rejected if any of its chunks already exists, so
/// distinct words never share a token.
fn generate_words(rng: &mut ChaCha8Rng, count: usize) -> Vec<String> {
    let mut chunks: HashSet<String> = HashSet::new();
    let mut words = Vec::with_capacity(count);
    while words.len() < count {
        let len = if rng.random_bool(0.2) {
            rng.random_range(MAX_CHUNK_CHARS + 1..=MAX_CHUNK_CHARS + 3)
        } else {
            rng.random_range(4..=9)
        };
        let word: String = (0..len).map(|_| char::from(b'a' + rng.random_range(0..26u8))).collect();
        let parts = split_word(&word);
        if parts.iter().any(|p| chunks.contains(p)) {
            continue;
        }
        chunks.extend(parts);
        words.push(word);
    }
    words
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_instances: 50,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn rejects_vocab_too_small() {
        let cfg = SynthConfig {
            vocab_size: 30,
            ..small()
        };
        assert!(synth_generate(&cfg).is_err());
    }

    #[test]
    fn signature_sets_are_disjoint_and_exclude_fillers() {
        let world = SynthWorld::new(&small()).unwrap();
        let mut seen = HashSet::new();
        for set in &world.signature_words {
            for w in set {
                assert!(seen.insert(w.clone()));
            }
        }
        assert!(world.filler_words.iter().all(|w| !seen.contains(w)));
    }

    #[test]
    fn prototypes_are_unit_norm_and_distinct() {
        let world = SynthWorld::new(&small()).unwrap();
        let flat: Vec<&Vec<f64>> = world.prototypes.iter().flatten().collect();
        for (i, p) in flat.iter().enumerate() {
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            assert!(flat[..i].iter().all(|q| q != p));
        }
    }

    #[test]
    fn instances_carry_signatures() {
        let ds = synth_generate(&small()).unwrap();
        let world = SynthWorld::new(&small()).unwrap();
        for inst in &ds.instances {
            let gold = inst.gold_rationale.as_ref().unwrap();
            assert!(gold.contains(&1));
            for (w, &g) in inst.words.iter().zip(gold) {
                assert_eq!(g == 1, world.signature_words[inst.label].contains(w));
            }
            let sig = inst.signature_patches.as_ref().unwrap();
            assert_eq!(sig.len(), 2);
            for &k in sig {
                assert!(world.prototypes[inst.label].iter().any(|p| p.as_slice() == inst.patches.patch(k)));
            }
            assert!(inst.patches.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
