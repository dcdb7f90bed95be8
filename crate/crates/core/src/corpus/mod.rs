//! Data model: vocabulary, tokenization, image patches, datasets and the
//! synthetic corpus generator.

pub mod dataset;
pub mod image;
pub mod synth;
pub mod tokenize;
pub mod vocab;

pub use dataset::{load_jsonl, save_jsonl, Dataset, Instance, LabelSpace, DEFAULT_LABELS};
pub use image::{patchify, unpatchify, PatchGrid, PixelGrid};
pub use synth::{synth_generate, synth_splits, SynthConfig, SynthWorld};
pub use tokenize::{preprocess, tokenize, tokenize_words, word_labels_to_token_labels, TokenSeq};
pub use vocab::{Vocab, CLS, MASK, MASK_TOKEN, PAD, UNK};
