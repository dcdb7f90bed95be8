//! Binary checkpoints.
//!
//! Little-endian layout: `"XRAT"`, `u32` version, `u32` length of a JSON
//! header, the header, then one record per tensor:
//! `u16` name length, name, `u8` rank, `u32` dims, `f32` values row-major.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::classifier::ClassifierModel;
use crate::corpus::{LabelSpace, Vocab};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::extractor::ExtractorModel;
use crate::params::ParamSet;
use crate::rationale::{ClassHeadParams, RationaleHeadParams};

const MAGIC: &[u8; 4] = b"XRAT";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Extractor,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub encoder: EncoderConfig,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rationale_hidden: Option<usize>,
    pub labels: LabelSpace,
    pub vocab: Vec<String>,
}

fn encode_checkpoint(header: &CheckpointHeader, parts: &[(&str, &ParamSet)]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (prefix, set) in parts {
        for p in set.iter() {
            let name = format!("{prefix}.{}", p.name);
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(2);
            let (r, c) = p.value.dim();
            out.extend_from_slice(&(r as u32).to_le_bytes());
            out.extend_from_slice(&(c as u32).to_le_bytes());
            for v in p.value.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<(String, Mat)>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut tensors = Vec::new();
    while r.pos < bytes.len() {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.take(1)?[0];
        let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let shape = match dims.as_slice() {
            [n] => (1, *n),
            [a, b] => (*a, *b),
            _ => return Err(Error::Checkpoint(format!("tensor {name} has rank {rank}"))),
        };
        let count = shape.0 * shape.1;
        let data: Vec<f64> = r
            .take(count * 4)?
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        let value = Mat::from_shape_vec(shape, data).expect("length checked");
        tensors.push((name, value));
    }
    Ok((header, tensors))
}

fn split_sets(tensors: Vec<(String, Mat)>, prefixes: &[&str]) -> Result<Vec<ParamSet>> {
    let mut sets: Vec<ParamSet> = prefixes.iter().map(|_| ParamSet::new()).collect();
    for (name, value) in tensors {
        let (prefix, rest) = name
            .split_once('.')
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} has no component prefix")))?;
        let slot = prefixes
            .iter()
            .position(|p| *p == prefix)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected component {prefix:?} in {name}")))?;
        sets[slot].push(rest, value);
    }
    Ok(sets)
}

fn read(path: &Path) -> Result<(CheckpointHeader, Vec<(String, Mat)>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

fn vocab_of(header: &CheckpointHeader, path: &Path) -> Result<Vocab> {
    Vocab::from_lines(header.vocab.clone(), path)
}

pub fn save_extractor(path: &Path, model: &ExtractorModel) -> Result<()> {
    let header = CheckpointHeader {
        kind: ModelKind::Extractor,
        encoder: model.encoder.cfg.clone(),
        rationale_hidden: Some(model.rationale.hidden),
        labels: model.labels.clone(),
        vocab: model.vocab.tokens().to_vec(),
    };
    let bytes = encode_checkpoint(
        &header,
        &[
            ("encoder", &model.encoder.set),
            ("rationale", &model.rationale.set),
            ("class", &model.class_head.set),
        ],
    )?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_extractor(path: &Path) -> Result<ExtractorModel> {
    let (header, tensors) = read(path)?;
    if header.kind != ModelKind::Extractor {
        return Err(Error::Checkpoint(format!("{} holds a {:?} model", path.display(), header.kind)));
    }
    let hidden = header
        .rationale_hidden
        .ok_or_else(|| Error::Checkpoint("extractor header lacks rationale_hidden".into()))?;
    let mut sets = split_sets(tensors, &["encoder", "rationale", "class"])?.into_iter();
    let d = header.encoder.d_model;
    Ok(ExtractorModel {
        encoder: EncoderParams::from_set(&header.encoder, sets.next().expect("3 sets"))?,
        rationale: RationaleHeadParams::from_set(d, hidden, sets.next().expect("3 sets"))?,
        class_head: ClassHeadParams::from_set(d, header.labels.len(), sets.next().expect("3 sets"))?,
        vocab: vocab_of(&header, path)?,
        labels: header.labels,
    })
}

pub fn save_classifier(path: &Path, model: &ClassifierModel) -> Result<()> {
    let header = CheckpointHeader {
        kind: ModelKind::Classifier,
        encoder: model.encoder.cfg.clone(),
        rationale_hidden: None,
        labels: model.labels.clone(),
        vocab: model.vocab.tokens().to_vec(),
    };
    let bytes = encode_checkpoint(&header, &[("encoder", &model.encoder.set), ("class", &model.head.set)])?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_classifier(path: &Path) -> Result<ClassifierModel> {
    let (header, tensors) = read(path)?;
    if header.kind != ModelKind::Classifier {
        return Err(Error::Checkpoint(format!("{} holds a {:?} model", path.display(), header.kind)));
    }
    let mut sets = split_sets(tensors, &["encoder", "class"])?.into_iter();
    Ok(ClassifierModel {
        encoder: EncoderParams::from_set(&header.encoder, sets.next().expect("2 sets"))?,
        head: ClassHeadParams::from_set(header.encoder.d_model, header.labels.len(), sets.next().expect("2 sets"))?,
        vocab: vocab_of(&header, path)?,
        labels: header.labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::round_to_f32;

    fn models() -> (ExtractorModel, ClassifierModel) {
        let vocab = Vocab::from_tokens(["alpha", "beta"]);
        let cfg = EncoderConfig {
            vocab_size: vocab.len(),
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ff_dim: 16,
            ..EncoderConfig::default()
        };
        let mut e = ExtractorModel::init(&cfg, 8, LabelSpace::default(), vocab.clone(), 1).unwrap();
        let mut c = ClassifierModel::init(&cfg, LabelSpace::default(), vocab, 2).unwrap();
        for s in [&mut e.encoder.set, &mut e.rationale.set, &mut e.class_head.set, &mut c.encoder.set, &mut c.head.set] {
            round_to_f32(s);
        }
        (e, c)
    }

    #[test]
    fn round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (e, c) = models();
        let pe = dir.path().join("e.ckpt");
        let pc = dir.path().join("c.ckpt");
        save_extractor(&pe, &e).unwrap();
        save_classifier(&pc, &c).unwrap();
        assert_eq!(load_extractor(&pe).unwrap(), e);
        assert_eq!(load_classifier(&pc).unwrap(), c);
        assert!(load_classifier(&pe).is_err());
        let bytes = std::fs::read(&pe).unwrap();
        assert_eq!(&bytes[..4], b"XRAT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (e, _) = models();
        let p = dir.path().join("e.ckpt");
        save_extractor(&p, &e).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_extractor(&p), Err(Error::Checkpoint(_))));
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(matches!(load_extractor(&p), Err(Error::Checkpoint(_))));
    }
}
