//! Instances, datasets and the JSON Lines dataset format.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use super::image::PatchGrid;
use super::tokenize::{split_word, tokenize_words, TokenSeq};
use super::vocab::Vocab;
use crate::error::{Error, Result};

/// The five humanitarian classes, in canonical order.
pub const DEFAULT_LABELS: [&str; 5] = [
    "infrastructure_damage",
    "affected_individuals",
    "rescue_effort",
    "other_relevant_info",
    "not_humanitarian",
];

/// Ordered class names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSpace {
    names: Vec<String>,
}

impl Default for LabelSpace {
    fn default() -> Self {
        Self::new(DEFAULT_LABELS.iter().map(|s| s.to_string()).collect()).expect("distinct defaults")
    }
}

impl LabelSpace {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::invalid("labels", "label space is empty"));
        }
        let normalized: Vec<String> = names.iter().map(|n| normalize_label(n)).collect();
        for (i, n) in normalized.iter().enumerate() {
            if normalized[..i].contains(n) {
                return Err(Error::invalid("labels", format!("duplicate class {n:?}")));
            }
        }
        Ok(Self { names: normalized })
    }

    /// The first `n` default classes, extended with `class_<i>` names beyond five.
    pub fn with_size(n: usize) -> Result<Self> {
        let names = (0..n)
            .map(|i| DEFAULT_LABELS.get(i).map_or_else(|| format!("class_{i}"), |s| s.to_string()))
            .collect();
        Self::new(names)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Case-, space- and hyphen-insensitive lookup ("Rescue effort" == "rescue_effort").
    pub fn parse(&self, name: &str) -> Option<usize> {
        let key = normalize_label(name);
        self.names.iter().position(|n| *n == key)
    }
}

fn normalize_label(name: &str) -> String {
    name.trim()
        .to_lowercase()
        .chars()
        .map(|c| if c == ' ' || c == '-' { '_' } else { c })
        .collect()
}

/// One tweet: words, their tokens, the image patches, and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: String,
    pub words: Vec<String>,
    pub tokens: TokenSeq,
    pub patches: PatchGrid,
    pub label: usize,
    pub gold_rationale: Option<Vec<u8>>,
    /// Indices of planted signature patches (synthetic data only).
    pub signature_patches: Option<Vec<usize>>,
}

impl Instance {
    pub fn new(
        id: impl Into<String>,
        words: Vec<String>,
        patches: PatchGrid,
        label: usize,
        gold_rationale: Option<Vec<u8>>,
        vocab: &Vocab,
    ) -> Result<Self> {
        let id = id.into();
        let tokens = tokenize_words(&words, vocab).map_err(|e| match e {
            Error::Invalid { message, .. } => Error::invalid(format!("instance {id}"), message),
            other => other,
        })?;
        if let Some(r) = &gold_rationale {
            if r.len() != words.len() {
                return Err(Error::invalid(
                    format!("instance {id}"),
                    format!("{} rationale labels for {} words", r.len(), words.len()),
                ));
            }
            if r.iter().any(|&v| v > 1) {
                return Err(Error::invalid(format!("instance {id}"), "rationale labels must be 0 or 1"));
            }
        }
        Ok(Self {
            id,
            words,
            tokens,
            patches,
            label,
            gold_rationale,
            signature_patches: None,
        })
    }

    /// Same instance with new words (re-tokenized) and patches.
    pub fn with_inputs(&self, words: Vec<String>, patches: PatchGrid, vocab: &Vocab) -> Result<Self> {
        let tokens = tokenize_words(&words, vocab)?;
        Ok(Self {
            words,
            tokens,
            patches,
            ..self.clone()
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    pub labels: LabelSpace,
    pub vocab: Vocab,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn has_gold_rationales(&self) -> bool {
        self.instances.iter().all(|i| i.gold_rationale.is_some())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        self.save_jsonl_with_mode(path, None)
    }

    /// Writes one record per line; `mask_mode` tags masked datasets.
    pub fn save_jsonl_with_mode(&self, path: &Path, mask_mode: Option<&str>) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        for inst in &self.instances {
            let line = record_line(inst, &self.labels, mask_mode)?;
            out.write_all(line.as_bytes())
                .and_then(|_| out.write_all(b"\n"))
                .map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Loads with a known vocabulary and label space.
    pub fn load_jsonl_with(path: &Path, vocab: &Vocab, labels: &LabelSpace) -> Result<Self> {
        let records = read_records(path)?;
        let mut instances = Vec::with_capacity(records.len());
        for (line, rec) in records {
            instances.push(record_to_instance(rec, vocab, labels, path, line)?);
        }
        Ok(Dataset {
            instances,
            labels: labels.clone(),
            vocab: vocab.clone(),
        })
    }
}

/// Loads a dataset in the default label space, building the vocabulary from
/// the file's own words in first-seen order.
pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    let records = read_records(path)?;
    let vocab = Vocab::from_tokens(
        records
            .iter()
            .flat_map(|(_, r)| r.words.iter().flat_map(|w| split_word(w))),
    );
    let labels = LabelSpace::default();
    let mut instances = Vec::with_capacity(records.len());
    for (line, rec) in records {
        instances.push(record_to_instance(rec, &vocab, &labels, path, line)?);
    }
    Ok(Dataset {
        instances,
        labels,
        vocab,
    })
}

pub fn save_jsonl(ds: &Dataset, path: &Path) -> Result<()> {
    ds.save_jsonl(path)
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    words: &'a [String],
    label: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    rationale: Option<&'a [u8]>,
    patches: PatchesOut,
    #[serde(skip_serializing_if = "Option::is_none")]
    signature_patches: Option<&'a [usize]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask_mode: Option<&'a str>,
}

#[derive(Serialize)]
struct PatchesOut {
    rows: usize,
    cols: usize,
    p: usize,
    c: usize,
    data: Box<RawValue>,
}

#[derive(Deserialize)]
struct RecordIn {
    id: String,
    words: Vec<String>,
    label: String,
    #[serde(default)]
    rationale: Option<Vec<u8>>,
    patches: PatchesIn,
    #[serde(default)]
    signature_patches: Option<Vec<usize>>,
    #[serde(default)]
    #[allow(dead_code)]
    mask_mode: Option<String>,
    #[serde(flatten)]
    extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Deserialize)]
struct PatchesIn {
    rows: usize,
    cols: usize,
    p: usize,
    c: usize,
    data: Vec<f64>,
}

fn record_line(inst: &Instance, labels: &LabelSpace, mask_mode: Option<&str>) -> Result<String> {
    let data = RawValue::from_string(format_floats(&inst.patches.data)?)?;
    let rec = RecordOut {
        id: &inst.id,
        words: &inst.words,
        label: labels.name(inst.label),
        rationale: inst.gold_rationale.as_deref(),
        patches: PatchesOut {
            rows: inst.patches.rows,
            cols: inst.patches.cols,
            p: inst.patches.p,
            c: inst.patches.channels,
            data,
        },
        signature_patches: inst.signature_patches.as_deref(),
        mask_mode,
    };
    Ok(serde_json::to_string(&rec)?)
}

/// Formats a float with 9 significant digits, trailing mantissa zeros trimmed.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let s = format!("{v:.8e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent form");
    let mantissa = if mantissa.contains('.') {
        mantissa.trim_end_matches('0').trim_end_matches('.')
    } else {
        mantissa
    };
    if exp == "0" {
        mantissa.to_string()
    } else {
        format!("{mantissa}e{exp}")
    }
}

fn format_floats(values: &[f64]) -> Result<String> {
    let mut s = String::with_capacity(values.len() * 12 + 2);
    s.push('[');
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("non-finite patch value {v}")));
        }
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{}", format_sig9(v));
    }
    s.push(']');
    Ok(s)
}

fn read_records(path: &Path) -> Result<Vec<(usize, RecordIn)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordIn = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        for key in rec.extra.keys() {
            log::warn!("{}:{}: ignoring unknown field {key:?}", path.display(), i + 1);
        }
        out.push((i + 1, rec));
    }
    Ok(out)
}

fn record_to_instance(
    rec: RecordIn,
    vocab: &Vocab,
    labels: &LabelSpace,
    path: &Path,
    line: usize,
) -> Result<Instance> {
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let label = labels
        .parse(&rec.label)
        .ok_or_else(|| parse_err(format!("unknown class {:?}", rec.label)))?;
    let p = rec.patches;
    // pixel values are stored at single precision
    let data = p.data.into_iter().map(|v| f64::from(v as f32)).collect();
    let patches = PatchGrid::new(p.p, p.c, p.rows, p.cols, data).map_err(|e| parse_err(e.to_string()))?;
    let mut inst = Instance::new(rec.id, rec.words, patches, label, rec.rationale, vocab)
        .map_err(|e| parse_err(e.to_string()))?;
    if let Some(sig) = &rec.signature_patches {
        if sig.iter().any(|&k| k >= inst.patches.m()) {
            return Err(parse_err("signature patch index out of range".into()));
        }
    }
    inst.signature_patches = rec.signature_patches;
    Ok(inst)
}
