//! File-based pipeline stages. Each stage reads its inputs from explicit
//! paths, writes its artifacts into an output directory and echoes the run
//! configuration next to them.
//!
//! Directory layout:
//! - data: `{train,dev,test}.jsonl`, `vocab.txt`, `labels.txt`
//! - extractor / classifier: `model.ckpt`, `train_log.json`
//! - extract: `{split}.rationales.jsonl`, `{split}.heatmaps.jsonl`, optional `pgm/{split}/{id}.pgm`
//! - classifier also keeps its masked inputs: `masked_{train,dev}.jsonl`
//! - eval: `predictions.{setup}.jsonl`, `eval_report.json`, `eval_report.txt`

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use crate::classifier::{build_setup, evaluate_prepared, save_predictions, ClassifierModel, Setup, SetupResult};
use crate::config::RunConfig;
use crate::corpus::{synth_splits, Dataset, LabelSpace, Vocab};
use crate::error::{Error, Result};
use crate::extractor::{extract, load_rationales, save_rationales, ExtractorModel};
use crate::masking::{MaskMode, RationaleInputs};
use crate::metrics::{comprehensiveness, patch_precision_at_k, sufficiency, token_f1, EvalReport};
use crate::training::checkpoint::{load_classifier, load_extractor, save_classifier, save_extractor};
use crate::training::{train_classifier, train_extractor, TrainLog};
use crate::transport::{load_heatmaps, save_heatmaps, write_pgm, Heatmap};

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.json";
pub const REPORT_FILE: &str = "eval_report.json";
pub const REPORT_TABLE_FILE: &str = "eval_report.txt";

pub fn split_path(data: &Path, split: &str) -> PathBuf {
    data.join(format!("{split}.jsonl"))
}

pub fn rationale_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.rationales.jsonl"))
}

pub fn heatmap_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.heatmaps.jsonl"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, field: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("{} does not exist", path.display())))
    }
}

/// Vocabulary and label space stored beside a dataset.
pub fn load_data_meta(data: &Path) -> Result<(Vocab, LabelSpace)> {
    let vocab_path = data.join("vocab.txt");
    let labels_path = data.join("labels.txt");
    require(&vocab_path, "data")?;
    require(&labels_path, "data")?;
    let vocab = Vocab::load_txt(&vocab_path)?;
    let text = std::fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let labels = LabelSpace::new(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())?;
    Ok((vocab, labels))
}

pub fn load_split(data: &Path, split: &str, vocab: &Vocab, labels: &LabelSpace) -> Result<Dataset> {
    let path = split_path(data, split);
    require(&path, "data")?;
    Dataset::load_jsonl_with(&path, vocab, labels)
}

/// Writes train/dev/test splits and their vocabulary and label files.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let (train, dev, test) = synth_splits(&cfg.corpus)?;
    for (split, ds) in SPLITS.iter().zip([&train, &dev, &test]) {
        ds.save_jsonl(&split_path(out, split))?;
    }
    train.vocab.save_txt(&out.join("vocab.txt"))?;
    let mut labels = train.labels.names().join("\n");
    labels.push('\n');
    write(&out.join("labels.txt"), &labels)?;
    cfg.echo(out)
}

fn write_log(out: &Path, log: &TrainLog) -> Result<()> {
    let mut s = serde_json::to_string_pretty(log)?;
    s.push('\n');
    write(&out.join(TRAIN_LOG_FILE), &s)
}

pub fn run_train_extractor(cfg: &RunConfig, data: &Path, out: &Path, parallel: bool) -> Result<TrainLog> {
    let (vocab, labels) = load_data_meta(data)?;
    let train = load_split(data, "train", &vocab, &labels)?;
    let dev = load_split(data, "dev", &vocab, &labels)?;
    let enc = cfg.encoder_for(&train)?;
    create_dir(out)?;
    let (model, log) = train_extractor(&train, &dev, &enc, &cfg.train, parallel)?;
    save_extractor(&out.join(CHECKPOINT_FILE), &model)?;
    write_log(out, &log)?;
    cfg.echo(out)?;
    Ok(log)
}

/// Rationale and heatmap dumps for each of `splits`.
pub fn run_extract(
    cfg: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    out: &Path,
    splits: &[String],
    pgm: bool,
) -> Result<()> {
    require(checkpoint, "checkpoint")?;
    let model: ExtractorModel = load_extractor(checkpoint)?;
    create_dir(out)?;
    for split in splits {
        let ds = load_split(data, split, &model.vocab, &model.labels)?;
        let records = extract(&model, &ds, &cfg.ipot, cfg.masking.threshold)?;
        save_rationales(&rationale_path(out, split), &records, &model.labels)?;
        let maps: Vec<(String, usize, usize, Heatmap)> = records
            .iter()
            .map(|r| (r.id.clone(), r.rows, r.cols, r.heatmap.clone()))
            .collect();
        save_heatmaps(&heatmap_path(out, split), &maps)?;
        if pgm {
            let dir = out.join("pgm").join(split);
            create_dir(&dir)?;
            for (id, rows, cols, h) in &maps {
                write_pgm(&dir.join(format!("{id}.pgm")), *rows, *cols, h)?;
            }
        }
    }
    cfg.echo(out)
}

/// Predicted word labels (thresholded at `masking.threshold`) and, when the
/// heatmap dump exists, heatmaps, both aligned with `ds` by instance id.
pub struct LoadedRationales {
    pub word_labels: Vec<Vec<u8>>,
    pub heatmaps: Option<Vec<Heatmap>>,
}

impl LoadedRationales {
    pub fn inputs(&self) -> Option<RationaleInputs<'_>> {
        self.heatmaps.as_ref().map(|h| RationaleInputs {
            word_labels: &self.word_labels,
            heatmaps: h,
        })
    }
}

fn align<T>(ds: &Dataset, items: Vec<(String, T)>, path: &Path) -> Result<Vec<T>> {
    let mut by_id: HashMap<String, T> = items.into_iter().collect();
    ds.instances
        .iter()
        .map(|inst| {
            by_id.remove(&inst.id).ok_or_else(|| {
                Error::invalid("rationales", format!("{} has no record for instance {}", path.display(), inst.id))
            })
        })
        .collect()
}

pub fn load_rationale_dumps(cfg: &RunConfig, dir: &Path, split: &str, ds: &Dataset) -> Result<LoadedRationales> {
    let rpath = rationale_path(dir, split);
    require(&rpath, "rationales")?;
    let records = load_rationales(&rpath)?;
    let threshold = cfg.masking.threshold;
    let labelled = records
        .into_iter()
        .map(|r| {
            let labels = r.word_probs.iter().map(|&p| u8::from(p >= threshold)).collect();
            (r.id, labels)
        })
        .collect();
    let word_labels: Vec<Vec<u8>> = align(ds, labelled, &rpath)?;
    for (inst, labels) in ds.instances.iter().zip(&word_labels) {
        if labels.len() != inst.words.len() {
            return Err(Error::invalid(
                "rationales",
                format!("instance {}: {} labels for {} words", inst.id, labels.len(), inst.words.len()),
            ));
        }
    }
    let hpath = heatmap_path(dir, split);
    let heatmaps = if hpath.exists() {
        let maps = load_heatmaps(&hpath)?.into_iter().map(|(id, _, _, h)| (id, h)).collect();
        let maps: Vec<Heatmap> = align(ds, maps, &hpath)?;
        for (inst, h) in ds.instances.iter().zip(&maps) {
            if h.len() != inst.patches.m() {
                return Err(Error::invalid(
                    "heatmaps",
                    format!("instance {}: {} values for {} patches", inst.id, h.len(), inst.patches.m()),
                ));
            }
        }
        Some(maps)
    } else {
        None
    };
    Ok(LoadedRationales { word_labels, heatmaps })
}

fn heatmaps_required(loaded: &LoadedRationales, dir: &Path, split: &str) -> Result<()> {
    if loaded.heatmaps.is_none() {
        return Err(Error::invalid(
            "heatmaps",
            format!("{} is missing", heatmap_path(dir, split).display()),
        ));
    }
    Ok(())
}

/// R-masked inputs for stage-two training; gold word labels replace the
/// predicted ones when `train.gold_masks` is set.
fn masked_split(cfg: &RunConfig, data: &Path, rationales: &Path, split: &str, vocab: &Vocab, labels: &LabelSpace) -> Result<Dataset> {
    let ds = load_split(data, split, vocab, labels)?;
    let mut loaded = load_rationale_dumps(cfg, rationales, split, &ds)?;
    heatmaps_required(&loaded, rationales, split)?;
    if cfg.train.gold_masks {
        loaded.word_labels = ds
            .instances
            .iter()
            .map(|i| {
                i.gold_rationale
                    .clone()
                    .ok_or_else(|| Error::invalid(format!("instance {}", i.id), "gold_masks needs gold rationales"))
            })
            .collect::<Result<_>>()?;
    }
    build_setup(&ds, Setup::R, loaded.inputs().as_ref(), &cfg.masking)
}

pub fn run_train_classifier(cfg: &RunConfig, data: &Path, rationales: &Path, out: &Path, parallel: bool) -> Result<TrainLog> {
    let (vocab, labels) = load_data_meta(data)?;
    let train = masked_split(cfg, data, rationales, "train", &vocab, &labels)?;
    let dev = masked_split(cfg, data, rationales, "dev", &vocab, &labels)?;
    let enc = cfg.encoder_for(&train)?;
    create_dir(out)?;
    let mode = Some(MaskMode::KeepRationale.as_str());
    train.save_jsonl_with_mode(&out.join("masked_train.jsonl"), mode)?;
    dev.save_jsonl_with_mode(&out.join("masked_dev.jsonl"), mode)?;
    let (model, log) = train_classifier(&train, &dev, &enc, &cfg.train, parallel)?;
    save_classifier(&out.join(CHECKPOINT_FILE), &model)?;
    write_log(out, &log)?;
    cfg.echo(out)?;
    Ok(log)
}

struct Prepared {
    model: ClassifierModel,
    ds: Dataset,
    rationales: Option<LoadedRationales>,
}

fn prepare(cfg: &RunConfig, data: &Path, checkpoint: &Path, rationales: Option<&Path>, split: &str, setups: &[Setup]) -> Result<Prepared> {
    require(checkpoint, "checkpoint")?;
    let needs = setups.iter().any(|s| s.needs_rationales());
    if needs && rationales.is_none() {
        return Err(Error::invalid("heatmaps", "setups R and XR need --rationales with rationale and heatmap dumps"));
    }
    let model = load_classifier(checkpoint)?;
    let ds = load_split(data, split, &model.vocab, &model.labels)?;
    let loaded = match rationales {
        Some(dir) => {
            let loaded = load_rationale_dumps(cfg, dir, split, &ds)?;
            if needs {
                heatmaps_required(&loaded, dir, split)?;
            }
            Some(loaded)
        }
        None => None,
    };
    Ok(Prepared {
        model,
        ds,
        rationales: loaded,
    })
}

fn classify_setups(cfg: &RunConfig, p: &Prepared, setups: &[Setup], out: &Path) -> Result<Vec<SetupResult>> {
    create_dir(out)?;
    let inputs = p.rationales.as_ref().and_then(LoadedRationales::inputs);
    let mut results = Vec::with_capacity(setups.len());
    for &setup in setups {
        let prepared = build_setup(&p.ds, setup, inputs.as_ref(), &cfg.masking)?;
        let result = evaluate_prepared(&p.model, &prepared, setup)?;
        save_predictions(&out.join(format!("predictions.{setup}.jsonl")), &result.predictions)?;
        results.push(result);
    }
    Ok(results)
}

/// Prediction dumps for each setup.
pub fn run_classify(
    cfg: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    rationales: Option<&Path>,
    split: &str,
    out: &Path,
) -> Result<Vec<SetupResult>> {
    let setups = &cfg.eval.setups;
    let p = prepare(cfg, data, checkpoint, rationales, split, setups)?;
    let results = classify_setups(cfg, &p, setups, out)?;
    cfg.echo(out)?;
    Ok(results)
}

/// Classifies every configured setup and writes the evaluation report.
pub fn run_eval(
    cfg: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    rationales: Option<&Path>,
    split: &str,
    out: &Path,
) -> Result<EvalReport> {
    let setups = &cfg.eval.setups;
    let p = prepare(cfg, data, checkpoint, rationales, split, setups)?;
    let results = classify_setups(cfg, &p, setups, out)?;
    let report = build_report(cfg, &p, &results)?;
    write(&out.join(REPORT_FILE), &report.to_json()?)?;
    write(&out.join(REPORT_TABLE_FILE), &report.to_table())?;
    cfg.echo(out)?;
    Ok(report)
}

fn build_report(cfg: &RunConfig, p: &Prepared, results: &[SetupResult]) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for r in results {
        report.macro_f1.insert(r.setup.to_string(), r.macro_f1);
        let per_class: BTreeMap<String, f64> = p
            .model
            .labels
            .names()
            .iter()
            .cloned()
            .zip(r.per_class_f1.iter().copied())
            .collect();
        report.per_class_f1.insert(r.setup.to_string(), per_class);
    }
    let f1 = |s: Setup| report.macro_f1.get(s.name()).copied();
    if let (Some(x), Some(xr)) = (f1(Setup::X), f1(Setup::XMinusR)) {
        report.comprehensiveness = Some(comprehensiveness(x, xr));
    }
    if let (Some(x), Some(r)) = (f1(Setup::X), f1(Setup::R)) {
        report.sufficiency = Some(sufficiency(x, r));
    }
    report.counts.insert("instances".into(), p.ds.len());
    if let Some(loaded) = &p.rationales {
        let gold: Option<Vec<Vec<u8>>> = p.ds.instances.iter().map(|i| i.gold_rationale.clone()).collect();
        if let Some(gold) = gold {
            report.token_f1 = Some(token_f1(&loaded.word_labels, &gold)?);
        }
        let predicted: usize = loaded.word_labels.iter().flatten().map(|&v| usize::from(v)).sum();
        report.counts.insert("rationale_words".into(), predicted);
        if let Some(maps) = &loaded.heatmaps {
            let mut total = 0.0;
            let mut scored = 0;
            for (inst, h) in p.ds.instances.iter().zip(maps) {
                if let Some(gold) = inst.signature_patches.as_ref().filter(|g| !g.is_empty()) {
                    let k = cfg.eval.patch_k.unwrap_or(gold.len());
                    total += patch_precision_at_k(h, gold, k)?;
                    scored += 1;
                }
            }
            if scored > 0 {
                report.patch_precision_at_k = Some(total / scored as f64);
            }
        }
    }
    Ok(report)
}

/// Output directories of [`run_all`] under its root.
pub struct PipelineDirs {
    pub data: PathBuf,
    pub extractor: PathBuf,
    pub extract: PathBuf,
    pub classifier: PathBuf,
    pub eval: PathBuf,
}

impl PipelineDirs {
    pub fn under(root: &Path) -> Self {
        Self {
            data: root.join("data"),
            extractor: root.join("extractor"),
            extract: root.join("extract"),
            classifier: root.join("classifier"),
            eval: root.join("eval"),
        }
    }
}

/// Every stage in order, evaluating on the test split.
pub fn run_all(cfg: &RunConfig, root: &Path, parallel: bool) -> Result<EvalReport> {
    let d = PipelineDirs::under(root);
    synth(cfg, &d.data)?;
    run_train_extractor(cfg, &d.data, &d.extractor, parallel)?;
    let splits: Vec<String> = SPLITS.iter().map(|s| s.to_string()).collect();
    run_extract(cfg, &d.data, &d.extractor.join(CHECKPOINT_FILE), &d.extract, &splits, false)?;
    run_train_classifier(cfg, &d.data, &d.extract, &d.classifier, parallel)?;
    run_eval(cfg, &d.data, &d.classifier.join(CHECKPOINT_FILE), Some(&d.extract), "test", &d.eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SynthConfig;
    use crate::encoder::EncoderConfig;
    use crate::training::TrainConfig;

    fn small() -> RunConfig {
        RunConfig {
            corpus: SynthConfig {
                n_instances: 30,
                n_dev: 10,
                n_test: 10,
                ..SynthConfig::default()
            },
            encoder: EncoderConfig {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                ff_dim: 16,
                ..EncoderConfig::default()
            },
            train: TrainConfig {
                max_epochs: 2,
                patience: 2,
                rationale_hidden: 8,
                ..TrainConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn full_run_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let report = run_all(&cfg, dir.path(), false).unwrap();
        for s in ["X", "R", "XR"] {
            assert!(report.macro_f1.contains_key(s));
        }
        assert!(report.token_f1.is_some());
        assert!(report.comprehensiveness.is_some());
        assert!(report.sufficiency.is_some());
        assert!(report.patch_precision_at_k.is_some());
        let d = PipelineDirs::under(dir.path());
        for f in [
            d.data.join("train.jsonl"),
            d.data.join("vocab.txt"),
            d.extractor.join(CHECKPOINT_FILE),
            d.extractor.join(TRAIN_LOG_FILE),
            heatmap_path(&d.extract, "test"),
            d.classifier.join("masked_train.jsonl"),
            d.eval.join(REPORT_FILE),
            d.eval.join("predictions.XR.jsonl"),
        ] {
            assert!(f.exists(), "{}", f.display());
        }
        for dir in [&d.data, &d.extractor, &d.extract, &d.classifier, &d.eval] {
            let echoed = std::fs::read_to_string(dir.join(crate::config::ECHO_FILE)).unwrap();
            assert_eq!(RunConfig::from_json(&echoed).unwrap(), cfg);
        }
    }

    #[test]
    fn rationale_setups_without_heatmaps_fail_validation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let d = PipelineDirs::under(dir.path());
        run_all(&cfg, dir.path(), false).unwrap();
        std::fs::remove_file(heatmap_path(&d.extract, "test")).unwrap();
        let ckpt = d.classifier.join(CHECKPOINT_FILE);
        let err = run_eval(&cfg, &d.data, &ckpt, Some(&d.extract), "test", &d.eval).unwrap_err();
        assert!(err.is_validation(), "{err}");
        let err = run_eval(&cfg, &d.data, &ckpt, None, "test", &d.eval).unwrap_err();
        assert!(err.is_validation(), "{err}");
        let mut x_only = cfg.clone();
        x_only.eval.setups = vec![Setup::X, Setup::TextOnly, Setup::ImageOnly];
        let report = run_eval(&x_only, &d.data, &ckpt, None, "test", &d.eval).unwrap();
        assert_eq!(report.macro_f1.len(), 3);
    }
}
