//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xrat::config::RunConfig;
use xrat::corpus::{synth_generate, LabelSpace, SynthConfig, MASK_TOKEN};
use xrat::masking::{mask_patches, mask_text, MaskMode};
use xrat::metrics::{comprehensiveness, macro_f1, sufficiency, token_f1};
use xrat::pipeline::run_all;
use xrat::rationale::{cross_entropy_loss, weighted_bce_loss};
use xrat::training::gradcheck::standard_gradcheck;
use xrat::transport::{ipot_check, Heatmap, IpotConfig};

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        ok,
        detail: detail.into(),
    }
}

fn ipot_optimality() -> Outcome {
    let start = Instant::now();
    let r = ipot_check(100, 5, 0, &IpotConfig::default()).expect("ipot check runs");
    let secs = start.elapsed().as_secs_f64();
    outcome(
        r.max_rel_gap < 1e-3 && r.max_marginal_violation < 1e-6 && secs < 5.0,
        format!(
            "max relative gap {:.3e} (< 1e-3), max marginal violation {:.3e} (< 1e-6), {secs:.2} s (< 5 s)",
            r.max_rel_gap, r.max_marginal_violation
        ),
    )
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let r = standard_gradcheck(17, 0.09).expect("gradcheck runs");
    let secs = start.elapsed().as_secs_f64();
    let worst = r
        .tensors
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("tensors");
    outcome(
        r.max_rel_err < 1e-3 && secs < 60.0,
        format!(
            "max relative error {:.3e} over {} tensors (worst {}), {secs:.2} s (< 60 s)",
            r.max_rel_err,
            r.tensors.len(),
            worst.name
        ),
    )
}

fn loss_oracles() -> Outcome {
    let bce = weighted_bce_loss(&[0.9, 0.1, 0.2, 0.8], &[1, 0, 0, 1]).expect("bce");
    let ce = cross_entropy_loss(&[0.2; 5], 0).expect("ce");
    // closed forms in full precision
    let bce_exact = 2.0 * (-2.0 * 0.9f64.ln() - 2.0 * 0.8f64.ln());
    let ce_exact = 5.0f64.ln();
    let bce_literal = (bce - 1.31400).abs() <= 1e-5;
    let ce_literal = (ce - 1.60944).abs() <= 1e-5;
    let exact = (bce - bce_exact).abs() <= 1e-12 && (ce - ce_exact).abs() <= 1e-12;
    outcome(
        bce_literal && ce_literal && exact,
        format!(
            "weighted BCE {bce:.7} vs 1.31400 ± 1e-5 (off by {:.2e}; closed form {bce_exact:.7}), \
             cross-entropy {ce:.7} vs 1.60944 ± 1e-5 (off by {:.2e})",
            (bce - 1.31400).abs(),
            (ce - 1.60944).abs()
        ),
    )
}

fn brute_macro_f1(preds: &[usize], golds: &[usize], n: usize) -> f64 {
    let mut sum = 0.0;
    for c in 0..n {
        let p: BTreeSet<usize> = (0..preds.len()).filter(|&i| preds[i] == c).collect();
        let g: BTreeSet<usize> = (0..golds.len()).filter(|&i| golds[i] == c).collect();
        let both = p.intersection(&g).count();
        let size = p.len() + g.len();
        sum += if size == 0 { 0.0 } else { 2.0 * both as f64 / size as f64 };
    }
    sum / n as f64
}

fn brute_token_f1(pred: &[Vec<u8>], gold: &[Vec<u8>]) -> f64 {
    let positions = |labels: &[Vec<u8>]| -> BTreeSet<(usize, usize)> {
        labels
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.iter().enumerate().filter(|(_, &v)| v == 1).map(move |(j, _)| (i, j)))
            .collect()
    };
    let (p, g) = (positions(pred), positions(gold));
    let size = p.len() + g.len();
    if size == 0 {
        1.0
    } else {
        2.0 * p.intersection(&g).count() as f64 / size as f64
    }
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n_classes = 5;
    let labels = LabelSpace::with_size(n_classes).expect("labels");
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    let mut pred_r = Vec::new();
    let mut gold_r = Vec::new();
    let mut mismatches = 0;
    for _ in 0..1000 {
        let p = rng.random_range(0..n_classes);
        let g = if rng.random_bool(0.6) { p } else { rng.random_range(0..n_classes) };
        preds.push(p);
        golds.push(g);
        let words = rng.random_range(1..15);
        pred_r.push((0..words).map(|_| u8::from(rng.random_bool(0.3))).collect::<Vec<u8>>());
        gold_r.push((0..words).map(|_| u8::from(rng.random_bool(0.3))).collect::<Vec<u8>>());
        let m = macro_f1(&preds, &golds, &labels).expect("macro f1");
        let t = token_f1(&pred_r, &gold_r).expect("token f1");
        if m != brute_macro_f1(&preds, &golds, n_classes) || t != brute_token_f1(&pred_r, &gold_r) {
            mismatches += 1;
        }
    }
    let comp = comprehensiveness(0.822, 0.308);
    let suff = sufficiency(0.822, 0.750);
    let faith = (comp - 0.514).abs() < 1e-12 && (suff - 0.072).abs() < 1e-12;
    outcome(
        mismatches == 0 && faith,
        format!("{mismatches} of 1000 prefixes differ from the brute-force oracles; comprehensiveness {comp:.3}, sufficiency {suff:.3}"),
    )
}

fn masking_identities() -> Outcome {
    let ds = synth_generate(&SynthConfig {
        n_instances: 100,
        seed: 23,
        ..SynthConfig::default()
    })
    .expect("synth");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut partition_failures = 0;
    let mut sum_failures = 0;
    for inst in &ds.instances {
        let labels: Vec<u8> = inst.words.iter().map(|_| u8::from(rng.random_bool(0.4))).collect();
        let r = mask_text(&inst.words, &labels, MaskMode::KeepRationale).expect("mask");
        let c = mask_text(&inst.words, &labels, MaskMode::KeepComplement).expect("mask");
        let stars = |w: &[String]| -> BTreeSet<usize> { (0..w.len()).filter(|&i| w[i] == MASK_TOKEN).collect() };
        let (sr, sc) = (stars(&r), stars(&c));
        let all: BTreeSet<usize> = (0..inst.words.len()).collect();
        if !sr.is_disjoint(&sc) || sr.union(&sc).copied().collect::<BTreeSet<_>>() != all {
            partition_failures += 1;
        }
        let h = Heatmap {
            h: (0..inst.patches.m()).map(|_| rng.random::<f64>()).collect(),
        };
        let pr = mask_patches(&inst.patches, &h, MaskMode::KeepRationale).expect("mask");
        let pc = mask_patches(&inst.patches, &h, MaskMode::KeepComplement).expect("mask");
        let exact = pr
            .data
            .iter()
            .zip(&pc.data)
            .zip(&inst.patches.data)
            .all(|((a, b), x)| a + b == *x);
        if !exact {
            sum_failures += 1;
        }
    }
    outcome(
        partition_failures == 0 && sum_failures == 0,
        format!(
            "100 instances: {partition_failures} star-partition failures, {sum_failures} inexact patch reconstructions"
        ),
    )
}

fn files_under(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("read dir") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).expect("prefix").display().to_string();
                out.insert(rel, std::fs::read(&path).expect("read"));
            }
        }
    }
    out
}

fn end_to_end_and_determinism() -> (Outcome, Outcome) {
    let cfg = RunConfig::default();
    let first = tempfile::tempdir().expect("tempdir");
    let start = Instant::now();
    let report = run_all(&cfg, first.path(), false).expect("pipeline runs");
    let secs = start.elapsed().as_secs_f64();
    let r = report.macro_f1.get("R").copied().unwrap_or(f64::NAN);
    let tf1 = report.token_f1.unwrap_or(f64::NAN);
    let comp = report.comprehensiveness.unwrap_or(f64::NAN);
    let suff = report.sufficiency.unwrap_or(f64::NAN);
    let patch = report.patch_precision_at_k.unwrap_or(f64::NAN);
    let checks = [
        ("Macro-F1[R]", r >= 0.95, format!("{r:.4} (>= 0.95)")),
        ("Token-F1", tf1 >= 0.90, format!("{tf1:.4} (>= 0.90)")),
        ("comprehensiveness", comp >= 0.30, format!("{comp:.4} (>= 0.30)")),
        ("sufficiency", suff <= 0.05, format!("{suff:.4} (<= 0.05)")),
        ("patch precision@k", patch >= 0.80, format!("{patch:.4} (>= 0.80)")),
        ("runtime", secs < 600.0, format!("{secs:.1} s single-threaded (< 600 s)")),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let detail = checks
        .iter()
        .map(|(name, _, d)| format!("{name} {d}"))
        .collect::<Vec<_>>()
        .join(", ");
    let e2e = outcome(
        failed.is_empty(),
        if failed.is_empty() {
            detail
        } else {
            format!("{detail}; unmet: {}", failed.join(", "))
        },
    );

    let second = tempfile::tempdir().expect("tempdir");
    run_all(&cfg, second.path(), false).expect("pipeline runs");
    let (a, b) = (files_under(first.path()), files_under(second.path()));
    let differing: Vec<&String> = a.keys().filter(|k| b.get(*k) != a.get(*k)).collect();
    let det = outcome(
        a.keys().eq(b.keys()) && differing.is_empty(),
        format!("{} files compared, {} differ {:?}", a.len(), differing.len(), differing),
    );
    (e2e, det)
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("IPOT optimality", ipot_optimality()),
        ("Gradient fidelity", gradient_fidelity()),
        ("Loss oracles", loss_oracles()),
        ("Metric oracles", metric_oracles()),
        ("Masking identities", masking_identities()),
    ];
    let (e2e, det) = end_to_end_and_determinism();
    results.push(("End-to-end synthetic pipeline", e2e));
    results.push(("Determinism", det));

    let mut failed = 0;
    for (name, o) in &results {
        println!("{} {name}: {}", if o.ok { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.ok);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
