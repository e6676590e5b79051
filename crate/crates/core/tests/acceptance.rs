//! Acceptance criteria, run in order with one PASS/FAIL line each. The
//! process exits nonzero if any criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tmm::aspect_head::{joint_loss, nll_on_tape, LossMode, SentimentDistribution};
use tmm::attention::cue_localization;
use tmm::checkpoint::Checkpoint;
use tmm::compare::ComparisonReport;
use tmm::data::{generate_synthetic, SyntheticCorpora, SyntheticSpec, Task};
use tmm::diagnostics::{run_grad_checks, END_TO_END_TOLERANCE, PRIMITIVE_TOLERANCE};
use tmm::encoder::LayerSelector;
use tmm::metrics::{combined_score, score, MetricsReport};
use tmm::numerics::{Tape, Tensor};
use tmm::tokenizer::{
    build_vocab_with, encode_tmm_acsa, encode_tmm_atsa, Category, Example, Polarity, Vocab, AE_ID, AS_ID,
};
use tmm::train::{train_run, train_runs, MultiRunOutcome, RunConfig, Scheme};

struct Outcome {
    passed: bool,
    detail: String,
}

fn check(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let report = match run_grad_checks(None) {
        Ok(r) => r,
        Err(e) => return check(false, format!("grad check errored: {e}")),
    };
    let elapsed = start.elapsed();
    let worst_primitive = report
        .entries
        .iter()
        .filter(|e| e.tolerance == PRIMITIVE_TOLERANCE)
        .map(|e| e.max_rel_error)
        .fold(0.0, f64::max);
    let end_to_end = report.entry("end_to_end.loss").map_or(f64::INFINITY, |e| e.max_rel_error);
    let control = run_grad_checks(tmm::diagnostics::op_kind_from_name("softmax")).map(|r| !r.passed);
    let passed = report.passed
        && worst_primitive < PRIMITIVE_TOLERANCE
        && end_to_end < END_TO_END_TOLERANCE
        && elapsed < Duration::from_secs(120)
        && control == Ok(true);
    check(
        passed,
        format!(
            "{} primitives max rel err {worst_primitive:.2e} (< 1e-6), end-to-end {end_to_end:.2e} (< 1e-4), \
             corrupted-softmax control detected: {}, {:.1}s",
            report.entries.len() - 2,
            control == Ok(true),
            elapsed.as_secs_f64()
        ),
    )
}

fn encoding_identities() -> Outcome {
    let mut failures = Vec::new();
    for task in [Task::Atsa, Task::Acsa] {
        let spec = SyntheticSpec {
            task,
            seed: 1000,
            train: 1000,
            dev: 0,
            test: 0,
            ..Default::default()
        };
        let corpus = generate_synthetic(&spec).expect("default spec").train;
        let vocab = build_vocab_with(corpus.examples().map(|e| e.tokens().to_vec()), 1, &Category::names())
            .expect("non-empty");
        for (i, ex) in corpus.examples().enumerate() {
            if let Err(m) = encoding_identity(ex, &vocab) {
                failures.push(format!("{task} #{i}: {m}"));
            }
        }
    }
    check(
        failures.is_empty(),
        match failures.first() {
            None => "2000 examples: length n+2m, anchors on [AS], strip round trip exact".to_string(),
            Some(f) => format!("{} failures, first: {f}", failures.len()),
        },
    )
}

fn encoding_identity(ex: &Example, vocab: &Vocab) -> Result<(), String> {
    let n = ex.tokens().len();
    let m = ex.aspect_count();
    let (enc, stripped) = match ex {
        Example::Atsa(e) => {
            let enc = encode_tmm_atsa(e, vocab, 4096).map_err(|e| e.to_string())?;
            let stripped: Vec<usize> = enc.ids.iter().copied().filter(|&i| i != AS_ID && i != AE_ID).collect();
            (enc, stripped)
        }
        Example::Acsa(e) => {
            let enc = encode_tmm_acsa(e, vocab, 4096).map_err(|e| e.to_string())?;
            let suffix = &enc.ids[n..];
            for (k, a) in e.aspects.iter().enumerate() {
                if suffix[2 * k] != AS_ID || suffix[2 * k + 1] != vocab.id(a.category.as_str()) {
                    return Err(format!("category block {k} malformed"));
                }
            }
            let stripped = enc.ids[..n].to_vec();
            (enc, stripped)
        }
    };
    if enc.ids.len() != n + 2 * m {
        return Err(format!("length {} != {n} + 2*{m}", enc.ids.len()));
    }
    if enc.anchors.len() != m || enc.anchors.iter().any(|&a| enc.ids[a] != AS_ID) {
        return Err("anchor does not point at [AS]".into());
    }
    if vocab.decode(&stripped) != ex.tokens() {
        return Err("strip round trip differs".into());
    }
    Ok(())
}

/// Straight counting, one class at a time.
fn oracle(pred: &[Polarity], gold: &[Polarity]) -> (f64, f64) {
    let mut f1s = 0.0;
    for c in Polarity::ALL {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fneg = 0.0;
        for (p, g) in pred.iter().zip(gold) {
            match (*p == c, *g == c) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                (false, false) => {}
            }
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
        f1s += if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
    }
    let correct = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    (f1s / 3.0, correct as f64 / pred.len() as f64)
}

fn metric_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..120);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Polarity> { (0..n).map(|_| Polarity::ALL[rng.random_range(0..3)]).collect() };
        let pred = draw(&mut rng);
        let gold = draw(&mut rng);
        let r = score(&pred, &gold).expect("non-empty");
        let (macro_f1, accuracy) = oracle(&pred, &gold);
        worst = worst.max((r.macro_f1 - macro_f1).abs()).max((r.accuracy - accuracy).abs());
    }
    let gold: Vec<Polarity> = (0..300).map(|i| Polarity::ALL[i % 3]).collect();
    let single = score(&vec![Polarity::Neutral; 300], &gold).expect("non-empty").macro_f1;
    let with_macro = |m: f64| {
        let mut r: MetricsReport = score(&[Polarity::Positive], &[Polarity::Positive]).expect("non-empty");
        r.macro_f1 = m;
        r
    };
    let combined = combined_score(&with_macro(0.8524), &with_macro(0.7941));
    let passed = worst < 1e-12 && single == 1.0 / 6.0 && (combined - 0.82325).abs() < 1e-12;
    check(
        passed,
        format!("200 random vectors max |diff| {worst:.1e}, one-class macro_f1 {single} (1/6), combined {combined}"),
    )
}

fn loss_contracts() -> Outcome {
    let uniform = SentimentDistribution(vec![[1.0 / 3.0; 3]; 4]);
    let gold = vec![vec![Polarity::Positive, Polarity::Negative, Polarity::Neutral, Polarity::Positive]];
    let out = joint_loss(&[uniform], &gold, LossMode::Mean).expect("shapes agree");
    let ln3 = 3f64.ln();
    let uniform_err = (out.loss - ln3).abs().max((out.raw - 4.0 * ln3).abs());

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut shift_err = 0.0f64;
    let mut grad_err = 0.0f64;
    for _ in 0..50 {
        let m = rng.random_range(1..5);
        let logits: Vec<f64> = (0..3 * m).map(|_| rng.random_range(-4.0..4.0)).collect();
        let targets: Vec<Polarity> = (0..m).map(|_| Polarity::ALL[rng.random_range(0..3)]).collect();
        let c = rng.random_range(-50.0..50.0);

        let run = |values: &[f64]| {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::matrix(m, 3, values.to_vec()).expect("shape"));
            let nll = nll_on_tape(&mut tape, x, &targets).expect("valid");
            tape.backward(nll).expect("finite");
            (tape.value(nll).data()[0], tape.grad(x).expect("grad").to_vec())
        };
        let (base, grad) = run(&logits);
        let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
        shift_err = shift_err.max((run(&shifted).0 - base).abs());

        for (i, target) in targets.iter().enumerate() {
            let row = &logits[3 * i..3 * i + 3];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for k in 0..3 {
                let expected = (row[k] - max).exp() / z - f64::from(u8::from(k == target.index()));
                grad_err = grad_err.max((grad[3 * i + k] - expected).abs());
            }
        }
    }
    check(
        uniform_err < 1e-12 && shift_err < 1e-12 && grad_err < 1e-8,
        format!("uniform loss vs ln 3 {uniform_err:.1e}, shift invariance {shift_err:.1e}, grad vs softmax-onehot {grad_err:.1e}"),
    )
}

fn fixture() -> SyntheticCorpora {
    generate_synthetic(&SyntheticSpec::default()).expect("default spec")
}

fn desk_learning(tmm: &MultiRunOutcome, elapsed: Duration) -> Outcome {
    let m = tmm.mean_test;
    let per_run: Vec<String> = tmm
        .runs
        .iter()
        .zip(&tmm.test)
        .map(|(r, e)| format!("seed {} acc {:.4} f1 {:.4} ({} epochs)", r.seed, e.report.accuracy, e.report.macro_f1, r.history.len()))
        .collect();
    check(
        m.accuracy >= 0.90 && m.macro_f1 >= 0.88 && elapsed < Duration::from_secs(15 * 60),
        format!(
            "mean test accuracy {:.4} (>= 0.90), macro_f1 {:.4} (>= 0.88), {:.0}s (< 900s); {}",
            m.accuracy,
            m.macro_f1,
            elapsed.as_secs_f64(),
            per_run.join("; ")
        ),
    )
}

fn attention_localization(tmm: &MultiRunOutcome, data: &SyntheticCorpora) -> Outcome {
    let model = &tmm.runs[0].model;
    match cue_localization(model, &data.test, &SyntheticSpec::default(), LayerSelector::All) {
        Ok(r) => check(
            r.rate >= 0.80,
            format!(
                "seed {} model: {}/{} anchors ({:.4}) top non-special weight in own cue region (>= 0.80); \
                 sentences with every anchor localized {}/{}",
                tmm.runs[0].seed, r.hits, r.anchors, r.rate, r.sentence_hits, r.sentences
            ),
        ),
        Err(e) => check(false, format!("probe errored: {e}")),
    }
}

fn determinism(cfg: &RunConfig, tmm: &MultiRunOutcome, data: &SyntheticCorpora) -> Outcome {
    let first = &tmm.runs[0];
    let bytes = Checkpoint::from(first).to_bytes();
    let rerun = match train_run(cfg, &data.train, &data.dev, first.seed) {
        Ok(r) => r,
        Err(e) => return check(false, format!("rerun failed: {e}")),
    };
    let same_checkpoint = Checkpoint::from(&rerun).to_bytes() == bytes;
    let report = |m: &tmm::train::Model| m.evaluate(&data.test).map(|e| e.report.to_json()).unwrap_or_default();
    let same_report = report(&first.model) == report(&rerun.model) && !report(&first.model).is_empty();
    let round_trip = Checkpoint::from_bytes(&bytes).map(|c| c.to_bytes() == bytes).unwrap_or(false);
    let regenerated = fixture() == *data;
    check(
        same_checkpoint && same_report && round_trip && regenerated,
        format!(
            "retrained checkpoint identical: {same_checkpoint}, test report identical: {same_report}, \
             save-load-save identical: {round_trip} ({} bytes), fixture regenerated identically: {regenerated}",
            bytes.len()
        ),
    )
}

fn directional(report: &ComparisonReport) -> Outcome {
    check(
        report.tmm.mean.macro_f1 >= report.baseline.mean.macro_f1 && report.forward_counts_match,
        format!(
            "tmm macro_f1 {:.4} vs baseline {:.4} (delta {:+.4}); test forward passes tmm {} = {} sentences, \
             baseline {} = {} aspects",
            report.tmm.mean.macro_f1,
            report.baseline.mean.macro_f1,
            report.delta_macro_f1,
            report.tmm.runs[0].test_forward_passes,
            report.test_sentences,
            report.baseline.runs[0].test_forward_passes,
            report.test_aspects
        ),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut record = |name: &'static str, outcome: Outcome| {
        println!("[{}] {name}: {}", if outcome.passed { "PASS" } else { "FAIL" }, outcome.detail);
        results.push((name, outcome));
    };

    record("gradient integrity", gradient_integrity());
    record("encoding identities", encoding_identities());
    record("metric oracle equivalence", metric_oracle_equivalence());
    record("loss contracts", loss_contracts());

    let data = fixture();
    let cfg = RunConfig::default();
    let start = Instant::now();
    let tmm = train_runs(&cfg, &data.train, &data.dev, &data.test).expect("tmm training");
    let elapsed = start.elapsed();
    record("desk-scale learning", desk_learning(&tmm, elapsed));
    record("attention localization", attention_localization(&tmm, &data));
    record("determinism", determinism(&cfg, &tmm, &data));

    let baseline_cfg = RunConfig {
        scheme: Scheme::Baseline,
        ..cfg
    };
    let baseline = train_runs(&baseline_cfg, &data.train, &data.dev, &data.test).expect("baseline training");
    let report = ComparisonReport::new(&data.test, &tmm, &baseline);
    record("directional comparison", directional(&report));

    let failed = results.iter().filter(|(_, o)| !o.passed).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
