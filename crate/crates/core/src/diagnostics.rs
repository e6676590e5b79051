//! Gradient diagnostics: finite-difference checks of every tape primitive and
//! of the full training loss on a toy model, as a machine-readable report.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::aspect_head::{logits_on_tape, nll_on_tape, HeadError, PROB_FLOOR};
use crate::encoder::{forward_on_tape, BoundParams, EncoderError, Mode, ModelConfig, ModelParams};
use crate::numerics::{grad_check, NodeId, NumericsError, OpKind, Tape, Tensor};
use crate::tokenizer::{build_vocab_with, encode_tmm_atsa, AtsaExample, Polarity, TermAspect};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<CheckEntry>,
    pub passed: bool,
    /// Primitive whose backward pass was deliberately corrupted, if any.
    pub corrupted: Option<String>,
}

impl GradCheckReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn entry(&self, name: &str) -> Option<&CheckEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Lower-case primitive names accepted for fault injection.
pub fn op_kind_from_name(name: &str) -> Option<OpKind> {
    Some(match name {
        "matmul" => OpKind::MatMul,
        "transpose" => OpKind::Transpose,
        "add" => OpKind::Add,
        "add_row" => OpKind::AddRow,
        "mul" => OpKind::Mul,
        "scale" => OpKind::Scale,
        "gelu" => OpKind::Gelu,
        "softmax" => OpKind::Softmax,
        "layer_norm" => OpKind::LayerNorm,
        "gather" => OpKind::Gather,
        "dropout" => OpKind::Dropout,
        "concat_rows" => OpKind::ConcatRows,
        "slice_rows" => OpKind::SliceRows,
        "concat_cols" => OpKind::ConcatCols,
        "slice_cols" => OpKind::SliceCols,
        "sum" => OpKind::Sum,
        "nll" => OpKind::Nll,
        _ => return None,
    })
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("valid shape")
}

/// Weighted sum with fixed weights so every output coordinate contributes.
fn probe(tape: &mut Tape, y: NodeId) -> Result<NodeId, NumericsError> {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = tape.leaf(random(&mut rng, &shape));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type Primitive = fn(&mut Tape, &[NodeId]) -> Result<NodeId, NumericsError>;

fn primitives(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, Primitive)> {
    let mut r = |shape: &[usize]| random(rng, shape);
    vec![
        ("matmul", vec![r(&[3, 4]), r(&[4, 2])], |t, x| t.matmul(x[0], x[1])),
        ("transpose", vec![r(&[3, 2])], |t, x| t.transpose(x[0])),
        ("add", vec![r(&[2, 3]), r(&[2, 3])], |t, x| t.add(x[0], x[1])),
        ("add_row", vec![r(&[3, 4]), r(&[4])], |t, x| t.add_row(x[0], x[1])),
        ("mul", vec![r(&[2, 3]), r(&[2, 3])], |t, x| t.mul(x[0], x[1])),
        ("scale", vec![r(&[2, 3])], |t, x| Ok(t.scale(x[0], -1.7))),
        ("gelu", vec![r(&[3, 3])], |t, x| Ok(t.gelu(x[0]))),
        ("softmax", vec![r(&[3, 4])], |t, x| t.softmax_rows(x[0])),
        ("layer_norm", vec![r(&[3, 5]), r(&[5]), r(&[5])], |t, x| {
            t.layer_norm(x[0], x[1], x[2], 1e-5)
        }),
        ("gather", vec![r(&[5, 3])], |t, x| t.gather_rows(x[0], &[4, 1, 4, 0])),
        ("dropout", vec![r(&[4, 4])], |t, x| t.dropout(x[0], 0.3, 11, true)),
        ("concat_rows", vec![r(&[2, 3]), r(&[1, 3])], |t, x| t.concat_rows(&[x[0], x[1]])),
        ("slice_rows", vec![r(&[4, 3])], |t, x| t.slice_rows(x[0], 1, 2)),
        ("concat_cols", vec![r(&[3, 2]), r(&[3, 1])], |t, x| t.concat_cols(&[x[0], x[1]])),
        ("slice_cols", vec![r(&[3, 4])], |t, x| t.slice_cols(x[0], 1, 2)),
        ("sum", vec![r(&[2, 3])], |t, x| Ok(t.sum(x[0]))),
        ("nll", vec![r(&[3, 3])], |t, x| {
            let p = t.softmax_rows(x[0])?;
            t.nll(p, &[2, 0, 1], PROB_FLOOR)
        }),
    ]
}

fn entry(name: &str, tolerance: f64, max_rel_error: f64, coordinates: usize) -> CheckEntry {
    CheckEntry {
        name: name.to_string(),
        max_rel_error,
        tolerance,
        coordinates,
        passed: max_rel_error < tolerance,
    }
}

/// Two sentences with two and three aspects; the second repeats a word inside
/// and outside its aspect terms so embedding rows collect several gradients.
fn toy_batch() -> (Vec<(Vec<usize>, Vec<usize>, Vec<Polarity>)>, ModelConfig) {
    use Polarity::*;
    let sentences = [
        (
            "the salmon is tasty while the waiter is rude",
            vec![(1, 2, Positive), (6, 7, Negative)],
        ),
        (
            "the wine list and the salmon were plain but the salmon soup was rude",
            vec![(1, 3, Neutral), (5, 6, Positive), (10, 12, Negative)],
        ),
    ];
    let tokenized: Vec<Vec<String>> = sentences
        .iter()
        .map(|(s, _)| s.split(' ').map(str::to_string).collect())
        .collect();
    let vocab = build_vocab_with(&tokenized, 1, &[]).expect("non-empty");
    let batch = sentences
        .iter()
        .zip(tokenized)
        .map(|((_, spans), tokens)| {
            let ex = AtsaExample {
                tokens,
                aspects: spans
                    .iter()
                    .map(|&(start, end, p)| TermAspect {
                        start,
                        end,
                        polarity: Some(p),
                    })
                    .collect(),
            };
            let enc = encode_tmm_atsa(&ex, &vocab, 32).expect("fits");
            (enc.ids, enc.anchors, enc.gold.expect("labeled"))
        })
        .collect();
    let mut config = ModelConfig::toy(vocab.len());
    config.max_len = 32;
    config.dropout = 0.1;
    (batch, config)
}

fn lift(e: EncoderError) -> NumericsError {
    match e {
        EncoderError::Numerics(n) => n,
        other => panic!("toy batch is well formed: {other}"),
    }
}

fn lift_head(e: HeadError) -> NumericsError {
    match e {
        HeadError::Numerics(n) => n,
        other => panic!("toy batch is well formed: {other}"),
    }
}

/// Runs every check. With `fault`, that primitive's backward pass is
/// corrupted on every tape, which must make its checks fail.
pub fn run_grad_checks(fault: Option<OpKind>) -> Result<GradCheckReport, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut entries = Vec::new();
    for (name, inputs, f) in primitives(&mut rng) {
        let out = grad_check(
            |tape, ids| {
                if let Some(k) = fault {
                    tape.inject_fault(k);
                }
                let y = f(tape, ids)?;
                if tape.value(y).len() == 1 {
                    Ok(y)
                } else {
                    probe(tape, y)
                }
            },
            &inputs,
            STEP,
        )?;
        entries.push(entry(name, PRIMITIVE_TOLERANCE, out.max_rel_error, out.coordinates));
    }

    let (batch, config) = toy_batch();
    let params = ModelParams::init(&config, 5).expect("toy config is valid");
    // Push values off the tiny init so every nonlinearity is exercised.
    let inputs: Vec<Tensor> = params
        .tensors()
        .iter()
        .map(|t| {
            let mut t = t.clone();
            for v in t.data_mut() {
                *v = *v * 10.0 + rng.random_range(-0.1..0.1);
            }
            t
        })
        .collect();
    let out = grad_check(
        |tape, ids| {
            if let Some(k) = fault {
                tape.inject_fault(k);
            }
            let bound = BoundParams::from_ids(ids.to_vec());
            let (w, b) = bound.classifier();
            let mut total = None;
            let mut aspects = 0;
            for (k, (ids, anchors, gold)) in batch.iter().enumerate() {
                let (h, _) = forward_on_tape(tape, &bound, &config, ids, Mode::Train, 31 + k as u64).map_err(lift)?;
                let logits = logits_on_tape(tape, h, anchors, w, b).map_err(lift_head)?.expect("anchors");
                let nll = nll_on_tape(tape, logits, gold).map_err(lift_head)?;
                aspects += gold.len();
                total = Some(match total {
                    None => nll,
                    Some(t) => tape.add(t, nll)?,
                });
            }
            Ok(tape.scale(total.expect("non-empty batch"), 1.0 / aspects as f64))
        },
        &inputs,
        STEP,
    )?;
    entries.push(entry(
        "end_to_end.loss",
        END_TO_END_TOLERANCE,
        out.max_rel_error,
        out.coordinates,
    ));
    let table = params
        .names()
        .iter()
        .position(|n| n == "embeddings.token")
        .expect("token table");
    entries.push(entry(
        "end_to_end.embeddings.token",
        END_TO_END_TOLERANCE,
        out.per_input[table],
        inputs[table].len(),
    ));

    Ok(GradCheckReport {
        passed: entries.iter().all(|e| e.passed),
        entries,
        corrupted: fault.map(|k| format!("{k:?}")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_run_passes_every_check() {
        let report = run_grad_checks(None).unwrap();
        for e in &report.entries {
            assert!(e.passed, "{} {}", e.name, e.max_rel_error);
        }
        assert!(report.passed);
        assert_eq!(report.entries.len(), 19);
        let v: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(v["entries"][0]["name"], "matmul");
    }

    #[test]
    fn corrupted_primitive_is_caught() {
        for name in ["matmul", "softmax", "layer_norm", "gather"] {
            let report = run_grad_checks(op_kind_from_name(name)).unwrap();
            assert!(!report.passed, "{name}");
            assert!(!report.entry(name).unwrap().passed);
            assert!(!report.entry("end_to_end.loss").unwrap().passed, "{name}");
        }
        assert_eq!(op_kind_from_name("leaf"), None);
    }
}
