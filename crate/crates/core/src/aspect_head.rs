//! Anchor pooling, the softmax classifier over polarities, and the joint
//! cross-entropy summed over every aspect of every sentence.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NodeId, NumericsError, Tape, Tensor};
use crate::tokenizer::Polarity;

/// Probabilities below this are raised to it before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeadError {
    #[error("anchor {anchor} out of range for a {len}-token sequence")]
    AnchorOutOfRange { anchor: usize, len: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch contains no aspects")]
    EmptyBatch,
    #[error("{distributions} distributions but {labels} gold labels")]
    CountMismatch { distributions: usize, labels: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Hidden-state rows copied from the anchor positions, one per aspect.
#[derive(Debug, Clone, PartialEq)]
pub struct AspectRepresentation(pub Vec<Vec<f64>>);

/// One probability vector over the polarities per aspect.
#[derive(Debug, Clone, PartialEq)]
pub struct SentimentDistribution(pub Vec<[f64; 3]>);

impl SentimentDistribution {
    pub fn predictions(&self) -> Vec<Polarity> {
        self.0
            .iter()
            .map(|p| {
                let best = (0..3).fold(0, |b, j| if p[j] > p[b] { j } else { b });
                Polarity::from_index(best).expect("three classes")
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Plain sum over sentences, aspects and classes.
    Raw,
    /// Sum divided by the number of aspects in the batch.
    #[default]
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Value in the requested mode.
    pub loss: f64,
    /// Unnormalized sum, always reported.
    pub raw: f64,
    pub per_aspect_nll: Vec<Vec<f64>>,
    /// Probabilities that hit [`PROB_FLOOR`].
    pub clipped: usize,
}

pub fn gather_anchors(hidden: &Tensor, anchors: &[usize]) -> Result<AspectRepresentation, HeadError> {
    let len = hidden.rows();
    anchors
        .iter()
        .map(|&a| {
            if a >= len {
                Err(HeadError::AnchorOutOfRange { anchor: a, len })
            } else {
                Ok(hidden.row(a).to_vec())
            }
        })
        .collect::<Result<_, _>>()
        .map(AspectRepresentation)
}

/// `softmax(H W + b)` for each anchor representation.
pub fn classify(
    reps: &AspectRepresentation,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<SentimentDistribution, HeadError> {
    if weight.shape().len() != 2 || weight.cols() != Polarity::COUNT || bias.shape() != [Polarity::COUNT] {
        return Err(HeadError::ShapeMismatch(format!(
            "classifier weight {:?}, bias {:?}",
            weight.shape(),
            bias.shape()
        )));
    }
    let d = weight.rows();
    let mut out = Vec::with_capacity(reps.0.len());
    for h in &reps.0 {
        if h.len() != d {
            return Err(HeadError::ShapeMismatch(format!(
                "representation of length {} against weight {:?}",
                h.len(),
                weight.shape()
            )));
        }
        let mut logits = [0.0; 3];
        for (j, l) in logits.iter_mut().enumerate() {
            *l = bias.data()[j] + h.iter().enumerate().map(|(i, x)| x * weight.get(i, j)).sum::<f64>();
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFiniteInput("classify").into());
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps = logits.map(|l| (l - max).exp());
        let z: f64 = exps.iter().sum();
        out.push(exps.map(|e| e / z));
    }
    Ok(SentimentDistribution(out))
}

/// Cross-entropy of each aspect's distribution against its gold polarity,
/// summed over the batch (and divided by the aspect count in [`LossMode::Mean`]).
pub fn joint_loss(
    distributions: &[SentimentDistribution],
    gold: &[Vec<Polarity>],
    mode: LossMode,
) -> Result<LossOutput, HeadError> {
    if distributions.len() != gold.len() {
        return Err(HeadError::CountMismatch {
            distributions: distributions.len(),
            labels: gold.len(),
        });
    }
    let mut raw = 0.0;
    let mut count = 0usize;
    let mut clipped = 0;
    let mut per_aspect_nll = Vec::with_capacity(gold.len());
    for (dist, labels) in distributions.iter().zip(gold) {
        if dist.len() != labels.len() {
            return Err(HeadError::CountMismatch {
                distributions: dist.len(),
                labels: labels.len(),
            });
        }
        let mut sentence = Vec::with_capacity(labels.len());
        for (probs, &y) in dist.0.iter().zip(labels) {
            let mut nll = 0.0;
            for (j, &p) in probs.iter().enumerate() {
                if y.index() == j {
                    if p < PROB_FLOOR {
                        clipped += 1;
                    }
                    nll -= p.max(PROB_FLOOR).ln();
                }
            }
            raw += nll;
            sentence.push(nll);
        }
        count += labels.len();
        per_aspect_nll.push(sentence);
    }
    if count == 0 {
        return Err(HeadError::EmptyBatch);
    }
    let loss = match mode {
        LossMode::Raw => raw,
        LossMode::Mean => raw / count as f64,
    };
    Ok(LossOutput {
        loss,
        raw,
        per_aspect_nll,
        clipped,
    })
}

/// Tape version of gather + classify: returns the `[m x 3]` logits node, or
/// `None` when there are no anchors.
pub fn logits_on_tape(
    tape: &mut Tape,
    hidden: NodeId,
    anchors: &[usize],
    weight: NodeId,
    bias: NodeId,
) -> Result<Option<NodeId>, HeadError> {
    if anchors.is_empty() {
        return Ok(None);
    }
    let len = tape.value(hidden).rows();
    if let Some(&a) = anchors.iter().find(|&&a| a >= len) {
        return Err(HeadError::AnchorOutOfRange { anchor: a, len });
    }
    let reps = tape.gather_rows(hidden, anchors)?;
    let logits = tape.matmul(reps, weight)?;
    Ok(Some(tape.add_row(logits, bias)?))
}

/// Summed negative log-likelihood of `gold` under `softmax(logits)`.
pub fn nll_on_tape(tape: &mut Tape, logits: NodeId, gold: &[Polarity]) -> Result<NodeId, HeadError> {
    let probs = tape.softmax_rows(logits)?;
    let targets: Vec<usize> = gold.iter().map(|p| p.index()).collect();
    Ok(tape.nll(probs, &targets, PROB_FLOOR)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::grad_check;

    fn random_dist(rng: &mut ChaCha8Rng, m: usize) -> SentimentDistribution {
        SentimentDistribution(
            (0..m)
                .map(|_| {
                    let raw = [rng.random::<f64>() + 0.01, rng.random::<f64>() + 0.01, rng.random::<f64>() + 0.01];
                    let z: f64 = raw.iter().sum();
                    raw.map(|v| v / z)
                })
                .collect(),
        )
    }

    fn random_gold(rng: &mut ChaCha8Rng, m: usize) -> Vec<Polarity> {
        (0..m).map(|_| Polarity::ALL[rng.random_range(0..3)]).collect()
    }

    #[test]
    fn gather_selects_rows_exactly() {
        let rows: Vec<Vec<f64>> = (0..10).map(|t| vec![t as f64, 0.5 * t as f64]).collect();
        let hidden = Tensor::from_rows(&rows).unwrap();
        assert!(gather_anchors(&hidden, &[]).unwrap().0.is_empty());
        let reps = gather_anchors(&hidden, &[1, 8]).unwrap();
        assert_eq!(reps.0[0][0], 1.0);
        assert_eq!(reps.0[1][0], 8.0);
        assert_eq!(reps.0[1], hidden.row(8));
        assert_eq!(
            gather_anchors(&hidden, &[10]).unwrap_err(),
            HeadError::AnchorOutOfRange { anchor: 10, len: 10 }
        );
    }

    #[test]
    fn gather_gradient_hits_only_gathered_rows() {
        let hidden = Tensor::matrix(5, 3, (0..15).map(|v| v as f64 * 0.1).collect()).unwrap();
        let f = |t: &mut Tape, ids: &[NodeId]| {
            let g = t.gather_rows(ids[0], &[1, 3])?;
            Ok(t.sum(g))
        };
        assert!(grad_check(f, &[hidden.clone()], 1e-5).unwrap().max_rel_error < 1e-10);
        let mut tape = Tape::new();
        let h = tape.leaf(hidden);
        let root = f(&mut tape, &[h]).unwrap();
        tape.backward(root).unwrap();
        let g = tape.grad(h).unwrap();
        for r in 0..5 {
            let want = if r == 1 || r == 3 { 1.0 } else { 0.0 };
            assert!(g[r * 3..r * 3 + 3].iter().all(|&v| v == want));
        }
    }

    #[test]
    fn classify_closed_forms() {
        let reps = AspectRepresentation(vec![vec![0.3, -1.0, 2.0, 0.1], vec![5.0, 5.0, 5.0, 5.0]]);
        let zero_w = Tensor::zeros(&[4, 3]);
        let dist = classify(&reps, &zero_w, &Tensor::zeros(&[3])).unwrap();
        for p in &dist.0 {
            assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
        let bias = Tensor::vector(vec![10.0, 0.0, 0.0]).unwrap();
        let dist = classify(&reps, &zero_w, &bias).unwrap();
        assert!(dist.0.iter().all(|p| p[0] > 0.99));
        assert_eq!(dist.predictions(), vec![Polarity::Positive; 2]);
        assert!(classify(&reps, &Tensor::zeros(&[3, 3]), &bias).is_err());
        assert!(classify(&reps, &zero_w, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn classify_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let logits: Vec<f64> = (0..3)
            .map(|j| b[j] + h[0] * w[j] + h[1] * w[3 + j] + h[2] * w[6 + j] + h[3] * w[9 + j])
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let dist = classify(
            &AspectRepresentation(vec![h]),
            &Tensor::matrix(4, 3, w).unwrap(),
            &Tensor::vector(b).unwrap(),
        )
        .unwrap();
        for j in 0..3 {
            assert!((dist.0[0][j] - logits[j].exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_closed_forms() {
        let one_hot = SentimentDistribution(vec![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        let out = joint_loss(&[one_hot], &[vec![Polarity::Positive, Polarity::Negative]], LossMode::Mean).unwrap();
        assert!(out.loss < 1e-11);
        assert_eq!(out.clipped, 0);

        let uniform = SentimentDistribution(vec![[1.0 / 3.0; 3]; 3]);
        let gold = vec![Polarity::Neutral, Polarity::Positive, Polarity::Negative];
        let out = joint_loss(&[uniform], &[gold], LossMode::Mean).unwrap();
        assert!((out.loss - 3f64.ln()).abs() < 1e-12);
        assert!((out.raw - 3.0 * 3f64.ln()).abs() < 1e-12);
        for nll in &out.per_aspect_nll[0] {
            assert!((nll - 3f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_errors_and_clipping() {
        assert_eq!(
            joint_loss(&[], &[], LossMode::Mean).unwrap_err(),
            HeadError::EmptyBatch
        );
        let d = SentimentDistribution(vec![[0.0, 1.0, 0.0]]);
        assert!(matches!(
            joint_loss(&[d.clone()], &[vec![]], LossMode::Raw),
            Err(HeadError::CountMismatch { .. })
        ));
        let out = joint_loss(&[d], &[vec![Polarity::Positive]], LossMode::Raw).unwrap();
        assert_eq!(out.clipped, 1);
        assert!((out.loss + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn loss_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dists = vec![random_dist(&mut rng, 2), random_dist(&mut rng, 3)];
        let gold = vec![random_gold(&mut rng, 2), random_gold(&mut rng, 3)];
        let mut want = 0.0;
        for s in 0..2 {
            for i in 0..gold[s].len() {
                for j in 0..3 {
                    let indicator = if gold[s][i].index() == j { 1.0 } else { 0.0 };
                    want -= indicator * dists[s].0[i][j].ln();
                }
            }
        }
        let out = joint_loss(&dists, &gold, LossMode::Raw).unwrap();
        assert!((out.loss - want).abs() < 1e-12);
        let mean = joint_loss(&dists, &gold, LossMode::Mean).unwrap();
        assert!((mean.loss - want / 5.0).abs() < 1e-12);
    }

    #[test]
    fn logit_gradient_is_prediction_minus_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let logits = Tensor::matrix(4, 3, (0..12).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let gold = random_gold(&mut rng, 4);
        let mut tape = Tape::new();
        let l = tape.leaf(logits.clone());
        let loss = nll_on_tape(&mut tape, l, &gold).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(l).unwrap().to_vec();
        for r in 0..4 {
            let z: f64 = logits.row(r).iter().map(|v| v.exp()).sum();
            for j in 0..3 {
                let y = logits.get(r, j).exp() / z;
                let onehot = if gold[r].index() == j { 1.0 } else { 0.0 };
                assert!((g[r * 3 + j] - (y - onehot)).abs() < 1e-8);
            }
        }
        let fd = grad_check(|t, ids| nll_on_tape(t, ids[0], &gold).map_err(|e| match e {
            HeadError::Numerics(n) => n,
            other => panic!("{other}"),
        }), &[logits], 1e-5).unwrap();
        assert!(fd.max_rel_error < 1e-8);
    }

    #[test]
    fn tape_head_matches_value_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hidden = Tensor::matrix(6, 4, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let w = Tensor::matrix(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::vector(vec![0.1, -0.2, 0.3]).unwrap();
        let anchors = [0, 4];
        let gold = vec![Polarity::Negative, Polarity::Neutral];
        let dist = classify(&gather_anchors(&hidden, &anchors).unwrap(), &w, &b).unwrap();
        let want = joint_loss(&[dist], &[gold.clone()], LossMode::Raw).unwrap().raw;

        let mut tape = Tape::new();
        let (h, wi, bi) = (tape.leaf(hidden), tape.leaf(w), tape.leaf(b));
        let logits = logits_on_tape(&mut tape, h, &anchors, wi, bi).unwrap().unwrap();
        let loss = nll_on_tape(&mut tape, logits, &gold).unwrap();
        assert!((tape.value(loss).data()[0] - want).abs() < 1e-12);
        assert!(logits_on_tape(&mut tape, h, &[], wi, bi).unwrap().is_none());
    }

    proptest! {
        #[test]
        fn raw_loss_is_additive(seed in any::<u64>(), a in 1usize..4, b in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (da, db) = (random_dist(&mut rng, a), random_dist(&mut rng, b));
            let (ga, gb) = (random_gold(&mut rng, a), random_gold(&mut rng, b));
            let la = joint_loss(&[da.clone()], &[ga.clone()], LossMode::Raw).unwrap().loss;
            let lb = joint_loss(&[db.clone()], &[gb.clone()], LossMode::Raw).unwrap().loss;
            let lab = joint_loss(&[da, db], &[ga, gb], LossMode::Raw).unwrap().loss;
            prop_assert!((lab - la - lb).abs() < 1e-12);
        }

        #[test]
        fn logit_shift_leaves_distribution_unchanged(seed in any::<u64>(), shift in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w = Tensor::matrix(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let shifted: Vec<f64> = b.iter().map(|v| v + shift).collect();
            let reps = AspectRepresentation(vec![h]);
            let p = classify(&reps, &w, &Tensor::vector(b).unwrap()).unwrap();
            let q = classify(&reps, &w, &Tensor::vector(shifted).unwrap()).unwrap();
            for j in 0..3 {
                prop_assert!((p.0[0][j] - q.0[0][j]).abs() < 1e-12);
            }
            prop_assert_eq!(p.predictions(), q.predictions());
        }
    }
}
