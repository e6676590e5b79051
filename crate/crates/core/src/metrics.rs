//! Per-class precision/recall/F1, Macro-F1, accuracy and the two-subtask
//! combined score. A zero denominator yields 0.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::Polarity;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("{predictions} predictions but {gold} gold labels")]
    LengthMismatch { predictions: usize, gold: usize },
    #[error("no labels to score")]
    EmptyInput,
}

/// Per-class counts; additive across evaluation shards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: [usize; 3],
    pub fp: [usize; 3],
    pub fn_: [usize; 3],
    pub total: usize,
}

impl ConfusionCounts {
    pub fn from_labels(predictions: &[Polarity], gold: &[Polarity]) -> Result<Self, MetricsError> {
        if predictions.len() != gold.len() {
            return Err(MetricsError::LengthMismatch {
                predictions: predictions.len(),
                gold: gold.len(),
            });
        }
        let mut c = Self::default();
        for (&p, &g) in predictions.iter().zip(gold) {
            if p == g {
                c.tp[p.index()] += 1;
            } else {
                c.fp[p.index()] += 1;
                c.fn_[g.index()] += 1;
            }
            c.total += 1;
        }
        Ok(c)
    }

    pub fn merge(&mut self, other: &Self) {
        for k in 0..3 {
            self.tp[k] += other.tp[k];
            self.fp[k] += other.fp[k];
            self.fn_[k] += other.fn_[k];
        }
        self.total += other.total;
    }

    pub fn report(&self) -> Result<MetricsReport, MetricsError> {
        if self.total == 0 {
            return Err(MetricsError::EmptyInput);
        }
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let class = |k: usize| {
            let p = ratio(self.tp[k], self.tp[k] + self.fp[k]);
            let r = ratio(self.tp[k], self.tp[k] + self.fn_[k]);
            let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            ClassScores { p, r, f1 }
        };
        let per_class = PerClass {
            positive: class(0),
            neutral: class(1),
            negative: class(2),
        };
        let macro_f1 = (per_class.positive.f1 + per_class.neutral.f1 + per_class.negative.f1) / 3.0;
        Ok(MetricsReport {
            per_class,
            macro_f1,
            accuracy: ratio(self.tp.iter().sum(), self.total),
            combined: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    pub positive: ClassScores,
    pub neutral: ClassScores,
    pub negative: ClassScores,
}

impl PerClass {
    pub fn get(&self, p: Polarity) -> &ClassScores {
        match p {
            Polarity::Positive => &self.positive,
            Polarity::Neutral => &self.neutral,
            Polarity::Negative => &self.negative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: PerClass,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub combined: Option<f64>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>8} {:>8} {:>8}", "class", "P", "R", "F1")?;
        for p in Polarity::ALL {
            let c = self.per_class.get(p);
            writeln!(f, "{:<10} {:>8.4} {:>8.4} {:>8.4}", p.as_str(), c.p, c.r, c.f1)?;
        }
        write!(f, "macro_f1 {:.4}  accuracy {:.4}", self.macro_f1, self.accuracy)?;
        if let Some(c) = self.combined {
            write!(f, "  combined {c:.4}")?;
        }
        Ok(())
    }
}

pub fn score(predictions: &[Polarity], gold: &[Polarity]) -> Result<MetricsReport, MetricsError> {
    ConfusionCounts::from_labels(predictions, gold)?.report()
}

/// Mean of the term-level and category-level Macro-F1.
pub fn combined_score(atsa: &MetricsReport, acsa: &MetricsReport) -> f64 {
    (atsa.macro_f1 + acsa.macro_f1) / 2.0
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use Polarity::{Negative as Neg, Neutral as Neu, Positive as Pos};

    #[test]
    fn perfect_predictor() {
        let gold = [Pos, Neu, Neg, Pos, Neg];
        let r = score(&gold, &gold).unwrap();
        for p in Polarity::ALL {
            let c = r.per_class.get(p);
            assert_eq!((c.p, c.r, c.f1), (1.0, 1.0, 1.0));
        }
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn small_hand_case() {
        let r = score(&[Pos, Neg, Neg, Neu], &[Pos, Pos, Neg, Neu]).unwrap();
        assert!((r.per_class.positive.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.per_class.negative.p - 0.5).abs() < 1e-12);
        assert!((r.macro_f1 - 7.0 / 9.0).abs() < 1e-12);
        assert_eq!(r.accuracy, 0.75);
    }

    #[test]
    fn single_class_predictor_on_uniform_gold() {
        let gold = [Pos, Neu, Neg, Pos, Neu, Neg];
        let r = score(&[Neu; 6], &gold).unwrap();
        assert_eq!(r.per_class.neutral.f1, 2.0 * (1.0 / 3.0) * 1.0 / (1.0 / 3.0 + 1.0));
        assert_eq!(r.per_class.positive.f1, 0.0);
        assert_eq!(r.per_class.negative.p, 0.0);
        assert!((r.macro_f1 - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert_eq!(score(&[], &[]).unwrap_err(), MetricsError::EmptyInput);
        assert!(matches!(score(&[Pos], &[]), Err(MetricsError::LengthMismatch { .. })));
    }

    #[test]
    fn combined() {
        let mut a = score(&[Pos, Neg, Neu], &[Pos, Neg, Neu]).unwrap();
        let b = a;
        assert_eq!(combined_score(&a, &b), 1.0);
        a.macro_f1 = 0.8524;
        let mut c = b;
        c.macro_f1 = 0.7941;
        assert!((combined_score(&a, &c) - 0.82325).abs() < 1e-15);
    }

    #[test]
    fn json_field_names() {
        let r = score(&[Pos, Neg], &[Pos, Neu]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert!(v["per_class"]["negative"]["f1"].is_number());
        assert!(v["per_class"]["positive"]["p"].is_number());
        assert!(v["per_class"]["neutral"]["r"].is_number());
        assert!(v["macro_f1"].is_number() && v["accuracy"].is_number());
        assert!(v["combined"].is_null());
        assert!(r.to_string().contains("macro_f1 0.3333"));
    }

    #[test]
    fn counts_merge_additively() {
        let (p1, g1) = ([Pos, Neg, Neu], [Pos, Pos, Neu]);
        let (p2, g2) = ([Neg, Neg], [Neg, Neu]);
        let mut c = ConfusionCounts::from_labels(&p1, &g1).unwrap();
        c.merge(&ConfusionCounts::from_labels(&p2, &g2).unwrap());
        let all_p: Vec<_> = p1.iter().chain(&p2).copied().collect();
        let all_g: Vec<_> = g1.iter().chain(&g2).copied().collect();
        assert_eq!(c.report().unwrap(), score(&all_p, &all_g).unwrap());
    }

    fn labels(n: usize) -> impl Strategy<Value = (Vec<Polarity>, Vec<Polarity>)> {
        let one = prop_oneof![Just(Pos), Just(Neu), Just(Neg)];
        (
            proptest::collection::vec(one.clone(), n),
            proptest::collection::vec(one, n),
        )
    }

    proptest! {
        #[test]
        fn permutation_invariant((pred, gold) in (1usize..40).prop_flat_map(labels), rot in 0usize..40) {
            let r = score(&pred, &gold).unwrap();
            let k = rot % pred.len();
            let mut p2 = pred.clone();
            let mut g2 = gold.clone();
            p2.rotate_left(k);
            g2.rotate_left(k);
            p2.reverse();
            g2.reverse();
            prop_assert_eq!(score(&p2, &g2).unwrap(), r);
        }

        #[test]
        fn relabeling_preserves_macro_f1((pred, gold) in (1usize..40).prop_flat_map(labels)) {
            let map = |p: Polarity| match p { Pos => Neg, Neu => Pos, Neg => Neu };
            let r = score(&pred, &gold).unwrap();
            let p2: Vec<_> = pred.iter().map(|&p| map(p)).collect();
            let g2: Vec<_> = gold.iter().map(|&p| map(p)).collect();
            prop_assert!((score(&p2, &g2).unwrap().macro_f1 - r.macro_f1).abs() < 1e-12);
            let tp: usize = pred.iter().zip(&gold).filter(|(a, b)| a == b).count();
            prop_assert_eq!(r.accuracy, tp as f64 / pred.len() as f64);
            prop_assert!(r.macro_f1 >= 0.0 && r.macro_f1 <= 1.0);
        }
    }
}
