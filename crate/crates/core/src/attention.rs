//! Head-averaged attention export (numeric matrix and static HTML heatmap)
//! and the cue-localization probe over synthetic sentences.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{parse_synthetic, Corpus, SyntheticSpec};
use crate::encoder::{average_attention, LayerSelector};
use crate::numerics::Tensor;
use crate::tokenizer::{Example, Vocab};
use crate::train::{encode_example, Model, Scheme, TrainError};

/// Head-averaged attention over one encoded sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub tokens: Vec<String>,
    /// Anchor position of each aspect, in aspect order.
    pub anchors: Vec<usize>,
    pub aspect_labels: Vec<String>,
    /// `"all"` or a 0-based layer index.
    pub layer: String,
    /// `T x T`, row `i` is the distribution of token `i` over the sequence.
    pub matrix: Vec<Vec<f64>>,
}

fn layer_name(sel: LayerSelector) -> String {
    match sel {
        LayerSelector::All => "all".into(),
        LayerSelector::Layer(l) => l.to_string(),
    }
}

/// Attention of a multi-aspect model on one sentence.
pub fn attention_map(model: &Model, example: &Example, layer: LayerSelector) -> Result<AttentionMap, TrainError> {
    if model.scheme != Scheme::Tmm {
        return Err(TrainError::Config("attention export needs a tmm model".into()));
    }
    let enc = encode_example(example, Scheme::Tmm, &model.vocab, model.config.max_len)?.remove(0);
    let inst = crate::train::Instance::from((0, enc));
    let (_, record) = model.run_instance(&inst)?;
    let avg = average_attention(&record, layer)?;
    Ok(AttentionMap {
        tokens: model.vocab.decode(&inst.ids),
        aspect_labels: (0..example.aspect_count())
            .map(|i| example.aspect_words(i).join(" "))
            .collect(),
        anchors: inst.anchors,
        layer: layer_name(layer),
        matrix: avg.to_rows(),
    })
}

impl AttentionMap {
    /// One row per line, tab-separated, preceded by a header row of tokens.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push('\t');
        out.push_str(&self.tokens.join("\t"));
        out.push('\n');
        for (tok, row) in self.tokens.iter().zip(&self.matrix) {
            out.push_str(tok);
            for v in row {
                write!(out, "\t{v:.17e}").expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("map serializes")
    }

    /// A standalone page: every anchor row drawn as the sentence with each
    /// token shaded by its weight (darker is larger), then the full matrix.
    pub fn to_html(&self) -> String {
        let mut h = String::new();
        h.push_str(
            "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>attention</title>\n<style>\n\
             body{font-family:sans-serif;margin:2em}\n\
             table{border-collapse:collapse;margin-bottom:2em}\n\
             td,th{padding:4px 6px;border:1px solid #ddd;text-align:center;font-size:13px}\n\
             th.row{text-align:right;white-space:nowrap}\n\
             </style></head><body>\n",
        );
        writeln!(h, "<h1>Head-averaged attention (layer {})</h1>", escape(&self.layer)).expect("write");
        h.push_str("<h2>Anchor rows</h2>\n<table>\n");
        for (a, &pos) in self.anchors.iter().enumerate() {
            let label = self.aspect_labels.get(a).map_or("", String::as_str);
            write!(h, "<tr><th class=\"row anchor\">aspect {}: {}</th>", a + 1, escape(label)).expect("write");
            for (tok, &w) in self.tokens.iter().zip(&self.matrix[pos]) {
                h.push_str(&cell(tok, w));
            }
            h.push_str("</tr>\n");
        }
        h.push_str("</table>\n<h2>Full matrix</h2>\n<table>\n<tr><th></th>");
        for tok in &self.tokens {
            write!(h, "<th>{}</th>", escape(tok)).expect("write");
        }
        h.push_str("</tr>\n");
        for (i, row) in self.matrix.iter().enumerate() {
            let label = match self.anchors.iter().position(|&p| p == i) {
                Some(a) => format!("{} (aspect {})", escape(&self.tokens[i]), a + 1),
                None => escape(&self.tokens[i]),
            };
            write!(h, "<tr><th class=\"row\">{label}</th>").expect("write");
            for &w in row {
                h.push_str(&cell(&format!("{w:.3}"), w));
            }
            h.push_str("</tr>\n");
        }
        h.push_str("</table>\n</body></html>\n");
        h
    }
}

fn cell(text: &str, weight: f64) -> String {
    let alpha = weight.clamp(0.0, 1.0);
    let color = if alpha > 0.5 { "#fff" } else { "#000" };
    format!(
        "<td title=\"{weight:.6}\" style=\"background:rgba(0,60,200,{alpha:.4});color:{color}\">{}</td>",
        escape(text)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LocalizationReport {
    pub anchors: usize,
    pub hits: usize,
    pub rate: f64,
    /// Sentences whose every anchor hit.
    pub sentences: usize,
    pub sentence_hits: usize,
}

/// Fraction of anchors whose largest attention weight on a non-special
/// token falls on their own clause's copula, intensifier or cue word.
pub fn cue_localization(
    model: &Model,
    corpus: &Corpus,
    spec: &SyntheticSpec,
    layer: LayerSelector,
) -> Result<LocalizationReport, TrainError> {
    let mut report = LocalizationReport {
        anchors: 0,
        hits: 0,
        rate: 0.0,
        sentences: 0,
        sentence_hits: 0,
    };
    for ex in corpus.examples() {
        let parses = parse_synthetic(ex, spec)
            .ok_or_else(|| TrainError::Config("corpus does not follow the synthetic grammar".into()))?;
        let enc = encode_example(ex, Scheme::Tmm, &model.vocab, model.config.max_len)?.remove(0);
        let inst = crate::train::Instance::from((0, enc.clone()));
        let (_, record) = model.run_instance(&inst)?;
        let avg = average_attention(&record, layer)?;
        let mut all = true;
        for (a, parse) in parses.iter().enumerate() {
            let top = top_word(&avg, enc.anchors[a], &enc.ids);
            let region: Vec<usize> = parse.cue_region.iter().map(|&w| enc.word_positions[w]).collect();
            let hit = top.is_some_and(|t| region.contains(&t));
            report.anchors += 1;
            report.hits += usize::from(hit);
            all &= hit;
        }
        report.sentences += 1;
        report.sentence_hits += usize::from(all);
    }
    report.rate = report.hits as f64 / report.anchors.max(1) as f64;
    Ok(report)
}

/// Position of the largest weight in `row` among non-special tokens; the
/// first wins on ties.
fn top_word(attention: &Tensor, row: usize, ids: &[usize]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, &id) in ids.iter().enumerate() {
        if Vocab::is_special(id) {
            continue;
        }
        let w = attention.get(row, j);
        if best.is_none_or(|(_, b)| w > b) {
            best = Some((j, w));
        }
    }
    best.map(|(j, _)| j)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map() -> AttentionMap {
        AttentionMap {
            tokens: vec!["[AS]".into(), "a<b".into(), "[AE]".into()],
            anchors: vec![0],
            aspect_labels: vec!["a<b".into()],
            layer: "all".into(),
            matrix: vec![vec![0.2, 0.7, 0.1], vec![1.0, 0.0, 0.0], vec![0.3, 0.3, 0.4]],
        }
    }

    #[test]
    fn html_labels_anchor_rows_and_escapes() {
        let h = map().to_html();
        assert!(h.contains("aspect 1: a&lt;b"));
        assert!(h.contains("[AS] (aspect 1)"));
        assert!(!h.contains("a<b"));
        assert!(h.contains("rgba(0,60,200,0.7000)"));
    }

    #[test]
    fn tsv_round_trips_values() {
        let tsv = map().to_tsv();
        let rows: Vec<Vec<f64>> = tsv
            .lines()
            .skip(1)
            .map(|l| l.split('\t').skip(1).map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows, map().matrix);
    }

    #[test]
    fn top_word_skips_special_tokens() {
        let t = Tensor::from_rows(&[vec![0.6, 0.1, 0.3]]).unwrap();
        assert_eq!(top_word(&t, 0, &[2, 9, 10]), Some(2));
        assert_eq!(top_word(&t, 0, &[2, 3, 4]), None);
    }
}
