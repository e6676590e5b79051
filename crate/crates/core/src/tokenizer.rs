//! Vocabulary and the three sequence layouts fed to the encoder.
//!
//! * multi-aspect term layout: every aspect span is wrapped in `[AS] ... [AE]`
//!   inside the sentence, and the `[AS]` of each span is its anchor;
//! * multi-aspect category layout: the sentence followed by `[AS] category`
//!   for every category, anchors on each `[AS]`;
//! * single-aspect baseline: `[CLS] aspect [SEP] sentence [SEP]`, one
//!   instance per aspect, anchored on `[CLS]`.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const ASPECT_START: &str = "[AS]";
pub const ASPECT_END: &str = "[AE]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const RESERVED: [&str; 6] = [PAD, UNK, ASPECT_START, ASPECT_END, CLS, SEP];

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const AS_ID: usize = 2;
pub const AE_ID: usize = 3;
pub const CLS_ID: usize = 4;
pub const SEP_ID: usize = 5;

pub const DEFAULT_MAX_LEN: usize = 128;

const VOCAB_HEADER: &str = "# tmm-vocab v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("corpus contains no tokens")]
    EmptyCorpus,
    #[error("min_frequency must be at least 1")]
    InvalidMinFrequency,
    #[error("aspect span {start}..{end} out of range for a {len}-word sentence")]
    SpanOutOfRange { start: usize, end: usize, len: usize },
    #[error("aspect spans overlap or are not sorted by start ({prev_end} > {start})")]
    OverlappingSpans { prev_end: usize, start: usize },
    #[error("unknown aspect category '{0}'")]
    UnknownCategory(String),
    #[error("category '{0}' appears twice in one sentence")]
    DuplicateCategory(String),
    #[error("aspect index {index} out of range for {count} aspects")]
    AspectIndexOutOfRange { index: usize, count: usize },
    #[error("sequence of {len} tokens cannot be cut to {max_len} without cutting an aspect")]
    TruncationCutsAspect { len: usize, max_len: usize },
    #[error("malformed vocabulary file: {0}")]
    BadVocabFile(String),
    #[error("io: {0}")]
    Io(String),
}

/// Sentiment label set; the integer encoding is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive = 0,
    Neutral = 1,
    Negative = 2,
}

impl Polarity {
    pub const COUNT: usize = 3;
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Neutral, Polarity::Negative];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Neutral => "neutral",
            Polarity::Negative => "negative",
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The eight predefined restaurant-review aspect categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Food,
    Service,
    Staff,
    Price,
    Ambience,
    Menu,
    Place,
    Miscellaneous,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::Food,
        Category::Service,
        Category::Staff,
        Category::Price,
        Category::Ambience,
        Category::Menu,
        Category::Place,
        Category::Miscellaneous,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Food => "food",
            Category::Service => "service",
            Category::Staff => "staff",
            Category::Price => "price",
            Category::Ambience => "ambience",
            Category::Menu => "menu",
            Category::Place => "place",
            Category::Miscellaneous => "miscellaneous",
        }
    }

    pub fn names() -> Vec<&'static str> {
        Self::ALL.iter().map(|c| c.as_str()).collect()
    }
}

impl FromStr for Category {
    type Err = TokenizerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s.to_lowercase())
            .ok_or_else(|| TokenizerError::UnknownCategory(s.to_string()))
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Lowercases, splits on whitespace, and splits punctuation off as separate
/// tokens. Apostrophes and hyphens stay inside words.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() && ch != '\'' && ch != '-' {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.extend(ch.to_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    min_frequency: usize,
}

impl Vocab {
    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>, min_frequency: usize) -> Result<Self, TokenizerError> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(TokenizerError::BadVocabFile(
                "reserved tokens missing from ids 0..5".into(),
            ));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(TokenizerError::BadVocabFile(format!("duplicate token '{t}'")));
            }
        }
        Ok(Self {
            token_to_id,
            id_to_token: tokens,
            min_frequency,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    /// Id of `token`, or `[UNK]` when it is out of vocabulary.
    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK).to_string())
            .collect()
    }

    pub fn is_special(id: usize) -> bool {
        id < RESERVED.len()
    }

    /// Header line, then one token per line; line `k` after the header holds id `k`.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{VOCAB_HEADER} min_frequency={}", self.min_frequency)?;
        for t in &self.id_to_token {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, TokenizerError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| TokenizerError::BadVocabFile("empty file".into()))?
            .map_err(|e| TokenizerError::Io(e.to_string()))?;
        let min_frequency = header
            .strip_prefix(VOCAB_HEADER)
            .and_then(|rest| rest.trim().strip_prefix("min_frequency="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| TokenizerError::BadVocabFile(format!("bad header '{header}'")))?;
        let tokens = lines
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| TokenizerError::Io(e.to_string()))?;
        Self::from_tokens(tokens, min_frequency)
    }
}

/// Counts tokens and assigns ids after the reserved block in descending count,
/// then lexicographic, order. Tokens below `min_frequency` stay out and map to `[UNK]`.
pub fn build_vocab<I, S>(corpus: I, min_frequency: usize) -> Result<Vocab, TokenizerError>
where
    I: IntoIterator,
    I::Item: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    build_vocab_with(corpus, min_frequency, &[])
}

/// As [`build_vocab`], then appends each of `always` not already present,
/// in the given order.
pub fn build_vocab_with<I, S>(
    corpus: I,
    min_frequency: usize,
    always: &[&str],
) -> Result<Vocab, TokenizerError>
where
    I: IntoIterator,
    I::Item: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if min_frequency == 0 {
        return Err(TokenizerError::InvalidMinFrequency);
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut seen_any = false;
    for seq in corpus {
        for tok in seq {
            seen_any = true;
            *counts.entry(tok.as_ref().to_string()).or_default() += 1;
        }
    }
    if !seen_any {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_frequency && !RESERVED.contains(&t.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(kept.into_iter().map(|(t, _)| t));
    for extra in always {
        if !tokens.iter().any(|t| t == extra) {
            tokens.push(extra.to_string());
        }
    }
    Vocab::from_tokens(tokens, min_frequency)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermAspect {
    /// First word, inclusive.
    pub start: usize,
    /// One past the last word.
    pub end: usize,
    /// Absent for unlabeled input.
    pub polarity: Option<Polarity>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtsaExample {
    pub tokens: Vec<String>,
    pub aspects: Vec<TermAspect>,
}

impl AtsaExample {
    pub fn validate(&self) -> Result<(), TokenizerError> {
        let n = self.tokens.len();
        let mut prev_end = 0;
        for a in &self.aspects {
            if a.start >= a.end || a.end > n {
                return Err(TokenizerError::SpanOutOfRange {
                    start: a.start,
                    end: a.end,
                    len: n,
                });
            }
            if a.start < prev_end {
                return Err(TokenizerError::OverlappingSpans {
                    prev_end,
                    start: a.start,
                });
            }
            prev_end = a.end;
        }
        Ok(())
    }

    pub fn term(&self, i: usize) -> &[String] {
        &self.tokens[self.aspects[i].start..self.aspects[i].end]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryAspect {
    pub category: Category,
    pub polarity: Option<Polarity>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcsaExample {
    pub tokens: Vec<String>,
    pub aspects: Vec<CategoryAspect>,
}

impl AcsaExample {
    pub fn validate(&self) -> Result<(), TokenizerError> {
        for (i, a) in self.aspects.iter().enumerate() {
            if self.aspects[..i].iter().any(|b| b.category == a.category) {
                return Err(TokenizerError::DuplicateCategory(a.category.to_string()));
            }
        }
        Ok(())
    }
}

/// A sentence of either task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Example {
    Atsa(AtsaExample),
    Acsa(AcsaExample),
}

impl Example {
    pub fn tokens(&self) -> &[String] {
        match self {
            Example::Atsa(e) => &e.tokens,
            Example::Acsa(e) => &e.tokens,
        }
    }

    pub fn aspect_count(&self) -> usize {
        match self {
            Example::Atsa(e) => e.aspects.len(),
            Example::Acsa(e) => e.aspects.len(),
        }
    }

    pub fn polarities(&self) -> Vec<Option<Polarity>> {
        match self {
            Example::Atsa(e) => e.aspects.iter().map(|a| a.polarity).collect(),
            Example::Acsa(e) => e.aspects.iter().map(|a| a.polarity).collect(),
        }
    }

    /// Gold labels when every aspect is labeled.
    pub fn gold(&self) -> Option<Vec<Polarity>> {
        self.polarities().into_iter().collect()
    }

    /// Words naming aspect `i`: the term words, or the category name.
    pub fn aspect_words(&self, i: usize) -> Vec<String> {
        match self {
            Example::Atsa(e) => e.term(i).to_vec(),
            Example::Acsa(e) => vec![e.aspects[i].category.to_string()],
        }
    }

    pub fn validate(&self) -> Result<(), TokenizerError> {
        match self {
            Example::Atsa(e) => e.validate(),
            Example::Acsa(e) => e.validate(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeTag {
    TmmAtsa,
    TmmAcsa,
    BaselineSingle,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSequence {
    pub ids: Vec<usize>,
    /// Position of the pooling token for each encoded aspect, in aspect order.
    pub anchors: Vec<usize>,
    pub gold: Option<Vec<Polarity>>,
    pub scheme: SchemeTag,
    /// Position in `ids` of each sentence word that survived truncation.
    pub word_positions: Vec<usize>,
}

fn truncation_error(len: usize, max_len: usize) -> TokenizerError {
    TokenizerError::TruncationCutsAspect { len, max_len }
}

/// Wraps each aspect span in `[AS] ... [AE]`; anchors are the `[AS]` positions.
///
/// Sequences longer than `max_len` are cut from the right, provided no
/// `[AS] ... [AE]` region crosses or lies beyond the cut.
pub fn encode_tmm_atsa(
    example: &AtsaExample,
    vocab: &Vocab,
    max_len: usize,
) -> Result<EncodedSequence, TokenizerError> {
    example.validate()?;
    let n = example.tokens.len();
    let m = example.aspects.len();
    let mut ids = Vec::with_capacity(n + 2 * m);
    let mut anchors = Vec::with_capacity(m);
    let mut word_positions = Vec::with_capacity(n);
    let mut spans = example.aspects.iter().peekable();
    for (w, word) in example.tokens.iter().enumerate() {
        if spans.peek().is_some_and(|a| a.start == w) {
            anchors.push(ids.len());
            ids.push(AS_ID);
        }
        word_positions.push(ids.len());
        ids.push(vocab.id(word));
        if spans.peek().is_some_and(|a| a.end == w + 1) {
            ids.push(AE_ID);
            spans.next();
        }
    }
    let len = ids.len();
    if len > max_len {
        let last_ae = ids.iter().rposition(|&i| i == AE_ID);
        if last_ae.is_some_and(|p| p >= max_len) {
            return Err(truncation_error(len, max_len));
        }
        ids.truncate(max_len);
        word_positions.retain(|&p| p < max_len);
    }
    Ok(EncodedSequence {
        ids,
        anchors,
        gold: example.aspects.iter().map(|a| a.polarity).collect(),
        scheme: SchemeTag::TmmAtsa,
        word_positions,
    })
}

/// Sentence words followed by `[AS] category` per aspect, in the given order.
///
/// When too long, sentence words are dropped from the right end of the
/// sentence so the category block stays whole.
pub fn encode_tmm_acsa(
    example: &AcsaExample,
    vocab: &Vocab,
    max_len: usize,
) -> Result<EncodedSequence, TokenizerError> {
    example.validate()?;
    let m = example.aspects.len();
    let suffix = 2 * m;
    let full = example.tokens.len() + suffix;
    if suffix > max_len || (full > max_len && max_len - suffix == 0) {
        return Err(truncation_error(full, max_len));
    }
    let n = example.tokens.len().min(max_len - suffix);
    let mut ids = vocab.encode_words(&example.tokens[..n]);
    let word_positions = (0..n).collect();
    let mut anchors = Vec::with_capacity(m);
    for a in &example.aspects {
        let name = a.category.as_str();
        if !vocab.contains(name) {
            return Err(TokenizerError::UnknownCategory(name.to_string()));
        }
        anchors.push(ids.len());
        ids.push(AS_ID);
        ids.push(vocab.id(name));
    }
    Ok(EncodedSequence {
        ids,
        anchors,
        gold: example.aspects.iter().map(|a| a.polarity).collect(),
        scheme: SchemeTag::TmmAcsa,
        word_positions,
    })
}

/// `[CLS] aspect [SEP] sentence [SEP]` for one aspect, anchored at `[CLS]`.
/// Too-long inputs lose sentence words from the right; the final `[SEP]` stays.
pub fn encode_baseline_single(
    example: &Example,
    aspect_index: usize,
    vocab: &Vocab,
    max_len: usize,
) -> Result<EncodedSequence, TokenizerError> {
    example.validate()?;
    let count = example.aspect_count();
    if aspect_index >= count {
        return Err(TokenizerError::AspectIndexOutOfRange {
            index: aspect_index,
            count,
        });
    }
    let aspect = example.aspect_words(aspect_index);
    if let Example::Acsa(_) = example {
        if !vocab.contains(&aspect[0]) {
            return Err(TokenizerError::UnknownCategory(aspect[0].clone()));
        }
    }
    let words = example.tokens();
    let prefix = aspect.len() + 2;
    let full = prefix + words.len() + 1;
    if prefix + 1 >= max_len && full > max_len {
        return Err(truncation_error(full, max_len));
    }
    let n = words.len().min(max_len - prefix - 1);
    let mut ids = Vec::with_capacity(prefix + n + 1);
    ids.push(CLS_ID);
    ids.extend(vocab.encode_words(&aspect));
    ids.push(SEP_ID);
    let word_positions = (prefix..prefix + n).collect();
    ids.extend(vocab.encode_words(&words[..n]));
    ids.push(SEP_ID);
    Ok(EncodedSequence {
        ids,
        anchors: vec![0],
        gold: example.polarities()[aspect_index].map(|p| vec![p]),
        scheme: SchemeTag::BaselineSingle,
        word_positions,
    })
}
