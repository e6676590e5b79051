//! Corpus files, statistics, and a seeded synthetic multi-aspect corpus.
//!
//! The file format is line-delimited JSON behind a version header:
//!
//! ```text
//! # tmm-absa v1
//! {"text":"the salmon is tasty while the waiter is rude","task":"atsa","aspects":[{"term":"salmon","from":1,"to":2,"polarity":"positive"},{"term":"waiter","from":6,"to":7,"polarity":"negative"}]}
//! {"text":"the salmon is tasty while the waiter is rude","task":"acsa","aspects":[{"category":"food","polarity":"positive"},{"category":"staff","polarity":"negative"}]}
//! ```
//!
//! `from`/`to` are word indices over [`tokenize`]d text, end-exclusive.
//! `polarity` may be omitted on unlabeled input.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{
    tokenize, AcsaExample, AtsaExample, Category, CategoryAspect, Example, Polarity, TermAspect,
    TokenizerError,
};

pub const FORMAT_HEADER: &str = "# tmm-absa v1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("line {line}: span {from}..{to} reads '{found}' but the term is '{term}'")]
    SpanMismatch {
        line: usize,
        from: usize,
        to: usize,
        found: String,
        term: String,
    },
    #[error("corpus has no records")]
    EmptyCorpus,
    #[error("line {line}: record task {found} does not match requested task {expected}")]
    TaskMismatch {
        line: usize,
        expected: Task,
        found: Task,
    },
    #[error("unreadable synthetic spec: {0}")]
    SpecSyntax(String),
    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),
    #[error("line {line}: {source}")]
    Invalid {
        line: usize,
        source: TokenizerError,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Atsa,
    Acsa,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Atsa => "atsa",
            Task::Acsa => "acsa",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "atsa" => Ok(Task::Atsa),
            "acsa" => Ok(Task::Acsa),
            other => Err(format!("unknown task '{other}' (expected atsa or acsa)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// One aspect as stored on disk. Term fields are used for atsa, `category`
/// for acsa; prediction output fills `predicted` and `probabilities`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AspectRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub term: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polarity: Option<Polarity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<Polarity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub text: String,
    pub task: Task,
    pub aspects: Vec<AspectRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub text: String,
    pub example: Example,
}

impl Sentence {
    pub fn to_record(&self) -> Record {
        match &self.example {
            Example::Atsa(e) => Record {
                text: self.text.clone(),
                task: Task::Atsa,
                aspects: e
                    .aspects
                    .iter()
                    .map(|a| AspectRecord {
                        term: Some(e.tokens[a.start..a.end].join(" ")),
                        from: Some(a.start),
                        to: Some(a.end),
                        polarity: a.polarity,
                        ..Default::default()
                    })
                    .collect(),
            },
            Example::Acsa(e) => Record {
                text: self.text.clone(),
                task: Task::Acsa,
                aspects: e
                    .aspects
                    .iter()
                    .map(|a| AspectRecord {
                        category: Some(a.category.to_string()),
                        polarity: a.polarity,
                        ..Default::default()
                    })
                    .collect(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub source: String,
    pub format_version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub task: Task,
    pub split: Option<Split>,
    pub sentences: Vec<Sentence>,
    pub provenance: Provenance,
    /// Sentences with fewer than two aspects, or with a single polarity.
    pub warnings: Vec<String>,
}

impl Corpus {
    pub fn examples(&self) -> impl Iterator<Item = &Example> {
        self.sentences.iter().map(|s| &s.example)
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn aspect_count(&self) -> usize {
        self.examples().map(Example::aspect_count).sum()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{FORMAT_HEADER}")?;
        for s in &self.sentences {
            let line = serde_json::to_string(&s.to_record()).expect("record serializes");
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let io = |source| DataError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = std::fs::File::create(path).map_err(io)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(io)?;
        w.flush().map_err(io)
    }
}

fn mams_warning(ex: &Example) -> Option<String> {
    let m = ex.aspect_count();
    if m < 2 {
        return Some(format!("{m} aspect(s); multi-aspect sentences have at least 2"));
    }
    let labels: HashSet<Polarity> = ex.polarities().into_iter().flatten().collect();
    if ex.gold().is_some() && labels.len() < 2 {
        return Some("all aspects share one polarity".into());
    }
    None
}

/// Turns one parsed record into an example, checking spans against terms.
pub fn record_to_example(record: &Record, line: usize) -> Result<Example, DataError> {
    let tokens = tokenize(&record.text);
    let parse = |message: String| DataError::ParseError { line, message };
    let example = match record.task {
        Task::Atsa => {
            let mut aspects = Vec::with_capacity(record.aspects.len());
            for a in &record.aspects {
                let (Some(term), Some(from), Some(to)) = (&a.term, a.from, a.to) else {
                    return Err(parse("atsa aspect needs term, from and to".into()));
                };
                if from >= to || to > tokens.len() {
                    return Err(DataError::Invalid {
                        line,
                        source: TokenizerError::SpanOutOfRange {
                            start: from,
                            end: to,
                            len: tokens.len(),
                        },
                    });
                }
                let found = tokens[from..to].join(" ");
                if found != tokenize(term).join(" ") {
                    return Err(DataError::SpanMismatch {
                        line,
                        from,
                        to,
                        found,
                        term: term.clone(),
                    });
                }
                aspects.push(TermAspect {
                    start: from,
                    end: to,
                    polarity: a.polarity,
                });
            }
            aspects.sort_by_key(|a| a.start);
            Example::Atsa(AtsaExample { tokens, aspects })
        }
        Task::Acsa => {
            let mut aspects = Vec::with_capacity(record.aspects.len());
            for a in &record.aspects {
                let Some(name) = &a.category else {
                    return Err(parse("acsa aspect needs a category".into()));
                };
                let category = name
                    .parse::<Category>()
                    .map_err(|source| DataError::Invalid { line, source })?;
                aspects.push(CategoryAspect {
                    category,
                    polarity: a.polarity,
                });
            }
            Example::Acsa(AcsaExample { tokens, aspects })
        }
    };
    example
        .validate()
        .map_err(|source| DataError::Invalid { line, source })?;
    Ok(example)
}

/// Parses a record stream. Line numbers in errors are 1-based.
pub fn parse_corpus<R: BufRead>(reader: R, task: Task, source: &str) -> Result<Corpus, DataError> {
    let mut sentences = Vec::new();
    let mut warnings = Vec::new();
    let mut header_seen = false;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| DataError::Io {
            path: source.to_string(),
            source: e,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if !header_seen {
            if trimmed != FORMAT_HEADER {
                return Err(DataError::ParseError {
                    line: line_no,
                    message: format!("expected header '{FORMAT_HEADER}'"),
                });
            }
            header_seen = true;
            continue;
        }
        let record: Record = serde_json::from_str(trimmed).map_err(|e| DataError::ParseError {
            line: line_no,
            message: e.to_string(),
        })?;
        if record.task != task {
            return Err(DataError::TaskMismatch {
                line: line_no,
                expected: task,
                found: record.task,
            });
        }
        let example = record_to_example(&record, line_no)?;
        if let Some(w) = mams_warning(&example) {
            warnings.push(format!("line {line_no}: {w}"));
        }
        sentences.push(Sentence {
            text: record.text,
            example,
        });
    }
    if sentences.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    Ok(Corpus {
        task,
        split: None,
        sentences,
        provenance: Provenance {
            source: source.to_string(),
            format_version: FORMAT_HEADER.trim_start_matches("# ").to_string(),
        },
        warnings,
    })
}

pub fn load_corpus(path: &Path, task: Task) -> Result<Corpus, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(BufReader::new(file), task, &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub sentences: usize,
    pub aspects: usize,
    pub average: f64,
    pub positive: usize,
    pub neutral: usize,
    pub negative: usize,
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Sen. {}  Asp. {}  Ave. {:.2}  Pos. {}  Neu. {}  Neg. {}",
            self.sentences, self.aspects, self.average, self.positive, self.neutral, self.negative
        )
    }
}

pub fn compute_stats(corpus: &Corpus) -> CorpusStats {
    let mut counts = [0usize; 3];
    for p in corpus.examples().flat_map(Example::polarities).flatten() {
        counts[p.index()] += 1;
    }
    let aspects = corpus.aspect_count();
    let sentences = corpus.len();
    CorpusStats {
        sentences,
        aspects,
        average: if sentences == 0 {
            0.0
        } else {
            aspects as f64 / sentences as f64
        },
        positive: counts[0],
        neutral: counts[1],
        negative: counts[2],
    }
}

/// Parameters of the synthetic generator.
///
/// Every aspect gets its own clause `the NOUN COPULA [INTENSIFIER] CUE`, and
/// clauses are joined by connectors. The cue after the copula decides the
/// label. With probability `cross_aspect_cue_prob` one clause also carries a
/// distractor `near the CUE' FILLER` right after its noun, where `CUE'` has
/// the polarity of some other aspect in the sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub task: Task,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub mean_aspects: f64,
    /// Aspect nouns (possibly multi-word) with the category each one names.
    pub nouns: Vec<(String, Category)>,
    pub positive_cues: Vec<String>,
    pub neutral_cues: Vec<String>,
    pub negative_cues: Vec<String>,
    pub connectors: Vec<String>,
    pub fillers: Vec<String>,
    pub cross_aspect_cue_prob: f64,
}

const COPULAS: [&str; 2] = ["is", "was"];
const INTENSIFIERS: [&str; 3] = ["very", "really", "quite"];
const INTENSIFIER_PROB: f64 = 0.3;
const MAX_ASPECTS: usize = 4;

fn strings(words: &[&str]) -> Vec<String> {
    words.iter().map(|s| s.to_string()).collect()
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            task: Task::Atsa,
            train: 2000,
            dev: 500,
            test: 500,
            mean_aspects: 2.6,
            nouns: vec![
                ("salmon".into(), Category::Food),
                ("service".into(), Category::Service),
                ("waiter".into(), Category::Staff),
                ("bill".into(), Category::Price),
                ("decor".into(), Category::Ambience),
                ("wine list".into(), Category::Menu),
                ("location".into(), Category::Place),
                ("experience".into(), Category::Miscellaneous),
            ],
            positive_cues: strings(&["tasty", "friendly", "excellent", "lovely", "superb", "delightful"]),
            neutral_cues: strings(&["ordinary", "average", "standard", "typical", "plain", "routine"]),
            negative_cues: strings(&["rude", "awful", "bland", "terrible", "dirty", "overpriced"]),
            connectors: strings(&["while", "but", "although"]),
            fillers: strings(&["table", "window", "bar", "entrance"]),
            cross_aspect_cue_prob: 0.5,
        }
    }
}

impl SyntheticSpec {
    /// Reads a TOML spec; omitted keys keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self, DataError> {
        let spec: Self = toml::from_str(text).map_err(|e| DataError::SpecSyntax(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn cues(&self, p: Polarity) -> &[String] {
        match p {
            Polarity::Positive => &self.positive_cues,
            Polarity::Neutral => &self.neutral_cues,
            Polarity::Negative => &self.negative_cues,
        }
    }

    fn max_aspects(&self) -> usize {
        match self.task {
            Task::Atsa => self.nouns.len().min(MAX_ASPECTS),
            Task::Acsa => {
                let distinct: HashSet<Category> = self.nouns.iter().map(|n| n.1).collect();
                distinct.len().min(MAX_ASPECTS)
            }
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InfeasibleSpec(m));
        if Polarity::ALL.iter().any(|&p| self.cues(p).is_empty()) {
            return bad("every polarity needs at least one cue".into());
        }
        let mut seen = HashSet::new();
        for p in Polarity::ALL {
            for c in self.cues(p) {
                if !seen.insert(c.as_str()) {
                    return bad(format!("cue '{c}' appears under two polarities"));
                }
            }
        }
        let max = self.max_aspects();
        if max < 2 {
            return bad("need at least two distinct aspect nouns".into());
        }
        if !(2.0..=max as f64).contains(&self.mean_aspects) {
            return bad(format!(
                "mean aspects {} outside the reachable range [2, {max}]",
                self.mean_aspects
            ));
        }
        if self.connectors.is_empty() {
            return bad("no connectors".into());
        }
        if !(0.0..=1.0).contains(&self.cross_aspect_cue_prob) {
            return bad("cross-aspect cue probability must lie in [0, 1]".into());
        }
        if self.cross_aspect_cue_prob > 0.0 && self.fillers.is_empty() {
            return bad("distractors need at least one filler noun".into());
        }
        if self.train + self.dev + self.test == 0 {
            return bad("no sentences requested".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpora {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

struct Clause {
    noun: usize,
    polarity: Polarity,
}

fn sample_sentence(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Sentence {
    let max = spec.max_aspects();
    let q = if max > 2 {
        (spec.mean_aspects - 2.0) / (max - 2) as f64
    } else {
        0.0
    };
    let m = 2 + (0..max - 2).filter(|_| rng.random::<f64>() < q).count();

    let mut order: Vec<usize> = (0..spec.nouns.len()).collect();
    let mut nouns = Vec::with_capacity(m);
    let mut categories = HashSet::new();
    while nouns.len() < m {
        let k = rng.random_range(0..order.len());
        let idx = order.swap_remove(k);
        if spec.task == Task::Atsa || categories.insert(spec.nouns[idx].1) {
            nouns.push(idx);
        }
    }
    let polarities = loop {
        let ps: Vec<Polarity> = (0..m).map(|_| Polarity::ALL[rng.random_range(0..3)]).collect();
        if ps.iter().any(|&p| p != ps[0]) {
            break ps;
        }
    };
    let clauses: Vec<Clause> = nouns
        .into_iter()
        .zip(polarities)
        .map(|(noun, polarity)| Clause { noun, polarity })
        .collect();

    let distractor = (rng.random::<f64>() < spec.cross_aspect_cue_prob).then(|| {
        let target = rng.random_range(0..m);
        let others: Vec<Polarity> = clauses
            .iter()
            .map(|c| c.polarity)
            .filter(|&p| p != clauses[target].polarity)
            .collect();
        let pol = *others.choose(rng).expect("two distinct polarities");
        let cue = spec.cues(pol).choose(rng).expect("non-empty").clone();
        let filler = spec.fillers.choose(rng).expect("non-empty").clone();
        (target, cue, filler)
    });

    let mut words: Vec<String> = Vec::new();
    let mut term_spans = Vec::with_capacity(m);
    for (i, c) in clauses.iter().enumerate() {
        if i > 0 {
            words.push(spec.connectors.choose(rng).expect("non-empty").clone());
        }
        words.push("the".into());
        let start = words.len();
        words.extend(spec.nouns[c.noun].0.split_whitespace().map(str::to_string));
        term_spans.push((start, words.len()));
        if let Some((target, cue, filler)) = &distractor {
            if *target == i {
                words.extend(["near".to_string(), "the".to_string(), cue.clone(), filler.clone()]);
            }
        }
        words.push(COPULAS[rng.random_range(0..COPULAS.len())].to_string());
        if rng.random::<f64>() < INTENSIFIER_PROB {
            words.push(INTENSIFIERS[rng.random_range(0..INTENSIFIERS.len())].to_string());
        }
        words.push(spec.cues(c.polarity).choose(rng).expect("non-empty").clone());
    }
    let text = words.join(" ");
    let tokens = tokenize(&text);
    debug_assert_eq!(tokens, words);
    let example = match spec.task {
        Task::Atsa => Example::Atsa(AtsaExample {
            tokens,
            aspects: clauses
                .iter()
                .zip(&term_spans)
                .map(|(c, &(start, end))| TermAspect {
                    start,
                    end,
                    polarity: Some(c.polarity),
                })
                .collect(),
        }),
        Task::Acsa => Example::Acsa(AcsaExample {
            tokens,
            aspects: clauses
                .iter()
                .map(|c| CategoryAspect {
                    category: spec.nouns[c.noun].1,
                    polarity: Some(c.polarity),
                })
                .collect(),
        }),
    };
    Sentence { text, example }
}

/// Draws train, dev and test splits with distinct sentences. Identical specs
/// give identical corpora.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpora, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut draw = |n: usize, split: Split| -> Result<Corpus, DataError> {
        let mut sentences = Vec::with_capacity(n);
        let mut misses = 0;
        while sentences.len() < n {
            let s = sample_sentence(spec, &mut rng);
            if seen.insert(s.text.clone()) {
                sentences.push(s);
                misses = 0;
            } else {
                misses += 1;
                if misses > 10_000 {
                    return Err(DataError::InfeasibleSpec(
                        "lexicons too small for the requested number of distinct sentences".into(),
                    ));
                }
            }
        }
        let warnings = sentences
            .iter()
            .filter_map(|s| mams_warning(&s.example))
            .collect();
        Ok(Corpus {
            task: spec.task,
            split: Some(split),
            sentences,
            provenance: Provenance {
                source: format!("synthetic:seed={}", spec.seed),
                format_version: FORMAT_HEADER.trim_start_matches("# ").to_string(),
            },
            warnings,
        })
    };
    Ok(SyntheticCorpora {
        train: draw(spec.train, Split::Train)?,
        dev: draw(spec.dev, Split::Dev)?,
        test: draw(spec.test, Split::Test)?,
    })
}

/// What a reader of the generator grammar sees for one clause.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClauseParse {
    /// Word index of the cue after the copula.
    pub cue: usize,
    pub polarity: Polarity,
    /// Copula, optional intensifier and cue: the words that carry the label.
    pub cue_region: Vec<usize>,
}

/// Reads the clause that starts after a term ending at word `term_end`
/// (exclusive): skips an optional `near the X Y` phrase, then expects a
/// copula, an optional intensifier and a cue word.
pub fn parse_clause(tokens: &[String], term_end: usize, spec: &SyntheticSpec) -> Option<ClauseParse> {
    let mut i = term_end;
    if tokens.get(i).map(String::as_str) == Some("near") {
        i += 4;
    }
    let copula = i;
    if !COPULAS.contains(&tokens.get(copula)?.as_str()) {
        return None;
    }
    i += 1;
    if INTENSIFIERS.contains(&tokens.get(i)?.as_str()) {
        i += 1;
    }
    let word = tokens.get(i)?;
    let polarity = Polarity::ALL
        .into_iter()
        .find(|&p| spec.cues(p).contains(word))?;
    Some(ClauseParse {
        cue: i,
        polarity,
        cue_region: (copula..=i).collect(),
    })
}

/// Locates each aspect's noun in the sentence (for acsa, via the noun that
/// names its category) and parses its clause.
pub fn parse_synthetic(example: &Example, spec: &SyntheticSpec) -> Option<Vec<ClauseParse>> {
    match example {
        Example::Atsa(e) => e
            .aspects
            .iter()
            .map(|a| parse_clause(&e.tokens, a.end, spec))
            .collect(),
        Example::Acsa(e) => e
            .aspects
            .iter()
            .map(|a| {
                let noun = spec.nouns.iter().find(|n| n.1 == a.category)?;
                let words: Vec<&str> = noun.0.split_whitespace().collect();
                let start = e
                    .tokens
                    .windows(words.len())
                    .position(|w| w.iter().map(String::as_str).eq(words.iter().copied()))?;
                parse_clause(&e.tokens, start + words.len(), spec)
            })
            .collect(),
    }
}
