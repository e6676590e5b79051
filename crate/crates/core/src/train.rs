//! Run configuration, mini-batch training with dev-based model selection,
//! evaluation and prediction for both the multi-aspect scheme and the
//! one-aspect-per-pass baseline.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aspect_head::{classify, gather_anchors, logits_on_tape, nll_on_tape, HeadError, LossMode, SentimentDistribution};
use crate::data::{Corpus, DataError, Task};
use crate::encoder::{derive_seed, forward, forward_on_tape, AttentionRecord, EncoderError, Mode, ModelConfig, ModelParams};
use crate::metrics::{score, MetricsError, MetricsReport};
use crate::numerics::{NumericsError, Tape};
use crate::optimizer::{clip_grad_norm, AdamConfig, AdamState, OptimizerError};
use crate::tokenizer::{
    build_vocab_with, encode_baseline_single, encode_tmm_acsa, encode_tmm_atsa, Category, EncodedSequence, Example,
    Polarity, TokenizerError, Vocab,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("sentence {0} has unlabeled aspects")]
    MissingLabels(usize),
    #[error("model task {model} cannot read a {corpus} corpus")]
    TaskMismatch { model: Task, corpus: Task },
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    DivergenceDetected { epoch: usize, step: u64, loss: f64 },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl TrainError {
    /// Numerical failures as opposed to bad input or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainError::DivergenceDetected { .. }
                | TrainError::Numerics(_)
                | TrainError::Optimizer(OptimizerError::NonFiniteGradient(_))
        ) || matches!(self, TrainError::Encoder(EncoderError::Numerics(_)))
            || matches!(self, TrainError::Head(HeadError::Numerics(_)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// All aspects of a sentence in one anchored sequence.
    Tmm,
    /// One `[CLS] aspect [SEP] sentence [SEP]` sequence per aspect.
    Baseline,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Tmm => "tmm",
            Scheme::Baseline => "baseline",
        })
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tmm" => Ok(Scheme::Tmm),
            "baseline" => Ok(Scheme::Baseline),
            other => Err(format!("unknown scheme '{other}' (expected tmm or baseline)")),
        }
    }
}

/// Everything one training invocation needs, read from a flat TOML file.
/// Omitted keys take the desk-scale defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: Task,
    pub scheme: Scheme,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Sentences per step for `tmm`, aspect instances per step for `baseline`.
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Independent runs with seeds `seed, seed + 1, ...`.
    pub runs: usize,
    pub loss: LossMode,
    pub clip_grad: bool,
    pub max_grad_norm: f64,
    pub min_frequency: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let desk = ModelConfig::desk(0);
        let adam = AdamConfig::default();
        Self {
            task: Task::Atsa,
            scheme: Scheme::Tmm,
            layers: desk.layers,
            heads: desk.heads,
            hidden: desk.hidden,
            ffn: desk.ffn,
            max_len: desk.max_len,
            dropout: desk.dropout,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            batch_size: 32,
            epochs: 50,
            patience: 5,
            seed: 7,
            runs: 3,
            loss: LossMode::Mean,
            clip_grad: false,
            max_grad_norm: 5.0,
            min_frequency: 1,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            heads: self.heads,
            hidden: self.hidden,
            ffn: self.ffn,
            max_len: self.max_len,
            vocab_size,
            dropout: self.dropout,
            classes: Polarity::COUNT,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.runs == 0 {
            return bad("runs must be positive");
        }
        if self.min_frequency == 0 {
            return bad("min_frequency must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.epsilon >= 0.0) {
            return bad("epsilon must be non-negative");
        }
        if self.clip_grad && !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be positive");
        }
        self.model_config(1)
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))
    }
}

/// A model together with what is needed to encode its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub task: Task,
    pub scheme: Scheme,
    pub config: ModelConfig,
    pub params: ModelParams,
    pub vocab: Vocab,
}

/// Model inputs for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub sentence: usize,
    pub ids: Vec<usize>,
    pub anchors: Vec<usize>,
    pub gold: Option<Vec<Polarity>>,
}

impl From<(usize, EncodedSequence)> for Instance {
    fn from((sentence, e): (usize, EncodedSequence)) -> Self {
        Self {
            sentence,
            ids: e.ids,
            anchors: e.anchors,
            gold: e.gold,
        }
    }
}

/// Vocabulary over the training sentences; category names are always added
/// so every category can be encoded.
pub fn build_training_vocab(train: &Corpus, min_frequency: usize) -> Result<Vocab, TrainError> {
    let names = Category::names();
    Ok(build_vocab_with(
        train.examples().map(|e| e.tokens().to_vec()),
        min_frequency,
        &names,
    )?)
}

/// The sequences one sentence becomes under `scheme`.
pub fn encode_example(
    example: &Example,
    scheme: Scheme,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<EncodedSequence>, TokenizerError> {
    match scheme {
        Scheme::Tmm => Ok(vec![match example {
            Example::Atsa(e) => encode_tmm_atsa(e, vocab, max_len)?,
            Example::Acsa(e) => encode_tmm_acsa(e, vocab, max_len)?,
        }]),
        Scheme::Baseline => (0..example.aspect_count())
            .map(|i| encode_baseline_single(example, i, vocab, max_len))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    /// One distribution per sentence, aspects in corpus order.
    pub distributions: Vec<SentimentDistribution>,
    pub forward_passes: usize,
}

impl Predictions {
    pub fn labels(&self) -> Vec<Polarity> {
        self.distributions.iter().flat_map(|d| d.predictions()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub forward_passes: usize,
}

impl Model {
    pub fn new(task: Task, scheme: Scheme, config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self, TrainError> {
        if config.vocab_size != vocab.len() {
            return Err(TrainError::Config(format!(
                "vocab_size {} but the vocabulary has {} entries",
                config.vocab_size,
                vocab.len()
            )));
        }
        let params = ModelParams::init(&config, seed)?;
        Ok(Self {
            task,
            scheme,
            config,
            params,
            vocab,
        })
    }

    pub fn encode(&self, corpus: &Corpus) -> Result<Vec<Instance>, TrainError> {
        if corpus.task != self.task {
            return Err(TrainError::TaskMismatch {
                model: self.task,
                corpus: corpus.task,
            });
        }
        let mut out = Vec::new();
        for (i, ex) in corpus.examples().enumerate() {
            for e in encode_example(ex, self.scheme, &self.vocab, self.config.max_len)? {
                out.push(Instance::from((i, e)));
            }
        }
        Ok(out)
    }

    /// Eval-mode distributions for one instance's anchors, plus its attention.
    pub fn run_instance(&self, inst: &Instance) -> Result<(SentimentDistribution, AttentionRecord), TrainError> {
        let (hidden, attention) = forward(&inst.ids, &self.params, &self.config, Mode::Eval, 0)?;
        let reps = gather_anchors(&hidden, &inst.anchors)?;
        let (w, b) = self.classifier();
        Ok((classify(&reps, w, b)?, attention))
    }

    fn classifier(&self) -> (&crate::numerics::Tensor, &crate::numerics::Tensor) {
        let n = self.params.tensors().len();
        let t = self.params.tensors();
        (&t[n - 2], &t[n - 1])
    }

    pub fn predict(&self, corpus: &Corpus) -> Result<Predictions, TrainError> {
        let instances = self.encode(corpus)?;
        self.predict_instances(&instances, corpus.len())
    }

    fn predict_instances(&self, instances: &[Instance], sentences: usize) -> Result<Predictions, TrainError> {
        let mut distributions = vec![SentimentDistribution(Vec::new()); sentences];
        let mut forward_passes = 0;
        for inst in instances {
            let (dist, _) = self.run_instance(inst)?;
            forward_passes += 1;
            distributions[inst.sentence].0.extend(dist.0);
        }
        Ok(Predictions {
            distributions,
            forward_passes,
        })
    }

    pub fn evaluate(&self, corpus: &Corpus) -> Result<Evaluation, TrainError> {
        let gold = gold_labels(corpus)?;
        let predictions = self.predict(corpus)?;
        Ok(Evaluation {
            report: score(&predictions.labels(), &gold)?,
            forward_passes: predictions.forward_passes,
        })
    }
}

fn gold_labels(corpus: &Corpus) -> Result<Vec<Polarity>, TrainError> {
    let mut gold = Vec::with_capacity(corpus.aspect_count());
    for (i, ex) in corpus.examples().enumerate() {
        gold.extend(ex.gold().ok_or(TrainError::MissingLabels(i))?);
    }
    Ok(gold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_macro_f1: f64,
    pub dev_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    EpochLimit,
    Patience,
    /// Dev Macro-F1 reached 1, so no later epoch can be selected.
    DevPerfect,
}

/// One finished training run, holding the parameters of its best dev epoch.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub model: Model,
    pub adam: AdamState,
    pub best_epoch: usize,
    pub best_dev_macro_f1: f64,
    pub history: Vec<EpochLog>,
    pub stop: StopReason,
    /// Encoder passes spent on training steps.
    pub train_forward_passes: usize,
}

/// Loss of one mini-batch, its gradients, and the number of encoder passes.
pub fn batch_gradients(
    model: &Model,
    batch: &[&Instance],
    loss_mode: LossMode,
    dropout_seed: u64,
) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let (w, b) = bound.classifier();
    let mut total = None;
    let mut aspects = 0usize;
    for (k, inst) in batch.iter().enumerate() {
        let gold = inst.gold.as_ref().ok_or(TrainError::MissingLabels(inst.sentence))?;
        let seed = derive_seed(dropout_seed, k as u64);
        let (hidden, _) = forward_on_tape(&mut tape, &bound, &model.config, &inst.ids, Mode::Train, seed)?;
        let Some(logits) = logits_on_tape(&mut tape, hidden, &inst.anchors, w, b)? else {
            continue;
        };
        let nll = nll_on_tape(&mut tape, logits, gold)?;
        aspects += gold.len();
        total = Some(match total {
            None => nll,
            Some(t) => tape.add(t, nll)?,
        });
    }
    let Some(total) = total else {
        return Ok((0.0, bound.grads(&tape)));
    };
    let root = match loss_mode {
        LossMode::Raw => total,
        LossMode::Mean => tape.scale(total, 1.0 / aspects as f64),
    };
    let loss = tape.value(root).data()[0];
    if !loss.is_finite() {
        return Err(NumericsError::NonFiniteInput("loss").into());
    }
    tape.backward(root)?;
    Ok((loss, bound.grads(&tape)))
}

/// Trains one model on `train`, selecting the epoch with the best dev Macro-F1.
pub fn train_run(cfg: &RunConfig, train: &Corpus, dev: &Corpus, seed: u64) -> Result<RunOutcome, TrainError> {
    cfg.validate()?;
    if train.task != cfg.task || dev.task != cfg.task {
        return Err(TrainError::TaskMismatch {
            model: cfg.task,
            corpus: if train.task != cfg.task { train.task } else { dev.task },
        });
    }
    gold_labels(dev)?;
    let vocab = build_training_vocab(train, cfg.min_frequency)?;
    let config = cfg.model_config(vocab.len());
    let mut model = Model::new(cfg.task, cfg.scheme, config, vocab, seed)?;
    let instances = model.encode(train)?;
    if let Some(inst) = instances.iter().find(|i| i.gold.is_none()) {
        return Err(TrainError::MissingLabels(inst.sentence));
    }
    let dev_instances = model.encode(dev)?;
    let dev_gold = gold_labels(dev)?;

    let mut adam = AdamState::new(cfg.adam(), model.params.tensors());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5348_5546));
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut best = (model.params.clone(), adam.clone());
    let mut best_epoch = 0;
    let mut best_f1 = f64::NEG_INFINITY;
    let mut history = Vec::new();
    let mut stale = 0;
    let mut stop = StopReason::EpochLimit;
    let mut train_forward_passes = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &instances[i]).collect();
            let step = adam.step + 1;
            let (loss, mut grads) = match batch_gradients(&model, &batch, cfg.loss, derive_seed(seed, step)) {
                Ok(v) => v,
                Err(e) if e.is_numerical() => {
                    return Err(TrainError::DivergenceDetected {
                        epoch,
                        step,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            train_forward_passes += batch.len();
            if cfg.clip_grad {
                clip_grad_norm(&mut grads, cfg.max_grad_norm);
            }
            adam.step(model.params.tensors_mut(), &grads)?;
            if !model.params.is_finite() {
                return Err(TrainError::DivergenceDetected { epoch, step, loss });
            }
            loss_sum += loss;
            batches += 1;
        }
        let dev_pred = model.predict_instances(&dev_instances, dev.len())?;
        let report = score(&dev_pred.labels(), &dev_gold)?;
        history.push(EpochLog {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            dev_macro_f1: report.macro_f1,
            dev_accuracy: report.accuracy,
        });
        if report.macro_f1 > best_f1 {
            best_f1 = report.macro_f1;
            best_epoch = epoch;
            best = (model.params.clone(), adam.clone());
            stale = 0;
        } else {
            stale += 1;
        }
        if best_f1 >= 1.0 {
            stop = StopReason::DevPerfect;
            break;
        }
        if stale >= cfg.patience {
            stop = StopReason::Patience;
            break;
        }
    }
    model.params = best.0;
    Ok(RunOutcome {
        seed,
        model,
        adam: best.1,
        best_epoch,
        best_dev_macro_f1: best_f1,
        history,
        stop,
        train_forward_passes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanScores {
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone)]
pub struct MultiRunOutcome {
    pub runs: Vec<RunOutcome>,
    pub test: Vec<Evaluation>,
    pub mean_test: MeanScores,
}

impl MultiRunOutcome {
    /// The run with the highest dev Macro-F1; earlier runs win ties.
    pub fn best_run(&self) -> &RunOutcome {
        let mut best = &self.runs[0];
        for r in &self.runs[1..] {
            if r.best_dev_macro_f1 > best.best_dev_macro_f1 {
                best = r;
            }
        }
        best
    }
}

/// `cfg.runs` independent runs, each scored on `test`; test scores are averaged.
pub fn train_runs(cfg: &RunConfig, train: &Corpus, dev: &Corpus, test: &Corpus) -> Result<MultiRunOutcome, TrainError> {
    cfg.validate()?;
    let mut runs = Vec::with_capacity(cfg.runs);
    let mut evals = Vec::with_capacity(cfg.runs);
    for r in 0..cfg.runs as u64 {
        let run = train_run(cfg, train, dev, cfg.seed + r)?;
        evals.push(run.model.evaluate(test)?);
        runs.push(run);
    }
    let n = evals.len() as f64;
    let mean_test = MeanScores {
        accuracy: evals.iter().map(|e| e.report.accuracy).sum::<f64>() / n,
        macro_f1: evals.iter().map(|e| e.report.macro_f1).sum::<f64>() / n,
    };
    Ok(MultiRunOutcome {
        runs,
        test: evals,
        mean_test,
    })
}
