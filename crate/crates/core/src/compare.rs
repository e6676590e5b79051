//! Side-by-side training of the multi-aspect scheme and the single-aspect
//! baseline under the same budget and seeds.

use serde::Serialize;

use crate::data::{Corpus, Task};
use crate::metrics::MetricsReport;
use crate::train::{train_runs, MeanScores, MultiRunOutcome, RunConfig, Scheme, StopReason, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stop: StopReason,
    pub test: MetricsReport,
    /// Encoder passes needed to score the test split.
    pub test_forward_passes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemeSummary {
    pub scheme: Scheme,
    pub runs: Vec<RunSummary>,
    pub mean: MeanScores,
}

impl SchemeSummary {
    pub fn from_outcome(scheme: Scheme, outcome: &MultiRunOutcome) -> Self {
        Self {
            scheme,
            runs: outcome
                .runs
                .iter()
                .zip(&outcome.test)
                .map(|(r, e)| RunSummary {
                    seed: r.seed,
                    best_epoch: r.best_epoch,
                    epochs_run: r.history.len(),
                    stop: r.stop,
                    test: e.report,
                    test_forward_passes: e.forward_passes,
                })
                .collect(),
            mean: outcome.mean_test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub task: Task,
    pub test_sentences: usize,
    pub test_aspects: usize,
    pub tmm: SchemeSummary,
    pub baseline: SchemeSummary,
    /// Multi-aspect minus baseline, on the run-averaged test scores.
    pub delta_macro_f1: f64,
    pub delta_accuracy: f64,
    /// Every multi-aspect run used one pass per sentence and every baseline
    /// run one pass per aspect.
    pub forward_counts_match: bool,
}

impl ComparisonReport {
    pub fn new(test: &Corpus, tmm: &MultiRunOutcome, baseline: &MultiRunOutcome) -> Self {
        let tmm = SchemeSummary::from_outcome(Scheme::Tmm, tmm);
        let baseline = SchemeSummary::from_outcome(Scheme::Baseline, baseline);
        let test_sentences = test.len();
        let test_aspects = test.aspect_count();
        let forward_counts_match = tmm.runs.iter().all(|r| r.test_forward_passes == test_sentences)
            && baseline.runs.iter().all(|r| r.test_forward_passes == test_aspects);
        Self {
            task: test.task,
            test_sentences,
            test_aspects,
            delta_macro_f1: tmm.mean.macro_f1 - baseline.mean.macro_f1,
            delta_accuracy: tmm.mean.accuracy - baseline.mean.accuracy,
            tmm,
            baseline,
            forward_counts_match,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Trains both schemes with `cfg` (its `scheme` field is ignored).
pub fn compare(
    cfg: &RunConfig,
    train: &Corpus,
    dev: &Corpus,
    test: &Corpus,
) -> Result<(ComparisonReport, MultiRunOutcome, MultiRunOutcome), TrainError> {
    let tmm = train_runs(&RunConfig { scheme: Scheme::Tmm, ..cfg.clone() }, train, dev, test)?;
    let baseline = train_runs(&RunConfig { scheme: Scheme::Baseline, ..cfg.clone() }, train, dev, test)?;
    Ok((ComparisonReport::new(test, &tmm, &baseline), tmm, baseline))
}
