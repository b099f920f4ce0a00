use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::HarnessError;
use crate::mcd::{
    apply_strategy, base_split, bhattacharyya, count_histogram, dataset_labels, DatasetSplit, SplitProvenance,
};
use crate::metrics::{
    class_pooled_ap, ground_p, ApImage, EvalReport, GroundingEval, GroundingSummary, ReportProvenance,
};
use crate::scene::{generate_corpus, generate_dataset, CountingTriplet, Dataset, SceneSpec};
use crate::scn::{
    expected_random_accuracy, predict, random_predictions, train, Checkpoint, CheckpointProvenance, HeadKind,
    ModelParameters, TrainedModel, TrainingHistory,
};

pub const RECORD_FORMAT: &str = "countlab-run";
pub const RECORD_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

/// Label-distribution overlap between the sets the model sees and the test set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSummary {
    pub train_test: f64,
    pub validation_test: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub name: String,
    pub test_accuracy: f64,
    /// Closed-form expectation, where one exists.
    pub expected_accuracy: Option<f64>,
}

/// Wall-clock seconds per stage. Excluded from the canonical record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub data_s: f64,
    pub split_s: f64,
    pub train_s: f64,
    pub eval_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub format: String,
    pub version: u32,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub dataset_hash: String,
    pub split: SplitProvenance,
    pub split_sizes: SplitSizes,
    pub shift: ShiftSummary,
    pub history: TrainingHistory,
    pub selected_epoch: usize,
    pub checkpoint_hash: String,
    pub test: EvalReport,
    pub grounding: Option<EvalReport>,
    pub baselines: Vec<BaselineResult>,
    pub timings: Option<Timings>,
}

impl RunRecord {
    pub fn to_json(&self) -> Result<String, HarnessError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, HarnessError> {
        let r: RunRecord = serde_json::from_str(s)?;
        if r.format != RECORD_FORMAT || r.version != RECORD_VERSION {
            return Err(HarnessError::Config(format!(
                "unsupported record {} v{}",
                r.format, r.version
            )));
        }
        Ok(r)
    }

    /// The record without timings: a pure function of the config.
    pub fn canonical_json(&self) -> Result<String, HarnessError> {
        let mut r = self.clone();
        r.timings = None;
        r.to_json()
    }
}

/// A finished run together with the selected model.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub record: RunRecord,
    pub checkpoint: Checkpoint,
}

fn stage<T, E: std::fmt::Display>(name: &'static str, r: Result<T, E>) -> Result<T, HarnessError> {
    r.map_err(|e| HarnessError::Stage {
        stage: name,
        message: e.to_string(),
    })
}

/// The dataset a config describes: loaded from `dataset_path` (and checked
/// against the scene spec) or generated as train and test pools.
pub fn build_dataset(config: &ExperimentConfig) -> Result<Dataset, HarnessError> {
    match &config.dataset_path {
        Some(p) => {
            let d = stage("data", Dataset::read(Path::new(p)))?;
            if d.header.spec != config.scene {
                return Err(HarnessError::Stage {
                    stage: "data",
                    message: format!("{p} was generated from a different scene spec"),
                });
            }
            if d.pool("test").is_none() {
                return Err(HarnessError::Stage {
                    stage: "data",
                    message: format!("{p} has no test pool"),
                });
            }
            Ok(d)
        }
        None => stage(
            "data",
            generate_corpus(
                &config.scene,
                (config.train_size, config.data_seed),
                (config.test_size, config.test_seed),
            ),
        ),
    }
}

/// Carve validation from the train pool, then apply the configured strategy.
pub fn build_split(config: &ExperimentConfig, dataset: &Dataset) -> Result<DatasetSplit, HarnessError> {
    let base = stage("split", base_split(dataset, config.val_fraction, config.carve_seed))?;
    let split = match config.split_strategy() {
        Some(s) => stage(
            "split",
            apply_strategy(&base, &dataset_labels(dataset), s, config.strategy_seed),
        )?,
        None => base,
    };
    stage("split", split.check_invariants(dataset))?;
    Ok(split)
}

/// Trains on the split's train and validation sets only; test ids never
/// reach this function.
pub fn train_model(
    config: &ExperimentConfig,
    head: HeadKind,
    lambda: f64,
    split: &DatasetSplit,
    dataset: &Dataset,
) -> Result<TrainedModel, HarnessError> {
    let model = crate::scn::ModelConfig {
        head,
        lambda,
        ..config.model.clone()
    };
    stage(
        "train",
        train(
            &split.training_view(dataset),
            &model,
            &config.trainer,
            config.train_seed,
        ),
    )
}

/// Held-out grounding questions from the grounding seed.
pub fn grounding_set(config: &ExperimentConfig) -> Result<Option<Dataset>, HarnessError> {
    let g = &config.grounding;
    if g.size == 0 {
        return Ok(None);
    }
    let spec = if g.simple_only {
        SceneSpec {
            mode_mix: [1.0, 0.0, 0.0],
            ..config.scene.clone()
        }
    } else {
        config.scene.clone()
    };
    stage("grounding", generate_dataset(&spec, g.size, g.seed)).map(Some)
}

/// Counting metrics over `set`, computed in one pass.
pub fn evaluate(
    model: &ModelParameters,
    set: &[&CountingTriplet],
    name: &str,
    provenance: ReportProvenance,
) -> Result<EvalReport, HarnessError> {
    let mut predicted = Vec::with_capacity(set.len());
    let mut fractional = Vec::with_capacity(set.len());
    let mut labels = Vec::with_capacity(set.len());
    for t in set {
        let p = stage("eval", predict(t, model))?;
        predicted.push(p.label);
        fractional.push(p.count);
        labels.push(t.count);
    }
    stage(
        "eval",
        EvalReport::from_predictions(name, &predicted, &fractional, &labels, provenance),
    )
}

/// Counting metrics plus GroundP and class-pooled AP from the region scores.
/// Softmax heads have no region scores and get no grounding block.
pub fn evaluate_grounding(
    model: &ModelParameters,
    set: &[&CountingTriplet],
    ap_threshold: f64,
    provenance: ReportProvenance,
) -> Result<EvalReport, HarnessError> {
    let mut report = evaluate(model, set, "grounding", provenance)?;
    if model.config().head != HeadKind::Regression {
        return Ok(report);
    }
    let mut evals = Vec::with_capacity(set.len());
    let mut images = Vec::with_capacity(set.len());
    for t in set {
        let p = stage("grounding", predict(t, model))?;
        let scores = p.scores.expect("regression head").scores;
        let boxes: Vec<_> = t.regions.iter().map(|r| r.bbox).collect();
        evals.push(stage(
            "grounding",
            GroundingEval::new(boxes.clone(), scores.clone(), t.gt_boxes.clone()),
        )?);
        images.push((
            t.question.class,
            ApImage {
                proposals: boxes,
                scores,
                gt_boxes: t.gt_boxes.clone(),
            },
        ));
    }
    report.grounding = Some(GroundingSummary {
        questions: set.len(),
        ground_p: ground_p(&evals),
        ap: stage("grounding", class_pooled_ap(&images, ap_threshold))?,
        ap_threshold,
        ap_pooling: "per-question-class".into(),
    });
    Ok(report)
}

fn label_distribution(ids: &[usize], labels: &[usize], k: usize) -> Result<Vec<f64>, HarnessError> {
    let h = stage("split", count_histogram(ids, labels, k))?;
    let n = h.iter().sum::<usize>().max(1) as f64;
    Ok(h.iter().map(|&c| c as f64 / n).collect())
}

fn shift_summary(split: &DatasetSplit, dataset: &Dataset) -> Result<ShiftSummary, HarnessError> {
    let labels = dataset_labels(dataset);
    let k = labels.iter().max().map_or(1, |m| m + 1);
    let train = label_distribution(&split.train, &labels, k)?;
    let val = label_distribution(&split.validation, &labels, k)?;
    let test = label_distribution(&split.test, &labels, k)?;
    Ok(ShiftSummary {
        train_test: stage("split", bhattacharyya(&train, &test))?,
        validation_test: stage("split", bhattacharyya(&val, &test))?,
    })
}

/// The full protocol on a prepared dataset. Test metrics are computed once,
/// after the validation-selected parameters are fixed.
pub fn run_on(config: &ExperimentConfig, dataset: &Dataset) -> Result<RunOutput, HarnessError> {
    config.validate()?;
    let mut timings = Timings::default();

    let t = Instant::now();
    let split = build_split(config, dataset)?;
    timings.split_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let trained = train_model(config, config.model.head, config.model.lambda, &split, dataset)?;
    let mut baseline_models = Vec::new();
    for (on, head) in [
        (config.baselines.question_only, HeadKind::QuestionOnly),
        (config.baselines.image_only, HeadKind::ImageOnly),
    ] {
        if on {
            baseline_models.push((head, train_model(config, head, config.model.lambda, &split, dataset)?));
        }
    }
    timings.train_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let checkpoint = Checkpoint::new(
        &trained.model,
        CheckpointProvenance {
            dataset_hash: split.provenance.dataset_hash.clone(),
            split: Some(split.provenance.clone()),
            trainer: Some(config.trainer.clone()),
            seed: config.train_seed,
        },
    );
    let checkpoint_hash = stage("checkpoint", checkpoint.hash())?;
    let provenance = ReportProvenance {
        checkpoint_hash: checkpoint_hash.clone(),
        split: Some(split.provenance.clone()),
    };
    let test_set = split.test_triplets(dataset);
    let test = evaluate(&trained.model, &test_set, "test", provenance.clone())?;

    let mut baselines = Vec::new();
    for (head, m) in &baseline_models {
        let r = evaluate(&m.model, &test_set, "test", provenance.clone())?;
        baselines.push(BaselineResult {
            name: head.as_str().into(),
            test_accuracy: r.accuracy,
            expected_accuracy: None,
        });
    }
    if config.baselines.random {
        baselines.push(random_baseline(config, &split, dataset, &test_set)?);
    }
    let grounding = match grounding_set(config)? {
        Some(g) => {
            let set: Vec<&CountingTriplet> = g.triplets.iter().collect();
            Some(evaluate_grounding(
                &trained.model,
                &set,
                config.grounding.ap_threshold,
                provenance,
            )?)
        }
        None => None,
    };
    timings.eval_s = t.elapsed().as_secs_f64();

    let record = RunRecord {
        format: RECORD_FORMAT.into(),
        version: RECORD_VERSION,
        config: config.clone(),
        config_hash: config.hash()?,
        dataset_hash: split.provenance.dataset_hash.clone(),
        split_sizes: SplitSizes {
            train: split.train.len(),
            validation: split.validation.len(),
            test: split.test.len(),
        },
        shift: shift_summary(&split, dataset)?,
        split: split.provenance,
        selected_epoch: trained.history.best_epoch,
        history: trained.history,
        checkpoint_hash,
        test,
        grounding,
        baselines,
        timings: Some(timings),
    };
    Ok(RunOutput { record, checkpoint })
}

fn random_baseline(
    config: &ExperimentConfig,
    split: &DatasetSplit,
    dataset: &Dataset,
    test: &[&CountingTriplet],
) -> Result<BaselineResult, HarnessError> {
    let labels = dataset_labels(dataset);
    let k = config.model.max_label + 1;
    let train_hist = label_distribution(&split.train, &labels, k)?;
    let test_hist = label_distribution(&split.test, &labels, k)?;
    let guesses = stage(
        "baseline",
        random_predictions(&train_hist, test.len(), config.baselines.random_seed),
    )?;
    let hits = guesses.iter().zip(test).filter(|(g, t)| **g == t.count).count();
    Ok(BaselineResult {
        name: "random".into(),
        test_accuracy: 100.0 * hits as f64 / test.len().max(1) as f64,
        expected_accuracy: Some(stage("baseline", expected_random_accuracy(&train_hist, &test_hist))?),
    })
}

/// Generate (or load) the dataset, then run the protocol.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunRecord, HarnessError> {
    run_experiment_full(config).map(|o| o.record)
}

pub fn run_experiment_full(config: &ExperimentConfig) -> Result<RunOutput, HarnessError> {
    config.validate()?;
    let t = Instant::now();
    let dataset = build_dataset(config)?;
    let data_s = t.elapsed().as_secs_f64();
    let mut out = run_on(config, &dataset)?;
    if let Some(t) = out.record.timings.as_mut() {
        t.data_s = data_s;
    }
    Ok(out)
}

/// Re-runs a record from its embedded config and checks that the canonical
/// form matches byte for byte.
pub fn reproduce(record: &RunRecord) -> Result<RunRecord, HarnessError> {
    let again = run_experiment(&record.config)?;
    if again.canonical_json()? != record.canonical_json()? {
        return Err(HarnessError::NotReproducible);
    }
    Ok(again)
}
