//! Repeated train/test resampling with mean and standard deviation of the
//! scores over runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scores::{accuracy, auroc, r_squared, rmse};
use super::{train, MetaError, ModelKind, Task, TrainSpec};
use crate::dataset::{MetricsDataset, Source};
use crate::io::assign_splits;
use crate::metrics::MEAN_ENTROPY;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    All,
    /// Mean segment entropy only.
    EntropyOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub runs: usize,
    /// Run `i` resamples the split with seed `base_seed + i`.
    pub base_seed: u64,
    /// Train/test or train/validation/test shares.
    pub ratios: Vec<f64>,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            runs: 10,
            base_seed: 0,
            ratios: vec![0.8, 0.2],
        }
    }
}

/// Scores of one split. Classification scores are also filled for
/// regressors, using `1 - predicted IoU` as the false-positive score.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub acc: Option<f64>,
    pub auroc: Option<f64>,
    pub r2: Option<f64>,
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunScores {
    pub seed: u64,
    pub train: Scores,
    pub validation: Option<Scores>,
    pub test: Scores,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation over runs; 0 for a single run.
    pub std: f64,
}

impl Stat {
    fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub acc: Option<Stat>,
    pub auroc: Option<Stat>,
    pub r2: Option<Stat>,
    pub sigma: Option<Stat>,
}

impl Summary {
    fn of<'a>(scores: impl Iterator<Item = &'a Scores> + Clone) -> Summary {
        let pick = |f: fn(&Scores) -> Option<f64>| {
            Stat::of(&scores.clone().filter_map(f).collect::<Vec<_>>())
        };
        Summary {
            acc: pick(|s| s.acc),
            auroc: pick(|s| s.auroc),
            r2: pick(|s| s.r2),
            sigma: pick(|s| s.sigma),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub task: Task,
    /// `None` for the naive random baseline.
    pub kind: Option<ModelKind>,
    pub features: FeatureSet,
    pub protocol: Protocol,
    pub runs: Vec<RunScores>,
    pub train: Summary,
    pub validation: Option<Summary>,
    pub test: Summary,
}

fn split_scores(task: Task, pred: &[f64], data: &MetricsDataset) -> Scores {
    let iou = data.iou_targets().expect("labeled rows");
    let fp = data.fp_targets().expect("labeled rows");
    let mut s = Scores::default();
    if pred.is_empty() {
        return s;
    }
    let fp_scores: Vec<f64> = match task {
        Task::ClassifyFp => pred.to_vec(),
        Task::RegressIou => {
            s.r2 = r_squared(pred, &iou);
            s.sigma = Some(rmse(pred, &iou));
            pred.iter().map(|p| 1.0 - p).collect()
        }
    };
    s.acc = Some(accuracy(&fp_scores, &fp));
    s.auroc = auroc(&fp_scores, &fp).ok();
    s
}

fn restrict(data: &MetricsDataset, features: FeatureSet) -> Result<MetricsDataset, MetaError> {
    match features {
        FeatureSet::All => Ok(data.clone()),
        FeatureSet::EntropyOnly => data
            .select(&[MEAN_ENTROPY])
            .map_err(|e| MetaError::SchemaMismatch(e.to_string())),
    }
}

/// Real labeled rows split per run; everything else only ever trains.
struct Partition {
    real: MetricsDataset,
    extra: MetricsDataset,
}

impl Partition {
    fn new(data: &MetricsDataset, protocol: &Protocol) -> Result<Self, MetaError> {
        let labeled = data.labeled();
        let real = labeled.filter(|r| r.source == Source::Real);
        let extra = labeled.filter(|r| r.source != Source::Real);
        let sizes = crate::io::split_sizes(real.len(), &protocol.ratios);
        if protocol.runs == 0 || sizes.first() == Some(&0) || sizes.last() == Some(&0) {
            return Err(MetaError::InsufficientData(format!(
                "{} labeled rows cannot be split as {:?}",
                real.len(),
                protocol.ratios
            )));
        }
        Ok(Self { real, extra })
    }

    fn split(&self, protocol: &Protocol, seed: u64) -> Vec<MetricsDataset> {
        let slots = assign_splits(self.real.len(), &protocol.ratios, seed);
        (0..protocol.ratios.len())
            .map(|s| {
                let idx: Vec<usize> = (0..slots.len()).filter(|&i| slots[i] == s).collect();
                self.real.subset(&idx)
            })
            .collect()
    }
}

fn summarize(
    task: Task,
    kind: Option<ModelKind>,
    features: FeatureSet,
    protocol: &Protocol,
    runs: Vec<RunScores>,
) -> EvaluationReport {
    let validation = runs
        .iter()
        .all(|r| r.validation.is_some())
        .then(|| Summary::of(runs.iter().filter_map(|r| r.validation.as_ref())));
    EvaluationReport {
        task,
        kind,
        features,
        protocol: protocol.clone(),
        train: Summary::of(runs.iter().map(|r| &r.train)),
        validation: validation.filter(|_| protocol.ratios.len() > 2),
        test: Summary::of(runs.iter().map(|r| &r.test)),
        runs,
    }
}

/// Trains `spec` on each resampled training split and scores all splits.
pub fn evaluate(
    data: &MetricsDataset,
    spec: &TrainSpec,
    features: FeatureSet,
    protocol: &Protocol,
) -> Result<EvaluationReport, MetaError> {
    evaluate_with(data, spec, features, protocol, &|train, _| Ok(train.clone()))
}

/// Like [`evaluate`], with `prepare` turning each run's training split into
/// the rows actually trained on (for example by adding synthetic rows).
/// `prepare` receives the run seed.
pub fn evaluate_with(
    data: &MetricsDataset,
    spec: &TrainSpec,
    features: FeatureSet,
    protocol: &Protocol,
    prepare: &(dyn Fn(&MetricsDataset, u64) -> Result<MetricsDataset, MetaError> + Sync),
) -> Result<EvaluationReport, MetaError> {
    let partition = Partition::new(data, protocol)?;
    let runs = (0..protocol.runs)
        .into_par_iter()
        .map(|i| {
            let seed = protocol.base_seed + i as u64;
            let splits = partition.split(protocol, seed);
            let mut train_rows = splits[0].clone();
            train_rows
                .extend(&partition.extra)
                .map_err(|e| MetaError::SchemaMismatch(e.to_string()))?;
            let train_rows = restrict(&prepare(&train_rows, seed)?, features)?;
            let model = train(&train_rows, &spec.clone().with_seed(spec.seed.wrapping_add(i as u64)))?;
            let mut scored = Vec::with_capacity(splits.len());
            for (s, split) in splits.iter().enumerate() {
                let rows = if s == 0 { &train_rows } else { &restrict(split, features)? };
                scored.push(split_scores(spec.task, &model.predict(rows)?, rows));
            }
            let test = scored.pop().expect("at least two splits");
            Ok(RunScores {
                seed,
                train: scored[0],
                validation: (scored.len() > 1).then(|| scored[1]),
                test,
            })
        })
        .collect::<Result<Vec<_>, MetaError>>()?;
    Ok(summarize(spec.task, Some(spec.kind), features, protocol, runs))
}

/// Scores drawn uniformly at random per row, resampled per run.
pub fn naive_random(
    data: &MetricsDataset,
    task: Task,
    protocol: &Protocol,
) -> Result<EvaluationReport, MetaError> {
    let partition = Partition::new(data, protocol)?;
    let runs = (0..protocol.runs)
        .map(|i| {
            let seed = protocol.base_seed + i as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let splits = partition.split(protocol, seed);
            let mut scored: Vec<Scores> = splits
                .iter()
                .map(|split| {
                    let pred: Vec<f64> = (0..split.len()).map(|_| rng.random::<f64>()).collect();
                    split_scores(task, &pred, split)
                })
                .collect();
            let test = scored.pop().expect("at least two splits");
            RunScores {
                seed,
                train: scored[0],
                validation: (scored.len() > 1).then(|| scored[1]),
                test,
            }
        })
        .collect();
    Ok(summarize(task, None, FeatureSet::All, protocol, runs))
}
