//! Meta classifiers (false positive or not) and meta regressors (segment
//! IoU) trained on [`MetricsDataset`] rows.
//!
//! Every model standardizes its inputs with statistics of the training rows;
//! features that are constant on the training rows are dropped.

mod gbt;
mod linear;
mod logistic;
mod mlp;
mod optim;
pub mod protocol;
pub mod scores;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::MetricsDataset;

pub use gbt::{GbtConfig, GbtModel, RegressionTree};
pub use linear::LinearModel;
pub use logistic::LogisticModel;
pub use mlp::{MlpConfig, MlpModel};
pub use protocol::{evaluate, evaluate_with, naive_random, EvaluationReport, FeatureSet, Protocol, Scores, Stat, Summary};
pub use scores::{accuracy, auroc, r_squared, rmse};

#[derive(Debug, Error, PartialEq)]
pub enum MetaError {
    #[error("training rows carry a single target class")]
    DegenerateTargets,
    #[error("feature {0} is not finite")]
    NonfiniteFeature(String),
    #[error("row {0} has no target")]
    MissingTarget(usize),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("penalty {penalty:?} is not available for {kind:?} models")]
    UnsupportedPenalty { kind: ModelKind, penalty: Penalty },
    #[error("both classes are needed")]
    SingleClass,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Predict whether a segment is a false positive (IoU = 0).
    ClassifyFp,
    /// Predict the segment IoU.
    RegressIou,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Logistic,
    Gbt,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    None,
    L1(f64),
    L2(f64),
}

impl Penalty {
    pub const DEFAULT_L1: f64 = 0.01;
    pub const DEFAULT_L2: f64 = 1e-3;
}

/// Everything that determines a trained model besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub task: Task,
    pub kind: ModelKind,
    pub penalty: Penalty,
    pub seed: u64,
    #[serde(default)]
    pub gbt: GbtConfig,
    #[serde(default)]
    pub mlp: MlpConfig,
}

impl TrainSpec {
    /// Default penalty is none, except for the network which uses L2.
    pub fn new(task: Task, kind: ModelKind) -> Self {
        let penalty = match kind {
            ModelKind::Mlp => Penalty::L2(Penalty::DEFAULT_L2),
            _ => Penalty::None,
        };
        Self {
            task,
            kind,
            penalty,
            seed: 0,
            gbt: GbtConfig::default(),
            mlp: MlpConfig::default(),
        }
    }

    pub fn with_penalty(mut self, penalty: Penalty) -> Self {
        self.penalty = penalty;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Per-feature z-scoring fitted on training rows. Only `active` features
/// (non-zero spread) are passed on to the models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub active: Vec<usize>,
}

impl Standardizer {
    pub fn fit(data: &MetricsDataset) -> Self {
        let d = data.schema().len();
        let n = data.len() as f64;
        let mut mean = vec![0.0; d];
        for row in data.rows() {
            for (m, v) in mean.iter_mut().zip(&row.features) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in data.rows() {
            for ((s, v), m) in var.iter_mut().zip(&row.features).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
        let active = (0..d).filter(|&j| std[j] > 0.0).collect();
        Self { mean, std, active }
    }

    pub fn dim(&self) -> usize {
        self.active.len()
    }

    pub fn transform_row(&self, features: &[f64], out: &mut Vec<f64>) {
        out.extend(
            self.active
                .iter()
                .map(|&j| (features[j] - self.mean[j]) / self.std[j]),
        );
    }

    /// Standardized active features, row-major.
    pub fn transform(&self, data: &MetricsDataset) -> Design {
        let mut x = Vec::with_capacity(data.len() * self.dim());
        for row in data.rows() {
            self.transform_row(&row.features, &mut x);
        }
        Design {
            rows: data.len(),
            cols: self.dim(),
            x,
        }
    }
}

/// A dense row-major design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub rows: usize,
    pub cols: usize,
    pub x: Vec<f64>,
}

impl Design {
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelParams {
    Linear(LinearModel),
    Logistic(LogisticModel),
    Gbt(GbtModel),
    Mlp(MlpModel),
}

/// A trained meta model. Serialized as the JSON model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaModel {
    pub task: Task,
    pub kind: ModelKind,
    pub penalty: Penalty,
    pub seed: u64,
    pub schema: Vec<String>,
    pub standardizer: Standardizer,
    pub params: ModelParams,
    /// Full training configuration, kept for retraining in evaluation runs.
    pub spec: TrainSpec,
}

fn targets(data: &MetricsDataset, task: Task) -> Result<Vec<f64>, MetaError> {
    data.rows()
        .iter()
        .enumerate()
        .map(|(i, r)| match task {
            Task::ClassifyFp => r.is_fp.map(|b| if b { 1.0 } else { 0.0 }),
            Task::RegressIou => r.iou,
        }
        .ok_or(MetaError::MissingTarget(i)))
        .collect()
}

/// Fits a model on all rows of `data`.
pub fn train(data: &MetricsDataset, spec: &TrainSpec) -> Result<MetaModel, MetaError> {
    if data.is_empty() {
        return Err(MetaError::InsufficientData("no training rows".into()));
    }
    for row in data.rows() {
        if let Some(j) = row.features.iter().position(|v| !v.is_finite()) {
            return Err(MetaError::NonfiniteFeature(data.schema()[j].clone()));
        }
    }
    let y = targets(data, spec.task)?;
    if spec.task == Task::ClassifyFp && y.iter().all(|&v| v == y[0]) {
        return Err(MetaError::DegenerateTargets);
    }
    let unsupported = || MetaError::UnsupportedPenalty {
        kind: spec.kind,
        penalty: spec.penalty,
    };
    let standardizer = Standardizer::fit(data);
    let x = standardizer.transform(data);
    let params = match spec.kind {
        ModelKind::Linear => ModelParams::Linear(LinearModel::fit(&x, &y, spec.penalty)),
        ModelKind::Logistic => ModelParams::Logistic(LogisticModel::fit(&x, &y, spec.penalty)),
        ModelKind::Gbt => {
            if spec.penalty != Penalty::None {
                return Err(unsupported());
            }
            let logistic = spec.task == Task::ClassifyFp;
            ModelParams::Gbt(GbtModel::fit(&x, &y, logistic, &spec.gbt))
        }
        ModelKind::Mlp => {
            let lambda = match spec.penalty {
                Penalty::None => 0.0,
                Penalty::L2(l) => l,
                Penalty::L1(_) => return Err(unsupported()),
            };
            let logistic = spec.task == Task::ClassifyFp;
            ModelParams::Mlp(MlpModel::fit(&x, &y, logistic, lambda, &spec.mlp, spec.seed))
        }
    };
    Ok(MetaModel {
        task: spec.task,
        kind: spec.kind,
        penalty: spec.penalty,
        seed: spec.seed,
        schema: data.schema().to_vec(),
        standardizer,
        params,
        spec: spec.clone(),
    })
}

impl MetaModel {
    /// Raw model output for one standardized row.
    fn raw(&self, z: &[f64]) -> f64 {
        match &self.params {
            ModelParams::Linear(m) => m.predict(z),
            ModelParams::Logistic(m) => m.probability(z),
            ModelParams::Gbt(m) => m.predict(z),
            ModelParams::Mlp(m) => m.predict(z),
        }
    }

    /// Scores in [0, 1]: false-positive probability for classification,
    /// clamped IoU estimate for regression.
    pub fn predict(&self, data: &MetricsDataset) -> Result<Vec<f64>, MetaError> {
        if data.schema() != self.schema.as_slice() {
            return Err(MetaError::SchemaMismatch(format!(
                "model expects {} features, table has {}",
                self.schema.len(),
                data.schema().len()
            )));
        }
        let mut z = Vec::with_capacity(self.standardizer.dim());
        Ok(data
            .rows()
            .iter()
            .map(|row| {
                z.clear();
                self.standardizer.transform_row(&row.features, &mut z);
                self.raw(&z).clamp(0.0, 1.0)
            })
            .collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

pub fn predict(model: &MetaModel, data: &MetricsDataset) -> Result<Vec<f64>, MetaError> {
    model.predict(data)
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Row, Source};

    pub(crate) fn table(columns: &[&str], features: Vec<Vec<f64>>, iou: Vec<f64>) -> MetricsDataset {
        MetricsDataset::from_rows(
            columns.iter().map(|s| s.to_string()).collect(),
            features
                .into_iter()
                .zip(iou)
                .enumerate()
                .map(|(i, (f, t))| Row {
                    frame_id: format!("f{i}"),
                    segment_id: 0,
                    source: Source::Real,
                    features: f,
                    iou: Some(t),
                    is_fp: Some(t == 0.0),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn standardizer_drops_constant_columns() {
        let d = table(&["a", "b"], vec![vec![1.0, 5.0], vec![3.0, 5.0]], vec![0.0, 1.0]);
        let s = Standardizer::fit(&d);
        assert_eq!(s.active, vec![0]);
        assert_eq!(s.transform(&d).x, vec![-1.0, 1.0]);
    }

    #[test]
    fn logistic_separates_one_dimensional_data() {
        let xs = [-3.0, -2.0, -1.5, -1.0, 1.0, 1.5, 2.0, 3.0];
        let d = table(
            &["x"],
            xs.iter().map(|&x| vec![x]).collect(),
            xs.iter().map(|&x| if x < 0.0 { 0.0 } else { 0.7 }).collect(),
        );
        let m = train(&d, &TrainSpec::new(Task::ClassifyFp, ModelKind::Logistic)).unwrap();
        let scores = m.predict(&d).unwrap();
        let labels = d.fp_targets().unwrap();
        assert_eq!(accuracy(&scores, &labels), 1.0);
    }

    #[test]
    fn exact_linear_fit() {
        let rel: Vec<f64> = (0..20).map(|i| 1.0 + i as f64 * 0.1).collect();
        let other: Vec<f64> = (0..20).map(|i| ((i * 7) % 5) as f64).collect();
        let iou: Vec<f64> = rel.iter().map(|s| 0.3 * s + 0.1).collect();
        let d = table(
            &["rel_size", "other"],
            rel.iter().zip(&other).map(|(&a, &b)| vec![a, b]).collect(),
            iou.clone(),
        );
        let m = train(&d, &TrainSpec::new(Task::RegressIou, ModelKind::Linear)).unwrap();
        let pred = m.predict(&d).unwrap();
        assert!((r_squared(&pred, &iou).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn training_is_deterministic() {
        let d = table(
            &["a", "b"],
            (0..30).map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos()]).collect(),
            (0..30).map(|i| if i % 3 == 0 { 0.0 } else { (i % 7) as f64 / 7.0 }).collect(),
        );
        for kind in [ModelKind::Linear, ModelKind::Logistic, ModelKind::Gbt, ModelKind::Mlp] {
            let spec = TrainSpec::new(Task::ClassifyFp, kind).with_seed(9);
            let a = train(&d, &spec).unwrap();
            let b = train(&d, &spec).unwrap();
            assert_eq!(a, b, "{kind:?}");
            assert_eq!(a.to_json(), b.to_json());
            assert_eq!(MetaModel::from_json(&a.to_json()).unwrap(), a);
        }
    }

    #[test]
    fn predictions_are_scores() {
        let d = table(
            &["a"],
            (0..10).map(|i| vec![i as f64]).collect(),
            (0..10).map(|i| i as f64 / 9.0).collect(),
        );
        let mut m = train(&d, &TrainSpec::new(Task::RegressIou, ModelKind::Linear)).unwrap();
        if let ModelParams::Linear(l) = &mut m.params {
            l.bias = 1.2;
            l.weights = vec![0.0];
        }
        assert!(m.predict(&d).unwrap().iter().all(|&s| s == 1.0));

        let mut c = train(&d, &TrainSpec::new(Task::ClassifyFp, ModelKind::Logistic)).unwrap();
        if let ModelParams::Logistic(l) = &mut c.params {
            l.bias = 0.0;
            l.weights = vec![0.0];
        }
        assert!(c.predict(&d).unwrap().iter().all(|&s| s == 0.5));
    }

    #[test]
    fn error_paths() {
        let d = table(&["a"], vec![vec![1.0], vec![2.0]], vec![0.5, 0.7]);
        assert_eq!(
            train(&d, &TrainSpec::new(Task::ClassifyFp, ModelKind::Logistic)),
            Err(MetaError::DegenerateTargets)
        );
        assert!(matches!(
            train(&d, &TrainSpec::new(Task::RegressIou, ModelKind::Gbt).with_penalty(Penalty::L1(0.1))),
            Err(MetaError::UnsupportedPenalty { .. })
        ));
        let m = train(&d, &TrainSpec::new(Task::RegressIou, ModelKind::Linear)).unwrap();
        let other = table(&["b"], vec![vec![1.0]], vec![0.5]);
        assert!(matches!(m.predict(&other), Err(MetaError::SchemaMismatch(_))));
        let mut unlabeled = d.clone();
        unlabeled.rows_mut()[1].iou = None;
        assert_eq!(
            train(&unlabeled, &TrainSpec::new(Task::RegressIou, ModelKind::Linear)),
            Err(MetaError::MissingTarget(1))
        );
    }

    #[test]
    fn rescaled_column_gives_same_logistic_predictions() {
        let base: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos() * 3.0])
            .collect();
        let iou: Vec<f64> = base
            .iter()
            .map(|f| if f[0] + 0.3 * f[1] + 0.2 * (f[0] * 9.0).sin() > 0.0 { 0.5 } else { 0.0 })
            .collect();
        let d = table(&["a", "b"], base.clone(), iou.clone());
        let scaled = table(
            &["a", "b"],
            base.iter().map(|f| vec![f[0], -250.0 * f[1] + 17.0]).collect(),
            iou,
        );
        for penalty in [Penalty::None, Penalty::L1(Penalty::DEFAULT_L1)] {
            let spec = TrainSpec::new(Task::ClassifyFp, ModelKind::Logistic).with_penalty(penalty);
            let p = train(&d, &spec).unwrap().predict(&d).unwrap();
            let q = train(&scaled, &spec).unwrap().predict(&scaled).unwrap();
            for (a, b) in p.iter().zip(&q) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
