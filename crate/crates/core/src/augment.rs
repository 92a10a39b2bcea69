//! Training-set enlargement: SMOTE-style interpolation for continuous IoU
//! targets, pseudo ground truth from a reference segmentation, and the
//! training compositions built from real, augmented and pseudo rows.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, MetricsDataset, Row, Source};
use crate::meta::{self, EvaluationReport, FeatureSet, MetaError, Protocol, TrainSpec};
use crate::segments::{match_segments, MatchResult, SegmentError, SegmentSet};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("need at least {needed} rows in the rare stratum, found {found}")]
    TooFewRows { needed: usize, found: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown composition {0:?} (expected R, RA, RAP, RP or P)")]
    UnknownComposition(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub k_neighbors: usize,
    /// Synthetic rows per rare row.
    pub factor: f64,
    /// Number of equal-width IoU bins on (0, 1].
    pub bins: usize,
    /// Bins holding less than this share of the labeled rows are rare.
    pub rare_mass: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 5,
            factor: 2.0,
            bins: 10,
            rare_mass: 0.1,
            seed: 1,
        }
    }
}

impl AugmentConfig {
    fn validate(&self) -> Result<(), AugmentError> {
        if self.k_neighbors == 0 {
            return Err(AugmentError::InvalidConfig("k_neighbors must be at least 1".into()));
        }
        if !(self.factor >= 0.0 && self.factor.is_finite()) {
            return Err(AugmentError::InvalidConfig(format!("factor {} must be >= 0", self.factor)));
        }
        if self.bins == 0 || !(0.0..=1.0).contains(&self.rare_mass) {
            return Err(AugmentError::InvalidConfig("bins >= 1 and rare_mass in [0, 1] required".into()));
        }
        Ok(())
    }
}

fn bin_of(iou: f64, bins: usize) -> usize {
    ((iou * bins as f64).ceil() as usize).clamp(1, bins) - 1
}

/// Indices of labeled rows with IoU 0 or an IoU bin of low mass.
pub fn rare_stratum(data: &MetricsDataset, cfg: &AugmentConfig) -> Vec<usize> {
    let labeled: Vec<(usize, f64)> = data
        .rows()
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.iou.map(|v| (i, v)))
        .collect();
    let mut mass = vec![0usize; cfg.bins];
    for &(_, v) in &labeled {
        if v > 0.0 {
            mass[bin_of(v, cfg.bins)] += 1;
        }
    }
    let limit = cfg.rare_mass * labeled.len() as f64;
    labeled
        .into_iter()
        .filter(|&(_, v)| v == 0.0 || (mass[bin_of(v, cfg.bins)] as f64) < limit)
        .map(|(i, _)| i)
        .collect()
}

/// A point on the segment from `a` to `b` and its interpolated target.
/// Inverse-distance weighting of the parents reduces to linear weights
/// `1 - u` and `u`.
pub fn interpolate(a: &[f64], ta: f64, b: &[f64], tb: f64, u: f64) -> (Vec<f64>, f64) {
    let features = a.iter().zip(b).map(|(x, y)| x + u * (y - x)).collect();
    let same = a == b;
    let target = if same { 0.5 * (ta + tb) } else { (1.0 - u) * ta + u * tb };
    (features, target)
}

/// One synthetic row: seed row index, neighbor index and weight `u`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Provenance {
    pub seed: usize,
    pub neighbor: usize,
    pub u: f64,
}

/// Synthetic rows together with their parents.
pub fn smote_with_provenance(
    data: &MetricsDataset,
    cfg: &AugmentConfig,
) -> Result<(MetricsDataset, Vec<Provenance>), AugmentError> {
    cfg.validate()?;
    let stratum = rare_stratum(data, cfg);
    if stratum.len() < cfg.k_neighbors + 1 {
        return Err(AugmentError::TooFewRows {
            needed: cfg.k_neighbors + 1,
            found: stratum.len(),
        });
    }
    let scaler = meta::Standardizer::fit(data);
    let z: Vec<Vec<f64>> = stratum
        .iter()
        .map(|&i| {
            let mut v = Vec::new();
            scaler.transform_row(&data.rows()[i].features, &mut v);
            v
        })
        .collect();
    let neighbors: Vec<Vec<usize>> = (0..stratum.len())
        .map(|a| {
            let mut d: Vec<(f64, usize)> = (0..stratum.len())
                .filter(|&b| b != a)
                .map(|b| (z[a].iter().zip(&z[b]).map(|(x, y)| (x - y) * (x - y)).sum(), b))
                .collect();
            d.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            d.into_iter().take(cfg.k_neighbors).map(|(_, b)| b).collect()
        })
        .collect();

    let count = (cfg.factor * stratum.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = MetricsDataset::new(data.schema().to_vec());
    let mut provenance = Vec::with_capacity(count);
    for n in 0..count {
        let a = rng.random_range(0..stratum.len());
        let b = neighbors[a][rng.random_range(0..neighbors[a].len())];
        let u: f64 = rng.random();
        let (ra, rb) = (&data.rows()[stratum[a]], &data.rows()[stratum[b]]);
        let (features, iou) = interpolate(
            &ra.features,
            ra.iou.expect("stratum rows are labeled"),
            &rb.features,
            rb.iou.expect("stratum rows are labeled"),
            u,
        );
        out.push(Row {
            frame_id: format!("augmented/{n:06}"),
            segment_id: n as u32,
            source: Source::Augmented,
            features,
            iou: Some(iou),
            is_fp: Some(iou == 0.0),
        })?;
        provenance.push(Provenance {
            seed: stratum[a],
            neighbor: stratum[b],
            u,
        });
    }
    Ok((out, provenance))
}

/// Synthetic rows interpolated between rare rows and one of their
/// `k_neighbors` nearest rare neighbors in standardized feature space.
pub fn smote_rows(data: &MetricsDataset, cfg: &AugmentConfig) -> Result<MetricsDataset, AugmentError> {
    smote_with_provenance(data, cfg).map(|(d, _)| d)
}

/// Targets of predicted segments against a reference segmentation instead
/// of ground truth.
pub fn pseudo_targets(pred: &SegmentSet, reference: &SegmentSet) -> Result<MatchResult, SegmentError> {
    match_segments(pred, reference)
}

/// Relabels every row as pseudo.
pub fn mark_pseudo(mut data: MetricsDataset) -> MetricsDataset {
    for r in data.rows_mut() {
        r.source = Source::Pseudo;
    }
    data
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Composition {
    R,
    RA,
    RAP,
    RP,
    P,
}

impl Composition {
    pub const ALL: [Composition; 5] = [Self::R, Self::RA, Self::RAP, Self::RP, Self::P];

    pub fn real(self) -> bool {
        self != Self::P
    }

    pub fn augmented(self) -> bool {
        matches!(self, Self::RA | Self::RAP)
    }

    pub fn pseudo(self) -> bool {
        matches!(self, Self::RAP | Self::RP | Self::P)
    }
}

impl fmt::Display for Composition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Composition {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| AugmentError::UnknownComposition(s.to_string()))
    }
}

/// Concatenates the parts selected by `spec`, in the order real,
/// augmented, pseudo.
pub fn compose(
    real: &MetricsDataset,
    augmented: &MetricsDataset,
    pseudo: &MetricsDataset,
    spec: Composition,
) -> Result<MetricsDataset, AugmentError> {
    let mut out = MetricsDataset::new(real.schema().to_vec());
    for (used, part) in [(spec.real(), real), (spec.augmented(), augmented), (spec.pseudo(), pseudo)] {
        if used {
            out.extend(part)?;
        }
    }
    Ok(out)
}

/// Resampled evaluation on `real` where each run's training split is
/// replaced by the composition `spec`: SMOTE rows are drawn from the run's
/// real training rows, pseudo rows are added as given. Validation and test
/// rows are always real.
pub fn evaluate_composition(
    real: &MetricsDataset,
    pseudo: &MetricsDataset,
    spec: Composition,
    train: &TrainSpec,
    features: FeatureSet,
    protocol: &Protocol,
    augment: &AugmentConfig,
) -> Result<EvaluationReport, MetaError> {
    let real_only = real.filter(|r| r.source == Source::Real);
    let labeled_pseudo = pseudo.labeled();
    let prepare = |rows: &MetricsDataset, seed: u64| -> Result<MetricsDataset, MetaError> {
        let augmented = if spec.augmented() {
            let cfg = AugmentConfig {
                seed: augment.seed.wrapping_add(seed),
                ..augment.clone()
            };
            smote_rows(rows, &cfg).map_err(|e| MetaError::InsufficientData(e.to_string()))?
        } else {
            MetricsDataset::new(rows.schema().to_vec())
        };
        compose(rows, &augmented, &labeled_pseudo, spec).map_err(|e| MetaError::SchemaMismatch(e.to_string()))
    };
    meta::protocol::evaluate_with(&real_only, train, features, protocol, &prepare)
}
