//! Pixel-wise dispersion heatmaps and their aggregation into one metric
//! vector per predicted segment.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, MetricsDataset, Row, Source};
use crate::segments::{extract_segments, match_segments, MatchResult, SegmentSet, SegmentSource};
use crate::volume::{LabelMap, ProbabilityVolume};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("need at least two labeled rows, found {0}")]
    InsufficientData(usize),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Entropy (normalized by `ln q`), variation ratio and probability margin
/// for every pixel. All three lie in [0, 1] and vanish for one-hot pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DispersionMaps {
    pub height: usize,
    pub width: usize,
    pub entropy: Vec<f64>,
    pub variation_ratio: Vec<f64>,
    pub margin: Vec<f64>,
}

/// Dispersion of one pixel distribution: (entropy, variation ratio, margin).
/// The pixel is renormalized in double precision first, so single precision
/// rounding of the stored values does not leak into the scores.
pub fn pixel_dispersion(p: &[f32]) -> (f64, f64, f64) {
    let q = p.len();
    let total: f64 = p.iter().map(|&v| v as f64).sum();
    let mut h = 0.0;
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in p {
        let v = v as f64 / total;
        if v > 0.0 {
            h -= v * v.ln();
        }
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    let entropy = if q > 1 {
        (h / (q as f64).ln()).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let second = if q > 1 { second } else { 0.0 };
    let variation_ratio = (1.0 - first).clamp(0.0, 1.0);
    let margin = (1.0 - (first - second)).clamp(0.0, 1.0);
    (entropy, variation_ratio, margin)
}

pub fn dispersion_maps(probs: &ProbabilityVolume) -> DispersionMaps {
    let n = probs.pixel_count();
    let mut maps = DispersionMaps {
        height: probs.height(),
        width: probs.width(),
        entropy: Vec::with_capacity(n),
        variation_ratio: Vec::with_capacity(n),
        margin: Vec::with_capacity(n),
    };
    for p in probs.pixels() {
        let (e, v, m) = pixel_dispersion(p);
        maps.entropy.push(e);
        maps.variation_ratio.push(v);
        maps.margin.push(m);
    }
    maps
}

/// Name of the mean-entropy column, the single feature of the entropy
/// baseline.
pub const MEAN_ENTROPY: &str = "mean_entropy";

const SIZE_FEATURES: [&str; 5] = [
    "size",
    "interior_size",
    "boundary_size",
    "rel_size",
    "rel_interior_size",
];
const DISPERSIONS: [&str; 3] = ["entropy", "variation_ratio", "margin"];

/// Feature columns for a `classes`-class problem: five size/fractality
/// measures, nine dispersion means (whole, boundary, interior), one mean
/// probability per class, the class id and an interior flag.
pub fn feature_schema(classes: usize) -> Vec<String> {
    let mut names: Vec<String> = SIZE_FEATURES.iter().map(|s| s.to_string()).collect();
    for d in DISPERSIONS {
        names.push(format!("mean_{d}"));
        names.push(format!("mean_{d}_bd"));
        names.push(format!("mean_{d}_in"));
    }
    names.extend((0..classes).map(|y| format!("mean_prob_{y}")));
    names.push("class_id".into());
    names.push("has_interior".into());
    names
}

/// One metrics row per predicted segment of `segments`, in segment-id order.
/// Targets come from `matches` when given.
pub fn aggregate(
    segments: &SegmentSet,
    maps: &DispersionMaps,
    probs: &ProbabilityVolume,
    matches: Option<&MatchResult>,
) -> Result<MetricsDataset, MetricsError> {
    let (h, w) = (segments.height(), segments.width());
    if maps.height != h || maps.width != w || probs.height() != h || probs.width() != w {
        return Err(MetricsError::ShapeMismatch(format!(
            "segments {h}x{w}, heatmaps {}x{}, volume {}x{}",
            maps.height,
            maps.width,
            probs.height(),
            probs.width()
        )));
    }
    let q = probs.classes();
    let mut data = MetricsDataset::new(feature_schema(q));
    for k in segments.segments() {
        // [whole, boundary, interior] x [entropy, variation ratio, margin]
        let mut sums = [[0.0f64; 3]; 3];
        let mut class_sums = vec![0.0f64; q];
        for (r, c) in k.pixels() {
            let z = r * w + c;
            let values = [maps.entropy[z], maps.variation_ratio[z], maps.margin[z]];
            let part = if segments.is_boundary(r, c) { 1 } else { 2 };
            for (d, v) in values.iter().enumerate() {
                sums[0][d] += v;
                sums[part][d] += v;
            }
            for (acc, &p) in class_sums.iter_mut().zip(probs.pixel(z)) {
                *acc += p as f64;
            }
        }
        let size = k.size as f64;
        let boundary = k.boundary_size as f64;
        let interior = k.interior_size as f64;
        let mean = |total: f64, count: f64| if count > 0.0 { total / count } else { 0.0 };

        let mut features = vec![
            size,
            interior,
            boundary,
            size / boundary,
            interior / boundary,
        ];
        for d in 0..3 {
            features.push(mean(sums[0][d], size));
            features.push(mean(sums[1][d], boundary));
            features.push(mean(sums[2][d], interior));
        }
        features.extend(class_sums.iter().map(|s| s / size));
        features.push(k.class_id as f64);
        features.push(if k.interior_size > 0 { 1.0 } else { 0.0 });

        let target = matches.and_then(|m| m.for_segment(k.id));
        data.push(Row {
            frame_id: segments.frame_id.clone(),
            segment_id: k.id,
            source: Source::Real,
            features,
            iou: target.map(|t| t.iou),
            is_fp: target.map(|t| t.is_fp),
        })?;
    }
    Ok(data)
}

/// Segments and metrics of one frame. With ground truth, its ignore pixels
/// are removed from the prediction before segmentation and targets are
/// filled in.
pub fn frame_metrics(
    frame_id: &str,
    probs: &ProbabilityVolume,
    mask: &LabelMap,
    gt: Option<&LabelMap>,
) -> Result<(MetricsDataset, SegmentSet), MetricsError> {
    if mask.height() != probs.height() || mask.width() != probs.width() {
        return Err(MetricsError::ShapeMismatch(format!(
            "mask {}x{}, volume {}x{}",
            mask.height(),
            mask.width(),
            probs.height(),
            probs.width()
        )));
    }
    let pred = extract_segments(mask, gt).tagged(frame_id, SegmentSource::Predicted);
    let matches = match gt {
        Some(gt) => {
            let truth = extract_segments(gt, None).tagged(frame_id, SegmentSource::GroundTruth);
            Some(match_segments(&pred, &truth).map_err(|e| MetricsError::ShapeMismatch(e.to_string()))?)
        }
        None => None,
    };
    let data = aggregate(&pred, &dispersion_maps(probs), probs, matches.as_ref())?;
    Ok((data, pred))
}

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCorrelation {
    pub feature: String,
    /// Undefined for constant features.
    pub r: Option<f64>,
}

/// Pearson R of every feature against the IoU target, over labeled rows.
pub fn correlation_report(data: &MetricsDataset) -> Result<Vec<FeatureCorrelation>, MetricsError> {
    let labeled = data.labeled();
    if labeled.len() < 2 {
        return Err(MetricsError::InsufficientData(labeled.len()));
    }
    let iou = labeled.iou_targets().expect("labeled rows");
    Ok(labeled
        .schema()
        .iter()
        .enumerate()
        .map(|(i, name)| FeatureCorrelation {
            feature: name.clone(),
            r: pearson(&labeled.column(i), &iou),
        })
        .collect())
}
