//! Corpus-level reporting: empirical CDFs of segment-wise precision and
//! recall, first-order stochastic dominance, non-detection rates and PPM
//! renderings of per-segment values.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::atomic_write;
use crate::segments::{SegmentSet, NO_SEGMENT};
use crate::volume::{LabelMap, IGNORE_LABEL};

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("empty sample")]
    EmptySample,
    #[error("sample value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("expected a {expected:?} CDF, got {got:?}")]
    KindMismatch { expected: MetricKind, got: MetricKind },
    #[error("{values} values for {segments} segments")]
    ValueCount { values: usize, segments: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Precision,
    Recall,
}

/// Right-continuous step function `F(v) = #{x <= v} / n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalCdf {
    pub kind: MetricKind,
    pub classes: Vec<u8>,
    pub rule: String,
    values: Vec<f64>,
}

pub fn build_cdf(values: &[f64], kind: MetricKind) -> Result<EmpiricalCdf, EvaluationError> {
    if values.is_empty() {
        return Err(EvaluationError::EmptySample);
    }
    if let Some(&v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(EvaluationError::OutOfRange(v));
    }
    let mut values = values.to_vec();
    values.sort_by(f64::total_cmp);
    Ok(EmpiricalCdf {
        kind,
        classes: Vec::new(),
        rule: String::new(),
        values,
    })
}

impl EmpiricalCdf {
    pub fn with_tags(mut self, classes: &[u8], rule: &str) -> Self {
        self.classes = classes.to_vec();
        self.rule = rule.to_string();
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn eval(&self, v: f64) -> f64 {
        self.values.partition_point(|&x| x <= v) as f64 / self.values.len() as f64
    }

    /// `(v, F(v))` at every distinct sample value.
    pub fn points(&self) -> Vec<[f64; 2]> {
        let mut out: Vec<[f64; 2]> = Vec::new();
        for (i, &v) in self.values.iter().enumerate() {
            let f = (i + 1) as f64 / self.values.len() as f64;
            match out.last_mut() {
                Some(last) if last[0] == v => last[1] = f,
                _ => out.push([v, f]),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// `A`'s distribution lies to the right of `B`'s.
    ADominatesB,
    BDominatesA,
    Crossing,
    Equal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DominanceResult {
    pub verdict: Verdict,
    /// `max(F_A - F_B)` over the grid, at least 0.
    pub max_a_above_b: f64,
    /// `max(F_B - F_A)` over the grid, at least 0.
    pub max_b_above_a: f64,
    /// For a crossing, the smaller of the two excursions; 0 otherwise.
    pub max_violation: f64,
    pub grid_size: usize,
}

/// First-order dominance of two CDFs checked on the union of their sample
/// points, where both step functions attain all their values.
pub fn dominance(a: &EmpiricalCdf, b: &EmpiricalCdf, tol: f64) -> Result<DominanceResult, EvaluationError> {
    if a.kind != b.kind {
        return Err(EvaluationError::KindMismatch {
            expected: a.kind,
            got: b.kind,
        });
    }
    let mut grid: Vec<f64> = a.values.iter().chain(&b.values).copied().collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let (mut above, mut below) = (0.0f64, 0.0f64);
    for &v in &grid {
        let d = a.eval(v) - b.eval(v);
        above = above.max(d);
        below = below.max(-d);
    }
    let verdict = match (above > tol, below > tol) {
        (false, false) => Verdict::Equal,
        (true, false) => Verdict::BDominatesA,
        (false, true) => Verdict::ADominatesB,
        (true, true) => Verdict::Crossing,
    };
    Ok(DominanceResult {
        verdict,
        max_a_above_b: above,
        max_b_above_a: below,
        max_violation: if verdict == Verdict::Crossing { above.min(below) } else { 0.0 },
        grid_size: grid.len(),
    })
}

/// `F^r(0)`: the share of ground-truth segments with recall exactly 0.
pub fn nondetection_rate(cdf: &EmpiricalCdf) -> Result<f64, EvaluationError> {
    if cdf.kind != MetricKind::Recall {
        return Err(EvaluationError::KindMismatch {
            expected: MetricKind::Recall,
            got: cdf.kind,
        });
    }
    Ok(cdf.eval(0.0))
}

/// JSON form of a CDF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfReport {
    pub class: Vec<u8>,
    pub kind: MetricKind,
    pub rule: String,
    pub n: usize,
    pub points: Vec<[f64; 2]>,
    /// Present for recall CDFs.
    pub f_r_zero: Option<f64>,
}

impl From<&EmpiricalCdf> for CdfReport {
    fn from(cdf: &EmpiricalCdf) -> Self {
        CdfReport {
            class: cdf.classes.clone(),
            kind: cdf.kind,
            rule: cdf.rule.clone(),
            n: cdf.len(),
            points: cdf.points(),
            f_r_zero: nondetection_rate(cdf).ok(),
        }
    }
}

const WHITE: [u8; 3] = [255, 255, 255];

/// Red for 0 through green for 1.
pub fn ramp(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    [(255.0 * (1.0 - v)).round() as u8, (255.0 * v).round() as u8, 0]
}

fn ppm(width: usize, height: usize, pixels: impl Iterator<Item = [u8; 3]>) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(width * height * 3);
    for p in pixels {
        out.extend_from_slice(&p);
    }
    out
}

fn check_ignore(h: usize, w: usize, ignore: Option<&LabelMap>) -> Result<(), EvaluationError> {
    match ignore {
        Some(m) if m.height() != h || m.width() != w => Err(EvaluationError::ShapeMismatch(format!(
            "{h}x{w} image, {}x{} ignore map",
            m.height(),
            m.width()
        ))),
        _ => Ok(()),
    }
}

/// Binary PPM coloring every segment by its value (indexed by segment id).
/// Ignored pixels and pixels outside all segments are white.
pub fn render_heatmap(
    values: &[f64],
    segments: &SegmentSet,
    ignore: Option<&LabelMap>,
) -> Result<Vec<u8>, EvaluationError> {
    if values.len() != segments.len() {
        return Err(EvaluationError::ValueCount {
            values: values.len(),
            segments: segments.len(),
        });
    }
    let (h, w) = (segments.height(), segments.width());
    check_ignore(h, w, ignore)?;
    let colors: Vec<[u8; 3]> = values.iter().map(|&v| ramp(v)).collect();
    Ok(ppm(
        w,
        h,
        segments.index_map().iter().enumerate().map(|(z, &k)| {
            if k == NO_SEGMENT || ignore.is_some_and(|m| m.is_ignored(z)) {
                WHITE
            } else {
                colors[k as usize]
            }
        }),
    ))
}

const PALETTE: [[u8; 3]; 12] = [
    [128, 64, 128],
    [220, 20, 60],
    [70, 70, 70],
    [107, 142, 35],
    [0, 0, 142],
    [250, 170, 30],
    [70, 130, 180],
    [190, 153, 153],
    [152, 251, 152],
    [255, 0, 0],
    [0, 60, 100],
    [119, 11, 32],
];

/// Color of a class id in label renderings.
pub fn class_color(class: u8) -> [u8; 3] {
    if class == IGNORE_LABEL {
        WHITE
    } else {
        PALETTE[class as usize % PALETTE.len()]
    }
}

/// Binary PPM of a label map with a fixed class palette.
pub fn render_labels(labels: &LabelMap, ignore: Option<&LabelMap>) -> Result<Vec<u8>, EvaluationError> {
    check_ignore(labels.height(), labels.width(), ignore)?;
    Ok(ppm(
        labels.width(),
        labels.height(),
        labels.as_slice().iter().enumerate().map(|(z, &c)| {
            if ignore.is_some_and(|m| m.is_ignored(z)) {
                WHITE
            } else {
                class_color(c)
            }
        }),
    ))
}

pub fn write_image(bytes: &[u8], path: impl AsRef<Path>) -> Result<(), EvaluationError> {
    Ok(atomic_write(path.as_ref(), bytes)?)
}
