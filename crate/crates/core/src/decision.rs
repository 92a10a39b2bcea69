//! Pixel-wise decision rules turning softmax volumes into masks.
//!
//! All rules break ties towards the lowest class index.

use std::path::Path;

use thiserror::Error;

use crate::io::npy::{self, ArrayData, ArrayFile, NpyError};
use crate::volume::{LabelMap, ProbabilityVolume, SegmentationMask, IGNORE_LABEL};

#[derive(Debug, Error)]
pub enum DecisionError {
    #[error("cost matrix must be square, got {rows} rows with {cols} columns")]
    NotSquare { rows: usize, cols: usize },
    #[error("cost entry ({row}, {col}) = {value} is negative or not finite")]
    InvalidCost { row: usize, col: usize, value: f64 },
    #[error("cost diagonal entry ({0}, {0}) must be 0")]
    NonzeroDiagonal(usize),
    #[error("cost matrix covers {matrix} classes, volume has {volume}")]
    ClassMismatch { matrix: usize, volume: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("prior for class {class} at pixel {pixel} is not strictly positive")]
    NonpositivePrior { pixel: usize, class: usize },
    #[error("no label maps given")]
    EmptyInput,
    #[error("class {class} never occurs at pixel {pixel}; raise the smoothing constant")]
    ZeroPrior { pixel: usize, class: usize },
    #[error("smoothing constant {0} must be finite and non-negative")]
    BadSmoothing(f64),
    #[error("label {label} is not a valid class for q = {classes}")]
    LabelOutOfRange { label: u8, classes: usize },
    #[error("cost matrix csv: {0}")]
    Parse(String),
    #[error(transparent)]
    Npy(#[from] NpyError),
}

#[inline]
fn argmax_by<F: Fn(usize) -> f64>(classes: usize, score: F) -> u8 {
    let mut best = 0;
    let mut best_score = score(0);
    for y in 1..classes {
        let s = score(y);
        if s > best_score {
            best = y;
            best_score = s;
        }
    }
    best as u8
}

/// Maximum a-posteriori rule: the class of highest softmax probability.
pub fn bayes_decide(probs: &ProbabilityVolume) -> SegmentationMask {
    let q = probs.classes();
    let data = probs
        .pixels()
        .map(|p| argmax_by(q, |y| p[y] as f64))
        .collect();
    LabelMap::new(probs.height(), probs.width(), data).expect("shape from volume")
}

/// Confusion costs: `cost(predicted, actual)`, non-negative with a zero
/// diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    classes: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, DecisionError> {
        let classes = rows.len();
        let mut values = Vec::with_capacity(classes * classes);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != classes {
                return Err(DecisionError::NotSquare {
                    rows: classes,
                    cols: row.len(),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() || v < 0.0 {
                    return Err(DecisionError::InvalidCost {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
                if i == j && v != 0.0 {
                    return Err(DecisionError::NonzeroDiagonal(i));
                }
                values.push(v);
            }
        }
        Ok(Self { classes, values })
    }

    /// Equal cost `c` for every confusion.
    pub fn uniform(classes: usize, c: f64) -> Result<Self, DecisionError> {
        Self::new(
            (0..classes)
                .map(|i| (0..classes).map(|j| if i == j { 0.0 } else { c }).collect())
                .collect(),
        )
    }

    /// Costs inverse to the class frequencies, `cost(y', y) = 1 / freq(y)`.
    pub fn inverse_frequency(frequencies: &[f64]) -> Result<Self, DecisionError> {
        let q = frequencies.len();
        Self::new(
            (0..q)
                .map(|i| {
                    (0..q)
                        .map(|j| if i == j { 0.0 } else { 1.0 / frequencies[j] })
                        .collect()
                })
                .collect(),
        )
    }

    /// Parses q lines of q comma-separated non-negative decimals.
    pub fn from_csv(text: &str) -> Result<Self, DecisionError> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                line.split(',')
                    .map(|cell| {
                        cell.trim()
                            .parse::<f64>()
                            .map_err(|_| DecisionError::Parse(format!("bad number {cell:?}")))
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(rows)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn cost(&self, predicted: usize, actual: usize) -> f64 {
        self.values[predicted * self.classes + actual]
    }

    /// True when every confusion costs nothing, making every class optimal.
    pub fn is_degenerate(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Expected cost of predicting `predicted` under the distribution `pixel`.
    #[inline]
    pub fn expected_cost(&self, predicted: usize, pixel: &[f32]) -> f64 {
        let row = &self.values[predicted * self.classes..(predicted + 1) * self.classes];
        let mut total = 0.0;
        for (y, (&c, &p)) in row.iter().zip(pixel).enumerate() {
            if y != predicted {
                total += c * p as f64;
            }
        }
        total
    }
}

/// Minimum expected cost rule. A matrix of all-zero costs is degenerate:
/// the result is class 0 everywhere and a warning is logged.
pub fn cost_decide(
    probs: &ProbabilityVolume,
    costs: &CostMatrix,
) -> Result<SegmentationMask, DecisionError> {
    let q = probs.classes();
    if costs.classes() != q {
        return Err(DecisionError::ClassMismatch {
            matrix: costs.classes(),
            volume: q,
        });
    }
    if costs.is_degenerate() {
        log::warn!("all confusion costs are zero; every class is optimal, predicting class 0");
        return Ok(LabelMap::filled(probs.height(), probs.width(), 0));
    }
    let data = probs
        .pixels()
        .map(|p| argmax_by(q, |y| -costs.expected_cost(y, p)))
        .collect();
    Ok(LabelMap::new(probs.height(), probs.width(), data).expect("shape from volume"))
}

/// Position-specific class priors, `classes` values per cell. A cell covers
/// a `scale` x `scale` block of full-resolution pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMap {
    height: usize,
    width: usize,
    classes: usize,
    scale: usize,
    values: Vec<f64>,
    alpha: f64,
}

impl PriorMap {
    pub fn new(
        height: usize,
        width: usize,
        classes: usize,
        values: Vec<f64>,
    ) -> Result<Self, DecisionError> {
        if values.len() != height * width * classes {
            return Err(DecisionError::ShapeMismatch(format!(
                "prior map holds {} values, expected {height}x{width}x{classes}",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            scale: 1,
            values,
            alpha: 0.0,
        })
    }

    /// The same prior vector at every position.
    pub fn constant(height: usize, width: usize, prior: &[f64]) -> Self {
        let values = (0..height * width).flat_map(|_| prior.iter().copied()).collect();
        Self {
            height,
            width,
            classes: prior.len(),
            scale: 1,
            values,
            alpha: 0.0,
        }
    }

    pub fn uniform(height: usize, width: usize, classes: usize) -> Self {
        Self::constant(height, width, &vec![1.0 / classes as f64; classes])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Priors of the cell covering full-resolution pixel `(row, col)`.
    #[inline]
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let cell = (row / self.scale) * self.width + col / self.scale;
        &self.values[cell * self.classes..(cell + 1) * self.classes]
    }

    /// Full-resolution extent covered by this map.
    pub fn covers(&self, height: usize, width: usize) -> bool {
        height.div_ceil(self.scale) == self.height && width.div_ceil(self.scale) == self.width
    }

    /// Block-averages `factor` x `factor` cells and renormalizes each cell.
    pub fn downscale(&self, factor: usize) -> PriorMap {
        assert!(factor >= 1, "downscale factor must be positive");
        let (h, w, q) = (
            self.height.div_ceil(factor),
            self.width.div_ceil(factor),
            self.classes,
        );
        let mut values = vec![0.0; h * w * q];
        for r in 0..self.height {
            for c in 0..self.width {
                let cell = (r / factor) * w + c / factor;
                let src = (r * self.width + c) * q;
                for y in 0..q {
                    values[cell * q + y] += self.values[src + y];
                }
            }
        }
        for cell in values.chunks_exact_mut(q) {
            let sum: f64 = cell.iter().sum();
            cell.iter_mut().for_each(|v| *v /= sum);
        }
        PriorMap {
            height: h,
            width: w,
            classes: q,
            scale: self.scale * factor,
            values,
            alpha: self.alpha,
        }
    }

    /// Reinterprets the map as covering a `height` x `width` frame, choosing
    /// the block scale that matches the stored resolution.
    pub fn fit_to(mut self, height: usize, width: usize) -> Result<Self, DecisionError> {
        let found = (1..=height.max(width).max(1))
            .find(|&s| height.div_ceil(s) == self.height && width.div_ceil(s) == self.width);
        match found {
            Some(s) => {
                self.scale = s;
                Ok(self)
            }
            None => Err(DecisionError::ShapeMismatch(format!(
                "prior map {}x{} does not tile a {height}x{width} frame",
                self.height, self.width
            ))),
        }
    }

    fn check_positive(&self) -> Result<(), DecisionError> {
        match self.values.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
            Some(i) => Err(DecisionError::NonpositivePrior {
                pixel: i / self.classes,
                class: i % self.classes,
            }),
            None => Ok(()),
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, DecisionError> {
        let array = npy::read_array(path)?;
        let [h, w, q] = array.shape()[..] else {
            return Err(DecisionError::ShapeMismatch(format!(
                "prior file must be 3-D, got {:?}",
                array.shape()
            )));
        };
        let values = match array.into_data() {
            ArrayData::F32(v) => v.into_iter().map(f64::from).collect(),
            _ => return Err(DecisionError::Parse("prior file must be float32".into())),
        };
        Self::new(h, w, q, values)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DecisionError> {
        let array = ArrayFile::new(
            vec![self.height, self.width, self.classes],
            ArrayData::F32(self.values.iter().map(|&v| v as f32).collect()),
        )?;
        Ok(npy::write_array(&array, path)?)
    }
}

/// Estimates position-specific priors from ground-truth label maps with
/// Laplace smoothing: `(count(y) + alpha) / (n + alpha * q)` per pixel, where
/// ignore pixels count towards neither `count` nor `n`.
pub fn estimate_priors<'a, I>(labels: I, classes: usize, alpha: f64) -> Result<PriorMap, DecisionError>
where
    I: IntoIterator<Item = &'a LabelMap>,
{
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(DecisionError::BadSmoothing(alpha));
    }
    let mut iter = labels.into_iter();
    let first = iter.next().ok_or(DecisionError::EmptyInput)?;
    let (h, w) = (first.height(), first.width());
    let mut counts = vec![0u64; h * w * classes];
    let mut totals = vec![0u64; h * w];
    for map in std::iter::once(first).chain(iter) {
        if map.height() != h || map.width() != w {
            return Err(DecisionError::ShapeMismatch(format!(
                "label map {}x{} differs from {h}x{w}",
                map.height(),
                map.width()
            )));
        }
        for (z, &label) in map.as_slice().iter().enumerate() {
            if label == IGNORE_LABEL {
                continue;
            }
            if label as usize >= classes {
                return Err(DecisionError::LabelOutOfRange { label, classes });
            }
            counts[z * classes + label as usize] += 1;
            totals[z] += 1;
        }
    }
    let mut values = Vec::with_capacity(counts.len());
    for z in 0..h * w {
        let denom = totals[z] as f64 + alpha * classes as f64;
        for y in 0..classes {
            let count = counts[z * classes + y];
            if count == 0 && alpha == 0.0 {
                return Err(DecisionError::ZeroPrior { pixel: z, class: y });
            }
            values.push((count as f64 + alpha) / denom);
        }
    }
    let mut map = PriorMap::new(h, w, classes, values)?;
    map.alpha = alpha;
    Ok(map)
}

/// Maximum likelihood rule: the class maximizing softmax over prior.
pub fn ml_decide(probs: &ProbabilityVolume, priors: &PriorMap) -> Result<SegmentationMask, DecisionError> {
    let q = probs.classes();
    if priors.classes() != q || !priors.covers(probs.height(), probs.width()) {
        return Err(DecisionError::ShapeMismatch(format!(
            "priors {}x{}x{} (scale {}) do not cover volume {}x{}x{}",
            priors.height(),
            priors.width(),
            priors.classes(),
            priors.scale(),
            probs.height(),
            probs.width(),
            q
        )));
    }
    priors.check_positive()?;
    let width = probs.width();
    let data = probs
        .pixels()
        .enumerate()
        .map(|(z, p)| {
            let prior = priors.at(z / width, z % width);
            argmax_by(q, |y| p[y] as f64 / prior[y])
        })
        .collect();
    Ok(LabelMap::new(probs.height(), width, data).expect("shape from volume"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume(pixels: &[&[f32]]) -> ProbabilityVolume {
        let q = pixels[0].len();
        ProbabilityVolume::new(1, pixels.len(), q, pixels.concat()).unwrap()
    }

    #[test]
    fn bayes_picks_max_and_breaks_ties_low() {
        let v = volume(&[&[0.2, 0.5, 0.3]]);
        assert_eq!(bayes_decide(&v).as_slice(), &[1]);
        let v = volume(&[&[0.5, 0.5]]);
        assert_eq!(bayes_decide(&v).as_slice(), &[0]);
    }

    #[test]
    fn cost_rule_examples() {
        let v = volume(&[&[0.6, 0.4]]);
        let c = CostMatrix::new(vec![vec![0.0, 10.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(c.expected_cost(0, v.pixel(0)), 10.0 * 0.4f32 as f64);
        assert_eq!(cost_decide(&v, &c).unwrap().as_slice(), &[1]);

        let v = volume(&[&[1.0, 0.0, 0.0]]);
        let c = CostMatrix::new(vec![
            vec![0.0, 7.0, 3.0],
            vec![0.5, 0.0, 2.0],
            vec![9.0, 1.0, 0.0],
        ])
        .unwrap();
        assert_eq!(cost_decide(&v, &c).unwrap().as_slice(), &[0]);
    }

    #[test]
    fn unit_costs_match_bayes() {
        let v = volume(&[&[0.2, 0.5, 0.3], &[0.5, 0.25, 0.25], &[0.1, 0.1, 0.8]]);
        let c = CostMatrix::uniform(3, 1.0).unwrap();
        assert_eq!(cost_decide(&v, &c).unwrap(), bayes_decide(&v));
    }

    #[test]
    fn zero_costs_are_degenerate() {
        let v = volume(&[&[0.2, 0.8]]);
        let c = CostMatrix::uniform(2, 0.0).unwrap();
        assert!(c.is_degenerate());
        assert_eq!(cost_decide(&v, &c).unwrap().as_slice(), &[0]);
    }

    #[test]
    fn cost_matrix_validation() {
        assert!(matches!(
            CostMatrix::new(vec![vec![0.0, 1.0]]),
            Err(DecisionError::NotSquare { .. })
        ));
        assert!(matches!(
            CostMatrix::new(vec![vec![1.0, 1.0], vec![1.0, 0.0]]),
            Err(DecisionError::NonzeroDiagonal(0))
        ));
        assert!(matches!(
            CostMatrix::from_csv("0,-1\n1,0\n"),
            Err(DecisionError::InvalidCost { .. })
        ));
        let c = CostMatrix::from_csv("0, 2.5\n1,0\n").unwrap();
        assert_eq!(c.cost(0, 1), 2.5);
        let v = volume(&[&[0.2, 0.3, 0.5]]);
        assert!(matches!(cost_decide(&v, &c), Err(DecisionError::ClassMismatch { .. })));
    }

    #[test]
    fn prior_estimation_examples() {
        let a = LabelMap::new(1, 1, vec![0]).unwrap();
        let b = LabelMap::new(1, 1, vec![1]).unwrap();
        let p = estimate_priors([&a, &b], 2, 1.0).unwrap();
        assert_eq!(p.values(), &[0.5, 0.5]);
        let p = estimate_priors([&a, &a], 2, 1.0).unwrap();
        assert_eq!(p.values(), &[0.75, 0.25]);
        let ignore = LabelMap::new(1, 1, vec![IGNORE_LABEL]).unwrap();
        let p = estimate_priors([&ignore], 2, 1.0).unwrap();
        assert_eq!(p.values(), &[0.5, 0.5]);
    }

    #[test]
    fn prior_estimation_errors() {
        let a = LabelMap::new(1, 1, vec![0]).unwrap();
        assert!(matches!(
            estimate_priors(std::iter::empty(), 2, 1.0),
            Err(DecisionError::EmptyInput)
        ));
        assert!(matches!(
            estimate_priors([&a], 2, 0.0),
            Err(DecisionError::ZeroPrior { pixel: 0, class: 1 })
        ));
        let big = LabelMap::new(1, 2, vec![0, 0]).unwrap();
        assert!(matches!(
            estimate_priors([&a, &big], 2, 1.0),
            Err(DecisionError::ShapeMismatch(_))
        ));
        assert!(estimate_priors([&a], 2, -1.0).is_err());
    }

    #[test]
    fn ml_rule_examples() {
        let v = volume(&[&[0.6, 0.4]]);
        let p = PriorMap::constant(1, 1, &[0.9, 0.1]);
        assert_eq!(ml_decide(&v, &p).unwrap().as_slice(), &[1]);
        let v = volume(&[&[0.7, 0.3]]);
        let p = PriorMap::constant(1, 1, &[0.5, 0.5]);
        assert_eq!(ml_decide(&v, &p).unwrap().as_slice(), &[0]);
        let zero = PriorMap::constant(1, 1, &[1.0, 0.0]);
        assert!(matches!(
            ml_decide(&v, &zero),
            Err(DecisionError::NonpositivePrior { pixel: 0, class: 1 })
        ));
        let wrong = PriorMap::constant(2, 1, &[0.5, 0.5]);
        assert!(matches!(ml_decide(&v, &wrong), Err(DecisionError::ShapeMismatch(_))));
    }

    #[test]
    fn downscaled_priors_still_sum_to_one() {
        let maps: Vec<LabelMap> = (0..4u8)
            .map(|k| LabelMap::new(3, 5, (0..15).map(|i| (i as u8 + k) % 3).collect()).unwrap())
            .collect();
        let p = estimate_priors(&maps, 3, 1.0).unwrap();
        for cell in p.values().chunks(3) {
            assert!((cell.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let small = p.downscale(2);
        assert_eq!((small.height(), small.width(), small.scale()), (2, 3, 2));
        assert!(small.covers(3, 5));
        for cell in small.values().chunks(3) {
            assert!((cell.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(small.at(2, 4), &small.values()[15..18]);
        let refit = PriorMap::new(2, 3, 3, small.values().to_vec()).unwrap().fit_to(3, 5).unwrap();
        assert_eq!(refit.scale(), 2);
    }
}
