//! Connected components of segmentation masks and their overlap with
//! ground truth.
//!
//! Components use 8-connectivity; a pixel is on the boundary of its segment
//! when one of its 4-neighbors lies outside the segment (the frame border
//! counts as outside). Pixels labeled [`IGNORE_LABEL`] never belong to a
//! segment, and when an ignore map is supplied its ignore pixels are removed
//! from the mask before labeling.

use std::collections::HashSet;
use std::fmt::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::format_sig;
use crate::volume::{LabelMap, IGNORE_LABEL};

pub const NO_SEGMENT: u32 = u32::MAX;

#[derive(Debug, Error, PartialEq)]
pub enum SegmentError {
    #[error("resolution mismatch: {0}x{1} vs {2}x{3}")]
    ResolutionMismatch(usize, usize, usize, usize),
}

/// A horizontal run of pixels `[start, end)` in one row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Run {
    pub row: u32,
    pub start: u32,
    pub end: u32,
}

impl Run {
    pub fn len(&self) -> usize {
        (self.end - self.start) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Inclusive pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_row: u32,
    pub min_col: u32,
    pub max_row: u32,
    pub max_col: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub id: u32,
    pub class_id: u8,
    /// Runs sorted by row, then by start column.
    pub runs: Vec<Run>,
    pub size: usize,
    pub boundary_size: usize,
    pub interior_size: usize,
    pub bbox: BoundingBox,
    /// Mean pixel position as (row, col).
    pub centroid: (f64, f64),
}

impl Segment {
    /// Pixel coordinates (row, col) in raster order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.runs
            .iter()
            .flat_map(|r| (r.start..r.end).map(move |c| (r.row as usize, c as usize)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentSource {
    Predicted,
    GroundTruth,
    Pseudo,
}

/// All segments of one frame plus a per-pixel segment index.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSet {
    pub frame_id: String,
    pub source: SegmentSource,
    height: usize,
    width: usize,
    segments: Vec<Segment>,
    index: Vec<u32>,
}

impl SegmentSet {
    pub fn tagged(mut self, frame_id: impl Into<String>, source: SegmentSource) -> Self {
        self.frame_id = frame_id.into();
        self.source = source;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&Segment> {
        self.segments.get(id as usize)
    }

    /// Segment id at a flat pixel index, or [`NO_SEGMENT`].
    #[inline]
    pub fn index_at(&self, pixel: usize) -> u32 {
        self.index[pixel]
    }

    pub fn index_map(&self) -> &[u32] {
        &self.index
    }

    #[inline]
    pub fn class_at(&self, pixel: usize) -> Option<u8> {
        match self.index[pixel] {
            NO_SEGMENT => None,
            id => Some(self.segments[id as usize].class_id),
        }
    }

    /// Whether a pixel of a segment touches the outside of that segment
    /// through one of its 4-neighbors.
    #[inline]
    pub fn is_boundary(&self, row: usize, col: usize) -> bool {
        let own = self.index[row * self.width + col];
        row == 0
            || col == 0
            || row + 1 == self.height
            || col + 1 == self.width
            || self.index[(row - 1) * self.width + col] != own
            || self.index[(row + 1) * self.width + col] != own
            || self.index[row * self.width + col - 1] != own
            || self.index[row * self.width + col + 1] != own
    }

    fn check_same_frame(&self, other: &SegmentSet) -> Result<(), SegmentError> {
        if self.height != other.height || self.width != other.width {
            return Err(SegmentError::ResolutionMismatch(
                self.height,
                self.width,
                other.height,
                other.width,
            ));
        }
        Ok(())
    }
}

struct DisjointSets {
    parent: Vec<usize>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Keeps the smaller root so roots stay at the earliest run.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Labels the connected same-class regions of `mask`. Segment ids follow the
/// raster order of each segment's first pixel.
pub fn extract_segments(mask: &LabelMap, ignore: Option<&LabelMap>) -> SegmentSet {
    let (h, w) = (mask.height(), mask.width());
    if let Some(ig) = ignore {
        assert!(mask.same_shape(ig), "ignore map must match the mask resolution");
    }
    let excluded = |i: usize| {
        mask.as_slice()[i] == IGNORE_LABEL || ignore.is_some_and(|ig| ig.is_ignored(i))
    };

    // Runs per row, with their labels.
    let mut runs: Vec<(Run, u8)> = Vec::new();
    let mut row_start = Vec::with_capacity(h + 1);
    for r in 0..h {
        row_start.push(runs.len());
        let mut c = 0;
        while c < w {
            let i = r * w + c;
            if excluded(i) {
                c += 1;
                continue;
            }
            let label = mask.as_slice()[i];
            let start = c;
            while c < w && !excluded(r * w + c) && mask.as_slice()[r * w + c] == label {
                c += 1;
            }
            runs.push((
                Run {
                    row: r as u32,
                    start: start as u32,
                    end: c as u32,
                },
                label,
            ));
        }
    }
    row_start.push(runs.len());

    let mut sets = DisjointSets::new(runs.len());
    for r in 1..h {
        let (prev, cur) = (row_start[r - 1]..row_start[r], row_start[r]..row_start[r + 1]);
        let mut p = prev.start;
        for i in cur {
            let (run, label) = runs[i];
            // Skip previous-row runs ending before this run's diagonal reach.
            while p < prev.end && runs[p].0.end < run.start {
                p += 1;
            }
            let mut j = p;
            while j < prev.end && runs[j].0.start <= run.end {
                if runs[j].1 == label {
                    sets.union(i, j);
                }
                j += 1;
            }
        }
    }

    let mut id_of_root = vec![NO_SEGMENT; runs.len()];
    let mut members: Vec<Vec<Run>> = Vec::new();
    let mut classes = Vec::new();
    let mut index = vec![NO_SEGMENT; h * w];
    for (i, &(run, label)) in runs.iter().enumerate() {
        let root = sets.find(i);
        if id_of_root[root] == NO_SEGMENT {
            id_of_root[root] = members.len() as u32;
            members.push(Vec::new());
            classes.push(label);
        }
        let id = id_of_root[root];
        members[id as usize].push(run);
        let base = run.row as usize * w;
        index[base + run.start as usize..base + run.end as usize].fill(id);
    }

    let mut set = SegmentSet {
        frame_id: String::new(),
        source: SegmentSource::Predicted,
        height: h,
        width: w,
        segments: Vec::with_capacity(members.len()),
        index,
    };
    for (id, (runs, class_id)) in members.into_iter().zip(classes).enumerate() {
        let mut segment = Segment {
            id: id as u32,
            class_id,
            runs,
            size: 0,
            boundary_size: 0,
            interior_size: 0,
            bbox: BoundingBox {
                min_row: u32::MAX,
                min_col: u32::MAX,
                max_row: 0,
                max_col: 0,
            },
            centroid: (0.0, 0.0),
        };
        let (mut sum_r, mut sum_c) = (0.0, 0.0);
        let (mut size, mut boundary) = (0, 0);
        let mut bb = segment.bbox;
        for (r, c) in segment.pixels() {
            size += 1;
            if set.is_boundary(r, c) {
                boundary += 1;
            }
            sum_r += r as f64;
            sum_c += c as f64;
            bb.min_row = bb.min_row.min(r as u32);
            bb.max_row = bb.max_row.max(r as u32);
            bb.min_col = bb.min_col.min(c as u32);
            bb.max_col = bb.max_col.max(c as u32);
        }
        segment.size = size;
        segment.boundary_size = boundary;
        segment.bbox = bb;
        segment.interior_size = segment.size - segment.boundary_size;
        segment.centroid = (sum_r / segment.size as f64, sum_c / segment.size as f64);
        set.segments.push(segment);
    }
    set
}

/// Overlap of one predicted segment with the same-class ground truth it
/// touches.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Overlap {
    intersection: usize,
    union: usize,
}

fn overlap(k: &Segment, other: &SegmentSet) -> Overlap {
    let w = other.width();
    let mut touched: HashSet<u32> = HashSet::new();
    let mut intersection = 0;
    for (r, c) in k.pixels() {
        let id = other.index_at(r * w + c);
        if id != NO_SEGMENT && other.segments[id as usize].class_id == k.class_id {
            intersection += 1;
            touched.insert(id);
        }
    }
    let covered: usize = touched.iter().map(|&id| other.segments[id as usize].size).sum();
    Overlap {
        intersection,
        union: k.size + covered - intersection,
    }
}

/// IoU of `k` with the union of same-class ground-truth segments that
/// intersect it; 0 when there are none.
pub fn segment_iou(k: &Segment, gt: &SegmentSet) -> f64 {
    let o = overlap(k, gt);
    if o.intersection == 0 {
        0.0
    } else {
        o.intersection as f64 / o.union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedMatch {
    pub segment_id: u32,
    pub class_id: u8,
    pub iou: f64,
    pub is_fp: bool,
    /// Fraction of the segment covered by ground truth of its class.
    pub precision: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthMatch {
    pub segment_id: u32,
    pub class_id: u8,
    /// Fraction of the segment covered by prediction of its class.
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub predicted: Vec<PredictedMatch>,
    pub ground_truth: Vec<GroundTruthMatch>,
}

impl MatchResult {
    pub fn for_segment(&self, id: u32) -> Option<&PredictedMatch> {
        self.predicted.get(id as usize).filter(|m| m.segment_id == id)
    }
}

/// IoU, false-positive flag and precision for every predicted segment, and
/// recall for every ground-truth segment.
pub fn match_segments(pred: &SegmentSet, gt: &SegmentSet) -> Result<MatchResult, SegmentError> {
    pred.check_same_frame(gt)?;
    let predicted = pred
        .segments()
        .iter()
        .map(|k| {
            let o = overlap(k, gt);
            let iou = if o.intersection == 0 {
                0.0
            } else {
                o.intersection as f64 / o.union as f64
            };
            PredictedMatch {
                segment_id: k.id,
                class_id: k.class_id,
                iou,
                is_fp: o.intersection == 0,
                precision: o.intersection as f64 / k.size as f64,
            }
        })
        .collect();
    let ground_truth = gt
        .segments()
        .iter()
        .map(|k| GroundTruthMatch {
            segment_id: k.id,
            class_id: k.class_id,
            recall: overlap(k, pred).intersection as f64 / k.size as f64,
        })
        .collect();
    Ok(MatchResult {
        predicted,
        ground_truth,
    })
}

/// Segment-wise precision (predicted segments) and recall (ground-truth
/// segments) restricted to the given class ids.
pub fn segment_precision_recall(
    pred: &SegmentSet,
    gt: &SegmentSet,
    classes: &[u8],
) -> Result<MatchResult, SegmentError> {
    let all = match_segments(pred, gt)?;
    Ok(MatchResult {
        predicted: all
            .predicted
            .into_iter()
            .filter(|m| classes.contains(&m.class_id))
            .collect(),
        ground_truth: all
            .ground_truth
            .into_iter()
            .filter(|m| classes.contains(&m.class_id))
            .collect(),
    })
}

/// Segment table, one line per segment. The overlap columns stay empty
/// without `matches`.
pub fn segment_table_csv(set: &SegmentSet, matches: Option<&MatchResult>) -> String {
    let mut out = String::from(
        "frame_id,segment_id,class_id,size,boundary_size,interior_size,bbox,centroid_r,centroid_c,iou,is_fp,precision\n",
    );
    for k in &set.segments {
        let b = k.bbox;
        let (iou, fp, precision) = match matches.and_then(|m| m.for_segment(k.id)) {
            Some(m) => (
                format_sig(m.iou),
                if m.is_fp { "1" } else { "0" }.to_string(),
                format_sig(m.precision),
            ),
            None => Default::default(),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{} {} {} {},{},{},{},{},{}",
            set.frame_id,
            k.id,
            k.class_id,
            k.size,
            k.boundary_size,
            k.interior_size,
            b.min_row,
            b.min_col,
            b.max_row,
            b.max_col,
            format_sig(k.centroid.0),
            format_sig(k.centroid.1),
            iou,
            fp,
            precision
        );
    }
    out
}
