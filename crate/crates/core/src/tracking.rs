//! Overlap-based tracking of predicted segments through a sequence and
//! assembly of metric time series along the tracks.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, MetricsDataset, Row};
use crate::io::format_sig;
use crate::segments::{SegmentSet, NO_SEGMENT};

/// Column-name prefix of the per-lag presence flags. The anchor frame's flag
/// is named exactly this, earlier lags `present@t-j`.
pub const PRESENT_COLUMN: &str = "present";

/// Largest supported time-series depth.
pub const MAX_DEPTH: usize = 10;

#[derive(Debug, Error)]
pub enum TrackingError {
    #[error("frame {frame} is {got_h}x{got_w}, expected {h}x{w}")]
    ResolutionMismatch {
        frame: String,
        h: usize,
        w: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("no metrics for segment {segment} of frame {frame}")]
    MissingMetrics { frame: usize, segment: u32 },
    #[error("depth {0} exceeds the maximum of {MAX_DEPTH}")]
    DepthTooLarge(usize),
    #[error("{tracks} frames of segments but {metrics} metric tables")]
    LengthMismatch { tracks: usize, metrics: usize },
    #[error("minimum overlap must be at least one pixel")]
    ZeroOverlap,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    None,
    /// Constant velocity from the last two centroids of the track.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub min_overlap: usize,
    pub shift: ShiftMode,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            min_overlap: 1,
            shift: ShiftMode::Linear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchPair {
    pub prev: u32,
    pub cur: u32,
    /// Pixels of the shifted previous segment covering the current one.
    pub overlap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: u32,
    pub class_id: u8,
    /// Position of the first member frame in the sequence.
    pub start: usize,
    /// Segment id in every frame from `start` on, without gaps.
    pub segments: Vec<u32>,
    pub centroids: Vec<(f64, f64)>,
    /// Shift used to match each member from its predecessor; zero for the
    /// first member.
    pub shifts: Vec<(i64, i64)>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn end(&self) -> usize {
        self.start + self.segments.len()
    }

    pub fn segment_at(&self, frame: usize) -> Option<u32> {
        (frame >= self.start && frame < self.end()).then(|| self.segments[frame - self.start])
    }

    fn expected_shift(&self, mode: ShiftMode) -> (i64, i64) {
        let n = self.centroids.len();
        if mode == ShiftMode::None || n < 2 {
            return (0, 0);
        }
        let (a, b) = (self.centroids[n - 2], self.centroids[n - 1]);
        ((b.0 - a.0).round() as i64, (b.1 - a.1).round() as i64)
    }
}

fn check_shape(a: &SegmentSet, b: &SegmentSet) -> Result<(), TrackingError> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(TrackingError::ResolutionMismatch {
            frame: b.frame_id.clone(),
            h: a.height(),
            w: a.width(),
            got_h: b.height(),
            got_w: b.width(),
        });
    }
    Ok(())
}

/// Same-class overlap counts of every shifted `prev` segment with `cur`.
/// Shifted pixels leaving the frame are dropped.
fn overlaps(prev: &SegmentSet, shifts: &[(i64, i64)], cur: &SegmentSet) -> Vec<MatchPair> {
    let (h, w) = (cur.height() as i64, cur.width() as i64);
    let index = cur.index_map();
    let mut out = Vec::new();
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for (k, &(dr, dc)) in prev.segments().iter().zip(shifts) {
        counts.clear();
        for run in &k.runs {
            let r = run.row as i64 + dr;
            if r < 0 || r >= h {
                continue;
            }
            let c0 = (run.start as i64 + dc).max(0);
            let c1 = (run.end as i64 + dc).min(w);
            for c in c0..c1 {
                let j = index[(r * w + c) as usize];
                if j != NO_SEGMENT && cur.segments()[j as usize].class_id == k.class_id {
                    *counts.entry(j).or_default() += 1;
                }
            }
        }
        out.extend(counts.iter().map(|(&j, &n)| MatchPair {
            prev: k.id,
            cur: j,
            overlap: n,
        }));
    }
    out
}

/// Greedy one-to-one assignment by descending overlap, ties by lower
/// (prev, cur) ids.
fn assign(mut candidates: Vec<MatchPair>, min_overlap: usize, prev_n: usize, cur_n: usize) -> Vec<MatchPair> {
    candidates.retain(|p| p.overlap >= min_overlap);
    candidates.sort_by(|a, b| {
        b.overlap
            .cmp(&a.overlap)
            .then(a.prev.cmp(&b.prev))
            .then(a.cur.cmp(&b.cur))
    });
    let mut prev_used = vec![false; prev_n];
    let mut cur_used = vec![false; cur_n];
    let mut out = Vec::new();
    for p in candidates {
        if !prev_used[p.prev as usize] && !cur_used[p.cur as usize] {
            prev_used[p.prev as usize] = true;
            cur_used[p.cur as usize] = true;
            out.push(p);
        }
    }
    out.sort_by_key(|p| p.prev);
    out
}

/// Matches `prev` segments to `cur` segments using explicit per-segment
/// shifts (indexed by `prev` segment id).
pub fn match_shifted(
    prev: &SegmentSet,
    shifts: &[(i64, i64)],
    cur: &SegmentSet,
    min_overlap: usize,
) -> Result<Vec<MatchPair>, TrackingError> {
    check_shape(prev, cur)?;
    if min_overlap == 0 {
        return Err(TrackingError::ZeroOverlap);
    }
    Ok(assign(overlaps(prev, shifts, cur), min_overlap, prev.len(), cur.len()))
}

/// Matches the segments of two consecutive frames. With linear shift mode
/// and a frame `prev2` before `prev`, each `prev` segment matched from
/// `prev2` (without shift) is moved by its centroid displacement first.
pub fn match_frames(
    prev: &SegmentSet,
    prev2: Option<&SegmentSet>,
    cur: &SegmentSet,
    cfg: &MatchConfig,
) -> Result<Vec<MatchPair>, TrackingError> {
    let mut shifts = vec![(0, 0); prev.len()];
    if let (Some(before), ShiftMode::Linear) = (prev2, cfg.shift) {
        check_shape(before, prev)?;
        let zero = vec![(0, 0); before.len()];
        for p in match_shifted(before, &zero, prev, cfg.min_overlap)? {
            let a = before.segments()[p.prev as usize].centroid;
            let b = prev.segments()[p.cur as usize].centroid;
            shifts[p.cur as usize] = ((b.0 - a.0).round() as i64, (b.1 - a.1).round() as i64);
        }
    }
    match_shifted(prev, &shifts, cur, cfg.min_overlap)
}

/// Links the segments of an ordered sequence into gap-free tracks. Track ids
/// are allocated by frame position, then segment id.
pub fn build_tracks(frames: &[SegmentSet], cfg: &MatchConfig) -> Result<Vec<Track>, TrackingError> {
    let mut tracks: Vec<Track> = Vec::new();
    // Track index of every segment of the previous frame.
    let mut open: Vec<usize> = Vec::new();
    for (t, frame) in frames.iter().enumerate() {
        let mut next = vec![usize::MAX; frame.len()];
        let mut shift_of = vec![(0, 0); frame.len()];
        if t > 0 {
            let prev = &frames[t - 1];
            let shifts: Vec<(i64, i64)> = open.iter().map(|&i| tracks[i].expected_shift(cfg.shift)).collect();
            for p in match_shifted(prev, &shifts, frame, cfg.min_overlap)? {
                next[p.cur as usize] = open[p.prev as usize];
                shift_of[p.cur as usize] = shifts[p.prev as usize];
            }
        }
        for k in frame.segments() {
            let i = k.id as usize;
            if next[i] == usize::MAX {
                next[i] = tracks.len();
                tracks.push(Track {
                    id: tracks.len() as u32,
                    class_id: k.class_id,
                    start: t,
                    segments: vec![k.id],
                    centroids: vec![k.centroid],
                    shifts: vec![(0, 0)],
                });
            } else {
                let track = &mut tracks[next[i]];
                track.segments.push(k.id);
                track.centroids.push(k.centroid);
                track.shifts.push(shift_of[i]);
            }
        }
        open = next;
    }
    Ok(tracks)
}

/// Track table: one line per (track, frame) membership.
pub fn tracks_csv(tracks: &[Track], frame_indices: &[u32]) -> String {
    let mut out = String::from("track_id,frame_index,segment_id,class_id,centroid_r,centroid_c,shift_r,shift_c\n");
    for t in tracks {
        for (j, &seg) in t.segments.iter().enumerate() {
            let (r, c) = t.centroids[j];
            let (sr, sc) = t.shifts[j];
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                t.id,
                frame_indices[t.start + j],
                seg,
                t.class_id,
                format_sig(r),
                format_sig(c),
                sr,
                sc
            );
        }
    }
    out
}

/// Column names of a depth-`depth` time series over `schema`, ordered from
/// the oldest lag to the anchor frame, followed by the presence flags.
pub fn time_series_schema(schema: &[String], depth: usize) -> Vec<String> {
    let mut names = Vec::with_capacity((depth + 1) * (schema.len() + 1));
    for j in (1..=depth).rev() {
        names.extend(schema.iter().map(|s| format!("{s}@t-{j}")));
    }
    names.extend(schema.iter().cloned());
    for j in (1..=depth).rev() {
        names.push(format!("{PRESENT_COLUMN}@t-{j}"));
    }
    names.push(PRESENT_COLUMN.to_string());
    names
}

/// One row per row of `metrics[t]`, extended by the metrics of the same
/// track in the `depth` previous frames. Lags before the birth of a track
/// repeat its first metrics with presence flag 0. Segments that belong to
/// no track count as born in their frame.
pub fn assemble_time_series(
    tracks: &[Track],
    metrics: &[MetricsDataset],
    depth: usize,
) -> Result<MetricsDataset, TrackingError> {
    if depth > MAX_DEPTH {
        return Err(TrackingError::DepthTooLarge(depth));
    }
    let schema = metrics.first().map(|m| m.schema().to_vec()).unwrap_or_default();
    let mut out = MetricsDataset::new(time_series_schema(&schema, depth));
    let index: Vec<HashMap<u32, usize>> = metrics
        .iter()
        .map(|m| m.rows().iter().enumerate().map(|(i, r)| (r.segment_id, i)).collect())
        .collect();
    let mut member: HashMap<(usize, u32), usize> = HashMap::new();
    for (i, track) in tracks.iter().enumerate() {
        if track.end() > metrics.len() {
            return Err(TrackingError::LengthMismatch {
                tracks: track.end(),
                metrics: metrics.len(),
            });
        }
        for (j, &seg) in track.segments.iter().enumerate() {
            member.insert((track.start + j, seg), i);
        }
    }
    let lookup = |frame: usize, segment: u32| -> Result<&Row, TrackingError> {
        index[frame]
            .get(&segment)
            .map(|&i| &metrics[frame].rows()[i])
            .ok_or(TrackingError::MissingMetrics { frame, segment })
    };

    for (t, table) in metrics.iter().enumerate() {
        if table.schema() != schema.as_slice() {
            return Err(DatasetError::SchemaMismatch(format!("frame {t} has a different schema")).into());
        }
        for row in table.rows() {
            let track = member.get(&(t, row.segment_id)).map(|&i| &tracks[i]);
            let birth = track.map_or(t, |k| k.start);
            let mut features = Vec::with_capacity(out.schema().len());
            let mut flags = Vec::with_capacity(depth + 1);
            for j in (1..=depth).rev() {
                let (frame, present) = if t >= birth + j { (t - j, 1.0) } else { (birth, 0.0) };
                let segment = track.map_or(row.segment_id, |k| k.segment_at(frame).expect("inside track"));
                features.extend_from_slice(&lookup(frame, segment)?.features);
                flags.push(present);
            }
            features.extend_from_slice(&row.features);
            flags.push(1.0);
            features.extend(flags);
            out.push(Row {
                features,
                ..row.clone()
            })?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Source;
    use crate::segments::extract_segments;
    use crate::volume::LabelMap;

    fn square(h: usize, w: usize, r: usize, c: usize, size: usize) -> SegmentSet {
        let mut m = LabelMap::filled(h, w, 0);
        for i in r..r + size {
            for j in c..c + size {
                m.set(i, j, 1);
            }
        }
        extract_segments(&m, None)
    }

    fn fg(set: &SegmentSet) -> u32 {
        set.segments().iter().find(|k| k.class_id == 1).unwrap().id
    }

    #[test]
    fn identical_frames_match_every_segment() {
        let a = square(8, 8, 2, 2, 3);
        let pairs = match_frames(&a, None, &a, &MatchConfig::default()).unwrap();
        assert_eq!(pairs.len(), a.len());
        assert!(pairs.iter().all(|p| p.prev == p.cur));
    }

    #[test]
    fn disjoint_segments_do_not_match() {
        let mut a = LabelMap::filled(4, 4, 0);
        a.set(0, 0, 1);
        let mut b = LabelMap::filled(4, 4, 0);
        b.set(3, 3, 1);
        let pairs = match_frames(
            &extract_segments(&a, None),
            None,
            &extract_segments(&b, None),
            &MatchConfig::default(),
        )
        .unwrap();
        assert!(pairs.iter().all(|p| p.overlap > 0));
        let (sa, sb) = (extract_segments(&a, None), extract_segments(&b, None));
        assert!(!pairs.iter().any(|p| p.prev == fg(&sa) && p.cur == fg(&sb)));
    }

    #[test]
    fn shift_correction_raises_overlap() {
        let f: Vec<SegmentSet> = (0..3).map(|t| square(8, 16, 2, 1 + 2 * t, 4)).collect();
        let with = match_frames(&f[1], Some(&f[0]), &f[2], &MatchConfig::default()).unwrap();
        let without = match_frames(&f[1], None, &f[2], &MatchConfig::default()).unwrap();
        let pick = |p: &[MatchPair]| p.iter().find(|m| m.prev == fg(&f[1])).unwrap().overlap;
        assert_eq!(pick(&with), 16);
        assert_eq!(pick(&without), 8);
    }

    #[test]
    fn tracks_of_identical_and_gapped_frames() {
        let a = square(6, 6, 1, 1, 2);
        let tracks = build_tracks(&[a.clone(), a.clone(), a.clone()], &MatchConfig::default()).unwrap();
        assert_eq!(tracks.len(), a.len());
        assert!(tracks.iter().all(|t| t.len() == 3));

        let empty = extract_segments(&LabelMap::filled(6, 6, 0), None);
        let tracks = build_tracks(&[a.clone(), empty, a], &MatchConfig::default()).unwrap();
        assert_eq!(tracks.iter().filter(|t| t.class_id == 1).count(), 2);
        assert!(build_tracks(&[], &MatchConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn resolution_mismatch() {
        let a = square(6, 6, 1, 1, 2);
        let b = square(7, 6, 1, 1, 2);
        assert!(matches!(
            build_tracks(&[a, b], &MatchConfig::default()),
            Err(TrackingError::ResolutionMismatch { .. })
        ));
    }

    fn table(frame: usize, values: &[f64]) -> MetricsDataset {
        MetricsDataset::from_rows(
            vec!["a".into()],
            values
                .iter()
                .enumerate()
                .map(|(i, &v)| Row {
                    frame_id: format!("f{frame}"),
                    segment_id: i as u32,
                    source: Source::Real,
                    features: vec![v],
                    iou: Some(0.5),
                    is_fp: Some(false),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn time_series_layout_and_padding() {
        let track = |start, segments: Vec<u32>| Track {
            id: 0,
            class_id: 1,
            start,
            centroids: vec![(0.0, 0.0); segments.len()],
            shifts: vec![(0, 0); segments.len()],
            segments,
        };
        let tracks = vec![track(0, vec![0, 0, 0]), track(2, vec![1])];
        let metrics = vec![table(0, &[1.0]), table(1, &[2.0]), table(2, &[3.0, 9.0])];

        let d0 = assemble_time_series(&tracks, &metrics, 0).unwrap();
        assert_eq!(d0.schema(), ["a", "present"]);
        assert_eq!(d0.rows()[2].features, vec![3.0, 1.0]);

        let d2 = assemble_time_series(&tracks, &metrics, 2).unwrap();
        assert_eq!(d2.schema(), ["a@t-2", "a@t-1", "a", "present@t-2", "present@t-1", "present"]);
        assert_eq!(d2.depth(), 2);
        assert_eq!(d2.rows()[2].features, vec![1.0, 2.0, 3.0, 1.0, 1.0, 1.0]);
        assert_eq!(d2.rows()[3].features, vec![9.0, 9.0, 9.0, 0.0, 0.0, 1.0]);
        assert_eq!(d2.rows()[1].features, vec![1.0, 1.0, 2.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn missing_metrics() {
        let tracks = vec![Track {
            id: 0,
            class_id: 0,
            start: 0,
            segments: vec![4, 0],
            centroids: vec![(0.0, 0.0); 2],
            shifts: vec![(0, 0); 2],
        }];
        let metrics = vec![table(0, &[1.0]), table(1, &[2.0])];
        assert!(matches!(
            assemble_time_series(&tracks, &metrics, 1),
            Err(TrackingError::MissingMetrics { frame: 0, segment: 4 })
        ));
    }
}
